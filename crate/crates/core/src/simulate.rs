//! Synthetic video with a dark noisy base, a bright laser-heated zone (LHZ) moving along a
//! scan path, Poisson spatters, and an optional cooling hot-spot.
//!
//! All randomness comes from `ChaCha8Rng`; replication `i` of a batch draws from stream `i`
//! of the generator seeded with the master seed.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::frame::{write_pgm, write_stream, Frame, FrameStream};

pub const HOTSPOT_SIZES: [usize; 5] = [4, 9, 20, 45, 80];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Cross,
    Disk,
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Cross => "cross",
            Shape::Disk => "disk",
        })
    }
}

impl FromStr for Shape {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Shape::Cross),
            "disk" => Ok(Shape::Disk),
            _ => Err(Error::invalid(
                "shape",
                format!("expected cross or disk, got {s:?}"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LhzConfig {
    pub radius: f64,
    pub peak: f64,
    /// Polyline traversed at `speed`, wrapping from the last point back to the first.
    pub waypoints: Vec<(f64, f64)>,
    /// Pixels per frame along the path.
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatterConfig {
    /// Poisson mean of new spatters per frame.
    pub rate: f64,
    pub min_intensity: f64,
    pub max_intensity: f64,
    pub lifetime: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HotspotConfig {
    pub size: usize,
    pub shape: Shape,
    pub onset: usize,
    pub duration: usize,
    /// Cooling-shape constant `H` in `(0, 1]`.
    pub h: f64,
    pub saturation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub base_intensity: f64,
    pub noise_sigma: f64,
    pub lhz: LhzConfig,
    pub spatter: SpatterConfig,
    pub hotspot: HotspotConfig,
    pub seed: u64,
}

/// Serpentine raster over the frame with `spacing` pixels between hatch lines.
pub fn raster_path(width: usize, height: usize, margin: f64, spacing: f64) -> Vec<(f64, f64)> {
    let (x0, x1) = (margin, width as f64 - 1.0 - margin);
    let mut pts = Vec::new();
    let mut y = margin;
    let mut left_to_right = true;
    while y <= height as f64 - 1.0 - margin {
        let (a, b) = if left_to_right { (x0, x1) } else { (x1, x0) };
        pts.push((a, y));
        pts.push((b, y));
        left_to_right = !left_to_right;
        y += spacing;
    }
    pts
}

impl Default for SimConfig {
    fn default() -> Self {
        let (width, height) = (126, 136);
        SimConfig {
            width,
            height,
            frames: 200,
            base_intensity: 10.0,
            noise_sigma: 2.0,
            lhz: LhzConfig {
                radius: 4.0,
                peak: 255.0,
                waypoints: raster_path(width, height, 10.0, 12.0),
                speed: 12.0,
            },
            spatter: SpatterConfig {
                rate: 3.0,
                min_intensity: 180.0,
                max_intensity: 255.0,
                lifetime: 1,
            },
            hotspot: HotspotConfig {
                size: 20,
                shape: Shape::Cross,
                onset: 50,
                duration: 100,
                h: 0.95,
                saturation: 255.0,
            },
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::invalid(
                "frames",
                "width, height and frames must be >= 1",
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma", "must be >= 0"));
        }
        if !(self.lhz.radius >= 0.0) || !(self.lhz.speed >= 0.0) {
            return Err(Error::invalid("lhz", "radius and speed must be >= 0"));
        }
        if self.lhz.waypoints.is_empty() {
            return Err(Error::invalid(
                "lhz",
                "scan path needs at least one waypoint",
            ));
        }
        let s = &self.spatter;
        if !(s.rate >= 0.0 && s.rate.is_finite()) {
            return Err(Error::invalid("spatter_rate", "must be finite and >= 0"));
        }
        if !(s.min_intensity <= s.max_intensity) || s.lifetime == 0 {
            return Err(Error::invalid(
                "spatter",
                "need min <= max intensity and lifetime >= 1",
            ));
        }
        self.validate_hotspot()
    }

    fn validate_hotspot(&self) -> Result<()> {
        let hs = &self.hotspot;
        if hs.duration == 0 {
            return Err(Error::invalid("duration", "must be >= 1"));
        }
        if hs.onset + hs.duration > self.frames {
            return Err(Error::invalid(
                "onset",
                format!(
                    "onset {} + duration {} exceeds {} frames",
                    hs.onset, hs.duration, self.frames
                ),
            ));
        }
        if hs.size == 0 || hs.size > self.width * self.height {
            return Err(Error::invalid("size", "must lie in 1..=width*height"));
        }
        if !(hs.h > 0.0 && hs.h <= 1.0) {
            return Err(Error::invalid("h", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// `255 / (1 + exp(0.2 (t_rel − H τ)))`.
pub fn hotspot_intensity(t_rel: f64, tau: f64, h: f64) -> f64 {
    255.0 / (1.0 + (0.2 * (t_rel - h * tau)).exp())
}

/// Round half to even, clamp to the 8-bit range.
pub fn to_u8(v: f64) -> u8 {
    v.round_ties_even().clamp(0.0, 255.0) as u8
}

/// LHZ centroid after travelling `frame · speed` pixels along the closed polyline.
pub fn lhz_centroid(lhz: &LhzConfig, frame: usize) -> (f64, f64) {
    let pts = &lhz.waypoints;
    if pts.len() == 1 {
        return pts[0];
    }
    let seg_len = |i: usize| {
        let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
        ((b.0 - a.0).powi(2) + (b.1 - a.1).powi(2)).sqrt()
    };
    let total: f64 = (0..pts.len()).map(seg_len).sum();
    if total == 0.0 {
        return pts[0];
    }
    let mut d = (frame as f64 * lhz.speed) % total;
    for i in 0..pts.len() {
        let l = seg_len(i);
        if d <= l && l > 0.0 {
            let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
            let f = d / l;
            return (a.0 + f * (b.0 - a.0), a.1 + f * (b.1 - a.1));
        }
        d -= l;
    }
    pts[0]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub stream: FrameStream,
    pub centroids: Vec<(f64, f64)>,
    /// Number of spatters spawned over the whole stream.
    pub spatter_count: usize,
}

/// Base field, moving LHZ disk and spatters; deterministic in `cfg.seed`.
pub fn generate_background(cfg: &SimConfig) -> Result<Background> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_with(cfg, &mut rng)
}

fn generate_with(cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Result<Background> {
    let (w, h) = (cfg.width, cfg.height);
    let n = w * h;
    let noise = Normal::new(0.0, cfg.noise_sigma)
        .map_err(|e| Error::invalid("noise_sigma", e.to_string()))?;
    let poisson = if cfg.spatter.rate > 0.0 {
        Some(
            Poisson::new(cfg.spatter.rate)
                .map_err(|e| Error::invalid("spatter_rate", e.to_string()))?,
        )
    } else {
        None
    };
    let mut pixels = Vec::with_capacity(n * cfg.frames);
    let mut centroids = Vec::with_capacity(cfg.frames);
    // (pixel, intensity, frames left)
    let mut live: Vec<(usize, f64, usize)> = Vec::new();
    let mut spatter_count = 0;
    let mut values = vec![0.0; n];
    let r2 = cfg.lhz.radius * cfg.lhz.radius;
    for t in 0..cfg.frames {
        for v in values.iter_mut() {
            *v = cfg.base_intensity
                + if cfg.noise_sigma > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
        }
        let (cx, cy) = lhz_centroid(&cfg.lhz, t);
        centroids.push((cx, cy));
        let (y0, y1) = (
            (cy - cfg.lhz.radius).floor().max(0.0) as usize,
            ((cy + cfg.lhz.radius).ceil().max(0.0) as usize).min(h - 1),
        );
        let (x0, x1) = (
            (cx - cfg.lhz.radius).floor().max(0.0) as usize,
            ((cx + cfg.lhz.radius).ceil().max(0.0) as usize).min(w - 1),
        );
        for y in y0..=y1 {
            for x in x0..=x1 {
                if (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2) <= r2 {
                    let v = &mut values[y * w + x];
                    *v = v.max(cfg.lhz.peak);
                }
            }
        }
        if let Some(p) = &poisson {
            let k = p.sample(rng) as usize;
            for _ in 0..k {
                let pix = rng.random_range(0..n);
                let s = &cfg.spatter;
                let inten = if s.max_intensity > s.min_intensity {
                    rng.random_range(s.min_intensity..=s.max_intensity)
                } else {
                    s.min_intensity
                };
                live.push((pix, inten, s.lifetime));
            }
            spatter_count += k;
        }
        for (pix, inten, left) in live.iter_mut() {
            values[*pix] = values[*pix].max(*inten);
            *left -= 1;
        }
        live.retain(|s| s.2 > 0);
        pixels.extend(values.iter().map(|&v| to_u8(v)));
    }
    Ok(Background {
        stream: FrameStream::new(w, h, cfg.frames, pixels)?,
        centroids,
        spatter_count,
    })
}

/// Ground truth of an injected hot-spot.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub mask: Frame,
    pub onset: usize,
    pub duration: usize,
    pub size: usize,
    pub shape: Shape,
    pub centroid: (usize, usize),
    /// Pixels lost to the frame border.
    pub clipped: usize,
}

impl GroundTruth {
    pub fn pixels(&self) -> Vec<usize> {
        self.mask.support()
    }

    pub fn to_sidecar(&self) -> String {
        format!(
            "onset={}\nduration={}\nn={}\nshape={}\ncentroid_x={}\ncentroid_y={}\nclipped={}\n",
            self.onset,
            self.duration,
            self.size,
            self.shape,
            self.centroid.0,
            self.centroid.1,
            self.clipped
        )
    }

    /// Parses a sidecar; the mask comes from the companion PGM.
    pub fn from_sidecar(text: &str, mask: Frame) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("sidecar line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| Error::Malformed(format!("sidecar lacks {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Malformed(format!("sidecar field {k} is not an integer")))
        };
        Ok(GroundTruth {
            onset: num("onset")?,
            duration: num("duration")?,
            size: num("n")?,
            shape: get("shape")?.parse()?,
            centroid: (num("centroid_x")?, num("centroid_y")?),
            clipped: num("clipped")?,
            mask,
        })
    }
}

/// Offsets of an `n`-pixel shape around the origin.
///
/// Cross: breadth-first 4-neighbourhood layers starting from the centroid's four axial
/// neighbours (so `n = 4` is exactly those four), each layer ordered by Euclidean
/// distance and then row-major position. Disk: the `n` nearest offsets by Euclidean
/// distance, ties row-major.
pub fn shape_offsets(shape: Shape, n: usize) -> Vec<(i64, i64)> {
    let key = |&(dx, dy): &(i64, i64)| (dx * dx + dy * dy, dy, dx);
    match shape {
        Shape::Disk => {
            let r = (n as f64).sqrt().ceil() as i64 + 1;
            let mut all: Vec<(i64, i64)> = (-r..=r)
                .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
                .collect();
            all.sort_by_key(key);
            all.truncate(n);
            all
        }
        Shape::Cross => {
            let mut out: Vec<(i64, i64)> = Vec::with_capacity(n);
            let mut seen = std::collections::HashSet::new();
            let mut layer = vec![(1, 0), (-1, 0), (0, 1), (0, -1)];
            seen.extend(layer.iter().copied());
            while out.len() < n {
                layer.sort_by_key(key);
                for &p in &layer {
                    if out.len() < n {
                        out.push(p);
                    }
                }
                let mut next = Vec::new();
                for &(x, y) in &layer {
                    for d in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                        let q = (x + d.0, y + d.1);
                        if seen.insert(q) {
                            next.push(q);
                        }
                    }
                }
                layer = next;
            }
            out
        }
    }
}

/// Overwrites the shape at the onset-frame LHZ centroid with
/// `max(existing, hotspot_intensity(t_rel))` for `t_rel = 1..=τ`.
pub fn inject_hotspot(
    stream: &FrameStream,
    centroids: &[(f64, f64)],
    cfg: &SimConfig,
) -> Result<(FrameStream, GroundTruth)> {
    cfg.validate_hotspot()?;
    let hs = &cfg.hotspot;
    if (stream.width, stream.height) != (cfg.width, cfg.height)
        || stream.frame_count < hs.onset + hs.duration
    {
        return Err(Error::invalid(
            "stream",
            "does not match the simulation config",
        ));
    }
    let Some(&(cx, cy)) = centroids.get(hs.onset) else {
        return Err(Error::invalid(
            "onset",
            "no LHZ centroid at the onset frame",
        ));
    };
    let (w, h) = (stream.width as i64, stream.height as i64);
    let (px, py) = (cx.round() as i64, cy.round() as i64);
    let mut pixels = Vec::with_capacity(hs.size);
    for (dx, dy) in shape_offsets(hs.shape, hs.size) {
        let (x, y) = (px + dx, py + dy);
        if (0..w).contains(&x) && (0..h).contains(&y) {
            pixels.push((y * w + x) as usize);
        }
    }
    let clipped = hs.size - pixels.len();
    if clipped > 0 {
        warn!("hot-spot at ({px}, {py}) clipped by {clipped} pixels at the frame border");
    }
    let mut out = stream.clone();
    for t_rel in 1..=hs.duration {
        let a = hotspot_intensity(t_rel as f64, hs.duration as f64, hs.h).min(hs.saturation);
        let v = to_u8(a);
        let frame = out.frame_bytes_mut(hs.onset + t_rel - 1);
        for &p in &pixels {
            frame[p] = frame[p].max(v);
        }
    }
    let truth = GroundTruth {
        mask: Frame::mask_from_indices(stream.width, stream.height, &pixels),
        onset: hs.onset,
        duration: hs.duration,
        size: hs.size,
        shape: hs.shape,
        centroid: (px.clamp(0, w - 1) as usize, py.clamp(0, h - 1) as usize),
        clipped,
    };
    Ok((out, truth))
}

/// How a batch of replications is laid out.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationPlan {
    pub sizes: Vec<usize>,
    pub locations: usize,
    pub master_seed: u64,
    /// Onsets (and hence hot-spot locations) are drawn uniformly from this range.
    pub onset_min: usize,
    pub onset_max: usize,
}

/// One generated replication.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub run_id: String,
    pub size: usize,
    pub location: usize,
    pub seed: u64,
    pub stream: FrameStream,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub run_id: String,
    pub size: usize,
    pub shape: Shape,
    pub location: usize,
    pub seed: u64,
    pub onset: usize,
    pub duration: usize,
    pub stream: PathBuf,
    pub truth_mask: PathBuf,
    pub truth_sidecar: PathBuf,
}

/// Seed of replication `index`: the first word of ChaCha stream `index` under `master`.
pub fn replication_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.random()
}

/// Generates replication `index` of `plan` (size-major order) in memory.
pub fn replication(
    template: &SimConfig,
    plan: &ReplicationPlan,
    index: usize,
) -> Result<Replication> {
    if plan.locations == 0 || index >= plan.sizes.len() * plan.locations {
        return Err(Error::invalid(
            "locations",
            "replication index out of range",
        ));
    }
    if plan.onset_min > plan.onset_max {
        return Err(Error::invalid("onset", "onset_min must be <= onset_max"));
    }
    let size = plan.sizes[index / plan.locations];
    let location = index % plan.locations;
    let seed = replication_seed(plan.master_seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let onset = rng.random_range(plan.onset_min..=plan.onset_max);
    let mut cfg = template.clone();
    cfg.seed = seed;
    cfg.hotspot.size = size;
    cfg.hotspot.onset = onset;
    cfg.validate()?;
    let bg = generate_with(&cfg, &mut rng)?;
    let (stream, truth) = inject_hotspot(&bg.stream, &bg.centroids, &cfg)?;
    Ok(Replication {
        run_id: format!("n{size:02}_loc{location:03}"),
        size,
        location,
        seed,
        stream,
        truth,
    })
}

pub const MANIFEST_HEADER: [&str; 10] = [
    "run_id",
    "size",
    "shape",
    "location",
    "seed",
    "onset",
    "duration",
    "stream",
    "truth_mask",
    "truth_sidecar",
];

/// Writes every replication's stream, truth mask and sidecar under `out_dir`, plus
/// `manifest.csv` with paths relative to `out_dir`.
pub fn run_replications(
    template: &SimConfig,
    plan: &ReplicationPlan,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<ManifestEntry>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let total = plan.sizes.len() * plan.locations;
    let mut entries = Vec::with_capacity(total);
    for i in 0..total {
        let rep = replication(template, plan, i)?;
        let stream = PathBuf::from(format!("{}.stvf", rep.run_id));
        let truth_mask = PathBuf::from(format!("{}_truth.pgm", rep.run_id));
        let truth_sidecar = PathBuf::from(format!("{}_truth.txt", rep.run_id));
        write_stream(&rep.stream, out_dir.join(&stream))?;
        write_pgm(&rep.truth.mask, out_dir.join(&truth_mask))?;
        let side = out_dir.join(&truth_sidecar);
        fs::write(&side, rep.truth.to_sidecar()).map_err(|e| Error::io(&side, e))?;
        entries.push(ManifestEntry {
            run_id: rep.run_id,
            size: rep.size,
            shape: template.hotspot.shape,
            location: rep.location,
            seed: rep.seed,
            onset: rep.truth.onset,
            duration: rep.truth.duration,
            stream,
            truth_mask,
            truth_sidecar,
        });
    }
    write_manifest(&entries, out_dir.join("manifest.csv"))?;
    Ok(entries)
}

pub fn write_manifest(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for e in entries {
        w.write_record([
            e.run_id.clone(),
            e.size.to_string(),
            e.shape.to_string(),
            e.location.to_string(),
            e.seed.to_string(),
            e.onset.to_string(),
            e.duration.to_string(),
            e.stream.display().to_string(),
            e.truth_mask.display().to_string(),
            e.truth_sidecar.display().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(MANIFEST_HEADER) {
        return Err(Error::Malformed(format!(
            "{}: unexpected manifest header",
            path.display()
        )));
    }
    let bad = |f: &str| Error::Malformed(format!("{}: bad {f}", path.display()));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(ManifestEntry {
            run_id: rec[0].to_string(),
            size: rec[1].parse().map_err(|_| bad("size"))?,
            shape: rec[2].parse()?,
            location: rec[3].parse().map_err(|_| bad("location"))?,
            seed: rec[4].parse().map_err(|_| bad("seed"))?,
            onset: rec[5].parse().map_err(|_| bad("onset"))?,
            duration: rec[6].parse().map_err(|_| bad("duration"))?,
            stream: PathBuf::from(&rec[7]),
            truth_mask: PathBuf::from(&rec[8]),
            truth_sidecar: PathBuf::from(&rec[9]),
        });
    }
    Ok(out)
}

/// In-control streams sharing the template's scan path, seeded from `master_seed`.
pub fn in_control_streams(
    template: &SimConfig,
    count: usize,
    master_seed: u64,
) -> Result<Vec<FrameStream>> {
    (0..count)
        .map(|i| {
            let mut cfg = template.clone();
            cfg.seed = replication_seed(master_seed, (1u64 << 40) + i as u64);
            generate_background(&cfg).map(|b| b.stream)
        })
        .collect()
}
