//! Binary calibration profile, little-endian throughout:
//!
//! ```text
//! "HSCP"  u32 version
//! f64 lambda, f64 lambda0, f64 control_limit, u64 burn_in
//! solver: f64 gamma1, gamma2, gamma3, rho_p, rho_q, rho_growth, residual_ratio_alpha,
//!         rho_max, tol; u64 max_iter; u8 fast_path
//! grid:   u32 n1, f64 × n1; u32 n2, f64 × n2; u32 n3, f64 × n3;
//!         u32 cells, then per cell u32 i1, i2, i3, f64 gamma1, gamma2, gamma3, ic_mean, ic_var
//! background: u8 mode (0 static, 1 sequence), u32 width, u32 height, u32 count,
//!         f64 × width·height·count
//! ```
//!
//! Every real is stored as its IEEE-754 bit pattern, so a round trip is bit-exact.

use std::fs;
use std::path::Path;

use super::{CalibrationProfile, GridCell, TuningGrid};
use crate::decomp::PenaltyConfig;
use crate::error::{Error, Result};
use crate::frame::{BackgroundModel, Frame};

pub const PROFILE_MAGIC: [u8; 4] = *b"HSCP";
pub const PROFILE_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u64).to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u32(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated {
                expected: self.pos.saturating_add(n),
                found: self.bytes.len(),
            });
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Malformed(format!("count {v} overflows usize")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u32()?;
        if n.saturating_mul(8) > self.bytes.len() - self.pos {
            return Err(Error::Truncated {
                expected: self.pos + n * 8,
                found: self.bytes.len(),
            });
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode_profile(p: &CalibrationProfile) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(&PROFILE_MAGIC);
    w.u32(PROFILE_VERSION as usize);
    w.f64(p.lambda);
    w.f64(p.lambda0);
    w.f64(p.control_limit);
    w.u64(p.burn_in);
    let s = &p.solver;
    for v in [
        s.gamma1,
        s.gamma2,
        s.gamma3,
        s.rho_p,
        s.rho_q,
        s.rho_growth,
        s.residual_ratio_alpha,
        s.rho_max,
        s.tol,
    ] {
        w.f64(v);
    }
    w.u64(s.max_iter);
    w.u8(s.fast_path as u8);
    let g = &p.grid;
    w.f64s(&g.gamma1_levels);
    w.f64s(&g.gamma2_levels);
    w.f64s(&g.gamma3_levels);
    w.u32(g.cells.len());
    for (k, c) in g.cells.iter().enumerate() {
        w.u32(c.i1);
        w.u32(c.i2);
        w.u32(c.i3);
        w.f64(c.gamma1);
        w.f64(c.gamma2);
        w.f64(c.gamma3);
        w.f64(g.ic_mean.get(k).copied().unwrap_or(f64::NAN));
        w.f64(g.ic_var.get(k).copied().unwrap_or(f64::NAN));
    }
    let frames: Vec<&Frame> = match &p.background {
        BackgroundModel::Static(f) => vec![f],
        BackgroundModel::Sequence(fs) => fs.iter().collect(),
    };
    w.u8(!p.background.is_static() as u8);
    let (bw, bh) = p.background.dims();
    w.u32(bw);
    w.u32(bh);
    w.u32(frames.len());
    for f in frames {
        f.values.iter().for_each(|&v| w.f64(v));
    }
    w.0
}

pub fn decode_profile(bytes: &[u8]) -> Result<CalibrationProfile> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != PROFILE_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: PROFILE_MAGIC,
        });
    }
    let version = r.u32()? as u32;
    if version != PROFILE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let lambda = r.f64()?;
    let lambda0 = r.f64()?;
    let control_limit = r.f64()?;
    let burn_in = r.u64()?;
    let mut sv = [0.0; 9];
    for v in sv.iter_mut() {
        *v = r.f64()?;
    }
    let solver = PenaltyConfig {
        gamma1: sv[0],
        gamma2: sv[1],
        gamma3: sv[2],
        rho_p: sv[3],
        rho_q: sv[4],
        rho_growth: sv[5],
        residual_ratio_alpha: sv[6],
        rho_max: sv[7],
        tol: sv[8],
        max_iter: r.u64()?,
        fast_path: r.u8()? != 0,
    };
    let gamma1_levels = r.f64s()?;
    let gamma2_levels = r.f64s()?;
    let gamma3_levels = r.f64s()?;
    let n_cells = r.u32()?;
    let mut cells = Vec::with_capacity(n_cells.min(1 << 16));
    let (mut ic_mean, mut ic_var) = (Vec::new(), Vec::new());
    for _ in 0..n_cells {
        let (i1, i2, i3) = (r.u32()?, r.u32()?, r.u32()?);
        if i1 >= gamma1_levels.len() || i2 >= gamma2_levels.len() || i3 >= gamma3_levels.len() {
            return Err(Error::Malformed("grid cell index out of range".into()));
        }
        cells.push(GridCell {
            i1,
            i2,
            i3,
            gamma1: r.f64()?,
            gamma2: r.f64()?,
            gamma3: r.f64()?,
        });
        ic_mean.push(r.f64()?);
        ic_var.push(r.f64()?);
    }
    let mode = r.u8()?;
    let (bw, bh, count) = (r.u32()?, r.u32()?, r.u32()?);
    if bw == 0 || bh == 0 || count == 0 {
        return Err(Error::ZeroDimension {
            width: bw as u32,
            height: bh as u32,
            frames: count as u32,
        });
    }
    let mut frames = Vec::with_capacity(count.min(1 << 12));
    for _ in 0..count {
        let need = bw * bh;
        if need.saturating_mul(8) > bytes.len() - r.pos {
            return Err(Error::Truncated {
                expected: r.pos + need * 8,
                found: bytes.len(),
            });
        }
        let values = (0..need).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        frames.push(Frame::new(bw, bh, values)?);
    }
    let background = match mode {
        0 if count == 1 => BackgroundModel::Static(frames.pop().unwrap()),
        1 => BackgroundModel::Sequence(frames),
        _ => {
            return Err(Error::Malformed(format!(
                "background mode {mode} with {count} frames"
            )))
        }
    };
    if r.pos != bytes.len() {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after profile",
            bytes.len() - r.pos
        )));
    }
    Ok(CalibrationProfile {
        background,
        grid: TuningGrid {
            gamma1_levels,
            gamma2_levels,
            gamma3_levels,
            cells,
            ic_mean,
            ic_var,
        },
        control_limit,
        lambda,
        lambda0,
        burn_in,
        solver,
    })
}

pub fn write_profile(profile: &CalibrationProfile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_profile(profile)).map_err(|e| Error::io(path, e))
}

pub fn read_profile(path: impl AsRef<Path>) -> Result<CalibrationProfile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_profile(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CalibrationProfile {
        let mut grid = TuningGrid::from_levels(vec![0.1, 0.2], vec![0.0, 0.3], vec![0.0]).unwrap();
        grid.ic_mean = vec![1.0, 2.0, 3.0, 0.1 + 0.2];
        grid.ic_var = vec![0.5, 1.0 / 3.0, 7.0, 1e-300];
        CalibrationProfile {
            background: BackgroundModel::Static(Frame::new(2, 1, vec![3.5, 1.0 / 7.0]).unwrap()),
            grid,
            control_limit: std::f64::consts::PI,
            lambda: 0.3,
            lambda0: 1.0,
            burn_in: 5,
            solver: PenaltyConfig::default(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = sample();
        let bytes = encode_profile(&p);
        let back = decode_profile(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_profile(&back), bytes);

        let mut seq = sample();
        seq.background =
            BackgroundModel::Sequence(vec![Frame::zeros(2, 1), Frame::filled(2, 1, 9.0)]);
        assert_eq!(decode_profile(&encode_profile(&seq)).unwrap(), seq);
    }

    #[test]
    fn corrupt_profiles_are_rejected() {
        let bytes = encode_profile(&sample());
        assert!(matches!(
            decode_profile(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_profile(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            decode_profile(&bad),
            Err(Error::UnsupportedVersion(9))
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(decode_profile(&long), Err(Error::Malformed(_))));
    }
}
