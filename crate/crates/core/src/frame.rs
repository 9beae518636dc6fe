//! Frame containers and the on-disk formats shared by every stage.
//!
//! The stream container is little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "STVF"
//! 4       4     width  (u32)
//! 8       4     height (u32)
//! 12      4     frame_count (u32)
//! 16      W*H*T pixel bytes, frame-major then row-major
//! ```
//!
//! Masks are written as binary PGM ("P5", maxval 255, anomaly = 255).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const STREAM_MAGIC: [u8; 4] = *b"STVF";
pub const STREAM_HEADER_LEN: usize = 16;

/// One real-valued time slice, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Frame {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Malformed(format!(
                "frame of {}x{} needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            values: vec![0.0; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Frame {
            width,
            height,
            values: vec![value; width * height],
        }
    }

    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Self {
        debug_assert_eq!(bytes.len(), width * height);
        Frame {
            width,
            height,
            values: bytes.iter().map(|&b| f64::from(b)).collect(),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn scaled(&self, factor: f64) -> Frame {
        Frame {
            width: self.width,
            height: self.height,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn ensure_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width != width || self.height != height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                got: (self.width, self.height),
            });
        }
        Ok(())
    }

    /// Indices of pixels with a non-zero value.
    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Binary mask frame (1.0 on the listed pixels).
    pub fn mask_from_indices(width: usize, height: usize, indices: &[usize]) -> Frame {
        let mut mask = Frame::zeros(width, height);
        for &i in indices {
            mask.values[i] = 1.0;
        }
        mask
    }
}

/// An ordered sequence of equal-sized 8-bit grayscale frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameStream {
    pub width: usize,
    pub height: usize,
    pub frame_count: usize,
    pub pixels: Vec<u8>,
    /// Informational only; not persisted by the container.
    pub frame_rate_hint: f64,
}

impl FrameStream {
    pub fn new(width: usize, height: usize, frame_count: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || frame_count == 0 {
            return Err(Error::ZeroDimension {
                width: width as u32,
                height: height as u32,
                frames: frame_count as u32,
            });
        }
        let expected = width * height * frame_count;
        if pixels.len() != expected {
            return Err(Error::Truncated {
                expected,
                found: pixels.len(),
            });
        }
        Ok(FrameStream {
            width,
            height,
            frame_count,
            pixels,
            frame_rate_hint: 0.0,
        })
    }

    #[inline]
    pub fn frame_len(&self) -> usize {
        self.width * self.height
    }

    pub fn frame_bytes(&self, t: usize) -> &[u8] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn frame_bytes_mut(&mut self, t: usize) -> &mut [u8] {
        let n = self.frame_len();
        &mut self.pixels[t * n..(t + 1) * n]
    }

    /// Frame `t` promoted to real-valued intensities in [0, 255].
    pub fn frame(&self, t: usize) -> Frame {
        Frame::from_bytes(self.width, self.height, self.frame_bytes(t))
    }

    pub fn frames(&self) -> impl Iterator<Item = Frame> + '_ {
        (0..self.frame_count).map(move |t| self.frame(t))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(STREAM_HEADER_LEN + self.pixels.len());
        out.extend_from_slice(&STREAM_MAGIC);
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.frame_count as u32).to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: STREAM_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().expect("4-byte slice");
        if magic != STREAM_MAGIC {
            return Err(Error::BadMagic {
                found: magic,
                expected: STREAM_MAGIC,
            });
        }
        if bytes.len() < STREAM_HEADER_LEN {
            return Err(Error::Truncated {
                expected: STREAM_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let (width, height, frames) = (word(4), word(8), word(12));
        if width == 0 || height == 0 || frames == 0 {
            return Err(Error::ZeroDimension {
                width,
                height,
                frames,
            });
        }
        let payload = (width as usize)
            .checked_mul(height as usize)
            .and_then(|n| n.checked_mul(frames as usize))
            .ok_or_else(|| Error::Malformed("dimensions overflow".into()))?;
        let found = bytes.len() - STREAM_HEADER_LEN;
        if found < payload {
            return Err(Error::Truncated {
                expected: payload,
                found,
            });
        }
        if found > payload {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after payload",
                found - payload
            )));
        }
        FrameStream::new(
            width as usize,
            height as usize,
            frames as usize,
            bytes[STREAM_HEADER_LEN..].to_vec(),
        )
    }
}

pub fn read_stream(path: impl AsRef<Path>) -> Result<FrameStream> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FrameStream::decode(&bytes)
}

/// `(width, height, frame_count)` from a stream header without reading the payload.
pub fn read_stream_dims(path: impl AsRef<Path>) -> Result<(usize, usize, usize)> {
    use std::io::Read;
    let path = path.as_ref();
    let mut head = Vec::with_capacity(STREAM_HEADER_LEN);
    fs::File::open(path)
        .and_then(|f| f.take(STREAM_HEADER_LEN as u64).read_to_end(&mut head))
        .map_err(|e| Error::io(path, e))?;
    if head.len() < STREAM_HEADER_LEN {
        return Err(Error::Truncated {
            expected: STREAM_HEADER_LEN,
            found: head.len(),
        });
    }
    if head[0..4] != STREAM_MAGIC {
        return Err(Error::BadMagic {
            found: head[0..4].try_into().expect("4 bytes"),
            expected: STREAM_MAGIC,
        });
    }
    let word = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes")) as usize;
    Ok((word(4), word(8), word(12)))
}

pub fn write_stream(stream: &FrameStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, stream.encode()).map_err(|e| Error::io(path, e))
}

/// Per-pixel background intensity, either fixed or indexed by frame.
#[derive(Debug, Clone, PartialEq)]
pub enum BackgroundModel {
    Static(Frame),
    Sequence(Vec<Frame>),
}

impl BackgroundModel {
    /// Background for frame `t` (0-based). Sequences shorter than the stream repeat their last frame.
    pub fn at(&self, t: usize) -> &Frame {
        match self {
            BackgroundModel::Static(mu) => mu,
            BackgroundModel::Sequence(seq) => &seq[t.min(seq.len() - 1)],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.at(0).dims()
    }

    pub fn is_static(&self) -> bool {
        matches!(self, BackgroundModel::Static(_))
    }

    /// Pixelwise mean of every frame of every stream.
    pub fn mean_of(streams: &[FrameStream]) -> Result<Self> {
        let first = streams
            .first()
            .ok_or_else(|| Error::NoData("no streams to average".into()))?;
        let (w, h) = (first.width, first.height);
        let mut acc = vec![0.0f64; w * h];
        let mut count = 0usize;
        for s in streams {
            if s.width != w || s.height != h {
                return Err(Error::DimensionMismatch {
                    expected: (w, h),
                    got: (s.width, s.height),
                });
            }
            for t in 0..s.frame_count {
                for (a, &b) in acc.iter_mut().zip(s.frame_bytes(t)) {
                    *a += f64::from(b);
                }
                count += 1;
            }
        }
        let inv = 1.0 / count as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
        Ok(BackgroundModel::Static(Frame::new(w, h, acc)?))
    }

    /// Loads a background from a stream container (1 frame = static, otherwise per-frame).
    pub fn from_stream(stream: &FrameStream) -> Self {
        if stream.frame_count == 1 {
            BackgroundModel::Static(stream.frame(0))
        } else {
            BackgroundModel::Sequence(stream.frames().collect())
        }
    }
}

pub fn write_pgm(mask: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(
        mask.values
            .iter()
            .map(|&v| if v != 0.0 { 255u8 } else { 0u8 }),
    );
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a binary PGM; any non-zero pixel becomes 1.0.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Malformed("short PGM header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if tokens[0] != "P5" {
        return Err(Error::Malformed(format!("not a binary PGM: {}", tokens[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval > 255 {
        return Err(Error::Malformed("16-bit PGM not supported".into()));
    }
    let raster = bytes.get(pos..pos + w * h).ok_or(Error::Truncated {
        expected: w * h,
        found: bytes.len().saturating_sub(pos),
    })?;
    Frame::new(
        w,
        h,
        raster
            .iter()
            .map(|&b| if b != 0 { 1.0 } else { 0.0 })
            .collect(),
    )
}
