//! Binary annotation masks and their binary PGM (`P5`) encoding.

use std::io::{Read, Write};

use crate::error::{Error, Result};

/// `height x width` grid over {0, 1}, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Mask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl Mask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!("mask extent {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "{}x{} mask needs {} values, got {}",
                width,
                height,
                width * height,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mask value {v} is not 0 or 1")));
        }
        Ok(Self { width, height, values })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut values = Vec::with_capacity(width * height);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j) as u8);
            }
        }
        Self { width, height, values }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    /// Value at row `i`, column `j`.
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.values[i * self.width + j] != 0
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.values[i * self.width + j] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.values.iter().all(|&v| v == 0)
    }

    /// Foreground centroid `(x, y)` in pixel coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for i in 0..self.height {
            for j in 0..self.width {
                if self.get(i, j) {
                    sx += j as f64;
                    sy += i as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Inclusive `(min_row, min_col, max_row, max_col)` of the foreground.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for i in 0..self.height {
            for j in 0..self.width {
                if self.get(i, j) {
                    bb = Some(match bb {
                        None => (i, j, i, j),
                        Some((a, b, c, d)) => (a.min(i), b.min(j), c.max(i), d.max(j)),
                    });
                }
            }
        }
        bb
    }

    /// Thresholds a row-major probability map at `threshold` (inclusive).
    pub fn from_probabilities(width: usize, height: usize, probs: &[f64], threshold: f64) -> Result<Self> {
        Self::new(width, height, probs.iter().map(|&p| (p >= threshold) as u8).collect())
    }

    /// Reads a binary PGM; pixels with value >= 128 are foreground.
    pub fn read_pgm(mut reader: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let (width, height, maxval, offset) = parse_pgm_header(&bytes)?;
        if maxval != 255 {
            return Err(Error::Format(format!("PGM maxval {maxval}, expected 255")));
        }
        let body = &bytes[offset..];
        if body.len() < width * height {
            return Err(Error::Format(format!(
                "PGM body holds {} bytes, expected {}",
                body.len(),
                width * height
            )));
        }
        Self::new(
            width,
            height,
            body[..width * height].iter().map(|&v| (v >= 128) as u8).collect(),
        )
    }

    /// Writes the mask as a binary PGM with foreground 255 and background 0.
    pub fn write_pgm(&self, writer: impl Write) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| v * 255).collect();
        write_pgm_bytes(writer, self.width, self.height, &bytes)
    }
}

/// Writes raw 8-bit grey levels as a `P5` image with maxval 255.
pub fn write_pgm_bytes(mut writer: impl Write, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    if bytes.len() != width * height {
        return Err(Error::InvalidArgument("PGM byte count does not match extent".into()));
    }
    write!(writer, "P5\n{width} {height}\n255\n")?;
    writer.write_all(bytes)?;
    Ok(())
}

fn parse_pgm_header(bytes: &[u8]) -> Result<(usize, usize, usize, usize)> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(Error::Format("missing P5 magic".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("bad PGM header number".into()))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("PGM header not terminated".into()));
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}
