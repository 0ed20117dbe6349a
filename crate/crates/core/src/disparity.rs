//! Disparity maps and Middlebury-style PFM I/O.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-pixel disparity in pixels; invalid pixels hold [`DisparityMap::INVALID`].
#[derive(Clone, Debug, PartialEq)]
pub struct DisparityMap {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl DisparityMap {
    /// Middlebury convention: infinity marks unknown disparity.
    pub const INVALID: f32 = f32::INFINITY;

    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "{width}x{height} disparity needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![Self::INVALID; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, d: f32) -> Self {
        Self {
            width,
            height,
            data: vec![d; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, d: f32) {
        self.data[y * self.width + x] = d;
    }

    pub fn is_valid_value(d: f32) -> bool {
        d.is_finite()
    }

    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        Self::is_valid_value(self.get(x, y))
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| d.is_finite()).count()
    }

    /// Largest valid disparity, if any.
    pub fn max_valid(&self) -> Option<f32> {
        self.data.iter().copied().filter(|d| d.is_finite()).reduce(f32::max)
    }

    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let bytes = encode_pfm(self.width, self.height, &self.data);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (w, h, data) = decode_pfm(&bytes)?;
        Self::new(w, h, data)
    }
}

/// Grayscale little-endian PFM; rows are stored bottom to top.
pub fn encode_pfm(width: usize, height: usize, data: &[f32]) -> Vec<u8> {
    let mut out = format!("Pf\n{width} {height}\n-1.0\n").into_bytes();
    out.reserve(data.len() * 4);
    for y in (0..height).rev() {
        for v in &data[y * width..(y + 1) * width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Pfm("truncated header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::Pfm("non-ASCII header".into()))
}

/// Decode `Pf` (gray) or `PF` (color, first channel kept) in either byte order.
pub fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, Vec<f32>)> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::Pfm(format!("bad magic {m:?}"))),
    };
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Pfm(format!("bad {what} {s:?}")))
    };
    let w = parse(header_token(bytes, &mut pos)?, "width")?;
    let h = parse(header_token(bytes, &mut pos)?, "height")?;
    let scale: f32 = header_token(bytes, &mut pos)?
        .parse()
        .map_err(|_| Error::Pfm("bad scale".into()))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Pfm("scale must be nonzero".into()));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * channels * 4;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Pfm(format!("raster needs {need} bytes, have {}", bytes.len().saturating_sub(pos))))?;
    let little = scale < 0.0;
    let mut data = vec![0.0f32; w * h];
    for (i, chunk) in raster.chunks_exact(4 * channels).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w, i % w);
        data[(h - 1 - row) * w + col] = v;
    }
    Ok((w, h, data))
}
