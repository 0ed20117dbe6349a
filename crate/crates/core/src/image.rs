//! Grayscale images and binary masks.

use std::path::Path;

use uwstereo_nn::Tensor;

use crate::error::{Error, Result};

/// Single-channel image with intensities nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "{width}x{height} image needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
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

    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn row(&self, y: usize) -> &[f32] {
        &self.data[y * self.width..(y + 1) * self.width]
    }

    /// Pixel with coordinates clamped to the border.
    pub fn get_clamped(&self, x: isize, y: isize) -> f32 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.get(x, y)
    }

    /// Bilinear sample with border clamping. Written as nested lerps so a
    /// constant neighbourhood reproduces its value exactly.
    pub fn sample_bilinear(&self, x: f32, y: f32) -> f32 {
        let fx = x.floor();
        let fy = y.floor();
        let (tx, ty) = (x - fx, y - fy);
        let (ix, iy) = (fx as isize, fy as isize);
        let a = self.get_clamped(ix, iy);
        let b = self.get_clamped(ix + 1, iy);
        let c = self.get_clamped(ix, iy + 1);
        let d = self.get_clamped(ix + 1, iy + 1);
        let top = a + tx * (b - a);
        let bot = c + tx * (d - c);
        top + ty * (bot - top)
    }

    /// Bilinear sample, or `None` outside `[0, w-1] x [0, h-1]`.
    pub fn sample_inside(&self, x: f32, y: f32) -> Option<f32> {
        let eps = 1e-3;
        if x < -eps || y < -eps || x > (self.width - 1) as f32 + eps || y > (self.height - 1) as f32 + eps {
            None
        } else {
            Some(self.sample_bilinear(x, y))
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp01(&self) -> Self {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> f32 {
        (self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64) as f32
    }

    /// Sub-image `[x0, x0+w) x [y0, y0+h)`, clamped at the border.
    pub fn crop(&self, x0: isize, y0: isize, w: usize, h: usize) -> Self {
        Self::from_fn(w, h, |x, y| self.get_clamped(x0 + x as isize, y0 + y as isize))
    }

    /// Replicate-pad on the right and bottom to `w x h`.
    pub fn pad_to(&self, w: usize, h: usize) -> Self {
        self.crop(0, 0, w, h)
    }

    /// `[1, 1, h, w]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.data.clone()).expect("sizes agree")
    }

    /// Channel `c` of sample `n` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, n: usize, c: usize) -> Result<Self> {
        let (nn, cc, h, w) = t.dims4()?;
        if n >= nn || c >= cc {
            return Err(Error::Size(format!("plane ({n}, {c}) outside {:?}", t.shape())));
        }
        let off = (n * cc + c) * h * w;
        Self::new(w, h, t.data()[off..off + h * w].to_vec())
    }

    pub fn mse(&self, other: &Self) -> Result<f64> {
        self.check_same(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / self.data.len().max(1) as f64)
    }

    pub fn check_same(&self, other: &Self) -> Result<()> {
        if self.size() != other.size() {
            return Err(Error::Size(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Load any format the `image` crate understands, converted to luma.
    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })?;
        let luma = img.to_luma16();
        let (w, h) = luma.dimensions();
        Self::new(
            w as usize,
            h as usize,
            luma.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        )
    }

    /// Save as 8-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::GrayImage::from_raw(
            self.width as u32,
            self.height as u32,
            self.data.iter().map(|&v| to_u8(v)).collect(),
        )
        .expect("buffer size matches");
        buf.save(path).map_err(|source| Error::Image {
            path: path.into(),
            source,
        })
    }

    /// Round-trip through 8-bit quantization, as a PNG save/load would.
    pub fn quantized(&self) -> Self {
        self.map(|v| to_u8(v) as f32 / 255.0)
    }
}

pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Size(format!(
                "{width}x{height} mask needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self { width, height, data }
    }

    /// Pixels at or above `threshold`.
    pub fn threshold(img: &GrayImage, threshold: f32) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            data: img.data().iter().map(|&v| v >= threshold).collect(),
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

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Dilation with a disc of `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Self {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        let mut out = Self::empty(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(x, y) {
                    continue;
                }
                for &(dx, dy) in &offsets {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < self.width && (ny as usize) < self.height {
                        out.set(nx as usize, ny as usize, true);
                    }
                }
            }
        }
        out
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Self) -> f64 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn or(&self, other: &Self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn to_image(&self) -> GrayImage {
        GrayImage::new(
            self.width,
            self.height,
            self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
        .expect("sizes agree")
    }

    /// 8-bit PNG with 0 / 255.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_image().save_png(path)
    }

    /// Any nonzero pixel is set.
    pub fn load(path: &Path) -> Result<Self> {
        let img = GrayImage::load(path)?;
        Ok(Self::threshold(&img, 0.5 / 255.0))
    }
}
