//! Matching-cost volumes over dense descriptors.

use rayon::prelude::*;

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::image::Mask;

/// Cost of a cell excluded from the search. Large and finite so sums stay
/// finite; never selected while a valid candidate exists.
pub const INVALID_COST: f32 = 1e30;

/// Threshold separating valid costs from the sentinel.
const INVALID_THRESHOLD: f32 = 1e29;

pub fn is_valid_cost(c: f32) -> bool {
    c < INVALID_THRESHOLD
}

/// Costs laid out `[y][x][d - d_min]` for `d` in `d_min..=d_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    width: usize,
    height: usize,
    d_min: usize,
    d_max: usize,
    cost: Vec<f32>,
}

impl CostVolume {
    pub fn invalid(width: usize, height: usize, d_min: usize, d_max: usize) -> Result<Self> {
        if d_max < d_min {
            return Err(Error::Invalid(format!("disparity range [{d_min}, {d_max}] is empty")));
        }
        Ok(Self {
            width,
            height,
            d_min,
            d_max,
            cost: vec![INVALID_COST; width * height * (d_max - d_min + 1)],
        })
    }

    /// `f` returns `None` for invalid cells.
    pub fn from_fn(
        width: usize,
        height: usize,
        d_min: usize,
        d_max: usize,
        mut f: impl FnMut(usize, usize, usize) -> Option<f32>,
    ) -> Result<Self> {
        let mut v = Self::invalid(width, height, d_min, d_max)?;
        for y in 0..height {
            for x in 0..width {
                for d in d_min..=d_max {
                    if let Some(c) = f(x, y, d) {
                        let i = v.index(x, y, d);
                        v.cost[i] = c;
                    }
                }
            }
        }
        Ok(v)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d_min(&self) -> usize {
        self.d_min
    }

    pub fn d_max(&self) -> usize {
        self.d_max
    }

    pub fn num_disparities(&self) -> usize {
        self.d_max - self.d_min + 1
    }

    fn index(&self, x: usize, y: usize, d: usize) -> usize {
        (y * self.width + x) * self.num_disparities() + (d - self.d_min)
    }

    pub fn get(&self, x: usize, y: usize, d: usize) -> f32 {
        self.cost[self.index(x, y, d)]
    }

    pub fn is_valid(&self, x: usize, y: usize, d: usize) -> bool {
        is_valid_cost(self.get(x, y, d))
    }

    /// All candidate costs of one pixel.
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let n = self.num_disparities();
        let i = (y * self.width + x) * n;
        &self.cost[i..i + n]
    }

    pub fn data(&self) -> &[f32] {
        &self.cost
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.cost
    }

    pub fn valid_cells(&self) -> usize {
        self.cost.iter().filter(|&&c| is_valid_cost(c)).count()
    }

    /// Bytes held by the cost array.
    pub fn bytes(&self) -> usize {
        self.cost.len() * std::mem::size_of::<f32>()
    }

    /// Raw little-endian dump plus a JSON header, for debugging.
    pub fn dump(&self, path: &std::path::Path) -> Result<()> {
        let mut bytes = Vec::with_capacity(self.bytes());
        for c in &self.cost {
            bytes.extend_from_slice(&c.to_le_bytes());
        }
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let header = serde_json::json!({
            "width": self.width,
            "height": self.height,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "layout": "y,x,d",
            "dtype": "f32le",
            "invalid": INVALID_COST,
        });
        let hp = path.with_extension("json");
        std::fs::write(&hp, serde_json::to_vec_pretty(&header)?).map_err(|e| Error::io(&hp, e))
    }
}

/// Per-pixel L2-normalized descriptors, laid out `[y][x][f]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMap {
    pub width: usize,
    pub height: usize,
    pub features: usize,
    pub data: Vec<f32>,
    /// Pixels whose raw descriptor had zero norm; they are stored as zero
    /// vectors and match everything with similarity 0.
    pub degenerate: usize,
}

impl DescriptorMap {
    /// From channel-major `[f][y][x]` raw features.
    pub fn from_planar(width: usize, height: usize, features: usize, planar: &[f32]) -> Result<Self> {
        if planar.len() != width * height * features {
            return Err(Error::Size(format!(
                "{features} feature planes of {width}x{height} need {} values, got {}",
                width * height * features,
                planar.len()
            )));
        }
        let hw = width * height;
        let mut data = vec![0.0f32; hw * features];
        data.par_chunks_mut(features).enumerate().for_each(|(p, v)| {
            for (f, slot) in v.iter_mut().enumerate() {
                *slot = planar[f * hw + p];
            }
        });
        let degenerate = data
            .par_chunks_mut(features)
            .map(|v| {
                let n2: f32 = v.iter().map(|a| a * a).sum();
                if n2 < 1e-24 || !n2.is_finite() {
                    v.fill(0.0);
                    1
                } else {
                    let inv = 1.0 / n2.sqrt();
                    v.iter_mut().for_each(|a| *a *= inv);
                    0
                }
            })
            .sum();
        if degenerate > 0 {
            log::warn!("{degenerate} zero-norm descriptors; their similarities are set to 0");
        }
        Ok(Self {
            width,
            height,
            features,
            data,
            degenerate,
        })
    }

    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.features;
        &self.data[i..i + self.features]
    }
}

const BLOCK: usize = 192;

/// `cost(x, y, d) = 1 - cos(L(x, y), R(x - d, y))`. Cells whose left pixel
/// is outside `mask_left`, or whose right pixel is outside the image or
/// `mask_right`, are invalid.
pub fn build_cost_volume(
    left: &DescriptorMap,
    right: &DescriptorMap,
    mask_left: &Mask,
    mask_right: &Mask,
    d_min: usize,
    d_max: usize,
) -> Result<CostVolume> {
    let (w, h, f) = (left.width, left.height, left.features);
    if (right.width, right.height, right.features) != (w, h, f) {
        return Err(Error::Size(format!(
            "descriptor maps differ: {}x{}x{} vs {}x{}x{}",
            w, h, f, right.width, right.height, right.features
        )));
    }
    if mask_left.size() != (w, h) || mask_right.size() != (w, h) {
        return Err(Error::Size("mask does not match descriptor map".into()));
    }
    let mut vol = CostVolume::invalid(w, h, d_min, d_max)?;
    let nd = vol.num_disparities();
    let row_len = w * nd;
    if row_len == 0 {
        return Ok(vol);
    }
    vol.data_mut().par_chunks_mut(row_len).enumerate().for_each(|(y, row)| {
        let mut gram = Vec::new();
        for x0 in (0..w).step_by(BLOCK) {
            let x1 = (x0 + BLOCK).min(w);
            let r0 = x0.saturating_sub(d_max);
            let r1 = (x1.saturating_sub(d_min)).min(w);
            if r1 <= r0 {
                continue;
            }
            let (nb, nr) = (x1 - x0, r1 - r0);
            gram.clear();
            gram.resize(nb * nr, 0.0f32);
            let a = &left.data[(y * w + x0) * f..(y * w + x1) * f];
            let b = &right.data[(y * w + r0) * f..(y * w + r1) * f];
            // gram = A (nb x f) * B^T (f x nr)
            unsafe {
                matrixmultiply::sgemm(
                    nb,
                    f,
                    nr,
                    1.0,
                    a.as_ptr(),
                    f as isize,
                    1,
                    b.as_ptr(),
                    1,
                    f as isize,
                    0.0,
                    gram.as_mut_ptr(),
                    nr as isize,
                    1,
                );
            }
            for x in x0..x1 {
                if !mask_left.get(x, y) {
                    continue;
                }
                let cell = &mut row[x * nd..(x + 1) * nd];
                for d in d_min..=d_max.min(x) {
                    let xr = x - d;
                    if xr < r0 || xr >= r1 || !mask_right.get(xr, y) {
                        continue;
                    }
                    cell[d - d_min] = 1.0 - gram[(x - x0) * nr + (xr - r0)];
                }
            }
        }
    });
    Ok(vol)
}

/// Cheapest valid disparity per pixel, ties to the smaller disparity.
pub fn winner_take_all(vol: &CostVolume) -> DisparityMap {
    let (w, h) = (vol.width(), vol.height());
    let mut out = DisparityMap::invalid(w, h);
    out.data_mut().par_chunks_mut(w.max(1)).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            if let Some(i) = argmin(vol.cell(x, y)) {
                *slot = (vol.d_min() + i) as f32;
            }
        }
    });
    out
}

/// Right-view disparity read off the volume diagonal:
/// `dR(x) = argmin_d cost(x + d, d)`.
pub fn winner_take_all_right(vol: &CostVolume) -> DisparityMap {
    let (w, h) = (vol.width(), vol.height());
    let mut out = DisparityMap::invalid(w, h);
    out.data_mut().par_chunks_mut(w.max(1)).enumerate().for_each(|(y, row)| {
        for (x, slot) in row.iter_mut().enumerate() {
            let mut best = INVALID_THRESHOLD;
            for d in vol.d_min()..=vol.d_max() {
                let xl = x + d;
                if xl >= w {
                    break;
                }
                let c = vol.get(xl, y, d);
                if c < best {
                    best = c;
                    *slot = d as f32;
                }
            }
        }
    });
    out
}

/// Index of the smallest valid entry, first one on ties.
pub fn argmin(costs: &[f32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    let mut best_c = INVALID_THRESHOLD;
    for (i, &c) in costs.iter().enumerate() {
        if c < best_c {
            best_c = c;
            best = Some(i);
        }
    }
    best
}
