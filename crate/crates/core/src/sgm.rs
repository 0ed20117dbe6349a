//! Semi-global matching, left-right consistency and subpixel refinement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::costvol::{is_valid_cost, CostVolume, INVALID_COST};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};

/// Scan directions `(dx, dy)`: each path reaches pixel `p` from `p - (dx, dy)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathSet {
    Four,
    Eight,
    Custom(Vec<(i32, i32)>),
}

impl PathSet {
    pub fn directions(&self) -> Vec<(i32, i32)> {
        match self {
            PathSet::Four => vec![(1, 0), (-1, 0), (0, 1), (0, -1)],
            PathSet::Eight => vec![(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1)],
            PathSet::Custom(d) => d.clone(),
        }
    }

    /// 4 or 8 as a path count.
    pub fn from_count(n: usize) -> Option<Self> {
        match n {
            4 => Some(PathSet::Four),
            8 => Some(PathSet::Eight),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgmParams {
    /// Penalty for a one-pixel disparity change.
    pub p1: f32,
    /// Penalty for larger jumps.
    pub p2: f32,
    pub paths: PathSet,
}

impl Default for SgmParams {
    fn default() -> Self {
        Self {
            p1: 0.03,
            p2: 0.5,
            paths: PathSet::Eight,
        }
    }
}

impl SgmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p1 >= 0.0 && self.p2 >= self.p1 && self.p2.is_finite()) {
            return Err(Error::Invalid(format!(
                "SGM penalties need p2 >= p1 >= 0, got p1 = {}, p2 = {}",
                self.p1, self.p2
            )));
        }
        let dirs = self.paths.directions();
        if dirs.is_empty() || dirs.iter().any(|&(dx, dy)| (dx, dy) == (0, 0) || dx.abs() > 1 || dy.abs() > 1) {
            return Err(Error::Invalid("path directions must be unit steps".into()));
        }
        Ok(())
    }
}

/// One step of the path recurrence
/// `L(p, d) = C(p, d) + min(L(q, d), L(q, d±1) + p1, min_k L(q, k) + p2) - min_k L(q, k)`.
/// A missing or fully invalid predecessor restarts the path.
#[inline]
fn step(cost: &[f32], prev: Option<&[f32]>, p1: f32, p2: f32, out: &mut [f32]) -> f32 {
    let n = cost.len();
    let pmin = prev.map(|p| p.iter().copied().fold(INVALID_COST, f32::min));
    let mut m_out = INVALID_COST;
    match (prev, pmin) {
        (Some(prev), Some(pmin)) if is_valid_cost(pmin) => {
            let jump = pmin + p2;
            for d in 0..n {
                let c = cost[d];
                if !is_valid_cost(c) {
                    out[d] = INVALID_COST;
                    continue;
                }
                let mut m = prev[d].min(jump);
                if d > 0 {
                    m = m.min(prev[d - 1] + p1);
                }
                if d + 1 < n {
                    m = m.min(prev[d + 1] + p1);
                }
                let v = c + m - pmin;
                out[d] = v;
                m_out = m_out.min(v);
            }
        }
        _ => {
            out.copy_from_slice(cost);
            m_out = cost.iter().copied().fold(INVALID_COST, f32::min);
        }
    }
    m_out
}

fn add_into(sum: &mut [f32], l: &[f32]) {
    for (s, &v) in sum.iter_mut().zip(l) {
        *s += v;
    }
}

/// Aggregated path costs along a single direction, without summation.
/// Exposed for testing against exhaustive optimization.
pub fn path_costs(vol: &CostVolume, dir: (i32, i32), p1: f32, p2: f32) -> Result<CostVolume> {
    let mut out = CostVolume::invalid(vol.width(), vol.height(), vol.d_min(), vol.d_max())?;
    out.data_mut().fill(0.0);
    accumulate_path(vol, dir, p1, p2, &mut out);
    restore_invalid(vol, &mut out);
    Ok(out)
}

fn restore_invalid(vol: &CostVolume, out: &mut CostVolume) {
    out.data_mut()
        .par_iter_mut()
        .zip(vol.data().par_iter())
        .for_each(|(s, &c)| {
            if !is_valid_cost(c) {
                *s = INVALID_COST;
            }
        });
}

fn accumulate_path(vol: &CostVolume, (dx, dy): (i32, i32), p1: f32, p2: f32, sum: &mut CostVolume) {
    let (w, h, nd) = (vol.width(), vol.height(), vol.num_disparities());
    if w == 0 || h == 0 {
        return;
    }
    let row_len = w * nd;
    if dy == 0 {
        sum.data_mut().par_chunks_mut(row_len).enumerate().for_each(|(y, srow)| {
            let mut prev = vec![0.0f32; nd];
            let mut cur = vec![0.0f32; nd];
            let xs: Box<dyn Iterator<Item = usize>> = if dx > 0 { Box::new(0..w) } else { Box::new((0..w).rev()) };
            let mut first = true;
            for x in xs {
                step(vol.cell(x, y), (!first).then_some(&prev[..]), p1, p2, &mut cur);
                add_into(&mut srow[x * nd..(x + 1) * nd], &cur);
                std::mem::swap(&mut prev, &mut cur);
                first = false;
            }
        });
        return;
    }
    let mut prev = vec![0.0f32; row_len];
    let mut cur = vec![0.0f32; row_len];
    let ys: Vec<usize> = if dy > 0 { (0..h).collect() } else { (0..h).rev().collect() };
    for (k, &y) in ys.iter().enumerate() {
        let has_prev_row = k > 0;
        cur.par_chunks_mut(nd).enumerate().for_each(|(x, out)| {
            let px = x as i64 - dx as i64;
            let pred = (has_prev_row && px >= 0 && (px as usize) < w).then(|| &prev[px as usize * nd..(px as usize + 1) * nd]);
            step(vol.cell(x, y), pred, p1, p2, out);
        });
        let srow = &mut sum.data_mut()[y * row_len..(y + 1) * row_len];
        srow.par_chunks_mut(nd)
            .zip(cur.par_chunks(nd))
            .for_each(|(s, l)| add_into(s, l));
        std::mem::swap(&mut prev, &mut cur);
    }
}

/// Sum of path costs over all configured directions. Invalid input cells
/// stay invalid and are never used as predecessors.
pub fn sgm_aggregate(vol: &CostVolume, params: &SgmParams) -> Result<CostVolume> {
    params.validate()?;
    let mut sum = CostVolume::invalid(vol.width(), vol.height(), vol.d_min(), vol.d_max())?;
    sum.data_mut().fill(0.0);
    for dir in params.paths.directions() {
        accumulate_path(vol, dir, params.p1, params.p2, &mut sum);
    }
    restore_invalid(vol, &mut sum);
    Ok(sum)
}

/// Keep a left disparity iff `|dL(x) - dR(x - dL(x))| <= tol`.
pub fn lr_check(left: &DisparityMap, right: &DisparityMap, tol: f32) -> Result<DisparityMap> {
    if left.size() != right.size() {
        return Err(Error::Size("left and right disparity maps differ in size".into()));
    }
    let (w, h) = left.size();
    let mut out = DisparityMap::invalid(w, h);
    for y in 0..h {
        for x in 0..w {
            let dl = left.get(x, y);
            if !dl.is_finite() {
                continue;
            }
            let xr = (x as f32 - dl).round();
            if xr < 0.0 || xr >= w as f32 {
                continue;
            }
            let dr = right.get(xr as usize, y);
            if dr.is_finite() && (dl - dr).abs() <= tol {
                out.set(x, y, dl);
            }
        }
    }
    Ok(out)
}

/// Vertex offset of the parabola through `(−1, cm)`, `(0, c0)`, `(1, cp)`,
/// clamped to ±0.5. Flat or concave triples give 0.
pub fn parabola_offset(cm: f32, c0: f32, cp: f32) -> f32 {
    let denom = 2.0 * (cm + cp - 2.0 * c0);
    if denom <= 0.0 || !denom.is_finite() {
        return 0.0;
    }
    ((cm - cp) / denom).clamp(-0.5, 0.5)
}

/// Refine integer disparities with a parabola over the neighbouring costs.
/// Pixels at the ends of the range or next to invalid cells are unchanged.
pub fn subpixel_refine(vol: &CostVolume, disp: &DisparityMap) -> Result<DisparityMap> {
    if disp.size() != (vol.width(), vol.height()) {
        return Err(Error::Size("disparity map does not match cost volume".into()));
    }
    let mut out = disp.clone();
    for y in 0..vol.height() {
        for x in 0..vol.width() {
            let d = disp.get(x, y);
            if !d.is_finite() || d.fract() != 0.0 {
                continue;
            }
            let d = d as usize;
            if d <= vol.d_min() || d >= vol.d_max() {
                continue;
            }
            let (cm, c0, cp) = (vol.get(x, y, d - 1), vol.get(x, y, d), vol.get(x, y, d + 1));
            if is_valid_cost(cm) && is_valid_cost(c0) && is_valid_cost(cp) {
                out.set(x, y, d as f32 + parabola_offset(cm, c0, cp));
            }
        }
    }
    Ok(out)
}
