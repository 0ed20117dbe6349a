//! Triangulation, outlier removal, normals, PLY export and accuracy metrics.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::image::{to_u8, GrayImage};
use crate::rectify::CameraModel;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    /// Camera-frame coordinates in meters (x right, y down, z forward).
    pub points: Vec<[f64; 3]>,
    pub colors: Vec<[u8; 3]>,
    /// Source pixel in the left view.
    pub pixels: Vec<(u32, u32)>,
    pub normals: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn select(&self, keep: &[bool]) -> Self {
        let pick = |v: &[[f64; 3]]| v.iter().zip(keep).filter(|(_, &k)| k).map(|(p, _)| *p).collect::<Vec<_>>();
        Self {
            points: pick(&self.points),
            colors: self.colors.iter().zip(keep).filter(|(_, &k)| k).map(|(c, _)| *c).collect(),
            pixels: self.pixels.iter().zip(keep).filter(|(_, &k)| k).map(|(c, _)| *c).collect(),
            normals: self.normals.as_ref().map(|n| pick(n)),
        }
    }
}

/// Back-project valid disparities: `z = f b / d`, `x = (u - cx) z / f`,
/// `y = (v - cy) z / f`. Returns the cloud and the number of valid pixels
/// dropped for non-positive disparity.
pub fn triangulate(disp: &DisparityMap, model: &CameraModel, color: Option<&GrayImage>) -> (PointCloud, usize) {
    let mut cloud = PointCloud::default();
    let mut dropped = 0;
    let fb = model.focal * model.baseline;
    let (cx, cy) = model.principal;
    for y in 0..disp.height() {
        for x in 0..disp.width() {
            let d = disp.get(x, y);
            if !d.is_finite() {
                continue;
            }
            if d <= 0.0 {
                dropped += 1;
                continue;
            }
            let z = fb / d as f64;
            cloud.points.push([(x as f64 - cx) * z / model.focal, (y as f64 - cy) * z / model.focal, z]);
            let g = color.map(|c| to_u8(c.get(x, y))).unwrap_or(255);
            cloud.colors.push([g, g, g]);
            cloud.pixels.push((x as u32, y as u32));
        }
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} pixels with non-positive disparity");
    }
    (cloud, dropped)
}

/// Pinhole projection into the left view.
pub fn project(model: &CameraModel, p: [f64; 3]) -> (f64, f64) {
    (
        model.focal * p[0] / p[2] + model.principal.0,
        model.focal * p[1] / p[2] + model.principal.1,
    )
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Uniform hash grid for k-nearest-neighbour queries.
pub struct KnnGrid<'a> {
    points: &'a [[f64; 3]],
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl<'a> KnnGrid<'a> {
    /// Cell size targets a few points per cell from the bounding-box volume.
    pub fn new(points: &'a [[f64; 3]]) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        let ext: Vec<f64> = (0..3).map(|i| (hi[i] - lo[i]).max(0.0)).collect();
        let n = points.len().max(1) as f64;
        // Surfaces dominate: size cells from the two largest extents.
        let mut e = ext.clone();
        e.sort_by(|a, b| b.total_cmp(a));
        let area = (e[0] * e[1]).max(e[0] * e[0] * 1e-6).max(1e-18);
        let cell = (4.0 * area / n).sqrt().max(1e-9);
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key_of(cell, p)).or_default().push(i);
        }
        Self { points, cell, cells }
    }

    fn key_of(cell: f64, p: &[f64; 3]) -> (i64, i64, i64) {
        (
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        )
    }

    /// Indices and squared distances of the `k` nearest points to point
    /// `idx`, excluding itself, nearest first.
    pub fn nearest(&self, idx: usize, k: usize) -> Vec<(usize, f64)> {
        let p = &self.points[idx];
        let c = Self::key_of(self.cell, p);
        let mut found: Vec<(usize, f64)> = Vec::new();
        let max_ring = 1 + (self.cells.len() as f64).cbrt() as i64 * 4 + 64;
        for r in 0..=max_ring {
            for dz in -r..=r {
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        if let Some(v) = self.cells.get(&(c.0 + dx, c.1 + dy, c.2 + dz)) {
                            for &j in v {
                                if j != idx {
                                    found.push((j, dist2(p, &self.points[j])));
                                }
                            }
                        }
                    }
                }
            }
            if found.len() >= k {
                found.sort_by(|a, b| a.1.total_cmp(&b.1));
                // Points beyond ring r are at least r * cell away.
                let bound = (r as f64 * self.cell).powi(2);
                if found[k - 1].1 <= bound {
                    found.truncate(k);
                    return found;
                }
            }
        }
        found.sort_by(|a, b| a.1.total_cmp(&b.1));
        found.truncate(k);
        found
    }
}

/// Drop points whose mean distance to their `k` nearest neighbours exceeds
/// `mean + sigma * std` of that statistic over the cloud.
pub fn remove_outliers(cloud: &PointCloud, k: usize, sigma: f64) -> Result<PointCloud> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if cloud.len() < k + 1 {
        if !cloud.is_empty() {
            log::warn!("cloud of {} points is too small for {k}-NN filtering; unchanged", cloud.len());
        }
        return Ok(cloud.clone());
    }
    let grid = KnnGrid::new(&cloud.points);
    let md: Vec<f64> = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nn = grid.nearest(i, k);
            nn.iter().map(|(_, d2)| d2.sqrt()).sum::<f64>() / nn.len().max(1) as f64
        })
        .collect();
    let n = md.len() as f64;
    let mean = md.iter().sum::<f64>() / n;
    let std = (md.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let limit = mean + sigma * std;
    let keep: Vec<bool> = md.iter().map(|&v| v <= limit).collect();
    Ok(cloud.select(&keep))
}

/// Normals from a plane fit to the `k` nearest neighbours, oriented toward
/// the camera.
pub fn estimate_normals(cloud: &mut PointCloud, k: usize) {
    if cloud.len() < 3 {
        cloud.normals = Some(vec![[0.0, 0.0, -1.0]; cloud.len()]);
        return;
    }
    let grid = KnnGrid::new(&cloud.points);
    let k = k.min(cloud.len() - 1).max(2);
    let normals = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let mut pts: Vec<[f64; 3]> = grid.nearest(i, k).iter().map(|&(j, _)| cloud.points[j]).collect();
            pts.push(cloud.points[i]);
            let n = plane_normal(&pts);
            let p = cloud.points[i];
            if n.dot(&Vector3::new(p[0], p[1], p[2])) > 0.0 {
                [-n.x, -n.y, -n.z]
            } else {
                [n.x, n.y, n.z]
            }
        })
        .collect();
    cloud.normals = Some(normals);
}

fn centroid(pts: &[[f64; 3]]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for p in pts {
        c += Vector3::new(p[0], p[1], p[2]);
    }
    c / pts.len().max(1) as f64
}

fn plane_normal(pts: &[[f64; 3]]) -> Vector3<f64> {
    let c = centroid(pts);
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = Vector3::new(p[0], p[1], p[2]) - c;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let i = eig.eigenvalues.imin();
    eig.eigenvectors.column(i).normalize()
}

/// Plane `n . p = offset` with unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Plane {
    /// Least-squares fit through the centroid.
    pub fn fit(points: &[[f64; 3]]) -> Result<Self> {
        if points.len() < 3 {
            return Err(Error::Data("plane fit needs at least three points".into()));
        }
        let n = plane_normal(points);
        let c = centroid(points);
        Ok(Self {
            normal: [n.x, n.y, n.z],
            offset: n.dot(&c),
        })
    }

    /// Depth where the optical axis meets the plane.
    pub fn depth_on_axis(&self) -> f64 {
        self.offset / self.normal[2]
    }
}

/// Binary little-endian PLY with positions, normals (if present) and colors.
pub fn write_ply(cloud: &PointCloud, path: &Path) -> Result<()> {
    let mut out = Vec::new();
    let has_n = cloud.normals.is_some();
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment uwstereo point cloud\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n",
        cloud.len()
    );
    if has_n {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n");
    out.extend_from_slice(header.as_bytes());
    for i in 0..cloud.len() {
        for v in cloud.points[i] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(n) = &cloud.normals {
            for v in n[i] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out.extend_from_slice(&cloud.colors[i]);
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Disparity accuracy against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisparityMetrics {
    /// RMSE over pixels valid in both maps.
    pub rmse: f64,
    /// Fraction of ground-truth pixels that are missing or off by more than
    /// the threshold.
    pub bad_pixel_rate: f64,
    /// Fraction of ground-truth pixels with an estimate.
    pub coverage: f64,
    /// Ground-truth pixels evaluated.
    pub count: usize,
}

pub fn eval_disparity(est: &DisparityMap, gt: &DisparityMap, threshold: f32) -> Result<DisparityMetrics> {
    eval_disparity_masked(est, gt, threshold, None)
}

/// As [`eval_disparity`], restricted to `region` when given.
pub fn eval_disparity_masked(
    est: &DisparityMap,
    gt: &DisparityMap,
    threshold: f32,
    region: Option<&crate::image::Mask>,
) -> Result<DisparityMetrics> {
    ErrorTally::of(est, gt, threshold, region)?.metrics()
}

/// Raw error counts; tallies of several frames add up to pooled metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTally {
    /// Ground-truth pixels evaluated.
    pub gt_valid: usize,
    /// Of those, pixels with an estimate.
    pub both_valid: usize,
    pub bad: usize,
    pub squared_error: f64,
}

impl ErrorTally {
    pub fn of(est: &DisparityMap, gt: &DisparityMap, threshold: f32, region: Option<&crate::image::Mask>) -> Result<Self> {
        if est.size() != gt.size() {
            return Err(Error::Size("estimate and ground truth differ in size".into()));
        }
        if region.is_some_and(|m| m.size() != gt.size()) {
            return Err(Error::Size("evaluation mask differs in size".into()));
        }
        let mut t = Self::default();
        for (i, (&e, &g)) in est.data().iter().zip(gt.data()).enumerate() {
            if !g.is_finite() || region.is_some_and(|m| !m.data()[i]) {
                continue;
            }
            t.gt_valid += 1;
            if e.is_finite() {
                t.both_valid += 1;
                let err = (e - g) as f64;
                t.squared_error += err * err;
                if err.abs() > threshold as f64 {
                    t.bad += 1;
                }
            } else {
                t.bad += 1;
            }
        }
        Ok(t)
    }

    pub fn add(&mut self, other: &Self) {
        self.gt_valid += other.gt_valid;
        self.both_valid += other.both_valid;
        self.bad += other.bad;
        self.squared_error += other.squared_error;
    }

    pub fn metrics(&self) -> Result<DisparityMetrics> {
        if self.both_valid == 0 {
            return Err(Error::Data("no pixels where both estimate and ground truth are valid".into()));
        }
        Ok(DisparityMetrics {
            rmse: (self.squared_error / self.both_valid as f64).sqrt(),
            bad_pixel_rate: self.bad as f64 / self.gt_valid as f64,
            coverage: self.both_valid as f64 / self.gt_valid as f64,
            count: self.gt_valid,
        })
    }
}

/// RMSE of nearest-point distances from `cloud` to `reference`.
pub fn eval_cloud_rmse(cloud: &PointCloud, reference: &PointCloud) -> Result<f64> {
    if cloud.is_empty() || reference.is_empty() {
        return Err(Error::Data("empty point cloud".into()));
    }
    let mut all = reference.points.clone();
    let base = all.len();
    all.extend_from_slice(&cloud.points);
    let grid = KnnGrid::new(&all);
    // Query each cloud point against reference points only.
    let sq: f64 = (0..cloud.len())
        .into_par_iter()
        .map(|i| {
            let nn = grid.nearest(base + i, cloud.len().min(64) + 1);
            nn.iter().find(|(j, _)| *j < base).map(|(_, d2)| *d2).unwrap_or_else(|| {
                reference.points.iter().map(|r| dist2(r, &cloud.points[i])).fold(f64::INFINITY, f64::min)
            })
        })
        .sum();
    Ok((sq / cloud.len() as f64).sqrt())
}
