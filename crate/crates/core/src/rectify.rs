//! Refraction compensation by depth-indexed radial distortion, and stereo
//! rectification.
//!
//! A camera looking through a flat port behaves approximately like a central
//! camera whose radial distortion and focal length depend on the working
//! distance. Each calibration anchor stores the coefficients fitted at one
//! distance; coefficients for other distances are linearly interpolated.

use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::StereoFrame;
use crate::image::{GrayImage, Mask};

/// Distortion coefficients fitted at one working distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    /// Distance in meters.
    pub depth: f64,
    pub k1: f64,
    pub k2: f64,
    /// Effective focal length in pixels at this distance.
    pub focal: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Focal length of the rectified pinhole images, in pixels.
    pub focal: f64,
    pub principal: (f64, f64),
    pub anchors: Vec<Anchor>,
    /// Meters.
    pub baseline: f64,
    pub image_size: (usize, usize),
    /// Optional rectifying rotations, row-major.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_left: Option<[[f64; 3]; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotation_right: Option<[[f64; 3]; 3]>,
}

impl CameraModel {
    /// Distortion-free model with a single anchor at `depth`.
    pub fn pinhole(focal: f64, image_size: (usize, usize), baseline: f64) -> Self {
        Self {
            focal,
            principal: ((image_size.0 as f64 - 1.0) / 2.0, (image_size.1 as f64 - 1.0) / 2.0),
            anchors: vec![Anchor {
                depth: 1.0,
                k1: 0.0,
                k2: 0.0,
                focal,
            }],
            baseline,
            image_size,
            rotation_left: None,
            rotation_right: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0) {
            return Err(Error::config("focal", "must be > 0"));
        }
        if self.anchors.is_empty() {
            return Err(Error::config("anchors", "at least one anchor is required"));
        }
        for (i, a) in self.anchors.iter().enumerate() {
            if !(a.focal > 0.0) || !(a.depth > 0.0) || !a.k1.is_finite() || !a.k2.is_finite() {
                return Err(Error::config(format!("anchors[{i}]"), "needs depth > 0, focal > 0, finite k1/k2"));
            }
        }
        if self.anchors.windows(2).any(|w| w[1].depth <= w[0].depth) {
            return Err(Error::config("anchors", "depths must be strictly increasing"));
        }
        if !(self.baseline > 0.0) {
            return Err(Error::config("baseline", "must be > 0"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::config("image_size", "must be nonzero"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.validate()?;
        Ok(model)
    }

    /// Range of depth hints accepted without clamping.
    pub fn depth_range(&self) -> (f64, f64) {
        (
            self.anchors[0].depth * 0.5,
            self.anchors[self.anchors.len() - 1].depth * 2.0,
        )
    }

    /// Coefficients at `depth`: linear between anchors, constant beyond the
    /// outermost ones. Hints outside [`Self::depth_range`] are clamped with a
    /// warning.
    pub fn coeffs_at(&self, depth: f64) -> Anchor {
        let (lo, hi) = self.depth_range();
        let d = if depth.is_nan() || depth < lo || depth > hi {
            let c = if depth.is_nan() { lo } else { depth.clamp(lo, hi) };
            log::warn!("depth hint {depth} outside calibrated range [{lo}, {hi}]; clamped to {c}");
            c
        } else {
            depth
        };
        let a = &self.anchors;
        if d <= a[0].depth {
            return Anchor { depth: d, ..a[0] };
        }
        if d >= a[a.len() - 1].depth {
            return Anchor {
                depth: d,
                ..a[a.len() - 1]
            };
        }
        let i = a.iter().position(|x| x.depth > d).expect("inside range") - 1;
        let t = (d - a[i].depth) / (a[i + 1].depth - a[i].depth);
        let lerp = |p: f64, q: f64| p + t * (q - p);
        Anchor {
            depth: d,
            k1: lerp(a[i].k1, a[i + 1].k1),
            k2: lerp(a[i].k2, a[i + 1].k2),
            focal: lerp(a[i].focal, a[i + 1].focal),
        }
    }

    /// Map an ideal pinhole pixel to where it is observed in the raw image.
    pub fn distort(&self, depth: f64, pixel: (f64, f64)) -> (f64, f64) {
        distort_with(&self.coeffs_at(depth), self.focal, self.principal, pixel)
    }

    /// Map an observed raw pixel to its ideal pinhole position.
    pub fn undistort(&self, depth: f64, pixel: (f64, f64)) -> (f64, f64) {
        undistort_with(&self.coeffs_at(depth), self.focal, self.principal, pixel)
    }

    fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal,
            0.0,
            self.principal.0,
            0.0,
            self.focal,
            self.principal.1,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Rectifying homographies `K R K^-1` for both views.
    pub fn homographies(&self) -> Result<(Matrix3<f64>, Matrix3<f64>)> {
        let k = self.intrinsics();
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| Error::Numerical("intrinsics are singular".into()))?;
        let h = |r: &Option<[[f64; 3]; 3]>| -> Matrix3<f64> {
            match r {
                Some(r) => k * Matrix3::from_fn(|i, j| r[i][j]) * k_inv,
                None => Matrix3::identity(),
            }
        };
        Ok((h(&self.rotation_left), h(&self.rotation_right)))
    }
}

fn distort_with(a: &Anchor, focal: f64, c: (f64, f64), (u, v): (f64, f64)) -> (f64, f64) {
    let (x, y) = ((u - c.0) / focal, (v - c.1) / focal);
    let r2 = x * x + y * y;
    let s = 1.0 + a.k1 * r2 + a.k2 * r2 * r2;
    (c.0 + a.focal * x * s, c.1 + a.focal * y * s)
}

fn undistort_with(a: &Anchor, focal: f64, c: (f64, f64), (u, v): (f64, f64)) -> (f64, f64) {
    let (xd, yd) = ((u - c.0) / a.focal, (v - c.1) / a.focal);
    let rd = (xd * xd + yd * yd).sqrt();
    if rd == 0.0 {
        return (c.0, c.1);
    }
    // Newton on g(r) = r (1 + k1 r^2 + k2 r^4) - rd.
    let mut r = rd;
    for _ in 0..50 {
        let r2 = r * r;
        let g = r * (1.0 + a.k1 * r2 + a.k2 * r2 * r2) - rd;
        let dg = 1.0 + 3.0 * a.k1 * r2 + 5.0 * a.k2 * r2 * r2;
        if dg <= 1e-12 {
            break;
        }
        let step = g / dg;
        r -= step;
        if step.abs() < 1e-15 * rd.max(1.0) {
            break;
        }
    }
    let s = r / rd;
    (c.0 + focal * xd * s, c.1 + focal * yd * s)
}

/// Fit `(k1, k2, focal)` at one distance from correspondences between ideal
/// pinhole pixels and observed raw pixels. The model
/// `u_obs - cx = f x + (f k1) x r^2 + (f k2) x r^4` is linear in
/// `(f, f k1, f k2)`.
pub fn fit_anchor(
    depth: f64,
    focal: f64,
    principal: (f64, f64),
    pairs: &[((f64, f64), (f64, f64))],
) -> Result<Anchor> {
    if pairs.len() < 2 {
        return Err(Error::Invalid("need at least two correspondences".into()));
    }
    let n = pairs.len() * 2;
    let mut a = DMatrix::<f64>::zeros(n, 3);
    let mut b = DVector::<f64>::zeros(n);
    for (i, &((u, v), (uo, vo))) in pairs.iter().enumerate() {
        let (x, y) = ((u - principal.0) / focal, (v - principal.1) / focal);
        let r2 = x * x + y * y;
        for (row, (p, obs)) in [(2 * i, (x, uo - principal.0)), (2 * i + 1, (y, vo - principal.1))] {
            a[(row, 0)] = p;
            a[(row, 1)] = p * r2;
            a[(row, 2)] = p * r2 * r2;
            b[row] = obs;
        }
    }
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Numerical(e.to_string()))?;
    if !(sol[0] > 0.0) {
        return Err(Error::Numerical("fitted focal is not positive".into()));
    }
    Ok(Anchor {
        depth,
        k1: sol[1] / sol[0],
        k2: sol[2] / sol[0],
        focal: sol[0],
    })
}

/// Axis-aligned pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RectifiedPairMeta {
    pub homography_left: [[f64; 3]; 3],
    pub homography_right: [[f64; 3]; 3],
    /// Region where both rectified views have source pixels.
    pub valid: Rect,
    pub depth_hint: f64,
}

fn to_rows(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    [
        [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
        [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
        [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
    ]
}

fn apply(h: &Matrix3<f64>, (u, v): (f64, f64)) -> Option<(f64, f64)> {
    let p = h * Vector3::new(u, v, 1.0);
    (p.z.abs() > 1e-12).then(|| (p.x / p.z, p.y / p.z))
}

impl RectifiedPairMeta {
    /// Map an observed raw pixel of view `right` (false: left) into the
    /// rectified image.
    pub fn map_point(&self, model: &CameraModel, right: bool, pixel: (f64, f64)) -> Option<(f64, f64)> {
        let h = if right { &self.homography_right } else { &self.homography_left };
        let h = Matrix3::from_fn(|i, j| h[i][j]);
        apply(&h, model.undistort(self.depth_hint, pixel))
    }
}

fn check_homography(h: &Matrix3<f64>, which: &str) -> Result<Matrix3<f64>> {
    let det = h.determinant();
    if !det.is_finite() || det.abs() < 1e-9 {
        return Err(Error::Numerical(format!("{which} homography is degenerate (det {det:e})")));
    }
    h.try_inverse()
        .ok_or_else(|| Error::Numerical(format!("{which} homography is not invertible")))
}

fn warp_view(model: &CameraModel, coeffs: &Anchor, h_inv: &Matrix3<f64>, src: &GrayImage) -> (GrayImage, Mask) {
    let (w, h) = src.size();
    let rows: Vec<(Vec<f32>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut vals = vec![0.0f32; w];
            let mut ok = vec![false; w];
            for x in 0..w {
                let Some(ideal) = apply(h_inv, (x as f64, y as f64)) else { continue };
                let (u, v) = distort_with(coeffs, model.focal, model.principal, ideal);
                if let Some(val) = src.sample_inside(u as f32, v as f32) {
                    vals[x] = val;
                    ok[x] = true;
                }
            }
            (vals, ok)
        })
        .collect();
    let mut data = Vec::with_capacity(w * h);
    let mut mask = Vec::with_capacity(w * h);
    for (v, m) in rows {
        data.extend(v);
        mask.extend(m);
    }
    (
        GrayImage::new(w, h, data).expect("sizes agree"),
        Mask::new(w, h, mask).expect("sizes agree"),
    )
}

/// Shrink the full frame until its border lies entirely inside `mask`,
/// trimming the side with the most invalid pixels first.
pub fn inscribed_rect(mask: &Mask) -> Rect {
    let mut r = Rect {
        x0: 0,
        y0: 0,
        x1: mask.width(),
        y1: mask.height(),
    };
    loop {
        if r.x0 >= r.x1 || r.y0 >= r.y1 {
            return Rect { x0: 0, y0: 0, x1: 0, y1: 0 };
        }
        let bad_row = |y: usize| (r.x0..r.x1).filter(|&x| !mask.get(x, y)).count();
        let bad_col = |x: usize| (r.y0..r.y1).filter(|&y| !mask.get(x, y)).count();
        let sides = [bad_row(r.y0), bad_row(r.y1 - 1), bad_col(r.x0), bad_col(r.x1 - 1)];
        let (i, &worst) = sides
            .iter()
            .enumerate()
            .max_by_key(|(i, &c)| (c, std::cmp::Reverse(*i)))
            .expect("four sides");
        if worst == 0 {
            return r;
        }
        match i {
            0 => r.y0 += 1,
            1 => r.y1 -= 1,
            2 => r.x0 += 1,
            _ => r.x1 -= 1,
        }
    }
}

/// Undistort both views for `depth_hint` and apply the rectifying rotations.
/// The resulting frame carries no masks; pixels without a source are zero.
pub fn rectify_pair(
    model: &CameraModel,
    left: &GrayImage,
    right: &GrayImage,
    depth_hint: f64,
) -> Result<(StereoFrame, RectifiedPairMeta)> {
    model.validate()?;
    for (name, img) in [("left", left), ("right", right)] {
        if img.size() != model.image_size {
            return Err(Error::Size(format!(
                "{name} image is {:?}, calibration expects {:?}",
                img.size(),
                model.image_size
            )));
        }
    }
    let (hl, hr) = model.homographies()?;
    let hl_inv = check_homography(&hl, "left")?;
    let hr_inv = check_homography(&hr, "right")?;
    let coeffs = model.coeffs_at(depth_hint);
    let (l, ml) = warp_view(model, &coeffs, &hl_inv, left);
    let (r, mr) = warp_view(model, &coeffs, &hr_inv, right);
    let valid = inscribed_rect(&Mask::from_fn(ml.width(), ml.height(), |x, y| ml.get(x, y) && mr.get(x, y)));
    let meta = RectifiedPairMeta {
        homography_left: to_rows(&hl),
        homography_right: to_rows(&hr),
        valid,
        depth_hint: coeffs.depth,
    };
    Ok((StereoFrame::new(l, r)?, meta))
}

/// Warp an ideal pinhole image into the raw, distorted view seen at `depth`.
/// Used to synthesize calibration data.
pub fn apply_distortion(model: &CameraModel, depth: f64, ideal: &GrayImage) -> GrayImage {
    let a = model.coeffs_at(depth);
    GrayImage::from_fn(ideal.width(), ideal.height(), |x, y| {
        let (u, v) = undistort_with(&a, model.focal, model.principal, (x as f64, y as f64));
        ideal.sample_bilinear(u as f32, v as f32)
    })
}
