//! Procedural scenes: layered fronto-parallel planes carrying a natural
//! texture and a projected pseudo-random dot pattern, rendered with exact
//! ground-truth disparity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::disparity::DisparityMap;
use crate::frame::StereoFrame;
use crate::image::GrayImage;

/// SplitMix64 finalizer, used to derive independent streams and lattice values.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine several integers into one seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed_u64, |acc, &p| mix(acc ^ mix(p)))
}

fn lattice(seed: u64, ix: i64, iy: i64, k: u64) -> f32 {
    let h = derive_seed(&[seed, ix as u64, iy as u64, k]);
    (h >> 40) as f32 / (1u64 << 24) as f32
}

/// Jittered-grid pattern of Gaussian dots, continuous in its coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DotPattern {
    /// Grid cell size in pixels; each cell holds at most one dot.
    pub cell: f32,
    /// Probability that a cell holds a dot.
    pub density: f32,
    /// Gaussian dot radius in pixels.
    pub sigma: f32,
    pub seed: u64,
}

impl Default for DotPattern {
    fn default() -> Self {
        Self {
            cell: 3.0,
            density: 0.6,
            sigma: 0.7,
            seed: 1,
        }
    }
}

impl DotPattern {
    /// Pattern intensity in `[0, 1]`.
    pub fn eval(&self, u: f32, v: f32) -> f32 {
        let gx = (u / self.cell).floor() as i64;
        let gy = (v / self.cell).floor() as i64;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        let mut acc = 0.0f32;
        for cy in gy - 1..=gy + 1 {
            for cx in gx - 1..=gx + 1 {
                if lattice(self.seed, cx, cy, 0) >= self.density {
                    continue;
                }
                let px = (cx as f32 + lattice(self.seed, cx, cy, 1)) * self.cell;
                let py = (cy as f32 + lattice(self.seed, cx, cy, 2)) * self.cell;
                let amp = 0.6 + 0.4 * lattice(self.seed, cx, cy, 3);
                let r2 = (u - px).powi(2) + (v - py).powi(2);
                acc += amp * (-r2 * inv).exp();
            }
        }
        acc.min(1.0)
    }

    pub fn render(&self, width: usize, height: usize) -> GrayImage {
        GrayImage::from_fn(width, height, |x, y| self.eval(x as f32, y as f32))
    }
}

/// Multi-octave value noise in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueNoise {
    pub period: f32,
    pub octaves: u32,
    pub seed: u64,
}

impl ValueNoise {
    pub fn eval(&self, u: f32, v: f32) -> f32 {
        let mut acc = 0.0;
        let mut norm = 0.0;
        let mut amp = 1.0;
        let mut period = self.period;
        for o in 0..self.octaves {
            let (x, y) = (u / period, v / period);
            let (ix, iy) = (x.floor() as i64, y.floor() as i64);
            let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
            let (tx, ty) = (smooth(x - ix as f32), smooth(y - iy as f32));
            let k = o as u64 + 10;
            let a = lattice(self.seed, ix, iy, k);
            let b = lattice(self.seed, ix + 1, iy, k);
            let c = lattice(self.seed, ix, iy + 1, k);
            let d = lattice(self.seed, ix + 1, iy + 1, k);
            let top = a + tx * (b - a);
            let bot = c + tx * (d - c);
            acc += amp * (top + ty * (bot - top));
            norm += amp;
            amp *= 0.5;
            period *= 0.5;
        }
        acc / norm
    }
}

/// Support of a layer, in left-image coordinates of the layer's surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Region {
    Full,
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disc { cx: f32, cy: f32, r: f32 },
}

impl Region {
    pub fn contains(&self, u: f32, v: f32) -> bool {
        match *self {
            Region::Full => true,
            Region::Rect { x0, y0, x1, y1 } => u >= x0 && u < x1 && v >= y0 && v < y1,
            Region::Disc { cx, cy, r } => (u - cx).powi(2) + (v - cy).powi(2) <= r * r,
        }
    }
}

/// A fronto-parallel plane at constant disparity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub disparity: f32,
    pub region: Region,
    pub texture: ValueNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub width: usize,
    pub height: usize,
    /// Back to front does not matter; nearer (larger disparity) layers occlude.
    pub layers: Vec<Layer>,
    /// Projector pattern, cast from midway between the cameras.
    pub pattern: Option<DotPattern>,
    pub pattern_gain: f32,
    /// Independent Gaussian sensor noise per view.
    pub noise_sigma: f32,
    /// Right-view gain, modelling unequal attenuation between cameras.
    pub right_gain: f32,
    pub seed: u64,
}

impl Scene {
    /// One textured plane filling the view.
    pub fn plane(width: usize, height: usize, disparity: f32, seed: u64) -> Self {
        Self {
            width,
            height,
            layers: vec![Layer {
                disparity,
                region: Region::Full,
                texture: ValueNoise {
                    period: 24.0,
                    octaves: 4,
                    seed: derive_seed(&[seed, 1]),
                },
            }],
            pattern: Some(DotPattern {
                seed: derive_seed(&[seed, 2]),
                ..DotPattern::default()
            }),
            pattern_gain: 0.6,
            noise_sigma: 0.01,
            right_gain: 1.0,
            seed,
        }
    }

    /// Random layered scene: a background plane plus up to three nearer
    /// rectangles or discs.
    pub fn random(width: usize, height: usize, d_min: f32, d_max: f32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut scene = Self::plane(width, height, 0.0, seed);
        let span = d_max - d_min;
        let bg = d_min + rng.random_range(0.0..0.5) * span;
        scene.layers[0].disparity = bg;
        scene.layers[0].texture.period = rng.random_range(12.0..40.0);
        let n = rng.random_range(0..=3);
        for i in 0..n {
            let d = rng.random_range(bg..d_max);
            let (w, h) = (width as f32, height as f32);
            let region = if rng.random_bool(0.5) {
                let x0 = rng.random_range(0.0..w * 0.8);
                let y0 = rng.random_range(0.0..h * 0.8);
                Region::Rect {
                    x0,
                    y0,
                    x1: x0 + rng.random_range(w * 0.15..w * 0.6),
                    y1: y0 + rng.random_range(h * 0.15..h * 0.6),
                }
            } else {
                Region::Disc {
                    cx: rng.random_range(0.0..w),
                    cy: rng.random_range(0.0..h),
                    r: rng.random_range(h * 0.1..h * 0.4),
                }
            };
            scene.layers.push(Layer {
                disparity: d,
                region,
                texture: ValueNoise {
                    period: rng.random_range(8.0..32.0),
                    octaves: 4,
                    seed: derive_seed(&[seed, 100 + i]),
                },
            });
        }
        scene.pattern_gain = rng.random_range(0.4..0.8);
        scene.right_gain = rng.random_range(0.9..1.1);
        scene
    }

    pub fn max_disparity(&self) -> f32 {
        self.layers.iter().map(|l| l.disparity).fold(0.0, f32::max)
    }

    fn visible(&self, u_of: impl Fn(&Layer) -> f32, v: f32) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.region.contains(u_of(l), v) && best.is_none_or(|b| l.disparity > self.layers[b].disparity) {
                best = Some(i);
            }
        }
        best
    }

    /// Layer seen by the left camera at `(x, y)`.
    pub fn visible_left(&self, x: f32, y: f32) -> Option<usize> {
        self.visible(|_| x, y)
    }

    /// Layer seen by the right camera at `(x, y)`.
    pub fn visible_right(&self, x: f32, y: f32) -> Option<usize> {
        self.visible(|l| x + l.disparity, y)
    }

    fn radiance(&self, layer: usize, u: f32, v: f32) -> f32 {
        let l = &self.layers[layer];
        let albedo = 0.25 + 0.55 * l.texture.eval(u, v);
        let light = match &self.pattern {
            Some(p) => 0.5 + self.pattern_gain * p.eval(u - 0.5 * l.disparity, v),
            None => 1.0,
        };
        albedo * light
    }

    fn render_view(&self, right: bool) -> GrayImage {
        const OFFS: [f32; 2] = [-0.25, 0.25];
        GrayImage::from_fn(self.width, self.height, |x, y| {
            let mut acc = 0.0;
            for oy in OFFS {
                for ox in OFFS {
                    let (sx, sy) = (x as f32 + ox, y as f32 + oy);
                    let layer = if right {
                        self.visible_right(sx, sy)
                    } else {
                        self.visible_left(sx, sy)
                    };
                    if let Some(i) = layer {
                        let u = if right { sx + self.layers[i].disparity } else { sx };
                        acc += self.radiance(i, u, sy);
                    }
                }
            }
            acc / 4.0
        })
    }

    /// Left-view disparity; invalid where the point is occluded or leaves the
    /// right view.
    pub fn ground_truth(&self) -> DisparityMap {
        let mut gt = DisparityMap::invalid(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let (fx, fy) = (x as f32, y as f32);
                let Some(i) = self.visible_left(fx, fy) else { continue };
                let d = self.layers[i].disparity;
                let xr = fx - d;
                if xr < 0.0 || xr > (self.width - 1) as f32 {
                    continue;
                }
                if self.visible_right(xr, fy) == Some(i) {
                    gt.set(x, y, d);
                }
            }
        }
        gt
    }

    /// Render both views with noise and ground truth.
    pub fn render(&self) -> StereoFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, 0xfeed]));
        let noise = Normal::new(0.0f32, self.noise_sigma.max(0.0)).expect("valid sigma");
        let mut left = self.render_view(false);
        let mut right = self.render_view(true);
        for v in left.data_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        for v in right.data_mut() {
            *v = (*v * self.right_gain + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        StereoFrame::new(left, right)
            .and_then(|f| f.with_gt(self.ground_truth()))
            .expect("views share a size")
    }
}
