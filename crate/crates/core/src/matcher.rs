//! Multi-scale patch CNN producing per-pixel matching descriptors.
//!
//! Each scale is a small fully convolutional stack applied after `s`
//! 2x max-poolings; branch outputs are upsampled back to full resolution,
//! concatenated and fused by 1x1 convolutions into the feature vector. Left
//! and right views run through the same weights, and similarity is the
//! cosine between their vectors.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uwstereo_nn::loss::{cosine_similarity, cosine_with_grad};
use uwstereo_nn::{checkpoint, GraphBuilder, Network, OptimizerConfig, Tensor};

use crate::costvol::{build_cost_volume, CostVolume, DescriptorMap};
use crate::error::{Error, Result};
use crate::frame::StereoFrame;
use crate::image::{GrayImage, Mask};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherConfig {
    /// Number of dyadic scales; 1 is a single-scale patch network.
    pub scales: usize,
    /// Channels of each per-scale stack.
    pub channels: usize,
    /// 3x3 convolutions per scale.
    pub depth: usize,
    /// Length of the output feature vector.
    pub features: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            channels: 32,
            depth: 4,
            features: 112,
        }
    }
}

impl MatcherConfig {
    /// Side of the input patch: 11 px at the coarsest scale.
    pub fn patch_size(&self) -> usize {
        11 << (self.scales - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 || self.scales > 6 {
            return Err(Error::config("matcher.scales", "must be in 1..=6"));
        }
        if self.channels == 0 || self.depth == 0 || self.features == 0 {
            return Err(Error::config("matcher", "channels, depth and features must be positive"));
        }
        Ok(())
    }
}

/// Name of the node concatenating the per-scale branches.
pub const CONCAT_NODE: &str = "concat";

fn build_spec(cfg: &MatcherConfig) -> Result<uwstereo_nn::NetworkSpec> {
    let mut b = GraphBuilder::new(&[1]);
    let x = b.input(0);
    let mut pooled = x;
    let mut branches = Vec::new();
    for s in 0..cfg.scales {
        if s > 0 {
            pooled = b.maxpool2(pooled);
        }
        let mut h = pooled;
        for _ in 0..cfg.depth {
            h = b.conv(h, cfg.channels, 3);
            h = b.relu(h);
        }
        for _ in 0..s {
            h = b.upsample2(h);
        }
        branches.push(h);
    }
    let cat = b.concat(&branches);
    b.name(cat, CONCAT_NODE);
    let fused = b.conv(cat, cfg.features, 1);
    let fused = b.relu(fused);
    let out = b.conv(fused, cfg.features, 1);
    Ok(b.finish(out)?)
}

/// Zero-mean, unit-variance normalization of a whole patch.
pub fn normalize_patch(patch: &GrayImage) -> GrayImage {
    let n = patch.data().len().max(1) as f64;
    let mean = patch.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = patch.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let s = 1.0 / (var.sqrt() + NORM_EPS as f64);
    patch.map(|v| ((v as f64 - mean) * s) as f32)
}

const NORM_EPS: f32 = 0.01;

/// The same normalization applied densely: every pixel is normalized by the
/// statistics of the `window x window` box around it.
pub fn local_normalize(img: &GrayImage, window: usize) -> GrayImage {
    let (w, h) = img.size();
    let (iw, ih) = (w + 1, h + 1);
    let mut s1 = vec![0.0f64; iw * ih];
    let mut s2 = vec![0.0f64; iw * ih];
    for y in 0..h {
        for x in 0..w {
            let v = img.get(x, y) as f64;
            let i = (y + 1) * iw + x + 1;
            s1[i] = v + s1[i - 1] + s1[i - iw] - s1[i - iw - 1];
            s2[i] = v * v + s2[i - 1] + s2[i - iw] - s2[i - iw - 1];
        }
    }
    let half = window / 2;
    GrayImage::from_fn(w, h, |x, y| {
        let x0 = x.saturating_sub(half);
        let y0 = y.saturating_sub(half);
        let x1 = (x0 + window).min(w);
        let y1 = (y0 + window).min(h);
        let area = ((x1 - x0) * (y1 - y0)) as f64;
        let sum = |s: &[f64]| s[y1 * iw + x1] - s[y0 * iw + x1] - s[y1 * iw + x0] + s[y0 * iw + x0];
        let mean = sum(&s1) / area;
        let var = (sum(&s2) / area - mean * mean).max(0.0);
        ((img.get(x, y) as f64 - mean) / (var.sqrt() + NORM_EPS as f64)) as f32
    })
}

#[derive(Clone, Debug)]
pub struct MatcherNet {
    config: MatcherConfig,
    net: Network,
}

impl MatcherNet {
    pub fn new(config: MatcherConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let spec = build_spec(&config)?;
        let net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &MatcherConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }

    pub fn patch_size(&self) -> usize {
        self.config.patch_size()
    }

    /// Channels entering the fusion layers: the sum over scale branches.
    pub fn concat_channels(&self) -> usize {
        self.config.scales * self.config.channels
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "matcher", "config": self.config });
        Ok(checkpoint::save(path, &self.net, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("matcher") {
            return Err(Error::Data(format!("{} is not a matcher checkpoint", path.display())));
        }
        let config: MatcherConfig = serde_json::from_value(meta["config"].clone())?;
        if net.spec() != &build_spec(&config)? {
            return Err(Error::Data("checkpoint graph does not match its configuration".into()));
        }
        Ok(Self { config, net })
    }

    fn check_patch(&self, patch: &GrayImage) -> Result<()> {
        let p = self.patch_size();
        if patch.size() != (p, p) {
            return Err(Error::Size(format!(
                "patch is {}x{}, network expects {p}x{p}",
                patch.width(),
                patch.height()
            )));
        }
        Ok(())
    }

    /// Feature vector at the patch center.
    pub fn describe(&self, patch: &GrayImage) -> Result<Vec<f32>> {
        self.check_patch(patch)?;
        let p = self.patch_size();
        let out = self.net.forward(&[normalize_patch(patch).to_tensor()])?;
        let c = p / 2;
        Ok((0..self.config.features).map(|f| out.data()[(f * p + c) * p + c]).collect())
    }

    /// Concatenated, upsampled branch outputs for a patch, shape
    /// `[1, concat_channels, p, p]`.
    pub fn branch_features(&self, patch: &GrayImage) -> Result<Tensor> {
        self.check_patch(patch)?;
        let node = self.net.find_node(CONCAT_NODE).expect("matcher graph names its concat node");
        Ok(self.net.forward_node(&[normalize_patch(patch).to_tensor()], node)?)
    }

    /// Cosine similarity between the two patch descriptors.
    pub fn similarity(&self, left: &GrayImage, right: &GrayImage) -> Result<f32> {
        let (u, v) = (self.describe(left)?, self.describe(right)?);
        Ok(cosine_similarity(&u, &v))
    }

    /// Dense descriptors for every pixel, computed in overlapping strips.
    pub fn descriptors(&self, img: &GrayImage) -> Result<DescriptorMap> {
        let (w, h) = img.size();
        if w == 0 || h == 0 {
            return Err(Error::Size("empty image".into()));
        }
        let norm = local_normalize(img, self.patch_size());
        let align = 1usize << (self.config.scales - 1);
        let round_up = |v: usize| v.div_ceil(align) * align;
        let (wp, hp) = (round_up(w), round_up(h));
        let padded = norm.pad_to(wp, hp);
        let strip = round_up(128);
        let margin = round_up(48);
        let f = self.config.features;
        let mut planar = vec![0.0f32; f * w * h];
        for y0 in (0..h).step_by(strip) {
            let ys = y0.saturating_sub(margin);
            let ye = (y0 + strip + margin).min(hp);
            let crop = padded.crop(0, ys as isize, wp, ye - ys);
            let out = self.net.forward(&[crop.to_tensor()])?;
            let sh = ye - ys;
            for fi in 0..f {
                for y in y0..(y0 + strip).min(h) {
                    let src = &out.data()[(fi * sh + (y - ys)) * wp..][..w];
                    planar[(fi * h + y) * w..][..w].copy_from_slice(src);
                }
            }
        }
        DescriptorMap::from_planar(w, h, f, &planar)
    }

    /// Matching-cost volume for a frame, restricted to the masks.
    pub fn cost_volume(&self, frame: &StereoFrame, masks: (&Mask, &Mask), d_min: usize, d_max: usize) -> Result<CostVolume> {
        let dl = self.descriptors(&frame.left)?;
        let dr = self.descriptors(&frame.right)?;
        build_cost_volume(&dl, &dr, masks.0, masks.1, d_min, d_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherTraining {
    pub steps: usize,
    /// Frames per step; both views of each are stacked into one batch.
    pub batch_frames: usize,
    /// Training crop, in pixels.
    pub crop: (usize, usize),
    /// Triplets sampled per frame and step.
    pub samples: usize,
    pub margin: f32,
    /// Negative offset range from the true match, in pixels.
    pub negative_offset: (f32, f32),
    pub optimizer: OptimizerConfig,
    pub clip_norm: f32,
    pub seed: u64,
}

impl Default for MatcherTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_frames: 2,
            crop: (128, 64),
            samples: 256,
            margin: 0.2,
            negative_offset: (4.0, 16.0),
            optimizer: OptimizerConfig::adam(1e-3),
            clip_norm: 5.0,
            seed: 7,
        }
    }
}

/// Gather the feature vector at `(x, y)` of sample `n`, linearly
/// interpolated in `x`.
fn gather(out: &[f32], n: usize, f: usize, h: usize, w: usize, x: f32, y: usize, v: &mut [f32]) -> (usize, f32) {
    let x0 = (x.floor() as usize).min(w - 1);
    let t = (x - x0 as f32).clamp(0.0, 1.0);
    let x1 = (x0 + 1).min(w - 1);
    for (fi, slot) in v.iter_mut().enumerate() {
        let base = ((n * f + fi) * h + y) * w;
        let a = out[base + x0];
        *slot = a + t * (out[base + x1] - a);
    }
    (x0, t)
}

fn scatter(grad: &mut [f32], n: usize, f: usize, h: usize, w: usize, (x0, t): (usize, f32), y: usize, g: &[f32], scale: f32) {
    let x1 = (x0 + 1).min(w - 1);
    for (fi, &gv) in g.iter().enumerate() {
        let base = ((n * f + fi) * h + y) * w;
        grad[base + x0] += scale * (1.0 - t) * gv;
        if t > 0.0 {
            grad[base + x1] += scale * t * gv;
        }
    }
}

/// Mean hinge loss per step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f32>,
}

/// Triplet training: the positive is the right-view pixel at the true
/// disparity, the negative sits a random 4-16 px off it, and the loss is
/// `max(0, margin - s+ + s-)`. Frames without ground truth are skipped.
pub fn train_matcher(net: &mut MatcherNet, frames: &[StereoFrame], cfg: &MatcherTraining) -> Result<TrainLog> {
    let usable: Vec<&StereoFrame> = frames
        .iter()
        .filter(|f| {
            if f.gt.is_none() {
                log::warn!("skipping training frame without ground truth");
            }
            f.gt.is_some()
        })
        .collect();
    let mut log = TrainLog::default();
    if cfg.steps == 0 {
        return Ok(log);
    }
    if usable.is_empty() {
        return Err(Error::Data("no training frames with ground truth".into()));
    }
    let align = 1usize << (net.config.scales - 1);
    let (cw, ch) = (cfg.crop.0 / align * align, cfg.crop.1 / align * align);
    if cw == 0 || ch == 0 {
        return Err(Error::Invalid("training crop smaller than the pooling factor".into()));
    }
    let mut opt = cfg.optimizer.build::<f32>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let f = net.config.features;
    let window = net.patch_size();
    let (omin, omax) = cfg.negative_offset;
    for step in 0..cfg.steps {
        let b = cfg.batch_frames.max(1);
        let mut lefts = Vec::with_capacity(b);
        let mut rights = Vec::with_capacity(b);
        let mut gts = Vec::with_capacity(b);
        for _ in 0..b {
            let fr = usable[rng.random_range(0..usable.len())];
            let (w, h) = fr.size();
            let x0 = rng.random_range(0..=w.saturating_sub(cw)) as isize;
            let y0 = rng.random_range(0..=h.saturating_sub(ch)) as isize;
            lefts.push(local_normalize(&fr.left.crop(x0, y0, cw, ch), window).to_tensor());
            rights.push(local_normalize(&fr.right.crop(x0, y0, cw, ch), window).to_tensor());
            let gt = fr.gt.as_ref().expect("filtered");
            gts.push(GrayImage::from_fn(cw, ch, |x, y| {
                let (gx, gy) = (x0 as usize + x, y0 as usize + y);
                if gx < w && gy < h {
                    gt.get(gx, gy)
                } else {
                    f32::INFINITY
                }
            }));
        }
        let mut batch = lefts;
        batch.extend(rights);
        let input = Tensor::stack(&batch)?;
        let out = net.net.forward_train(&[input])?;
        let data = out.data();
        let mut grad = vec![0.0f32; data.len()];
        let mut u = vec![0.0f32; f];
        let mut vp = vec![0.0f32; f];
        let mut vn = vec![0.0f32; f];
        let mut triplets = Vec::new();
        for (i, gt) in gts.iter().enumerate() {
            let mut tries = 0;
            let mut taken = 0;
            while taken < cfg.samples && tries < cfg.samples * 20 {
                tries += 1;
                let x = rng.random_range(0..cw);
                let y = rng.random_range(0..ch);
                let d = gt.get(x, y);
                if !d.is_finite() {
                    continue;
                }
                let xp = x as f32 - d;
                if xp < 0.0 || xp > (cw - 1) as f32 {
                    continue;
                }
                let off = rng.random_range(omin..=omax);
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                let mut xn = xp + sign * off;
                if xn < 0.0 || xn > (cw - 1) as f32 {
                    xn = xp - sign * off;
                    if xn < 0.0 || xn > (cw - 1) as f32 {
                        continue;
                    }
                }
                triplets.push((i, x, y, xp, xn));
                taken += 1;
            }
        }
        if triplets.is_empty() {
            net.net.backward(&Tensor::zeros(out.shape()))?;
            continue;
        }
        let scale = 1.0 / triplets.len() as f32;
        let (nb, h, w) = (b, ch, cw);
        let mut total = 0.0f32;
        for &(i, x, y, xp, xn) in &triplets {
            let lu = gather(data, i, f, h, w, x as f32, y, &mut u);
            let lp = gather(data, nb + i, f, h, w, xp, y, &mut vp);
            let ln = gather(data, nb + i, f, h, w, xn, y, &mut vn);
            let cp = cosine_with_grad(&u, &vp, true);
            let cn = cosine_with_grad(&u, &vn, true);
            let hinge = cfg.margin - cp.value + cn.value;
            if hinge <= 0.0 {
                continue;
            }
            total += hinge;
            let gu: Vec<f32> = cp.grad_u.iter().zip(&cn.grad_u).map(|(a, b)| b - a).collect();
            scatter(&mut grad, i, f, h, w, lu, y, &gu, scale);
            scatter(&mut grad, nb + i, f, h, w, lp, y, &cp.grad_v, -scale);
            scatter(&mut grad, nb + i, f, h, w, ln, y, &cn.grad_v, scale);
        }
        let loss = total * scale;
        let mut grads = net.net.backward(&Tensor::new(out.shape(), grad)?)?;
        grads.clip_norm(cfg.clip_norm);
        opt.step(&mut net.net, &grads)?;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("matcher loss diverged at step {step}")));
        }
        log.losses.push(loss);
        if step % 50 == 0 {
            log::debug!("matcher step {step}: hinge {loss:.4}");
        }
    }
    Ok(log)
}

/// Mean positive and negative similarities of patch triplets drawn from
/// `frames`, using [`MatcherNet::describe`].
pub fn score_separation(net: &MatcherNet, frames: &[StereoFrame], count: usize, offset: (f32, f32), seed: u64) -> Result<(f32, f32)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = net.patch_size() as isize;
    let half = p / 2;
    let (mut sp, mut sn, mut n) = (0.0f64, 0.0f64, 0usize);
    let frames: Vec<&StereoFrame> = frames.iter().filter(|f| f.gt.is_some()).collect();
    if frames.is_empty() {
        return Err(Error::Data("no frames with ground truth".into()));
    }
    let mut tries = 0;
    while n < count && tries < count * 50 {
        tries += 1;
        let fr = frames[rng.random_range(0..frames.len())];
        let (w, h) = fr.size();
        let x = rng.random_range(0..w);
        let y = rng.random_range(0..h);
        let d = fr.gt.as_ref().expect("filtered").get(x, y);
        if !d.is_finite() {
            continue;
        }
        let xp = (x as f32 - d).round() as isize;
        let off = rng.random_range(offset.0..=offset.1).round() as isize;
        let xn = if rng.random_bool(0.5) { xp + off } else { xp - off };
        if xp < 0 || xn < 0 || xn >= w as isize {
            continue;
        }
        let cut = |img: &GrayImage, cx: isize| img.crop(cx - half, y as isize - half, p as usize, p as usize);
        let u = net.describe(&cut(&fr.left, x as isize))?;
        let vp = net.describe(&cut(&fr.right, xp))?;
        let vn = net.describe(&cut(&fr.right, xn))?;
        sp += cosine_similarity(&u, &vp) as f64;
        sn += cosine_similarity(&u, &vn) as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("no valid triplets".into()));
    }
    Ok(((sp / n as f64) as f32, (sn / n as f64) as f32))
}
