//! U-Net target segmentation used to restrict the disparity search.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use uwstereo_nn::loss::{cross_entropy, sigmoid};
use uwstereo_nn::{checkpoint, GraphBuilder, Network, NetworkSpec, OptimizerConfig, Tensor};

use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};
use crate::synth::ValueNoise;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegConfig {
    /// Resolution levels, including the full-resolution one.
    pub levels: usize,
    /// Channels at full resolution; doubled at every level.
    pub base_channels: usize,
    pub threshold: f32,
    /// Dilation radius applied before the mask limits the stereo search.
    pub dilation: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            levels: 5,
            base_channels: 16,
            threshold: 0.5,
            dilation: 4,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.levels > 8 {
            return Err(Error::config("segmenter.levels", "must be in 1..=8"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("segmenter.base_channels", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("segmenter.threshold", "must be in [0, 1]"));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn alignment(&self) -> usize {
        1 << (self.levels - 1)
    }
}

fn build_spec(cfg: &SegConfig) -> Result<NetworkSpec> {
    let mut b = GraphBuilder::new(&[1]);
    let mut h = b.input(0);
    let mut skips = Vec::new();
    for level in 0..cfg.levels {
        if level > 0 {
            h = b.maxpool2(h);
        }
        let c = cfg.base_channels << level;
        for _ in 0..2 {
            h = b.conv(h, c, 3);
            h = b.relu(h);
        }
        skips.push(h);
    }
    for level in (0..cfg.levels - 1).rev() {
        let up = b.upsample2(h);
        h = b.concat(&[up, skips[level]]);
        let c = cfg.base_channels << level;
        for _ in 0..2 {
            h = b.conv(h, c, 3);
            h = b.relu(h);
        }
    }
    let logits = b.conv(h, 1, 1);
    Ok(b.finish(logits)?)
}

/// Per-pixel target probability.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMask {
    pub probability: GrayImage,
    pub threshold: f32,
}

impl TargetMask {
    pub fn binarize(&self) -> Mask {
        Mask::from_fn(self.probability.width(), self.probability.height(), |x, y| {
            self.probability.get(x, y) > self.threshold
        })
    }

    /// Binarized and dilated, ready to constrain matching.
    pub fn search_mask(&self, dilation: usize) -> Mask {
        self.binarize().dilate(dilation)
    }
}

#[derive(Clone, Debug)]
pub struct SegNet {
    config: SegConfig,
    net: Network,
}

impl SegNet {
    pub fn new(config: SegConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let net = Network::new(build_spec(&config)?, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Self { config, net })
    }

    /// All weights zero; the output is exactly 0.5 everywhere.
    pub fn zeros(config: SegConfig) -> Result<Self> {
        config.validate()?;
        let net = Network::zeros(build_spec(&config)?)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &SegConfig {
        &self.config
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "segmenter", "config": self.config });
        Ok(checkpoint::save(path, &self.net, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("segmenter") {
            return Err(Error::Data(format!("{} is not a segmenter checkpoint", path.display())));
        }
        let config: SegConfig = serde_json::from_value(meta["config"].clone())?;
        if net.spec() != &build_spec(&config)? {
            return Err(Error::Data("checkpoint graph does not match its configuration".into()));
        }
        Ok(Self { config, net })
    }

    fn padded_size(&self, w: usize, h: usize) -> (usize, usize) {
        let a = self.config.alignment();
        (w.div_ceil(a) * a, h.div_ceil(a) * a)
    }

    /// Probability map with the input's size; the image is replicate-padded
    /// to the pooling alignment and the result cropped back.
    pub fn segment(&self, img: &GrayImage) -> Result<TargetMask> {
        let (w, h) = img.size();
        if w == 0 || h == 0 {
            return Err(Error::Size("empty image".into()));
        }
        let (wp, hp) = self.padded_size(w, h);
        let logits = self.net.forward(&[img.pad_to(wp, hp).to_tensor()])?;
        let full = GrayImage::from_tensor(&logits, 0, 0)?;
        Ok(TargetMask {
            probability: full.crop(0, 0, w, h).map(sigmoid),
            threshold: self.config.threshold,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Output pairs per source pair, the source itself included.
    pub factor: usize,
    pub scale: (f32, f32),
    /// Maximum rotation in degrees, either direction.
    pub rotation: f32,
    /// Maximum translation as a fraction of the image side.
    pub translation: f32,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            factor: 10,
            scale: (0.8, 1.25),
            rotation: 180.0,
            translation: 0.1,
            seed: 11,
        }
    }
}

impl AugmentConfig {
    /// Factor 1: the training set equals the source set.
    pub fn none() -> Self {
        Self {
            factor: 1,
            scale: (1.0, 1.0),
            rotation: 0.0,
            translation: 0.0,
            seed: 0,
        }
    }
}

/// Similarity transform about the image center; the mask is resampled by
/// nearest neighbour so it stays binary.
fn transform(img: &GrayImage, mask: &Mask, scale: f32, angle: f32, t: (f32, f32)) -> (GrayImage, Mask) {
    let (w, h) = img.size();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    let src = |x: usize, y: usize| {
        let (dx, dy) = ((x as f32 - cx - t.0) / scale, (y as f32 - cy - t.1) / scale);
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    };
    let out = GrayImage::from_fn(w, h, |x, y| {
        let (u, v) = src(x, y);
        img.sample_bilinear(u, v)
    });
    let m = Mask::from_fn(w, h, |x, y| {
        let (u, v) = src(x, y);
        let (ui, vi) = (u.round(), v.round());
        ui >= 0.0 && vi >= 0.0 && (ui as usize) < w && (vi as usize) < h && mask.get(ui as usize, vi as usize)
    });
    (out, m)
}

/// Expand every source pair into `factor` pairs: the original and
/// `factor - 1` random scalings, rotations and translations.
pub fn augment_pairs(samples: &[(GrayImage, Mask)], cfg: &AugmentConfig) -> Result<Vec<(GrayImage, Mask)>> {
    if cfg.factor == 0 {
        return Err(Error::config("augment.factor", "must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(samples.len() * cfg.factor);
    for (img, mask) in samples {
        if img.size() != mask.size() {
            return Err(Error::Size("image and mask differ in size".into()));
        }
        out.push((img.clone(), mask.clone()));
        for _ in 1..cfg.factor {
            let s = if cfg.scale.1 > cfg.scale.0 { rng.random_range(cfg.scale.0..cfg.scale.1) } else { cfg.scale.0 };
            let r = cfg.rotation.to_radians();
            let a = if r > 0.0 { rng.random_range(-r..r) } else { 0.0 };
            let tr = cfg.translation;
            let (tx, ty) = if tr > 0.0 {
                (
                    rng.random_range(-tr..tr) * img.width() as f32,
                    rng.random_range(-tr..tr) * img.height() as f32,
                )
            } else {
                (0.0, 0.0)
            };
            out.push(transform(img, mask, s, a, (tx, ty)));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTraining {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerConfig,
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for SegTraining {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 8,
            optimizer: OptimizerConfig::adam(2e-3),
            augment: AugmentConfig::default(),
            seed: 5,
        }
    }
}

/// Binary cross-entropy training; returns the mean loss of every epoch.
pub fn train_segmenter(net: &mut SegNet, samples: &[(GrayImage, Mask)], cfg: &SegTraining) -> Result<Vec<f32>> {
    if samples.is_empty() {
        return Err(Error::Data("segmenter training needs at least one sample".into()));
    }
    for (img, mask) in samples {
        if img.size() != mask.size() {
            return Err(Error::Size(format!(
                "image {:?} and mask {:?} differ in size",
                img.size(),
                mask.size()
            )));
        }
    }
    let pairs = augment_pairs(samples, &cfg.augment)?;
    let mut opt = cfg.optimizer.build::<f32>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut batches) = (0.0f64, 0usize);
        let mut i = 0;
        while i < order.len() {
            let size = pairs[order[i]].0.size();
            let mut group = Vec::new();
            while i < order.len() && group.len() < cfg.batch.max(1) && pairs[order[i]].0.size() == size {
                group.push(order[i]);
                i += 1;
            }
            let (wp, hp) = net.padded_size(size.0, size.1);
            let xs: Vec<Tensor> = group.iter().map(|&k| pairs[k].0.pad_to(wp, hp).to_tensor()).collect();
            let ys: Vec<Tensor> = group
                .iter()
                .map(|&k| {
                    let m = &pairs[k].1;
                    GrayImage::from_fn(wp, hp, |x, y| (x < size.0 && y < size.1 && m.get(x, y)) as u8 as f32).to_tensor()
                })
                .collect();
            let logits = net.net.forward_train(&[Tensor::stack(&xs)?])?;
            let loss = cross_entropy(&logits, &Tensor::stack(&ys)?)?;
            let grads = net.net.backward(&loss.grad)?;
            opt.step(&mut net.net, &grads)?;
            if !loss.value.is_finite() {
                return Err(Error::Numerical(format!("segmenter loss diverged in epoch {epoch}")));
            }
            total += loss.value as f64;
            batches += 1;
        }
        let mean = (total / batches.max(1) as f64) as f32;
        log::debug!("segmenter epoch {epoch}: loss {mean:.4}");
        losses.push(mean);
    }
    Ok(losses)
}

/// Bright discs on a dark, smoothly varying field. Returns the noisy image,
/// its noise-free version and the disc mask.
/// Bright disc on a darker field. `clean` is the ideal rendering; the
/// returned input adds a linear illumination ramp of peak-to-peak `shading`
/// in a random direction plus Gaussian noise.
pub fn disc_sample(size: usize, noise: f32, shading: f32, seed: u64) -> (GrayImage, GrayImage, Mask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = size as f32;
    let r = rng.random_range(0.12 * n..0.3 * n);
    let cx = rng.random_range(r..n - r);
    let cy = rng.random_range(r..n - r);
    let bg = rng.random_range(0.05..0.3);
    let fg = bg + rng.random_range(0.3..0.55);
    let field = ValueNoise {
        period: n / 2.0,
        octaves: 2,
        seed: rng.random(),
    };
    let mask = Mask::from_fn(size, size, |x, y| (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2) <= r * r);
    let clean = GrayImage::from_fn(size, size, |x, y| {
        let base = if mask.get(x, y) { fg } else { bg };
        base + 0.02 * (field.eval(x as f32, y as f32) - 0.5)
    });
    let angle = rng.random_range(0.0..std::f32::consts::TAU);
    let (ux, uy) = (angle.cos(), angle.sin());
    let half = (n - 1.0) / 2.0;
    let span = half * (ux.abs() + uy.abs());
    let ramp = |x: usize, y: usize| shading * 0.5 * ((x as f32 - half) * ux + (y as f32 - half) * uy) / span.max(1.0);
    let dist = Normal::new(0.0f32, noise.max(0.0)).expect("valid sigma");
    let mut noisy = GrayImage::from_fn(size, size, |x, y| clean.get(x, y) + ramp(x, y));
    for v in noisy.data_mut() {
        *v += dist.sample(&mut rng);
    }
    (noisy, clean, mask)
}

/// Mask of pixels brighter than the image mean.
pub fn threshold_at_mean(img: &GrayImage) -> Mask {
    Mask::threshold(img, img.mean())
}
