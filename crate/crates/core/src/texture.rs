//! Multi-scale CNN texture recovery: removal of the projected pattern and of
//! bubbles, trained either on aligned pairs or without clean targets through
//! a frozen pattern detector.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uwstereo_nn::loss::mse;
use uwstereo_nn::{checkpoint, Gradients, GraphBuilder, Network, NetworkSpec, OptimizerConfig, Real, Tensor};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::synth::{DotPattern, ValueNoise};

/// Pyramid depth of both networks.
pub const LEVELS: usize = 3;
const ALIGN: usize = 1 << (LEVELS - 1);
const HEAD: &str = "head";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Output is the input plus the predicted correction.
    Restore,
    /// Output is the predicted pattern difference itself.
    Detect,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureConfig {
    pub channels: usize,
    /// 3x3 convolutions per resolution.
    pub depth: usize,
}

impl Default for TextureConfig {
    fn default() -> Self {
        Self { channels: 16, depth: 3 }
    }
}

impl TextureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 {
            return Err(Error::config("texture", "channels and depth must be positive"));
        }
        Ok(())
    }
}

/// One CNN per resolution, coarsest first; each one's features are
/// upsampled and concatenated with the next finer input.
fn build_spec(cfg: &TextureConfig) -> Result<NetworkSpec> {
    let mut b = GraphBuilder::new(&[1; LEVELS]);
    let mut carried = None;
    for level in (0..LEVELS).rev() {
        let mut h = match carried {
            None => b.input(level),
            Some(up) => {
                let x = b.input(level);
                b.concat(&[x, up])
            }
        };
        for _ in 0..cfg.depth {
            h = b.conv(h, cfg.channels, 3);
            h = b.relu(h);
        }
        carried = Some(if level > 0 { b.upsample2(h) } else { h });
    }
    let head = b.conv(carried.expect("at least one level"), 1, 3);
    b.name(head, HEAD);
    Ok(b.finish(head)?)
}

/// 2x2 box average of every plane; sides must be even.
fn downsample<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let q = T::lit(0.25);
    let src = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    for p in 0..n * c {
        let plane = &src[p * h * w..(p + 1) * h * w];
        for y in 0..ho {
            for xx in 0..wo {
                let i = 2 * y * w + 2 * xx;
                out.push(q * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]));
            }
        }
    }
    Ok(Tensor::new(&[n, c, ho, wo], out)?)
}

/// Adjoint of [`downsample`].
fn downsample_adjoint<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = g.dims4()?;
    let q = T::lit(0.25);
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * ho * wo];
    for p in 0..n * c {
        for y in 0..ho {
            for x in 0..wo {
                out[p * ho * wo + y * wo + x] = q * g.data()[p * h * w + (y / 2) * w + x / 2];
            }
        }
    }
    Ok(Tensor::new(&[n, c, ho, wo], out)?)
}

/// Full, half and quarter resolution copies; sides must be multiples of 4.
pub fn pyramid<T: Real>(x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    let (_, _, h, w) = x.dims4()?;
    if h % ALIGN != 0 || w % ALIGN != 0 || h == 0 || w == 0 {
        return Err(Error::Size(format!("{w}x{h} is not a positive multiple of {ALIGN}")));
    }
    let mut levels = vec![x.clone()];
    for _ in 1..LEVELS {
        let next = downsample(levels.last().expect("non-empty"))?;
        levels.push(next);
    }
    Ok(levels)
}

/// Gradient with respect to the full-resolution image, given gradients with
/// respect to each pyramid level.
fn pyramid_adjoint<T: Real>(grads: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut acc = grads[LEVELS - 1].clone();
    for level in (0..LEVELS - 1).rev() {
        let mut up = downsample_adjoint(&acc)?;
        up.add_assign(&grads[level])?;
        acc = up;
    }
    Ok(acc)
}

fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = a.clone();
    out.add_assign(b)?;
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TextureNet<T: Real = f32> {
    config: TextureConfig,
    role: Role,
    net: Network<T>,
}

impl<T: Real> TextureNet<T> {
    /// Random weights with a zero output head, so a restore network starts
    /// as the exact identity and a detector as the zero map.
    pub fn new(config: TextureConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut net = Network::new(build_spec(&config)?, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let head = net.find_node(HEAD).expect("head is named");
        let (w, b) = net.node_params_mut(head).expect("head has parameters");
        w.scale(T::zero());
        b.scale(T::zero());
        Ok(Self { config, role, net })
    }

    pub fn zeros(config: TextureConfig, role: Role) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            net: Network::zeros(build_spec(&config)?)?,
            config,
            role,
        })
    }

    pub fn config(&self) -> &TextureConfig {
        &self.config
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn network(&self) -> &Network<T> {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network<T> {
        &mut self.net
    }

    pub fn cast<U: Real>(&self) -> TextureNet<U> {
        TextureNet {
            config: self.config.clone(),
            role: self.role,
            net: self.net.cast(),
        }
    }

    /// Raw network output on an aligned `[n, 1, h, w]` batch.
    pub fn residual(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.net.forward(&pyramid(x)?)?)
    }

    /// Role-dependent output on an aligned batch, without clamping.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let r = self.residual(x)?;
        match self.role {
            Role::Restore => add(x, &r),
            Role::Detect => Ok(r),
        }
    }
}

impl TextureNet<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "texture", "role": self.role, "config": self.config });
        Ok(checkpoint::save(path, &self.net, &meta)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (net, meta) = checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("texture") {
            return Err(Error::Data(format!("{} is not a texture checkpoint", path.display())));
        }
        let config: TextureConfig = serde_json::from_value(meta["config"].clone())?;
        let role: Role = serde_json::from_value(meta["role"].clone())?;
        if net.spec() != &build_spec(&config)? {
            return Err(Error::Data("checkpoint graph does not match its configuration".into()));
        }
        Ok(Self { config, role, net })
    }

    /// Whole-image inference in overlapping tiles blended with a linear
    /// feather. Restore outputs are clamped to `[0, 1]`.
    pub fn run_tiled(&self, img: &GrayImage, tile: usize, overlap: usize) -> Result<GrayImage> {
        let (w, h) = img.size();
        if w == 0 || h == 0 {
            return Err(Error::Size("empty image".into()));
        }
        let tile = tile.max(2 * overlap + ALIGN);
        let step = tile - overlap;
        let starts = |len: usize| -> Vec<usize> {
            let mut s: Vec<usize> = (0..).map(|i| i * step).take_while(|&p| p + tile < len).collect();
            s.push(len.saturating_sub(tile));
            s.dedup();
            s
        };
        let (xs, ys) = (starts(w), starts(h));
        let mut acc = vec![0.0f32; w * h];
        let mut wsum = vec![0.0f32; w * h];
        let ramp = |i: usize, n: usize, lo_edge: bool, hi_edge: bool| -> f32 {
            let mut v = 1.0f32;
            if !lo_edge {
                v = v.min((i + 1) as f32 / (overlap + 1) as f32);
            }
            if !hi_edge {
                v = v.min((n - i) as f32 / (overlap + 1) as f32);
            }
            v
        };
        for &y0 in &ys {
            for &x0 in &xs {
                let tw = tile.min(w - x0);
                let th = tile.min(h - y0);
                let (pw, ph) = (tw.div_ceil(ALIGN) * ALIGN, th.div_ceil(ALIGN) * ALIGN);
                let patch = img.crop(x0 as isize, y0 as isize, pw, ph);
                let out = GrayImage::from_tensor(&self.apply(&patch.to_tensor())?, 0, 0)?;
                for y in 0..th {
                    let wy = ramp(y, th, y0 == 0, y0 + th == h);
                    for x in 0..tw {
                        let wt = wy * ramp(x, tw, x0 == 0, x0 + tw == w);
                        let i = (y0 + y) * w + x0 + x;
                        acc[i] += wt * out.get(x, y);
                        wsum[i] += wt;
                    }
                }
            }
        }
        let data = acc.iter().zip(&wsum).map(|(a, s)| a / s).collect();
        let out = GrayImage::new(w, h, data)?;
        Ok(match self.role {
            Role::Restore => out.clamp01(),
            Role::Detect => out,
        })
    }
}

/// Remove the pattern and bubbles from an image. Output has the input's size.
pub fn restore(net: &TextureNet, img: &GrayImage) -> Result<GrayImage> {
    net.run_tiled(img, 256, 16)
}

/// Least-squares gain and bias mapping `clean` onto `degraded`.
pub fn fit_brightness(clean: &GrayImage, degraded: &GrayImage) -> Result<(f32, f32)> {
    clean.check_same(degraded)?;
    let n = clean.data().len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0f64, 0.0, 0.0, 0.0);
    for (&x, &y) in clean.data().iter().zip(degraded.data()) {
        let (x, y) = (x as f64, y as f64);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let var = sxx - sx * sx / n;
    if var <= 1e-12 * n {
        return Ok((1.0, ((sy - sx) / n) as f32));
    }
    let gain = (sxy - sx * sy / n) / var;
    Ok((gain as f32, ((sy - gain * sx) / n) as f32))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureTraining {
    pub steps: usize,
    pub batch: usize,
    /// Square crop side, rounded down to a multiple of 4.
    pub crop: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f32,
    /// Fit the clean target's gain and bias to the degraded input first.
    pub match_brightness: bool,
    pub seed: u64,
}

impl Default for TextureTraining {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            crop: 64,
            optimizer: OptimizerConfig::adam(1e-3),
            clip_norm: 5.0,
            match_brightness: true,
            seed: 3,
        }
    }
}

fn crop_side(cfg: &TextureTraining, pairs: &[(GrayImage, GrayImage)]) -> Result<usize> {
    let min_side = pairs.iter().map(|(a, _)| a.width().min(a.height())).min().unwrap_or(0);
    let side = cfg.crop.min(min_side) / ALIGN * ALIGN;
    if side == 0 {
        return Err(Error::Size(format!("images smaller than {ALIGN} px")));
    }
    Ok(side)
}

fn random_crops(images: &[&GrayImage], side: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    let (w, h) = images[0].size();
    let x0 = rng.random_range(0..=w - side) as isize;
    let y0 = rng.random_range(0..=h - side) as isize;
    images.iter().map(|im| im.crop(x0, y0, side, side).to_tensor()).collect()
}

/// Regress the network's raw output onto `target` crops.
fn train_regression(net: &mut TextureNet, pairs: &[(GrayImage, GrayImage)], cfg: &TextureTraining) -> Result<Vec<f32>> {
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    if pairs.is_empty() {
        return Err(Error::Data("texture training needs at least one pair".into()));
    }
    let side = crop_side(cfg, pairs)?;
    let mut opt = cfg.optimizer.build::<f32>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (mut xs, mut ts) = (Vec::new(), Vec::new());
        for _ in 0..cfg.batch.max(1) {
            let (input, target) = &pairs[rng.random_range(0..pairs.len())];
            let mut c = random_crops(&[input, target], side, &mut rng);
            ts.push(c.pop().expect("two crops"));
            xs.push(c.pop().expect("two crops"));
        }
        let x = Tensor::stack(&xs)?;
        let out = net.net.forward_train(&pyramid(&x)?)?;
        let loss = mse(&out, &Tensor::stack(&ts)?)?;
        if !loss.value.is_finite() {
            return Err(Error::Numerical(format!("texture loss diverged at step {step}")));
        }
        let mut grads = net.net.backward(&loss.grad)?;
        grads.clip_norm(cfg.clip_norm);
        opt.step(&mut net.net, &grads)?;
        losses.push(loss.value);
    }
    Ok(losses)
}

fn check_pairs(pairs: &[(GrayImage, GrayImage)]) -> Result<()> {
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.size() != b.size() {
            return Err(Error::Size(format!("pair {i}: {:?} vs {:?}", a.size(), b.size())));
        }
    }
    Ok(())
}

/// Supervised training of a restore network on `(degraded, clean)` pairs.
/// Calling it again with another set continues from the current weights.
pub fn train_supervised(net: &mut TextureNet, pairs: &[(GrayImage, GrayImage)], cfg: &TextureTraining) -> Result<Vec<f32>> {
    if net.role != Role::Restore {
        return Err(Error::Invalid("supervised restoration needs a restore network".into()));
    }
    check_pairs(pairs)?;
    let targets: Vec<(GrayImage, GrayImage)> = pairs
        .iter()
        .map(|(deg, clean)| {
            let clean = if cfg.match_brightness {
                let (g, b) = fit_brightness(clean, deg)?;
                clean.map(|v| g * v + b)
            } else {
                clean.clone()
            };
            let corr = GrayImage::new(deg.width(), deg.height(), clean.data().iter().zip(deg.data()).map(|(c, d)| c - d).collect())?;
            Ok((deg.clone(), corr))
        })
        .collect::<Result<_>>()?;
    train_regression(net, &targets, cfg)
}

/// Train a detector on `(degraded, degraded - clean)` pairs.
pub fn train_detector(net: &mut TextureNet, pairs: &[(GrayImage, GrayImage)], cfg: &TextureTraining) -> Result<Vec<f32>> {
    if net.role != Role::Detect {
        return Err(Error::Invalid("detector training needs a detect network".into()));
    }
    check_pairs(pairs)?;
    train_regression(net, pairs, cfg)
}

/// Loss value, its two terms and gradients for the restore network only.
#[derive(Clone, Debug)]
pub struct Unsupervised<T: Real> {
    pub value: T,
    /// `MSE(in, R(in))`.
    pub fidelity: T,
    /// `MSE(D(R(in)), 0)`.
    pub response: T,
    pub grads: Gradients<T>,
}

/// `MSE(in, R(in)) + lambda * MSE(D(R(in)), 0)` on an aligned batch. The
/// detector is only differentiated with respect to its input; its weights
/// are left untouched and receive no gradient.
pub fn unsupervised_loss<T: Real>(
    input: &Tensor<T>,
    restore: &mut TextureNet<T>,
    detect: &mut TextureNet<T>,
    lambda: T,
) -> Result<Unsupervised<T>> {
    if !(lambda >= T::zero()) || !lambda.is_finite() {
        return Err(Error::config("texture.lambda", format!("must be finite and >= 0, got {lambda}")));
    }
    if restore.role != Role::Restore || detect.role != Role::Detect {
        return Err(Error::Invalid("unsupervised loss needs a restore and a detect network".into()));
    }
    let r = restore.net.forward_train(&pyramid(input)?)?;
    let fidelity = mse(&r, &Tensor::zeros(r.shape()))?;
    let out = add(input, &r)?;
    let out_levels = pyramid(&out)?;
    let mut grad = fidelity.grad;
    let response = if lambda > T::zero() {
        let d = detect.net.forward_train(&out_levels)?;
        let mut resp = mse(&d, &Tensor::zeros(d.shape()))?;
        resp.grad.scale(lambda);
        let through = detect.net.backward(&resp.grad)?;
        grad.add_assign(&pyramid_adjoint(&through.inputs)?)?;
        resp.value
    } else {
        let d = detect.net.forward(&out_levels)?;
        d.sum_sq() / T::from_usize(d.len()).expect("len fits")
    };
    let grads = restore.net.backward(&grad)?;
    Ok(Unsupervised {
        value: fidelity.value + lambda * response,
        fidelity: fidelity.value,
        response,
        grads,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UnsupervisedTraining {
    pub lambda: f32,
    #[serde(flatten)]
    pub base: TextureTraining,
}

impl Default for UnsupervisedTraining {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            base: TextureTraining::default(),
        }
    }
}

/// Fine-tune `restore` on unlabeled images through the frozen `detect`.
pub fn train_unsupervised(
    restore: &mut TextureNet,
    detect: &mut TextureNet,
    images: &[GrayImage],
    cfg: &UnsupervisedTraining,
) -> Result<Vec<f32>> {
    let base = &cfg.base;
    if base.steps == 0 {
        return Ok(Vec::new());
    }
    if images.is_empty() {
        return Err(Error::Data("unsupervised training needs at least one image".into()));
    }
    let pairs: Vec<(GrayImage, GrayImage)> = images.iter().map(|i| (i.clone(), i.clone())).collect();
    let side = crop_side(base, &pairs)?;
    let mut opt = base.optimizer.build::<f32>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let mut losses = Vec::with_capacity(base.steps);
    for step in 0..base.steps {
        let xs: Vec<Tensor> = (0..base.batch.max(1))
            .map(|_| random_crops(&[&images[rng.random_range(0..images.len())]], side, &mut rng).remove(0))
            .collect();
        let mut u = unsupervised_loss(&Tensor::stack(&xs)?, restore, detect, cfg.lambda)?;
        if !u.value.is_finite() {
            return Err(Error::Numerical(format!("unsupervised loss diverged at step {step}")));
        }
        u.grads.clip_norm(base.clip_norm);
        opt.step(&mut restore.net, &u.grads)?;
        losses.push(u.value);
    }
    Ok(losses)
}

/// Mean squared detector output over whole images, evaluated on `restore`'s
/// output when given.
pub fn detector_response(detect: &TextureNet, restore: Option<&TextureNet>, images: &[GrayImage]) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for img in images {
        let input = match restore {
            Some(r) => r.run_tiled(img, 256, 16)?,
            None => img.clone(),
        };
        let d = detect.run_tiled(&input, 256, 16)?;
        total += d.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
        count += d.data().len();
    }
    Ok(total / count.max(1) as f64)
}

/// Additive sinusoidal stripes `amplitude * sin(2 pi (x cos a + y sin a) / period + phase)`.
pub fn stripes(width: usize, height: usize, period: f32, angle: f32, amplitude: f32, phase: f32) -> GrayImage {
    let (s, c) = angle.sin_cos();
    let k = std::f32::consts::TAU / period;
    GrayImage::from_fn(width, height, |x, y| amplitude * (k * (x as f32 * c + y as f32 * s) + phase).sin())
}

/// Smooth random texture in `[0.15, 0.85]`.
pub fn random_texture(width: usize, height: usize, seed: u64) -> GrayImage {
    let noise = ValueNoise {
        period: 24.0,
        octaves: 3,
        seed,
    };
    GrayImage::from_fn(width, height, |x, y| 0.15 + 0.7 * noise.eval(x as f32, y as f32))
}

/// `(degraded, clean)` pairs: textures with stripes of a fixed period and
/// random phase added.
pub fn stripe_pairs(count: usize, size: usize, period: f32, amplitude: f32, seed: u64) -> Vec<(GrayImage, GrayImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let clean = random_texture(size, size, rng.random());
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            let st = stripes(size, size, period, 0.0, amplitude, phase);
            let data = clean.data().iter().zip(st.data()).map(|(a, b)| a + b).collect();
            (GrayImage::new(size, size, data).expect("sizes agree"), clean)
        })
        .collect()
}

/// `(degraded, clean)` pairs: textures with the projector's dot pattern
/// superimposed.
pub fn pattern_pairs(count: usize, size: usize, gain: f32, seed: u64) -> Vec<(GrayImage, GrayImage)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let clean = random_texture(size, size, rng.random());
            let pattern = DotPattern { seed: rng.random(), ..Default::default() }.render(size, size);
            let data = clean
                .data()
                .iter()
                .zip(pattern.data())
                .map(|(c, p)| (c + gain * (p - 0.5)).clamp(0.0, 1.0))
                .collect();
            (GrayImage::new(size, size, data).expect("sizes agree"), clean)
        })
        .collect()
}

/// `(degraded, degraded - clean)` pairs for detector training.
pub fn difference_pairs(pairs: &[(GrayImage, GrayImage)]) -> Vec<(GrayImage, GrayImage)> {
    pairs
        .iter()
        .map(|(deg, clean)| {
            let data = deg.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
            (deg.clone(), GrayImage::new(deg.width(), deg.height(), data).expect("sizes agree"))
        })
        .collect()
}
