//! Procedural bubbles and water fluctuation composited onto stereo pairs.
//!
//! Bubbles are degradation, not geometry: the ground-truth disparity of the
//! underlying scene is carried over untouched.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::frame::StereoFrame;
use crate::image::{GrayImage, Mask};
use crate::synth::{derive_seed, ValueNoise};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Small,
    Large,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityClass {
    Little,
    Much,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionClass {
    Near,
    Far,
}

/// One cell of the degradation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Condition {
    Clean,
    Bubbles {
        size: SizeClass,
        density: DensityClass,
        position: PositionClass,
    },
}

impl Condition {
    /// The clean scene followed by all eight bubble conditions.
    pub fn grid() -> Vec<Condition> {
        let mut out = vec![Condition::Clean];
        for size in [SizeClass::Small, SizeClass::Large] {
            for density in [DensityClass::Little, DensityClass::Much] {
                for position in [PositionClass::Near, PositionClass::Far] {
                    out.push(Condition::Bubbles {
                        size,
                        density,
                        position,
                    });
                }
            }
        }
        out
    }

    /// Position in [`Condition::grid`].
    pub fn index(&self) -> usize {
        Self::grid().iter().position(|c| c == self).expect("grid is exhaustive")
    }

    pub fn label(&self) -> String {
        match self {
            Condition::Clean => "clean".into(),
            Condition::Bubbles {
                size,
                density,
                position,
            } => format!(
                "{}-{}-{}",
                match size {
                    SizeClass::Small => "small",
                    SizeClass::Large => "large",
                },
                match density {
                    DensityClass::Little => "little",
                    DensityClass::Much => "much",
                },
                match position {
                    PositionClass::Near => "near",
                    PositionClass::Far => "far",
                }
            ),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        Self::grid().into_iter().find(|c| c.label() == label)
    }
}

/// Class parameters. The defaults are tuning choices, not measurements.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BubbleConfig {
    /// Radius range in pixels.
    pub small_radius: (f32, f32),
    pub large_radius: (f32, f32),
    /// Bubbles per megapixel.
    pub little_rate: f64,
    pub much_rate: f64,
    pub opacity: (f32, f32),
    /// Extra parallax of near bubbles beyond the scene's maximum disparity.
    pub near_margin: (f32, f32),
    /// Parallax range of far bubbles.
    pub far_parallax: (f32, f32),
    pub highlight: f32,
    pub body: f32,
    /// Fractional darkening at the rim.
    pub rim: f32,
    /// Edge softness of near (defocused) bubbles, as a fraction of radius.
    pub near_blur: f32,
    /// Fluctuation warp applied after compositing; 0 keeps pixels outside
    /// bubbles exact.
    pub warp_amplitude: f32,
    pub warp_wavelength: f32,
}

impl Default for BubbleConfig {
    fn default() -> Self {
        Self {
            small_radius: (3.0, 8.0),
            large_radius: (12.0, 40.0),
            little_rate: 10.0,
            much_rate: 60.0,
            opacity: (0.35, 0.9),
            near_margin: (8.0, 24.0),
            far_parallax: (0.0, 2.0),
            highlight: 1.0,
            body: 0.8,
            rim: 0.6,
            near_blur: 0.25,
            warp_amplitude: 0.0,
            warp_wavelength: 64.0,
        }
    }
}

impl BubbleConfig {
    /// Expected bubbles per megapixel for a condition.
    pub fn rate(&self, condition: &Condition) -> f64 {
        match condition {
            Condition::Clean => 0.0,
            Condition::Bubbles { density, .. } => match density {
                DensityClass::Little => self.little_rate,
                DensityClass::Much => self.much_rate,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bubble {
    /// Left-view center in pixels.
    pub center: (f32, f32),
    pub radius: f32,
    pub opacity: f32,
    /// Highlight position relative to the center, in radii.
    pub highlight_offset: (f32, f32),
    /// For near bubbles: margin beyond the scene's maximum disparity.
    /// For far bubbles: the parallax itself.
    pub parallax: f32,
    /// Edge softness in pixels.
    pub softness: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleField {
    pub condition: Condition,
    pub seed: u64,
    pub bubbles: Vec<Bubble>,
    pub highlight: f32,
    pub body: f32,
    pub rim: f32,
}

impl BubbleField {
    pub fn empty(condition: Condition, seed: u64) -> Self {
        let cfg = BubbleConfig::default();
        Self {
            condition,
            seed,
            bubbles: Vec::new(),
            highlight: cfg.highlight,
            body: cfg.body,
            rim: cfg.rim,
        }
    }

    fn near(&self) -> bool {
        matches!(
            self.condition,
            Condition::Bubbles {
                position: PositionClass::Near,
                ..
            }
        )
    }
}

/// Draw a reproducible bubble field; the count is Poisson with mean
/// `rate * area`.
pub fn sample_field(condition: Condition, size: (usize, usize), seed: u64, cfg: &BubbleConfig) -> BubbleField {
    let mut field = BubbleField {
        highlight: cfg.highlight,
        body: cfg.body,
        rim: cfg.rim,
        ..BubbleField::empty(condition, seed)
    };
    let Condition::Bubbles { size: sc, position, .. } = condition else {
        return field;
    };
    let mean = cfg.rate(&condition) * (size.0 * size.1) as f64 / 1e6;
    if mean <= 0.0 {
        return field;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = Poisson::new(mean).expect("positive mean").sample(&mut rng) as usize;
    let (rmin, rmax) = match sc {
        SizeClass::Small => cfg.small_radius,
        SizeClass::Large => cfg.large_radius,
    };
    let uniform = |rng: &mut ChaCha8Rng, (a, b): (f32, f32)| if b > a { rng.random_range(a..b) } else { a };
    for _ in 0..count {
        let radius = uniform(&mut rng, (rmin, rmax));
        let cx = rng.random_range(-radius..size.0 as f32 + radius);
        let cy = rng.random_range(-radius..size.1 as f32 + radius);
        let opacity = uniform(&mut rng, cfg.opacity).clamp(f32::MIN_POSITIVE, 1.0);
        let angle = rng.random_range(0.0..std::f32::consts::TAU);
        let off = rng.random_range(0.2..0.5);
        let (parallax, softness) = match position {
            PositionClass::Near => (uniform(&mut rng, cfg.near_margin), 1.0 + cfg.near_blur * radius),
            PositionClass::Far => (uniform(&mut rng, cfg.far_parallax), 1.0),
        };
        field.bubbles.push(Bubble {
            center: (cx, cy),
            radius,
            opacity,
            highlight_offset: (off * angle.cos(), off * angle.sin()),
            parallax,
            softness,
        });
    }
    field
}

/// Composite bubbles centered at `center` onto `img`, marking touched pixels.
fn composite(img: &mut GrayImage, mask: &mut Mask, field: &BubbleField, b: &Bubble, center: (f32, f32)) {
    let (w, h) = img.size();
    let reach = b.radius + b.softness;
    let x0 = (center.0 - reach).floor().max(0.0) as usize;
    let y0 = (center.1 - reach).floor().max(0.0) as usize;
    let x1 = ((center.0 + reach).ceil() as isize).clamp(0, w as isize - 1);
    let y1 = ((center.1 + reach).ceil() as isize).clamp(0, h as isize - 1);
    if center.0 + reach < 0.0 || center.1 + reach < 0.0 {
        return;
    }
    let hx = center.0 + b.highlight_offset.0 * b.radius;
    let hy = center.1 + b.highlight_offset.1 * b.radius;
    let hs = 2.0 * (0.3 * b.radius).powi(2);
    for y in y0..=y1 as usize {
        for x in x0..=x1 as usize {
            let (fx, fy) = (x as f32, y as f32);
            let dist = ((fx - center.0).powi(2) + (fy - center.1).powi(2)).sqrt();
            let cover = ((b.radius - dist) / b.softness + 0.5).clamp(0.0, 1.0);
            let alpha = b.opacity * cover;
            if alpha <= 0.0 {
                continue;
            }
            let rho = (dist / b.radius).min(1.0);
            let body = field.body * (1.0 - field.rim * rho.powi(4));
            let g = (-((fx - hx).powi(2) + (fy - hy).powi(2)) / hs).exp();
            let color = g * field.highlight + (1.0 - g) * body;
            let bg = img.get(x, y);
            img.set(x, y, alpha * color + (1.0 - alpha) * bg);
            mask.set(x, y, true);
        }
    }
}

/// Bubbles composited onto a frame, with masks of every touched pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSample {
    pub clean: StereoFrame,
    pub degraded: StereoFrame,
    pub bubble_mask_left: Mask,
    pub bubble_mask_right: Mask,
    pub condition: Condition,
    /// True when a fluctuation warp moved every pixel.
    pub warped: bool,
}

/// Composite `field` onto both views. Near bubbles are displaced between the
/// views by more than the scene's largest disparity.
pub fn render_bubbles(frame: &StereoFrame, field: &BubbleField) -> AugmentedSample {
    let (w, h) = frame.size();
    let scene_max = frame.gt.as_ref().and_then(|g| g.max_valid()).unwrap_or_else(|| {
        if field.near() && !field.bubbles.is_empty() {
            log::warn!("frame has no ground truth; near-bubble parallax assumes zero scene disparity");
        }
        0.0
    });
    let mut left = frame.left.clone();
    let mut right = frame.right.clone();
    let mut ml = Mask::empty(w, h);
    let mut mr = Mask::empty(w, h);
    for b in &field.bubbles {
        let parallax = if field.near() { scene_max + b.parallax } else { b.parallax };
        composite(&mut left, &mut ml, field, b, b.center);
        composite(&mut right, &mut mr, field, b, (b.center.0 - parallax, b.center.1));
    }
    let mut degraded = frame.clone();
    degraded.left = left;
    degraded.right = right;
    AugmentedSample {
        clean: frame.clone(),
        degraded,
        bubble_mask_left: ml,
        bubble_mask_right: mr,
        condition: field.condition,
        warped: false,
    }
}

/// Smooth displacement field (sinusoids plus value noise), scaled so its
/// largest magnitude equals `amplitude`.
pub fn displacement_field(size: (usize, usize), amplitude: f32, wavelength: f32, seed: u64) -> (Vec<f32>, Vec<f32>) {
    let (w, h) = size;
    let n = w * h;
    if amplitude <= 0.0 || n == 0 {
        return (vec![0.0; n], vec![0.0; n]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wavelength = wavelength.max(1.0);
    let mut waves = Vec::new();
    for _ in 0..6 {
        let theta = rng.random_range(0.0..std::f32::consts::TAU);
        let k = std::f32::consts::TAU / (wavelength * rng.random_range(0.7..1.3));
        waves.push((k * theta.cos(), k * theta.sin(), rng.random_range(0.0..std::f32::consts::TAU)));
    }
    let noise = [
        ValueNoise { period: wavelength, octaves: 2, seed: rng.random() },
        ValueNoise { period: wavelength, octaves: 2, seed: rng.random() },
    ];
    let mut dx = Vec::with_capacity(n);
    let mut dy = Vec::with_capacity(n);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f32, y as f32);
            let s = |ws: &[(f32, f32, f32)]| ws.iter().map(|&(kx, ky, p)| (kx * fx + ky * fy + p).sin()).sum::<f32>();
            dx.push(s(&waves[..3]) + 2.0 * (noise[0].eval(fx, fy) - 0.5));
            dy.push(s(&waves[3..]) + 2.0 * (noise[1].eval(fx, fy) - 0.5));
        }
    }
    let max = dx
        .iter()
        .zip(&dy)
        .map(|(a, b)| (a * a + b * b).sqrt())
        .fold(0.0f32, f32::max);
    if max > 0.0 {
        let s = amplitude / max;
        for v in dx.iter_mut().chain(dy.iter_mut()) {
            *v *= s;
        }
    }
    (dx, dy)
}

/// Resample `img` through a smooth random displacement of at most
/// `amplitude` pixels.
pub fn fluctuation_warp(img: &GrayImage, amplitude: f32, wavelength: f32, seed: u64) -> GrayImage {
    if amplitude <= 0.0 {
        return img.clone();
    }
    let (w, h) = img.size();
    let (dx, dy) = displacement_field((w, h), amplitude, wavelength, seed);
    GrayImage::from_fn(w, h, |x, y| {
        let i = y * w + x;
        img.sample_bilinear(x as f32 + dx[i], y as f32 + dy[i])
    })
}

/// Degrade `frame` under `condition`; the stream is derived from
/// `(seed, frame_id, condition)`.
pub fn augment(frame: &StereoFrame, condition: Condition, frame_id: u64, seed: u64, cfg: &BubbleConfig) -> AugmentedSample {
    let stream = derive_seed(&[seed, frame_id, condition.index() as u64]);
    let field = sample_field(condition, frame.size(), stream, cfg);
    let mut s = render_bubbles(frame, &field);
    if cfg.warp_amplitude > 0.0 {
        let a = cfg.warp_amplitude;
        s.degraded.left = fluctuation_warp(&s.degraded.left, a, cfg.warp_wavelength, derive_seed(&[stream, 1]));
        s.degraded.right = fluctuation_warp(&s.degraded.right, a, cfg.warp_wavelength, derive_seed(&[stream, 2]));
        s.warped = true;
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_frame(v: f32) -> StereoFrame {
        StereoFrame::new(GrayImage::filled(40, 30, v), GrayImage::filled(40, 30, v)).unwrap()
    }

    fn single(opacity: f32) -> BubbleField {
        BubbleField {
            bubbles: vec![Bubble {
                center: (20.0, 15.0),
                radius: 6.0,
                opacity,
                highlight_offset: (0.0, 0.0),
                parallax: 0.0,
                softness: 1.0,
            }],
            ..BubbleField::empty(
                Condition::Bubbles {
                    size: SizeClass::Small,
                    density: DensityClass::Little,
                    position: PositionClass::Far,
                },
                0,
            )
        }
    }

    #[test]
    fn grid_has_clean_plus_eight() {
        let g = Condition::grid();
        assert_eq!(g.len(), 9);
        assert_eq!(g.iter().filter(|c| **c == Condition::Clean).count(), 1);
        for c in &g {
            assert_eq!(Condition::parse(&c.label()), Some(*c));
        }
    }

    #[test]
    fn clean_condition_has_no_bubbles() {
        let f = sample_field(Condition::Clean, (1024, 768), 5, &BubbleConfig::default());
        assert!(f.bubbles.is_empty());
    }

    #[test]
    fn opaque_bubble_center_is_highlight() {
        let s = render_bubbles(&gray_frame(0.2), &single(1.0));
        assert_eq!(s.degraded.left.get(20, 15), 1.0);
    }

    #[test]
    fn half_opacity_over_gray_100() {
        let s = render_bubbles(&gray_frame(100.0 / 255.0), &single(0.5));
        let v = s.degraded.left.get(20, 15) * 255.0;
        assert!((v - 177.5).abs() < 1e-3, "{v}");
        assert!((crate::image::to_u8(s.degraded.left.get(20, 15)) as i32 - 177).abs() <= 1);
    }

    #[test]
    fn empty_field_is_identity() {
        let f = gray_frame(0.4);
        let s = render_bubbles(&f, &BubbleField::empty(Condition::Clean, 1));
        assert_eq!(s.degraded, f);
        assert_eq!(s.bubble_mask_left.count() + s.bubble_mask_right.count(), 0);
    }

    #[test]
    fn warp_of_constant_is_constant_and_zero_amplitude_is_identity() {
        let c = GrayImage::filled(33, 21, 0.625);
        assert_eq!(fluctuation_warp(&c, 3.0, 16.0, 4), c);
        let t = GrayImage::from_fn(33, 21, |x, y| ((x * y) % 7) as f32 / 7.0);
        assert_eq!(fluctuation_warp(&t, 0.0, 16.0, 4), t);
    }
}
