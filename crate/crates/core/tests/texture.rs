use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uwstereo::image::GrayImage;
use uwstereo::texture::*;
use uwstereo_nn::Tensor;

const PERIOD: f32 = 8.0;
const AMP: f32 = 0.1;
const SIZE: usize = 64;

struct Trained {
    restore: TextureNet,
    detect: TextureNet,
    held: Vec<(GrayImage, GrayImage)>,
}

/// Nets trained once on stripes and shared by the tests below.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let pairs = stripe_pairs(40, SIZE, PERIOD, AMP, 1);
        let tc = TextureTraining::default();
        let mut restore = TextureNet::<f32>::new(TextureConfig::default(), Role::Restore, 4).unwrap();
        train_supervised(&mut restore, &pairs, &tc).unwrap();
        let mut detect = TextureNet::<f32>::new(TextureConfig::default(), Role::Detect, 3).unwrap();
        train_detector(&mut detect, &difference_pairs(&pairs), &tc).unwrap();
        Trained {
            restore,
            detect,
            held: stripe_pairs(8, SIZE, PERIOD, AMP, 2),
        }
    })
}

/// Energy of `img` at DFT bins within one bin of the stripe frequency,
/// evaluated directly from the DFT sum.
fn band_energy(img: &GrayImage) -> f64 {
    let (w, h) = img.size();
    let k0 = (w as f32 / PERIOD).round() as i64;
    let mut e = 0.0;
    for kx in [k0 - 1, k0, k0 + 1, -k0 - 1, -k0, -k0 + 1] {
        for ky in -1i64..=1 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for y in 0..h {
                for x in 0..w {
                    let ph = -std::f64::consts::TAU * (kx as f64 * x as f64 / w as f64 + ky as f64 * y as f64 / h as f64);
                    let v = img.get(x, y) as f64;
                    re += v * ph.cos();
                    im += v * ph.sin();
                }
            }
            e += re * re + im * im;
        }
    }
    e
}

fn diff(a: &GrayImage, b: &GrayImage) -> GrayImage {
    GrayImage::new(a.width(), a.height(), a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect()).unwrap()
}

#[test]
fn supervised_removal_cuts_stripe_band_energy() {
    let t = trained();
    let (mut before, mut after) = (0.0, 0.0);
    for (deg, clean) in &t.held {
        before += band_energy(&diff(deg, clean));
        after += band_energy(&diff(&restore(&t.restore, deg).unwrap(), clean));
    }
    assert!(after <= 0.2 * before, "band energy {before} -> {after}");
}

#[test]
fn trained_restore_leaves_clean_images_alone() {
    let t = trained();
    let floor: f64 = t.held.iter().map(|(d, c)| d.mse(c).unwrap()).sum::<f64>() / t.held.len() as f64;
    for (_, clean) in &t.held {
        let out = restore(&t.restore, clean).unwrap();
        assert!(out.mse(clean).unwrap() < floor, "{} vs floor {floor}", out.mse(clean).unwrap());
    }
}

fn pearson(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64 - ma, y as f64 - mb);
        sab += x * y;
        saa += x * x;
        sbb += y * y;
    }
    sab / (saa * sbb).sqrt()
}

#[test]
fn detector_tracks_the_stripes() {
    let t = trained();
    for (deg, clean) in &t.held {
        let out = t.detect.run_tiled(deg, 256, 16).unwrap();
        let truth = diff(deg, clean);
        let r = pearson(out.data(), truth.data());
        assert!(r > 0.8, "pearson {r}");
    }
    let pattern: f64 = t.held.iter().map(|(d, c)| diff(d, c).data().iter().map(|v| v.abs() as f64).sum::<f64>()).sum();
    let on_clean: f64 = t.held.iter().map(|(_, c)| t.detect.run_tiled(c, 256, 16).unwrap().data().iter().map(|v| v.abs() as f64).sum::<f64>()).sum();
    assert!(on_clean < 0.1 * pattern, "clean response {on_clean} vs pattern {pattern}");
}

fn randomize<T: uwstereo_nn::Real>(net: &mut TextureNet<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in net.network_mut().params_mut() {
        for v in p.data_mut() {
            *v = T::from_f64(rng.random_range(-0.5..0.5)).unwrap();
        }
    }
}

fn tiny() -> TextureConfig {
    TextureConfig { channels: 2, depth: 1 }
}

#[test]
fn unsupervised_gradients_match_finite_differences() {
    let mut r = TextureNet::<f64>::new(tiny(), Role::Restore, 1).unwrap();
    let mut d = TextureNet::<f64>::new(tiny(), Role::Detect, 2).unwrap();
    randomize(&mut r, 3);
    randomize(&mut d, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::<f64>::from_fn(&[1, 1, 8, 8], |_| rng.random_range(0.0..1.0));
    let lambda = 0.7;
    let u = unsupervised_loss(&x, &mut r, &mut d, lambda).unwrap();
    assert_eq!(u.grads.params.len(), r.network().params().len());

    let eval = |r: &mut TextureNet<f64>, d: &mut TextureNet<f64>| unsupervised_loss(&x, r, d, lambda).unwrap().value;
    let h = 1e-6;
    let (mut num, mut ana) = (Vec::new(), Vec::new());
    for pi in 0..r.network().params().len() {
        for k in 0..r.network().params()[pi].len() {
            let orig = r.network().params()[pi].data()[k];
            r.network_mut().params_mut()[pi].data_mut()[k] = orig + h;
            let up = eval(&mut r, &mut d);
            r.network_mut().params_mut()[pi].data_mut()[k] = orig - h;
            let down = eval(&mut r, &mut d);
            r.network_mut().params_mut()[pi].data_mut()[k] = orig;
            num.push((up - down) / (2.0 * h));
            ana.push(u.grads.params[pi].data()[k]);
        }
    }
    let dn: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    assert!(dn / norm < 1e-4, "relative error {}", dn / norm);

    // A detector weight moves the loss, yet nothing is stored for it.
    let base = eval(&mut r, &mut d);
    let last = d.network().params().len() - 1;
    d.network_mut().params_mut()[last].data_mut()[0] += 1e-3;
    assert!(eval(&mut r, &mut d) != base);
}

#[test]
fn unsupervised_steps_never_touch_the_detector() {
    let mut r = TextureNet::<f32>::new(tiny(), Role::Restore, 1).unwrap();
    let mut d = TextureNet::<f32>::new(tiny(), Role::Detect, 2).unwrap();
    let pairs = stripe_pairs(4, 32, PERIOD, AMP, 9);
    train_detector(&mut d, &difference_pairs(&pairs), &TextureTraining { steps: 20, crop: 32, ..Default::default() }).unwrap();
    let before_d: Vec<Vec<u32>> = d.network().params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect();
    let before_r = r.network().params().to_vec();
    let images: Vec<GrayImage> = pairs.into_iter().map(|p| p.0).collect();
    let cfg = UnsupervisedTraining {
        lambda: 1.0,
        base: TextureTraining {
            steps: 3,
            crop: 32,
            ..Default::default()
        },
    };
    train_unsupervised(&mut r, &mut d, &images, &cfg).unwrap();
    let after_d: Vec<Vec<u32>> = d.network().params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect();
    assert_eq!(before_d, after_d);
    assert_ne!(before_r, r.network().params());
}

#[test]
fn lambda_sweep_lowers_detector_response() {
    let cfg = TextureConfig { channels: 8, depth: 2 };
    let pairs = stripe_pairs(12, 32, PERIOD, AMP, 11);
    let mut d = TextureNet::<f32>::new(cfg.clone(), Role::Detect, 3).unwrap();
    let tc = TextureTraining {
        steps: 150,
        crop: 32,
        ..Default::default()
    };
    train_detector(&mut d, &difference_pairs(&pairs), &tc).unwrap();
    let batch: Vec<GrayImage> = pairs.iter().take(6).map(|p| p.0.clone()).collect();
    let mut last = f64::INFINITY;
    for lambda in [0.0, 0.5, 2.0, 8.0] {
        let mut r = TextureNet::<f32>::new(cfg.clone(), Role::Restore, 4).unwrap();
        let uc = UnsupervisedTraining {
            lambda,
            base: TextureTraining { steps: 120, ..tc.clone() },
        };
        train_unsupervised(&mut r, &mut d, &batch, &uc).unwrap();
        let resp = detector_response(&d, Some(&r), &batch).unwrap();
        assert!(resp <= last, "lambda {lambda}: response {resp} after {last}");
        last = resp;
    }
}

#[test]
fn identity_task_stays_identity() {
    let imgs: Vec<(GrayImage, GrayImage)> = (0..6).map(|i| {
        let t = random_texture(32, 32, i);
        (t.clone(), t)
    }).collect();
    let mut r = TextureNet::<f32>::new(TextureConfig { channels: 4, depth: 1 }, Role::Restore, 1).unwrap();
    let held = random_texture(40, 36, 99);
    let init = restore(&r, &held).unwrap().mse(&held).unwrap();
    train_supervised(&mut r, &imgs, &TextureTraining { steps: 20, crop: 32, ..Default::default() }).unwrap();
    let after = restore(&r, &held).unwrap().mse(&held).unwrap();
    assert_eq!(init, 0.0);
    assert!(after <= 1e-8, "{after}");

    // Zero target for a detector keeps it at the zero map.
    let mut d = TextureNet::<f32>::new(TextureConfig { channels: 4, depth: 1 }, Role::Detect, 1).unwrap();
    train_detector(&mut d, &difference_pairs(&imgs), &TextureTraining { steps: 20, crop: 32, ..Default::default() }).unwrap();
    let out = d.run_tiled(&held, 256, 16).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1e-4));
}

#[test]
fn two_stage_supervised_transfer() {
    let cfg = TextureConfig { channels: 8, depth: 2 };
    let tc = TextureTraining { steps: 80, crop: 32, ..Default::default() };
    let mut r = TextureNet::<f32>::new(cfg, Role::Restore, 5).unwrap();
    train_supervised(&mut r, &stripe_pairs(10, 32, PERIOD, AMP, 21), &tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    r.save(&path).unwrap();
    let mut stage2 = TextureNet::load(&path).unwrap();
    assert_eq!(stage2.role(), Role::Restore);
    let domain = pattern_pairs(10, 32, 0.3, 22);
    let held = pattern_pairs(4, 32, 0.3, 23);
    let err = |n: &TextureNet| held.iter().map(|(d, c)| restore(n, d).unwrap().mse(c).unwrap()).sum::<f64>();
    let before = err(&stage2);
    train_supervised(&mut stage2, &domain, &tc).unwrap();
    assert!(err(&stage2) < before);
    let shapes = |n: &TextureNet| n.network().params().iter().map(|p| p.shape().to_vec()).collect::<Vec<_>>();
    assert_eq!(shapes(&stage2), shapes(&r));
}

#[test]
fn non_dyadic_sizes_and_roles() {
    let r = TextureNet::<f32>::new(tiny(), Role::Restore, 1).unwrap();
    for (w, h) in [(16, 16), (37, 23), (300, 17)] {
        let img = random_texture(w, h, 1);
        let out = restore(&r, &img).unwrap();
        assert_eq!(out.size(), img.size());
        assert!(out.data().iter().zip(img.data()).all(|(a, b)| (a - b).abs() < 1e-6));
    }
    let mut d = TextureNet::<f32>::new(tiny(), Role::Detect, 1).unwrap();
    let pairs = stripe_pairs(2, 16, PERIOD, AMP, 1);
    assert!(train_supervised(&mut d, &pairs, &TextureTraining::default()).is_err());
    let mut r2 = r.clone();
    assert!(train_detector(&mut r2, &pairs, &TextureTraining::default()).is_err());
    let bad = vec![(GrayImage::filled(16, 16, 0.0), GrayImage::filled(17, 16, 0.0))];
    assert!(train_supervised(&mut r2, &bad, &TextureTraining::default()).is_err());
}
