use std::path::Path;

use uwstereo::dataset::*;
use uwstereo::disparity::DisparityMap;
use uwstereo::frame::StereoFrame;
use uwstereo::image::Mask;
use uwstereo::synth::Scene;

/// Minimal PFM reader written from the format description: header lines
/// "Pf", "W H", scale (negative = little endian), then rows bottom to top.
fn parse_pfm(bytes: &[u8]) -> (usize, usize, Vec<f32>) {
    let mut lines = 0;
    let mut pos = 0;
    while lines < 3 {
        if bytes[pos] == b'\n' {
            lines += 1;
        }
        pos += 1;
    }
    let header = std::str::from_utf8(&bytes[..pos]).unwrap();
    let mut it = header.split_whitespace();
    assert_eq!(it.next(), Some("Pf"));
    let w: usize = it.next().unwrap().parse().unwrap();
    let h: usize = it.next().unwrap().parse().unwrap();
    let scale: f32 = it.next().unwrap().parse().unwrap();
    assert!(scale < 0.0);
    let raw: Vec<f32> = bytes[pos..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    assert_eq!(raw.len(), w * h);
    let mut top_down = Vec::with_capacity(w * h);
    for row in raw.chunks(w).rev() {
        top_down.extend_from_slice(row);
    }
    (w, h, top_down)
}

#[test]
fn pfm_matches_an_independent_reader() {
    let mut d = DisparityMap::filled(7, 5, 0.0);
    for y in 0..5 {
        for x in 0..7 {
            d.set(x, y, x as f32 * 1.5 + y as f32 * 10.25);
        }
    }
    d.set(3, 2, f32::INFINITY);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.pfm");
    d.write_pfm(&path).unwrap();
    let (w, h, data) = parse_pfm(&std::fs::read(&path).unwrap());
    assert_eq!((w, h), (7, 5));
    assert_eq!(data, d.data());
    assert_eq!(DisparityMap::read_pfm(&path).unwrap(), d);
}

fn frame(i: u64) -> StereoFrame {
    let f = Scene::random(40 + 2 * i as usize, 30, 2.0, 8.0, i).render();
    let (w, h) = f.size();
    f.with_masks(Mask::from_fn(w, h, |x, _| x > 3), Mask::from_fn(w, h, |x, _| x + 3 < w)).unwrap()
}

fn write_ten(root: &Path) -> Manifest {
    let mut m = Manifest::default();
    for i in 0..10 {
        let name = format!("scene{i:02}");
        let mut e = write_frame(&root.join(&name), &frame(i), &FrameMeta { name: name.clone(), ..Default::default() }).unwrap();
        e.dir = name.into();
        m.entries.push(e);
    }
    m.save(&root.join(MANIFEST)).unwrap();
    m
}

#[test]
fn ten_frame_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_ten(dir.path());
    for source in [dir.path().to_path_buf(), dir.path().join(MANIFEST)] {
        let ds = load_dataset(&source).unwrap();
        assert_eq!(ds.len(), 10);
        assert!(ds.skipped.is_empty());
        for (i, f) in ds.frames.iter().enumerate() {
            let orig = frame(i as u64);
            assert_eq!(f.name, format!("scene{i:02}"));
            assert_eq!(f.frame.gt.as_ref().unwrap().size(), f.frame.left.size());
            assert_eq!(f.frame.gt, orig.gt);
            assert_eq!(f.frame.left, orig.left.quantized());
            assert!(!f.mask_defaulted);
            assert_eq!(f.frame.mask_left, orig.mask_left);
            assert_eq!(f.frame.mask_right, orig.mask_right);
        }
    }
}

#[test]
fn directory_scan_without_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_ten(dir.path());
    std::fs::remove_file(dir.path().join(MANIFEST)).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let names: Vec<_> = ds.frames.iter().map(|f| f.name.clone()).collect();
    assert_eq!(names, (0..10).map(|i| format!("scene{i:02}")).collect::<Vec<_>>());
    // A single frame directory loads on its own.
    assert_eq!(load_dataset(&dir.path().join("scene03")).unwrap().len(), 1);
}

#[test]
fn missing_mask_defaults_to_full() {
    let dir = tempfile::tempdir().unwrap();
    let mut f = frame(1);
    f.mask_left = None;
    f.mask_right = None;
    write_frame(dir.path(), &f, &FrameMeta { name: "nomask".into(), ..Default::default() }).unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    let got = &ds.frames[0];
    assert!(got.mask_defaulted);
    assert_eq!(got.frame.mask_left.as_ref().unwrap(), &Mask::full(42, 30));
}

#[test]
fn corrupt_pfm_skips_only_that_frame() {
    let dir = tempfile::tempdir().unwrap();
    write_ten(dir.path());
    std::fs::write(dir.path().join("scene04/disp0.pfm"), b"Pf\n42 30\n-1.0\n\x00\x01").unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.len(), 9);
    assert_eq!(ds.skipped.len(), 1);
    assert_eq!(ds.skipped[0].name, "scene04");
    assert!(!ds.skipped[0].reason.is_empty());
}

#[test]
fn empty_directory_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_dataset(dir.path()).unwrap();
    assert!(ds.is_empty() && ds.skipped.is_empty());
    assert!(load_dataset(&dir.path().join("missing")).is_err());
}

#[test]
fn masks_are_stored_as_0_and_255() {
    let dir = tempfile::tempdir().unwrap();
    let m = Mask::from_fn(9, 4, |x, _| x % 2 == 0);
    let path = dir.path().join("m.png");
    m.save_png(&path).unwrap();
    let img = image::open(&path).unwrap().to_luma8();
    assert!(img.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    assert_eq!(Mask::load(&path).unwrap(), m);
}
