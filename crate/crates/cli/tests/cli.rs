use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use uwstereo::bubble::Condition;
use uwstereo::dataset::{write_frame, FrameMeta};
use uwstereo::frame::StereoFrame;
use uwstereo::image::Mask;
use uwstereo::rectify::CameraModel;
use uwstereo::synth::Scene;

/// Small networks and short runs so every command finishes in seconds.
const FAST: &[&str] = &[
    "--set",
    "matcher.scales=1",
    "--set",
    "matcher.channels=4",
    "--set",
    "matcher.features=8",
    "--set",
    "matcher_training.steps=3",
    "--set",
    "matcher_training.crop=[64,32]",
    "--set",
    "matcher_training.samples=32",
    "--set",
    "stereo.d_max=15",
];

fn uwstereo(args: &[&str]) -> Output {
    uwstereo_env(args, &[])
}

fn uwstereo_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_uwstereo"));
    cmd.args(args).env_remove("UWSTEREO_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn with_fast<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut v = args.to_vec();
    v.extend_from_slice(FAST);
    v
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    o
}

/// Writes `n` small synthetic frames and returns the dataset directory.
fn dataset(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("data");
    ok(uwstereo(&["synth", "--out", p(&out), "--count", &n.to_string(), "--width", "96", "--height", "64", "--d-max", "12"]));
    out
}

fn trained_matcher(dir: &Path, data: &Path, name: &str) -> PathBuf {
    let ckpt = dir.join(name);
    ok(uwstereo(&with_fast(&["train-stereo", "--input", p(data), "--out", p(&ckpt)])));
    ckpt
}

/// Minimal PFM reader written against the format description, independent of
/// the crate's own decoder.
fn parse_pfm(bytes: &[u8]) -> (usize, usize, Vec<f32>) {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8(bytes[start..pos].to_vec()).unwrap());
    }
    pos += 1;
    assert_eq!(fields[0], "Pf");
    let (w, h): (usize, usize) = (fields[1].parse().unwrap(), fields[2].parse().unwrap());
    let scale: f32 = fields[3].parse().unwrap();
    let body = &bytes[pos..];
    assert_eq!(body.len(), w * h * 4);
    let mut data = vec![0.0; w * h];
    for row in 0..h {
        for x in 0..w {
            let i = 4 * (row * w + x);
            let b = [body[i], body[i + 1], body[i + 2], body[i + 3]];
            let v = if scale < 0.0 { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
            // Rows are stored bottom to top.
            data[(h - 1 - row) * w + x] = v;
        }
    }
    (w, h, data)
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&uwstereo(&["--help"])), 0);
    assert_eq!(code(&uwstereo(&["no-such-command"])), 1);
    assert_eq!(code(&uwstereo(&["config", "--set", "stereo.d_max"])), 1);
    let o = uwstereo(&["config", "--set", "stereo.d_max=5000"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("stereo.d_max"), "{}", stderr(&o));
    let o = uwstereo(&["config", "--set", "paths.matcher=/does/not/exist.ckpt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("paths.matcher"));
    let o = uwstereo(&["config", "--set", "stero.d_max=3"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"seed": 9, "stereo": {"p2": 0.75}}"#).unwrap();
    let o = ok(uwstereo(&["--config", p(&cfg), "--set", "stereo.d_max=64", "config"]));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["seed"], 9);
    assert_eq!(v["stereo"]["p2"], 0.75);
    assert_eq!(v["stereo"]["d_max"], 64);
    assert_eq!(v["stereo"]["p1"], 0.03);

    fs::write(&cfg, "{ not json").unwrap();
    assert_eq!(code(&uwstereo(&["--config", p(&cfg), "config"])), 1);
    assert_eq!(code(&uwstereo(&["--config", p(&dir.path().join("missing.json")), "config"])), 2);
}

#[test]
fn thread_override_is_validated() {
    assert_eq!(code(&uwstereo_env(&["config"], &[("UWSTEREO_THREADS", "0")])), 1);
    assert_eq!(code(&uwstereo_env(&["config"], &[("UWSTEREO_THREADS", "two")])), 1);
    assert_eq!(code(&uwstereo_env(&["config"], &[("UWSTEREO_THREADS", "1")])), 0);
}

#[test]
fn train_match_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 2);
    let a = trained_matcher(dir.path(), &data, "a.ckpt");
    let b = trained_matcher(dir.path(), &data, "b.ckpt");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let curve = fs::read_to_string(dir.path().join("a.ckpt.loss.csv")).unwrap();
    let lines: Vec<&str> = curve.lines().collect();
    assert_eq!(lines[0], "step,loss");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').nth(1).unwrap().parse::<f32>().unwrap().is_finite()));

    // A single frame directory gives `out/disp0.pfm`.
    let frame = data.join("scene0000");
    let out1 = dir.path().join("m1");
    let out2 = dir.path().join("m2");
    for out in [&out1, &out2] {
        ok(uwstereo(&with_fast(&["match", "--input", p(&frame), "--out", p(out), "--matcher", p(&a)])));
    }
    let bytes = fs::read(out1.join("disp0.pfm")).unwrap();
    assert_eq!(bytes, fs::read(out2.join("disp0.pfm")).unwrap());
    let (w, h, d) = parse_pfm(&bytes);
    assert_eq!((w, h), (96, 64));
    assert!(d.iter().any(|v| v.is_finite()));
    assert!(d.iter().filter(|v| v.is_finite()).all(|&v| (0.0..=16.0).contains(&v)));

    // A dataset gives one directory per frame.
    let all = dir.path().join("all");
    ok(uwstereo(&with_fast(&["match", "--input", p(&data), "--out", p(&all), "--matcher", p(&a)])));
    assert!(all.join("scene0000/disp0.pfm").is_file() && all.join("scene0001/disp0.pfm").is_file());

    // The matcher can also come from the config.
    let out3 = dir.path().join("m3");
    let set = format!("paths.matcher={}", p(&a));
    ok(uwstereo(&with_fast(&["match", "--input", p(&frame), "--out", p(&out3), "--set", &set])));
    assert_eq!(bytes, fs::read(out3.join("disp0.pfm")).unwrap());

    // Transfer training continues from a checkpoint with the same graph.
    let t = dir.path().join("t.ckpt");
    ok(uwstereo(&with_fast(&["train-stereo", "--input", p(&data), "--out", p(&t), "--init", p(&a)])));
    assert_ne!(fs::read(&t).unwrap(), fs::read(&a).unwrap());
}

#[test]
fn eval_single_cell_and_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 1);
    let m = trained_matcher(dir.path(), &data, "m.ckpt");

    let out = dir.path().join("one");
    let method = format!("m={}", p(&m));
    ok(uwstereo(&with_fast(&["eval", "--input", p(&data), "--out", p(&out), "--method", &method])));
    let rmse = fs::read_to_string(out.join("rmse.csv")).unwrap();
    let rows: Vec<&str> = rmse.lines().collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], "condition,m");
    assert_eq!(rows[1].split(',').count(), 2);

    let grid = dir.path().join("grid");
    let methods: Vec<String> = ["a", "b", "c"].iter().map(|n| format!("{n}={}", p(&m))).collect();
    let mut args = vec!["eval", "--grid", "--input", p(&data), "--out", p(&grid)];
    for mth in &methods {
        args.extend(["--method", mth.as_str()]);
    }
    ok(uwstereo(&with_fast(&args)));
    let table = fs::read_to_string(grid.join("bad_pixel.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0], "condition,a,b,c");
    for row in &rows[1..] {
        let cells: Vec<&str> = row.split(',').collect();
        assert_eq!(cells.len(), 4);
        assert!(Condition::parse(cells[0]).is_some());
        assert!(cells[1..].iter().all(|c| c.parse::<f64>().is_ok()));
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(grid.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 27);

    // Duplicate method names and malformed specs are usage errors.
    let dup = ["eval", "--input", p(&data), "--out", p(&grid), "--method", &method, "--method", &method];
    assert_eq!(code(&uwstereo(&dup)), 1);
    assert_eq!(code(&uwstereo(&["eval", "--input", p(&data), "--out", p(&grid), "--method", "nameonly"])), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let data = dataset(dir.path(), 1);
    let m = trained_matcher(dir.path(), &data, "m.ckpt");
    let method = format!("m={}", p(&m));
    let o = uwstereo(&["eval", "--input", p(&empty), "--out", p(&dir.path().join("o")), "--method", &method]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // Frames without ground truth cannot be scored.
    let mut no_gt = Scene::random(64, 48, 2.0, 10.0, 1).render();
    no_gt.gt = None;
    let nogt = dir.path().join("nogt");
    write_frame(&nogt, &no_gt, &FrameMeta::default()).unwrap();
    let o = uwstereo(&with_fast(&["eval", "--input", p(&nogt), "--out", p(&dir.path().join("o2")), "--method", &method]));
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    // Synthetic scenes carry no target masks.
    let o = uwstereo(&["train-seg", "--input", p(&data), "--out", p(&dir.path().join("s.ckpt"))]);
    assert_eq!(code(&o), 2);
    // A segmenter checkpoint is not a matcher.
    let o = uwstereo(&["match", "--input", p(&data), "--out", p(&dir.path().join("x")), "--matcher", p(&data.join("manifest.json"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn augment_writes_nine_conditions_per_frame() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path(), 2);
    let out = dir.path().join("aug");
    ok(uwstereo(&["augment", "--input", p(&data), "--out", p(&out)]));
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let entries = manifest["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 18);
    for e in entries {
        let d = out.join(e["dir"].as_str().unwrap());
        for f in ["im0.png", "im1.png", "disp0.pfm", "clean0.png", "bubble0.png"] {
            assert!(d.join(f).is_file(), "{} lacks {f}", d.display());
        }
    }
    // The same seed reproduces the same files.
    let again = dir.path().join("aug2");
    ok(uwstereo(&["augment", "--input", p(&data), "--out", p(&again)]));
    let name = entries[5]["dir"].as_str().unwrap();
    assert_eq!(fs::read(out.join(name).join("im1.png")).unwrap(), fs::read(again.join(name).join("im1.png")).unwrap());

    // A restricted grid from the config.
    let few = dir.path().join("few");
    ok(uwstereo(&["augment", "--input", p(&data), "--out", p(&few), "--set", r#"conditions=["clean","large-much-near"]"#]));
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(few.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["entries"].as_array().unwrap().len(), 4);
}

#[test]
fn segmenter_training_on_masked_frames() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("masked");
    for i in 0..2 {
        let f = Scene::random(32, 32, 2.0, 8.0, i).render();
        let m = Mask::from_fn(32, 32, |x, y| (x as i32 - 16).pow(2) + (y as i32 - 16).pow(2) < 100);
        let f: StereoFrame = f.with_masks(m.clone(), m).unwrap();
        write_frame(&data.join(format!("f{i}")), &f, &FrameMeta::default()).unwrap();
    }
    let ckpt = dir.path().join("seg.ckpt");
    let args = [
        "train-seg",
        "--input",
        p(&data),
        "--out",
        p(&ckpt),
        "--set",
        "segmenter.levels=2",
        "--set",
        "segmenter.base_channels=4",
        "--set",
        "segmenter_training.epochs=2",
        "--set",
        "segmenter_training.augment.factor=2",
    ];
    ok(uwstereo(&args));
    assert!(ckpt.is_file());
    let curve = fs::read_to_string(dir.path().join("seg.ckpt.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 3);
    assert!(curve.starts_with("epoch,loss"));
}

#[test]
fn texture_training_and_restore() {
    let dir = tempfile::tempdir().unwrap();
    let r = dir.path().join("r.ckpt");
    let d = dir.path().join("d.ckpt");
    let steps = ["--set", "texture.training.steps=2", "--set", "texture.net.channels=4", "--set", "texture.net.depth=1"];
    let mut args = vec!["train-texture", "--synthetic", "4", "--restore-out", p(&r), "--detect-out", p(&d)];
    args.extend(steps);
    ok(uwstereo(&args));
    assert!(r.is_file() && d.is_file());
    assert_eq!(fs::read_to_string(dir.path().join("r.ckpt.loss.csv")).unwrap().lines().count(), 3);

    let img = dir.path().join("in.png");
    Scene::plane(70, 50, 4.0, 1).render().left.save_png(&img).unwrap();
    let out = dir.path().join("out.png");
    ok(uwstereo(&["restore", "--input", p(&img), "--out", p(&out), "--restore", p(&r)]));
    let restored = uwstereo::image::GrayImage::load(&out).unwrap();
    assert_eq!(restored.size(), (70, 50));
    // Detector checkpoints are refused.
    assert_eq!(code(&uwstereo(&["restore", "--input", p(&img), "--out", p(&out), "--restore", p(&d)])), 1);
}

#[test]
fn reconstruct_needs_calibration_and_writes_ply() {
    let dir = tempfile::tempdir().unwrap();
    let disp = dir.path().join("d.pfm");
    uwstereo::disparity::DisparityMap::filled(40, 30, 50.0).write_pfm(&disp).unwrap();
    let ply = dir.path().join("c.ply");
    let o = uwstereo(&["reconstruct", "--disparity", p(&disp), "--out", p(&ply)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("paths.calibration"));

    let calib = dir.path().join("cam.json");
    fs::write(&calib, serde_json::to_string(&CameraModel::pinhole(1000.0, (40, 30), 0.05)).unwrap()).unwrap();
    let set = format!("paths.calibration={}", p(&calib));
    let header = |args: &[&str]| {
        ok(uwstereo(args));
        let bytes = fs::read(&ply).unwrap();
        String::from_utf8_lossy(&bytes[..200.min(bytes.len())]).into_owned()
    };
    let text = header(&["reconstruct", "--disparity", p(&disp), "--out", p(&ply), "--set", &set, "--keep-outliers"]);
    assert!(text.starts_with("ply\nformat binary_little_endian 1.0"));
    assert!(text.contains("element vertex 1200\n"));
    assert!(text.contains("property float nx"));
    // Outlier removal only ever drops points.
    let text = header(&["reconstruct", "--disparity", p(&disp), "--out", p(&ply), "--set", &set]);
    let n: usize = text.split("element vertex ").nth(1).unwrap().lines().next().unwrap().parse().unwrap();
    assert!(n > 1000 && n <= 1200, "{n}");

    let o = uwstereo(&["reconstruct", "--disparity", p(&dir.path().join("none.pfm")), "--out", p(&ply), "--set", &set]);
    assert_eq!(code(&o), 2);
}
