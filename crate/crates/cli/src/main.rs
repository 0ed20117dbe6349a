use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use uwstereo::bubble::Condition;
use uwstereo::config::PipelineConfig;
use uwstereo::dataset::{build_transfer_dataset, load_dataset, write_frame, Dataset, DatasetFrame, FrameMeta, Manifest, MANIFEST};
use uwstereo::disparity::DisparityMap;
use uwstereo::frame::StereoFrame;
use uwstereo::image::{GrayImage, Mask};
use uwstereo::matcher::{train_matcher, MatcherNet};
use uwstereo::pipeline::match_frame;
use uwstereo::recon3d::{estimate_normals, remove_outliers, triangulate, write_ply};
use uwstereo::rectify::rectify_pair;
use uwstereo::report::{run_grid, Metric};
use uwstereo::segment::{train_segmenter, SegNet};
use uwstereo::synth::Scene;
use uwstereo::texture::{
    difference_pairs, pattern_pairs, train_detector, train_supervised, train_unsupervised, Role, TextureNet, UnsupervisedTraining,
};
use uwstereo::Error;
use uwstereo_nn::NnError;

const THREADS_VAR: &str = "UWSTEREO_THREADS";
/// Neighbours for normal estimation before PLY export.
const NORMAL_K: usize = 16;
/// Stream tags under the root seed, beyond the per-module ones.
const AUGMENT_STREAM: u64 = 5;
const SYNTH_STREAM: u64 = 6;

#[derive(Parser)]
#[command(name = "uwstereo", version, about = "Underwater active-stereo reconstruction")]
struct Cli {
    /// JSON configuration file; defaults apply to anything it omits.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set stereo.d_max=128`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    /// More log output (-v info, -vv debug).
    #[arg(long, short, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render random layered scenes with ground truth into a dataset.
    Synth(SynthArgs),
    /// Degrade every frame under the configured bubble conditions.
    Augment(AugmentArgs),
    /// Train the target segmenter on frames that carry masks.
    TrainSeg(TrainArgs),
    /// Train the patch matcher, optionally continuing from a checkpoint.
    TrainStereo(TrainStereoArgs),
    /// Train the restoration and detector networks.
    TrainTexture(TrainTextureArgs),
    /// Compute disparity maps (PFM) for a frame or dataset.
    Match(MatchArgs),
    /// Remove the projected pattern from an image.
    Restore(RestoreArgs),
    /// Triangulate a disparity map into a PLY point cloud.
    Reconstruct(ReconstructArgs),
    /// Score matchers over a dataset and write a report.
    Eval(EvalArgs),
    /// Print the effective configuration.
    Config,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 320)]
    width: usize,
    #[arg(long, default_value_t = 192)]
    height: usize,
    #[arg(long, default_value_t = 2.0)]
    d_min: f32,
    #[arg(long, default_value_t = 40.0)]
    d_max: f32,
}

#[derive(Args)]
struct AugmentArgs {
    /// Dataset: manifest, frame directory or directory of frames.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Loss curve CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainStereoArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Continue from this checkpoint (transfer training).
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTextureArgs {
    /// Frames with clean views (`clean0.png`, `clean1.png`).
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Train on this many synthetic pattern/no-pattern pairs instead.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Images for a further unsupervised stage of the restoration net.
    #[arg(long)]
    unsupervised: Option<PathBuf>,
    #[arg(long)]
    restore_out: PathBuf,
    #[arg(long)]
    detect_out: PathBuf,
    /// Loss curve CSV; defaults to the restoration checkpoint with `.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
}

#[derive(Args)]
struct MatchArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory; `disp0.pfm` per frame.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    matcher: Option<PathBuf>,
    #[arg(long)]
    segmenter: Option<PathBuf>,
    /// Depth (m) whose refraction coefficients rectify the pair; defaults
    /// to the middle of the calibrated range.
    #[arg(long)]
    depth_hint: Option<f64>,
}

#[derive(Args)]
struct RestoreArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    restore: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    tile: usize,
    #[arg(long, default_value_t = 32)]
    overlap: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    disparity: PathBuf,
    /// Left image used to color the points.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Skip statistical outlier removal.
    #[arg(long)]
    keep_outliers: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// `NAME=CHECKPOINT`; repeatable. Defaults to `paths.matcher`.
    #[arg(long = "method", value_name = "NAME=CKPT")]
    methods: Vec<String>,
    /// Degrade every frame under each configured condition before scoring.
    #[arg(long)]
    grid: bool,
}

/// Command-line misuse that clap cannot catch.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config { .. } | Error::Invalid(_) | Error::Json(_) => 1,
                Error::Io { .. } | Error::Image { .. } | Error::Pfm(_) | Error::Size(_) | Error::Data(_) => 2,
                Error::Numerical(_) => 3,
                Error::Nn(n) => match n {
                    NnError::Hyper(_) => 1,
                    NnError::Checkpoint(_) | NnError::Io(_) | NnError::Json(_) => 2,
                    _ => 3,
                },
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = ["warn", "info", "debug"][usize::from(cli.verbose.min(2))];
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var(THREADS_VAR) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_VAR} must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn parse_overrides(raw: &[String]) -> anyhow::Result<Vec<(String, String)>> {
    raw.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.to_string()))
                .ok_or_else(|| usage(format!("--set expects PATH=VALUE, got {s:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    let overrides = parse_overrides(&cli.overrides)?;
    let cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path, &overrides)?,
        None => PipelineConfig::with_overrides(&overrides)?,
    };
    log::info!("config hash {}", cfg.hash());
    match cli.command {
        Command::Synth(a) => synth(&cfg, a),
        Command::Augment(a) => augment(&cfg, a),
        Command::TrainSeg(a) => train_seg(&cfg, a),
        Command::TrainStereo(a) => train_stereo(&cfg, a),
        Command::TrainTexture(a) => train_texture(&cfg, a),
        Command::Match(a) => run_match(&cfg, a),
        Command::Restore(a) => run_restore(&cfg, a),
        Command::Reconstruct(a) => reconstruct(&cfg, a),
        Command::Eval(a) => eval(&cfg, a),
        Command::Config => {
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

/// `flag`, else the config path, else a usage error naming both.
fn pick(flag: Option<PathBuf>, config: &Option<PathBuf>, field: &str) -> anyhow::Result<PathBuf> {
    flag.or_else(|| config.clone())
        .ok_or_else(|| usage(format!("no input: pass the flag or set {field}")))
}

fn load(path: &Path) -> anyhow::Result<Dataset> {
    let ds = load_dataset(path)?;
    for s in &ds.skipped {
        log::warn!("skipped {}: {}", s.name, s.reason);
    }
    if ds.is_empty() {
        if ds.skipped.is_empty() {
            log::warn!("{}: no frames found", path.display());
        }
        return Err(Error::Data(format!("{}: no usable frames", path.display())).into());
    }
    Ok(ds)
}

fn write_losses(path: &Path, label: &str, losses: &[f32]) -> anyhow::Result<()> {
    let mut text = format!("{label},loss\n");
    for (i, l) in losses.iter().enumerate() {
        text.push_str(&format!("{},{l}\n", i + 1));
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn loss_path(ckpt: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".loss.csv");
        PathBuf::from(s)
    })
}

fn synth(cfg: &PipelineConfig, a: SynthArgs) -> anyhow::Result<()> {
    if a.count == 0 || a.width == 0 || a.height == 0 || !(a.d_max > a.d_min) {
        return Err(usage("synth needs a positive count and size and d_max > d_min"));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let seed = cfg.stream(SYNTH_STREAM);
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count {
        let name = format!("scene{i:04}");
        let frame = Scene::random(a.width, a.height, a.d_min, a.d_max, seed.wrapping_add(i as u64)).render();
        let meta = FrameMeta {
            name: name.clone(),
            frame_id: Some(i as u64),
            seed: Some(seed),
            ..Default::default()
        };
        let mut e = write_frame(&a.out.join(&name), &frame, &meta)?;
        e.dir = PathBuf::from(&name);
        entries.push(e);
    }
    Manifest { version: 1, entries }.save(&a.out.join(MANIFEST))?;
    println!("wrote {} frames to {}", a.count, a.out.display());
    Ok(())
}

fn augment(cfg: &PipelineConfig, a: AugmentArgs) -> anyhow::Result<()> {
    let input = pick(a.input, &cfg.paths.dataset, "paths.dataset")?;
    let ds = load(&input)?;
    let base: Vec<(String, StereoFrame)> = ds.frames.iter().map(DatasetFrame::named).collect();
    let conditions = cfg.condition_grid()?;
    let m = build_transfer_dataset(&base, &conditions, cfg.stream(AUGMENT_STREAM), &cfg.bubbles, &a.out)?;
    if m.entries.is_empty() {
        return Err(Error::Data("no frame has ground truth to augment".into()).into());
    }
    println!(
        "wrote {} samples ({} frames x {} conditions) to {}",
        m.entries.len(),
        m.entries.len() / conditions.len(),
        conditions.len(),
        a.out.display()
    );
    Ok(())
}

fn train_seg(cfg: &PipelineConfig, a: TrainArgs) -> anyhow::Result<()> {
    let input = pick(a.input, &cfg.paths.dataset, "paths.dataset")?;
    let ds = load(&input)?;
    let mut samples: Vec<(GrayImage, Mask)> = Vec::new();
    for f in &ds.frames {
        if f.mask_defaulted {
            log::warn!("{}: no target mask, not used for segmenter training", f.name);
            continue;
        }
        let (ml, mr) = f.frame.masks_or_full();
        samples.push((f.frame.left.clone(), ml));
        samples.push((f.frame.right.clone(), mr));
    }
    if samples.is_empty() {
        return Err(Error::Data("no frame carries a target mask".into()).into());
    }
    let mut net = SegNet::new(cfg.segmenter.clone(), cfg.segmenter_training.seed)?;
    let losses = train_segmenter(&mut net, &samples, &cfg.segmenter_training)?;
    net.save(&a.out)?;
    let csv = loss_path(&a.out, a.loss_csv);
    write_losses(&csv, "epoch", &losses)?;
    println!("segmenter: {} samples, final loss {:.4}; wrote {}", samples.len(), losses.last().copied().unwrap_or(f32::NAN), a.out.display());
    Ok(())
}

fn train_stereo(cfg: &PipelineConfig, a: TrainStereoArgs) -> anyhow::Result<()> {
    let input = pick(a.train.input, &cfg.paths.dataset, "paths.dataset")?;
    let ds = load(&input)?;
    let frames: Vec<StereoFrame> = ds.frames.into_iter().map(|f| f.frame).collect();
    let mut net = match &a.init {
        Some(p) => MatcherNet::load(p)?,
        None => MatcherNet::new(cfg.matcher.clone(), cfg.matcher_training.seed)?,
    };
    let log = train_matcher(&mut net, &frames, &cfg.matcher_training)?;
    net.save(&a.train.out)?;
    let csv = loss_path(&a.train.out, a.train.loss_csv);
    write_losses(&csv, "step", &log.losses)?;
    println!(
        "matcher: {} steps, final loss {:.4}; wrote {}",
        log.losses.len(),
        log.losses.last().copied().unwrap_or(f32::NAN),
        a.train.out.display()
    );
    Ok(())
}

fn train_texture(cfg: &PipelineConfig, a: TrainTextureArgs) -> anyhow::Result<()> {
    let tc = &cfg.texture.training;
    let pairs: Vec<(GrayImage, GrayImage)> = match (a.synthetic, a.input) {
        (Some(n), _) => pattern_pairs(n, tc.crop.max(64), 0.6, cfg.stream(SYNTH_STREAM)),
        (None, input) => {
            let input = pick(input, &cfg.paths.dataset, "paths.dataset")?;
            let ds = load(&input)?;
            let mut pairs = Vec::new();
            for f in ds.frames {
                match f.clean {
                    Some((cl, cr)) => {
                        pairs.push((f.frame.left, cl));
                        pairs.push((f.frame.right, cr));
                    }
                    None => log::warn!("{}: no clean views, not used", f.name),
                }
            }
            pairs
        }
    };
    if pairs.is_empty() {
        return Err(Error::Data("no degraded/clean pairs to train on".into()).into());
    }
    let mut restore = TextureNet::<f32>::new(cfg.texture.net.clone(), Role::Restore, tc.seed)?;
    let mut losses = train_supervised(&mut restore, &pairs, tc)?;
    let mut detect = TextureNet::<f32>::new(cfg.texture.net.clone(), Role::Detect, tc.seed.wrapping_add(1))?;
    let det_losses = train_detector(&mut detect, &difference_pairs(&pairs), tc)?;
    if let Some(path) = &a.unsupervised {
        let ds = load(path)?;
        let images: Vec<GrayImage> = ds.frames.into_iter().flat_map(|f| [f.frame.left, f.frame.right]).collect();
        let uc = UnsupervisedTraining {
            lambda: cfg.texture.lambda,
            base: tc.clone(),
        };
        losses.extend(train_unsupervised(&mut restore, &mut detect, &images, &uc)?);
    }
    restore.save(&a.restore_out)?;
    detect.save(&a.detect_out)?;
    write_losses(&loss_path(&a.restore_out, a.loss_csv), "step", &losses)?;
    write_losses(&loss_path(&a.detect_out, None), "step", &det_losses)?;
    println!(
        "texture: {} pairs; wrote {} and {}",
        pairs.len(),
        a.restore_out.display(),
        a.detect_out.display()
    );
    Ok(())
}

fn run_match(cfg: &PipelineConfig, a: MatchArgs) -> anyhow::Result<()> {
    let input = pick(a.input, &cfg.paths.dataset, "paths.dataset")?;
    let ds = load(&input)?;
    let matcher_path = pick(a.matcher, &cfg.paths.matcher, "paths.matcher")?;
    let net = MatcherNet::load(&matcher_path)?;
    let seg = match a.segmenter.or_else(|| cfg.paths.segmenter.clone()) {
        Some(p) => Some(SegNet::load(&p)?),
        None => None,
    };
    let camera = cfg.camera()?;
    let single = ds.frames.len() == 1;
    let mut failed = 0;
    for f in &ds.frames {
        let dir = if single { a.out.clone() } else { a.out.join(&f.name) };
        match match_one(cfg, &net, seg.as_ref(), camera.as_ref(), a.depth_hint, f, &dir) {
            Ok(()) => println!("{}: wrote {}", f.name, dir.join("disp0.pfm").display()),
            Err(e) => {
                if single {
                    return Err(e);
                }
                log::warn!("{}: {e:#}", f.name);
                failed += 1;
            }
        }
    }
    if failed == ds.frames.len() {
        return Err(Error::Data("every frame failed".into()).into());
    }
    Ok(())
}

fn match_one(
    cfg: &PipelineConfig,
    net: &MatcherNet,
    seg: Option<&SegNet>,
    camera: Option<&uwstereo::rectify::CameraModel>,
    depth_hint: Option<f64>,
    f: &DatasetFrame,
    dir: &Path,
) -> anyhow::Result<()> {
    let mut frame = f.frame.clone();
    if let Some(cam) = camera {
        let (lo, hi) = cam.depth_range();
        let (rectified, meta) = rectify_pair(cam, &frame.left, &frame.right, depth_hint.unwrap_or(0.5 * (lo + hi)))?;
        log::info!("{}: rectified, valid region {:?}", f.name, meta.valid);
        frame = rectified;
    }
    let masks = match seg {
        Some(seg) => {
            let d = cfg.segmenter.dilation;
            Some((seg.segment(&frame.left)?.search_mask(d), seg.segment(&frame.right)?.search_mask(d)))
        }
        None if camera.is_none() => None,
        None => Some((Mask::full(frame.width(), frame.height()), Mask::full(frame.width(), frame.height()))),
    };
    let out = match_frame(net, &frame, masks.as_ref().map(|(l, r)| (l, r)), &cfg.stereo)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    out.disparity.write_pfm(&dir.join("disp0.pfm"))?;
    log::info!(
        "{}: cost volume {:.2?}, aggregation {:.2?}, selection {:.2?}",
        f.name,
        out.timings.cost_volume,
        out.timings.aggregation,
        out.timings.selection
    );
    Ok(())
}

fn run_restore(cfg: &PipelineConfig, a: RestoreArgs) -> anyhow::Result<()> {
    let path = pick(a.restore, &cfg.paths.restore, "paths.restore")?;
    let net = TextureNet::load(&path)?;
    if net.role() != Role::Restore {
        return Err(usage(format!("{} is a detector checkpoint", path.display())));
    }
    let img = GrayImage::load(&a.input)?;
    net.run_tiled(&img, a.tile, a.overlap)?.save_png(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn reconstruct(cfg: &PipelineConfig, a: ReconstructArgs) -> anyhow::Result<()> {
    let camera = cfg
        .camera()?
        .ok_or_else(|| Error::config("paths.calibration", "reconstruct needs a calibration"))?;
    let disp = DisparityMap::read_pfm(&a.disparity)?;
    let color = a.image.as_deref().map(GrayImage::load).transpose()?;
    let (cloud, dropped) = triangulate(&disp, &camera, color.as_ref());
    if cloud.is_empty() {
        return Err(Error::Data(format!("{}: no valid disparities", a.disparity.display())).into());
    }
    let mut cloud = if a.keep_outliers {
        cloud
    } else {
        remove_outliers(&cloud, cfg.recon.k, cfg.recon.sigma)?
    };
    estimate_normals(&mut cloud, NORMAL_K);
    write_ply(&cloud, &a.out)?;
    println!("{} points ({dropped} non-positive depths dropped); wrote {}", cloud.len(), a.out.display());
    Ok(())
}

fn parse_method(raw: &str) -> anyhow::Result<(String, PathBuf)> {
    let (name, path) = raw
        .split_once('=')
        .filter(|(n, p)| !n.is_empty() && !p.is_empty())
        .ok_or_else(|| usage(format!("--method expects NAME=CHECKPOINT, got {raw:?}")))?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn eval(cfg: &PipelineConfig, a: EvalArgs) -> anyhow::Result<()> {
    let input = pick(a.input, &cfg.paths.dataset, "paths.dataset")?;
    let ds = load(&input)?;
    let mut specs = a.methods.iter().map(|m| parse_method(m)).collect::<anyhow::Result<Vec<_>>>()?;
    if specs.is_empty() {
        let p = cfg
            .paths
            .matcher
            .clone()
            .ok_or_else(|| usage("no --method given and paths.matcher is unset"))?;
        specs.push(("matcher".into(), p));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some((dup, _)) = specs.iter().find(|(n, _)| !seen.insert(n.clone())) {
        return Err(usage(format!("method {dup:?} given twice")));
    }
    let nets: Vec<(String, MatcherNet)> = specs
        .into_iter()
        .map(|(n, p)| MatcherNet::load(&p).map(|net| (n, net)).with_context(|| format!("loading {}", p.display())))
        .collect::<anyhow::Result<_>>()?;
    let methods: Vec<(String, &MatcherNet)> = nets.iter().map(|(n, net)| (n.clone(), net)).collect();

    let frames = if a.grid {
        grid_frames(cfg, &ds)?
    } else {
        ds.frames
    };
    let report = run_grid(&frames, &methods, &cfg.stereo, &cfg.hash(), &a.out)?;
    println!("bad-pixel rate (> {} px)\n{}", report.threshold, report.table_csv(Metric::BadPixel));
    println!("rmse\n{}", report.table_csv(Metric::Rmse));
    println!("{} cells in {:.1}s; wrote {}", report.cells.len(), report.runtime_s, a.out.display());
    if report.cells.is_empty() {
        return Err(Error::Data("no frame has ground truth to score".into()).into());
    }
    Ok(())
}

/// Each frame under every configured condition, degraded in memory.
fn grid_frames(cfg: &PipelineConfig, ds: &Dataset) -> anyhow::Result<Vec<DatasetFrame>> {
    let conditions: Vec<Condition> = cfg.condition_grid()?;
    let base: Vec<(String, StereoFrame)> = ds.frames.iter().map(DatasetFrame::named).collect();
    let samples = uwstereo::dataset::augment_dataset(&base, &conditions, cfg.stream(AUGMENT_STREAM), &cfg.bubbles);
    if samples.is_empty() {
        bail!(Error::Data("no frame has ground truth to degrade".into()));
    }
    Ok(samples
        .into_iter()
        .map(|s| DatasetFrame {
            name: s.name,
            condition: Some(s.sample.condition),
            clean: Some((s.sample.clean.left.clone(), s.sample.clean.right.clone())),
            bubble_masks: Some((s.sample.bubble_mask_left, s.sample.bubble_mask_right)),
            mask_defaulted: true,
            source: PathBuf::new(),
            frame: s.sample.degraded,
        })
        .collect())
}
