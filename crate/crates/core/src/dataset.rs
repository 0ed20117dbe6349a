//! Middlebury-style frame directories and JSON manifests.
//!
//! A frame directory holds `im0.png`, `im1.png`, optionally `disp0.pfm`
//! (left ground truth), `mask0.png`/`mask1.png` (target masks) and
//! `meta.json`. Bubble-augmented frames add `clean0.png`, `clean1.png`,
//! `bubble0.png` and `bubble1.png`.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bubble::{augment, AugmentedSample, BubbleConfig, Condition};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::frame::StereoFrame;
use crate::image::{GrayImage, Mask};

pub const MANIFEST: &str = "manifest.json";
const META: &str = "meta.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub warped: bool,
}

/// Paths are relative to the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<u64>,
    pub left: PathBuf,
    pub right: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_left: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_right: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_left: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_right: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bubble_left: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bubble_right: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

impl Default for Manifest {
    fn default() -> Self {
        Self {
            version: 1,
            entries: Vec::new(),
        }
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text)?;
        if m.version != 1 {
            return Err(Error::Data(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetFrame {
    pub name: String,
    pub frame: StereoFrame,
    pub condition: Option<Condition>,
    /// The undegraded pair of an augmented frame.
    pub clean: Option<(GrayImage, GrayImage)>,
    pub bubble_masks: Option<(Mask, Mask)>,
    /// Set when no mask was stored and a full mask was substituted.
    pub mask_defaulted: bool,
    pub source: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkippedFrame {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub frames: Vec<DatasetFrame>,
    pub skipped: Vec<SkippedFrame>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

fn rel(p: &str) -> PathBuf {
    PathBuf::from(p)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Write `frame` into `dir`; the returned entry's paths are file names
/// inside `dir`.
pub fn write_frame(dir: &Path, frame: &StereoFrame, meta: &FrameMeta) -> Result<ManifestEntry> {
    create_dir(dir)?;
    frame.left.save_png(&dir.join("im0.png"))?;
    frame.right.save_png(&dir.join("im1.png"))?;
    let mut entry = ManifestEntry {
        name: meta.name.clone(),
        dir: PathBuf::new(),
        condition: meta.condition.clone(),
        frame_id: meta.frame_id,
        left: rel("im0.png"),
        right: rel("im1.png"),
        ..Default::default()
    };
    if let Some(gt) = &frame.gt {
        gt.write_pfm(&dir.join("disp0.pfm"))?;
        entry.gt = Some(rel("disp0.pfm"));
    }
    if let (Some(ml), Some(mr)) = (&frame.mask_left, &frame.mask_right) {
        ml.save_png(&dir.join("mask0.png"))?;
        mr.save_png(&dir.join("mask1.png"))?;
        entry.mask_left = Some(rel("mask0.png"));
        entry.mask_right = Some(rel("mask1.png"));
    }
    let path = dir.join(META);
    fs::write(&path, serde_json::to_string_pretty(meta)?).map_err(|e| Error::io(&path, e))?;
    Ok(entry)
}

/// Write an augmented sample: degraded views as the frame, plus the clean
/// views and the bubble masks.
pub fn write_sample(dir: &Path, sample: &AugmentedSample, meta: &FrameMeta) -> Result<ManifestEntry> {
    let mut entry = write_frame(dir, &sample.degraded, meta)?;
    sample.clean.left.save_png(&dir.join("clean0.png"))?;
    sample.clean.right.save_png(&dir.join("clean1.png"))?;
    sample.bubble_mask_left.save_png(&dir.join("bubble0.png"))?;
    sample.bubble_mask_right.save_png(&dir.join("bubble1.png"))?;
    entry.clean_left = Some(rel("clean0.png"));
    entry.clean_right = Some(rel("clean1.png"));
    entry.bubble_left = Some(rel("bubble0.png"));
    entry.bubble_right = Some(rel("bubble1.png"));
    Ok(entry)
}

fn existing(dir: &Path, name: &str) -> Option<PathBuf> {
    let p = dir.join(name);
    p.is_file().then(|| rel(name))
}

/// Entry describing whatever a frame directory contains.
fn scan_dir(dir: &Path) -> ManifestEntry {
    let meta: Option<FrameMeta> = fs::read_to_string(dir.join(META)).ok().and_then(|t| serde_json::from_str(&t).ok());
    let name = meta
        .as_ref()
        .map(|m| m.name.clone())
        .filter(|n| !n.is_empty())
        .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    ManifestEntry {
        name,
        dir: PathBuf::new(),
        condition: meta.as_ref().and_then(|m| m.condition.clone()),
        frame_id: meta.as_ref().and_then(|m| m.frame_id),
        left: rel("im0.png"),
        right: rel("im1.png"),
        gt: existing(dir, "disp0.pfm"),
        mask_left: existing(dir, "mask0.png"),
        mask_right: existing(dir, "mask1.png"),
        clean_left: existing(dir, "clean0.png"),
        clean_right: existing(dir, "clean1.png"),
        bubble_left: existing(dir, "bubble0.png"),
        bubble_right: existing(dir, "bubble1.png"),
    }
}

fn load_entry(base: &Path, e: &ManifestEntry) -> Result<DatasetFrame> {
    let dir = base.join(&e.dir);
    let left = GrayImage::load(&dir.join(&e.left))?;
    let right = GrayImage::load(&dir.join(&e.right))?;
    let mut frame = StereoFrame::new(left, right)?;
    let (w, h) = frame.size();
    if let Some(gt) = &e.gt {
        frame = frame.with_gt(DisparityMap::read_pfm(&dir.join(gt))?)?;
    }
    let mask_defaulted = e.mask_left.is_none();
    let ml = match &e.mask_left {
        Some(p) => Mask::load(&dir.join(p))?,
        None => Mask::full(w, h),
    };
    let mr = match &e.mask_right {
        Some(p) => Mask::load(&dir.join(p))?,
        None if mask_defaulted => Mask::full(w, h),
        None => ml.clone(),
    };
    frame = frame.with_masks(ml, mr)?;
    let clean = match (&e.clean_left, &e.clean_right) {
        (Some(l), Some(r)) => Some((GrayImage::load(&dir.join(l))?, GrayImage::load(&dir.join(r))?)),
        _ => None,
    };
    let bubble_masks = match (&e.bubble_left, &e.bubble_right) {
        (Some(l), Some(r)) => Some((Mask::load(&dir.join(l))?, Mask::load(&dir.join(r))?)),
        _ => None,
    };
    let condition = match &e.condition {
        Some(label) => Some(Condition::parse(label).ok_or_else(|| Error::Data(format!("unknown condition {label:?}")))?),
        None => None,
    };
    Ok(DatasetFrame {
        name: e.name.clone(),
        frame,
        condition,
        clean,
        bubble_masks,
        mask_defaulted,
        source: dir,
    })
}

fn load_entries(base: &Path, entries: &[ManifestEntry]) -> Dataset {
    let results: Vec<_> = entries.par_iter().map(|e| (e, load_entry(base, e))).collect();
    let mut ds = Dataset::default();
    for (e, r) in results {
        match r {
            Ok(f) => {
                if f.mask_defaulted {
                    log::info!("{}: no target mask, using the full image", f.name);
                }
                ds.frames.push(f)
            }
            Err(err) => {
                log::warn!("skipping frame {}: {err}", e.name);
                ds.skipped.push(SkippedFrame {
                    name: e.name.clone(),
                    reason: err.to_string(),
                });
            }
        }
    }
    ds
}

/// Load a manifest file, a directory holding `manifest.json`, a single frame
/// directory, or a directory of frame directories. Frames that fail to load
/// are reported in [`Dataset::skipped`].
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    if path.is_file() {
        let m = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        return Ok(load_entries(base, &m.entries));
    }
    if !path.is_dir() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "no such dataset")));
    }
    if path.join(MANIFEST).is_file() {
        return load_dataset(&path.join(MANIFEST));
    }
    if path.join("im0.png").is_file() {
        let mut e = scan_dir(path);
        e.dir = PathBuf::new();
        return Ok(load_entries(path, &[e]));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.join("im0.png").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        log::warn!("{} contains no frames", path.display());
    }
    let entries: Vec<ManifestEntry> = dirs
        .iter()
        .map(|d| {
            let mut e = scan_dir(d);
            e.dir = d.strip_prefix(path).expect("child of root").to_path_buf();
            e
        })
        .collect();
    Ok(load_entries(path, &entries))
}

/// One degraded copy of a base frame.
#[derive(Clone, Debug)]
pub struct TransferSample {
    pub name: String,
    pub frame_id: u64,
    pub sample: AugmentedSample,
}

/// Every base frame with ground truth under every condition. Frames without
/// ground truth are skipped with a warning.
pub fn augment_dataset(base: &[(String, StereoFrame)], conditions: &[Condition], seed: u64, cfg: &BubbleConfig) -> Vec<TransferSample> {
    base.par_iter()
        .enumerate()
        .filter(|(_, (name, f))| {
            if f.gt.is_none() {
                log::warn!("skipping {name}: no ground truth disparity");
            }
            f.gt.is_some()
        })
        .flat_map_iter(|(id, (name, f))| {
            conditions.iter().map(move |&c| TransferSample {
                name: format!("{name}-{}", c.label()),
                frame_id: id as u64,
                sample: augment(f, c, id as u64, seed, cfg),
            })
        })
        .collect()
}

/// Augment `base` and write one frame directory per sample under `out`,
/// plus `out/manifest.json`.
pub fn build_transfer_dataset(
    base: &[(String, StereoFrame)],
    conditions: &[Condition],
    seed: u64,
    cfg: &BubbleConfig,
    out: &Path,
) -> Result<Manifest> {
    create_dir(out)?;
    let samples = augment_dataset(base, conditions, seed, cfg);
    let entries = samples
        .par_iter()
        .map(|s| {
            let meta = FrameMeta {
                name: s.name.clone(),
                condition: Some(s.sample.condition.label()),
                frame_id: Some(s.frame_id),
                seed: Some(seed),
                warped: s.sample.warped,
            };
            let mut e = write_sample(&out.join(&s.name), &s.sample, &meta)?;
            e.dir = PathBuf::from(&s.name);
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { version: 1, entries };
    manifest.save(&out.join(MANIFEST))?;
    Ok(manifest)
}

impl DatasetFrame {
    pub fn named(&self) -> (String, StereoFrame) {
        (self.name.clone(), self.frame.clone())
    }
}
