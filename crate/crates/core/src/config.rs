//! JSON pipeline configuration with dot-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bubble::{BubbleConfig, Condition};
use crate::error::{Error, Result};
use crate::matcher::{MatcherConfig, MatcherTraining};
use crate::pipeline::StereoParams;
use crate::rectify::CameraModel;
use crate::segment::{SegConfig, SegTraining};
use crate::synth::derive_seed;
use crate::texture::{TextureConfig, TextureTraining};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub calibration: Option<PathBuf>,
    pub matcher: Option<PathBuf>,
    pub segmenter: Option<PathBuf>,
    pub restore: Option<PathBuf>,
    pub detector: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconParams {
    /// Neighbours used by outlier removal and normal estimation.
    pub k: usize,
    /// Outlier cut in standard deviations of the mean neighbour distance.
    pub sigma: f64,
}

impl Default for ReconParams {
    fn default() -> Self {
        Self { k: 8, sigma: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextureSection {
    pub net: TextureConfig,
    pub training: TextureTraining,
    /// Weight of the detector term in unsupervised training.
    pub lambda: f32,
}

impl Default for TextureSection {
    fn default() -> Self {
        Self {
            net: TextureConfig::default(),
            training: TextureTraining::default(),
            lambda: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub paths: Paths,
    pub stereo: StereoParams,
    pub matcher: MatcherConfig,
    pub matcher_training: MatcherTraining,
    pub segmenter: SegConfig,
    pub segmenter_training: SegTraining,
    pub texture: TextureSection,
    pub bubbles: BubbleConfig,
    /// Condition labels such as `clean` or `large-much-near`.
    pub conditions: Vec<String>,
    pub recon: ReconParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 2018,
            paths: Paths::default(),
            stereo: StereoParams::default(),
            matcher: MatcherConfig::default(),
            matcher_training: MatcherTraining::default(),
            segmenter: SegConfig::default(),
            segmenter_training: SegTraining::default(),
            texture: TextureSection::default(),
            bubbles: BubbleConfig::default(),
            conditions: Condition::grid().iter().map(|c| c.label()).collect(),
            recon: ReconParams::default(),
        };
        c.derive_seeds();
        c
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl PipelineConfig {
    /// Parse, apply `overrides` (`("stereo.d_max", "128")`), derive seeds
    /// and validate.
    pub fn from_json(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text)?;
        for (path, raw) in overrides {
            set_path(&mut value, path, parse_scalar(raw))?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.derive_seeds();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }

    /// Default configuration with overrides applied.
    pub fn with_overrides(overrides: &[(String, String)]) -> Result<Self> {
        Self::from_json("{}", overrides)
    }

    /// Overwrite every component seed with one derived from the root seed.
    pub fn derive_seeds(&mut self) {
        let s = |tag: u64| derive_seed(&[self.seed, tag]);
        self.matcher_training.seed = s(1);
        self.segmenter_training.seed = s(2);
        self.segmenter_training.augment.seed = s(3);
        self.texture.training.seed = s(4);
    }

    /// Seed for a named stream not covered by a component config.
    pub fn stream(&self, tag: u64) -> u64 {
        derive_seed(&[self.seed, 0x5eed, tag])
    }

    pub fn condition_grid(&self) -> Result<Vec<Condition>> {
        self.conditions
            .iter()
            .map(|l| Condition::parse(l).ok_or_else(|| Error::config("conditions", format!("unknown condition {l:?}"))))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.stereo.validate()?;
        self.matcher.validate()?;
        self.segmenter.validate()?;
        self.texture.net.validate()?;
        if !(self.texture.lambda >= 0.0) {
            return Err(Error::config("texture.lambda", "must be >= 0"));
        }
        if self.recon.k == 0 {
            return Err(Error::config("recon.k", "must be positive"));
        }
        if !(self.recon.sigma > 0.0) {
            return Err(Error::config("recon.sigma", "must be positive"));
        }
        self.condition_grid()?;
        let p = &self.paths;
        for (field, path) in [
            ("paths.calibration", &p.calibration),
            ("paths.matcher", &p.matcher),
            ("paths.segmenter", &p.segmenter),
            ("paths.restore", &p.restore),
            ("paths.detector", &p.detector),
            ("paths.dataset", &p.dataset),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(Error::config(field, format!("{} does not exist", path.display())));
                }
            }
        }
        Ok(())
    }

    pub fn camera(&self) -> Result<Option<CameraModel>> {
        self.paths.calibration.as_deref().map(CameraModel::load).transpose()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Set `a.b.c` in a JSON object, creating intermediate objects.
fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(path, "malformed override path"));
    }
    let mut cur = root;
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(parts[..i].join("."), "is not an object"))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last component")
}
