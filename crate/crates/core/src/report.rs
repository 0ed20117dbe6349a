//! Condition-by-method evaluation grid and its report.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::DatasetFrame;
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::matcher::MatcherNet;
use crate::pipeline::{match_frame, StereoParams};
use crate::recon3d::{DisparityMetrics, ErrorTally};

/// Bad-pixel threshold used by the grid, in pixels.
pub const BAD_PIXEL_THRESHOLD: f32 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    pub frame: String,
    /// Relative to the report directory.
    pub disparity: PathBuf,
    pub gt: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub condition: String,
    pub method: String,
    pub metrics: DisparityMetrics,
    pub tally: ErrorTally,
    pub runtime_s: f64,
    pub files: Vec<CellFile>,
    /// Frames whose matching failed.
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub threshold: f32,
    pub conditions: Vec<String>,
    pub methods: Vec<String>,
    pub cells: Vec<ReportCell>,
    pub runtime_s: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Rmse,
    BadPixel,
}

impl ExperimentReport {
    pub fn cell(&self, condition: &str, method: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.condition == condition && c.method == method)
    }

    /// CSV with one row per condition and one column per method; missing
    /// cells are left empty.
    pub fn table_csv(&self, metric: Metric) -> String {
        let mut out = String::from("condition");
        for m in &self.methods {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for c in &self.conditions {
            out.push_str(c);
            for m in &self.methods {
                out.push(',');
                if let Some(cell) = self.cell(c, m) {
                    let v = match metric {
                        Metric::Rmse => cell.metrics.rmse,
                        Metric::BadPixel => cell.metrics.bad_pixel_rate,
                    };
                    out.push_str(&format!("{v}"));
                }
            }
            out.push('\n');
        }
        out
    }

    /// `report.json`, `rmse.csv` and `bad_pixel.csv` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", serde_json::to_string_pretty(self)?),
            ("rmse.csv", self.table_csv(Metric::Rmse)),
            ("bad_pixel.csv", self.table_csv(Metric::BadPixel)),
        ];
        for (name, text) in files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recompute every cell from its stored disparity files; any mismatch is
    /// an error naming the cell.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for cell in &self.cells {
            let mut tally = ErrorTally::default();
            for f in &cell.files {
                let est = DisparityMap::read_pfm(&dir.join(&f.disparity))?;
                let gt = DisparityMap::read_pfm(&dir.join(&f.gt))?;
                tally.add(&ErrorTally::of(&est, &gt, self.threshold, None)?);
            }
            if tally != cell.tally || tally.metrics()? != cell.metrics {
                return Err(Error::Data(format!(
                    "cell {}/{} does not match its disparity files",
                    cell.condition, cell.method
                )));
            }
        }
        Ok(())
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

/// Match every frame with every method and pool the errors per condition.
/// Frames without ground truth are skipped; frames whose matching fails are
/// recorded in the cell. Fails only when no frame could be evaluated.
pub fn run_grid(
    frames: &[DatasetFrame],
    methods: &[(String, &MatcherNet)],
    params: &StereoParams,
    config_hash: &str,
    out: &Path,
) -> Result<ExperimentReport> {
    let start = Instant::now();
    let usable: Vec<&DatasetFrame> = frames
        .iter()
        .filter(|f| {
            if f.frame.gt.is_none() {
                log::warn!("{}: no ground truth, not evaluated", f.name);
            }
            f.frame.gt.is_some()
        })
        .collect();
    let label = |f: &DatasetFrame| f.condition.map(|c| c.label()).unwrap_or_else(|| "clean".into());
    let mut conditions: Vec<String> = Vec::new();
    for f in &usable {
        let l = label(f);
        if !conditions.contains(&l) {
            conditions.push(l);
        }
    }
    let gt_dir = out.join("gt");
    fs::create_dir_all(&gt_dir).map_err(|e| Error::io(&gt_dir, e))?;
    let gt_paths: Vec<PathBuf> = usable
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let rel = PathBuf::from("gt").join(format!("{i:04}-{}.pfm", sanitize(&f.name)));
            f.frame.gt.as_ref().expect("filtered").write_pfm(&out.join(&rel))?;
            Ok(rel)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (method, net) in methods {
        let mdir = PathBuf::from(sanitize(method));
        fs::create_dir_all(out.join(&mdir)).map_err(|e| Error::io(out.join(&mdir), e))?;
        let results: Vec<_> = usable
            .par_iter()
            .enumerate()
            .map(|(i, f)| {
                let t = Instant::now();
                let res = match_frame(net, &f.frame, None, params).and_then(|o| {
                    let rel = mdir.join(format!("{i:04}-{}.pfm", sanitize(&f.name)));
                    o.disparity.write_pfm(&out.join(&rel))?;
                    // Score what was written, so the report reproduces from disk.
                    let stored = DisparityMap::read_pfm(&out.join(&rel))?;
                    let tally = ErrorTally::of(&stored, f.frame.gt.as_ref().expect("filtered"), BAD_PIXEL_THRESHOLD, None)?;
                    Ok((rel, tally))
                });
                (i, res, t.elapsed().as_secs_f64())
            })
            .collect();
        let mut by_cond: BTreeMap<String, (ErrorTally, Vec<CellFile>, Vec<String>, f64)> = BTreeMap::new();
        for (i, res, secs) in results {
            let f = usable[i];
            let e = by_cond.entry(label(f)).or_default();
            e.3 += secs;
            match res {
                Ok((rel, tally)) => {
                    e.0.add(&tally);
                    e.1.push(CellFile {
                        frame: f.name.clone(),
                        disparity: rel,
                        gt: gt_paths[i].clone(),
                    });
                }
                Err(err) => {
                    log::warn!("{method}: frame {} failed: {err}", f.name);
                    e.2.push(f.name.clone());
                }
            }
        }
        for cond in &conditions {
            let Some((tally, files, failures, secs)) = by_cond.remove(cond) else { continue };
            match tally.metrics() {
                Ok(metrics) => cells.push(ReportCell {
                    condition: cond.clone(),
                    method: method.clone(),
                    metrics,
                    tally,
                    runtime_s: secs,
                    files,
                    failures,
                }),
                Err(e) => log::warn!("{method}/{cond}: {e}"),
            }
        }
    }
    if cells.is_empty() && !usable.is_empty() {
        return Err(Error::Data("every frame failed to evaluate".into()));
    }
    let report = ExperimentReport {
        config_hash: config_hash.to_string(),
        threshold: BAD_PIXEL_THRESHOLD,
        conditions,
        methods: methods.iter().map(|(m, _)| m.clone()).collect(),
        cells,
        runtime_s: start.elapsed().as_secs_f64(),
    };
    report.write(out)?;
    Ok(report)
}
