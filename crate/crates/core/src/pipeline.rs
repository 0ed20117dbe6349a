//! End-to-end matching: cost volume, aggregation, consistency, refinement.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::costvol::{winner_take_all, winner_take_all_right, CostVolume};
use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::frame::StereoFrame;
use crate::image::Mask;
use crate::matcher::MatcherNet;
use crate::sgm::{lr_check, sgm_aggregate, subpixel_refine, PathSet, SgmParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StereoParams {
    pub d_min: usize,
    /// Largest disparity searched, inclusive.
    pub d_max: usize,
    pub p1: f32,
    pub p2: f32,
    /// 4 or 8.
    pub paths: usize,
    pub lr_tol: f32,
    pub subpixel: bool,
}

impl Default for StereoParams {
    fn default() -> Self {
        Self {
            d_min: 0,
            d_max: 255,
            p1: 0.03,
            p2: 0.5,
            paths: 8,
            lr_tol: 1.0,
            subpixel: true,
        }
    }
}

impl StereoParams {
    pub fn sgm(&self) -> Result<SgmParams> {
        let paths = PathSet::from_count(self.paths)
            .ok_or_else(|| Error::config("stereo.paths", format!("must be 4 or 8, got {}", self.paths)))?;
        let p = SgmParams {
            p1: self.p1,
            p2: self.p2,
            paths,
        };
        p.validate().map_err(|e| Error::config("stereo.p1/p2", e.to_string()))?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_max > 1024 {
            return Err(Error::config("stereo.d_max", "must be <= 1024"));
        }
        if self.d_min > self.d_max {
            return Err(Error::config("stereo.d_min", "must not exceed d_max"));
        }
        if !(self.lr_tol >= 0.0) {
            return Err(Error::config("stereo.lr_tol", "must be >= 0"));
        }
        self.sgm().map(|_| ())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub cost_volume: Duration,
    pub aggregation: Duration,
    pub selection: Duration,
}

impl Timings {
    pub fn total(&self) -> Duration {
        self.cost_volume + self.aggregation + self.selection
    }
}

#[derive(Clone, Debug)]
pub struct MatchOutput {
    /// Final left disparity after the LR check and refinement.
    pub disparity: DisparityMap,
    /// Integer winners before the LR check.
    pub left_raw: DisparityMap,
    pub right_raw: DisparityMap,
    pub timings: Timings,
}

/// SGM, winner-take-all on both views, LR check, subpixel refinement.
pub fn disparity_from_costs(vol: CostVolume, params: &StereoParams) -> Result<MatchOutput> {
    let sgm = params.sgm()?;
    let t = Instant::now();
    let agg = sgm_aggregate(&vol, &sgm)?;
    drop(vol);
    let aggregation = t.elapsed();
    let t = Instant::now();
    let left_raw = winner_take_all(&agg);
    let right_raw = winner_take_all_right(&agg);
    let checked = lr_check(&left_raw, &right_raw, params.lr_tol)?;
    let disparity = if params.subpixel {
        subpixel_refine(&agg, &checked)?
    } else {
        checked
    };
    Ok(MatchOutput {
        disparity,
        left_raw,
        right_raw,
        timings: Timings {
            cost_volume: Duration::ZERO,
            aggregation,
            selection: t.elapsed(),
        },
    })
}

/// Match a rectified frame; the search is limited to the masks (the frame's
/// own masks when `masks` is `None`, otherwise full).
pub fn match_frame(net: &MatcherNet, frame: &StereoFrame, masks: Option<(&Mask, &Mask)>, params: &StereoParams) -> Result<MatchOutput> {
    params.validate()?;
    let owned;
    let (ml, mr) = match masks {
        Some(m) => m,
        None => {
            owned = frame.masks_or_full();
            (&owned.0, &owned.1)
        }
    };
    let t = Instant::now();
    let vol = net.cost_volume(frame, (ml, mr), params.d_min, params.d_max)?;
    let cv = t.elapsed();
    let mut out = disparity_from_costs(vol, params)?;
    out.timings.cost_volume = cv;
    Ok(out)
}
