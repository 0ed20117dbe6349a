use crate::disparity::DisparityMap;
use crate::error::{Error, Result};
use crate::image::{GrayImage, Mask};

/// Rectified stereo pair with optional target masks and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub left: GrayImage,
    pub right: GrayImage,
    pub mask_left: Option<Mask>,
    pub mask_right: Option<Mask>,
    /// Left-view disparity; occluded or out-of-view pixels are invalid.
    pub gt: Option<DisparityMap>,
}

impl StereoFrame {
    pub fn new(left: GrayImage, right: GrayImage) -> Result<Self> {
        left.check_same(&right)?;
        Ok(Self {
            left,
            right,
            mask_left: None,
            mask_right: None,
            gt: None,
        })
    }

    pub fn with_gt(mut self, gt: DisparityMap) -> Result<Self> {
        if gt.size() != self.left.size() {
            return Err(Error::Size("ground truth does not match image size".into()));
        }
        self.gt = Some(gt);
        Ok(self)
    }

    pub fn with_masks(mut self, left: Mask, right: Mask) -> Result<Self> {
        if left.size() != self.left.size() || right.size() != self.left.size() {
            return Err(Error::Size("mask does not match image size".into()));
        }
        self.mask_left = Some(left);
        self.mask_right = Some(right);
        Ok(self)
    }

    pub fn width(&self) -> usize {
        self.left.width()
    }

    pub fn height(&self) -> usize {
        self.left.height()
    }

    pub fn size(&self) -> (usize, usize) {
        self.left.size()
    }

    /// Masks, defaulting to all-set when absent.
    pub fn masks_or_full(&self) -> (Mask, Mask) {
        let (w, h) = self.size();
        (
            self.mask_left.clone().unwrap_or_else(|| Mask::full(w, h)),
            self.mask_right.clone().unwrap_or_else(|| Mask::full(w, h)),
        )
    }
}
