//! Face geometry: landmark rasterization, triangulation, piecewise-affine
//! warping, identity-map construction, and input preprocessing.
//!
//! Everything here is deterministic pure computation; identical inputs give
//! bit-identical outputs.

mod delaunay;
mod identity_map;
mod landmarks;
mod preprocess;
mod warp;

pub use delaunay::delaunay;
pub use identity_map::{build_identity_map, BaseMesh, IdentityMap};
pub use landmarks::{
    rasterize_landmarks, LandmarkSet, LANDMARK_COUNT, LANDMARK_SIGMA, MIRROR_68,
};
pub use preprocess::{align_to_canonical, flip_sample, preprocess, CANONICAL_LEFT_EYE, CANONICAL_RIGHT_EYE};
pub use warp::{piecewise_affine_warp, piecewise_affine_warp_masked, sample_bilinear};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Side length of the canonical face frame.
pub const IMG_SIZE: usize = 96;

/// Expression label used for neutral faces (0..5 are the six basic classes).
pub const NEUTRAL_LABEL: u8 = 6;

/// Number of expression labels including neutral.
pub const LABEL_COUNT: usize = 7;

/// One aligned face: image, landmarks, and its labels.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub sample_id: String,
    pub identity_id: u32,
    /// 0..5 basic expressions, 6 neutral.
    pub expression: u8,
    /// `[3, 96, 96]` in [0,1].
    pub image: Tensor,
    pub landmarks: LandmarkSet,
}

impl FaceSample {
    pub fn new(
        sample_id: String,
        identity_id: u32,
        expression: u8,
        image: Tensor,
        landmarks: LandmarkSet,
    ) -> Result<Self> {
        if expression as usize >= LABEL_COUNT {
            return Err(Error::Data(format!(
                "expression label {expression} out of range (0..={})",
                LABEL_COUNT - 1
            )));
        }
        if image.shape() != [3, IMG_SIZE, IMG_SIZE] {
            return Err(Error::Dim(format!(
                "face image must be [3, {IMG_SIZE}, {IMG_SIZE}], got {:?}",
                image.shape()
            )));
        }
        landmarks.validate_canonical()?;
        Ok(Self {
            sample_id,
            identity_id,
            expression,
            image,
            landmarks,
        })
    }

    pub fn is_neutral(&self) -> bool {
        self.expression == NEUTRAL_LABEL
    }
}
