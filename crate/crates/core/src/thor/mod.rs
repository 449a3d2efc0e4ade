//! THOR template tracking: a long-term memory that only admits templates
//! which enlarge the span of its feature vectors, a FIFO short-term memory,
//! and a cross-correlation matcher over all ten templates.

mod features;
mod matcher;
mod memory;

pub use features::{ClassicalExtractor, Feature, FeatureExtractor, FEATURE_DIM, FEATURE_RES};
pub use matcher::{match_frame, BoxSegmenter, Segmenter, ThorTracker, TrackState};
pub use memory::{gamma_of, gram_of, parallelotope_volume, Admission, Gram, Template, TemplateModule, LTM_SIZE, STM_SIZE};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ThorError {
    #[error("degenerate template memory (max similarity {0})")]
    DegenerateMemory(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid bounding box {0:?}")]
    InvalidBox(crate::geometry::Rect),
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ThorConfig {
    pub lower_bound: f64,
    pub stm_period: u64,
    pub context: f64,
    pub loss_threshold: f64,
}

impl Default for ThorConfig {
    fn default() -> Self {
        Self {
            lower_bound: 0.8,
            stm_period: 10,
            context: 2.0,
            loss_threshold: 0.3,
        }
    }
}
