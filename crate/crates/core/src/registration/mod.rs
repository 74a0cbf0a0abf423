//! Coarse-to-fine registration with semantic rescoring, and mosaicking.

mod correspondence;
mod matching;
mod mosaic;
mod pipeline;
mod superpoints;

pub use correspondence::{CorrespondenceLevel, CorrespondenceSet};
pub use matching::{extract_correspondences, rescore, superpoint_matching_matrix, top_superpoint_pairs, ExtractionConfig};
pub use mosaic::{assemble, mosaic, mosaic_with_edges, MosaicConfig, PoseEdge};
pub use pipeline::{
    estimate_pose, gt_correspondences, node_id_alignment, oracle_alignment, register, register_pair, OpoFilter, Registration,
    RegistrationConfig, Strategy,
};
pub use superpoints::{build_superpoints, SuperpointSet, SHAPE_FEATURES};

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::GeometryError;
use crate::metrics::RegistrationMetrics;

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("no correspondences to estimate a pose from")]
    NoCorrespondences,
    #[error("object {object} out of range for an alignment with {len} nodes")]
    ObjectOutOfRange { object: usize, len: usize },
    #[error("descriptor width mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("strategy needs a scene-graph alignment")]
    MissingAlignment,
    #[error("invalid registration config: {0}")]
    InvalidConfig(String),
    #[error("fragments {0:?} share no accepted registration with fragment 0")]
    DisconnectedScenes(Vec<usize>),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Registration report file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationReport {
    /// Row-major 4×4.
    pub transform: Vec<f64>,
    pub strategy: String,
    pub correspondences: usize,
    pub inliers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RegistrationMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scc: Option<f64>,
}

impl RegistrationReport {
    pub fn new(reg: &Registration, strategy: Strategy) -> Self {
        Self {
            transform: reg.transform.to_row_major().to_vec(),
            strategy: strategy.to_string(),
            correspondences: reg.correspondences.len(),
            inliers: reg.inliers,
            metrics: None,
            scc: None,
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(std::io::Error::other)?;
        crate::scenegraph::io::write_atomic(path, &json)
    }
}

#[cfg(test)]
mod tests;
