//! Rigid transforms, labeled point clouds, exact nearest-neighbor search and
//! rigid pose estimation.

mod align;
mod cloud;
mod kdtree;
mod transform;

pub use align::{ransac_pose, weighted_svd_alignment, PoseEstimate, RansacConfig};
pub(crate) use align::{inlier_mask, refine_on_inliers};
pub use cloud::{apply_transform, PointCloud};
pub use kdtree::{knn_edges, KdTree};
pub use transform::{rotation_angle_deg, RigidTransform};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("weighted covariance has rank < 2")]
    DegenerateConfiguration,
    #[error("need at least 3 correspondences, got {found}")]
    InsufficientCorrespondences { found: usize },
    #[error("k = {k} must be smaller than the point count {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("invalid rigid transform: {0}")]
    InvalidRotation(String),
    #[error("{what}: expected length {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("weights must be finite, non-negative and sum to a positive value")]
    InvalidWeights,
}
