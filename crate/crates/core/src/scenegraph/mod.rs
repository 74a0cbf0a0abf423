//! Semantic scene graphs, synthetic scene-pair generation with exact ground
//! truth, controlled corruption and JSON I/O.

mod corrupt;
mod generate;
mod graph;
pub mod io;

pub use corrupt::{corrupt, corrupt_pair, corrupt_with_map, CorruptionRegime};
pub use generate::{
    class_profile, generate_mosaic, generate_scene_pair, GeneratorConfig, MosaicScene, Scene,
    SceneObject, ScenePreset, Shape, NEAR_RADIUS,
};
pub use graph::{
    SceneGraph, SceneNode, EXTENT_SCALE, NUM_RELATIONS, REL_NEAR, REL_SUPPORTED_BY, REL_SUPPORTS,
};
pub use io::{load_pair, load_scene, save_pair, save_scene};

use nalgebra::{DMatrix, Vector3};
use thiserror::Error;

use crate::geometry::{PointCloud, RigidTransform};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SceneGraphError {
    #[error("class {class} outside vocabulary of {num_classes}")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("relation {relation} outside vocabulary of {num_relations}")]
    RelationOutOfRange { relation: usize, num_relations: usize },
    #[error("node index {index} out of range for {len} nodes")]
    NodeOutOfRange { index: usize, len: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("attribute width {found}, expected {expected}")]
    AttributeWidth { expected: usize, found: usize },
    #[error("non-finite value on node {0}")]
    NonFinite(usize),
    #[error("duplicate node id {0}")]
    DuplicateId(usize),
    #[error("invalid ground truth: {0}")]
    InvalidGroundTruth(String),
    #[error("infeasible generator config: {0}")]
    InfeasibleConfig(String),
    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u32, expected: u32 },
    #[error("I/O error: {0}")]
    Io(String),
}

/// One side of a pair: a scene graph and its labeled cloud, whose object ids
/// are node indices of the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Fragment {
    pub graph: SceneGraph,
    pub cloud: PointCloud,
}

impl Fragment {
    pub fn new(graph: SceneGraph, cloud: PointCloud) -> Result<Self, SceneGraphError> {
        let f = Self { graph, cloud };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), SceneGraphError> {
        self.graph.validate()?;
        let m = self.graph.len();
        if let Some(&bad) = self.cloud.object_ids().iter().find(|&&o| o >= m) {
            return Err(SceneGraphError::NodeOutOfRange { index: bad, len: m });
        }
        Ok(())
    }

    /// Points of one object, in cloud order.
    pub fn object_points(&self, node: usize) -> Vec<Vector3<f64>> {
        self.cloud
            .points()
            .iter()
            .zip(self.cloud.object_ids())
            .filter(|(_, &o)| o == node)
            .map(|(p, _)| *p)
            .collect()
    }
}

/// Two fragments with ground-truth node alignment and the transform taking
/// source coordinates into the reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePair {
    pub src: Fragment,
    pub reference: Fragment,
    /// `(src node, ref node)` pairs, sorted.
    pub gt_alignment: Vec<(usize, usize)>,
    pub gt_transform: RigidTransform,
    pub overlap_fraction: f64,
}

impl ScenePair {
    pub fn new(
        src: Fragment,
        reference: Fragment,
        gt_alignment: Vec<(usize, usize)>,
        gt_transform: RigidTransform,
        overlap_fraction: f64,
    ) -> Result<Self, SceneGraphError> {
        let p = Self {
            src,
            reference,
            gt_alignment,
            gt_transform,
            overlap_fraction,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), SceneGraphError> {
        self.src.validate()?;
        self.reference.validate()?;
        let (ms, mr) = (self.src.graph.len(), self.reference.graph.len());
        let mut row = vec![false; ms];
        let mut col = vec![false; mr];
        for &(s, r) in &self.gt_alignment {
            if s >= ms || r >= mr {
                return Err(SceneGraphError::InvalidGroundTruth(format!("pair ({s}, {r}) out of range")));
            }
            if row[s] || col[r] {
                return Err(SceneGraphError::InvalidGroundTruth(format!(
                    "pair ({s}, {r}) repeats a row or column"
                )));
            }
            row[s] = true;
            col[r] = true;
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(SceneGraphError::InvalidGroundTruth("overlap_fraction outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Binary M_src × M_ref alignment matrix S.
    pub fn gt_matrix(&self) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(self.src.graph.len(), self.reference.graph.len());
        for &(i, j) in &self.gt_alignment {
            s[(i, j)] = 1.0;
        }
        s
    }

    /// Similarity target `k = |S| / min(M_src, M_ref)`.
    pub fn gt_similarity(&self) -> f64 {
        let m = self.src.graph.len().min(self.reference.graph.len());
        if m == 0 {
            0.0
        } else {
            self.gt_alignment.len() as f64 / m as f64
        }
    }

    /// For each source node, its aligned reference node.
    pub fn src_to_ref(&self) -> Vec<Option<usize>> {
        let mut map = vec![None; self.src.graph.len()];
        for &(s, r) in &self.gt_alignment {
            map[s] = Some(r);
        }
        map
    }
}
