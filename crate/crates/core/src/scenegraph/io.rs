use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Fragment, SceneGraph, SceneGraphError, ScenePair, SceneNode, NUM_RELATIONS};
use crate::geometry::{PointCloud, RigidTransform};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeRecord {
    pub id: usize,
    pub class: usize,
    pub attributes: Vec<f64>,
    pub centroid: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeRecord {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

/// On-disk scene: graph plus labeled cloud. Edge endpoints and object ids
/// refer to node ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub schema_version: u32,
    pub nodes: Vec<NodeRecord>,
    pub edges: Vec<EdgeRecord>,
    pub points: Vec<f64>,
    pub object_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenePairFile {
    pub schema_version: u32,
    pub src: SceneFile,
    #[serde(rename = "ref")]
    pub reference: SceneFile,
    /// `[src node id, ref node id]` pairs.
    pub gt_alignment: Vec<[usize; 2]>,
    /// Row-major 4×4 mapping source coordinates into the reference frame.
    pub gt_transform: Vec<f64>,
    pub overlap_fraction: f64,
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> SceneGraphError {
    SceneGraphError::Parse {
        location: format!("field `{}`", field.into()),
        message: message.into(),
    }
}

impl SceneFile {
    pub fn from_fragment(f: &Fragment) -> Self {
        let g = &f.graph;
        let nodes = g
            .nodes()
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                class: n.class,
                attributes: n.attributes.clone(),
                centroid: [n.centroid.x, n.centroid.y, n.centroid.z],
            })
            .collect();
        let edges = g
            .edges()
            .iter()
            .map(|(&(i, j), &r)| EdgeRecord {
                src: g.node(i).id,
                dst: g.node(j).id,
                relation: r,
            })
            .collect();
        let points = f.cloud.points().iter().flat_map(|p| [p.x, p.y, p.z]).collect();
        let object_ids = f.cloud.object_ids().iter().map(|&o| g.node(o).id).collect();
        Self {
            schema_version: SCHEMA_VERSION,
            nodes,
            edges,
            points,
            object_ids,
        }
    }

    pub fn to_fragment(&self) -> Result<Fragment, SceneGraphError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SceneGraphError::SchemaVersionMismatch {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let width = self.nodes.first().map_or(3, |n| n.attributes.len());
        if width < 3 {
            return Err(field_err("nodes[0].attributes", "needs at least the 3 extent entries"));
        }
        let mut graph = SceneGraph::new(width - 3, NUM_RELATIONS);
        let mut index: HashMap<usize, usize> = HashMap::new();
        for (k, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id, k).is_some() {
                return Err(field_err(format!("nodes[{k}].id"), format!("duplicate node id {}", n.id)));
            }
            graph
                .add_node(SceneNode {
                    id: n.id,
                    class: n.class,
                    attributes: n.attributes.clone(),
                    centroid: Vector3::from(n.centroid),
                })
                .map_err(|e| field_err(format!("nodes[{k}]"), e.to_string()))?;
        }
        let lookup = |field: String, id: usize| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| field_err(field, format!("references missing node id {id}")))
        };
        for (k, e) in self.edges.iter().enumerate() {
            let i = lookup(format!("edges[{k}].src"), e.src)?;
            let j = lookup(format!("edges[{k}].dst"), e.dst)?;
            graph
                .add_edge(i, j, e.relation)
                .map_err(|err| field_err(format!("edges[{k}]"), err.to_string()))?;
        }
        if self.points.len() % 3 != 0 {
            return Err(field_err("points", format!("length {} is not a multiple of 3", self.points.len())));
        }
        if self.points.len() / 3 != self.object_ids.len() {
            return Err(field_err(
                "object_ids",
                format!("length {} does not match {} points", self.object_ids.len(), self.points.len() / 3),
            ));
        }
        let points = self
            .points
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect();
        let labels = self
            .object_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| lookup(format!("object_ids[{k}]"), id))
            .collect::<Result<Vec<_>, _>>()?;
        let cloud = PointCloud::new(points, labels).map_err(|e| field_err("points", e.to_string()))?;
        Ok(Fragment { graph, cloud })
    }
}

impl ScenePairFile {
    pub fn from_pair(p: &ScenePair) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            src: SceneFile::from_fragment(&p.src),
            reference: SceneFile::from_fragment(&p.reference),
            gt_alignment: p
                .gt_alignment
                .iter()
                .map(|&(s, r)| [p.src.graph.node(s).id, p.reference.graph.node(r).id])
                .collect(),
            gt_transform: p.gt_transform.to_row_major().to_vec(),
            overlap_fraction: p.overlap_fraction,
        }
    }

    pub fn to_pair(&self) -> Result<ScenePair, SceneGraphError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(SceneGraphError::SchemaVersionMismatch {
                found: self.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let src = self.src.to_fragment()?;
        let reference = self.reference.to_fragment()?;
        let find = |g: &SceneGraph, id: usize, field: String| {
            g.nodes()
                .iter()
                .position(|n| n.id == id)
                .ok_or_else(|| field_err(field, format!("references missing node id {id}")))
        };
        let gt_alignment = self
            .gt_alignment
            .iter()
            .enumerate()
            .map(|(k, &[s, r])| {
                Ok((
                    find(&src.graph, s, format!("gt_alignment[{k}][0]"))?,
                    find(&reference.graph, r, format!("gt_alignment[{k}][1]"))?,
                ))
            })
            .collect::<Result<Vec<_>, SceneGraphError>>()?;
        let gt_transform = RigidTransform::from_row_major(&self.gt_transform)
            .map_err(|e| field_err("gt_transform", e.to_string()))?;
        ScenePair::new(src, reference, gt_alignment, gt_transform, self.overlap_fraction)
    }
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, SceneGraphError> {
    serde_json::from_str(text).map_err(|e| SceneGraphError::Parse {
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

fn peek_version(text: &str) -> Option<u32> {
    #[derive(Deserialize)]
    struct Version {
        schema_version: u32,
    }
    serde_json::from_str::<Version>(text).ok().map(|v| v.schema_version)
}

fn check_version(text: &str) -> Result<(), SceneGraphError> {
    match peek_version(text) {
        Some(v) if v != SCHEMA_VERSION => Err(SceneGraphError::SchemaVersionMismatch {
            found: v,
            expected: SCHEMA_VERSION,
        }),
        _ => Ok(()),
    }
}

/// Writes `contents` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn scene_to_json(f: &Fragment) -> String {
    serde_json::to_string(&SceneFile::from_fragment(f)).expect("scene serializes")
}

pub fn scene_from_json(text: &str) -> Result<Fragment, SceneGraphError> {
    check_version(text)?;
    parse_json::<SceneFile>(text)?.to_fragment()
}

pub fn save_scene(path: &Path, f: &Fragment) -> Result<(), SceneGraphError> {
    write_atomic(path, scene_to_json(f).as_bytes()).map_err(|e| SceneGraphError::Io(e.to_string()))
}

pub fn load_scene(path: &Path) -> Result<Fragment, SceneGraphError> {
    let text = fs::read_to_string(path).map_err(|e| SceneGraphError::Io(format!("{}: {e}", path.display())))?;
    scene_from_json(&text)
}

pub fn pair_to_json(p: &ScenePair) -> String {
    serde_json::to_string(&ScenePairFile::from_pair(p)).expect("pair serializes")
}

pub fn pair_from_json(text: &str) -> Result<ScenePair, SceneGraphError> {
    check_version(text)?;
    parse_json::<ScenePairFile>(text)?.to_pair()
}

pub fn save_pair(path: &Path, p: &ScenePair) -> Result<(), SceneGraphError> {
    write_atomic(path, pair_to_json(p).as_bytes()).map_err(|e| SceneGraphError::Io(e.to_string()))
}

pub fn load_pair(path: &Path) -> Result<ScenePair, SceneGraphError> {
    let text = fs::read_to_string(path).map_err(|e| SceneGraphError::Io(format!("{}: {e}", path.display())))?;
    pair_from_json(&text)
}
