use nalgebra::DMatrix;

use super::descriptors::point_descriptors;
use super::graph_encoder::{check_graph, encode_graph_on};
use super::params::{EncoderConfig, EncoderWeights, PointAttention, LEAKY_SLOPE};
use super::EncoderError;
use crate::geometry::{knn_edges, PointCloud};
use crate::scenegraph::{Fragment, SceneGraph};
use crate::training::{Tape, Var};

/// Per-node embeddings of one scene graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeEmbeddings {
    /// F_S, M × d_s.
    pub semantic: DMatrix<f64>,
    /// F_P, M × d_p (zero columns without fusion).
    pub geometric: DMatrix<f64>,
    /// F_{S+P} = [F_S ‖ F_P].
    pub fused: DMatrix<f64>,
}

/// Point-level inputs of the fusion layer: descriptors, the k-NN graph and
/// neighbor distances of a (possibly subsampled) labeled cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct PointGraph {
    pub descriptors: DMatrix<f64>,
    pub object_ids: Vec<usize>,
    pub num_objects: usize,
    /// Aggregating point of each edge.
    pub dst: Vec<usize>,
    /// Neighbor point of each edge.
    pub src: Vec<usize>,
    /// Edge lengths, E × 1.
    pub dist: DMatrix<f64>,
}

impl PointGraph {
    pub fn build(
        descriptors: DMatrix<f64>,
        cloud: &PointCloud,
        num_objects: usize,
        knn_k: usize,
    ) -> Result<Self, EncoderError> {
        if descriptors.nrows() != cloud.len() {
            return Err(EncoderError::DimensionMismatch {
                what: "descriptor rows",
                expected: cloud.len(),
                found: descriptors.nrows(),
            });
        }
        let mut counts = vec![0usize; num_objects];
        for &o in cloud.object_ids() {
            if o >= num_objects {
                return Err(EncoderError::DimensionMismatch {
                    what: "object id",
                    expected: num_objects,
                    found: o,
                });
            }
            counts[o] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(EncoderError::EmptyObject(empty));
        }
        let k = knn_k.min(cloud.len().saturating_sub(1));
        let edges = if k == 0 { Vec::new() } else { knn_edges(cloud, k).expect("k < n") };
        let pts = cloud.points();
        Ok(Self {
            descriptors,
            object_ids: cloud.object_ids().to_vec(),
            num_objects,
            dst: edges.iter().map(|e| e.0).collect(),
            src: edges.iter().map(|e| e.1).collect(),
            dist: DMatrix::from_fn(edges.len(), 1, |k, _| (pts[edges[k].0] - pts[edges[k].1]).norm()),
        })
    }
}

/// F_P (M × d_p): one attention layer over the point k-NN graph followed by
/// per-object max pooling.
pub fn fuse_on<'t>(tape: &'t Tape, pg: &PointGraph, w: &PointAttention<Var<'t>>) -> Var<'t> {
    let d = tape.constant(pg.descriptors.clone());
    let n = pg.descriptors.nrows();
    let mut pre = d.matmul(&w.w_self).add(&w.bias);
    if !pg.dst.is_empty() {
        let d_dst = d.gather_rows(&pg.dst);
        let d_src = d.gather_rows(&pg.src);
        let dist = tape.constant(pg.dist.clone());
        let score = d_dst
            .matmul(&w.w_dst)
            .add(&d_src.matmul(&w.w_src))
            .add(&dist.matmul(&w.w_dist))
            .leaky_relu(LEAKY_SLOPE)
            .matmul(&w.attn);
        let alpha = score.segment_softmax(&pg.dst);
        let message = d_src.matmul(&w.w_value).mul(&alpha);
        pre = pre.add(&message.scatter_add_rows(&pg.dst, n));
    }
    pre.leaky_relu(LEAKY_SLOPE).segment_max(&pg.object_ids, pg.num_objects)
}

/// Fuses point descriptors into node embeddings: attention over the k-NN
/// graph, max pooling per object, then `[F_S ‖ F_P]`.
pub fn p2sg_fuse(
    f_p: &DMatrix<f64>,
    p: &PointCloud,
    knn_k: usize,
    params: &EncoderWeights<DMatrix<f64>>,
    f_s: &DMatrix<f64>,
) -> Result<NodeEmbeddings, EncoderError> {
    let fusion = params.fusion.as_ref().ok_or(EncoderError::MissingFusion)?;
    let pg = PointGraph::build(f_p.clone(), p, f_s.nrows(), knn_k)?;
    if f_p.ncols() != fusion.w_self.nrows() {
        return Err(EncoderError::DimensionMismatch {
            what: "descriptor width",
            expected: fusion.w_self.nrows(),
            found: f_p.ncols(),
        });
    }
    let tape = Tape::new();
    let w = fusion.map("", &mut |_, m| tape.constant(m.clone()));
    let geometric = fuse_on(&tape, &pg, &w).value();
    Ok(NodeEmbeddings::new(f_s.clone(), geometric))
}

impl NodeEmbeddings {
    pub fn new(semantic: DMatrix<f64>, geometric: DMatrix<f64>) -> Self {
        let m = semantic.nrows();
        let mut fused = DMatrix::zeros(m, semantic.ncols() + geometric.ncols());
        fused.columns_mut(0, semantic.ncols()).copy_from(&semantic);
        fused.columns_mut(semantic.ncols(), geometric.ncols()).copy_from(&geometric);
        Self { semantic, geometric, fused }
    }
}

/// A fragment with everything the encoder needs precomputed: the graph and
/// the subsampled point graph.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedFragment {
    pub graph: SceneGraph,
    pub points: Option<PointGraph>,
}

/// Evenly spaced subset of at most `cap` points per object, in cloud order.
pub fn subsample_per_object(cloud: &PointCloud, num_objects: usize, cap: usize) -> Vec<usize> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_objects];
    for (i, &o) in cloud.object_ids().iter().enumerate() {
        if o < num_objects {
            members[o].push(i);
        }
    }
    let mut keep: Vec<usize> = members
        .iter()
        .flat_map(|m| {
            let take = m.len().min(cap);
            (0..take).map(move |k| m[k * m.len() / take.max(1)])
        })
        .collect();
    keep.sort_unstable();
    keep
}

impl PreparedFragment {
    pub fn new(f: &Fragment, cfg: &EncoderConfig) -> Result<Self, EncoderError> {
        check_graph(&f.graph, cfg)?;
        let points = if cfg.use_geometry {
            let descriptors = match f.cloud.descriptors() {
                Some(d) if d.ncols() == cfg.descriptor_dim => d.clone(),
                _ => point_descriptors(&f.cloud, cfg.descriptor_radius, true),
            };
            let keep = subsample_per_object(&f.cloud, f.graph.len(), cfg.fusion_points_per_object);
            let sub = f.cloud.select(&keep);
            Some(PointGraph::build(descriptors.select_rows(&keep), &sub, f.graph.len(), cfg.knn_k)?)
        } else {
            None
        };
        Ok(Self { graph: f.graph.clone(), points })
    }

    pub fn len(&self) -> usize {
        self.graph.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graph.is_empty()
    }
}

/// Recorded `(F_S, F_P)` of a prepared fragment.
pub fn embed_on<'t>(
    tape: &'t Tape,
    f: &PreparedFragment,
    w: &EncoderWeights<Var<'t>>,
    cfg: &EncoderConfig,
) -> Result<(Var<'t>, Option<Var<'t>>), EncoderError> {
    let fs = encode_graph_on(tape, &f.graph, w, cfg)?;
    let fp = match (&w.fusion, &f.points) {
        (Some(fw), Some(pg)) => Some(fuse_on(tape, pg, fw)),
        (None, _) => None,
        (Some(_), None) => return Err(EncoderError::MissingFusion),
    };
    Ok((fs, fp))
}

/// Node embeddings of a prepared fragment.
pub fn embed(f: &PreparedFragment, params: &EncoderWeights<DMatrix<f64>>, cfg: &EncoderConfig) -> Result<NodeEmbeddings, EncoderError> {
    let tape = Tape::new();
    let w = params.map("", &mut |_, m| tape.constant(m.clone()));
    let (fs, fp) = embed_on(&tape, f, &w, cfg)?;
    let fp = fp.map_or_else(|| DMatrix::zeros(fs.shape().0, 0), |v| v.value());
    Ok(NodeEmbeddings::new(fs.value(), fp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{encode_scene_graph, EncoderParams};
    use crate::geometry::{apply_transform, RigidTransform};
    use crate::scenegraph::{generate_scene_pair, GeneratorConfig, ScenePreset};
    use nalgebra::Vector3;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> (EncoderConfig, EncoderParams) {
        let cfg = EncoderConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(&mut rng, &cfg);
        (cfg, p)
    }

    #[test]
    fn identical_descriptors_pool_to_shared_row() {
        let (cfg, p) = params();
        let pts = vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::new(5.0, 5.0, 0.0), Vector3::new(5.0, 6.0, 0.0)];
        let cloud = PointCloud::new(pts, vec![0, 0, 0, 1, 1]).unwrap();
        let mut desc = DMatrix::zeros(5, 32);
        desc.row_mut(0).fill(0.3);
        desc.row_mut(1).fill(0.3);
        desc.row_mut(2).fill(0.3);
        let fs = DMatrix::zeros(2, cfg.d_s());
        let out = p2sg_fuse(&desc, &cloud, 0, &p, &fs).unwrap();
        let w = p.fusion.as_ref().unwrap();
        let expect = (desc.rows(0, 1) * &w.w_self + &w.bias).map(|v| if v > 0.0 { v } else { 0.2 * v });
        assert!((out.geometric.row(0) - expect.row(0)).amax() < 1e-12);
    }

    #[test]
    fn point_permutation_and_rigid_motion_invariance() {
        let (cfg, p) = params();
        let pair = generate_scene_pair(&GeneratorConfig { points_per_object: (20, 30), ..Default::default() }, 2).unwrap();
        let f = &pair.src;
        let fs = encode_scene_graph(&f.graph, &p, &cfg).unwrap();
        let desc = point_descriptors(&f.cloud, 0.3, true);
        let base = p2sg_fuse(&desc, &f.cloud, 8, &p, &fs).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut perm: Vec<usize> = (0..f.cloud.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = f.cloud.select(&perm);
        let out = p2sg_fuse(&desc.select_rows(&perm), &shuffled, 8, &p, &fs).unwrap();
        assert!((out.geometric - &base.geometric).amax() < 1e-9);

        let t = RigidTransform::random(&mut rng, 180.0, 3.0);
        let moved = apply_transform(&t, &f.cloud);
        let out = p2sg_fuse(&point_descriptors(&moved, 0.3, true), &moved, 8, &p, &fs).unwrap();
        assert!((out.geometric - &base.geometric).amax() < 1e-6);
    }

    #[test]
    fn symmetric_nodes_split_by_geometry() {
        let (cfg, p) = params();
        let gen = GeneratorConfig {
            preset: ScenePreset::SymmetricStress,
            overlap: (1.0, 1.0),
            nodes_per_fragment: (6, 7),
            ..Default::default()
        };
        let pair = generate_scene_pair(&gen, 8).unwrap();
        let f = &pair.src;
        let prepared = PreparedFragment::new(f, &cfg).unwrap();
        let emb = embed(&prepared, &p, &cfg).unwrap();
        let g = &f.graph;
        let twins: Vec<usize> = (0..g.len())
            .filter(|&i| (0..g.len()).filter(|&j| g.node(j).attributes == g.node(i).attributes).count() == 3)
            .collect();
        assert_eq!(twins.len(), 3);
        let (a, b) = (twins[0], twins[1]);
        assert!((emb.semantic.row(a) - emb.semantic.row(b)).amax() < 1e-9);
        assert!((emb.fused.row(a) - emb.fused.row(b)).amax() >= 1e-3);
    }

    #[test]
    fn empty_object_is_rejected() {
        let cloud = PointCloud::new(vec![Vector3::zeros(), Vector3::x()], vec![0, 0]).unwrap();
        let err = PointGraph::build(DMatrix::zeros(2, 32), &cloud, 2, 1).unwrap_err();
        assert_eq!(err, EncoderError::EmptyObject(1));
    }
}
