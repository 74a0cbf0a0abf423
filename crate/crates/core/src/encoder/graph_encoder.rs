use nalgebra::DMatrix;

use super::params::{EncoderConfig, EncoderWeights, GraphAttention, LEAKY_SLOPE};
use super::EncoderError;
use crate::scenegraph::SceneGraph;
use crate::training::{Tape, Var};

/// Edge lists of a graph in the orientation messages travel: from `src`
/// into `dst`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub relation: Vec<usize>,
}

impl EdgeIndex {
    pub fn of(g: &SceneGraph) -> Self {
        let mut e = EdgeIndex { src: vec![], dst: vec![], relation: vec![] };
        for (&(i, j), &r) in g.edges() {
            e.src.push(i);
            e.dst.push(j);
            e.relation.push(r);
        }
        e
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

pub(crate) fn check_graph(g: &SceneGraph, cfg: &EncoderConfig) -> Result<(), EncoderError> {
    if !g.is_empty() && g.attribute_dim() != cfg.attribute_dim() {
        return Err(EncoderError::DimensionMismatch {
            what: "node attributes",
            expected: cfg.attribute_dim(),
            found: g.attribute_dim(),
        });
    }
    if g.num_relations() != cfg.num_relations {
        return Err(EncoderError::DimensionMismatch {
            what: "relation vocabulary",
            expected: cfg.num_relations,
            found: g.num_relations(),
        });
    }
    Ok(())
}

fn attention_layer<'t>(
    layer: &GraphAttention<Var<'t>>,
    h: &Var<'t>,
    e: Option<&Var<'t>>,
    edges: &EdgeIndex,
) -> Var<'t> {
    let m = h.shape().0;
    let base = h.matmul(&layer.w_self).add(&layer.bias);
    let pre = match e {
        Some(e) => {
            let h_dst = h.gather_rows(&edges.dst);
            let h_src = h.gather_rows(&edges.src);
            let score = h_dst
                .matmul(&layer.w_dst)
                .add(&h_src.matmul(&layer.w_src))
                .add(&e.matmul(&layer.w_edge))
                .leaky_relu(LEAKY_SLOPE)
                .matmul(&layer.attn);
            let alpha = score.segment_softmax(&edges.dst);
            let message = h_src
                .matmul(&layer.w_value)
                .add(&e.matmul(&layer.w_edge_value))
                .mul(&alpha);
            base.add(&message.scatter_add_rows(&edges.dst, m))
        }
        None => base,
    };
    pre.leaky_relu(LEAKY_SLOPE).add(&h.mul(&layer.skip_gate))
}

/// Semantic embeddings F_S (M × d(n+1)) recorded on `tape`.
pub fn encode_graph_on<'t>(
    tape: &'t Tape,
    g: &SceneGraph,
    w: &EncoderWeights<Var<'t>>,
    cfg: &EncoderConfig,
) -> Result<Var<'t>, EncoderError> {
    check_graph(g, cfg)?;
    let x = tape.constant(g.attribute_matrix());
    let h0 = w.node_mlp.forward(&x);
    let edges = EdgeIndex::of(g);
    let e = (!edges.is_empty()).then(|| {
        let onehot = DMatrix::from_fn(edges.len(), cfg.num_relations, |k, r| {
            if edges.relation[k] == r {
                1.0
            } else {
                0.0
            }
        });
        w.edge_mlp.forward(&tape.constant(onehot))
    });
    let mut outputs = vec![h0];
    for layer in &w.layers {
        let next = attention_layer(layer, outputs.last().expect("non-empty"), e.as_ref(), &edges);
        outputs.push(next);
    }
    Ok(Var::hcat(&outputs))
}

/// Semantic embeddings F_S of a scene graph.
pub fn encode_scene_graph(
    g: &SceneGraph,
    params: &EncoderWeights<DMatrix<f64>>,
    cfg: &EncoderConfig,
) -> Result<DMatrix<f64>, EncoderError> {
    let tape = Tape::new();
    let w = params.map("", &mut |_, m| tape.constant(m.clone()));
    Ok(encode_graph_on(&tape, g, &w, cfg)?.value())
}
