use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::training::Var;

pub type Mat = DMatrix<f64>;

/// Leaky-ReLU slope used throughout the network.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Symmetric uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`.
pub fn uniform_fan_in<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Architecture of the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_classes: usize,
    pub num_relations: usize,
    /// Base embedding width d.
    pub d: usize,
    /// Number of graph-attention layers n.
    pub n_layers: usize,
    /// Geometric embedding width d_p.
    pub d_p: usize,
    /// Point descriptor width.
    pub descriptor_dim: usize,
    pub knn_k: usize,
    pub descriptor_radius: f64,
    /// Cap on points per object entering the fusion layer.
    pub fusion_points_per_object: usize,
    /// Whether point geometry is fused into the node embeddings.
    pub use_geometry: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            num_relations: crate::scenegraph::NUM_RELATIONS,
            d: 16,
            n_layers: 2,
            d_p: 32,
            descriptor_dim: super::DESCRIPTOR_DIM,
            knn_k: 8,
            descriptor_radius: 0.3,
            fusion_points_per_object: 32,
            use_geometry: true,
        }
    }
}

impl EncoderConfig {
    pub fn attribute_dim(&self) -> usize {
        self.num_classes + 3
    }

    /// Semantic width d_s = d(n+1).
    pub fn d_s(&self) -> usize {
        self.d * (self.n_layers + 1)
    }

    /// Width of the geometric block, zero without fusion.
    pub fn geometric_width(&self) -> usize {
        if self.use_geometry {
            self.d_p
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

impl Linear<Mat> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: uniform_fan_in(rng, fan_in, fan_in, fan_out),
            bias: uniform_fan_in(rng, fan_in, 1, fan_out),
        }
    }
}

impl<T> Linear<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Linear<U> {
        Linear {
            weight: f(&format!("{prefix}.weight"), &self.weight),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

impl<'t> Linear<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Var<'t> {
        x.matmul(&self.weight).add(&self.bias)
    }
}

/// Two-layer perceptron with a leaky-ReLU between the layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub first: Linear<T>,
    pub second: Linear<T>,
}

impl Mlp<Mat> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, width: usize) -> Self {
        Self {
            first: Linear::init(rng, fan_in, width),
            second: Linear::init(rng, width, width),
        }
    }
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> Mlp<U> {
        Mlp {
            first: self.first.map(&format!("{prefix}.first"), f),
            second: self.second.map(&format!("{prefix}.second"), f),
        }
    }
}

impl<'t> Mlp<Var<'t>> {
    pub fn forward(&self, x: &Var<'t>) -> Var<'t> {
        self.second.forward(&self.first.forward(x).leaky_relu(LEAKY_SLOPE))
    }
}

/// One GATv2-style layer with edge features and a learnable skip gate.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphAttention<T> {
    pub w_dst: T,
    pub w_src: T,
    pub w_edge: T,
    pub attn: T,
    pub w_self: T,
    pub w_value: T,
    pub w_edge_value: T,
    pub bias: T,
    pub skip_gate: T,
}

impl GraphAttention<Mat> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d: usize) -> Self {
        Self {
            w_dst: uniform_fan_in(rng, d, d, d),
            w_src: uniform_fan_in(rng, d, d, d),
            w_edge: uniform_fan_in(rng, d, d, d),
            attn: uniform_fan_in(rng, d, d, 1),
            w_self: uniform_fan_in(rng, d, d, d),
            w_value: uniform_fan_in(rng, d, d, d),
            w_edge_value: uniform_fan_in(rng, d, d, d),
            bias: DMatrix::zeros(1, d),
            skip_gate: DMatrix::from_element(1, 1, 1.0),
        }
    }
}

impl<T> GraphAttention<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> GraphAttention<U> {
        GraphAttention {
            w_dst: f(&format!("{prefix}.w_dst"), &self.w_dst),
            w_src: f(&format!("{prefix}.w_src"), &self.w_src),
            w_edge: f(&format!("{prefix}.w_edge"), &self.w_edge),
            attn: f(&format!("{prefix}.attn"), &self.attn),
            w_self: f(&format!("{prefix}.w_self"), &self.w_self),
            w_value: f(&format!("{prefix}.w_value"), &self.w_value),
            w_edge_value: f(&format!("{prefix}.w_edge_value"), &self.w_edge_value),
            bias: f(&format!("{prefix}.bias"), &self.bias),
            skip_gate: f(&format!("{prefix}.skip_gate"), &self.skip_gate),
        }
    }
}

/// Attention over a point k-NN graph, with the neighbor distance as the
/// edge feature.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAttention<T> {
    pub w_dst: T,
    pub w_src: T,
    pub w_dist: T,
    pub attn: T,
    pub w_self: T,
    pub w_value: T,
    pub bias: T,
}

impl PointAttention<Mat> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, d_in: usize, d_out: usize) -> Self {
        Self {
            w_dst: uniform_fan_in(rng, d_in, d_in, d_out),
            w_src: uniform_fan_in(rng, d_in, d_in, d_out),
            w_dist: uniform_fan_in(rng, 1, 1, d_out),
            attn: uniform_fan_in(rng, d_out, d_out, 1),
            w_self: uniform_fan_in(rng, d_in, d_in, d_out),
            w_value: uniform_fan_in(rng, d_in, d_in, d_out),
            bias: DMatrix::zeros(1, d_out),
        }
    }
}

impl<T> PointAttention<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> PointAttention<U> {
        PointAttention {
            w_dst: f(&format!("{prefix}.w_dst"), &self.w_dst),
            w_src: f(&format!("{prefix}.w_src"), &self.w_src),
            w_dist: f(&format!("{prefix}.w_dist"), &self.w_dist),
            attn: f(&format!("{prefix}.attn"), &self.attn),
            w_self: f(&format!("{prefix}.w_self"), &self.w_self),
            w_value: f(&format!("{prefix}.w_value"), &self.w_value),
            bias: f(&format!("{prefix}.bias"), &self.bias),
        }
    }
}

/// All encoder weights, generic over the tensor type so that the same
/// structure holds stored matrices and tape-bound variables.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights<T> {
    pub node_mlp: Mlp<T>,
    pub edge_mlp: Mlp<T>,
    pub layers: Vec<GraphAttention<T>>,
    pub fusion: Option<PointAttention<T>>,
}

/// Stored encoder parameters.
pub type EncoderParams = EncoderWeights<Mat>;

impl EncoderWeights<Mat> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        Self {
            node_mlp: Mlp::init(rng, cfg.attribute_dim(), cfg.d),
            edge_mlp: Mlp::init(rng, cfg.num_relations, cfg.d),
            layers: (0..cfg.n_layers).map(|_| GraphAttention::init(rng, cfg.d)).collect(),
            fusion: cfg
                .use_geometry
                .then(|| PointAttention::init(rng, cfg.descriptor_dim, cfg.d_p)),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.flatten().iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

impl<T> EncoderWeights<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> EncoderWeights<U> {
        EncoderWeights {
            node_mlp: self.node_mlp.map(&format!("{prefix}node_mlp"), f),
            edge_mlp: self.edge_mlp.map(&format!("{prefix}edge_mlp"), f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(l, g)| g.map(&format!("{prefix}layers.{l}"), f))
                .collect(),
            fusion: self.fusion.as_ref().map(|p| p.map(&format!("{prefix}fusion"), f)),
        }
    }
}

impl<T: Clone> EncoderWeights<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.map("", &mut |_, t| out.push(t.clone()));
        out
    }
}
