use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{uniform_fan_in, EncoderConfig, Mat, LEAKY_SLOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatcherConfig {
    pub sinkhorn_iters: usize,
    pub temperature: f64,
    /// Hidden width of the similarity head.
    pub afa_hidden: usize,
    /// Squared-distance scale of the embedding agreement seen by the
    /// similarity head.
    pub afa_bandwidth: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            sinkhorn_iters: 100,
            temperature: 0.2,
            afa_hidden: 16,
            afa_bandwidth: 0.03,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<(), super::MatcherError> {
        if self.sinkhorn_iters == 0 || !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(super::MatcherError::InvalidConfig(
                "sinkhorn_iters must be ≥ 1 and temperature > 0".into(),
            ));
        }
        if !(self.afa_bandwidth > 0.0 && self.afa_bandwidth.is_finite()) {
            return Err(super::MatcherError::InvalidConfig("afa_bandwidth must be positive".into()));
        }
        if self.afa_hidden == 0 {
            return Err(super::MatcherError::InvalidConfig("afa_hidden must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Similarity head on the bipartite graph weighted by the interior of S̃.
/// Source nodes carry zero features and reference nodes a one-hot, so a
/// source node's message is built from its row of S̃, plus an edge feature:
/// the agreement of the two nodes' embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct AfaHead<T> {
    /// Value of a unit-weight edge (1 × h).
    pub w_value: T,
    /// Edge-feature term, applied to the squared weight (1 × h).
    pub w_edge: T,
    /// Agreement-weighted edge term (1 × h).
    pub w_agree: T,
    pub bias: T,
    pub w_out: T,
    pub b_out: T,
}

/// Logit gain of the agreement prior built into a fresh head.
pub const AFA_PRIOR_GAIN: f64 = 2.0;

impl AfaHead<Mat> {
    /// Fan-in initialization, except that the first two hidden units start
    /// as a signed count of agreeing mass, `Σ S̃_ij (2a_ij − 1)`, read out
    /// with gain [`AFA_PRIOR_GAIN`] through a ± pair of leaky units.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, hidden: usize) -> Self {
        let mut head = Self {
            w_value: uniform_fan_in(rng, 1, 1, hidden),
            w_edge: uniform_fan_in(rng, 1, 1, hidden),
            w_agree: uniform_fan_in(rng, 1, 1, hidden),
            bias: DMatrix::zeros(1, hidden),
            w_out: uniform_fan_in(rng, hidden, hidden, 1),
            b_out: DMatrix::zeros(1, 1),
        };
        let gain = AFA_PRIOR_GAIN / (1.0 + LEAKY_SLOPE);
        for (h, sign) in [(0, 1.0), (1, -1.0)].into_iter().take(hidden) {
            head.w_value[h] = -sign;
            head.w_edge[h] = 0.0;
            head.w_agree[h] = 2.0 * sign;
            head.w_out[h] = sign * gain;
        }
        head
    }
}

impl<T> AfaHead<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> AfaHead<U> {
        AfaHead {
            w_value: f(&format!("{prefix}.w_value"), &self.w_value),
            w_edge: f(&format!("{prefix}.w_edge"), &self.w_edge),
            w_agree: f(&format!("{prefix}.w_agree"), &self.w_agree),
            bias: f(&format!("{prefix}.bias"), &self.bias),
            w_out: f(&format!("{prefix}.w_out"), &self.w_out),
            b_out: f(&format!("{prefix}.b_out"), &self.b_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherWeights<T> {
    pub w_s: T,
    /// Absent for the semantic-only variant.
    pub w_p: Option<T>,
    pub afa: AfaHead<T>,
}

pub type MatcherParams = MatcherWeights<Mat>;

impl MatcherWeights<Mat> {
    /// `W_s = 0.1·I`, `W_p = 0.1·I`.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, enc: &EncoderConfig, cfg: &MatcherConfig) -> Self {
        Self {
            w_s: DMatrix::identity(enc.d_s(), enc.d_s()) * 0.1,
            w_p: enc.use_geometry.then(|| DMatrix::identity(enc.d_p, enc.d_p) * 0.1),
            afa: AfaHead::init(rng, cfg.afa_hidden),
        }
    }
}

impl<T> MatcherWeights<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(&str, &T) -> U) -> MatcherWeights<U> {
        MatcherWeights {
            w_s: f(&format!("{prefix}w_s"), &self.w_s),
            w_p: self.w_p.as_ref().map(|w| f(&format!("{prefix}w_p"), w)),
            afa: self.afa.map(&format!("{prefix}afa"), f),
        }
    }
}

impl<T: Clone> MatcherWeights<T> {
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.map("", &mut |_, t| out.push(t.clone()));
        out
    }
}
