//! Partial matching head: affinity, dummy-augmented Sinkhorn, similarity
//! score k̃ and top-K selection.

mod ops;
mod params;
mod sinkhorn;

pub use ops::{
    affinity, afa_on, afa_similarity, agreement_on, bilinear_affinity_on, instance_norm_on, match_on, selection_size,
    sinkhorn_on, sinkhorn_with_dummy, topk_select, INSTANCE_NORM_EPS,
};
pub use sinkhorn::{marginal_error, SINKHORN_TOL};
pub use params::{AfaHead, MatcherConfig, MatcherParams, MatcherWeights, AFA_PRIOR_GAIN};

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{embed, embed_on, EncoderConfig, EncoderError, EncoderParams, EncoderWeights, PreparedFragment};
use crate::scenegraph::{ScenePair, SceneGraphError};
use crate::training::{Tape, Var};

#[derive(Debug, Error)]
pub enum MatcherError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid matcher config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Scene(#[from] SceneGraphError),
}

/// Result of aligning a source graph against a reference graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftAlignment {
    /// `(M_src+1) × (M_ref+1)`, dummy row and column last.
    pub soft_matrix: DMatrix<f64>,
    pub similarity: f64,
    /// `(src node, ref node, score)`, row- and column-disjoint.
    pub selected_pairs: Vec<(usize, usize, f64)>,
}

impl SoftAlignment {
    pub fn m_src(&self) -> usize {
        self.soft_matrix.nrows() - 1
    }

    pub fn m_ref(&self) -> usize {
        self.soft_matrix.ncols() - 1
    }

    /// Mean score of the selected pairs, 0 when nothing is selected.
    pub fn mean_selected_score(&self) -> f64 {
        if self.selected_pairs.is_empty() {
            0.0
        } else {
            self.selected_pairs.iter().map(|p| p.2).sum::<f64>() / self.selected_pairs.len() as f64
        }
    }

    /// Interior of S̃ (`M_src × M_ref`).
    pub fn interior(&self) -> DMatrix<f64> {
        self.soft_matrix.view((0, 0), (self.m_src(), self.m_ref())).into_owned()
    }

    /// Ranked reference candidates of every source node, best first; ties go
    /// to the smaller index.
    pub fn rankings(&self) -> Vec<Vec<usize>> {
        (0..self.m_src())
            .map(|i| {
                let mut js: Vec<usize> = (0..self.m_ref()).collect();
                js.sort_by(|&a, &b| self.soft_matrix[(i, b)].total_cmp(&self.soft_matrix[(i, a)]).then(a.cmp(&b)));
                js
            })
            .collect()
    }

    /// Serializable form, with node ids in place of indices.
    pub fn to_file(&self, src_ids: &[usize], ref_ids: &[usize], include_soft: bool) -> AlignmentFile {
        AlignmentFile {
            pairs: self
                .selected_pairs
                .iter()
                .map(|&(i, j, s)| PairRecord {
                    src: src_ids[i],
                    reference: ref_ids[j],
                    score: s,
                })
                .collect(),
            k_tilde: self.similarity,
            soft_matrix: include_soft.then(|| {
                self.soft_matrix
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect()
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairRecord {
    pub src: usize,
    #[serde(rename = "ref")]
    pub reference: usize,
    pub score: f64,
}

/// Alignment result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentFile {
    pub pairs: Vec<PairRecord>,
    pub k_tilde: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft_matrix: Option<Vec<Vec<f64>>>,
}

impl AlignmentFile {
    pub fn save(&self, path: &Path) -> Result<(), SceneGraphError> {
        let json = serde_json::to_vec_pretty(self).map_err(|e| SceneGraphError::Parse {
            location: "alignment".into(),
            message: e.to_string(),
        })?;
        crate::scenegraph::io::write_atomic(path, &json).map_err(|e| SceneGraphError::Io(e.to_string()))
    }
}

/// Recorded forward pass from prepared fragments to `(S̃, k̃)`.
#[allow(clippy::too_many_arguments)]
pub fn forward_on<'t>(
    tape: &'t Tape,
    src: &PreparedFragment,
    reference: &PreparedFragment,
    enc: &EncoderWeights<Var<'t>>,
    w: &MatcherWeights<Var<'t>>,
    enc_cfg: &EncoderConfig,
    cfg: &MatcherConfig,
    iters: usize,
) -> Result<(Var<'t>, Var<'t>), MatcherError> {
    let (fs_src, fp_src) = embed_on(tape, src, enc, enc_cfg)?;
    let (fs_ref, fp_ref) = embed_on(tape, reference, enc, enc_cfg)?;
    let width = fs_src.shape().1;
    if w.w_s.shape().0 != width {
        return Err(MatcherError::DimensionMismatch {
            what: "semantic width",
            expected: w.w_s.shape().0,
            found: width,
        });
    }
    if let (Some(wp), Some(fp)) = (&w.w_p, &fp_src) {
        if wp.shape().0 != fp.shape().1 {
            return Err(MatcherError::DimensionMismatch {
                what: "geometric width",
                expected: wp.shape().0,
                found: fp.shape().1,
            });
        }
    }
    Ok(match_on(&fs_src, fp_src.as_ref(), &fs_ref, fp_ref.as_ref(), w, cfg, iters))
}

/// Alignment of two prepared fragments.
pub fn align_prepared(
    src: &PreparedFragment,
    reference: &PreparedFragment,
    enc_cfg: &EncoderConfig,
    enc: &EncoderParams,
    cfg: &MatcherConfig,
    params: &MatcherParams,
) -> Result<SoftAlignment, MatcherError> {
    cfg.validate()?;
    let f_src = embed(src, enc, enc_cfg)?;
    let f_ref = embed(reference, enc, enc_cfg)?;
    let a = affinity(&f_ref, &f_src, params)?;
    let soft_matrix = sinkhorn_with_dummy(&a.transpose(), cfg);
    let similarity = afa_similarity(&soft_matrix, &f_src.fused, &f_ref.fused, cfg, params)?;
    let selected_pairs = topk_select(&soft_matrix, similarity, reference.len());
    Ok(SoftAlignment {
        soft_matrix,
        similarity,
        selected_pairs,
    })
}

/// End-to-end alignment of a scene pair.
pub fn align(
    pair: &ScenePair,
    enc_cfg: &EncoderConfig,
    enc: &EncoderParams,
    cfg: &MatcherConfig,
    params: &MatcherParams,
) -> Result<SoftAlignment, MatcherError> {
    pair.validate()?;
    let src = PreparedFragment::new(&pair.src, enc_cfg)?;
    let reference = PreparedFragment::new(&pair.reference, enc_cfg)?;
    align_prepared(&src, &reference, enc_cfg, enc, cfg, params)
}

#[cfg(test)]
mod tests;
