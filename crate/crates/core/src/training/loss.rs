use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{TrainError, Var};

/// Added inside the log of the matching loss.
pub const LOG_EPS: f64 = 1e-12;

/// Default weight of the similarity loss.
pub const DEFAULT_ALPHA: f64 = 10.0;

/// Losses of one batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_s: f64,
    pub l_k: f64,
    pub l: f64,
    pub alpha: f64,
}

/// Sparse negative cross-entropy over the ground-truth cells of the soft
/// matrix.
pub fn matching_loss(soft: &DMatrix<f64>, gt: &[(usize, usize)]) -> Result<f64, TrainError> {
    check_cells(soft.shape(), gt)?;
    let total: f64 = gt.iter().map(|&c| (soft[c] + LOG_EPS).ln()).sum();
    Ok(-total / gt.len() as f64)
}

/// Recorded matching loss.
pub fn matching_loss_on<'t>(soft: &Var<'t>, gt: &[(usize, usize)]) -> Result<Var<'t>, TrainError> {
    check_cells(soft.shape(), gt)?;
    Ok(soft.gather_elems(gt).add_const(LOG_EPS).log().mean().scale(-1.0))
}

fn check_cells(shape: (usize, usize), gt: &[(usize, usize)]) -> Result<(), TrainError> {
    if gt.is_empty() {
        return Err(TrainError::EmptyGroundTruth);
    }
    if let Some(&c) = gt.iter().find(|&&(i, j)| i >= shape.0 || j >= shape.1) {
        return Err(TrainError::CellOutOfRange { cell: c, shape });
    }
    Ok(())
}

/// Target similarity `k = |S| / min(M_src, M_ref)`.
pub fn target_similarity(n_gt: usize, m_src: usize, m_ref: usize) -> f64 {
    let m = m_src.min(m_ref);
    if m == 0 {
        0.0
    } else {
        n_gt as f64 / m as f64
    }
}

/// Squared error between target and predicted similarity.
pub fn similarity_loss(k_tilde: f64, n_gt: usize, m_src: usize, m_ref: usize) -> f64 {
    let d = target_similarity(n_gt, m_src, m_ref) - k_tilde;
    d * d
}

pub fn similarity_loss_on<'t>(k_tilde: &Var<'t>, n_gt: usize, m_src: usize, m_ref: usize) -> Var<'t> {
    k_tilde.add_const(-target_similarity(n_gt, m_src, m_ref)).powf(2.0)
}

/// Batch mean of `L_s + α·L_k`.
pub fn total_loss(batch: &[(f64, f64)], alpha: f64) -> Result<LossReport, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let l_s = batch.iter().map(|b| b.0).sum::<f64>() / n;
    let l_k = batch.iter().map(|b| b.1).sum::<f64>() / n;
    let l = batch.iter().map(|b| b.0 + alpha * b.1).sum::<f64>() / n;
    Ok(LossReport { l_s, l_k, l, alpha })
}
