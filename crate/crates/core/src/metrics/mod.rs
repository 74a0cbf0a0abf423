//! Evaluation metrics for matching, overlap checking, registration and
//! mosaicking.

mod eval;

pub use eval::{bucket_of, summarize, write_csv, BucketSummary, EvalRow, OVERLAP_BUCKETS};

use nalgebra::{DMatrix, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{KdTree, PointCloud, RigidTransform};
use crate::matcher::SoftAlignment;
use crate::registration::CorrespondenceSet;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    EmptyInput,
    #[error("rank must be ≥ 1, found {0}")]
    InvalidRank(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("empty correspondence set")]
    EmptyCorrespondences,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("index {index} out of range for {what} of length {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricThresholds {
    /// RMSE threshold for a registered pair (m).
    pub tau1: f64,
    /// Inlier distance (m).
    pub tau2: f64,
    /// Inlier-ratio threshold for feature-matching recall.
    pub tau3: f64,
    pub mosaic_dist: f64,
    pub overlap_mu: f64,
    pub overlap_mu3: f64,
}

impl Default for MetricThresholds {
    fn default() -> Self {
        Self {
            tau1: 0.2,
            tau2: 0.1,
            tau3: 0.05,
            mosaic_dist: 0.05,
            overlap_mu: 0.375,
            overlap_mu3: 0.45,
        }
    }
}

impl MetricThresholds {
    pub fn validate(&self) -> Result<(), MetricsError> {
        let positive = [self.tau1, self.tau2, self.mosaic_dist];
        let ratios = [self.tau3, self.overlap_mu, self.overlap_mu3];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || ratios.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
            return Err(MetricsError::InvalidThresholds(format!("{self:?}")));
        }
        Ok(())
    }
}

fn check_ranks(ranks: &[usize]) -> Result<(), MetricsError> {
    if ranks.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    match ranks.iter().find(|&&r| r == 0) {
        Some(&r) => Err(MetricsError::InvalidRank(r)),
        None => Ok(()),
    }
}

/// Fraction of 1-based ranks that are `≤ k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64, MetricsError> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

pub fn mean_reciprocal_rank(ranks: &[usize]) -> Result<f64, MetricsError> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// 1-based rank of the true reference node in its source node's row of S̃,
/// for every ground-truth pair `(src, ref)`. Ties rank the smaller index first.
pub fn alignment_ranks(alignment: &SoftAlignment, gt: &[(usize, usize)]) -> Vec<usize> {
    let s = &alignment.soft_matrix;
    gt.iter()
        .map(|&(i, j)| {
            let v = s[(i, j)];
            1 + (0..alignment.m_ref())
                .filter(|&k| s[(i, k)] > v || (s[(i, k)] == v && k < j))
                .count()
        })
        .collect()
}

/// 0/1 matrix `rows × cols` with ones at the listed cells.
pub fn hard_matrix(pairs: impl IntoIterator<Item = (usize, usize)>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for (i, j) in pairs {
        m[(i, j)] = 1.0;
    }
    m
}

/// F1 of a binary predicted matching against a binary ground truth.
pub fn matching_f1(pred: &DMatrix<f64>, gt: &DMatrix<f64>) -> Result<f64, MetricsError> {
    if pred.shape() != gt.shape() {
        return Err(MetricsError::ShapeMismatch(pred.shape(), gt.shape()));
    }
    let tp = pred.component_mul(gt).sum();
    let fp = pred.component_mul(&gt.map(|v| 1.0 - v)).sum();
    let fn_ = pred.map(|v| 1.0 - v).component_mul(gt).sum();
    let denom = 2.0 * tp + fp + fn_;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1 with `true` as the positive class. Empty
/// denominators give 0.
pub fn binary_scores(pred: &[bool], truth: &[bool]) -> Result<BinaryScores, MetricsError> {
    if pred.len() != truth.len() {
        return Err(MetricsError::ShapeMismatch((pred.len(), 1), (truth.len(), 1)));
    }
    let count = |p: bool, t: bool| pred.iter().zip(truth).filter(|&(&a, &b)| a == p && b == t).count() as f64;
    let (tp, fp, fn_) = (count(true, true), count(true, false), count(false, true));
    let ratio = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    Ok(BinaryScores {
        precision,
        recall,
        f1: ratio(2.0 * precision * recall, precision + recall),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegistrationMetrics {
    pub rre_deg: f64,
    pub rte: f64,
    pub rmse: f64,
    pub registered: bool,
    pub inlier_ratio: f64,
    pub feature_match: bool,
}

/// Geodesic angle between two rotations, in degrees.
pub fn rre_deg(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    crate::geometry::rotation_angle_deg(&(gt.rotation().transpose() * est.rotation()))
}

pub fn rte(est: &RigidTransform, gt: &RigidTransform) -> f64 {
    (gt.translation() - est.translation()).norm()
}

/// Root mean square of `‖T̃(p) − q‖` over ground-truth pairs `(p, q)`.
pub fn rmse(est: &RigidTransform, gt_corr: &[(Vector3<f64>, Vector3<f64>)]) -> Result<f64, MetricsError> {
    if gt_corr.is_empty() {
        return Err(MetricsError::EmptyCorrespondences);
    }
    let sum: f64 = gt_corr.iter().map(|(p, q)| (est.apply(p) - q).norm_squared()).sum();
    Ok((sum / gt_corr.len() as f64).sqrt())
}

/// Fraction of predicted pairs within `tau2` under the ground-truth transform.
pub fn inlier_ratio(
    gt: &RigidTransform,
    pred: &CorrespondenceSet,
    src: &PointCloud,
    reference: &PointCloud,
    tau2: f64,
) -> Result<f64, MetricsError> {
    if pred.is_empty() {
        return Err(MetricsError::EmptyCorrespondences);
    }
    let mut inliers = 0usize;
    for &(r, s, _) in &pred.pairs {
        let q = reference.points().get(r).ok_or(MetricsError::IndexOutOfRange {
            what: "reference cloud",
            index: r,
            len: reference.len(),
        })?;
        let p = src.points().get(s).ok_or(MetricsError::IndexOutOfRange {
            what: "source cloud",
            index: s,
            len: src.len(),
        })?;
        if (gt.apply(p) - q).norm() < tau2 {
            inliers += 1;
        }
    }
    Ok(inliers as f64 / pred.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn registration_metrics(
    est: &RigidTransform,
    gt: &RigidTransform,
    gt_corr: &[(Vector3<f64>, Vector3<f64>)],
    pred: &CorrespondenceSet,
    src: &PointCloud,
    reference: &PointCloud,
    th: &MetricThresholds,
) -> Result<RegistrationMetrics, MetricsError> {
    let rmse = rmse(est, gt_corr)?;
    let inlier_ratio = inlier_ratio(gt, pred, src, reference, th.tau2)?;
    Ok(RegistrationMetrics {
        rre_deg: rre_deg(est, gt),
        rte: rte(est, gt),
        rmse,
        registered: rmse < th.tau1,
        inlier_ratio,
        feature_match: inlier_ratio > th.tau3,
    })
}

fn mean_nearest(from: &[Vector3<f64>], to: &KdTree, f: impl Fn(f64) -> f64) -> f64 {
    from.iter()
        .map(|p| f(to.nearest(p).map_or(f64::INFINITY, |n| n.0)))
        .sum::<f64>()
        / from.len() as f64
}

/// Symmetric Chamfer distance between `est(p)` and `q` with squared
/// nearest-neighbour distances.
pub fn chamfer(p: &PointCloud, q: &PointCloud, est: &RigidTransform) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let moved: Vec<Vector3<f64>> = p.points().iter().map(|x| est.apply(x)).collect();
    let (tp, tq) = (KdTree::new(&moved), KdTree::new(q.points()));
    Ok(mean_nearest(&moved, &tq, |d2| d2) + mean_nearest(q.points(), &tp, |d2| d2))
}

/// Fraction of correspondences whose source object is the ground-truth
/// partner of their reference object. `gt` holds `(src node, ref node)`.
pub fn scc(
    pred: &CorrespondenceSet,
    o_src: &[usize],
    o_ref: &[usize],
    gt: &[(usize, usize)],
) -> Result<f64, MetricsError> {
    if pred.is_empty() {
        return Err(MetricsError::EmptyCorrespondences);
    }
    let partner: std::collections::HashMap<usize, usize> = gt.iter().map(|&(s, r)| (r, s)).collect();
    let mut hits = 0usize;
    for &(i, j, _) in &pred.pairs {
        let (Some(&or), Some(&os)) = (o_ref.get(i), o_src.get(j)) else {
            return Err(MetricsError::IndexOutOfRange {
                what: "object map",
                index: i.max(j),
                len: o_ref.len().min(o_src.len()),
            });
        };
        if partner.get(&or) == Some(&os) {
            hits += 1;
        }
    }
    Ok(hits as f64 / pred.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OverlapVariant {
    /// k̃ times the mean selected score.
    All,
    /// k̃ times the mean of the top three selected scores.
    Top3,
}

pub fn overlap_score(alignment: &SoftAlignment, variant: OverlapVariant) -> f64 {
    let mut scores: Vec<f64> = alignment.selected_pairs.iter().map(|p| p.2).collect();
    if scores.is_empty() {
        return 0.0;
    }
    if variant == OverlapVariant::Top3 {
        scores.sort_by(|a, b| b.total_cmp(a));
        scores.truncate(3);
    }
    alignment.similarity * scores.iter().sum::<f64>() / scores.len() as f64
}

/// `true` for overlap: μ at or above the variant's threshold.
pub fn overlap_decision(mu: f64, variant: OverlapVariant, th: &MetricThresholds) -> bool {
    let t = match variant {
        OverlapVariant::All => th.overlap_mu,
        OverlapVariant::Top3 => th.overlap_mu3,
    };
    mu >= t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MosaicMetrics {
    pub acc: f64,
    pub comp: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Reconstruction quality of `recon` against the ground-truth cloud. Acc and
/// precision average over ground-truth points, Comp and recall over
/// reconstructed points; a point counts for precision/recall when its
/// nearest counterpart is closer than `mosaic_dist`.
pub fn mosaic_metrics(recon: &PointCloud, gt: &PointCloud, th: &MetricThresholds) -> Result<MosaicMetrics, MetricsError> {
    if recon.is_empty() || gt.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let (tr, tg) = (KdTree::new(recon.points()), KdTree::new(gt.points()));
    let d = th.mosaic_dist;
    let acc = mean_nearest(gt.points(), &tr, f64::sqrt);
    let comp = mean_nearest(recon.points(), &tg, f64::sqrt);
    let precision = mean_nearest(gt.points(), &tr, |d2| f64::from(u8::from(d2.sqrt() < d)));
    let recall = mean_nearest(recon.points(), &tg, |d2| f64::from(u8::from(d2.sqrt() < d)));
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(MosaicMetrics {
        acc,
        comp,
        precision,
        recall,
        f1,
    })
}
