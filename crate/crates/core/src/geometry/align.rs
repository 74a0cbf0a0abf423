use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{GeometryError, RigidTransform};

const RANK_TOL: f64 = 1e-12;

/// Weighted Procrustes: the proper rigid transform minimizing
/// `Σ wᵢ‖R·srcᵢ + t − refᵢ‖²`.
pub fn weighted_svd_alignment(
    src: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    weights: &[f64],
) -> Result<RigidTransform, GeometryError> {
    if src.len() != reference.len() || src.len() != weights.len() {
        return Err(GeometryError::LengthMismatch {
            what: "correspondence lists",
            expected: src.len(),
            found: reference.len().min(weights.len()),
        });
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(GeometryError::InvalidWeights);
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(GeometryError::InvalidWeights);
    }
    let mut cs = Vector3::zeros();
    let mut cr = Vector3::zeros();
    for ((s, r), w) in src.iter().zip(reference).zip(weights) {
        cs += s * (*w / total);
        cr += r * (*w / total);
    }
    let mut h = Matrix3::zeros();
    let mut cov_s = Matrix3::zeros();
    let mut cov_r = Matrix3::zeros();
    for ((s, r), w) in src.iter().zip(reference).zip(weights) {
        let (ds, dr) = (s - cs, r - cr);
        let w = *w / total;
        h += ds * dr.transpose() * w;
        cov_s += ds * ds.transpose() * w;
        cov_r += dr * dr.transpose() * w;
    }
    for cov in [&cov_s, &cov_r] {
        let mut ev = cov.symmetric_eigenvalues();
        ev.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
        if !(ev[0] > 0.0) || ev[1] <= RANK_TOL * ev[0] {
            return Err(GeometryError::DegenerateConfiguration);
        }
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let smallest = svd.singular_values.imin();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(smallest, smallest)] = -1.0;
    }
    let rotation = v * d * u.transpose();
    let translation = cr - rotation * cs;
    Ok(RigidTransform::from_parts_unchecked(rotation, translation))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_radius: f64,
    pub max_iters: usize,
    pub seed: u64,
    pub refine_rounds: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_radius: 0.05,
            max_iters: 1000,
            seed: 0,
            refine_rounds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub transform: RigidTransform,
    pub inliers: Vec<bool>,
}

impl PoseEstimate {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

pub(crate) fn inlier_mask(
    t: &RigidTransform,
    src: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    radius: f64,
) -> Vec<bool> {
    let r2 = radius * radius;
    src.iter()
        .zip(reference)
        .map(|(s, r)| (t.apply(s) - r).norm_squared() < r2)
        .collect()
}

/// Iteratively re-fits on the inlier set of `t` with weighted SVD, stopping
/// when the inlier set no longer changes.
pub(crate) fn refine_on_inliers(
    mut t: RigidTransform,
    src: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    weights: &[f64],
    radius: f64,
    rounds: usize,
) -> PoseEstimate {
    let mut mask = inlier_mask(&t, src, reference, radius);
    for _ in 0..rounds {
        let w: Vec<f64> = weights
            .iter()
            .zip(&mask)
            .map(|(w, &m)| if m { *w } else { 0.0 })
            .collect();
        let Ok(next) = weighted_svd_alignment(src, reference, &w) else {
            break;
        };
        let next_mask = inlier_mask(&next, src, reference, radius);
        if next_mask.iter().filter(|&&b| b).count() < mask.iter().filter(|&&b| b).count() {
            break;
        }
        t = next;
        let stable = next_mask == mask;
        mask = next_mask;
        if stable {
            break;
        }
    }
    PoseEstimate {
        transform: t,
        inliers: mask,
    }
}

/// Three-point RANSAC followed by weighted-SVD refinement on the inliers of
/// the best hypothesis. Deterministic for a fixed seed.
pub fn ransac_pose(
    src: &[Vector3<f64>],
    reference: &[Vector3<f64>],
    weights: &[f64],
    config: &RansacConfig,
) -> Result<PoseEstimate, GeometryError> {
    let n = src.len();
    if reference.len() != n || weights.len() != n {
        return Err(GeometryError::LengthMismatch {
            what: "correspondence lists",
            expected: n,
            found: reference.len().min(weights.len()),
        });
    }
    if n < 3 {
        return Err(GeometryError::InsufficientCorrespondences { found: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, RigidTransform)> = None;
    for _ in 0..config.max_iters {
        let idx = sample(&mut rng, n, 3);
        let s: Vec<_> = idx.iter().map(|i| src[i]).collect();
        let r: Vec<_> = idx.iter().map(|i| reference[i]).collect();
        let Ok(t) = weighted_svd_alignment(&s, &r, &[1.0; 3]) else {
            continue;
        };
        let count = inlier_mask(&t, src, reference, config.inlier_radius)
            .iter()
            .filter(|&&b| b)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, t));
            if count == n {
                break;
            }
        }
    }
    let Some((_, t)) = best else {
        return Err(GeometryError::DegenerateConfiguration);
    };
    Ok(refine_on_inliers(
        t,
        src,
        reference,
        weights,
        config.inlier_radius,
        config.refine_rounds,
    ))
}
