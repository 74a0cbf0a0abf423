use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{CorrespondenceLevel, CorrespondenceSet, RegistrationError, SuperpointSet};

/// `C[i][j] = (1 + cos(ref_i, src_j)) / 2`, rows indexing reference
/// superpoints. A zero descriptor has cosine 0 with everything.
pub fn superpoint_matching_matrix(src: &SuperpointSet, reference: &SuperpointSet) -> Result<DMatrix<f64>, RegistrationError> {
    if src.descriptors.ncols() != reference.descriptors.ncols() {
        return Err(RegistrationError::DimensionMismatch {
            expected: reference.descriptors.ncols(),
            found: src.descriptors.ncols(),
        });
    }
    let unit = |m: &DMatrix<f64>| {
        let mut m = m.clone();
        for mut row in m.row_iter_mut() {
            let n = row.norm();
            if n > 0.0 {
                row /= n;
            }
        }
        m
    };
    let cos = unit(&reference.descriptors) * unit(&src.descriptors).transpose();
    Ok(cos.map(|c| (1.0 + c.clamp(-1.0, 1.0)) / 2.0))
}

/// `C' = C + γ·R` with `R[i][j] = S̃[obj(src_j)][obj(ref_i)]`, where `soft`
/// has source rows and reference columns.
pub fn rescore(
    c: &DMatrix<f64>,
    soft: &DMatrix<f64>,
    src: &SuperpointSet,
    reference: &SuperpointSet,
    gamma: f64,
) -> Result<DMatrix<f64>, RegistrationError> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(RegistrationError::InvalidConfig(format!("gamma must be ≥ 0, got {gamma}")));
    }
    if c.shape() != (reference.len(), src.len()) {
        return Err(RegistrationError::DimensionMismatch {
            expected: reference.len() * src.len(),
            found: c.len(),
        });
    }
    let (m_src, m_ref) = (soft.nrows().saturating_sub(1), soft.ncols().saturating_sub(1));
    for (&o, len) in src.object_ids.iter().map(|o| (o, m_src)).chain(reference.object_ids.iter().map(|o| (o, m_ref))) {
        if o >= len {
            return Err(RegistrationError::ObjectOutOfRange { object: o, len });
        }
    }
    if gamma == 0.0 {
        return Ok(c.clone());
    }
    Ok(DMatrix::from_fn(c.nrows(), c.ncols(), |i, j| {
        c[(i, j)] + gamma * soft[(src.object_ids[j], reference.object_ids[i])]
    }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtractionConfig {
    pub top_m: usize,
    pub mutual: bool,
    /// Lowe ratio between the nearest and second-nearest descriptor distance.
    pub ratio: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self {
            top_m: 64,
            mutual: false,
            ratio: 0.8,
        }
    }
}

/// Superpoint pairs `(ref, src)` in descending score order; ties go to the
/// smaller `(ref, src)`.
pub fn top_superpoint_pairs(c_prime: &DMatrix<f64>, top_m: usize, mutual: bool) -> Vec<(usize, usize)> {
    let (r, s) = c_prime.shape();
    let argmax_row: Vec<Option<usize>> = (0..r)
        .map(|i| (0..s).max_by(|&a, &b| c_prime[(i, a)].total_cmp(&c_prime[(i, b)]).then(b.cmp(&a))))
        .collect();
    let argmax_col: Vec<Option<usize>> = (0..s)
        .map(|j| (0..r).max_by(|&a, &b| c_prime[(a, j)].total_cmp(&c_prime[(b, j)]).then(b.cmp(&a))))
        .collect();
    let mut cells: Vec<(usize, usize)> = (0..r)
        .flat_map(|i| (0..s).map(move |j| (i, j)))
        .filter(|&(i, j)| !mutual || (argmax_row[i] == Some(j) && argmax_col[j] == Some(i)))
        .collect();
    cells.sort_by(|&a, &b| c_prime[b].total_cmp(&c_prime[a]).then(a.cmp(&b)));
    cells.truncate(top_m);
    cells
}

/// Point correspondences `(ref point, src point, score)` with indices into
/// the clustered clouds. Within each selected superpoint pair, every
/// reference member takes its nearest source member in descriptor space when
/// it passes the ratio test; the pair's `C'` entry is the score. A point pair
/// reached from several superpoint pairs keeps its highest score.
pub fn extract_correspondences(
    c_prime: &DMatrix<f64>,
    src: &SuperpointSet,
    reference: &SuperpointSet,
    cfg: &ExtractionConfig,
) -> Result<CorrespondenceSet, RegistrationError> {
    Ok(extract_grouped(c_prime, src, reference, cfg)?.0)
}

/// As [`extract_correspondences`], also returning the superpoint pair each
/// correspondence came from.
pub(crate) fn extract_grouped(
    c_prime: &DMatrix<f64>,
    src: &SuperpointSet,
    reference: &SuperpointSet,
    cfg: &ExtractionConfig,
) -> Result<(CorrespondenceSet, Vec<usize>), RegistrationError> {
    if cfg.top_m == 0 {
        return Err(RegistrationError::InvalidConfig("top_m must be ≥ 1".into()));
    }
    let mut best: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for (g, (a, b)) in top_superpoint_pairs(c_prime, cfg.top_m, cfg.mutual).into_iter().enumerate() {
        let score = c_prime[(a, b)];
        let cand = &src.members[b];
        for &r in &reference.members[a] {
            let rd = reference.point_descriptors.row(r);
            let mut d1 = (f64::INFINITY, usize::MAX);
            let mut d2 = f64::INFINITY;
            for &s in cand {
                let d = (src.point_descriptors.row(s) - rd).norm_squared();
                if d < d1.0 || (d == d1.0 && s < d1.1) {
                    d2 = d1.0;
                    d1 = (d, s);
                } else if d < d2 {
                    d2 = d;
                }
            }
            if d1.1 == usize::MAX || (cand.len() > 1 && d1.0.sqrt() >= cfg.ratio * d2.sqrt()) {
                continue;
            }
            let slot = best.entry((r, d1.1)).or_insert((score, g));
            if score > slot.0 {
                *slot = (score, g);
            }
        }
    }
    let mut set = CorrespondenceSet::new(CorrespondenceLevel::Point);
    let mut groups = Vec::with_capacity(best.len());
    for ((r, s), (score, g)) in best {
        set.pairs.push((r, s, score.max(0.0)));
        groups.push(g);
    }
    Ok((set, groups))
}
