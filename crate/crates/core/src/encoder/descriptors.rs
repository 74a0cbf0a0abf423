use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::geometry::{KdTree, PointCloud};

/// Width of the point descriptor (zero-padded).
pub const DESCRIPTOR_DIM: usize = 32;
const SPACING_NEIGHBORS: usize = 8;
const SHELL_SCALE: f64 = 32.0;
const EPS: f64 = 1e-12;

/// Descriptor layout:
/// - 0..3: linearity, planarity, sphericity at `radius`
/// - 3..6: the same at `radius / 2`
/// - 6..8: mean and std of `|nᵢ·nⱼ|` over the neighborhood
/// - 8..12: neighbor counts in four shells up to `2·radius`
/// - 12: `ln(1 + count)` within `radius`
/// - 13..21: distances to the 8 nearest neighbors over `radius`
/// - 21: height above the cloud centroid (zero when rotation invariant)
/// - 22: surface variation, 23: anisotropy
pub fn point_descriptors(p: &PointCloud, radius: f64, rotation_invariant: bool) -> DMatrix<f64> {
    let n = p.len();
    let pts = p.points();
    let tree = KdTree::new(pts);
    let neighborhoods: Vec<Vec<usize>> = pts.par_iter().map(|q| tree.within_radius(q, radius)).collect();
    let normals: Vec<Option<Vector3<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let eig = covariance_eigen(pts, &neighborhoods[i])?;
            Some(eig.1)
        })
        .collect();
    let centroid = p.centroid();
    let rows: Vec<[f64; DESCRIPTOR_DIM]> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d = [0.0; DESCRIPTOR_DIM];
            let nb = &neighborhoods[i];
            if nb.len() < 2 {
                return d;
            }
            let q = pts[i];
            if let Some((ev, _)) = covariance_eigen(pts, nb) {
                let [l, pl, s] = shape_features(ev);
                d[0] = l;
                d[1] = pl;
                d[2] = s;
                let total = ev[0] + ev[1] + ev[2];
                d[22] = if total > EPS { ev[2] / total } else { 0.0 };
                d[23] = if ev[0] > EPS { (ev[0] - ev[2]) / ev[0] } else { 0.0 };
            }
            let half: Vec<usize> = nb
                .iter()
                .copied()
                .filter(|&j| (pts[j] - q).norm() <= radius / 2.0)
                .collect();
            if let Some((ev, _)) = covariance_eigen(pts, &half) {
                let [l, pl, s] = shape_features(ev);
                d[3] = l;
                d[4] = pl;
                d[5] = s;
            }
            if let Some(ni) = normals[i] {
                let dots: Vec<f64> = nb
                    .iter()
                    .filter(|&&j| j != i)
                    .filter_map(|&j| normals[j].map(|nj| ni.dot(&nj).abs()))
                    .collect();
                if !dots.is_empty() {
                    let mean = dots.iter().sum::<f64>() / dots.len() as f64;
                    let var = dots.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / dots.len() as f64;
                    d[6] = mean;
                    d[7] = var.sqrt();
                }
            }
            let wide = tree.within_radius(&q, 2.0 * radius);
            for &j in &wide {
                if j == i {
                    continue;
                }
                let r = (pts[j] - q).norm() / radius;
                let shell = ((r * 2.0).floor() as usize).min(3);
                d[8 + shell] += 1.0 / SHELL_SCALE;
            }
            d[12] = ((nb.len() - 1) as f64).ln_1p();
            let knn = tree.knn(&q, SPACING_NEIGHBORS.min(n - 1), Some(i));
            for (k, (d2, _)) in knn.iter().enumerate() {
                d[13 + k] = d2.sqrt() / radius;
            }
            if !rotation_invariant {
                d[21] = q.z - centroid.z;
            }
            d
        })
        .collect();
    DMatrix::from_fn(n, DESCRIPTOR_DIM, |i, k| rows[i][k])
}

/// Eigenvalues (descending) and the normal (eigenvector of the smallest
/// eigenvalue) of the neighborhood covariance; `None` below 3 points.
fn covariance_eigen(pts: &[Vector3<f64>], idx: &[usize]) -> Option<([f64; 3], Vector3<f64>)> {
    if idx.len() < 3 {
        return None;
    }
    let mean = idx.iter().map(|&j| pts[j]).sum::<Vector3<f64>>() / idx.len() as f64;
    let mut cov = Matrix3::zeros();
    for &j in idx {
        let dv = pts[j] - mean;
        cov += dv * dv.transpose();
    }
    cov /= idx.len() as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let ev = order.map(|k| eig.eigenvalues[k].max(0.0));
    Some((ev, eig.eigenvectors.column(order[2]).into_owned()))
}

/// Linearity `(λ1−λ2)/λ1`, planarity `(λ2−λ3)/λ2`, sphericity `λ3/λ1`.
fn shape_features(ev: [f64; 3]) -> [f64; 3] {
    let [l1, l2, l3] = ev;
    if l1 <= EPS {
        return [0.0; 3];
    }
    let planarity = if l2 > EPS { (l2 - l3) / l2 } else { 0.0 };
    [(l1 - l2) / l1, planarity, l3 / l1]
}
