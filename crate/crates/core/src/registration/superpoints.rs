use std::collections::BTreeMap;

use nalgebra::{DMatrix, Matrix3, Vector3};

use super::RegistrationError;
use crate::encoder::point_descriptors;
use crate::geometry::PointCloud;

/// Number of covariance shape features appended to the mean descriptor.
pub const SHAPE_FEATURES: usize = 4;

/// Voxel clusters of a point cloud used as coarse matching units.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperpointSet {
    pub centers: Vec<Vector3<f64>>,
    /// Indices into the clustered cloud; the lists partition it.
    pub members: Vec<Vec<usize>>,
    /// One row per superpoint.
    pub descriptors: DMatrix<f64>,
    /// Modal object label of the members, smallest label on ties.
    pub object_ids: Vec<usize>,
    /// Per-point descriptors of the clustered cloud.
    pub point_descriptors: DMatrix<f64>,
}

impl SuperpointSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }
}

/// Linearity, planarity, scattering and RMS extent relative to the voxel.
fn shape_features(points: &[Vector3<f64>], voxel: f64) -> [f64; SHAPE_FEATURES] {
    let n = points.len() as f64;
    let c = points.iter().sum::<Vector3<f64>>() / n;
    let cov = points.iter().fold(Matrix3::zeros(), |acc, p| acc + (p - c) * (p - c).transpose()) / n;
    let mut ev: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 {
        return [0.0; SHAPE_FEATURES];
    }
    [
        (ev[0] - ev[1]) / ev[0],
        (ev[1] - ev[2]) / ev[0],
        ev[2] / ev[0],
        (ev[0] + ev[1] + ev[2]).sqrt() / voxel,
    ]
}

/// Voxel-grid clustering. Point descriptors are taken from the cloud when
/// present and computed with `descriptor_radius` otherwise.
pub fn build_superpoints(p: &PointCloud, voxel: f64, descriptor_radius: f64) -> Result<SuperpointSet, RegistrationError> {
    if !(voxel > 0.0 && voxel.is_finite()) {
        return Err(RegistrationError::InvalidConfig(format!("voxel must be positive, got {voxel}")));
    }
    let point_desc = match p.descriptors() {
        Some(d) => d.clone(),
        None => point_descriptors(p, descriptor_radius, true),
    };
    let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
    for (i, q) in p.points().iter().enumerate() {
        let key = [q.x, q.y, q.z].map(|v| (v / voxel).floor() as i64);
        cells.entry(key).or_default().push(i);
    }
    let members: Vec<Vec<usize>> = cells.into_values().collect();
    let width = point_desc.ncols() + SHAPE_FEATURES;
    let mut descriptors = DMatrix::zeros(members.len(), width);
    let mut centers = Vec::with_capacity(members.len());
    let mut object_ids = Vec::with_capacity(members.len());
    for (s, idx) in members.iter().enumerate() {
        let pts: Vec<Vector3<f64>> = idx.iter().map(|&i| p.points()[i]).collect();
        centers.push(pts.iter().sum::<Vector3<f64>>() / pts.len() as f64);
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in idx {
            *counts.entry(p.object_ids()[i]).or_default() += 1;
        }
        let modal = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map_or(0, |(&o, _)| o);
        object_ids.push(modal);
        for &i in idx {
            let mut row = descriptors.view_mut((s, 0), (1, point_desc.ncols()));
            row += point_desc.row(i) / idx.len() as f64;
        }
        for (k, v) in shape_features(&pts, voxel).into_iter().enumerate() {
            descriptors[(s, point_desc.ncols() + k)] = v;
        }
    }
    Ok(SuperpointSet {
        centers,
        members,
        descriptors,
        object_ids,
        point_descriptors: point_desc,
    })
}
