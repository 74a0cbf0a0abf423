use nalgebra::{DMatrix, Vector3};

use super::{GeometryError, RigidTransform};

/// Points with a per-point object label (the point-to-object map) and
/// optional per-point descriptors stored row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vector3<f64>>,
    object_ids: Vec<usize>,
    descriptors: Option<DMatrix<f64>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, object_ids: Vec<usize>) -> Result<Self, GeometryError> {
        if points.len() != object_ids.len() {
            return Err(GeometryError::LengthMismatch {
                what: "object_ids",
                expected: points.len(),
                found: object_ids.len(),
            });
        }
        Ok(Self {
            points,
            object_ids,
            descriptors: None,
        })
    }

    /// Cloud whose points all belong to object 0.
    pub fn unlabeled(points: Vec<Vector3<f64>>) -> Self {
        let n = points.len();
        Self {
            points,
            object_ids: vec![0; n],
            descriptors: None,
        }
    }

    pub fn with_descriptors(mut self, descriptors: DMatrix<f64>) -> Result<Self, GeometryError> {
        if descriptors.nrows() != self.points.len() {
            return Err(GeometryError::LengthMismatch {
                what: "descriptor rows",
                expected: self.points.len(),
                found: descriptors.nrows(),
            });
        }
        self.descriptors = Some(descriptors);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn object_ids(&self) -> &[usize] {
        &self.object_ids
    }

    pub fn descriptors(&self) -> Option<&DMatrix<f64>> {
        self.descriptors.as_ref()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Keeps the points for which `keep` holds, in order. Descriptors are kept
    /// in step with the points.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize) -> bool) -> (PointCloud, Vec<usize>) {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep(i, self.object_ids[i]))
            .collect();
        (self.select(&idx), idx)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud {
            points: idx.iter().map(|&i| self.points[i]).collect(),
            object_ids: idx.iter().map(|&i| self.object_ids[i]).collect(),
            descriptors: self.descriptors.as_ref().map(|d| d.select_rows(idx)),
        }
    }

    /// Relabels objects through `map`; used after node removal.
    pub fn map_objects(&self, map: impl Fn(usize) -> usize) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
            object_ids: self.object_ids.iter().map(|&o| map(o)).collect(),
            descriptors: self.descriptors.clone(),
        }
    }

    /// Appends another cloud; descriptors are dropped unless both carry them.
    pub fn concat(&self, other: &PointCloud) -> PointCloud {
        let mut points = self.points.clone();
        points.extend_from_slice(&other.points);
        let mut object_ids = self.object_ids.clone();
        object_ids.extend_from_slice(&other.object_ids);
        let descriptors = match (&self.descriptors, &other.descriptors) {
            (Some(a), Some(b)) if a.ncols() == b.ncols() => {
                let mut d = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
                d.rows_mut(0, a.nrows()).copy_from(a);
                d.rows_mut(a.nrows(), b.nrows()).copy_from(b);
                Some(d)
            }
            _ => None,
        };
        PointCloud {
            points,
            object_ids,
            descriptors,
        }
    }
}

/// Applies `t` to every point; labels and descriptors are carried over.
pub fn apply_transform(t: &RigidTransform, p: &PointCloud) -> PointCloud {
    PointCloud {
        points: p.points.iter().map(|x| t.apply(x)).collect(),
        object_ids: p.object_ids.clone(),
        descriptors: p.descriptors.clone(),
    }
}
