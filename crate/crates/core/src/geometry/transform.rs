use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::GeometryError;

/// A proper rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, checking that `rotation` lies in SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidRotation("non-finite entry".into()));
        }
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        if gram.amax() > ORTHO_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "RᵀR deviates from I by {:.3e}",
                gram.amax()
            )));
        }
        let det = rotation.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidRotation(format!("det(R) = {det}")));
        }
        Ok(Self { rotation, translation })
    }

    /// Internal constructor for rotations produced by trusted numerics.
    pub(crate) fn from_parts_unchecked(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle_rad: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle_rad);
        Self {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        rotation_angle_deg(&self.rotation)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self, GeometryError> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::InvalidRotation(format!(
                "bottom row {bottom:?} is not [0, 0, 0, 1]"
            )));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Row-major 4×4 entries.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, GeometryError> {
        if v.len() != 16 {
            return Err(GeometryError::InvalidRotation(format!(
                "expected 16 entries, got {}",
                v.len()
            )));
        }
        Self::from_matrix4(&Matrix4::from_row_slice(v))
    }

    /// Rotation drawn uniformly from SO(3) with its angle capped at
    /// `max_angle_deg`, translation uniform in `[-max_t, max_t]³`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, max_angle_deg: f64, max_t: f64) -> Self {
        let rotation = if max_angle_deg >= 180.0 {
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                gauss(rng),
                gauss(rng),
                gauss(rng),
                gauss(rng),
            ));
            *q.to_rotation_matrix().matrix()
        } else if max_angle_deg <= 0.0 {
            Matrix3::identity()
        } else {
            let axis = loop {
                let a = Vector3::new(gauss(rng), gauss(rng), gauss(rng));
                if a.norm() > 1e-6 {
                    break a;
                }
            };
            let angle = rng.random_range(0.0..=max_angle_deg).to_radians();
            *Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
        };
        let translation = if max_t > 0.0 {
            Vector3::from_fn(|_, _| rng.random_range(-max_t..=max_t))
        } else {
            Vector3::zeros()
        };
        Self { rotation, translation }
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Angle of a rotation matrix in degrees. Equal to
/// `arccos((trace(R) − 1) / 2)`, evaluated as `atan2(sin θ, cos θ)` so that it
/// stays accurate near 0° and 180°.
pub fn rotation_angle_deg(r: &Matrix3<f64>) -> f64 {
    let cos = (r.trace() - 1.0) / 2.0;
    let sin = 0.5
        * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    sin.atan2(cos).to_degrees()
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_row_major().to_vec().serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        Self::from_row_major(&v).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compose_with_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let t = RigidTransform::random(&mut rng, 180.0, 3.0);
            let id = t.compose(&t.inverse());
            assert!((id.rotation - Matrix3::identity()).amax() < 1e-12);
            assert!(id.translation.amax() < 1e-12);
        }
    }

    #[test]
    fn rejects_reflection() {
        let r = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(RigidTransform::new(r, Vector3::zeros()).is_err());
    }

    #[test]
    fn matrix4_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let t = RigidTransform::random(&mut rng, 180.0, 2.0);
        let back = RigidTransform::from_row_major(&t.to_row_major()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn angle_of_axis_rotation() {
        let t = RigidTransform::from_axis_angle(Vector3::z(), 10f64.to_radians(), Vector3::zeros());
        assert_relative_eq!(t.angle_deg(), 10.0, epsilon = 1e-9);
    }

    #[test]
    fn random_respects_angle_cap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let t = RigidTransform::random(&mut rng, 30.0, 0.0);
            assert!(t.angle_deg() <= 30.0 + 1e-9);
            assert!(RigidTransform::new(t.rotation, t.translation).is_ok());
        }
    }
}
