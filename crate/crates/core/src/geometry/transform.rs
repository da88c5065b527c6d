use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, Vector4};

use super::{GeometryError, Result};

/// Maximum `|RᵀR - I|` accepted when constructing a transform from raw input.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// An element of SE(3): `p_Y = R p_X + t`.
///
/// The rotation is always stored re-orthonormalized, so `‖RᵀR − I‖_max` stays
/// below 1e-9 for every constructed value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

/// A 3D point in homogeneous form `[x y z 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HomogeneousPoint(Vector4<f64>);

impl HomogeneousPoint {
    pub fn from_euclidean(p: &Vector3<f64>) -> Self {
        Self(Vector4::new(p.x, p.y, p.z, 1.0))
    }

    /// Divides through by `w`. Returns `None` for points at infinity.
    pub fn normalize(v: &Vector4<f64>) -> Option<Self> {
        if v.w.abs() < f64::EPSILON || !v.iter().all(|c| c.is_finite()) {
            return None;
        }
        Some(Self(Vector4::new(v.x / v.w, v.y / v.w, v.z / v.w, 1.0)))
    }

    pub fn coords(&self) -> &Vector4<f64> {
        &self.0
    }

    pub fn to_euclidean(&self) -> Vector3<f64> {
        self.0.xyz()
    }
}

fn orthonormality_residual(r: &Matrix3<f64>) -> f64 {
    (r.transpose() * r - Matrix3::identity()).amax()
}

/// Nearest rotation via the Newton iteration `X ← (X + X⁻ᵀ)/2`, which converges
/// quadratically to the orthogonal polar factor for any non-singular input.
fn polar_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let mut x = *r;
    for _ in 0..64 {
        let inv_t = match x.try_inverse() {
            Some(inv) => inv.transpose(),
            None => break,
        };
        let next = (x + inv_t) * 0.5;
        let delta = (next - x).amax();
        x = next;
        if delta < 1e-16 {
            break;
        }
    }
    x
}

impl RigidTransform {
    /// Validates `rotation` and stores its nearest proper rotation.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let det = rotation.determinant();
        let residual = orthonormality_residual(&rotation);
        if !det.is_finite() || det <= 0.0 || !(residual <= ORTHONORMAL_TOLERANCE) {
            return Err(GeometryError::NonRotation { det, residual });
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(GeometryError::NonRotation { det, residual: f64::NAN });
        }
        // Matrices already orthonormal to rounding are kept bit-for-bit so
        // that serialised transforms read back unchanged.
        let rotation = if residual <= 1e-15 { rotation } else { polar_rotation(&rotation) };
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rotation = if axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            *Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle).matrix()
        };
        Self {
            rotation,
            translation,
        }
    }

    /// Rotation given as a rotation vector (axis scaled by angle).
    pub fn from_rotation_vector(omega: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        let angle = omega.norm();
        if angle == 0.0 {
            return Self::from_translation(translation);
        }
        Self::from_axis_angle(omega, angle, translation)
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<Self> {
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(GeometryError::BadHomogeneousRow);
        }
        let rotation = m.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        Self::new(rotation, translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m[(0, 3)] = self.translation.x;
        m[(1, 3)] = self.translation.y;
        m[(2, 3)] = self.translation.z;
        m
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: applying the result equals applying `other` then `self`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn apply_homogeneous(&self, p: &HomogeneousPoint) -> HomogeneousPoint {
        HomogeneousPoint(self.to_homogeneous() * p.0)
    }

    pub fn orthonormality_residual(&self) -> f64 {
        orthonormality_residual(&self.rotation)
    }

    /// Largest absolute elementwise difference between the 4×4 forms.
    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        (self.to_homogeneous() - other.to_homogeneous()).amax()
    }
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}
