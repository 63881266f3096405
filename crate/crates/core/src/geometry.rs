//! Rigid-body poses and the SO(3) helpers the cost gradients rely on.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// A rigid transform: translation plus unit quaternion.
///
/// The quaternion is renormalized after every composition so long chains do
/// not drift away from the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            position: Vector3::zeros(),
            orientation: UnitQuaternion::identity(),
        }
    }

    pub fn new(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose {
            position,
            orientation,
        }
    }

    pub fn from_translation(position: Vector3<f64>) -> Self {
        Pose {
            position,
            orientation: UnitQuaternion::identity(),
        }
    }

    /// `self ∘ other`: apply `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut orientation = self.orientation * other.orientation;
        orientation.renormalize();
        Pose {
            position: self.position + self.orientation * other.position,
            orientation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.orientation.inverse();
        Pose {
            position: -(inv * self.position),
            orientation: inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.position + self.orientation * p
    }

    /// Shortest rotation vector taking `other`'s orientation onto `self`'s,
    /// expressed in the world frame. Its norm is the angular error in radians.
    pub fn rotation_vector_to(&self, other: &Pose) -> Vector3<f64> {
        rotation_vector(&(self.orientation * other.orientation.inverse()))
    }

    pub fn position_error(&self, other: &Pose) -> f64 {
        (self.position - other.position).norm()
    }

    pub fn rotation_error(&self, other: &Pose) -> f64 {
        self.rotation_vector_to(other).norm()
    }
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

/// Wire form: `{xyz: [x,y,z], quat: [w,x,y,z]}`, quat defaulting to identity.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoseDoc {
    #[serde(default)]
    xyz: [f64; 3],
    #[serde(default = "identity_quat")]
    quat: [f64; 4],
}

fn identity_quat() -> [f64; 4] {
    [1.0, 0.0, 0.0, 0.0]
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let q = self.orientation.quaternion();
        PoseDoc {
            xyz: [self.position.x, self.position.y, self.position.z],
            quat: [q.w, q.i, q.j, q.k],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let doc = PoseDoc::deserialize(deserializer)?;
        let [w, x, y, z] = doc.quat;
        let q = Quaternion::new(w, x, y, z);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(serde::de::Error::custom(format!(
                "quaternion norm {norm} is not within 1e-9 of 1"
            )));
        }
        Ok(Pose {
            position: Vector3::new(doc.xyz[0], doc.xyz[1], doc.xyz[2]),
            orientation: UnitQuaternion::from_quaternion(q),
        })
    }
}

/// Shortest axis-angle vector of a unit quaternion (norm ≤ π).
pub fn rotation_vector(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    // Canonicalize to the hemisphere with w ≥ 0 so the short branch is taken.
    let q = if q.w < 0.0 {
        UnitQuaternion::from_quaternion(-q.into_inner())
    } else {
        *q
    };
    q.scaled_axis()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of the SO(3) right Jacobian at rotation vector `phi`.
///
/// Maps body angular velocity of the error rotation to the time derivative of
/// its rotation vector; needed for exact gradients of per-axis-weighted
/// rotation costs.
pub fn right_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta = phi.norm();
    let sk = skew(phi);
    let coeff = if theta < 1e-5 {
        // Taylor: 1/θ² − (1+cosθ)/(2θ sinθ) = 1/12 + θ²/720 + O(θ⁴)
        1.0 / 12.0 + theta * theta / 720.0
    } else {
        1.0 / (theta * theta) - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * sk + coeff * (sk * sk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn compose_with_identity_is_noop() {
        let p = Pose::new(
            Vector3::new(0.3, -0.2, 1.1),
            UnitQuaternion::from_euler_angles(0.2, -0.4, 0.9),
        );
        let q = p.compose(&Pose::identity());
        assert_relative_eq!(q.position, p.position, epsilon = 1e-15);
        assert_relative_eq!(q.orientation.angle_to(&p.orientation), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn composition_is_associative() {
        let a = Pose::new(
            Vector3::new(1.0, 0.0, 0.0),
            UnitQuaternion::from_euler_angles(0.1, 0.2, 0.3),
        );
        let b = Pose::new(
            Vector3::new(0.0, 2.0, 0.0),
            UnitQuaternion::from_euler_angles(-0.5, 0.0, 0.4),
        );
        let c = Pose::new(
            Vector3::new(0.0, 0.0, -1.0),
            UnitQuaternion::from_euler_angles(0.0, 0.7, 0.0),
        );
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        assert_relative_eq!(left.position, right.position, epsilon = 1e-12);
        assert_relative_eq!(
            left.orientation.angle_to(&right.orientation),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn inverse_roundtrip() {
        let p = Pose::new(
            Vector3::new(0.3, 0.4, 0.5),
            UnitQuaternion::from_euler_angles(1.0, -0.3, 0.2),
        );
        let id = p.compose(&p.inverse());
        assert_relative_eq!(id.position.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(id.orientation.angle(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_vector_takes_short_branch() {
        // 350° about z must come back as -10°, not +350°.
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 350.0_f64.to_radians());
        let v = rotation_vector(&q);
        assert_relative_eq!(v.norm(), 10.0_f64.to_radians(), epsilon = 1e-12);
        assert!(v.z < 0.0);
    }

    #[test]
    fn right_jacobian_inv_matches_finite_difference() {
        // d/dt phi(R exp(t w)) at t=0 should equal Jr^-1(phi) w.
        let phi = Vector3::new(0.4, -0.2, 0.7);
        let r = UnitQuaternion::from_scaled_axis(phi);
        let w = Vector3::new(0.3, 0.1, -0.5);
        let h = 1e-7;
        let r_plus = r * UnitQuaternion::from_scaled_axis(w * h);
        let r_minus = r * UnitQuaternion::from_scaled_axis(-w * h);
        let fd = (rotation_vector(&r_plus) - rotation_vector(&r_minus)) / (2.0 * h);
        let analytic = right_jacobian_inv(&phi) * w;
        assert_relative_eq!(fd, analytic, epsilon = 1e-6);
    }

    #[test]
    fn pose_serde_roundtrip() {
        let p = Pose::new(
            Vector3::new(0.1, 0.2, 0.3),
            UnitQuaternion::from_euler_angles(0.3, 0.2, 0.1),
        );
        let json = serde_json::to_string(&p).unwrap();
        let back: Pose = serde_json::from_str(&json).unwrap();
        assert_relative_eq!(back.position, p.position, epsilon = 1e-15);
        assert_relative_eq!(back.orientation.angle_to(&p.orientation), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_serde_rejects_unnormalized_quat() {
        let bad = r#"{"xyz": [0,0,0], "quat": [1.0, 0.5, 0.0, 0.0]}"#;
        assert!(serde_json::from_str::<Pose>(bad).is_err());
    }
}
