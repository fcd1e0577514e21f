//! Axis-angle rotations and their derivatives.

use nalgebra::{Matrix3, Vector3};

/// Below this angle the second-order series replaces Rodrigues' formula.
const SMALL_ANGLE: f64 = 1e-8;

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of an axis-angle vector (radians).
pub fn rodrigues(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    if angle == 0.0 {
        return Matrix3::identity();
    }
    let k = skew(theta);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Matrix3::identity() + a * k + b * k * k
}

/// `∂R/∂θ_i` for i = 0, 1, 2.
pub fn rodrigues_jacobian(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let angle2 = theta.norm_squared();
    let basis = [Vector3::x(), Vector3::y(), Vector3::z()];
    if angle2.sqrt() < 1e-6 {
        let k = skew(theta);
        return basis.map(|e| {
            let ei = skew(&e);
            ei + 0.5 * (ei * k + k * ei)
        });
    }
    let r = rodrigues(theta);
    let k = skew(theta);
    let i_minus_r = Matrix3::identity() - r;
    [0, 1, 2].map(|i| {
        let v = theta.cross(&(i_minus_r * basis[i]));
        (theta[i] * k + skew(&v)) * r / angle2
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_is_identity() {
        assert_eq!(rodrigues(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = rodrigues(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let p = r * Vector3::new(1.0, 0.0, 0.0);
        assert!((p - Vector3::new(0.0, 1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn result_is_orthonormal() {
        let r = rodrigues(&Vector3::new(0.3, -1.2, 0.7));
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let h = 1e-6;
        for theta in [
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(1e-9, 2e-9, -1e-9),
            Vector3::new(2.5, 0.1, -0.4),
        ] {
            let jac = rodrigues_jacobian(&theta);
            for i in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[i] += h;
                tm[i] -= h;
                let fd = (rodrigues(&tp) - rodrigues(&tm)) / (2.0 * h);
                assert!((fd - jac[i]).norm() < 1e-7, "theta {theta:?} axis {i}");
            }
        }
    }
}
