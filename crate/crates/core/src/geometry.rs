//! Small 3D geometry helpers shared by the simulator modules.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Skew-symmetric cross-product matrix, `skew(a) * b == a.cross(&b)`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation of angle `angle` about the unit axis `axis`:
/// `cos(angle) I + (1 - cos(angle)) a a^T + sin(angle) [a]x`.
pub fn rodrigues(axis: &Vec3, angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::identity() * c + axis * axis.transpose() * (1.0 - c) + skew(axis) * s
}

/// Rotation vector (axis * angle) of a rotation matrix, accurate for small
/// angles and near a half turn.
pub fn rotation_log(r: &Mat3) -> Vec3 {
    let w = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]) * 0.5;
    let s = w.norm();
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = s.atan2(c);
    if theta < 1e-8 {
        return w;
    }
    if std::f64::consts::PI - theta > 1e-4 {
        return w * (theta / s);
    }
    // near a half turn: axis from the symmetric part
    let b = ((r + r.transpose()) * 0.5 - Mat3::identity() * c) / (1.0 - c);
    let k = (0..3).max_by(|&i, &j| b[(i, i)].total_cmp(&b[(j, j)])).unwrap_or(0);
    let mut axis: Vec3 = b.column(k).into();
    axis /= axis.norm();
    if axis.dot(&w) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

pub fn rot_x(a: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vec3::x_axis(), a).into_inner()
}

pub fn rot_y(a: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vec3::y_axis(), a).into_inner()
}

pub fn rot_z(a: f64) -> Mat3 {
    Rotation3::from_axis_angle(&Vec3::z_axis(), a).into_inner()
}

/// True when `r` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(r: &Mat3, tol: f64) -> bool {
    let err = (r.transpose() * r - Mat3::identity()).abs().max();
    err <= tol && (r.determinant() - 1.0).abs() <= tol
}

/// Any unit vector perpendicular to `v` (which must be nonzero).
pub fn any_perpendicular(v: &Vec3) -> Unit<Vec3> {
    let helper = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    Unit::new_normalize(v.cross(&helper))
}

/// Closest point parameter on segment `a..b` to point `p`, clamped to [0, 1].
pub fn closest_param_on_segment(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 <= f64::EPSILON {
        return 0.0;
    }
    ((p - a).dot(&ab) / len2).clamp(0.0, 1.0)
}

pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let s = closest_param_on_segment(p, a, b);
    (p - (a + (b - a) * s)).norm()
}

/// Closest points between segments `p1..q1` and `p2..q2`.
/// Returns `(s, t, c1, c2)` with `c1 = p1 + s (q1 - p1)` and `c2 = p2 + t (q2 - p2)`.
pub fn closest_points_segments(
    p1: &Vec3,
    q1: &Vec3,
    p2: &Vec3,
    q2: &Vec3,
) -> (f64, f64, Vec3, Vec3) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let eps = 1e-15;

    let (s, t);
    if a <= eps && e <= eps {
        return (0.0, 0.0, *p1, *p2);
    }
    if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < 0.0 {
                t0 = 0.0;
                s0 = (-c / a).clamp(0.0, 1.0);
            } else if t0 > 1.0 {
                t0 = 1.0;
                s0 = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s0;
            t = t0;
        }
    }
    (s, t, p1 + d1 * s, p2 + d2 * t)
}
