use nalgebra::{Matrix3, Point2};
use serde::{Deserialize, Serialize};

use super::VineError;
use crate::geometry::{is_rotation, Mat3, Vec3};

/// Pinhole camera. `rotation` and `translation` map world points into the
/// camera frame (z forward, x right, y down); `intrinsics` maps the camera
/// frame to homogeneous pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Mat3,
    pub rotation: Mat3,
    pub translation: Vec3,
}

/// Points closer than this to the image plane are treated as behind the camera.
pub(crate) const NEAR_PLANE: f64 = 1e-3;

impl CameraModel {
    pub fn new(intrinsics: Mat3, rotation: Mat3, translation: Vec3) -> Result<Self, VineError> {
        let camera = Self { intrinsics, rotation, translation };
        camera.validate()?;
        Ok(camera)
    }

    /// Camera at world `position` looking along world +x with the image
    /// upright (world z up), principal point at the image centre.
    pub fn looking_along_x(position: Vec3, focal_px: f64, width: usize, height: usize) -> Self {
        let rotation = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        let intrinsics = Matrix3::new(
            focal_px,
            0.0,
            width as f64 / 2.0,
            0.0,
            focal_px,
            height as f64 / 2.0,
            0.0,
            0.0,
            1.0,
        );
        Self { intrinsics, rotation, translation: -(rotation * position) }
    }

    pub fn validate(&self) -> Result<(), VineError> {
        let det = self.intrinsics.determinant();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(VineError::InvalidCamera("intrinsic matrix is singular".into()));
        }
        if !is_rotation(&self.rotation, 1e-9) {
            return Err(VineError::InvalidCamera("pose rotation is not a proper rotation".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(VineError::InvalidCamera("translation is not finite".into()));
        }
        Ok(())
    }

    pub fn to_camera(&self, world: &Vec3) -> Vec3 {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, camera: &Vec3) -> Vec3 {
        self.rotation.transpose() * (camera - self.translation)
    }

    /// Pixel of a camera-frame point; `None` when it is not in front of the camera.
    pub fn project_camera(&self, p: &Vec3) -> Option<Point2<f64>> {
        if p.z <= NEAR_PLANE {
            return None;
        }
        let h = self.intrinsics * p;
        Some(Point2::new(h.x / h.z, h.y / h.z))
    }

    pub fn project(&self, world: &Vec3) -> Option<Point2<f64>> {
        self.project_camera(&self.to_camera(world))
    }

    /// Normalized homogeneous ray `Mc^-1 [u, v, 1]` of a pixel.
    pub fn normalized_ray(&self, pixel: &Point2<f64>) -> Vec3 {
        let inv = self.intrinsics.try_inverse().expect("validated camera has invertible intrinsics");
        inv * Vec3::new(pixel.x, pixel.y, 1.0)
    }

    pub fn focal_length(&self) -> f64 {
        0.5 * (self.intrinsics[(0, 0)].abs() + self.intrinsics[(1, 1)].abs())
    }

    pub fn principal_point(&self) -> Point2<f64> {
        Point2::new(self.intrinsics[(0, 2)], self.intrinsics[(1, 2)])
    }

    /// Same pose, principal point shifted by `(du, dv)` pixels.
    pub fn shifted(&self, du: f64, dv: f64) -> Self {
        let mut out = self.clone();
        out.intrinsics[(0, 2)] += du;
        out.intrinsics[(1, 2)] += dv;
        out
    }
}

impl Default for CameraModel {
    /// The scene camera: 1 m in front of the vine plane at mid height, 640x480.
    fn default() -> Self {
        Self::looking_along_x(Vec3::new(-1.0, 0.0, 0.42), 600.0, 640, 480)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn default_camera_is_valid() {
        CameraModel::default().validate().unwrap();
    }

    #[test]
    fn rejects_singular_intrinsics_and_bad_rotation() {
        let cam = CameraModel::default();
        assert!(CameraModel::new(Mat3::zeros(), cam.rotation, cam.translation).is_err());
        assert!(CameraModel::new(cam.intrinsics, cam.rotation * 2.0, cam.translation).is_err());
        let reflection = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(CameraModel::new(cam.intrinsics, reflection, cam.translation).is_err());
    }

    #[test]
    fn manual_pinhole_projection() {
        // fx = 500, fy = 400, cx = 100, cy = 80; identity pose shifted 2 m along z.
        let k = Matrix3::new(500.0, 0.0, 100.0, 0.0, 400.0, 80.0, 0.0, 0.0, 1.0);
        let cam = CameraModel::new(k, Mat3::identity(), Vec3::new(0.0, 0.0, 2.0)).unwrap();
        // (0.2, -0.1, 0) -> camera (0.2, -0.1, 2) -> u = 500*0.1 + 100, v = 400*(-0.05) + 80
        let px = cam.project(&Vec3::new(0.2, -0.1, 0.0)).unwrap();
        assert_relative_eq!(px.x, 150.0, epsilon = 1e-12);
        assert_relative_eq!(px.y, 60.0, epsilon = 1e-12);
        assert!(cam.project(&Vec3::new(0.0, 0.0, -3.0)).is_none());
    }

    #[test]
    fn world_up_is_image_up() {
        let cam = CameraModel::default();
        let low = cam.project(&Vec3::new(0.0, 0.0, 0.2)).unwrap();
        let high = cam.project(&Vec3::new(0.0, 0.0, 0.6)).unwrap();
        assert!(high.y < low.y);
        let left = cam.project(&Vec3::new(0.0, 0.2, 0.4)).unwrap();
        assert!(left.x < 320.0);
    }

    #[test]
    fn normalized_ray_inverts_intrinsics() {
        let cam = CameraModel::default();
        let p = Vec3::new(0.1, 0.05, 0.5);
        let px = cam.project(&p).unwrap();
        let ray = cam.normalized_ray(&px);
        let c = cam.to_camera(&p);
        assert_relative_eq!(ray, c / c.z, epsilon = 1e-12);
    }
}
