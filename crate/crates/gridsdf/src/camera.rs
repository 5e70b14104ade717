//! Pinhole cameras and ray generation.
//!
//! Camera space is right-handed: `x` right, `y` up, and the camera looks
//! along `-z`. A pose is the rotation `world_from_cam` plus the camera
//! center in world coordinates. Rays are cast through pixel centers, i.e.
//! pixel `(u, v)` maps to image-plane coordinates `(u + 0.5, v + 0.5)`;
//! `v` grows downward in the image, which the `-y` flip below accounts for.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, V3};

/// A ray with normalized direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: V3,
    pub dir: V3,
}

impl Ray {
    pub fn at(&self, t: f64) -> V3 {
        self.origin + self.dir * t
    }
}

/// Pinhole camera (intrinsics + pose).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Rows of the `world_from_cam` rotation matrix.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub center: [f64; 3],
}

impl Camera {
    /// Validates that `rotation` is orthonormal (within 1e-9) with positive
    /// determinant.
    pub fn new(
        width: u32,
        height: u32,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: [[f64; 3]; 3],
        center: [f64; 3],
    ) -> Result<Self> {
        let cam = Camera { width, height, fx, fy, cx, cy, rotation, center };
        let r = cam.rotation_matrix();
        let gram = r.transpose() * r;
        let err = (gram - Matrix3::identity()).abs().max();
        if err > 1e-9 {
            return Err(Error::Config(format!(
                "camera rotation is not orthonormal (max deviation {err:.3e})"
            )));
        }
        if r.determinant() < 0.0 {
            return Err(Error::Config("camera rotation is reflected".into()));
        }
        Ok(cam)
    }

    /// Camera at `position` looking at `target`, with `up` fixing the roll,
    /// and a vertical field of view of `fov_y_deg` degrees.
    pub fn look_at(
        width: u32,
        height: u32,
        fov_y_deg: f64,
        position: V3,
        target: V3,
        up: V3,
    ) -> Result<Self> {
        let z = (position - target)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera position coincides with target".into()))?;
        let x = up
            .cross(&z)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Config("camera up is parallel to the view axis".into()))?;
        let y = z.cross(&x);
        let rotation = [
            [x.x, y.x, z.x],
            [x.y, y.y, z.y],
            [x.z, y.z, z.z],
        ];
        let fy = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        Camera::new(
            width,
            height,
            fy, // square pixels
            fy,
            0.5 * width as f64,
            0.5 * height as f64,
            rotation,
            [position.x, position.y, position.z],
        )
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.rotation[r][c])
    }

    pub fn center_v(&self) -> V3 {
        V3::new(self.center[0], self.center[1], self.center[2])
    }

    /// World-space ray through the center of pixel `(u, v)`.
    pub fn ray(&self, u: u32, v: u32) -> Ray {
        self.ray_at(u as f64 + 0.5, v as f64 + 0.5)
    }

    /// World-space ray through image-plane position `(su, sv)` (already in
    /// pixel-center coordinates).
    pub fn ray_at(&self, su: f64, sv: f64) -> Ray {
        let d_cam = V3::new((su - self.cx) / self.fx, -(sv - self.cy) / self.fy, -1.0);
        let dir = (self.rotation_matrix() * d_cam).normalize();
        Ray { origin: self.center_v(), dir }
    }

    /// Transform a world direction into camera coordinates (for writing
    /// camera-space normal maps).
    pub fn world_dir_to_cam(&self, d: V3) -> V3 {
        self.rotation_matrix().transpose() * d
    }

    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn frontal() -> Camera {
        Camera::look_at(
            128,
            128,
            40.0,
            V3::new(0.0, 0.0, 2.2),
            V3::zeros(),
            V3::new(0.0, 1.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn principal_ray_points_at_target() {
        let cam = frontal();
        let r = cam.ray_at(cam.cx, cam.cy);
        assert_relative_eq!((r.dir - V3::new(0.0, 0.0, -1.0)).norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!((r.origin - V3::new(0.0, 0.0, 2.2)).norm(), 0.0);
    }

    #[test]
    fn image_axes_have_expected_world_directions() {
        let cam = frontal();
        // A pixel right of center bends the ray toward +x.
        let right = cam.ray_at(cam.cx + 10.0, cam.cy);
        assert!(right.dir.x > 0.0 && right.dir.y.abs() < 1e-12);
        // A pixel below center (larger v) bends toward -y.
        let below = cam.ray_at(cam.cx, cam.cy + 10.0);
        assert!(below.dir.y < 0.0);
    }

    #[test]
    fn rays_pass_through_pixel_centers() {
        let cam = frontal();
        let a = cam.ray(64, 64);
        let b = cam.ray_at(64.5, 64.5);
        assert_eq!(a, b);
    }

    #[test]
    fn fov_controls_edge_ray_angle() {
        let cam = frontal();
        let top = cam.ray_at(cam.cx, 0.0);
        let angle = top.dir.angle(&V3::new(0.0, 0.0, -1.0)).to_degrees();
        assert_relative_eq!(angle, 20.0, epsilon = 1e-9);
    }

    #[test]
    fn look_at_rotations_are_orthonormal() {
        for yaw in [0.0f64, 45.0, -45.0, 90.0, -90.0] {
            let p = V3::new(2.2 * yaw.to_radians().sin(), 0.0, 2.2 * yaw.to_radians().cos());
            let cam = Camera::look_at(64, 64, 40.0, p, V3::zeros(), V3::new(0.0, 1.0, 0.0));
            assert!(cam.is_ok(), "yaw {yaw}");
        }
    }

    #[test]
    fn invalid_rotations_are_rejected() {
        let sheared = Camera::new(
            64,
            64,
            80.0,
            80.0,
            32.0,
            32.0,
            [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        assert!(matches!(sheared, Err(Error::Config(_))));
        let degenerate = Camera::look_at(
            64,
            64,
            40.0,
            V3::new(0.0, 1.0, 0.0),
            V3::zeros(),
            V3::new(0.0, 1.0, 0.0),
        );
        assert!(matches!(degenerate, Err(Error::Config(_))));
    }

    #[test]
    fn serde_round_trip() {
        let cam = frontal();
        let s = serde_json::to_string(&cam).unwrap();
        let back: Camera = serde_json::from_str(&s).unwrap();
        assert_eq!(cam, back);
    }
}
