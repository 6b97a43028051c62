//! Pinhole cameras in the OpenCV convention: `+z` forward, `+x` right, `+y` down.

use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Rotation block of the world-to-camera transform.
    pub rotation: Mat3,
    /// Translation of the world-to-camera transform.
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
}

pub const DEFAULT_NEAR: f64 = 0.01;

impl Camera {
    /// Camera at `eye` looking at `target`; `up` fixes the roll.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            near: DEFAULT_NEAR,
        }
    }

    /// Builds a camera from a row-major 4×4 world-to-camera matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn from_world_to_cam(
        m: &[f64; 16],
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        near: f64,
    ) -> Result<Self> {
        let rotation = Mat3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let cam = Self {
            rotation,
            translation: Vec3::new(m[3], m[7], m[11]),
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn world_to_cam(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Row-major 16 floats, as stored in `cameras.json`.
    pub fn world_to_cam_row_major(&self) -> [f64; 16] {
        let m = self.world_to_cam();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = self.rotation * self.rotation.transpose() - Mat3::identity();
        if ortho.abs().max() > 1e-5 {
            return Err(Error::InvalidArgument(
                "camera rotation is not orthonormal".into(),
            ));
        }
        if !(self.fx > 0.0 && self.fy > 0.0 && self.near > 0.0)
            || self.width == 0
            || self.height == 0
        {
            return Err(Error::InvalidArgument(
                "camera intrinsics must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            Vec3::new(3.0, 1.0, -2.0),
            Vec3::new(0.1, 0.2, 0.3),
            Vec3::new(0.0, -1.0, 0.0),
            50.0,
            50.0,
            32,
            24,
        );
        cam.validate().unwrap();
        let p = cam.to_camera(&Vec3::new(0.1, 0.2, 0.3));
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        assert!(p.z > 0.0);
        assert_abs_diff_eq!(cam.center(), Vec3::new(3.0, 1.0, -2.0), epsilon = 1e-12);
    }

    #[test]
    fn row_major_round_trip() {
        let cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            40.0,
            41.0,
            16,
            16,
        );
        let m = cam.world_to_cam_row_major();
        let back =
            Camera::from_world_to_cam(&m, cam.fx, cam.fy, cam.cx, cam.cy, 16, 16, cam.near)
                .unwrap();
        assert_eq!(back, cam);
    }

    #[test]
    fn rejects_bad_intrinsics() {
        let mut cam = Camera::look_at(
            Vec3::new(0.0, 0.0, -4.0),
            Vec3::zeros(),
            Vec3::new(0.0, -1.0, 0.0),
            40.0,
            40.0,
            16,
            16,
        );
        cam.fx = 0.0;
        assert!(cam.validate().is_err());
    }
}
