//! Pinhole camera and subject placement.

use rand::Rng;

use super::skeleton::{mat_mul, mat_vec, rot_x, rot_y, Mat3};
use crate::error::{Error, Result};
use crate::pose::{Pose2D, Pose3D, N_JOINTS};

/// Pixel coordinates are continuous with pixel `(r, c)` covering
/// `[c, c+1) × [r, r+1)`; image `y` grows downwards.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraModel {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    /// Subject distance range (mm) used by [`place_subject`].
    pub depth_range: (f64, f64),
}

impl CameraModel {
    pub fn new(focal: f64, cx: f64, cy: f64, depth_range: (f64, f64)) -> Result<Self> {
        if !(focal > 0.0) || !focal.is_finite() {
            return Err(Error::Config(format!("focal length must be positive, got {focal}")));
        }
        if !(depth_range.0 > 0.0 && depth_range.1 >= depth_range.0) {
            return Err(Error::Config(format!("bad depth range {:?}", depth_range)));
        }
        Ok(CameraModel { focal, cx, cy, depth_range })
    }

    /// Camera for a square canvas of `size` pixels, principal point at its centre.
    pub fn for_canvas(size: usize) -> Self {
        let s = size as f64;
        CameraModel {
            focal: 130.0 * s / 72.0,
            cx: s / 2.0,
            cy: s / 2.0,
            depth_range: (4500.0, 5500.0),
        }
    }

    pub fn project_point(&self, p: [f64; 3]) -> Result<[f64; 2]> {
        if !(p[2] > 0.0) {
            return Err(Error::Domain(format!("point at depth {} is not in front of the camera", p[2])));
        }
        Ok([self.focal * p[0] / p[2] + self.cx, self.focal * p[1] / p[2] + self.cy])
    }

    /// Inverse of [`project_point`] given the depth.
    pub fn unproject(&self, uv: [f64; 2], depth: f64) -> [f64; 3] {
        [(uv[0] - self.cx) * depth / self.focal, (uv[1] - self.cy) * depth / self.focal, depth]
    }
}

pub fn project(pose: &Pose3D, camera: &CameraModel) -> Result<Pose2D> {
    let mut out = [[0.0; 2]; N_JOINTS];
    for (o, p) in out.iter_mut().zip(pose.0.iter()) {
        *o = camera.project_point(*p)?;
    }
    Ok(Pose2D(out))
}

/// Body frame (y up, facing +z) to a camera frame looking at the front of
/// the subject: rotate π about x, then tilt and turn the body.
pub fn view_rotation(yaw: f64, pitch: f64) -> Mat3 {
    mat_mul(&rot_x(std::f64::consts::PI), &mat_mul(&rot_x(pitch), &rot_y(yaw)))
}

pub const MAX_YAW: f64 = 70.0 * std::f64::consts::PI / 180.0;
pub const MAX_PITCH: f64 = 0.15;

/// Rotates the body-frame pose by a random view and translates it so the
/// subject's bounding box is centred (with a little jitter) at a random depth.
pub fn place_subject<R: Rng + ?Sized>(body: &Pose3D, camera: &CameraModel, rng: &mut R) -> Pose3D {
    let yaw = rng.random_range(-MAX_YAW..=MAX_YAW);
    let pitch = rng.random_range(-MAX_PITCH..=MAX_PITCH);
    let depth = rng.random_range(camera.depth_range.0..=camera.depth_range.1);
    let jitter = [rng.random_range(-80.0..=80.0), rng.random_range(-80.0..=80.0)];
    let r = view_rotation(yaw, pitch);
    let mut pts = body.0.map(|p| mat_vec(&r, p));
    let mut t = [0.0; 3];
    for k in 0..2 {
        let lo = pts.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        t[k] = -(lo + hi) / 2.0 + jitter[k];
    }
    t[2] = depth;
    for p in &mut pts {
        for k in 0..3 {
            p[k] += t[k];
        }
    }
    Pose3D(pts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 32.0, 30.0, (4000.0, 5000.0)).unwrap()
    }

    #[test]
    fn optical_axis_hits_principal_point() {
        assert_eq!(cam().project_point([0.0, 0.0, 1234.0]).unwrap(), [32.0, 30.0]);
    }

    #[test]
    fn doubling_depth_halves_offset() {
        let c = cam();
        let a = c.project_point([300.0, -120.0, 2000.0]).unwrap();
        let b = c.project_point([300.0, -120.0, 4000.0]).unwrap();
        assert!(((a[0] - 32.0) - 2.0 * (b[0] - 32.0)).abs() < 1e-12);
        assert!(((a[1] - 30.0) - 2.0 * (b[1] - 30.0)).abs() < 1e-12);
    }

    #[test]
    fn unproject_inverts_projection() {
        let c = cam();
        for p in [[10.0, 20.0, 3000.0], [-700.0, 400.0, 5100.0], [0.1, -0.2, 1.0]] {
            let q = c.unproject(c.project_point(p).unwrap(), p[2]);
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn behind_camera_is_rejected() {
        assert!(matches!(cam().project_point([0.0, 0.0, 0.0]), Err(Error::Domain(_))));
        assert!(cam().project_point([0.0, 0.0, -5.0]).is_err());
        assert!(CameraModel::new(0.0, 0.0, 0.0, (1.0, 2.0)).is_err());
    }

    #[test]
    fn frontal_view_puts_head_up_and_left_on_image_right() {
        use crate::pose::Joint;
        use crate::synth::skeleton::{forward_kinematics, JointAngles, SkeletonSpec};
        let body = forward_kinematics(&SkeletonSpec::default(), &JointAngles::zero(), 1.0);
        let r = view_rotation(0.0, 0.0);
        let head = mat_vec(&r, body.joint(Joint::Head));
        let lw = mat_vec(&r, body.joint(Joint::LeftWrist));
        let nose_dir = mat_vec(&r, [0.0, 0.0, 1.0]);
        assert!(head[1] < 0.0 && lw[0] > 0.0 && nose_dir[2] < 0.0);
    }
}
