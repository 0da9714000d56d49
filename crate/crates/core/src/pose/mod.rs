//! Pose types and every closed-form quantity around them: grid soft labels,
//! losses, multi-root fusion, normalization, scale recovery and MPJPE.

mod fusion;
mod grid;
mod loss;
mod metric;

pub use fusion::average_multi_root;
pub use grid::{cross_entropy_2d, entropy, soft_label, GridDistribution, GridGeometry};
pub use loss::{loss_3d, total_loss, LossBreakdown, LossWeights, PosePrediction};
pub use metric::{mpjpe, normalize_points, normalize_pose, recover_scale, root_align, TorsoLengths, TORSO_EDGES};

use crate::error::{Error, Result};

pub const N_JOINTS: usize = 17;

/// Joint order of the 17-joint motion-capture convention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(usize)]
pub enum Joint {
    Pelvis = 0,
    RightHip,
    RightKnee,
    RightAnkle,
    LeftHip,
    LeftKnee,
    LeftAnkle,
    Spine,
    Thorax,
    Neck,
    Head,
    LeftShoulder,
    LeftElbow,
    LeftWrist,
    RightShoulder,
    RightElbow,
    RightWrist,
}

pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "spine",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
];

impl Joint {
    pub const ALL: [Joint; N_JOINTS] = [
        Joint::Pelvis,
        Joint::RightHip,
        Joint::RightKnee,
        Joint::RightAnkle,
        Joint::LeftHip,
        Joint::LeftKnee,
        Joint::LeftAnkle,
        Joint::Spine,
        Joint::Thorax,
        Joint::Neck,
        Joint::Head,
        Joint::LeftShoulder,
        Joint::LeftElbow,
        Joint::LeftWrist,
        Joint::RightShoulder,
        Joint::RightElbow,
        Joint::RightWrist,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        JOINT_NAMES[self.index()]
    }

    pub fn from_index(i: usize) -> Option<Joint> {
        Joint::ALL.get(i).copied()
    }

    pub fn from_name(name: &str) -> Option<Joint> {
        JOINT_NAMES.iter().position(|&n| n == name).map(|i| Joint::ALL[i])
    }
}

/// 17 joints in millimetres, camera frame (or normalized units after
/// [`normalize_pose`]).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose3D(pub [[f64; 3]; N_JOINTS]);

impl Pose3D {
    pub fn new(joints: [[f64; 3]; N_JOINTS]) -> Result<Self> {
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Domain("pose has non-finite coordinates".into()));
        }
        Ok(Pose3D(joints))
    }

    pub fn from_slice(joints: &[[f64; 3]]) -> Result<Self> {
        let arr: [[f64; 3]; N_JOINTS] = joints.try_into().map_err(|_| {
            Error::Domain(format!("pose needs {N_JOINTS} joints, got {}", joints.len()))
        })?;
        Self::new(arr)
    }

    pub fn joint(&self, j: Joint) -> [f64; 3] {
        self.0[j.index()]
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.0
    }

    pub fn translated(&self, t: [f64; 3]) -> Pose3D {
        let mut out = *self;
        for p in &mut out.0 {
            for k in 0..3 {
                p[k] += t[k];
            }
        }
        out
    }

    pub fn scaled(&self, s: f64) -> Pose3D {
        let mut out = *self;
        out.0.iter_mut().flatten().for_each(|v| *v *= s);
        out
    }

    /// `J_j - J_r` for every `j != r`, in ascending joint order.
    pub fn relative_to(&self, root: usize) -> Vec<[f64; 3]> {
        non_root_joints(root)
            .map(|j| sub(self.0[j], self.0[root]))
            .collect()
    }
}

/// 17 joints in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2D(pub [[f64; 2]; N_JOINTS]);

impl Pose2D {
    pub fn joints(&self) -> &[[f64; 2]] {
        &self.0
    }

    /// True when every joint lies in `[0, size)` on both axes.
    pub fn inside(&self, size: f64) -> bool {
        self.0.iter().flatten().all(|&v| v >= 0.0 && v < size)
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Pose2D {
        let mut out = *self;
        for p in &mut out.0 {
            p[0] += dx;
            p[1] += dy;
        }
        out
    }
}

/// Joint indices used as regression roots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RootSet(Vec<usize>);

impl RootSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("root set is empty".into()));
        }
        for (k, &r) in indices.iter().enumerate() {
            if r >= N_JOINTS {
                return Err(Error::Config(format!("root index {r} is not a joint")));
            }
            if indices[..k].contains(&r) {
                return Err(Error::Config(format!("root index {r} listed twice")));
            }
        }
        Ok(RootSet(indices))
    }

    /// Pelvis alone.
    pub fn single() -> Self {
        RootSet(vec![Joint::Pelvis.index()])
    }

    /// Pelvis, thorax, both shoulders and both hips: every joint is a root or
    /// adjacent to one except the distal limb ends.
    pub fn default_six() -> Self {
        RootSet(
            [
                Joint::Pelvis,
                Joint::Thorax,
                Joint::LeftShoulder,
                Joint::RightShoulder,
                Joint::LeftHip,
                Joint::RightHip,
            ]
            .iter()
            .map(|j| j.index())
            .collect(),
        )
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Joints other than `root`, ascending.
pub fn non_root_joints(root: usize) -> impl Iterator<Item = usize> {
    (0..N_JOINTS).filter(move |&j| j != root)
}

pub(crate) fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn joint_table_is_consistent() {
        for (i, j) in Joint::ALL.iter().enumerate() {
            assert_eq!(j.index(), i);
            assert_eq!(Joint::from_name(j.name()), Some(*j));
        }
    }

    #[test]
    fn root_set_validation() {
        assert!(RootSet::new(vec![0, 0]).is_err());
        assert!(RootSet::new(vec![17]).is_err());
        assert!(RootSet::new(vec![]).is_err());
        assert_eq!(RootSet::default_six().len(), 6);
    }

    #[test]
    fn pose_must_have_17_finite_joints() {
        assert!(Pose3D::from_slice(&[[0.0; 3]; 16]).is_err());
        let mut j = [[0.0; 3]; 17];
        j[3][1] = f64::NAN;
        assert!(Pose3D::new(j).is_err());
    }
}
