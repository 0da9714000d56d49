use super::{norm, sub, Joint, Pose3D};
use crate::error::{Error, Result};

/// Stable edges used for scale recovery.
pub const TORSO_EDGES: [(Joint, Joint); 6] = [
    (Joint::Pelvis, Joint::Spine),
    (Joint::Spine, Joint::Thorax),
    (Joint::Thorax, Joint::LeftShoulder),
    (Joint::Thorax, Joint::RightShoulder),
    (Joint::Pelvis, Joint::LeftHip),
    (Joint::Pelvis, Joint::RightHip),
];

/// Zero-mean over joints, then unit Frobenius norm.
pub fn normalize_points(points: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    if points.is_empty() {
        return Err(Error::Domain("cannot normalize an empty pose".into()));
    }
    let n = points.len() as f64;
    let mut mean = [0.0; 3];
    for p in points {
        for k in 0..3 {
            mean[k] += p[k] / n;
        }
    }
    let centered: Vec<[f64; 3]> = points.iter().map(|&p| sub(p, mean)).collect();
    let fro = centered.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    if !(fro > 1e-12 * (1.0 + mean.iter().map(|m| m.abs()).fold(0.0, f64::max))) {
        return Err(Error::Domain("degenerate pose: all joints coincide".into()));
    }
    Ok(centered
        .into_iter()
        .map(|p| [p[0] / fro, p[1] / fro, p[2] / fro])
        .collect())
}

pub fn normalize_pose(raw: &Pose3D) -> Result<Pose3D> {
    Pose3D::from_slice(&normalize_points(&raw.0)?)
}

/// The six torso edge lengths of a pose, in [`TORSO_EDGES`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TorsoLengths(pub [f64; 6]);

impl TorsoLengths {
    pub fn of(pose: &Pose3D) -> Self {
        let mut out = [0.0; 6];
        for (o, (a, b)) in out.iter_mut().zip(TORSO_EDGES) {
            *o = norm(sub(pose.joint(a), pose.joint(b)));
        }
        TorsoLengths(out)
    }

    /// Edge-wise mean over a set of poses.
    pub fn average<'a>(poses: impl IntoIterator<Item = &'a Pose3D>) -> Result<Self> {
        let mut acc = [0.0; 6];
        let mut count = 0usize;
        for p in poses {
            let l = Self::of(p);
            for k in 0..6 {
                acc[k] += l.0[k];
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::Domain("no poses to average torso lengths over".into()));
        }
        acc.iter_mut().for_each(|v| *v /= count as f64);
        Ok(TorsoLengths(acc))
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Rescales `estimate` so its torso length sum equals the reference sum.
pub fn recover_scale(estimate: &Pose3D, reference: &TorsoLengths) -> Result<Pose3D> {
    let lengths = TorsoLengths::of(estimate);
    if let Some(k) = lengths.0.iter().position(|&l| !(l > 0.0)) {
        let (a, b) = TORSO_EDGES[k];
        return Err(Error::Domain(format!(
            "torso edge {}-{} has zero length",
            a.name(),
            b.name()
        )));
    }
    Ok(estimate.scaled(reference.total() / lengths.total()))
}

/// Translates the pose so the pelvis sits at the origin.
pub fn root_align(pose: &Pose3D) -> Pose3D {
    let p = pose.joint(Joint::Pelvis);
    pose.translated([-p[0], -p[1], -p[2]])
}

/// Mean Euclidean distance between corresponding joints.
pub fn mpjpe(pred: &[[f64; 3]], gt: &[[f64; 3]]) -> f64 {
    assert_eq!(pred.len(), gt.len(), "mpjpe: joint count mismatch");
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(&a, &b)| norm(sub(a, b))).sum::<f64>() / pred.len() as f64
}
