//! Articulated 17-joint skeleton and forward kinematics.
//!
//! Body frame: +x towards the subject's left, +y up, +z the facing
//! direction. All-zero angles give a T-pose with arms along ±x.

use rand::Rng;

use crate::error::{Error, Result};
use crate::pose::{Joint, Pose3D, N_JOINTS};

pub type Mat3 = [[f64; 3]; 3];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn rot_x(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(t: f64) -> Mat3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Local joint rotation `Rz(z) · Ry(y) · Rx(x)`.
pub fn euler(a: [f64; 3]) -> Mat3 {
    mat_mul(&rot_z(a[2]), &mat_mul(&rot_y(a[1]), &rot_x(a[0])))
}

/// Closed interval of admissible angles (radians).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Limit {
    pub lo: f64,
    pub hi: f64,
}

impl Limit {
    pub const FIXED: Limit = Limit { lo: 0.0, hi: 0.0 };

    pub const fn new(lo: f64, hi: f64) -> Self {
        Limit { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Per-joint Euler angles `(x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointAngles(pub [[f64; 3]; N_JOINTS]);

impl JointAngles {
    pub fn zero() -> Self {
        JointAngles([[0.0; 3]; N_JOINTS])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSpec {
    pub names: [&'static str; N_JOINTS],
    /// `None` only for the pelvis.
    pub parent: [Option<usize>; N_JOINTS],
    /// Unit rest direction of the bone ending at each joint.
    pub rest_dir: [[f64; 3]; N_JOINTS],
    /// Canonical bone length (mm) of the bone ending at each joint.
    pub bone_length: [f64; N_JOINTS],
    pub limits: [[Limit; 3]; N_JOINTS],
}

impl Default for SkeletonSpec {
    fn default() -> Self {
        use Joint::*;
        let mut parent = [None; N_JOINTS];
        let mut rest_dir = [[0.0; 3]; N_JOINTS];
        let mut bone_length = [0.0; N_JOINTS];
        let (left, right, up, down) = ([1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]);
        let bones: [(Joint, Joint, [f64; 3], f64); 16] = [
            (RightHip, Pelvis, right, 130.0),
            (RightKnee, RightHip, down, 450.0),
            (RightAnkle, RightKnee, down, 440.0),
            (LeftHip, Pelvis, left, 130.0),
            (LeftKnee, LeftHip, down, 450.0),
            (LeftAnkle, LeftKnee, down, 440.0),
            (Spine, Pelvis, up, 230.0),
            (Thorax, Spine, up, 250.0),
            (Neck, Thorax, up, 100.0),
            (Head, Neck, up, 160.0),
            (LeftShoulder, Thorax, left, 150.0),
            (LeftElbow, LeftShoulder, left, 280.0),
            (LeftWrist, LeftElbow, left, 250.0),
            (RightShoulder, Thorax, right, 150.0),
            (RightElbow, RightShoulder, right, 280.0),
            (RightWrist, RightElbow, right, 250.0),
        ];
        for (child, par, dir, len) in bones {
            parent[child.index()] = Some(par.index());
            rest_dir[child.index()] = dir;
            bone_length[child.index()] = len;
        }
        let f = Limit::FIXED;
        let mut limits = [[f; 3]; N_JOINTS];
        let l = Limit::new;
        limits[Pelvis.index()] = [l(-0.3, 0.3), l(-0.3, 0.3), l(-0.2, 0.2)];
        limits[RightHip.index()] = [l(-1.9, 0.6), l(-0.4, 0.4), l(-0.5, 0.3)];
        limits[LeftHip.index()] = [l(-1.9, 0.6), l(-0.4, 0.4), l(-0.3, 0.5)];
        limits[RightKnee.index()] = [l(0.0, 2.2), f, f];
        limits[LeftKnee.index()] = [l(0.0, 2.2), f, f];
        limits[Spine.index()] = [l(-0.3, 0.6), l(-0.4, 0.4), l(-0.3, 0.3)];
        limits[Thorax.index()] = [l(-0.2, 0.4), l(-0.3, 0.3), l(-0.2, 0.2)];
        limits[Neck.index()] = [l(-0.4, 0.5), l(-0.6, 0.6), l(-0.3, 0.3)];
        limits[LeftShoulder.index()] = [l(-0.5, 0.5), l(-1.6, 0.6), l(-1.5, 1.2)];
        limits[RightShoulder.index()] = [l(-0.5, 0.5), l(-0.6, 1.6), l(-1.2, 1.5)];
        limits[LeftElbow.index()] = [f, l(-2.4, 0.0), f];
        limits[RightElbow.index()] = [f, l(0.0, 2.4), f];
        SkeletonSpec {
            names: crate::pose::JOINT_NAMES,
            parent,
            rest_dir,
            bone_length,
            limits,
        }
    }
}

impl SkeletonSpec {
    /// Parents always precede their children in joint order.
    pub fn validate(&self) -> Result<()> {
        for j in 0..N_JOINTS {
            match self.parent[j] {
                None if j == Joint::Pelvis.index() => {}
                None => return Err(Error::Config(format!("joint {} has no parent", self.names[j]))),
                Some(p) if p >= j => {
                    return Err(Error::Config(format!(
                        "joint {} listed before its parent",
                        self.names[j]
                    )))
                }
                Some(_) if !(self.bone_length[j] > 0.0) => {
                    return Err(Error::Config(format!("bone to {} has no length", self.names[j])))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..N_JOINTS).filter_map(|j| self.parent[j].map(|p| (p, j)))
    }
}

/// Joint positions (mm, body frame, pelvis at the origin) for the given
/// angles, with every bone scaled by `scale`.
pub fn forward_kinematics(spec: &SkeletonSpec, angles: &JointAngles, scale: f64) -> Pose3D {
    let mut global: [Mat3; N_JOINTS] = [[[0.0; 3]; 3]; N_JOINTS];
    let mut pos = [[0.0; 3]; N_JOINTS];
    for j in 0..N_JOINTS {
        let local = euler(angles.0[j]);
        match spec.parent[j] {
            None => global[j] = local,
            Some(p) => {
                let off = mat_vec(&global[p], spec.rest_dir[j]);
                let len = spec.bone_length[j] * scale;
                for k in 0..3 {
                    pos[j][k] = pos[p][k] + off[k] * len;
                }
                global[j] = mat_mul(&global[p], &local);
            }
        }
    }
    Pose3D(pos)
}

/// Synthetic action regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Standing = 0,
    Walking = 1,
    Sitting = 2,
    Reaching = 3,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Standing, Action::Walking, Action::Sitting, Action::Reaching];

    pub fn id(self) -> u16 {
        self as u16
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::Standing => "standing",
            Action::Walking => "walking",
            Action::Sitting => "sitting",
            Action::Reaching => "reaching",
        }
    }

    pub fn from_id(id: u16) -> Option<Action> {
        Action::ALL.get(id as usize).copied()
    }
}

/// Name for an action id, or `action<id>` for ids outside the synthetic set.
pub fn action_name(id: u16) -> String {
    Action::from_id(id).map_or_else(|| format!("action{id}"), |a| a.name().to_string())
}

fn around<R: Rng + ?Sized>(rng: &mut R, center: f64, spread: f64) -> f64 {
    center + rng.random_range(-spread..=spread)
}

/// Random angles for an action; every value is clamped into the spec limits.
pub fn sample_angles<R: Rng + ?Sized>(spec: &SkeletonSpec, action: Action, rng: &mut R) -> JointAngles {
    use Joint::*;
    let mut a = JointAngles::zero();
    let set = |a: &mut JointAngles, j: Joint, v: [f64; 3]| a.0[j.index()] = v;
    // Mild posture noise everywhere.
    set(&mut a, Pelvis, [around(rng, 0.0, 0.1), around(rng, 0.0, 0.1), around(rng, 0.0, 0.05)]);
    set(&mut a, Spine, [around(rng, 0.05, 0.15), around(rng, 0.0, 0.2), around(rng, 0.0, 0.1)]);
    set(&mut a, Thorax, [around(rng, 0.05, 0.1), around(rng, 0.0, 0.15), around(rng, 0.0, 0.1)]);
    set(&mut a, Neck, [around(rng, 0.0, 0.3), around(rng, 0.0, 0.4), around(rng, 0.0, 0.2)]);
    match action {
        Action::Standing => {
            for (hip, knee) in [(LeftHip, LeftKnee), (RightHip, RightKnee)] {
                set(&mut a, hip, [around(rng, -0.05, 0.2), around(rng, 0.0, 0.2), around(rng, 0.0, 0.15)]);
                set(&mut a, knee, [around(rng, 0.1, 0.1), 0.0, 0.0]);
            }
            set(&mut a, LeftShoulder, [around(rng, 0.0, 0.3), around(rng, 0.0, 0.4), around(rng, -1.2, 0.25)]);
            set(&mut a, RightShoulder, [around(rng, 0.0, 0.3), around(rng, 0.0, 0.4), around(rng, 1.2, 0.25)]);
            set(&mut a, LeftElbow, [0.0, around(rng, -0.4, 0.4), 0.0]);
            set(&mut a, RightElbow, [0.0, around(rng, 0.4, 0.4), 0.0]);
        }
        Action::Walking => {
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.3..0.7);
            let s = phase.sin() * amp;
            set(&mut a, LeftHip, [-s + around(rng, 0.0, 0.05), around(rng, 0.0, 0.1), 0.0]);
            set(&mut a, RightHip, [s + around(rng, 0.0, 0.05), around(rng, 0.0, 0.1), 0.0]);
            let bend = |v: f64| 0.15 + 0.9 * v.max(0.0);
            set(&mut a, LeftKnee, [bend(phase.cos() * amp), 0.0, 0.0]);
            set(&mut a, RightKnee, [bend(-phase.cos() * amp), 0.0, 0.0]);
            // Arms swing against the legs: Ry moves a lowered arm fore/aft.
            set(&mut a, LeftShoulder, [0.0, -s * 0.9 + around(rng, 0.0, 0.1), around(rng, -1.35, 0.1)]);
            set(&mut a, RightShoulder, [0.0, -s * 0.9 + around(rng, 0.0, 0.1), around(rng, 1.35, 0.1)]);
            set(&mut a, LeftElbow, [0.0, around(rng, -0.5, 0.3), 0.0]);
            set(&mut a, RightElbow, [0.0, around(rng, 0.5, 0.3), 0.0]);
        }
        Action::Sitting => {
            for (hip, knee) in [(LeftHip, LeftKnee), (RightHip, RightKnee)] {
                set(&mut a, hip, [around(rng, -1.5, 0.2), around(rng, 0.0, 0.2), around(rng, 0.0, 0.15)]);
                set(&mut a, knee, [around(rng, 1.5, 0.25), 0.0, 0.0]);
            }
            set(&mut a, LeftShoulder, [0.0, around(rng, -0.6, 0.4), around(rng, -1.1, 0.3)]);
            set(&mut a, RightShoulder, [0.0, around(rng, 0.6, 0.4), around(rng, 1.1, 0.3)]);
            set(&mut a, LeftElbow, [0.0, around(rng, -1.2, 0.5), 0.0]);
            set(&mut a, RightElbow, [0.0, around(rng, 1.2, 0.5), 0.0]);
        }
        Action::Reaching => {
            for (hip, knee) in [(LeftHip, LeftKnee), (RightHip, RightKnee)] {
                set(&mut a, hip, [around(rng, -0.1, 0.25), around(rng, 0.0, 0.2), around(rng, 0.0, 0.2)]);
                set(&mut a, knee, [around(rng, 0.2, 0.2), 0.0, 0.0]);
            }
            let both = rng.random::<bool>();
            let left_up = both || rng.random::<bool>();
            let right_up = both || !left_up;
            let raise = |rng: &mut R, up: bool, sign: f64| {
                if up {
                    [0.0, sign * around(rng, -0.8, 0.7), sign * around(rng, 0.5, 0.6)]
                } else {
                    [0.0, sign * around(rng, 0.0, 0.3), sign * around(rng, -1.2, 0.2)]
                }
            };
            let la = raise(rng, left_up, 1.0);
            let ra = raise(rng, right_up, -1.0);
            set(&mut a, LeftShoulder, la);
            set(&mut a, RightShoulder, ra);
            set(&mut a, LeftElbow, [0.0, around(rng, -0.5, 0.5), 0.0]);
            set(&mut a, RightElbow, [0.0, around(rng, 0.5, 0.5), 0.0]);
        }
    }
    for j in 0..N_JOINTS {
        for k in 0..3 {
            a.0[j][k] = spec.limits[j][k].clamp(a.0[j][k]);
        }
    }
    a
}

pub const SCALE_RANGE: (f64, f64) = (0.85, 1.15);

/// Random pose of a uniformly drawn action with every bone scaled by `scale`.
pub fn sample_pose<R: Rng + ?Sized>(spec: &SkeletonSpec, scale: f64, rng: &mut R) -> Result<Pose3D> {
    let action = Action::ALL[rng.random_range(0..Action::ALL.len())];
    sample_action_pose(spec, action, scale, rng)
}

/// Random pose of the given action with every bone scaled by `scale`.
pub fn sample_action_pose<R: Rng + ?Sized>(
    spec: &SkeletonSpec,
    action: Action,
    scale: f64,
    rng: &mut R,
) -> Result<Pose3D> {
    if !(SCALE_RANGE.0..=SCALE_RANGE.1).contains(&scale) {
        return Err(Error::Config(format!(
            "subject scale {scale} outside [{}, {}]",
            SCALE_RANGE.0, SCALE_RANGE.1
        )));
    }
    let angles = sample_angles(spec, action, rng);
    Ok(forward_kinematics(spec, &angles, scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::norm;
    use crate::pose::sub;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_spec_is_a_valid_tree() {
        SkeletonSpec::default().validate().unwrap();
        assert_eq!(SkeletonSpec::default().bones().count(), 16);
    }

    #[test]
    fn zero_angles_give_t_pose() {
        let spec = SkeletonSpec::default();
        let p = forward_kinematics(&spec, &JointAngles::zero(), 1.0);
        // Arms straight out along ±x at thorax height.
        let thorax = p.joint(Joint::Thorax);
        let lw = p.joint(Joint::LeftWrist);
        assert!((lw[0] - (150.0 + 280.0 + 250.0)).abs() < 1e-9);
        assert!((lw[1] - thorax[1]).abs() < 1e-9);
        let ra = p.joint(Joint::RightAnkle);
        assert!((ra[1] + 890.0).abs() < 1e-9 && (ra[0] + 130.0).abs() < 1e-9);
        for (par, child) in spec.bones() {
            let l = norm(sub(p.0[child], p.0[par]));
            assert!((l - spec.bone_length[child]).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_bones_have_scaled_lengths() {
        let spec = SkeletonSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..200 {
            let scale = 0.85 + 0.3 * (i as f64 / 199.0);
            let action = Action::ALL[i % 4];
            let p = sample_action_pose(&spec, action, scale, &mut rng).unwrap();
            for (par, child) in spec.bones() {
                let l = norm(sub(p.0[child], p.0[par]));
                assert!((l - scale * spec.bone_length[child]).abs() < 1e-9);
            }
        }
        assert!(sample_pose(&spec, 1.3, &mut rng).is_err());
        assert!(sample_pose(&spec, 0.8, &mut rng).is_err());
        assert!(sample_pose(&spec, 1.0, &mut rng).is_ok());
    }

    #[test]
    fn angle_marginals_stay_within_limits() {
        let spec = SkeletonSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lo = [[f64::INFINITY; 3]; N_JOINTS];
        let mut hi = [[f64::NEG_INFINITY; 3]; N_JOINTS];
        for i in 0..10_000 {
            let a = sample_angles(&spec, Action::ALL[i % 4], &mut rng);
            for j in 0..N_JOINTS {
                for k in 0..3 {
                    lo[j][k] = lo[j][k].min(a.0[j][k]);
                    hi[j][k] = hi[j][k].max(a.0[j][k]);
                }
            }
        }
        for j in 0..N_JOINTS {
            for k in 0..3 {
                let lim = spec.limits[j][k];
                assert!(lim.contains(lo[j][k]) && lim.contains(hi[j][k]), "joint {j} axis {k}");
            }
        }
        // Knees actually bend across the corpus.
        let knee = Joint::LeftKnee.index();
        assert!(hi[knee][0] - lo[knee][0] > 1.0);
    }
}
