//! Stick-figure rasteriser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image::Image;
use crate::pose::{Joint, Pose2D};

/// Limb groups, each with its own base colour so left and right differ.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Group {
    Torso,
    Head,
    LeftArm,
    RightArm,
    LeftLeg,
    RightLeg,
}

const BASE_COLORS: [(Group, [f64; 3]); 6] = [
    (Group::Torso, [215.0, 215.0, 200.0]),
    (Group::Head, [240.0, 200.0, 160.0]),
    (Group::LeftArm, [230.0, 60.0, 60.0]),
    (Group::RightArm, [60.0, 100.0, 235.0]),
    (Group::LeftLeg, [245.0, 175.0, 40.0]),
    (Group::RightLeg, [50.0, 205.0, 95.0]),
];

/// Segments in drawing order: torso first, limbs on top.
const LIMBS: [(Joint, Joint, Group); 16] = {
    use Joint::*;
    [
        (Pelvis, Spine, Group::Torso),
        (Spine, Thorax, Group::Torso),
        (Thorax, Neck, Group::Torso),
        (Pelvis, LeftHip, Group::Torso),
        (Pelvis, RightHip, Group::Torso),
        (Thorax, LeftShoulder, Group::Torso),
        (Thorax, RightShoulder, Group::Torso),
        (Neck, Head, Group::Head),
        (LeftHip, LeftKnee, Group::LeftLeg),
        (LeftKnee, LeftAnkle, Group::LeftLeg),
        (RightHip, RightKnee, Group::RightLeg),
        (RightKnee, RightAnkle, Group::RightLeg),
        (LeftShoulder, LeftElbow, Group::LeftArm),
        (LeftElbow, LeftWrist, Group::LeftArm),
        (RightShoulder, RightElbow, Group::RightArm),
        (RightElbow, RightWrist, Group::RightArm),
    ]
};

pub const LIMB_WIDTH: (f64, f64) = (2.5, 4.0);

/// Per-image random appearance.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderStyle {
    pub limb_width: [f64; 16],
    pub limb_color: [[f64; 3]; 16],
    pub background: [[f64; 3]; 2],
    pub noise_amplitude: f64,
    noise_seed: u64,
}

impl RenderStyle {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut group_color = [[0.0; 3]; 6];
        for (k, (_, base)) in BASE_COLORS.iter().enumerate() {
            for c in 0..3 {
                group_color[k][c] = (base[c] + rng.random_range(-25.0..=25.0)).clamp(0.0, 255.0);
            }
        }
        let mut limb_width = [0.0; 16];
        let mut limb_color = [[0.0; 3]; 16];
        for (i, (_, _, g)) in LIMBS.iter().enumerate() {
            let k = BASE_COLORS.iter().position(|(bg, _)| bg == g).unwrap();
            limb_color[i] = group_color[k];
            let w = rng.random_range(LIMB_WIDTH.0..=LIMB_WIDTH.1);
            limb_width[i] = if *g == Group::Head { w * 1.5 } else { w };
        }
        let mut background = [[0.0; 3]; 2];
        for b in &mut background {
            for c in b.iter_mut() {
                *c = rng.random_range(0.0..130.0);
            }
        }
        RenderStyle {
            limb_width,
            limb_color,
            background,
            noise_amplitude: rng.random_range(5.0..30.0),
            noise_seed: rng.random(),
        }
    }
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (ex, ey) = (a[0] + t * dx - p[0], a[1] + t * dy - p[1]);
    (ex * ex + ey * ey).sqrt()
}

/// Anti-aliased coverage of one segment at pixel centres, `clamp(w/2 + 0.5 - d, 0, 1)`.
fn coverage(size: usize, a: [f64; 2], b: [f64; 2], width: f64, mut visit: impl FnMut(usize, f64)) {
    let hw = width / 2.0;
    let reach = hw + 1.0;
    let lo = |u: f64, v: f64| ((u.min(v) - reach).floor().max(0.0)) as usize;
    let hi = |u: f64, v: f64| ((u.max(v) + reach).ceil().max(0.0) as usize).min(size);
    for r in lo(a[1], b[1])..hi(a[1], b[1]) {
        for c in lo(a[0], b[0])..hi(a[0], b[0]) {
            let d = segment_distance([c as f64 + 0.5, r as f64 + 0.5], a, b);
            let cov = (hw + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                visit(r * size + c, cov);
            }
        }
    }
}

/// Union (max) coverage of all limbs, row-major `size × size`.
pub fn limb_mask(pose: &Pose2D, size: usize, style: &RenderStyle) -> Vec<f64> {
    let mut mask = vec![0.0; size * size];
    for (i, (a, b, _)) in LIMBS.iter().enumerate() {
        coverage(size, pose.0[a.index()], pose.0[b.index()], style.limb_width[i], |k, cov| {
            mask[k] = f64::max(mask[k], cov)
        });
    }
    mask
}

/// Smooth value noise in `[-1, 1]` from a coarse random lattice.
fn value_noise(size: usize, seed: u64) -> Vec<f64> {
    const CELLS: usize = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lattice: Vec<f64> = (0..(CELLS + 1) * (CELLS + 1)).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let step = size as f64 / CELLS as f64;
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        let fy = (r as f64 + 0.5) / step;
        let y0 = (fy as usize).min(CELLS - 1);
        let ty = fy - y0 as f64;
        for c in 0..size {
            let fx = (c as f64 + 0.5) / step;
            let x0 = (fx as usize).min(CELLS - 1);
            let tx = fx - x0 as f64;
            let at = |y: usize, x: usize| lattice[y * (CELLS + 1) + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[r * size + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Draws the figure over a textured background on a `size × size` canvas.
pub fn render(pose: &Pose2D, size: usize, style_seed: u64) -> Image {
    render_styled(pose, size, &RenderStyle::from_seed(style_seed))
}

pub fn render_styled(pose: &Pose2D, size: usize, style: &RenderStyle) -> Image {
    let noise = value_noise(size, style.noise_seed);
    let mut buf = vec![[0.0f64; 3]; size * size];
    for r in 0..size {
        let t = (r as f64 + 0.5) / size as f64;
        for c in 0..size {
            let k = r * size + c;
            for ch in 0..3 {
                let g = style.background[0][ch] * (1.0 - t) + style.background[1][ch] * t;
                buf[k][ch] = g + style.noise_amplitude * noise[k];
            }
        }
    }
    for (i, (a, b, _)) in LIMBS.iter().enumerate() {
        let color = style.limb_color[i];
        coverage(size, pose.0[a.index()], pose.0[b.index()], style.limb_width[i], |k, cov| {
            for ch in 0..3 {
                buf[k][ch] = buf[k][ch] * (1.0 - cov) + color[ch] * cov;
            }
        });
    }
    let data = buf
        .iter()
        .flat_map(|px| px.map(|v| v.round().clamp(0.0, 255.0) as u8))
        .collect();
    Image { height: size, width: size, data }
}
