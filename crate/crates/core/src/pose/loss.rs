use super::grid::{cross_entropy_2d, GridDistribution};
use super::{non_root_joints, Pose3D, RootSet, N_JOINTS};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_2d: f64,
    pub lambda_3d: f64,
}

impl LossWeights {
    pub fn new(lambda_2d: f64, lambda_3d: f64) -> Result<Self> {
        if !(lambda_2d >= 0.0 && lambda_3d >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative, got ({lambda_2d}, {lambda_3d})"
            )));
        }
        Ok(LossWeights { lambda_2d, lambda_3d })
    }
}

/// Network outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    /// One distribution per joint.
    pub grids: Vec<GridDistribution>,
    /// Per root (in root-set order): 16 relative positions for the
    /// non-root joints in ascending joint order.
    pub relative: Vec<Vec<[f64; 3]>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    /// Unweighted `Σ_j L2D(j)`.
    pub loss_2d: f64,
    /// Unweighted `Σ_r Σ_{j≠r} L3D(j, r)`.
    pub loss_3d: f64,
    pub total: f64,
}

/// `‖pred - (J_j - J_r)‖²`.
pub fn loss_3d(pred_rel: [f64; 3], gt: &Pose3D, j: usize, r: usize) -> Result<f64> {
    if j == r {
        return Err(Error::Domain(format!("joint {j} is its own root")));
    }
    if j >= N_JOINTS || r >= N_JOINTS {
        return Err(Error::Domain(format!("joint pair ({j}, {r}) out of range")));
    }
    let (a, b) = (gt.0[j], gt.0[r]);
    Ok((0..3).map(|k| (pred_rel[k] - (a[k] - b[k])).powi(2)).sum())
}

/// `λ2D Σ_j L2D(j) + λ3D Σ_{r∈R} Σ_{j≠r} L3D(j, r)` for one sample.
pub fn total_loss(
    pred: &PosePrediction,
    grid_targets: &[GridDistribution],
    gt: &Pose3D,
    weights: LossWeights,
    roots: &RootSet,
) -> Result<LossBreakdown> {
    if pred.grids.len() != N_JOINTS || grid_targets.len() != N_JOINTS {
        return Err(Error::Config(format!(
            "need {N_JOINTS} grid predictions and targets, got {} and {}",
            pred.grids.len(),
            grid_targets.len()
        )));
    }
    if pred.relative.len() != roots.len() {
        return Err(Error::Config(format!(
            "{} relative blocks for {} roots",
            pred.relative.len(),
            roots.len()
        )));
    }
    let mut loss_2d = 0.0;
    for (p, t) in pred.grids.iter().zip(grid_targets) {
        loss_2d += cross_entropy_2d(p, t)?;
    }
    let mut loss_3d = 0.0;
    for (&r, block) in roots.indices().iter().zip(&pred.relative) {
        if block.len() != N_JOINTS - 1 {
            return Err(Error::Config(format!(
                "root {r}: {} relative predictions, expected {}",
                block.len(),
                N_JOINTS - 1
            )));
        }
        for (j, &rel) in non_root_joints(r).zip(block) {
            loss_3d += loss_3d_unchecked(rel, gt, j, r);
        }
    }
    Ok(LossBreakdown {
        loss_2d,
        loss_3d,
        total: weights.lambda_2d * loss_2d + weights.lambda_3d * loss_3d,
    })
}

fn loss_3d_unchecked(rel: [f64; 3], gt: &Pose3D, j: usize, r: usize) -> f64 {
    (0..3).map(|k| (rel[k] - (gt.0[j][k] - gt.0[r][k])).powi(2)).sum()
}
