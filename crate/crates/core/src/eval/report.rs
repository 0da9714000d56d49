//! Test-set evaluation and its tables.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{compose_pose, image_tensor, Model};
use crate::pose::{mpjpe, root_align, Pose3D, TorsoLengths};
use crate::synth::{action_name, random_crop, DatasetFile, Image};
use crate::tensor::{LayerMode, Real, Tape};

/// Samples per evaluation forward pass.
pub const EVAL_BATCH: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct ActionRow {
    pub action_id: u16,
    pub name: String,
    pub count: usize,
    pub mpjpe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Sorted by action id.
    pub rows: Vec<ActionRow>,
    /// Sample-weighted mean of the rows (mm).
    pub mean: f64,
    pub count: usize,
    /// Batch-mean unweighted losses, when the network was run.
    pub loss_2d: Option<f64>,
    pub loss_3d: Option<f64>,
}

pub const EVAL_CSV_HEADER: &str = "action,count,mpjpe_mm";

impl EvalReport {
    /// Aggregates per-sample `(action, error)` pairs.
    pub fn from_errors(errors: &[(u16, f64)]) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Domain("no samples to evaluate".into()));
        }
        let mut by_action: BTreeMap<u16, (usize, f64)> = BTreeMap::new();
        for &(a, e) in errors {
            let slot = by_action.entry(a).or_default();
            slot.0 += 1;
            slot.1 += e;
        }
        let rows: Vec<ActionRow> = by_action
            .into_iter()
            .map(|(a, (n, s))| ActionRow { action_id: a, name: action_name(a), count: n, mpjpe: s / n as f64 })
            .collect();
        let count = errors.len();
        let mean = rows.iter().map(|r| r.mpjpe * r.count as f64).sum::<f64>() / count as f64;
        Ok(EvalReport { rows, mean, count, loss_2d: None, loss_3d: None })
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{EVAL_CSV_HEADER}\n");
        for r in &self.rows {
            s += &format!("{},{},{:.4}\n", r.name, r.count, r.mpjpe);
        }
        s += &format!("mean,{},{:.4}\n", self.count, self.mean);
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>7} {:>12}", "action", "samples", "MPJPE (mm)")?;
        for r in &self.rows {
            writeln!(f, "{:<12} {:>7} {:>12.2}", r.name, r.count, r.mpjpe)?;
        }
        write!(f, "{:<12} {:>7} {:>12.2}", "mean", self.count, self.mean)
    }
}

/// MPJPE of given predictions after aligning both poses at the pelvis.
pub fn evaluate_poses(preds: &[Pose3D], data: &DatasetFile) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(Error::shape(
            "evaluate_poses",
            format!("{} predictions for {} samples", preds.len(), data.len()),
        ));
    }
    let errors: Vec<(u16, f64)> = preds
        .iter()
        .zip(&data.samples)
        .map(|(p, s)| (s.action_id, mpjpe(&root_align(p).0, &root_align(&s.pose3d).0)))
        .collect();
    EvalReport::from_errors(&errors)
}

/// Centre crops of every sample plus their shifted 2D joints.
pub(crate) fn centre_crops(data: &DatasetFile, crop: usize) -> Result<Vec<(Image, crate::pose::Pose2D)>> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    data.samples
        .iter()
        .map(|s| {
            let (img, p, _) = random_crop(&s.image, &s.pose2d, crop, &mut unused, true)?;
            Ok((img, p))
        })
        .collect()
}

/// Centre-crop inference over a dataset: MPJPE after scale recovery against
/// `reference`, plus the test losses.
pub fn evaluate<T: Real>(model: &Model<T>, data: &DatasetFile, reference: &TorsoLengths) -> Result<EvalReport> {
    let size = model.config.input_size;
    if data.height < size || data.width < size {
        return Err(Error::shape(
            "evaluate",
            format!("{}x{} images are smaller than the {size}px network input", data.height, data.width),
        ));
    }
    let crops = centre_crops(data, size)?;
    let weights = crate::pose::LossWeights { lambda_2d: 1.0, lambda_3d: 1.0 };
    let mut preds = Vec::with_capacity(data.len());
    let (mut l2, mut l3) = (0.0, 0.0);
    for (chunk, samples) in crops.chunks(EVAL_BATCH).zip(data.samples.chunks(EVAL_BATCH)) {
        let images: Vec<&Image> = chunk.iter().map(|(i, _)| i).collect();
        let p2: Vec<_> = chunk.iter().map(|(_, p)| *p).collect();
        let p3: Vec<_> = samples.iter().map(|s| s.pose3d).collect();
        let targets = model.targets(&p2, &p3)?;
        let x = image_tensor::<T>(&images)?;
        let mut tape = Tape::new(&model.store, LayerMode::Eval);
        let xv = tape.input(x)?;
        let out = model.forward(&mut tape, xv, &mut ChaCha8Rng::seed_from_u64(0))?;
        let loss = model.loss(&mut tape, &out, &targets, weights)?;
        let n = chunk.len() as f64;
        l2 += tape.value(loss.loss_2d).values()[0].as_f64() * n;
        l3 += tape.value(loss.loss_3d).values()[0].as_f64() * n;
        for p in model.decode(&tape, &out) {
            preds.push(compose_pose(&p, model.roots(), reference)?);
        }
    }
    let mut report = evaluate_poses(&preds, data)?;
    report.loss_2d = Some(l2 / data.len() as f64);
    report.loss_3d = Some(l3 / data.len() as f64);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_sample_weighted() {
        let r = EvalReport::from_errors(&[(0, 10.0), (0, 20.0), (2, 40.0)]).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].mpjpe, 15.0);
        assert_eq!(r.rows[1].name, "sitting");
        assert!((r.mean - 70.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.to_csv().lines().next(), Some(EVAL_CSV_HEADER));
        assert!(EvalReport::from_errors(&[]).is_err());
    }
}
