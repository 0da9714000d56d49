//! The optimisation loop.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{lambdas_at, lr_at, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::model::{image_tensor, Model};
use crate::pose::{Pose2D, Pose3D, TorsoLengths};
use crate::synth::{pca_color_augment, random_crop, DatasetFile, Image, RgbEigen};
use crate::tensor::{sgd_step, LayerMode, Real, Tape, BN_MOMENTUM};

pub const LOG_CSV_HEADER: &str = "epoch,iter,lr,lambda2d,lambda3d,loss2d,loss3d,test_mpjpe";
pub const LOG_FILE: &str = "train_log.csv";
pub const DIVERGED_CHECKPOINT: &str = "ckpt_diverged.p3ck";

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch}.p3ck")
}

/// One CSV row. Training rows hold means over a `log_period` window of
/// iterations; test rows hold test-set losses and MPJPE.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    /// Optimiser steps taken so far.
    pub iter: usize,
    pub lr: f64,
    pub lambda_2d: f64,
    pub lambda_3d: f64,
    pub loss_2d: f64,
    pub loss_3d: f64,
    pub test_mpjpe: Option<f64>,
}

impl LogRecord {
    pub fn is_test(&self) -> bool {
        self.test_mpjpe.is_some()
    }

    /// `λ2D · loss2d + λ3D · loss3d`.
    pub fn weighted_loss(&self) -> f64 {
        self.lambda_2d * self.loss_2d + self.lambda_3d * self.loss_3d
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn train_rows(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| !r.is_test())
    }

    pub fn test_rows(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.is_test())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{LOG_CSV_HEADER}\n");
        for r in &self.records {
            let m = r.test_mpjpe.map(|v| v.to_string()).unwrap_or_default();
            s += &format!(
                "{},{},{},{},{},{},{},{}\n",
                r.epoch, r.iter, r.lr, r.lambda_2d, r.lambda_3d, r.loss_2d, r.loss_3d, m
            );
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug)]
pub struct TrainOutcome<T: Real> {
    pub model: Model<T>,
    pub log: TrainLog,
    pub checkpoints: Vec<PathBuf>,
    /// Training-set average torso edge lengths used for scale recovery.
    pub torso: TorsoLengths,
}

/// Order-sensitive seed derivation for independent streams.
fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Prepared {
    images: Vec<Image>,
    poses2d: Vec<Pose2D>,
    poses3d: Vec<Pose3D>,
}

fn assemble(
    data: &DatasetFile,
    idx: &[usize],
    crop: usize,
    eigen: Option<&RgbEigen>,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Prepared> {
    let mut p = Prepared { images: vec![], poses2d: vec![], poses3d: vec![] };
    for &i in idx {
        let s = &data.samples[i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, i as u64));
        let (img, p2, _) = random_crop(&s.image, &s.pose2d, crop, &mut rng, !cfg.augment)?;
        let img = if cfg.augment { pca_color_augment(&img, eigen, &mut rng)? } else { img };
        p.images.push(img);
        p.poses2d.push(p2);
        p.poses3d.push(s.pose3d);
    }
    Ok(p)
}

fn write_checkpoint<T: Real>(model: &Model<T>, torso: &TorsoLengths, path: &Path) -> Result<()> {
    model.to_checkpoint(Some(torso)).write(path)
}

/// Runs the full schedule. With `out_dir`, checkpoints and the CSV log are
/// written there; `observer` sees every log record as it is produced.
pub fn train<T: Real>(
    mut model: Model<T>,
    train_set: &DatasetFile,
    test_set: &DatasetFile,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    observer: &mut dyn FnMut(&LogRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.len() < 2 {
        return Err(Error::Config(format!("training needs at least 2 samples, got {}", train_set.len())));
    }
    let crop = model.config.input_size;
    let torso = TorsoLengths::average(train_set.samples.iter().map(|s| &s.pose3d))?;
    let eigen = if cfg.augment { Some(RgbEigen::from_images(train_set.samples.iter().map(|s| &s.image))?) } else { None };
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut emit = |log: &mut TrainLog, r: LogRecord| {
        observer(&r);
        log.records.push(r);
    };
    let test_row = |model: &Model<T>, epoch: usize, iter: usize, sched_epoch: usize| -> Result<LogRecord> {
        let rep = evaluate(model, test_set, &torso)?;
        let w = lambdas_at(sched_epoch, cfg);
        Ok(LogRecord {
            epoch,
            iter,
            lr: lr_at(sched_epoch, cfg),
            lambda_2d: w.lambda_2d,
            lambda_3d: w.lambda_3d,
            loss_2d: rep.loss_2d.unwrap_or(f64::NAN),
            loss_3d: rep.loss_3d.unwrap_or(f64::NAN),
            test_mpjpe: Some(rep.mean),
        })
    };
    emit(&mut log, test_row(&model, 0, 0, 0)?);

    let mut iter = 0usize;
    let (mut win2, mut win3, mut win_n) = (0.0, 0.0, 0usize);
    for epoch in 0..cfg.epochs {
        let weights = lambdas_at(epoch, cfg);
        let sgd = cfg.sgd(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, u64::MAX)));
        for idx in order.chunks(cfg.batch).filter(|c| c.len() >= 2) {
            let batch = assemble(train_set, idx, crop, eigen.as_ref(), cfg, epoch)?;
            let step = (|| -> Result<(f64, f64)> {
                let targets = model.targets(&batch.poses2d, &batch.poses3d)?;
                let x = image_tensor::<T>(&batch.images.iter().collect::<Vec<_>>())?;
                let mut dropout = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, epoch as u64, (1 << 40) + iter as u64));
                let (grads, updates, l2, l3) = {
                    let mut tape = Tape::new(&model.store, LayerMode::Train);
                    let xv = tape.input(x)?;
                    let out = model.forward(&mut tape, xv, &mut dropout)?;
                    let loss = model.loss(&mut tape, &out, &targets, weights)?;
                    let total = tape.value(loss.total).values()[0].as_f64();
                    if !total.is_finite() {
                        return Err(Error::NonFinite(format!("loss is {total} at iteration {iter}")));
                    }
                    let l2 = tape.value(loss.loss_2d).values()[0].as_f64();
                    let l3 = tape.value(loss.loss_3d).values()[0].as_f64();
                    (tape.backward(loss.total)?, tape.take_running_updates(), l2, l3)
                };
                if grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                    return Err(Error::NonFinite(format!("non-finite gradient at iteration {iter}")));
                }
                model.store.set_grads(grads)?;
                model.store.apply_running_updates(updates, BN_MOMENTUM);
                sgd_step(&mut model.store, &sgd)?;
                Ok((l2, l3))
            })();
            let (l2, l3) = match step {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    if let Some(dir) = out_dir {
                        write_checkpoint(&model, &torso, &dir.join(DIVERGED_CHECKPOINT))?;
                        log.write(dir.join(LOG_FILE))?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            iter += 1;
            win2 += l2;
            win3 += l3;
            win_n += 1;
            if iter % cfg.log_period == 0 {
                emit(
                    &mut log,
                    LogRecord {
                        epoch,
                        iter,
                        lr: sgd.lr,
                        lambda_2d: weights.lambda_2d,
                        lambda_3d: weights.lambda_3d,
                        loss_2d: win2 / win_n as f64,
                        loss_3d: win3 / win_n as f64,
                        test_mpjpe: None,
                    },
                );
                (win2, win3, win_n) = (0.0, 0.0, 0);
            }
        }
        let done = epoch + 1;
        if done % cfg.eval_period == 0 || done == cfg.epochs {
            emit(&mut log, test_row(&model, done, iter, epoch)?);
            if let Some(dir) = out_dir {
                let path = dir.join(checkpoint_name(done));
                write_checkpoint(&model, &torso, &path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = out_dir {
        log.write(dir.join(LOG_FILE))?;
    }
    Ok(TrainOutcome { model, log, checkpoints, torso })
}
