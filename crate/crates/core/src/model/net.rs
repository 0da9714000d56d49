//! Shared conv trunk, 2D grid-classification branch and per-root 3D heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ConvSpec, NetworkConfig, PoolSpec, Variant, POOL_AFTER};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::pose::{
    average_multi_root, non_root_joints, normalize_pose, recover_scale, soft_label, GridDistribution, Joint,
    LossWeights, Pose2D, Pose3D, PosePrediction, RootSet, TorsoLengths, N_JOINTS,
};
use crate::synth::Image;
use crate::tensor::{
    grad_check, BufferId, Checkpoint, GradCheckOptions, GradCheckReport, LayerMode, ParamId, ParamStore, Real, Tape,
    Tensor, Var,
};

/// Standard deviation of the output-layer weights at initialisation.
pub const OUTPUT_INIT_STD: f64 = 0.01;

pub const REL_WIDTH: usize = (N_JOINTS - 1) * 3;

const META_CONFIG: &str = "meta.config";
const META_VARIANT: &str = "meta.variant";
const META_TORSO: &str = "meta.torso_lengths";

#[derive(Clone, Debug)]
struct Bn {
    scale: ParamId,
    shift: ParamId,
    mean: BufferId,
    var: BufferId,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
    bn: Option<Bn>,
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    bn: Bn,
    spec: ConvSpec,
    pool: Option<PoolSpec>,
}

#[derive(Clone, Debug)]
struct Head {
    hidden: Dense,
    out: Dense,
}

/// Parameters plus wiring for one ablation variant.
#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub config: NetworkConfig,
    pub variant: Variant,
    pub store: ParamStore<T>,
    roots: RootSet,
    trunk: Vec<ConvBlock>,
    fc1_2d: Dense,
    fc2_2d: Dense,
    fc1_3d: Dense,
    fc_probs_2d: Option<Dense>,
    heads: Vec<Head>,
    block_probs_gradient: bool,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    /// `[B, 17 · N_g²]`, per-joint softmax blocks in joint order.
    pub probs: Var,
    /// Per root: `[B, 48]`, non-root joints ascending, `(x, y, z)` each.
    pub heads: Vec<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    /// Batch mean of `Σ_j` cross-entropy.
    pub loss_2d: Var,
    /// Batch mean of `Σ_r Σ_j` squared error.
    pub loss_3d: Var,
    pub total: Var,
}

/// Training targets for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Targets<T> {
    pub batch: usize,
    /// `[B, 17 · N_g²]` soft labels.
    pub grids: Vec<T>,
    /// Per root, `[B, 48]` relative coordinates of the normalised pose.
    pub relative: Vec<Vec<T>>,
}

fn add_bn<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Bn {
    Bn {
        scale: store.add(format!("{name}.bn.scale"), Tensor::full([width], T::one()), true),
        shift: store.add(format!("{name}.bn.shift"), Tensor::zeros([width]), true),
        mean: store.add_buffer(format!("{name}.bn.running_mean"), Tensor::zeros([width])),
        var: store.add_buffer(format!("{name}.bn.running_var"), Tensor::full([width], T::one())),
    }
}

fn add_dense<T: Real, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    input: usize,
    output: usize,
    bn: bool,
    rng: &mut R,
) -> Dense {
    // Output layers start near zero so the first updates are not spent
    // shrinking outsized logits and coordinates.
    let w = if bn {
        store.add_he_normal(format!("{name}.weight"), [input, output], input, rng)
    } else {
        store.add_normal(format!("{name}.weight"), [input, output], OUTPUT_INIT_STD, rng)
    };
    let b = store.add(format!("{name}.bias"), Tensor::zeros([output]), true);
    let bn = bn.then(|| add_bn(store, name, output));
    Dense { w, b, bn }
}

impl<T: Real> Model<T> {
    pub fn build<R: Rng + ?Sized>(config: &NetworkConfig, variant: Variant, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut trunk = Vec::new();
        let mut channels = 3;
        let mut pools = config.pools.iter();
        for (i, spec) in config.convs.iter().enumerate() {
            let name = format!("conv{}", i + 1);
            let fan_in = channels * spec.kernel * spec.kernel;
            let w = store.add_he_normal(
                format!("{name}.weight"),
                [spec.filters, channels, spec.kernel, spec.kernel],
                fan_in,
                rng,
            );
            let b = store.add(format!("{name}.bias"), Tensor::zeros([spec.filters]), true);
            let bn = add_bn(&mut store, &name, spec.filters);
            let pool = POOL_AFTER.contains(&i).then(|| *pools.next().unwrap());
            trunk.push(ConvBlock { w, b, bn, spec: *spec, pool });
            channels = spec.filters;
        }
        let feat = config.feature_dim()?;
        let fc1_2d = add_dense(&mut store, "fc1_2d", feat, config.fc1_2d, true, rng);
        let fc2_2d = add_dense(&mut store, "fc2_2d", config.fc1_2d, config.fc2_2d(), false, rng);
        let fc1_3d = add_dense(&mut store, "fc1_3d", feat, config.fc1_3d, true, rng);
        let fc_probs_2d = variant
            .injects_probs()
            .then(|| add_dense(&mut store, "fc_probs_2d", config.fc2_2d(), config.fc_probs_2d, true, rng));
        let roots = config.roots_for(variant);
        let joint_in = config.fc_2d3d(variant);
        let heads = roots
            .indices()
            .iter()
            .map(|&r| {
                let name = format!("fc2_3d.{}", Joint::ALL[r].name());
                Head {
                    hidden: add_dense(&mut store, &format!("{name}.hidden"), joint_in, config.fc2_3d, true, rng),
                    out: add_dense(&mut store, &format!("{name}.out"), config.fc2_3d, REL_WIDTH, false, rng),
                }
            })
            .collect();
        Ok(Model {
            config: config.clone(),
            variant,
            store,
            roots,
            trunk,
            fc1_2d,
            fc2_2d,
            fc1_3d,
            fc_probs_2d,
            heads,
            block_probs_gradient: true,
        })
    }

    pub fn roots(&self) -> &RootSet {
        &self.roots
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Names of the parameters reached only through the 2D loss: the two
    /// 2D fully connected layers and their batchnorm.
    pub fn branch_2d_params(&self) -> Vec<ParamId> {
        self.store
            .ids()
            .filter(|&id| {
                let n = &self.store.param(id).name;
                n.starts_with("fc1_2d.") || n.starts_with("fc2_2d.")
            })
            .collect()
    }

    /// Lets 3D-loss gradients leak into the 2D branch. Only for checking
    /// that the isolation test can tell the difference.
    #[doc(hidden)]
    pub fn set_probs_gradient_blocked(&mut self, blocked: bool) {
        self.block_probs_gradient = blocked;
    }

    /// Same architecture and parameter values in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            variant: self.variant,
            store: self.store.cast(),
            roots: self.roots.clone(),
            trunk: self.trunk.clone(),
            fc1_2d: self.fc1_2d.clone(),
            fc2_2d: self.fc2_2d.clone(),
            fc1_3d: self.fc1_3d.clone(),
            fc_probs_2d: self.fc_probs_2d.clone(),
            heads: self.heads.clone(),
            block_probs_gradient: self.block_probs_gradient,
        }
    }

    fn bn(&self, tape: &mut Tape<'_, T>, x: Var, bn: &Bn) -> Result<Var> {
        let (s, h) = (tape.param(bn.scale), tape.param(bn.shift));
        tape.batchnorm(x, s, h, bn.mean, bn.var)
    }

    /// Linear, then (for hidden layers) batchnorm, relu and dropout.
    fn dense<R: Rng + ?Sized>(&self, tape: &mut Tape<'_, T>, x: Var, d: &Dense, rng: &mut R) -> Result<Var> {
        let (w, b) = (tape.param(d.w), tape.param(d.b));
        let y = tape.linear(x, w, b)?;
        match &d.bn {
            None => Ok(y),
            Some(bn) => {
                let y = self.bn(tape, y, bn)?;
                let y = tape.relu(y)?;
                tape.dropout(y, self.config.dropout, rng)
            }
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<'_, T>, images: Var, rng: &mut R) -> Result<Outputs> {
        let s = self.config.input_size;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::shape("forward", format!("expected [B, 3, {s}, {s}] images, got {shape:?}")));
        }
        let batch = shape[0];
        let mut x = images;
        for c in &self.trunk {
            let (w, b) = (tape.param(c.w), tape.param(c.b));
            x = tape.conv2d(x, w, b, c.spec.stride, c.spec.pad)?;
            x = self.bn(tape, x, &c.bn)?;
            x = tape.relu(x)?;
            if let Some(p) = c.pool {
                x = tape.maxpool(x, p.kernel, p.stride)?;
            }
        }
        let feat = tape.reshape(x, [batch, self.config.feature_dim()?])?;

        let h2 = self.dense(tape, feat, &self.fc1_2d, rng)?;
        let logits = self.dense(tape, h2, &self.fc2_2d, rng)?;
        let probs = tape.softmax(logits, self.config.grid_classes())?;

        let mut joint = self.dense(tape, feat, &self.fc1_3d, rng)?;
        if let Some(fp) = &self.fc_probs_2d {
            let src = if self.block_probs_gradient { tape.stop_gradient(probs)? } else { probs };
            let injected = self.dense(tape, src, fp, rng)?;
            joint = tape.concat(&[joint, injected])?;
        }
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let z = self.dense(tape, joint, &h.hidden, rng)?;
            heads.push(self.dense(tape, z, &h.out, rng)?);
        }
        Ok(Outputs { probs, heads })
    }

    /// Batch-mean `λ2D Σ_j L2D + λ3D Σ_r Σ_j L3D`.
    pub fn loss(&self, tape: &mut Tape<'_, T>, out: &Outputs, targets: &Targets<T>, w: LossWeights) -> Result<LossVars> {
        if targets.relative.len() != out.heads.len() {
            return Err(Error::shape(
                "loss",
                format!("{} target blocks for {} heads", targets.relative.len(), out.heads.len()),
            ));
        }
        let inv_b = 1.0 / targets.batch as f64;
        let ce = tape.soft_cross_entropy(out.probs, &targets.grids)?;
        let loss_2d = tape.scale(ce, inv_b)?;
        let mut se_total: Option<Var> = None;
        for (&h, t) in out.heads.iter().zip(&targets.relative) {
            let se = tape.squared_error(h, t)?;
            se_total = Some(match se_total {
                None => se,
                Some(acc) => tape.add(acc, se)?,
            });
        }
        let loss_3d = tape.scale(se_total.expect("at least one head"), inv_b)?;
        let a = tape.scale(loss_2d, w.lambda_2d)?;
        let b = tape.scale(loss_3d, w.lambda_3d)?;
        let total = tape.add(a, b)?;
        Ok(LossVars { loss_2d, loss_3d, total })
    }

    /// Soft labels from crop-frame 2D joints and relative targets from the
    /// normalised camera-frame 3D poses.
    pub fn targets(&self, poses2d: &[Pose2D], poses3d: &[Pose3D]) -> Result<Targets<T>> {
        if poses2d.len() != poses3d.len() || poses2d.is_empty() {
            return Err(Error::shape(
                "targets",
                format!("{} 2D poses vs {} 3D poses", poses2d.len(), poses3d.len()),
            ));
        }
        let geom = self.config.grid()?;
        let mut grids = Vec::with_capacity(poses2d.len() * self.config.fc2_2d());
        for p in poses2d {
            for &y in &p.0 {
                grids.extend(soft_label(y, &geom)?.probs().iter().map(|&v| T::lit(v)));
            }
        }
        let normalized = poses3d.iter().map(normalize_pose).collect::<Result<Vec<_>>>()?;
        let relative = self
            .roots
            .indices()
            .iter()
            .map(|&r| {
                normalized
                    .iter()
                    .flat_map(|p| p.relative_to(r).into_iter().flatten().map(T::lit))
                    .collect()
            })
            .collect();
        Ok(Targets { batch: poses2d.len(), grids, relative })
    }

    /// Eval-mode outputs for a batch of images.
    pub fn predict(&self, images: Tensor<T>) -> Result<Vec<PosePrediction>> {
        let mut tape = Tape::new(&self.store, LayerMode::Eval);
        let x = tape.input(images)?;
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut tape, x, &mut unused)?;
        Ok(self.decode(&tape, &out))
    }

    /// Per-sample distributions and root blocks from a finished forward pass.
    pub fn decode(&self, tape: &Tape<'_, T>, out: &Outputs) -> Vec<PosePrediction> {
        let g = self.config.grid_classes();
        let probs = tape.value(out.probs).values();
        let batch = probs.len() / (g * N_JOINTS);
        let mut preds = Vec::with_capacity(batch);
        for b in 0..batch {
            let grids = (0..N_JOINTS)
                .map(|j| {
                    let row = &probs[(b * N_JOINTS + j) * g..(b * N_JOINTS + j + 1) * g];
                    GridDistribution::from_softmax(row.iter().map(|v| v.as_f64()).collect())
                })
                .collect();
            let relative = out
                .heads
                .iter()
                .map(|&h| {
                    let v = &tape.value(h).values()[b * REL_WIDTH..(b + 1) * REL_WIDTH];
                    v.chunks_exact(3).map(|c| [c[0].as_f64(), c[1].as_f64(), c[2].as_f64()]).collect()
                })
                .collect();
            preds.push(PosePrediction { grids, relative });
        }
        preds
    }

    /// Full pipeline for one centre-cropped image: per-root poses, averaged
    /// fusion, then torso-length scale recovery.
    pub fn predict_pose(&self, image: &Image, reference: &TorsoLengths) -> Result<Pose3D> {
        let pred = self.predict(image_tensor(&[image])?)?;
        compose_pose(&pred[0], &self.roots, reference)
    }

    pub fn to_checkpoint(&self, torso: Option<&TorsoLengths>) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store);
        let text: Vec<f64> = self.config.to_kv().bytes().map(f64::from).collect();
        ck.push::<f64>(META_CONFIG, &[text.len()], &text);
        ck.push::<f64>(META_VARIANT, &[1], &[self.variant.id() as f64]);
        if let Some(t) = torso {
            ck.push::<f64>(META_TORSO, &[6], &t.0);
        }
        ck
    }

    /// Rebuilds the model recorded in a checkpoint, plus its torso reference
    /// if one was stored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<TorsoLengths>)> {
        let bytes: Vec<u8> = ck.values::<f64>(META_CONFIG)?.into_iter().map(|v| v as u8).collect();
        let text = String::from_utf8(bytes).map_err(|_| Error::Config("checkpoint config is not text".into()))?;
        let mut kv = KeyValues::parse(&text, "checkpoint config")?;
        let config = NetworkConfig::from_kv(&mut kv, super::config::Preset::Desk)?;
        kv.finish()?;
        let id = ck.values::<f64>(META_VARIANT)?;
        let variant = id
            .first()
            .and_then(|&v| Variant::from_id(v as u8))
            .ok_or_else(|| Error::Config("checkpoint variant tag is invalid".into()))?;
        let mut model = Self::build(&config, variant, &mut ChaCha8Rng::seed_from_u64(0))?;
        ck.load_into(&mut model.store)?;
        let torso = match ck.get(META_TORSO) {
            None => None,
            Some(_) => {
                let v = ck.values::<f64>(META_TORSO)?;
                let arr: [f64; 6] = v
                    .try_into()
                    .map_err(|_| Error::Config("torso reference must have 6 entries".into()))?;
                Some(TorsoLengths(arr))
            }
        };
        Ok((model, torso))
    }
}

impl Model<f64> {
    /// Finite-difference check of the total loss on one batch. Dropout masks
    /// are redrawn from `dropout_seed` on every evaluation.
    pub fn grad_check(
        &mut self,
        images: &Tensor<f64>,
        targets: &Targets<f64>,
        weights: LossWeights,
        dropout_seed: u64,
        opts: &GradCheckOptions,
    ) -> Result<GradCheckReport> {
        let mut store = std::mem::take(&mut self.store);
        let wiring = &*self;
        let report = grad_check(
            &mut store,
            |tape| {
                let x = tape.input(images.clone())?;
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let out = wiring.forward(tape, x, &mut rng)?;
                Ok(wiring.loss(tape, &out, targets, weights)?.total)
            },
            opts,
        );
        self.store = store;
        report
    }
}

/// Per-root full poses (root at the origin), fused and rescaled.
pub fn compose_pose(pred: &PosePrediction, roots: &RootSet, reference: &TorsoLengths) -> Result<Pose3D> {
    if pred.relative.len() != roots.len() {
        return Err(Error::shape(
            "compose_pose",
            format!("{} blocks for {} roots", pred.relative.len(), roots.len()),
        ));
    }
    let estimates: Vec<Vec<[f64; 3]>> = roots
        .indices()
        .iter()
        .zip(&pred.relative)
        .map(|(&r, block)| {
            let mut full = vec![[0.0; 3]; N_JOINTS];
            for (j, v) in non_root_joints(r).zip(block) {
                full[j] = *v;
            }
            full
        })
        .collect();
    let fused = average_multi_root(&estimates)?;
    let pose = Pose3D::from_slice(&fused)?;
    recover_scale(&pose, reference)
}

/// `[B, 3, H, W]` planes scaled to `v / 255 - 0.5`.
pub fn image_tensor<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::shape("image_tensor", "empty batch"))?;
    let (h, w) = (first.height, first.width);
    let mut out = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.height != h || img.width != w {
            return Err(Error::shape(
                "image_tensor",
                format!("mixed sizes {}x{} and {h}x{w}", img.height, img.width),
            ));
        }
        for c in 0..3 {
            out.extend(img.data[c..].iter().step_by(3).map(|&v| T::lit(v as f64 / 255.0 - 0.5)));
        }
    }
    Tensor::new([images.len(), 3, h, w], out)
}
