//! Finite-difference drivers: isolated layers, the whole network, and the
//! stop-gradient isolation check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{image_tensor, Model, NetworkConfig, Targets, Variant};
use crate::pose::LossWeights;
use crate::synth::{generate, Split, SynthConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport, LayerMode, ParamStore, Tape, Tensor, Var};

use super::report::centre_crops;

pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const STACK_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
/// Coordinates probed per parameter block in the whole-network check.
pub const NETWORK_COORDS: usize = 2;
pub const NETWORK_BATCH: usize = 3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// `Σ r ⊙ y` with fixed random `r`.
fn weighted_sum(t: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let r = t.input(rand_tensor(&mut rng, &shape))?;
    let m = t.mul(y, r)?;
    t.sum(m)
}

fn opts(tolerance: f64, seed: u64, mode: LayerMode) -> GradCheckOptions {
    GradCheckOptions { tolerance, seed, mode, ..Default::default() }
}

/// One report per layer type on small random inputs.
pub fn layer_checks(seed: u64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&mut rng, &[3, 4]), false);
    let w = s.add("w", rand_tensor(&mut rng, &[4, 5]), false);
    let b = s.add("b", rand_tensor(&mut rng, &[5]), true);
    let r = grad_check(
        &mut s,
        |t| {
            let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
            let y = t.linear(xv, wv, bv)?;
            weighted_sum(t, y, seed)
        },
        &opts(LINEAR_TOLERANCE, seed, LayerMode::Train),
    )?;
    out.push(("linear", r));

    // Inputs kept at least 0.1 from the kink.
    let vals: Vec<f64> = (0..12)
        .map(|_| {
            let m = rng.random_range(0.1..2.0);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    let mut s = ParamStore::new();
    let x = s.add("x", Tensor::new([3, 4], vals)?, false);
    let r = grad_check(
        &mut s,
        |t| {
            let xv = t.param(x);
            let y = t.relu(xv)?;
            weighted_sum(t, y, seed)
        },
        &opts(LINEAR_TOLERANCE, seed, LayerMode::Train),
    )?;
    out.push(("relu", r));

    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&mut rng, &[2, 12]), false);
    let r = grad_check(
        &mut s,
        |t| {
            let xv = t.param(x);
            let y = t.softmax(xv, 4)?;
            weighted_sum(t, y, seed)
        },
        &opts(LINEAR_TOLERANCE, seed, LayerMode::Train),
    )?;
    out.push(("softmax", r));

    for (name, mode) in [("batchnorm_train", LayerMode::Train), ("batchnorm_eval", LayerMode::Eval)] {
        let mut s = ParamStore::new();
        let x = s.add("x", rand_tensor(&mut rng, &[4, 3, 2, 2]), false);
        let g = s.add("gamma", Tensor::from_fn([3], |i| 1.0 + 0.2 * i as f64), true);
        let b = s.add("beta", rand_tensor(&mut rng, &[3]), true);
        let rm = s.add_buffer("rm", rand_tensor(&mut rng, &[3]));
        let rv = s.add_buffer("rv", Tensor::from_fn([3], |i| 0.5 + i as f64));
        let r = grad_check(
            &mut s,
            |t| {
                let (xv, gv, bv) = (t.param(x), t.param(g), t.param(b));
                let y = t.batchnorm(xv, gv, bv, rm, rv)?;
                weighted_sum(t, y, seed)
            },
            &opts(STACK_TOLERANCE, seed, mode),
        )?;
        out.push((name, r));
    }

    let mut s = ParamStore::new();
    let x = s.add("x", rand_tensor(&mut rng, &[2, 2, 7, 7]), false);
    let w = s.add("w", rand_tensor(&mut rng, &[3, 2, 3, 3]), false);
    let b = s.add("b", rand_tensor(&mut rng, &[3]), true);
    let mut target = vec![0.0; 96];
    for row in target.chunks_mut(16) {
        let k = rng.random_range(0..15);
        row[k] = 0.7;
        row[k + 1] = 0.3;
    }
    let r = grad_check(
        &mut s,
        |t| {
            let (xv, wv, bv) = (t.param(x), t.param(w), t.param(b));
            let c = t.conv2d(xv, wv, bv, 1, 0)?;
            let r = t.relu(c)?;
            let p = t.maxpool(r, 2, 1)?;
            let flat = t.reshape(p, [2, 48])?;
            let sm = t.softmax(flat, 16)?;
            t.soft_cross_entropy(sm, &target)
        },
        &opts(STACK_TOLERANCE, seed, LayerMode::Train),
    )?;
    out.push(("conv_stack", r));
    Ok(out)
}

/// A small deterministic batch of centre crops matching the network input.
pub fn probe_batch(config: &NetworkConfig, n: usize, seed: u64) -> Result<(Tensor<f64>, Vec<crate::pose::Pose2D>, Vec<crate::pose::Pose3D>)> {
    let synth = SynthConfig::with_sizes(config.input_size + config.input_size / 8, config.input_size);
    let data = generate(&synth, Split::Train, n, seed)?;
    let crops = centre_crops(&data, config.input_size)?;
    let images = image_tensor(&crops.iter().map(|(i, _)| i).collect::<Vec<_>>())?;
    let poses2d = crops.iter().map(|(_, p)| *p).collect();
    let poses3d = data.samples.iter().map(|s| s.pose3d).collect();
    Ok((images, poses2d, poses3d))
}

/// End-to-end check of the weighted total loss for a freshly initialised
/// network.
pub fn network_check(config: &NetworkConfig, variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let mut model: Model<f64> = Model::build(config, variant, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (images, p2, p3) = probe_batch(config, NETWORK_BATCH, seed)?;
    let targets: Targets<f64> = model.targets(&p2, &p3)?;
    let o = GradCheckOptions {
        max_coords_per_block: Some(NETWORK_COORDS),
        ..opts(NETWORK_TOLERANCE, seed, LayerMode::Train)
    };
    model.grad_check(&images, &targets, LossWeights::new(0.1, 0.5)?, seed, &o)
}

/// Largest absolute difference in 2D-branch gradients between `λ3D = 0`
/// and `λ3D = 0.5` on one batch.
pub fn isolation_gap(model: &Model<f64>, batch: usize, seed: u64) -> Result<f64> {
    let (images, p2, p3) = probe_batch(&model.config, batch, seed)?;
    let targets = model.targets(&p2, &p3)?;
    let grads = |l3: f64| -> Result<Vec<f64>> {
        let mut tape = Tape::new(&model.store, LayerMode::Train);
        let x = tape.input(images.clone())?;
        let out = model.forward(&mut tape, x, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let l = model.loss(&mut tape, &out, &targets, LossWeights::new(0.1, l3)?)?;
        let g = tape.backward(l.total)?;
        let mut flat = Vec::new();
        for id in model.branch_2d_params() {
            let v = g[id.index()]
                .as_ref()
                .ok_or_else(|| Error::MissingGradient(model.store.param(id).name.clone()))?;
            flat.extend_from_slice(v);
        }
        Ok(flat)
    };
    let (a, b) = (grads(0.5)?, grads(0.0)?);
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}
