use pose3d::model::{compose_pose, image_tensor, Model, NetworkConfig, Targets, Variant, REL_WIDTH};
use pose3d::pose::{
    average_multi_root, non_root_joints, recover_scale, total_loss, GridDistribution, LossWeights, Pose2D, Pose3D,
    PosePrediction, RootSet, TorsoLengths, N_JOINTS,
};
use pose3d::synth::{generate, random_crop, Image, Split, SynthConfig};
use pose3d::tensor::{sgd_step, Checkpoint, LayerMode, SgdConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Small but structurally complete network so the tests stay fast.
fn small_config() -> NetworkConfig {
    let mut c = NetworkConfig::desk();
    c.convs[0].filters = 8;
    c.convs[1].filters = 8;
    c.convs[2].filters = 8;
    c.convs[3].filters = 8;
    c.convs[4].filters = 8;
    c.fc1_2d = 32;
    c.fc1_3d = 24;
    c.fc_probs_2d = 16;
    c.fc2_3d = 20;
    c
}

struct Batch {
    images: Vec<Image>,
    poses2d: Vec<Pose2D>,
    poses3d: Vec<Pose3D>,
}

fn batch(n: usize, seed: u64) -> Batch {
    let cfg = SynthConfig::desk();
    let d = generate(&cfg, Split::Train, n, seed).unwrap();
    let mut r = rng(seed);
    let mut b = Batch { images: vec![], poses2d: vec![], poses3d: vec![] };
    for s in &d.samples {
        let (img, p2, _) = random_crop(&s.image, &s.pose2d, cfg.crop_size, &mut r, true).unwrap();
        b.images.push(img);
        b.poses2d.push(p2);
        b.poses3d.push(s.pose3d);
    }
    b
}

fn images(b: &Batch) -> Tensor<f64> {
    image_tensor(&b.images.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn head_counts_follow_variant() {
    let cfg = NetworkConfig::desk();
    let want = [(Variant::Baseline, 1), (Variant::MultiReg, 6), (Variant::TwoDCls, 1), (Variant::Full, 6)];
    for (v, n) in want {
        let m: Model<f32> = Model::build(&cfg, v, &mut rng(0)).unwrap();
        assert_eq!(m.head_count(), n, "{v}");
        assert_eq!(m.roots().len(), n);
    }
}

/// Independent count straight from the layer widths.
fn count_oracle(c: &NetworkConfig, v: Variant) -> usize {
    let mut total = 0;
    let mut ch = 3;
    for conv in &c.convs {
        total += conv.filters * ch * conv.kernel * conv.kernel + conv.filters + 2 * conv.filters;
        ch = conv.filters;
    }
    let hidden = |i: usize, o: usize| i * o + o + 2 * o;
    let output = |i: usize, o: usize| i * o + o;
    let feat = c.feature_dim().unwrap();
    let g = c.grid_cells * c.grid_cells * 17;
    total += hidden(feat, c.fc1_2d) + output(c.fc1_2d, g) + hidden(feat, c.fc1_3d);
    let mut joint = c.fc1_3d;
    if matches!(v, Variant::TwoDCls | Variant::Full) {
        total += hidden(g, c.fc_probs_2d);
        joint += c.fc_probs_2d;
    }
    let roots = if matches!(v, Variant::MultiReg | Variant::Full) { c.roots.len() } else { 1 };
    total + roots * (hidden(joint, c.fc2_3d) + output(c.fc2_3d, 48))
}

#[test]
fn parameter_counts_match_table() {
    let cfg = NetworkConfig::desk();
    let table = [
        (Variant::Baseline, 1_907_696),
        (Variant::MultiReg, 2_628_576),
        (Variant::TwoDCls, 2_080_112),
        (Variant::Full, 2_964_832),
    ];
    for (v, n) in table {
        assert_eq!(count_oracle(&cfg, v), n, "oracle {v}");
        let m: Model<f32> = Model::build(&cfg, v, &mut rng(1)).unwrap();
        assert_eq!(m.parameter_count(), n, "model {v}");
    }
    let small = small_config();
    for v in Variant::ALL {
        let m: Model<f32> = Model::build(&small, v, &mut rng(1)).unwrap();
        assert_eq!(m.parameter_count(), count_oracle(&small, v));
    }
}

#[test]
fn output_arities_and_valid_distributions() {
    let cfg = NetworkConfig::desk();
    let b = batch(3, 4);
    for v in [Variant::Baseline, Variant::Full] {
        let m: Model<f64> = Model::build(&cfg, v, &mut rng(2)).unwrap();
        let preds = m.predict(images(&b)).unwrap();
        assert_eq!(preds.len(), 3);
        for p in &preds {
            assert_eq!(p.grids.len(), N_JOINTS);
            for g in &p.grids {
                assert_eq!(g.len(), 64);
                GridDistribution::new(g.probs().to_vec()).unwrap();
            }
            assert_eq!(p.relative.len(), m.head_count());
            for block in &p.relative {
                assert_eq!(block.len(), 16);
                assert!(block.iter().flatten().all(|v| v.is_finite()));
            }
        }
    }
}

#[test]
fn wrong_image_size_is_rejected() {
    let m: Model<f64> = Model::build(&small_config(), Variant::Baseline, &mut rng(0)).unwrap();
    let x = Tensor::zeros([1, 3, 60, 60]);
    assert!(matches!(m.predict(x), Err(pose3d::Error::Shape { .. })));
}

#[test]
fn eval_mode_is_deterministic_across_batch_slots() {
    let m: Model<f64> = Model::build(&NetworkConfig::desk(), Variant::Full, &mut rng(3)).unwrap();
    let b = batch(1, 9);
    let x = image_tensor(&[&b.images[0], &b.images[0]]).unwrap();
    let p = m.predict(x).unwrap();
    assert_eq!(p[0], p[1]);
    assert_eq!(m.predict(images(&b)).unwrap()[0], p[0]);
}

#[test]
fn checkpoint_round_trip_is_bit_identical() {
    let cfg = small_config();
    let b = batch(2, 5);
    let mut m: Model<f64> = Model::build(&cfg, Variant::Full, &mut rng(4)).unwrap();
    // Move running statistics away from their initial values.
    let w = LossWeights::new(0.1, 0.5).unwrap();
    let targets = m.targets(&b.poses2d, &b.poses3d).unwrap();
    let (grads, updates) = {
        let mut tape = Tape::new(&m.store, LayerMode::Train);
        let x = tape.input(images(&b)).unwrap();
        let out = m.forward(&mut tape, x, &mut rng(0)).unwrap();
        let l = m.loss(&mut tape, &out, &targets, w).unwrap();
        (tape.backward(l.total).unwrap(), tape.take_running_updates())
    };
    m.store.set_grads(grads).unwrap();
    m.store.apply_running_updates(updates, 0.1);
    sgd_step(&mut m.store, &SgdConfig::default()).unwrap();

    let torso = TorsoLengths([230.0, 250.0, 150.0, 150.0, 130.0, 130.0]);
    let bytes = m.to_checkpoint(Some(&torso)).to_bytes();
    let (back, t) = Model::<f64>::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    assert_eq!(t, Some(torso));
    assert_eq!(back.variant, Variant::Full);
    assert_eq!(back.config, cfg);
    assert_eq!(back.to_checkpoint(Some(&torso)).to_bytes(), bytes);
    let pa = m.predict(images(&b)).unwrap();
    let pb = back.predict(images(&b)).unwrap();
    for (a, c) in pa.iter().zip(&pb) {
        for (x, y) in a.grids.iter().zip(&c.grids) {
            assert!(x.probs().iter().zip(y.probs()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        for (x, y) in a.relative.iter().flatten().zip(c.relative.iter().flatten()) {
            assert!(x.iter().zip(y).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
    }
}

#[test]
fn zeroed_injection_reproduces_multi_reg() {
    let cfg = small_config();
    let mut full: Model<f64> = Model::build(&cfg, Variant::Full, &mut rng(6)).unwrap();
    let mut multi: Model<f64> = Model::build(&cfg, Variant::MultiReg, &mut rng(7)).unwrap();
    for name in ["fc_probs_2d.weight", "fc_probs_2d.bias"] {
        let id = full.store.find(name).unwrap();
        full.store.param_mut(id).tensor.values_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    // Give the multi-reg model the full model's weights; head hidden layers
    // keep only the rows fed by fc1_3d.
    for id in multi.store.ids().collect::<Vec<_>>() {
        let name = multi.store.param(id).name.clone();
        let src = full.store.param(full.store.find(&name).unwrap()).tensor.values().to_vec();
        let dst = multi.store.param_mut(id).tensor.values_mut();
        let n = dst.len();
        dst.copy_from_slice(&src[..n]);
    }
    let b = batch(3, 8);
    let pf = full.predict(images(&b)).unwrap();
    let pm = multi.predict(images(&b)).unwrap();
    for (a, c) in pf.iter().zip(&pm) {
        assert_eq!(a.grids, c.grids);
        for (x, y) in a.relative.iter().flatten().zip(c.relative.iter().flatten()) {
            for k in 0..3 {
                assert!((x[k] - y[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn tape_loss_matches_per_sample_formula() {
    let cfg = small_config();
    let b = batch(3, 10);
    let w = LossWeights::new(0.1, 0.5).unwrap();
    for v in Variant::ALL {
        let m: Model<f64> = Model::build(&cfg, v, &mut rng(11)).unwrap();
        let targets = m.targets(&b.poses2d, &b.poses3d).unwrap();
        let mut tape = Tape::new(&m.store, LayerMode::Eval);
        let x = tape.input(images(&b)).unwrap();
        let out = m.forward(&mut tape, x, &mut rng(0)).unwrap();
        let l = m.loss(&mut tape, &out, &targets, w).unwrap();
        let total = tape.value(l.total).values()[0];
        let preds = m.predict(images(&b)).unwrap();
        let geom = cfg.grid().unwrap();
        let mut want = 0.0;
        for (i, p) in preds.iter().enumerate() {
            let labels: Vec<GridDistribution> =
                b.poses2d[i].0.iter().map(|&y| pose3d::pose::soft_label(y, &geom).unwrap()).collect();
            let gt = pose3d::pose::normalize_pose(&b.poses3d[i]).unwrap();
            want += total_loss(p, &labels, &gt, w, m.roots()).unwrap().total;
        }
        want /= 3.0;
        assert!((total - want).abs() < 1e-9 * want.abs().max(1.0), "{v}: {total} vs {want}");
    }
}

#[test]
fn targets_are_relative_to_each_root() {
    let m: Model<f64> = Model::build(&small_config(), Variant::Full, &mut rng(0)).unwrap();
    let b = batch(2, 12);
    let t: Targets<f64> = m.targets(&b.poses2d, &b.poses3d).unwrap();
    assert_eq!(t.grids.len(), 2 * 17 * 64);
    assert_eq!(t.relative.len(), 6);
    let gt = pose3d::pose::normalize_pose(&b.poses3d[1]).unwrap();
    for (k, &r) in m.roots().indices().iter().enumerate() {
        let block = &t.relative[k][REL_WIDTH..2 * REL_WIDTH];
        for (slot, j) in non_root_joints(r).enumerate() {
            for c in 0..3 {
                assert!((block[slot * 3 + c] - (gt.0[j][c] - gt.0[r][c])).abs() < 1e-15);
            }
        }
    }
}

fn branch_grads(m: &Model<f64>, b: &Batch, w: LossWeights) -> Vec<Vec<f64>> {
    let targets = m.targets(&b.poses2d, &b.poses3d).unwrap();
    let mut tape = Tape::new(&m.store, LayerMode::Train);
    let x = tape.input(images(b)).unwrap();
    let out = m.forward(&mut tape, x, &mut rng(99)).unwrap();
    let l = m.loss(&mut tape, &out, &targets, w).unwrap();
    let g = tape.backward(l.total).unwrap();
    m.branch_2d_params().iter().map(|id| g[id.index()].clone().expect("2D branch gradient")).collect()
}

#[test]
fn stop_gradient_isolates_2d_branch() {
    let cfg = small_config();
    let mut m: Model<f64> = Model::build(&cfg, Variant::Full, &mut rng(13)).unwrap();
    assert_eq!(m.branch_2d_params().len(), 6);
    let on = LossWeights::new(0.1, 0.5).unwrap();
    let off = LossWeights::new(0.1, 0.0).unwrap();
    for seed in 0..3 {
        let b = batch(4, 100 + seed);
        let a = branch_grads(&m, &b, on);
        let c = branch_grads(&m, &b, off);
        for (x, y) in a.iter().flatten().zip(c.iter().flatten()) {
            assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
        }
    }
    // Without the stop-gradient the 3D loss does reach the 2D branch.
    m.set_probs_gradient_blocked(false);
    let b = batch(4, 100);
    let a = branch_grads(&m, &b, on);
    let c = branch_grads(&m, &b, off);
    let diff = a.iter().flatten().zip(c.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 1e-9, "leak not visible: {diff}");
}

#[test]
fn root_heads_break_symmetry() {
    let cfg = small_config();
    let mut m: Model<f64> = Model::build(&cfg, Variant::Full, &mut rng(14)).unwrap();
    let names: Vec<String> = m.roots().indices().iter().map(|&r| pose3d::pose::Joint::ALL[r].name().to_string()).collect();
    let head_w = |m: &Model<f64>, n: &str| {
        let id = m.store.find(&format!("fc2_3d.{n}.out.weight")).unwrap();
        m.store.param(id).tensor.values().to_vec()
    };
    for i in 0..names.len() {
        for j in 0..i {
            assert_ne!(head_w(&m, &names[i]), head_w(&m, &names[j]));
        }
    }
    let b = batch(4, 15);
    let targets = m.targets(&b.poses2d, &b.poses3d).unwrap();
    let (grads, updates) = {
        let mut tape = Tape::new(&m.store, LayerMode::Train);
        let x = tape.input(images(&b)).unwrap();
        let out = m.forward(&mut tape, x, &mut rng(0)).unwrap();
        let l = m.loss(&mut tape, &out, &targets, LossWeights::new(0.1, 0.5).unwrap()).unwrap();
        (tape.backward(l.total).unwrap(), tape.take_running_updates())
    };
    m.store.set_grads(grads).unwrap();
    m.store.apply_running_updates(updates, 0.1);
    sgd_step(&mut m.store, &SgdConfig::default()).unwrap();
    let p = m.predict(images(&b)).unwrap();
    // Compare the heads' predictions for the full pose of joint 10 (head), which
    // every root predicts.
    let full_head = |k: usize| {
        let r = m.roots().indices()[k];
        let slot = non_root_joints(r).position(|j| j == 10).unwrap();
        p[0].relative[k][slot]
    };
    for i in 0..6 {
        for j in 0..i {
            assert_ne!(full_head(i), full_head(j));
        }
    }
}

#[test]
fn predict_pose_matches_hand_composition() {
    let cfg = small_config();
    let m: Model<f64> = Model::build(&cfg, Variant::Full, &mut rng(16)).unwrap();
    let b = batch(1, 17);
    let reference = TorsoLengths([230.0, 250.0, 150.0, 150.0, 130.0, 130.0]);
    let got = m.predict_pose(&b.images[0], &reference).unwrap();
    let pred = &m.predict(images(&b)).unwrap()[0];
    let mut estimates = Vec::new();
    for (k, &r) in m.roots().indices().iter().enumerate() {
        let mut full = vec![[0.0; 3]; 17];
        for (slot, j) in non_root_joints(r).enumerate() {
            full[j] = pred.relative[k][slot];
        }
        estimates.push(full);
    }
    let fused = Pose3D::from_slice(&average_multi_root(&estimates).unwrap()).unwrap();
    let want = recover_scale(&fused, &reference).unwrap();
    assert_eq!(got, want);
    let total = TorsoLengths::of(&got).total();
    assert!((total - reference.total()).abs() < 1e-9);
}

#[test]
fn single_root_composition_centres_and_rescales() {
    let mut rel = Vec::new();
    for j in 1..17 {
        rel.push([j as f64 * 0.01, -(j as f64) * 0.02, 0.005 * (j % 3) as f64]);
    }
    let pred = PosePrediction { grids: vec![], relative: vec![rel.clone()] };
    let reference = TorsoLengths([1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let got = compose_pose(&pred, &RootSet::single(), &reference).unwrap();
    let mut full = vec![[0.0; 3]];
    full.extend(rel);
    let mean: Vec<f64> = (0..3).map(|k| full.iter().map(|p| p[k]).sum::<f64>() / 17.0).collect();
    let centred: Vec<[f64; 3]> = full.iter().map(|p| [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]]).collect();
    let s = reference.total() / TorsoLengths::of(&Pose3D::from_slice(&centred).unwrap()).total();
    for (g, c) in got.0.iter().zip(&centred) {
        for k in 0..3 {
            assert!((g[k] - s * c[k]).abs() < 1e-12);
        }
    }
}
