use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{LayerMode, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Settings for [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Coordinates checked per parameter block; `None` checks all of them.
    pub max_coords_per_block: Option<usize>,
    /// Relative errors are taken against
    /// `max(|analytic|, |numeric|, abs_floor, 100 ε |L| / (step · tolerance))`.
    /// The last term allows an absolute slack of `100 ε |L| / step`, the
    /// round-off of the difference quotient on a deep network, so gradients
    /// near that level are judged in absolute terms.
    pub abs_floor: f64,
    /// A relu input closer than this to zero at the base point disqualifies
    /// the probe.
    pub kink_margin: f64,
    pub seed: u64,
    pub mode: LayerMode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-6,
            max_coords_per_block: None,
            abs_floor: 1e-10,
            kink_margin: 1e-7,
            seed: 0,
            mode: LayerMode::Train,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance && self.blocks.iter().any(|b| b.checked > 0)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "block,checked,skipped,max_rel_error")?;
        for b in &self.blocks {
            writeln!(f, "{},{},{},{:.3e}", b.name, b.checked, b.skipped, b.max_rel_error)?;
        }
        write!(
            f,
            "max_rel_error={:.3e} tolerance={:.1e} {}",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct Probe {
    loss: f64,
    signature: u64,
    margin: f64,
    stopped: Vec<Tensor<f64>>,
}

fn evaluate<F>(store: &ParamStore<f64>, mode: LayerMode, build: &mut F, frozen: Option<&[Tensor<f64>]>) -> Result<Probe>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let mut tape = Tape::new(store, mode);
    tape.trace_kinks();
    if let Some(f) = frozen {
        tape.freeze_stopped(f.to_vec());
    }
    let loss = build(&mut tape)?;
    Ok(Probe {
        loss: tape.value(loss).values()[0],
        signature: tape.kink_signature().unwrap_or(0),
        margin: tape.kink_margin().unwrap_or(f64::INFINITY),
        stopped: tape.stopped_values().to_vec(),
    })
}

/// Compares analytic gradients against central differences for every
/// parameter block in `store`.
///
/// `build` must construct the same scalar loss on every call (any dropout
/// rng has to be re-seeded inside it). Probes whose ±step evaluations cross
/// a relu kink or change a pooling argmax are skipped. Outputs of
/// `stop_gradient` are held at their base-point values during the probes, so
/// the reference is the derivative with those values treated as constants.
pub fn grad_check<F>(store: &mut ParamStore<f64>, mut build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<'_, f64>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store, opts.mode);
        let loss = build(&mut tape)?;
        tape.backward(loss)?
    };
    let base = evaluate(store, opts.mode, &mut build, None)?;
    let (base_loss, base_sig, base_margin) = (base.loss, base.signature, base.margin);
    let floor = opts
        .abs_floor
        .max(100.0 * f64::EPSILON * base_loss.abs().max(1.0) / (opts.step * opts.tolerance));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut blocks = Vec::new();
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.param(id).tensor.numel();
        let coords: Vec<usize> = match opts.max_coords_per_block {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut report = BlockReport {
            name: store.param(id).name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
        };
        for i in coords {
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[i]);
            let orig = store.param(id).tensor.values()[i];
            store.param_mut(id).tensor.values_mut()[i] = orig + opts.step;
            let plus = evaluate(store, opts.mode, &mut build, Some(&base.stopped));
            store.param_mut(id).tensor.values_mut()[i] = orig - opts.step;
            let minus = evaluate(store, opts.mode, &mut build, Some(&base.stopped));
            store.param_mut(id).tensor.values_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            let (lp, sp, lm, sm) = (plus.loss, plus.signature, minus.loss, minus.signature);
            if sp != base_sig || sm != base_sig || base_margin < opts.kink_margin {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
        }
        blocks.push(report);
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: opts.tolerance,
    })
}
