//! Four-way variant comparison over several seeds on identical data.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{Model, NetworkConfig, Variant};
use crate::synth::DatasetFile;
use crate::tensor::Real;
use crate::train::{train, LogRecord, TrainConfig};

use super::report::{evaluate, EvalReport};

/// One training run; `Err` holds the failure message.
#[derive(Clone, Debug)]
pub struct AblationCell {
    pub variant: Variant,
    pub seed: u64,
    pub result: std::result::Result<EvalReport, String>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// Variant-major, in [`Variant::ALL`] order.
    pub cells: Vec<AblationCell>,
}

/// Aggregate over the successful seeds of one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantSummary {
    pub variant: Variant,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    /// `(action name, mean over seeds)`.
    pub per_action: Vec<(String, f64)>,
    pub succeeded: usize,
    pub failed: usize,
}

/// Trains and evaluates every variant for every seed. Runs that fail are
/// recorded and the rest continue. `out_dir` receives one sub-directory of
/// artifacts per cell.
pub fn run_ablation<T: Real>(
    net: &NetworkConfig,
    train_cfg: &TrainConfig,
    train_set: &DatasetFile,
    test_set: &DatasetFile,
    seeds: &[u64],
    out_dir: Option<&Path>,
    progress: &mut dyn FnMut(Variant, u64, &LogRecord),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut cells = Vec::new();
    for variant in Variant::ALL {
        for &seed in seeds {
            let result = (|| -> Result<EvalReport> {
                let cfg = TrainConfig { seed, ..train_cfg.clone() };
                let model: Model<T> = Model::build(net, variant, &mut ChaCha8Rng::seed_from_u64(seed))?;
                let dir = out_dir.map(|d| d.join(format!("{}_seed{seed}", variant)));
                if let Some(d) = &dir {
                    std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                }
                let outcome = train(model, train_set, test_set, &cfg, dir.as_deref(), &mut |r| progress(variant, seed, r))?;
                evaluate(&outcome.model, test_set, &outcome.torso)
            })();
            cells.push(AblationCell { variant, seed, result: result.map_err(|e| e.to_string()) });
        }
    }
    Ok(AblationReport { seeds: seeds.to_vec(), cells })
}

pub const ABLATION_CSV_HEADER_PREFIX: &str = "variant,seed";

impl AblationReport {
    pub fn cells_for(&self, v: Variant) -> impl Iterator<Item = &AblationCell> {
        self.cells.iter().filter(move |c| c.variant == v)
    }

    /// Action names from the first successful cell.
    pub fn actions(&self) -> Vec<String> {
        self.cells
            .iter()
            .find_map(|c| c.result.as_ref().ok())
            .map(|r| r.rows.iter().map(|row| row.name.clone()).collect())
            .unwrap_or_default()
    }

    /// `None` when every seed of the variant failed.
    pub fn summary(&self, v: Variant) -> Option<VariantSummary> {
        let ok: Vec<&EvalReport> = self.cells_for(v).filter_map(|c| c.result.as_ref().ok()).collect();
        let failed = self.cells_for(v).count() - ok.len();
        if ok.is_empty() {
            return None;
        }
        let n = ok.len() as f64;
        let means: Vec<f64> = ok.iter().map(|r| r.mean).collect();
        let per_action = self
            .actions()
            .into_iter()
            .map(|a| {
                let s: f64 = ok.iter().filter_map(|r| r.rows.iter().find(|row| row.name == a)).map(|row| row.mpjpe).sum();
                (a, s / n)
            })
            .collect();
        Some(VariantSummary {
            variant: v,
            mean: means.iter().sum::<f64>() / n,
            min: means.iter().copied().fold(f64::INFINITY, f64::min),
            max: means.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            per_action,
            succeeded: ok.len(),
            failed,
        })
    }

    /// `variant,seed,<action>...,mean_mm`; one row per cell then `mean`,
    /// `min` and `max` rows per variant. Failed cells read `failed`.
    pub fn to_csv(&self) -> String {
        let actions = self.actions();
        let mut s = String::from(ABLATION_CSV_HEADER_PREFIX);
        for a in &actions {
            s += &format!(",{a}");
        }
        s += ",mean_mm\n";
        for v in Variant::ALL {
            for c in self.cells_for(v) {
                s += &format!("{},{}", v.label(), c.seed);
                match &c.result {
                    Ok(r) => {
                        for a in &actions {
                            match r.rows.iter().find(|row| &row.name == a) {
                                Some(row) => s += &format!(",{:.4}", row.mpjpe),
                                None => s += ",",
                            }
                        }
                        s += &format!(",{:.4}\n", r.mean);
                    }
                    Err(_) => {
                        s += &",failed".repeat(actions.len() + 1);
                        s += "\n";
                    }
                }
            }
            let sum = self.summary(v);
            for stat in ["mean", "min", "max"] {
                s += &format!("{},{stat}", v.label());
                match &sum {
                    Some(m) if stat == "mean" => {
                        for (_, x) in &m.per_action {
                            s += &format!(",{x:.4}");
                        }
                        s += &format!(",{:.4}\n", m.mean);
                    }
                    Some(m) => {
                        s += &",".repeat(actions.len());
                        s += &format!(",{:.4}\n", if stat == "min" { m.min } else { m.max });
                    }
                    None => {
                        s += &",failed".repeat(actions.len() + 1);
                        s += "\n";
                    }
                }
            }
        }
        s
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let actions = self.actions();
        write!(f, "{:<18}", "method")?;
        for a in &actions {
            write!(f, " {a:>10}")?;
        }
        writeln!(f, " {:>10} {:>17}", "mean", "range")?;
        for v in Variant::ALL {
            write!(f, "{:<18}", v.label())?;
            match self.summary(v) {
                Some(m) => {
                    for (_, x) in &m.per_action {
                        write!(f, " {x:>10.2}")?;
                    }
                    write!(f, " {:>10.2} {:>8.2}-{:<8.2}", m.mean, m.min, m.max)?;
                    if m.failed > 0 {
                        write!(f, " ({} failed)", m.failed)?;
                    }
                    writeln!(f)?;
                }
                None => writeln!(f, " failed")?,
            }
        }
        write!(f, "seeds: {:?}", self.seeds)
    }
}
