//! Evaluation, ablation and gradient-check drivers behind the CLI.

mod ablate;
pub mod gradcheck;
mod report;

pub use ablate::{run_ablation, AblationCell, AblationReport, VariantSummary, ABLATION_CSV_HEADER_PREFIX};
pub use report::{evaluate, evaluate_poses, ActionRow, EvalReport, EVAL_BATCH, EVAL_CSV_HEADER};
