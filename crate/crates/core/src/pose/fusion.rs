use crate::error::{Error, Result};

/// Centers every per-root estimate on its own joint mean, then averages
/// them joint by joint.
pub fn average_multi_root(estimates: &[Vec<[f64; 3]>]) -> Result<Vec<[f64; 3]>> {
    let first = estimates
        .first()
        .ok_or_else(|| Error::Domain("no per-root estimates to average".into()))?;
    let n = first.len();
    if n == 0 || estimates.iter().any(|e| e.len() != n) {
        return Err(Error::Domain("per-root estimates disagree on joint count".into()));
    }
    let mut out = vec![[0.0; 3]; n];
    for est in estimates {
        let mut mean = [0.0; 3];
        for p in est {
            for k in 0..3 {
                mean[k] += p[k];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for (o, p) in out.iter_mut().zip(est) {
            for k in 0..3 {
                o[k] += p[k] - mean[k];
            }
        }
    }
    let inv = 1.0 / estimates.len() as f64;
    out.iter_mut().flatten().for_each(|v| *v *= inv);
    Ok(out)
}
