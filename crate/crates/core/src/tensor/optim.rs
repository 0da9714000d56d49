use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.001,
        }
    }
}

/// One momentum-SGD update over every parameter:
/// `g' = g + wd·w` (unless exempt), `v = μ·v + g'`, `w = w - lr·v`.
///
/// Every parameter must carry a gradient; nothing is modified otherwise.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, cfg: &SgdConfig) -> Result<()> {
    if let Some(p) = store.params().iter().find(|p| p.tensor.grad().is_none()) {
        return Err(Error::MissingGradient(p.name.clone()));
    }
    let lr = T::lit(cfg.lr);
    let mu = T::lit(cfg.momentum);
    let wd = T::lit(cfg.weight_decay);
    for p in store.params_mut() {
        let decay = if p.decay_exempt { T::zero() } else { wd };
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let values = p.tensor.values_mut();
        for ((w, v), g) in values.iter_mut().zip(p.momentum.iter_mut()).zip(grad) {
            let g = g + decay * *w;
            *v = mu * *v + g;
            *w -= lr * *v;
        }
    }
    Ok(())
}
