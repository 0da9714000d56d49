use crate::error::{Error, Result};
use crate::tensor::LOG_CLIP;

/// Square image split into `cells × cells` classes, indexed row-major.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridGeometry {
    cells: usize,
    image_size: f64,
}

impl GridGeometry {
    pub fn new(cells: usize, image_size: usize) -> Result<Self> {
        if cells == 0 || image_size == 0 {
            return Err(Error::Config("grid needs positive cell count and image size".into()));
        }
        Ok(GridGeometry {
            cells,
            image_size: image_size as f64,
        })
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn classes(&self) -> usize {
        self.cells * self.cells
    }

    pub fn image_size(&self) -> f64 {
        self.image_size
    }

    pub fn cell_width(&self) -> f64 {
        self.image_size / self.cells as f64
    }

    /// Pixel center of class `i`: `((col + 0.5) w, (row + 0.5) w)`.
    pub fn center(&self, i: usize) -> [f64; 2] {
        let w = self.cell_width();
        let (row, col) = (i / self.cells, i % self.cells);
        [(col as f64 + 0.5) * w, (row as f64 + 0.5) * w]
    }
}

/// Probability vector over grid classes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridDistribution {
    probs: Vec<f64>,
}

impl GridDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(Error::Domain("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {total}, not 1")));
        }
        Ok(GridDistribution { probs })
    }

    /// Wraps a softmax row without re-validating it.
    pub(crate) fn from_softmax(probs: Vec<f64>) -> Self {
        GridDistribution { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn support(&self) -> usize {
        self.probs.iter().filter(|&&p| p > 0.0).count()
    }

    pub fn argmax(&self) -> usize {
        self.probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    }
}

/// Soft target for a joint at pixel `y`.
///
/// Every grid whose center lies strictly closer than one cell width gets
/// weight `1/d`, clamped at `d >= 1e-6 w`; weights are normalized to sum 1.
pub fn soft_label(y: [f64; 2], geom: &GridGeometry) -> Result<GridDistribution> {
    let size = geom.image_size();
    if !(y[0] >= 0.0 && y[0] < size && y[1] >= 0.0 && y[1] < size) {
        return Err(Error::Domain(format!(
            "joint ({}, {}) outside the {size}px image",
            y[0], y[1]
        )));
    }
    let w = geom.cell_width();
    let n = geom.cells();
    let min_d = 1e-6 * w;
    // Only the 3×3 block around the containing cell can be within w.
    let col = ((y[0] / w) as usize).min(n - 1);
    let row = ((y[1] / w) as usize).min(n - 1);
    let mut probs = vec![0.0; geom.classes()];
    let mut total = 0.0;
    for r in row.saturating_sub(1)..=(row + 1).min(n - 1) {
        for c in col.saturating_sub(1)..=(col + 1).min(n - 1) {
            let i = r * n + c;
            let ctr = geom.center(i);
            let d = ((y[0] - ctr[0]).powi(2) + (y[1] - ctr[1]).powi(2)).sqrt();
            if d < w {
                let inv = 1.0 / d.max(min_d);
                probs[i] = inv;
                total += inv;
            }
        }
    }
    probs.iter_mut().for_each(|p| *p /= total);
    Ok(GridDistribution { probs })
}

/// `-Σ target · ln(max(pred, 1e-12))`.
pub fn cross_entropy_2d(pred: &GridDistribution, target: &GridDistribution) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Config(format!(
            "prediction has {} classes, target {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(pred
        .probs
        .iter()
        .zip(&target.probs)
        .filter(|(_, &t)| t != 0.0)
        .map(|(&p, &t)| -t * p.max(LOG_CLIP).ln())
        .sum())
}

pub fn entropy(p: &GridDistribution) -> f64 {
    p.probs.iter().filter(|&&q| q > 0.0).map(|&q| -q * q.ln()).sum()
}
