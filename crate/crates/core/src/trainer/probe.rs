use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, Batch, ForwardMode, LossKind, Model};
use crate::sparsity::{compute_nm_mask, NMConfig};

use super::metrics::RunMetrics;

/// `Δ = |g(θ) − g(0) − λθ|` for one masked scalar whose gradient is `grad`.
pub fn ste_error_scalar(grad: impl Fn(f64) -> f64, theta: f64, lambda: f64) -> f64 {
    (grad(theta) - grad(0.0) - lambda * theta).abs()
}

/// `Δ` for `L = ½(θ − c)²`; equals `(1 − λ)|θ|` for `λ ≤ 1`.
pub fn ste_error_quadratic(theta: f64, center: f64, lambda: f64) -> f64 {
    ste_error_scalar(|x| x - center, theta, lambda)
}

/// Least-squares line `y = slope · x + intercept`.
pub fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Shape(format!(
            "line fit needs matching series of at least 2 points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Shape("line fit needs distinct x values".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len().min(ys.len()) as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteProbe {
    /// `(|θ|, Δ)` for every masked entry.
    pub pairs: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub pearson: f64,
}

impl SteProbe {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("abs_theta,delta\n");
        for (a, d) in &self.pairs {
            out.push_str(&format!("{a},{d}\n"));
        }
        out
    }
}

/// Compares the dense-forward gradient with the straight-through gradient
/// of the sparse forward on one batch. Masks come from the model, or from
/// current magnitudes when it has none.
pub fn ste_error_probe(model: &Model, batch: &Batch, lambda: f64, nm: &NMConfig) -> Result<SteProbe> {
    let mut m = model.clone();
    for i in m.sparsifiable_indices() {
        if m.slots[i].mask.is_none() {
            m.slots[i].mask = Some(compute_nm_mask(&m.slots[i].value, nm)?);
        }
    }
    let (_, dense) = loss_and_grads(&m, batch, LossKind::Task, ForwardMode::Dense, None)?;
    let (_, ste) = loss_and_grads(&m, batch, LossKind::Task, ForwardMode::Sparse, None)?;
    let mut pairs = Vec::new();
    for i in m.sparsifiable_indices() {
        let slot = &m.slots[i];
        let mask = slot.mask.as_ref().expect("set above");
        for (j, &kept) in mask.bits().iter().enumerate() {
            if !kept {
                let th = slot.value.data()[j];
                let d = (dense.weights[i].data()[j] - ste.weights[i].data()[j] - lambda * th).abs();
                pairs.push((th.abs(), d));
            }
        }
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (slope, intercept) = ols(&xs, &ys)?;
    Ok(SteProbe {
        pearson: pearson(&xs, &ys),
        pairs,
        slope,
        intercept,
    })
}

/// `(step, dense-forward perplexity)` from a run's metrics.
pub fn dense_forward_series(metrics: &RunMetrics) -> Vec<(usize, f64)> {
    metrics.rows.iter().map(|r| (r.step, r.dense_ppl)).collect()
}
