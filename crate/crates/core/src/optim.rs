//! Parameter update rules.
//!
//! Each rule exists as a per-entry kernel (`*_entry`) operating on scalars
//! and a tensor-level wrapper that applies the kernel to every entry of a
//! weight matrix. The tensor wrappers own the step-counter bookkeeping.
//!
//! | rule            | decay on masked entries                               |
//! |-----------------|-------------------------------------------------------|
//! | [`adams_step`]  | blended into first moment: `(1−α)μ + αλ·sign(θ)`      |
//! | [`adam_l1_step`]| added to the raw gradient: `g + λ·sign(θ)`            |
//! | [`adamw_l1_step`]| applied to the parameter: `θ −= γλ·sign(θ)`          |
//! | [`srste_step`]  | plain SGD with `λθ` on masked entries                 |

use crate::error::{Error, Result};
use crate::sparsity::Mask;
use crate::tensor::Tensor;

/// Moment decay rates and denominator floor shared by every Adam variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Betas {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Betas {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Betas {
    pub fn validate(&self) -> Result<()> {
        let ok = |b: f64| (0.0..1.0).contains(&b);
        if !ok(self.beta1) || !ok(self.beta2) || self.eps.is_nan() || self.eps < 0.0 {
            return Err(Error::Config(format!("invalid Adam betas {:?}", self)));
        }
        Ok(())
    }
}

/// Configuration of the sparsity-inducing Adam variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSConfig {
    /// Decay strength, in gradient units.
    pub lambda: f64,
    pub betas: Betas,
    /// Total number of training steps `T`.
    pub total_steps: usize,
    /// Mask refresh cadence `T₁`.
    pub refresh_every: usize,
}

impl AdamSConfig {
    pub fn validate(&self) -> Result<()> {
        self.betas.validate()?;
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.total_steps == 0 || self.refresh_every == 0 {
            return Err(Error::Config(
                "total steps and refresh cadence must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moments for one tensor plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentState {
    pub mu: Vec<f64>,
    pub v: Vec<f64>,
    pub t: usize,
}

impl MomentState {
    pub fn zeros(len: usize) -> Self {
        MomentState {
            mu: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn begin_step(&mut self, t: usize, len: usize) -> Result<()> {
        if self.mu.len() != len || self.v.len() != len {
            return Err(Error::Shape(format!(
                "moment state for {} entries used with {len}",
                self.mu.len()
            )));
        }
        if t != self.t + 1 {
            return Err(Error::Program(format!(
                "optimizer step {t} after step {}",
                self.t
            )));
        }
        self.t = t;
        Ok(())
    }
}

/// `sign` with `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Proportional decay weight `α_t = t / T`.
pub fn alpha_at(t: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::Config("total steps T must be positive".into()));
    }
    if t > total {
        return Err(Error::Config(format!("step {t} beyond total {total}")));
    }
    Ok(t as f64 / total as f64)
}

fn check_grad(g: f64) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient {g}")))
    }
}

/// One AdamS update of a single entry. `t` is the 1-based global step.
///
/// The second moment is driven by the decayed first moment `μ̃`, not by the
/// raw gradient.
#[allow(clippy::too_many_arguments)]
pub fn adams_entry(
    theta: f64,
    g: f64,
    kept: bool,
    mu: &mut f64,
    v: &mut f64,
    t: usize,
    alpha: f64,
    lambda: f64,
    betas: &Betas,
    lr: f64,
) -> Result<f64> {
    check_grad(g)?;
    *mu = betas.beta1 * *mu + (1.0 - betas.beta1) * g;
    let mu_tilde = if kept {
        *mu
    } else {
        (1.0 - alpha) * *mu + alpha * lambda * sign(theta)
    };
    *v = betas.beta2 * *v + (1.0 - betas.beta2) * mu_tilde * mu_tilde;
    let mu_hat = mu_tilde / (1.0 - betas.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - betas.beta2.powi(t as i32));
    Ok(theta - lr * mu_hat / (v_hat.sqrt() + betas.eps))
}

/// Adam with the L1 decay folded into the gradient on masked entries.
#[allow(clippy::too_many_arguments)]
pub fn adam_l1_entry(
    theta: f64,
    g: f64,
    kept: bool,
    mu: &mut f64,
    v: &mut f64,
    t: usize,
    lambda: f64,
    betas: &Betas,
    lr: f64,
) -> Result<f64> {
    check_grad(g)?;
    let g = if kept { g } else { g + lambda * sign(theta) };
    adam_entry(theta, g, mu, v, t, betas, lr)
}

/// Adam on the raw gradient, then `γλ·sign(θ)` subtracted on masked entries.
#[allow(clippy::too_many_arguments)]
pub fn adamw_l1_entry(
    theta: f64,
    g: f64,
    kept: bool,
    mu: &mut f64,
    v: &mut f64,
    t: usize,
    lambda: f64,
    betas: &Betas,
    lr: f64,
) -> Result<f64> {
    check_grad(g)?;
    *mu = betas.beta1 * *mu + (1.0 - betas.beta1) * g;
    *v = betas.beta2 * *v + (1.0 - betas.beta2) * g * g;
    let mu_hat = *mu / (1.0 - betas.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - betas.beta2.powi(t as i32));
    let decay = if kept { 0.0 } else { lambda * sign(theta) };
    Ok(theta - lr * (mu_hat / (v_hat.sqrt() + betas.eps) + decay))
}

/// SGD with the straight-through gradient and `λθ` decay on masked entries.
pub fn srste_entry(theta: f64, g_sparse: f64, kept: bool, lambda: f64, lr: f64) -> Result<f64> {
    check_grad(g_sparse)?;
    let decay = if kept { 0.0 } else { lambda * theta };
    Ok(theta - lr * (g_sparse + decay))
}

/// Textbook bias-corrected Adam.
pub fn adam_entry(
    theta: f64,
    g: f64,
    mu: &mut f64,
    v: &mut f64,
    t: usize,
    betas: &Betas,
    lr: f64,
) -> Result<f64> {
    check_grad(g)?;
    *mu = betas.beta1 * *mu + (1.0 - betas.beta1) * g;
    *v = betas.beta2 * *v + (1.0 - betas.beta2) * g * g;
    let mu_hat = *mu / (1.0 - betas.beta1.powi(t as i32));
    let v_hat = *v / (1.0 - betas.beta2.powi(t as i32));
    Ok(theta - lr * mu_hat / (v_hat.sqrt() + betas.eps))
}

fn check_pair(theta: &Tensor, grad: &Tensor, mask: Option<&Mask>) -> Result<()> {
    theta.expect_same_shape(grad)?;
    if let Some(m) = mask {
        if m.len() != theta.len() || theta.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} for weights {:?}",
                m.shape(),
                theta.shape()
            )));
        }
    }
    grad.check_finite()
}

fn kept_bits(mask: Option<&Mask>, len: usize) -> Box<dyn Iterator<Item = bool> + '_> {
    match mask {
        Some(m) => Box::new(m.bits().iter().copied()),
        None => Box::new(std::iter::repeat_n(true, len)),
    }
}

/// AdamS over a whole tensor; `mask = None` treats every entry as kept.
pub fn adams_step(
    theta: &Tensor,
    grad: &Tensor,
    mask: Option<&Mask>,
    state: &mut MomentState,
    cfg: &AdamSConfig,
    t: usize,
    lr: f64,
) -> Result<Tensor> {
    check_pair(theta, grad, mask)?;
    state.begin_step(t, theta.len())?;
    let alpha = alpha_at(t, cfg.total_steps)?;
    let mut out = Vec::with_capacity(theta.len());
    for (i, kept) in kept_bits(mask, theta.len()).enumerate() {
        out.push(adams_entry(
            theta.data()[i],
            grad.data()[i],
            kept,
            &mut state.mu[i],
            &mut state.v[i],
            t,
            alpha,
            cfg.lambda,
            &cfg.betas,
            lr,
        )?);
    }
    Tensor::new(theta.shape(), out)
}

#[allow(clippy::too_many_arguments)]
pub fn adam_l1_step(
    theta: &Tensor,
    grad: &Tensor,
    mask: Option<&Mask>,
    state: &mut MomentState,
    lambda: f64,
    betas: &Betas,
    t: usize,
    lr: f64,
) -> Result<Tensor> {
    check_pair(theta, grad, mask)?;
    state.begin_step(t, theta.len())?;
    let mut out = Vec::with_capacity(theta.len());
    for (i, kept) in kept_bits(mask, theta.len()).enumerate() {
        out.push(adam_l1_entry(
            theta.data()[i],
            grad.data()[i],
            kept,
            &mut state.mu[i],
            &mut state.v[i],
            t,
            lambda,
            betas,
            lr,
        )?);
    }
    Tensor::new(theta.shape(), out)
}

#[allow(clippy::too_many_arguments)]
pub fn adamw_l1_step(
    theta: &Tensor,
    grad: &Tensor,
    mask: Option<&Mask>,
    state: &mut MomentState,
    lambda: f64,
    betas: &Betas,
    t: usize,
    lr: f64,
) -> Result<Tensor> {
    check_pair(theta, grad, mask)?;
    state.begin_step(t, theta.len())?;
    let mut out = Vec::with_capacity(theta.len());
    for (i, kept) in kept_bits(mask, theta.len()).enumerate() {
        out.push(adamw_l1_entry(
            theta.data()[i],
            grad.data()[i],
            kept,
            &mut state.mu[i],
            &mut state.v[i],
            t,
            lambda,
            betas,
            lr,
        )?);
    }
    Tensor::new(theta.shape(), out)
}

/// The gradient must come from a forward pass on `θ ⊙ mask`.
pub fn srste_step(
    theta: &Tensor,
    grad_sparse: &Tensor,
    mask: Option<&Mask>,
    lambda: f64,
    lr: f64,
) -> Result<Tensor> {
    check_pair(theta, grad_sparse, mask)?;
    let mut out = Vec::with_capacity(theta.len());
    for (i, kept) in kept_bits(mask, theta.len()).enumerate() {
        out.push(srste_entry(
            theta.data()[i],
            grad_sparse.data()[i],
            kept,
            lambda,
            lr,
        )?);
    }
    Tensor::new(theta.shape(), out)
}

pub fn adam_step(
    theta: &Tensor,
    grad: &Tensor,
    state: &mut MomentState,
    betas: &Betas,
    t: usize,
    lr: f64,
) -> Result<Tensor> {
    check_pair(theta, grad, None)?;
    state.begin_step(t, theta.len())?;
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        out.push(adam_entry(
            theta.data()[i],
            grad.data()[i],
            &mut state.mu[i],
            &mut state.v[i],
            t,
            betas,
            lr,
        )?);
    }
    Tensor::new(theta.shape(), out)
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    Constant { base: f64 },
    /// Linear warmup over `warmup` steps, then cosine decay to 10% of `base`
    /// at `t = T`.
    WarmupCosine { base: f64, warmup: usize },
}

impl Schedule {
    pub fn base(&self) -> f64 {
        match *self {
            Schedule::Constant { base } | Schedule::WarmupCosine { base, .. } => base,
        }
    }

    pub fn with_base(&self, base: f64) -> Schedule {
        match *self {
            Schedule::Constant { .. } => Schedule::Constant { base },
            Schedule::WarmupCosine { warmup, .. } => Schedule::WarmupCosine { base, warmup },
        }
    }
}

/// Learning rate for the 0-based step index `t` of a `total`-step run.
pub fn lr_at(schedule: &Schedule, t: usize, total: usize) -> f64 {
    match *schedule {
        Schedule::Constant { base } => base,
        Schedule::WarmupCosine { base, warmup } => {
            if t < warmup {
                return base * (t + 1) as f64 / warmup as f64;
            }
            let span = total.saturating_sub(warmup).max(1);
            let p = ((t - warmup) as f64 / span as f64).min(1.0);
            let floor = 0.1 * base;
            floor + (base - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}
