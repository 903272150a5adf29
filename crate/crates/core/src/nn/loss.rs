use crate::autograd::{log_sum_exp, softmax_rows, Program, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::forward::{bind, forward, predict, Batch, ForwardMode};
use super::model::Model;

fn check_targets(logits: &Tensor, targets: &[usize]) -> Result<()> {
    if logits.ndim() != 2 || targets.len() != logits.rows() {
        return Err(Error::Shape(format!(
            "{} targets for logits {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= logits.cols()) {
        return Err(Error::Shape(format!("target {t} outside {} classes", logits.cols())));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(format!("{what} is {v}")))
    }
}

/// Mean negative log-likelihood in nats per row.
pub fn ce_loss(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    check_targets(logits, targets)?;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        total += log_sum_exp(row) - row[t];
    }
    finite(total / targets.len() as f64, "cross-entropy")
}

/// Mean over rows of `KL(P_t ‖ P_s)` with `P = softmax(logits)`.
pub fn kl_loss(teacher_logits: &Tensor, student_logits: &Tensor) -> Result<f64> {
    teacher_logits.expect_same_shape(student_logits)?;
    let rows = teacher_logits.rows();
    let mut total = 0.0;
    for r in 0..rows {
        let (tr, sr) = (teacher_logits.row(r), student_logits.row(r));
        let (lt, ls) = (log_sum_exp(tr), log_sum_exp(sr));
        for (&a, &b) in tr.iter().zip(sr) {
            let lp = a - lt;
            let p = lp.exp();
            if p > 0.0 {
                total += p * (lp - (b - ls));
            }
        }
    }
    finite(total / rows as f64, "KL divergence")
}

/// `η · kl + (1 − η) · ce`.
pub fn combined_loss(kl: f64, ce: f64, eta: f64) -> Result<f64> {
    check_eta(eta)?;
    finite(eta * kl + (1.0 - eta) * ce, "combined loss")
}

fn check_eta(eta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&eta) {
        Ok(())
    } else {
        Err(Error::Config(format!("distillation weight {eta} outside [0, 1]")))
    }
}

pub fn perplexity(mean_ce: f64) -> f64 {
    mean_ce.exp()
}

/// Mean squared error over all entries.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let d = pred.sub(target)?;
    finite(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64, "squared error")
}

pub fn record_ce(prog: &mut Program, logits: Var, targets: &[usize]) -> Result<Var> {
    check_targets(prog.value(logits), targets)?;
    let ls = prog.log_softmax_rows(logits)?;
    let picked = prog.pick(ls, targets)?;
    let m = prog.mean(picked)?;
    prog.scale(m, -1.0)
}

/// KL to a constant teacher distribution given by `teacher_logits`.
pub fn record_kl(prog: &mut Program, teacher_logits: &Tensor, student_logits: Var) -> Result<Var> {
    teacher_logits.expect_same_shape(prog.value(student_logits))?;
    let rows = teacher_logits.rows() as f64;
    let p = softmax_rows(teacher_logits, false);
    let mut neg_entropy = 0.0;
    for r in 0..teacher_logits.rows() {
        let row = teacher_logits.row(r);
        let l = log_sum_exp(row);
        for (&pv, &z) in p.row(r).iter().zip(row) {
            if pv > 0.0 {
                neg_entropy += pv * (z - l);
            }
        }
    }
    let pt = prog.constant(p);
    let ls = prog.log_softmax_rows(student_logits)?;
    let cross = prog.mul(pt, ls)?;
    let cross = prog.sum(cross)?;
    let cross = prog.scale(cross, -1.0 / rows)?;
    prog.add_scalar(cross, neg_entropy / rows)
}

pub fn record_mse(prog: &mut Program, pred: Var, target: &Tensor) -> Result<Var> {
    let t = prog.constant(target.clone());
    let d = prog.sub(pred, t)?;
    let sq = prog.mul(d, d)?;
    prog.mean(sq)
}

fn record_mix(prog: &mut Program, kl: Var, ce: Var, eta: f64) -> Result<Var> {
    check_eta(eta)?;
    let a = prog.scale(kl, eta)?;
    let b = prog.scale(ce, 1.0 - eta)?;
    prog.add(a, b)
}

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossKind {
    /// Cross-entropy for token batches, squared error for feature batches.
    Task,
    /// `η · distill + (1 − η) · task`, where the distillation term is KL to
    /// the teacher's next-token distribution (token batches) or squared error
    /// to the teacher's outputs (feature batches).
    Distill { eta: f64 },
}

/// Gradients aligned with `Model::slots`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub weights: Vec<Tensor>,
    pub scaling: Vec<Option<Tensor>>,
}

/// Loss value and its gradients for every slot (and scaling factors).
pub fn loss_and_grads(
    model: &Model,
    batch: &Batch,
    kind: LossKind,
    mode: ForwardMode,
    teacher: Option<&Model>,
) -> Result<(f64, ModelGrads)> {
    let teacher_out = match kind {
        LossKind::Task => None,
        LossKind::Distill { eta } => {
            check_eta(eta)?;
            let t = teacher.ok_or_else(|| Error::Config("distillation needs a teacher".into()))?;
            Some(predict(t, batch, ForwardMode::Dense)?)
        }
    };
    let mut prog = Program::new();
    let bound = bind(&mut prog, model, true);
    let out = forward(&mut prog, model, &bound, batch, mode)?;
    let task = match batch {
        Batch::Tokens { targets, .. } => record_ce(&mut prog, out, targets)?,
        Batch::Features { y, .. } => record_mse(&mut prog, out, y)?,
    };
    let loss = match (kind, &teacher_out, batch) {
        (LossKind::Distill { eta }, Some(t), Batch::Tokens { .. }) => {
            let kl = record_kl(&mut prog, t, out)?;
            record_mix(&mut prog, kl, task, eta)?
        }
        (LossKind::Distill { eta }, Some(t), Batch::Features { .. }) => {
            let d = record_mse(&mut prog, out, t)?;
            record_mix(&mut prog, d, task, eta)?
        }
        _ => task,
    };
    let value = finite(prog.value(loss).item(), "training loss")?;
    let mut grads = prog.backward(loss)?;
    let weights = bound
        .weights
        .iter()
        .zip(&model.slots)
        .map(|(&v, s)| grads.take(v).unwrap_or_else(|| Tensor::zeros(s.value.shape())))
        .collect();
    let scaling = bound
        .scaling
        .iter()
        .zip(&model.slots)
        .map(|(v, s)| {
            v.map(|v| {
                grads
                    .take(v)
                    .unwrap_or_else(|| Tensor::zeros(s.scaling.as_ref().expect("bound").shape()))
            })
        })
        .collect();
    Ok((value, ModelGrads { weights, scaling }))
}

/// Mean task loss (CE or squared error) of a frozen forward pass.
pub fn eval_loss(model: &Model, batch: &Batch, mode: ForwardMode) -> Result<f64> {
    let out = predict(model, batch, mode)?;
    match batch {
        Batch::Tokens { targets, .. } => ce_loss(&out, targets),
        Batch::Features { y, .. } => mse_loss(&out, y),
    }
}
