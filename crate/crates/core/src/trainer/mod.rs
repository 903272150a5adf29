//! Training pipelines: dense pretraining, CAST, SR-STE and naive retraining,
//! plus export and diagnostic probes.

pub mod checkpoint;
pub mod metrics;
pub mod probe;

use crate::error::{Error, Result};
use crate::nn::data::{val_batches, Corpus, Sampler, SamplerState};
use crate::nn::{eval_loss, loss_and_grads, perplexity, Batch, ForwardMode, LossKind, Model};
use crate::optim::{
    adam_step, adams_step, alpha_at, lr_at, srste_step, AdamSConfig, Betas, MomentState, Schedule,
};
use crate::scaling::{check_segments, fold_scaling};
use crate::sparsity::{
    apply_mask, compute_nm_mask, record_flips, sparse_weight_ratio, validate_mask, FlipLedger, Mask,
    MaskStats, NMConfig,
};
use crate::tensor::Tensor;

pub use checkpoint::Checkpoint;
pub use metrics::{MaskLogRow, MetricsRow, RunMetrics};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Dense,
    Cast,
    Srste,
    Naive,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Dense => "dense",
            Method::Cast => "cast",
            Method::Srste => "srste",
            Method::Naive => "naive",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Method::Dense),
            "cast" => Ok(Method::Cast),
            "srste" => Ok(Method::Srste),
            "naive" => Ok(Method::Naive),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected dense, cast, srste or naive"
            ))),
        }
    }
}

/// Decay strength: fixed, or the median gradient magnitude measured on the
/// dense model before training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    Auto,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub method: Method,
    /// Total steps `T`.
    pub steps: usize,
    /// Sequences (or regression rows) per step.
    pub batch: usize,
    pub context: usize,
    pub schedule: Schedule,
    pub betas: Betas,
    pub nm: NMConfig,
    /// Scaling segments per row; 0 turns weight scaling off.
    pub segments: usize,
    /// Mask refresh cadence `T₁`.
    pub refresh_every: usize,
    pub eval_every: usize,
    pub lambda: Lambda,
    /// Weight of the distillation term.
    pub eta: f64,
    /// Train against the dense teacher.
    pub kd: bool,
    /// Seeds the data order.
    pub seed: u64,
    /// Minimum `S_T` for a CAST export.
    pub export_threshold: f64,
    /// Batches used to calibrate `Lambda::Auto`.
    pub calibration_batches: usize,
}

impl TrainPlan {
    fn base(method: Method, steps: usize) -> Self {
        TrainPlan {
            method,
            steps,
            batch: 4,
            context: 64,
            schedule: Schedule::WarmupCosine {
                base: 1e-3,
                warmup: 100,
            },
            betas: Betas::default(),
            nm: NMConfig::default(),
            segments: 0,
            refresh_every: 10,
            eval_every: 50,
            lambda: Lambda::Fixed(0.0),
            eta: 2.0 / 3.0,
            kd: false,
            seed: 0,
            export_threshold: 0.999,
            calibration_batches: 100,
        }
    }

    pub fn dense(steps: usize) -> Self {
        TrainPlan {
            schedule: Schedule::WarmupCosine {
                base: 3e-3,
                warmup: 100,
            },
            ..Self::base(Method::Dense, steps)
        }
    }

    pub fn cast(steps: usize) -> Self {
        TrainPlan {
            segments: 2,
            lambda: Lambda::Auto,
            kd: true,
            ..Self::base(Method::Cast, steps)
        }
    }

    pub fn srste(steps: usize) -> Self {
        TrainPlan {
            schedule: Schedule::WarmupCosine {
                base: 0.3,
                warmup: 100,
            },
            lambda: Lambda::Fixed(2e-3),
            ..Self::base(Method::Srste, steps)
        }
    }

    pub fn naive(steps: usize) -> Self {
        Self::base(Method::Naive, steps)
    }

    /// Relative compute per step: a teacher forward adds about a third.
    pub fn flop_weight(&self) -> f64 {
        if self.kd {
            4.0 / 3.0
        } else {
            1.0
        }
    }

    /// Steps that give this plan the same compute as `kd_steps` steps of a
    /// distilled run.
    pub fn matched_steps(&self, kd_steps: usize) -> usize {
        ((kd_steps as f64) * (4.0 / 3.0) / self.flop_weight()).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.batch == 0 || self.context == 0 {
            return Err(Error::Config("batch and context must be positive".into()));
        }
        if self.refresh_every == 0 || self.eval_every == 0 {
            return Err(Error::Config("refresh_every and eval_every must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        if let Lambda::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be finite and >= 0")));
            }
        }
        if !(self.schedule.base() > 0.0 && self.schedule.base().is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.betas.validate()
    }
}

/// What the model is trained on.
#[derive(Debug, Clone)]
pub enum Task {
    Language { corpus: Corpus, val: Vec<Batch> },
    Regression { target: Tensor, val: Vec<Batch> },
}

impl Task {
    /// Language modelling on `corpus` with `val_sequences` held-out windows.
    pub fn language(corpus: Corpus, context: usize, val_sequences: usize) -> Self {
        let val = val_batches(&corpus, context, val_sequences, 8);
        Task::Language { corpus, val }
    }

    /// Regression onto `y = target · x` with a fixed 256-row validation set.
    pub fn regression(target: Tensor) -> Self {
        let val = vec![Sampler::new(u64::MAX).next_regression(&target, 256)];
        Task::Regression { target, val }
    }

    pub fn val(&self) -> &[Batch] {
        match self {
            Task::Language { val, .. } | Task::Regression { val, .. } => val,
        }
    }

    pub fn next_batch(&self, sampler: &mut Sampler, plan: &TrainPlan) -> Batch {
        match self {
            Task::Language { corpus, .. } => sampler.next_batch(corpus, plan.batch, plan.context),
            Task::Regression { target, .. } => sampler.next_regression(target, plan.batch),
        }
    }
}

/// Row-weighted mean task loss over the validation batches.
pub fn evaluate(model: &Model, batches: &[Batch], mode: ForwardMode) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for b in batches {
        total += eval_loss(model, b, mode)? * b.rows() as f64;
        rows += b.rows();
    }
    if rows == 0 {
        return Err(Error::Config("validation set is empty".into()));
    }
    Ok(total / rows as f64)
}

/// Change of validation loss caused by the final prune and fold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneDelta {
    pub before: f64,
    pub after: f64,
}

impl PruneDelta {
    pub fn relative(&self) -> f64 {
        (self.after - self.before).abs() / self.before.abs()
    }
}

/// Flip statistics summarizing a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlipSummary {
    pub avg_magnitude_at_last_flip: f64,
    pub avg_magnitude_over_events: f64,
    pub ever_flipped: usize,
    pub total_entries: usize,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub method: Method,
    /// Model at the end of training, before any export.
    pub model: Model,
    /// Hard-pruned, folded model; `None` when the export gate refused it or
    /// the run is dense.
    pub exported: Option<Model>,
    pub metrics: RunMetrics,
    pub mask_log: Vec<MaskLogRow>,
    pub lambda: f64,
    /// `S_T` under the final masks.
    pub final_sparse_weight_ratio: Option<f64>,
    pub prune_delta: Option<PruneDelta>,
    pub flips: FlipSummary,
    pub sampler: SamplerState,
    pub steps: usize,
    pub flop_weight: f64,
    pub export_threshold: f64,
}

impl RunOutcome {
    /// The exported model, or the gate's refusal.
    pub fn export(&self) -> Result<&Model> {
        match (&self.exported, self.final_sparse_weight_ratio) {
            (Some(m), _) => Ok(m),
            (None, Some(s)) => Err(Error::ExportRefused {
                sparse_weight_ratio: s,
                threshold: self.export_threshold,
            }),
            (None, None) => Err(Error::Config("a dense run has no sparse export".into())),
        }
    }

    /// Validation loss of the deployable model.
    pub fn final_val_ce(&self) -> Option<f64> {
        self.metrics.last().map(|r| r.val_ce)
    }
}

/// Hard-prunes every masked layer and folds its scaling factors in.
/// Applying it twice gives the same model.
pub fn final_prune_and_fold(model: &Model, nm: &NMConfig) -> Result<Model> {
    let mut out = model.clone();
    for slot in out.slots.iter_mut().filter(|s| s.sparsifiable) {
        let Some(mask) = &slot.mask else {
            return Err(Error::InvalidMask(format!("{} has no mask to prune with", slot.name)));
        };
        validate_mask(mask, nm).map_err(|v| Error::InvalidMask(format!("{}: {v}", slot.name)))?;
        let mut w = apply_mask(&slot.value, mask)?;
        if let Some(a) = slot.scaling.take() {
            w = fold_scaling(&w, &a)?;
        }
        slot.value = w;
        slot.scaling_state = None;
    }
    Ok(out)
}

/// Median over calibration batches of the per-batch median |g| across all
/// sparsifiable entries of the dense model.
pub fn calibrate_lambda(model: &Model, task: &Task, plan: &TrainPlan) -> Result<f64> {
    let mut sampler = Sampler::new(plan.seed ^ 0xca11_b4a7e);
    let idx = model.sparsifiable_indices();
    let mut medians = Vec::with_capacity(plan.calibration_batches);
    for _ in 0..plan.calibration_batches.max(1) {
        let batch = task.next_batch(&mut sampler, plan);
        let (_, grads) = loss_and_grads(model, &batch, LossKind::Task, ForwardMode::Dense, None)?;
        let mut mags: Vec<f64> = idx
            .iter()
            .flat_map(|&i| grads.weights[i].data().iter().map(|g| g.abs()))
            .collect();
        medians.push(median(&mut mags));
    }
    Ok(median(&mut medians))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

struct Loop<'a> {
    plan: &'a TrainPlan,
    task: &'a Task,
    teacher: Option<&'a Model>,
    model: Model,
    sampler: Sampler,
    lambda: f64,
    ledger: Option<FlipLedger>,
    last_stats: MaskStats,
    mask_log: Vec<MaskLogRow>,
    metrics: RunMetrics,
    loss_acc: (f64, usize),
}

impl<'a> Loop<'a> {
    fn masks(&self) -> Vec<Mask> {
        self.model.masks().unwrap_or_default()
    }

    fn uses_masks(&self) -> bool {
        self.plan.method != Method::Dense
    }

    fn refresh(&mut self, step: usize) -> Result<()> {
        let idx = self.model.sparsifiable_indices();
        let mut cur = Vec::with_capacity(idx.len());
        for &i in &idx {
            let m = compute_nm_mask(&self.model.slots[i].value, &self.plan.nm)?;
            self.model.slots[i].mask = Some(m.clone());
            cur.push(m);
        }
        self.log_masks(step, &cur)
    }

    fn log_masks(&mut self, step: usize, cur: &[Mask]) -> Result<()> {
        let weights = self.model.sparse_weights();
        let ledger = self.ledger.as_mut().expect("mask runs keep a ledger");
        let stats = record_flips(ledger, cur, &weights, step, self.plan.steps)?;
        self.last_stats = stats;
        self.mask_log.push(MaskLogRow { step, stats });
        Ok(())
    }

    fn view(&self) -> ForwardMode {
        if self.uses_masks() {
            ForwardMode::Sparse
        } else {
            ForwardMode::Dense
        }
    }

    fn eval_row(&mut self, step: usize) -> Result<()> {
        let val_ce = evaluate(&self.model, self.task.val(), self.view())?;
        let dense_ce = evaluate(&self.model, self.task.val(), ForwardMode::Dense)?;
        let (sum, n) = self.loss_acc;
        self.loss_acc = (0.0, 0);
        let train_loss = if n == 0 { val_ce } else { sum / n as f64 };
        let (s_t, unmasked) = if self.uses_masks() {
            let masks = self.masks();
            let s = sparse_weight_ratio(&self.model.sparse_weights(), &masks)?;
            (s, avg_kept_magnitude(&self.model, &masks))
        } else {
            (f64::NAN, f64::NAN)
        };
        let alpha = match self.plan.method {
            Method::Cast if step > 0 => alpha_at(step, self.plan.steps)?,
            _ => 0.0,
        };
        self.metrics.push(MetricsRow {
            step,
            train_loss,
            val_ce,
            val_ppl: perplexity(val_ce),
            dense_ppl: perplexity(dense_ce),
            r_t: self.last_stats.flip_rate,
            i_t: self.last_stats.init_flip_rate,
            s_t,
            avg_unmasked_mag: unmasked,
            avg_mag_at_flip: self.last_stats.avg_magnitude_at_flip,
            prog_at_last_flip: self.last_stats.avg_progress_at_last_flip,
            alpha,
            lr: lr_at(&self.plan.schedule, step.saturating_sub(1), self.plan.steps),
        })
    }

    fn step(&mut self, t: usize) -> Result<()> {
        let plan = self.plan;
        let refreshing = matches!(plan.method, Method::Cast | Method::Srste);
        if refreshing && t.is_multiple_of(plan.refresh_every) && t < plan.steps {
            self.refresh(t)?;
        }
        let batch = self.task.next_batch(&mut self.sampler, plan);
        let kind = if plan.kd {
            LossKind::Distill { eta: plan.eta }
        } else {
            LossKind::Task
        };
        let mode = match plan.method {
            Method::Dense | Method::Cast => ForwardMode::Dense,
            Method::Srste | Method::Naive => ForwardMode::Sparse,
        };
        let (loss, grads) = loss_and_grads(&self.model, &batch, kind, mode, self.teacher)?;
        self.loss_acc.0 += loss;
        self.loss_acc.1 += 1;
        let lr = lr_at(&plan.schedule, t - 1, plan.steps);
        let adams = AdamSConfig {
            lambda: self.lambda,
            betas: plan.betas,
            total_steps: plan.steps,
            refresh_every: plan.refresh_every,
        };
        for (slot, (g, ga)) in self
            .model
            .slots
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.scaling))
        {
            let mask = if slot.sparsifiable { slot.mask.as_ref() } else { None };
            slot.value = match plan.method {
                Method::Dense => adam_step(&slot.value, g, &mut slot.state, &plan.betas, t, lr)?,
                Method::Cast if slot.sparsifiable => {
                    adams_step(&slot.value, g, mask, &mut slot.state, &adams, t, lr)?
                }
                Method::Cast => adam_step(&slot.value, g, &mut slot.state, &plan.betas, t, lr)?,
                Method::Srste => srste_step(&slot.value, g, mask, self.lambda, lr)?,
                Method::Naive => {
                    let g = match mask {
                        Some(m) => apply_mask(g, m)?,
                        None => g.clone(),
                    };
                    adam_step(&slot.value, &g, &mut slot.state, &plan.betas, t, lr)?
                }
            };
            if let (Some(a), Some(ga)) = (slot.scaling.as_mut(), ga) {
                let st = slot
                    .scaling_state
                    .get_or_insert_with(|| MomentState::zeros(a.len()));
                *a = adam_step(a, ga, st, &plan.betas, t, lr)?;
            }
        }
        if refreshing && t == plan.steps && t.is_multiple_of(plan.refresh_every) {
            self.refresh(t)?;
        }
        if t.is_multiple_of(plan.eval_every) || t == plan.steps {
            self.eval_row(t)?;
        }
        Ok(())
    }
}

fn avg_kept_magnitude(model: &Model, masks: &[Mask]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (w, m) in model.sparse_weights().iter().zip(masks) {
        for (&v, &b) in w.data().iter().zip(m.bits()) {
            if b {
                s += v.abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(reason) => Error::Diverged { step, reason },
        other => other,
    }
}

/// Runs `plan` from `start`. CAST and the baselines expect `start` to be a
/// dense checkpoint; `teacher` is required when the plan distils.
pub fn train(plan: &TrainPlan, task: &Task, start: &Model, teacher: Option<&Model>) -> Result<RunOutcome> {
    plan.validate()?;
    if plan.kd && teacher.is_none() {
        return Err(Error::Config("distillation needs a teacher checkpoint".into()));
    }
    let mut model = start.clone();
    model.reset_moments();
    for s in &mut model.slots {
        s.mask = None;
        s.scaling = None;
        s.scaling_state = None;
    }
    let lambda = match (plan.method, plan.lambda) {
        (Method::Dense | Method::Naive, _) => 0.0,
        (_, Lambda::Fixed(l)) => l,
        (_, Lambda::Auto) => calibrate_lambda(&model, task, plan)?,
    };
    let mut lp = Loop {
        plan,
        task,
        teacher: if plan.kd { teacher } else { None },
        model,
        sampler: Sampler::new(plan.seed),
        lambda,
        ledger: None,
        last_stats: MaskStats::default(),
        mask_log: Vec::new(),
        metrics: RunMetrics::default(),
        loss_acc: (0.0, 0),
    };
    if lp.uses_masks() {
        let idx = lp.model.sparsifiable_indices();
        for &i in &idx {
            let slot = &mut lp.model.slots[i];
            slot.mask = Some(compute_nm_mask(&slot.value, &plan.nm)?);
            if plan.method == Method::Cast && plan.segments > 0 {
                check_segments(slot.value.cols(), plan.segments, plan.nm.m())?;
                slot.scaling = Some(Tensor::ones(&[slot.value.rows(), plan.segments]));
                slot.scaling_state = Some(MomentState::zeros(slot.value.rows() * plan.segments));
            }
        }
        let initial = lp.masks();
        lp.ledger = Some(FlipLedger::new(initial.clone()));
        lp.log_masks(0, &initial)?;
    }
    lp.eval_row(0)?;
    for t in 1..=plan.steps {
        lp.step(t).map_err(|e| diverged(t, e))?;
    }

    let mut final_s = None;
    let mut exported = None;
    let mut prune_delta = None;
    if lp.uses_masks() {
        let s = sparse_weight_ratio(&lp.model.sparse_weights(), &lp.masks())?;
        final_s = Some(s);
        let gate = plan.method != Method::Cast || s >= plan.export_threshold;
        if gate {
            let before_mode = if plan.method == Method::Cast {
                ForwardMode::Dense
            } else {
                ForwardMode::Sparse
            };
            let before = evaluate(&lp.model, task.val(), before_mode)?;
            let out = final_prune_and_fold(&lp.model, &plan.nm)?;
            let after = evaluate(&out, task.val(), ForwardMode::Dense)?;
            prune_delta = Some(PruneDelta { before, after });
            exported = Some(out);
        }
    }
    let flips = match &lp.ledger {
        Some(l) => FlipSummary {
            avg_magnitude_at_last_flip: l.avg_magnitude_at_last_flip(),
            avg_magnitude_over_events: l.avg_magnitude_over_flip_events(),
            ever_flipped: l.ever_flipped(),
            total_entries: l.initial().iter().map(|m| m.len()).sum(),
        },
        None => FlipSummary::default(),
    };
    Ok(RunOutcome {
        method: plan.method,
        sampler: lp.sampler.state(),
        model: lp.model,
        exported,
        metrics: lp.metrics,
        mask_log: lp.mask_log,
        lambda,
        final_sparse_weight_ratio: final_s,
        prune_delta,
        flips,
        steps: plan.steps,
        flop_weight: plan.flop_weight(),
        export_threshold: plan.export_threshold,
    })
}

fn expect_method(plan: &TrainPlan, m: Method) -> Result<()> {
    if plan.method == m {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "plan is for {} but {} was requested",
            plan.method.name(),
            m.name()
        )))
    }
}

/// Plain Adam training of a freshly initialized model.
pub fn pretrain_dense(plan: &TrainPlan, task: &Task, init: &Model) -> Result<RunOutcome> {
    expect_method(plan, Method::Dense)?;
    train(plan, task, init, None)
}

/// Masks and scaling initialized from `dense`, AdamS with distillation from
/// `dense`, final prune and fold behind the `S_T` gate.
pub fn cast_train(plan: &TrainPlan, task: &Task, dense: &Model) -> Result<RunOutcome> {
    expect_method(plan, Method::Cast)?;
    train(plan, task, dense, Some(dense))
}

/// Sparse forward with straight-through gradients, SGD with decay on masked
/// entries.
pub fn srste_train(plan: &TrainPlan, task: &Task, dense: &Model) -> Result<RunOutcome> {
    expect_method(plan, Method::Srste)?;
    train(plan, task, dense, Some(dense))
}

/// One-shot magnitude masks, frozen, with Adam on the surviving weights.
pub fn naive_retrain(plan: &TrainPlan, task: &Task, dense: &Model) -> Result<RunOutcome> {
    expect_method(plan, Method::Naive)?;
    train(plan, task, dense, Some(dense))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::data::regression_target;
    use crate::nn::ModelSpec;

    fn mlp_setup() -> (Task, Model) {
        let task = Task::regression(regression_target(1, 8, 2));
        let model = Model::init(&ModelSpec::mlp(&[8, 16, 2], 3)).unwrap();
        (task, model)
    }

    #[test]
    fn zero_steps_is_rejected() {
        assert!(TrainPlan::dense(0).validate().is_err());
    }

    #[test]
    fn matched_budget() {
        assert_eq!(TrainPlan::naive(10).matched_steps(3000), 4000);
        assert_eq!(TrainPlan::cast(10).matched_steps(3000), 3000);
    }

    #[test]
    fn naive_keeps_masks_and_masked_weights() {
        let (task, model) = mlp_setup();
        let mut plan = TrainPlan::naive(40);
        plan.batch = 32;
        plan.eval_every = 10;
        let out = naive_retrain(&plan, &task, &model).unwrap();
        assert!(out.mask_log.iter().all(|r| r.stats.flip_rate == 0.0));
        assert!(out.metrics.rows.iter().all(|r| r.r_t == 0.0 && r.i_t == 0.0));
        let i = out.model.sparsifiable_indices()[0];
        let m = out.model.slots[i].mask.as_ref().unwrap();
        for ((&now, &was), &kept) in out.model.slots[i]
            .value
            .data()
            .iter()
            .zip(model.slots[i].value.data())
            .zip(m.bits())
        {
            if !kept {
                assert_eq!(now, was);
            }
        }
    }

    #[test]
    fn prune_and_fold_is_idempotent() {
        let (task, model) = mlp_setup();
        let mut plan = TrainPlan::cast(20);
        plan.batch = 16;
        plan.lambda = Lambda::Fixed(1e-2);
        plan.export_threshold = 0.0;
        let out = cast_train(&plan, &task, &model).unwrap();
        let once = out.export().unwrap().clone();
        let twice = final_prune_and_fold(&once, &plan.nm).unwrap();
        assert_eq!(once, twice);
        assert!(!once.has_scaling());
    }

    #[test]
    fn cast_without_decay_is_refused() {
        let (task, model) = mlp_setup();
        let mut plan = TrainPlan::cast(30);
        plan.batch = 16;
        plan.lambda = Lambda::Fixed(0.0);
        let out = cast_train(&plan, &task, &model).unwrap();
        assert!(out.final_sparse_weight_ratio.unwrap() < 0.999);
        assert!(matches!(out.export(), Err(Error::ExportRefused { .. })));
    }
}
