//! Small shared setup for the training examples: a 2-layer transformer of
//! width 32 on synthetic Markov text, short enough to run in seconds.

#![allow(dead_code)]

use sparselab::nn::data::{Corpus, MarkovText};
use sparselab::nn::{Family, Model, ModelSpec};
use sparselab::optim::Schedule;
use sparselab::trainer::{pretrain_dense, Task, TrainPlan};
use sparselab::Result;

pub const CONTEXT: usize = 16;

pub fn spec(seed: u64) -> ModelSpec {
    ModelSpec {
        family: Family::Transformer { vocab: 64, width: 32, heads: 2, layers: 2, context: CONTEXT },
        seed,
    }
}

pub fn source() -> Result<MarkovText> {
    MarkovText::new(0, MarkovText::DEFAULT_SHARPNESS)
}

pub fn task() -> Result<Task> {
    let corpus = Corpus::new(source()?.generate(40_000), CONTEXT)?;
    Ok(Task::language(corpus, CONTEXT, 8))
}

pub fn shrink(mut plan: TrainPlan) -> TrainPlan {
    plan.context = CONTEXT;
    plan.eval_every = 25;
    plan.calibration_batches = 8;
    plan.schedule = Schedule::WarmupCosine { base: plan.schedule.base(), warmup: 10 };
    plan
}

pub fn dense(task: &Task, steps: usize) -> Result<Model> {
    let init = Model::init(&spec(0))?;
    Ok(pretrain_dense(&shrink(TrainPlan::dense(steps)), task, &init)?.model)
}
