//! Pretrains a small dense transformer on synthetic Markov text and prints the
//! validation perplexity curve next to the source's entropy-rate floor.

mod common;

use sparselab::nn::{perplexity, Model};
use sparselab::trainer::{pretrain_dense, RunOutcome, TrainPlan};
use sparselab::Result;

pub fn run_example() -> Result<(RunOutcome, f64)> {
    let source = common::source()?;
    let floor = perplexity(source.empirical_entropy_rate(&source.generate(40_000)));
    let task = common::task()?;
    let init = Model::init(&common::spec(0))?;
    Ok((pretrain_dense(&common::shrink(TrainPlan::dense(250)), &task, &init)?, floor))
}

fn main() -> Result<()> {
    let (out, floor) = run_example()?;
    println!("entropy-rate floor: ppl {floor:.3}");
    for row in &out.metrics.rows {
        println!("step {:>4}  train {:.4}  val ppl {:.3}", row.step, row.train_loss, row.val_ppl);
    }
    Ok(())
}
