//! Dense pretraining followed by CAST: AdamS decay on masked weights, learned
//! segment scaling and distillation from the dense teacher. Prints the sparse
//! weight ratio over training and the cost of the final hard prune.

mod common;

use sparselab::sparsity::validate_mask;
use sparselab::trainer::{cast_train, Lambda, RunOutcome, TrainPlan};
use sparselab::Result;

pub fn run_example() -> Result<RunOutcome> {
    let task = common::task()?;
    let dense = common::dense(&task, 200)?;
    let mut plan = common::shrink(TrainPlan::cast(200));
    plan.lambda = Lambda::Fixed(0.05);
    plan.schedule = plan.schedule.with_base(3e-3);
    let out = cast_train(&plan, &task, &dense)?;
    if let Ok(model) = out.export() {
        for mask in model.masks().unwrap_or_default() {
            assert!(validate_mask(&mask, &plan.nm).is_ok());
        }
    }
    Ok(out)
}

fn main() -> Result<()> {
    let out = run_example()?;
    for row in &out.metrics.rows {
        println!(
            "step {:>4}  sparse ppl {:.3}  dense ppl {:.3}  S_t {:.5}  r_t {:.4}",
            row.step, row.val_ppl, row.dense_ppl, row.s_t, row.r_t
        );
    }
    if let Some(d) = out.prune_delta {
        println!("final prune: val CE {:.6} -> {:.6} ({:.2e} relative)", d.before, d.after, d.relative());
    }
    match out.export() {
        Ok(_) => println!("export accepted"),
        Err(e) => println!("{e}"),
    }
    Ok(())
}
