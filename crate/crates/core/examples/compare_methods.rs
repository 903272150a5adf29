//! CAST against SR-STE and naive retraining from the same dense checkpoint on
//! a matched compute budget: runs without distillation get 4/3 of the steps.

mod common;

use sparselab::trainer::{train, Lambda, Method, TrainPlan};
use sparselab::Result;

pub struct Row {
    pub method: Method,
    pub steps: usize,
    pub val_ce: f64,
    pub dense_ppl_start: f64,
    pub dense_ppl_end: f64,
}

pub fn run_example() -> Result<Vec<Row>> {
    let task = common::task()?;
    let dense = common::dense(&task, 200)?;
    let kd_steps = 150;
    let mut cast = TrainPlan::cast(kd_steps);
    cast.lambda = Lambda::Fixed(0.05);
    cast.schedule = cast.schedule.with_base(3e-3);
    let mut plans = vec![cast];
    for base in [TrainPlan::srste(1), TrainPlan::naive(1)] {
        let steps = base.matched_steps(kd_steps);
        plans.push(TrainPlan { steps, ..base });
    }
    plans
        .into_iter()
        .map(|plan| {
            let plan = common::shrink(plan);
            let out = train(&plan, &task, &dense, plan.kd.then_some(&dense))?;
            let dppl = out.metrics.column("dense_ppl").unwrap_or_default();
            Ok(Row {
                method: plan.method,
                steps: plan.steps,
                val_ce: out.final_val_ce().unwrap_or(f64::NAN),
                dense_ppl_start: dppl.first().copied().unwrap_or(f64::NAN),
                dense_ppl_end: dppl.last().copied().unwrap_or(f64::NAN),
            })
        })
        .collect()
}

fn main() -> Result<()> {
    println!("method  steps  sparse val CE  dense ppl start -> end");
    for r in run_example()? {
        println!(
            "{:<6}  {:>5}  {:>13.4}  {:.3} -> {:.3}",
            r.method.name(),
            r.steps,
            r.val_ce,
            r.dense_ppl_start,
            r.dense_ppl_end
        );
    }
    Ok(())
}
