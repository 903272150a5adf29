//! Mask dynamics of CAST and SR-STE on the same dense checkpoint: flip rate,
//! flip rate against the initial mask, sparse weight ratio and the average
//! magnitude of weights at their last flip.

mod common;

use sparselab::trainer::{train, FlipSummary, Lambda, MaskLogRow, TrainPlan};
use sparselab::Result;

pub struct Dynamics {
    pub name: &'static str,
    pub log: Vec<MaskLogRow>,
    pub flips: FlipSummary,
}

pub fn run_example() -> Result<Vec<Dynamics>> {
    let task = common::task()?;
    let dense = common::dense(&task, 200)?;
    let mut cast = TrainPlan::cast(200);
    cast.lambda = Lambda::Fixed(0.1);
    cast.schedule = cast.schedule.with_base(3e-3);
    let srste = TrainPlan::srste(200);
    [("cast", cast), ("srste", srste)]
        .into_iter()
        .map(|(name, plan)| {
            let plan = common::shrink(plan);
            let out = train(&plan, &task, &dense, plan.kd.then_some(&dense))?;
            Ok(Dynamics { name, log: out.mask_log, flips: out.flips })
        })
        .collect()
}

fn main() -> Result<()> {
    for d in run_example()? {
        println!("{}: avg |w| at last flip {:.4}, ever flipped {} of {}", d.name, d.flips.avg_magnitude_at_last_flip, d.flips.ever_flipped, d.flips.total_entries);
        for row in d.log.iter().step_by(4) {
            println!(
                "  step {:>4}  r_t {:.4}  i_t {:.4}  S_t {:.5}",
                row.step, row.stats.flip_rate, row.stats.init_flip_rate, row.stats.sparse_weight_ratio
            );
        }
    }
    Ok(())
}
