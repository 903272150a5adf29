//! Straight-through gradient error on masked weights. For each masked entry
//! the probe compares the dense-forward gradient with the straight-through
//! gradient of the sparse forward, net of the λθ decay term, and relates the
//! gap to |θ|.

mod common;

use sparselab::nn::data::{Corpus, Sampler};
use sparselab::sparsity::NMConfig;
use sparselab::trainer::probe::{ste_error_probe, ste_error_quadratic, SteProbe};
use sparselab::Result;

pub fn run_example() -> Result<(f64, SteProbe)> {
    let quadratic = ste_error_quadratic(0.5, 2.0, 0.1);
    let task = common::task()?;
    let dense = common::dense(&task, 150)?;
    let corpus = Corpus::new(common::source()?.generate(20_000), common::CONTEXT)?;
    let batch = Sampler::new(1).next_batch(&corpus, 8, common::CONTEXT);
    Ok((quadratic, ste_error_probe(&dense, &batch, 1e-3, &NMConfig::default())?))
}

fn main() -> Result<()> {
    let (quadratic, probe) = run_example()?;
    println!("quadratic, theta 0.5, lambda 0.1: error {quadratic}");
    println!(
        "transformer: {} masked entries, slope {:.4e}, intercept {:.3e}, pearson {:.3}",
        probe.pairs.len(),
        probe.slope,
        probe.intercept,
        probe.pearson
    );
    Ok(())
}
