//! AdamS against Adam with an L1 penalty on a single masked coordinate.
//!
//! The coordinate starts at 1.0 under a constant task gradient of -0.2. Adam
//! with the L1 term folded into the gradient moves it at a normalized rate
//! from the first step. AdamS blends the gradient with λ·sign(θ) in the first
//! moment with weight α = t/T, so the task gradient dominates early and the
//! decay takes over towards the end of training.

use sparselab::optim::{adam_l1_step, adams_step, AdamSConfig, Betas, MomentState};
use sparselab::sparsity::Mask;
use sparselab::tensor::Tensor;
use sparselab::Result;

pub struct Trace {
    pub adams: Vec<f64>,
    pub adam_l1: Vec<f64>,
}

pub fn run_example() -> Result<Trace> {
    let steps = 1000;
    let (lambda, lr) = (0.5, 2e-3);
    let betas = Betas::default();
    let masked = Mask::new(1, 4, vec![false, true, true, true])?;
    let grad = Tensor::new(&[1, 4], vec![-0.2, 0.0, 0.0, 0.0])?;
    let cfg = AdamSConfig { lambda, betas, total_steps: steps, refresh_every: 1 };

    let mut trace = Trace { adams: vec![], adam_l1: vec![] };
    let mut a = Tensor::new(&[1, 4], vec![1.0, 0.5, 0.5, 0.5])?;
    let mut b = a.clone();
    let (mut sa, mut sb) = (MomentState::zeros(4), MomentState::zeros(4));
    for t in 1..=steps {
        a = adams_step(&a, &grad, Some(&masked), &mut sa, &cfg, t, lr)?;
        b = adam_l1_step(&b, &grad, Some(&masked), &mut sb, lambda, &betas, t, lr)?;
        trace.adams.push(a.data()[0]);
        trace.adam_l1.push(b.data()[0]);
    }
    Ok(trace)
}

fn main() -> Result<()> {
    let trace = run_example()?;
    println!("step  adams      adam_l1");
    for t in (0..trace.adams.len()).step_by(100).chain([trace.adams.len() - 1]) {
        println!("{:>4}  {:+.6}  {:+.6}", t + 1, trace.adams[t], trace.adam_l1[t]);
    }
    Ok(())
}
