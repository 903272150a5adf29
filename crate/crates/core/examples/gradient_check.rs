//! Compares reverse-mode gradients of a tiny transformer loss against central
//! finite differences, one parameter tensor at a time.

use sparselab::autograd::{finite_diff_grad, grads_close};
use sparselab::nn::data::{Corpus, MarkovText, Sampler};
use sparselab::nn::{eval_loss, loss_and_grads, Family, ForwardMode, LossKind, Model, ModelSpec};
use sparselab::Result;

pub fn run_example() -> Result<Vec<(String, std::result::Result<(), String>)>> {
    let spec = ModelSpec {
        family: Family::Transformer { vocab: 64, width: 8, heads: 2, layers: 1, context: 4 },
        seed: 11,
    };
    let model = Model::init(&spec)?;
    let corpus = Corpus::new(MarkovText::new(3, 2.0)?.generate(2000), 4)?;
    let batch = Sampler::new(5).next_batch(&corpus, 2, 4);
    let (_, grads) = loss_and_grads(&model, &batch, LossKind::Task, ForwardMode::Dense, None)?;

    let mut report = vec![];
    for (i, slot) in model.slots.iter().enumerate() {
        let fd = finite_diff_grad(
            |p| {
                let mut m = model.clone();
                m.slots[i].value = p[0].clone();
                eval_loss(&m, &batch, ForwardMode::Dense)
            },
            std::slice::from_ref(&slot.value),
            1e-6,
        )?;
        report.push((slot.name.clone(), grads_close(&grads.weights[i], &fd[0], 1e-4, 1e-8)));
    }
    Ok(report)
}

fn main() -> Result<()> {
    for (name, verdict) in run_example()? {
        match verdict {
            Ok(()) => println!("ok    {name}"),
            Err(e) => println!("FAIL  {name}: {e}"),
        }
    }
    Ok(())
}
