//! Segment scaling on an N:M-masked matrix, then folded into the weights.
//!
//! The scaled sparse product and the product with the folded matrix agree to
//! rounding, and the folded matrix still satisfies the N:M pattern.

use sparselab::scaling::{apply_group_scaling, fold_scaling, init_scaling};
use sparselab::sparsity::{apply_mask, compute_nm_mask, validate_sparse_weights, NMConfig};
use sparselab::tensor::Tensor;
use sparselab::Result;

pub struct FoldReport {
    pub max_abs_diff: f64,
    pub pattern_ok: bool,
}

pub fn run_example() -> Result<FoldReport> {
    let (rows, cols) = (6, 16);
    let w = Tensor::new(
        &[rows, cols],
        (0..rows * cols).map(|k| ((k * 37 % 101) as f64 / 50.0 - 1.0) * 0.3).collect(),
    )?;
    let x = Tensor::new(&[cols, 3], (0..cols * 3).map(|k| (k as f64 * 0.7).sin()).collect())?;
    let nm = NMConfig::default();
    let mask = compute_nm_mask(&w, &nm)?;
    let sparse = apply_mask(&w, &mask)?;

    let init = init_scaling(&[(rows, cols)], 2, nm.m())?;
    let trained = Tensor::new(&[rows, 2], (0..rows * 2).map(|k| 0.75 + 0.05 * k as f64).collect())?;
    let a = init.layers[0].zip_map(&trained, |one, s| one * s)?;

    let scaled = apply_group_scaling(&sparse, &a)?.matmul(&x)?;
    let folded = fold_scaling(&sparse, &a)?;
    Ok(FoldReport {
        max_abs_diff: scaled.max_abs_diff(&folded.matmul(&x)?)?,
        pattern_ok: validate_sparse_weights(&folded, &nm).is_ok(),
    })
}

fn main() -> Result<()> {
    let r = run_example()?;
    println!("max |scaled - folded| = {:.3e}", r.max_abs_diff);
    println!("folded matrix keeps 2:4 pattern: {}", r.pattern_ok);
    Ok(())
}
