//! Fits the token-only scaling law to the bundled sparse-retraining curves and
//! checks the held-out 40B point.

use sparselab::scalinglaw::{fit_token_law, leave_one_out, parse_points_csv, tokens_to_match, LawFit, HeldOut, DEFAULT_BETA};
use sparselab::Result;

pub const CURVES: [(&str, &str); 3] = [
    ("2-7b", include_str!("../data/retrain_2-7b.csv")),
    ("2-13b", include_str!("../data/retrain_2-13b.csv")),
    ("3-8b", include_str!("../data/retrain_3-8b.csv")),
];

pub fn run_example() -> Result<Vec<(&'static str, LawFit, HeldOut)>> {
    CURVES
        .iter()
        .map(|&(name, text)| {
            let points = parse_points_csv(text)?;
            Ok((name, fit_token_law(&points, DEFAULT_BETA)?, leave_one_out(&points, DEFAULT_BETA)?))
        })
        .collect()
}

fn main() -> Result<()> {
    for (name, fit, held) in run_example()? {
        println!(
            "{name:>6}  A {:.4}  B {:.4}  R2 {:.4}  40B predicted {:.3} (actual {:.3})",
            fit.a, fit.b, fit.r2, held.predicted_ppl, held.actual_ppl
        );
        println!("        tokens to reach 5.12: {:?}", tokens_to_match(&fit, 5.12)?);
    }
    Ok(())
}
