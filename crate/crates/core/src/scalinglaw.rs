//! Token-only scaling law `L(D) = A + B · D^(−β)` with `β` fixed.
//!
//! `L` is the natural log of perplexity and `D` is in billions of tokens.

use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.2849;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawPoint {
    /// Training tokens, in billions.
    pub tokens: f64,
    /// ln(perplexity), in nats.
    pub loss: f64,
}

impl LawPoint {
    pub fn from_perplexity(tokens: f64, ppl: f64) -> Result<Self> {
        if !(tokens > 0.0 && tokens.is_finite()) {
            return Err(Error::Law(format!("token count {tokens} must be positive")));
        }
        if !(ppl > 0.0 && ppl.is_finite()) {
            return Err(Error::Law(format!("perplexity {ppl} must be positive")));
        }
        Ok(LawPoint {
            tokens,
            loss: ppl.ln(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LawFit {
    pub a: f64,
    pub b: f64,
    pub beta: f64,
    pub r2: f64,
    pub points: usize,
}

/// Ordinary least squares of `L` on `x = D^(−β)`.
pub fn fit_token_law(points: &[LawPoint], beta: f64) -> Result<LawFit> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Law(format!("beta {beta} must be positive")));
    }
    if points.len() < 2 {
        return Err(Error::Law(format!("need at least 2 points, got {}", points.len())));
    }
    for p in points {
        if !(p.tokens > 0.0 && p.tokens.is_finite() && p.loss.is_finite()) {
            return Err(Error::Law(format!("invalid point {p:?}")));
        }
    }
    let xs: Vec<f64> = points.iter().map(|p| p.tokens.powf(-beta)).collect();
    let n = points.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = points.iter().map(|p| p.loss).sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx <= 0.0 {
        return Err(Error::Law("token counts are all identical".into()));
    }
    let sxy: f64 = xs.iter().zip(points).map(|(x, p)| (x - mx) * (p.loss - my)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let ss_tot: f64 = points.iter().map(|p| (p.loss - my) * (p.loss - my)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(points)
        .map(|(x, p)| {
            let r = p.loss - (a + b * x);
            r * r
        })
        .sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LawFit {
        a,
        b,
        beta,
        r2,
        points: points.len(),
    })
}

impl LawFit {
    /// Loss (nats) after `tokens` billion tokens.
    pub fn predict_loss(&self, tokens: f64) -> f64 {
        self.a + self.b * tokens.powf(-self.beta)
    }

    pub fn predict_perplexity(&self, tokens: f64) -> f64 {
        self.predict_loss(tokens).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TokensToMatch {
    /// Billions of tokens needed.
    Tokens(f64),
    /// The target lies at or below the asymptote `e^A`.
    AsymptoteExceeded { asymptote_ppl: f64 },
}

/// Inverse of [`LawFit::predict_perplexity`].
pub fn tokens_to_match(fit: &LawFit, target_ppl: f64) -> Result<TokensToMatch> {
    if !(target_ppl > 0.0 && target_ppl.is_finite()) {
        return Err(Error::Law(format!("target perplexity {target_ppl} must be positive")));
    }
    let gap = target_ppl.ln() - fit.a;
    if gap <= 0.0 || fit.b <= 0.0 {
        return Ok(TokensToMatch::AsymptoteExceeded {
            asymptote_ppl: fit.a.exp(),
        });
    }
    Ok(TokensToMatch::Tokens((fit.b / gap).powf(1.0 / fit.beta)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldOut {
    pub tokens: f64,
    pub actual_ppl: f64,
    pub predicted_ppl: f64,
}

impl HeldOut {
    pub fn abs_error(&self) -> f64 {
        (self.predicted_ppl - self.actual_ppl).abs()
    }
}

/// Fits without the largest-`D` point and predicts it.
pub fn leave_one_out(points: &[LawPoint], beta: f64) -> Result<HeldOut> {
    if points.len() < 3 {
        return Err(Error::Law(format!(
            "leave-one-out needs at least 3 points, got {}",
            points.len()
        )));
    }
    let (idx, _) = points
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.tokens.total_cmp(&b.1.tokens))
        .expect("non-empty");
    held_out_at(points, idx, beta)
}

/// Holds out every point in turn.
pub fn leave_each_out(points: &[LawPoint], beta: f64) -> Result<Vec<HeldOut>> {
    if points.len() < 3 {
        return Err(Error::Law(format!(
            "leave-one-out needs at least 3 points, got {}",
            points.len()
        )));
    }
    (0..points.len()).map(|i| held_out_at(points, i, beta)).collect()
}

fn held_out_at(points: &[LawPoint], idx: usize, beta: f64) -> Result<HeldOut> {
    let rest: Vec<LawPoint> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != idx)
        .map(|(_, p)| *p)
        .collect();
    let fit = fit_token_law(&rest, beta)?;
    let p = points[idx];
    Ok(HeldOut {
        tokens: p.tokens,
        actual_ppl: p.loss.exp(),
        predicted_ppl: fit.predict_perplexity(p.tokens),
    })
}

/// Reads `tokens_billions,perplexity` rows. Lines starting with `#` and a
/// header line are skipped.
pub fn parse_points_csv(text: &str) -> Result<Vec<LawPoint>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(Error::Format(format!("line {}: expected 2 columns", n + 1)));
        }
        let parsed = (cells[0].parse::<f64>(), cells[1].parse::<f64>());
        match parsed {
            (Ok(d), Ok(p)) => out.push(
                LawPoint::from_perplexity(d, p).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?,
            ),
            _ if out.is_empty() && cells[0] == "tokens_billions" => {}
            _ => return Err(Error::Format(format!("line {}: not a number pair", n + 1))),
        }
    }
    Ok(out)
}

/// Plain-text report of a fit.
pub fn report(fit: &LawFit, loo: Option<&HeldOut>, target: Option<(f64, TokensToMatch)>) -> String {
    let mut s = String::new();
    writeln!(s, "A\t{:.6}", fit.a).unwrap();
    writeln!(s, "B\t{:.6}", fit.b).unwrap();
    writeln!(s, "beta\t{}", fit.beta).unwrap();
    writeln!(s, "R2\t{:.6}", fit.r2).unwrap();
    writeln!(s, "points\t{}", fit.points).unwrap();
    if let Some(h) = loo {
        writeln!(s, "holdout_tokens\t{}", h.tokens).unwrap();
        writeln!(s, "holdout_actual_ppl\t{:.4}", h.actual_ppl).unwrap();
        writeln!(s, "holdout_predicted_ppl\t{:.4}", h.predicted_ppl).unwrap();
        writeln!(s, "holdout_abs_error\t{:.4}", h.abs_error()).unwrap();
    }
    match target {
        Some((ppl, TokensToMatch::Tokens(d))) => {
            writeln!(s, "target_ppl\t{ppl}").unwrap();
            writeln!(s, "tokens_to_match_billions\t{d:.1}").unwrap();
            writeln!(
                s,
                "note\tthe inverse is sensitive to rounding of A and B; treat it as accurate to about 25%"
            )
            .unwrap();
        }
        Some((ppl, TokensToMatch::AsymptoteExceeded { asymptote_ppl })) => {
            writeln!(s, "target_ppl\t{ppl}").unwrap();
            writeln!(s, "tokens_to_match_billions\tunreachable (asymptote {asymptote_ppl:.4})").unwrap();
        }
        None => {}
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exact(a: f64, b: f64, beta: f64, ds: &[f64]) -> Vec<LawPoint> {
        ds.iter()
            .map(|&d| LawPoint {
                tokens: d,
                loss: a + b * d.powf(-beta),
            })
            .collect()
    }

    #[test]
    fn recovers_exact_law() {
        let pts = exact(1.2, 0.7, DEFAULT_BETA, &[1.0, 2.0, 5.0, 11.0, 40.0]);
        let fit = fit_token_law(&pts, DEFAULT_BETA).unwrap();
        assert!((fit.a - 1.2).abs() < 1e-10 && (fit.b - 0.7).abs() < 1e-10);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(leave_one_out(&pts, DEFAULT_BETA).unwrap().abs_error() < 1e-9);
    }

    #[test]
    fn two_points_fit_exactly() {
        let pts = [
            LawPoint::from_perplexity(1.0, 6.0).unwrap(),
            LawPoint::from_perplexity(4.0, 5.0).unwrap(),
        ];
        assert_eq!(fit_token_law(&pts, DEFAULT_BETA).unwrap().r2, 1.0);
        assert!(fit_token_law(&pts[..1], DEFAULT_BETA).is_err());
        assert!(fit_token_law(&[pts[0], pts[0]], DEFAULT_BETA).is_err());
        assert!(leave_one_out(&pts, DEFAULT_BETA).is_err());
    }

    #[test]
    fn inverse_and_asymptote() {
        let fit = LawFit {
            a: 1.5,
            b: 0.3,
            beta: DEFAULT_BETA,
            r2: 1.0,
            points: 2,
        };
        match tokens_to_match(&fit, (1.8f64).exp()).unwrap() {
            TokensToMatch::Tokens(d) => assert!((d - 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        for d in [0.5, 3.0, 95.0] {
            match tokens_to_match(&fit, fit.predict_perplexity(d)).unwrap() {
                TokensToMatch::Tokens(x) => assert!((x - d).abs() / d < 1e-9),
                other => panic!("{other:?}"),
            }
        }
        assert!(matches!(
            tokens_to_match(&fit, 1.4f64.exp()).unwrap(),
            TokensToMatch::AsymptoteExceeded { .. }
        ));
    }

    #[test]
    fn csv_parsing() {
        let pts = parse_points_csv("# note\ntokens_billions,perplexity\n1.5,6.02\n3,5.76\n").unwrap();
        assert_eq!(pts.len(), 2);
        assert!((pts[0].loss - 6.02f64.ln()).abs() < 1e-15);
        assert!(parse_points_csv("1.5;6.02\n").is_err());
        assert!(parse_points_csv("1.5,abc\n").is_err());
        assert!(parse_points_csv("-1,5\n").is_err());
    }
}
