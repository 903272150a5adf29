use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,train_loss,val_ce,val_ppl,dense_ppl,r_t,i_t,S_t,avg_unmasked_mag,avg_mag_at_flip,prog_at_last_flip,alpha,lr";

pub const MASK_LOG_HEADER: &str = "step,flip_rate,init_flip_rate,sparse_weight_ratio,avg_unmasked_mag,avg_mag_at_flip,prog_at_last_flip";

/// One evaluation row.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsRow {
    pub step: usize,
    /// Mean training objective over the steps since the previous row; at
    /// step 0 this repeats `val_ce`.
    pub train_loss: f64,
    /// Validation loss of the deployable view (sparse forward once masks
    /// exist).
    pub val_ce: f64,
    pub val_ppl: f64,
    /// Validation perplexity of the dense forward over all weights.
    pub dense_ppl: f64,
    pub r_t: f64,
    pub i_t: f64,
    pub s_t: f64,
    pub avg_unmasked_mag: f64,
    pub avg_mag_at_flip: f64,
    pub prog_at_last_flip: f64,
    pub alpha: f64,
    pub lr: f64,
}

impl MetricsRow {
    fn fields(&self) -> [f64; 12] {
        [
            self.train_loss,
            self.val_ce,
            self.val_ppl,
            self.dense_ppl,
            self.r_t,
            self.i_t,
            self.s_t,
            self.avg_unmasked_mag,
            self.avg_mag_at_flip,
            self.prog_at_last_flip,
            self.alpha,
            self.lr,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub rows: Vec<MetricsRow>,
}

impl RunMetrics {
    pub fn push(&mut self, row: MetricsRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.step <= last.step {
                return Err(Error::Program(format!(
                    "metrics step {} after step {}",
                    row.step, last.step
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.rows {
            write!(out, "{}", r.step).expect("string write");
            for v in r.fields() {
                write!(out, ",{v}").expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(METRICS_HEADER) {
            return Err(Error::Format("metrics file has an unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = || Error::Format(format!("metrics line {} is malformed", n + 2));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 13 {
                return Err(bad());
            }
            let step = cells[0].parse().map_err(|_| bad())?;
            let v: Vec<f64> = cells[1..]
                .iter()
                .map(|c| c.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            rows.push(MetricsRow {
                step,
                train_loss: v[0],
                val_ce: v[1],
                val_ppl: v[2],
                dense_ppl: v[3],
                r_t: v[4],
                i_t: v[5],
                s_t: v[6],
                avg_unmasked_mag: v[7],
                avg_mag_at_flip: v[8],
                prog_at_last_flip: v[9],
                alpha: v[10],
                lr: v[11],
            });
        }
        Ok(RunMetrics { rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = METRICS_HEADER.split(',').position(|h| h == name)?;
        Some(
            self.rows
                .iter()
                .map(|r| if idx == 0 { r.step as f64 } else { r.fields()[idx - 1] })
                .collect(),
        )
    }
}

/// Mask statistics at one refresh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskLogRow {
    pub step: usize,
    pub stats: crate::sparsity::MaskStats,
}

pub fn mask_log_csv(rows: &[MaskLogRow]) -> String {
    let mut out = String::from(MASK_LOG_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.stats;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.step,
            s.flip_rate,
            s.init_flip_rate,
            s.sparse_weight_ratio,
            s.avg_unmasked_magnitude,
            s.avg_magnitude_at_flip,
            s.avg_progress_at_last_flip
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut m = RunMetrics::default();
        m.push(MetricsRow {
            step: 0,
            val_ce: 1.25,
            s_t: f64::NAN,
            ..Default::default()
        })
        .unwrap();
        m.push(MetricsRow {
            step: 50,
            lr: 1e-3,
            ..Default::default()
        })
        .unwrap();
        assert!(m.push(MetricsRow::default()).is_err());
        let text = m.to_csv();
        let back = RunMetrics::from_csv(&text).unwrap();
        assert_eq!(back.to_csv(), text);
        assert_eq!(back.column("lr").unwrap(), vec![0.0, 1e-3]);
        assert_eq!(back.column("step").unwrap(), vec![0.0, 50.0]);
    }
}
