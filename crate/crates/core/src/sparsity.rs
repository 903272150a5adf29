//! N:M semi-structured masks and mask-dynamics statistics.
//!
//! Every row of a weight matrix is cut into contiguous groups of `M`
//! columns; a valid mask keeps exactly `N` entries per group. Masks are
//! chosen by magnitude, with ties resolved by a deterministic rule so the
//! exactly-N invariant holds for every input.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How equal magnitudes inside one group are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieRule {
    /// The entry with the lower column index is kept.
    #[default]
    LowerIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NMConfig {
    n_keep: usize,
    m_group: usize,
    pub tie_rule: TieRule,
}

impl Default for NMConfig {
    fn default() -> Self {
        NMConfig {
            n_keep: 2,
            m_group: 4,
            tie_rule: TieRule::LowerIndex,
        }
    }
}

impl NMConfig {
    pub fn new(n_keep: usize, m_group: usize) -> Result<Self> {
        if n_keep == 0 || n_keep >= m_group {
            return Err(Error::Config(format!(
                "N:M pattern needs 0 < N < M, got {n_keep}:{m_group}"
            )));
        }
        Ok(NMConfig {
            n_keep,
            m_group,
            tie_rule: TieRule::LowerIndex,
        })
    }

    pub fn n(&self) -> usize {
        self.n_keep
    }

    pub fn m(&self) -> usize {
        self.m_group
    }
}

impl std::fmt::Display for NMConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.n_keep, self.m_group)
    }
}

/// Binary mask with the shape of its weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} mask bits for a {rows}x{cols} matrix",
                bits.len()
            )));
        }
        Ok(Mask { rows, cols, bits })
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_01(rows: usize, cols: usize, values: &[u8]) -> Result<Self> {
        Mask::new(rows, cols, values.iter().map(|&v| v != 0).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            vec![self.rows, self.cols],
            self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Number of positions where `self` and `other` differ.
    pub fn hamming(&self, other: &Mask) -> Result<usize> {
        self.expect_same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| a != b)
            .count())
    }

    fn expect_same_shape(&self, other: &Mask) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "mask shapes {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// Packs bits row-major, least significant bit first.
    pub fn to_packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn from_packed(rows: usize, cols: usize, packed: &[u8]) -> Result<Self> {
        let n = rows * cols;
        if packed.len() != n.div_ceil(8) {
            return Err(Error::Format(format!(
                "{} packed bytes for {n} mask bits",
                packed.len()
            )));
        }
        let bits = (0..n).map(|i| packed[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Mask { rows, cols, bits })
    }
}

fn matrix_dims(w: &Tensor) -> Result<(usize, usize)> {
    match w.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("expected a matrix, got {:?}", s))),
    }
}

/// Keeps the `N` largest magnitudes of every `M`-group; ties go to the lower
/// column index.
pub fn compute_nm_mask(w: &Tensor, cfg: &NMConfig) -> Result<Mask> {
    let (rows, cols) = matrix_dims(w)?;
    let m = cfg.m();
    if cols % m != 0 {
        return Err(Error::Shape(format!(
            "group size {m} does not divide {cols} columns"
        )));
    }
    let mut bits = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(m);
    for (g, group) in w.data().chunks(m).enumerate() {
        order.clear();
        order.extend(0..m);
        // Stable sort keeps lower indices first among equal magnitudes.
        order.sort_by(|&a, &b| group[b].abs().total_cmp(&group[a].abs()));
        for &j in &order[..cfg.n()] {
            bits[g * m + j] = true;
        }
    }
    Ok(Mask { rows, cols, bits })
}

/// Location of the first group that does not keep exactly `N` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupViolation {
    pub row: usize,
    pub group: usize,
    pub kept: usize,
}

impl std::fmt::Display for GroupViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "row {} group {} keeps {} entries",
            self.row, self.group, self.kept
        )
    }
}

/// Checks that every group keeps exactly `N` entries.
pub fn validate_mask(mask: &Mask, cfg: &NMConfig) -> std::result::Result<(), GroupViolation> {
    let m = cfg.m();
    if !mask.cols.is_multiple_of(m) {
        return Err(GroupViolation {
            row: 0,
            group: mask.cols / m,
            kept: 0,
        });
    }
    let groups_per_row = mask.cols / m;
    for (g, group) in mask.bits.chunks(m).enumerate() {
        let kept = group.iter().filter(|&&b| b).count();
        if kept != cfg.n() {
            return Err(GroupViolation {
                row: g / groups_per_row,
                group: g % groups_per_row,
                kept,
            });
        }
    }
    Ok(())
}

/// Nonzero pattern of a matrix as a mask.
pub fn support_mask(w: &Tensor) -> Result<Mask> {
    let (rows, cols) = matrix_dims(w)?;
    Mask::new(rows, cols, w.data().iter().map(|&v| v != 0.0).collect())
}

/// Checks that a weight matrix has at most `N` nonzeros in every group, i.e.
/// that it is deployable in the N:M format.
pub fn validate_sparse_weights(w: &Tensor, cfg: &NMConfig) -> std::result::Result<(), GroupViolation> {
    let m = cfg.m();
    let cols = w.cols();
    if !cols.is_multiple_of(m) {
        return Err(GroupViolation {
            row: 0,
            group: cols / m,
            kept: 0,
        });
    }
    for (g, group) in w.data().chunks(m).enumerate() {
        let nz = group.iter().filter(|&&v| v != 0.0).count();
        if nz > cfg.n() {
            return Err(GroupViolation {
                row: g / (cols / m),
                group: g % (cols / m),
                kept: nz,
            });
        }
    }
    Ok(())
}

/// Elementwise `w ⊙ mask`; masked positions become exactly `0.0`.
pub fn apply_mask(w: &Tensor, mask: &Mask) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(w)?;
    if [rows, cols] != mask.shape() {
        return Err(Error::Shape(format!(
            "weights {:?} vs mask {:?}",
            w.shape(),
            mask.shape()
        )));
    }
    Ok(Tensor::from_parts(
        w.shape().to_vec(),
        w.data()
            .iter()
            .zip(&mask.bits)
            .map(|(&v, &b)| if b { v } else { 0.0 })
            .collect(),
    ))
}

fn total_entries(masks: &[Mask]) -> usize {
    masks.iter().map(Mask::len).sum()
}

fn changed_fraction(a: &[Mask], b: &[Mask]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "{} masks vs {} masks",
            a.len(),
            b.len()
        )));
    }
    let total = total_entries(a);
    if total == 0 {
        return Ok(0.0);
    }
    let mut changed = 0;
    for (x, y) in a.iter().zip(b) {
        changed += x.hamming(y)?;
    }
    Ok(changed as f64 / total as f64)
}

/// Fraction of mask bits that changed between two consecutive refreshes,
/// pooled over all layers.
pub fn flip_rate(prev: &[Mask], cur: &[Mask]) -> Result<f64> {
    changed_fraction(prev, cur)
}

/// Fraction of mask bits that differ from the initial mask configuration.
pub fn init_flip_rate(init: &[Mask], cur: &[Mask]) -> Result<f64> {
    changed_fraction(init, cur)
}

/// Share of total L1 weight mass that sits on kept entries. All-zero weights
/// give 1.
pub fn sparse_weight_ratio(weights: &[&Tensor], masks: &[Mask]) -> Result<f64> {
    if weights.len() != masks.len() {
        return Err(Error::Shape(format!(
            "{} weight matrices vs {} masks",
            weights.len(),
            masks.len()
        )));
    }
    let mut kept = 0.0;
    let mut total = 0.0;
    for (w, m) in weights.iter().zip(masks) {
        let (rows, cols) = matrix_dims(w)?;
        if [rows, cols] != m.shape() {
            return Err(Error::Shape(format!(
                "weights {:?} vs mask {:?}",
                w.shape(),
                m.shape()
            )));
        }
        for (&v, &b) in w.data().iter().zip(&m.bits) {
            total += v.abs();
            if b {
                kept += v.abs();
            }
        }
    }
    if total == 0.0 {
        return Ok(1.0);
    }
    Ok((kept / total).clamp(0.0, 1.0))
}

/// Mask statistics sampled at one refresh.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaskStats {
    pub flip_rate: f64,
    pub init_flip_rate: f64,
    pub sparse_weight_ratio: f64,
    /// Mean |w| over kept entries.
    pub avg_unmasked_magnitude: f64,
    /// Mean |w| over bits that flipped at this refresh; carries the previous
    /// value when nothing flipped.
    pub avg_magnitude_at_flip: f64,
    /// Mean over ever-flipped entries of (step of last flip / total steps).
    pub avg_progress_at_last_flip: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
struct EntryHistory {
    last_flip_step: usize,
    magnitude_at_last_flip: f64,
    flips: u64,
}

/// Per-entry mask-change history for one training run.
#[derive(Debug, Clone)]
pub struct FlipLedger {
    initial: Vec<Mask>,
    previous: Vec<Mask>,
    entries: Vec<Vec<EntryHistory>>,
    last_avg_magnitude_at_flip: f64,
    flip_events: u64,
    magnitude_sum_over_events: f64,
}

impl FlipLedger {
    pub fn new(initial: Vec<Mask>) -> Self {
        let entries = initial
            .iter()
            .map(|m| vec![EntryHistory::default(); m.len()])
            .collect();
        FlipLedger {
            previous: initial.clone(),
            initial,
            entries,
            last_avg_magnitude_at_flip: 0.0,
            flip_events: 0,
            magnitude_sum_over_events: 0.0,
        }
    }

    pub fn initial(&self) -> &[Mask] {
        &self.initial
    }

    pub fn previous(&self) -> &[Mask] {
        &self.previous
    }

    pub fn flip_count(&self, layer: usize, index: usize) -> u64 {
        self.entries[layer][index].flips
    }

    /// Number of entries whose bit changed at least once.
    pub fn ever_flipped(&self) -> usize {
        self.entries
            .iter()
            .flatten()
            .filter(|e| e.flips > 0)
            .count()
    }

    /// Mean over ever-flipped entries of |w| at their most recent flip.
    pub fn avg_magnitude_at_last_flip(&self) -> f64 {
        let (s, n) = self
            .entries
            .iter()
            .flatten()
            .filter(|e| e.flips > 0)
            .fold((0.0, 0usize), |(s, n), e| (s + e.magnitude_at_last_flip, n + 1));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Mean |w| over every individual flip event of the run.
    pub fn avg_magnitude_over_flip_events(&self) -> f64 {
        if self.flip_events == 0 {
            0.0
        } else {
            self.magnitude_sum_over_events / self.flip_events as f64
        }
    }

    fn avg_progress_at_last_flip(&self, total_steps: usize) -> f64 {
        let (s, n) = self
            .entries
            .iter()
            .flatten()
            .filter(|e| e.flips > 0)
            .fold((0.0, 0usize), |(s, n), e| (s + e.last_flip_step as f64, n + 1));
        if n == 0 || total_steps == 0 {
            0.0
        } else {
            s / n as f64 / total_steps as f64
        }
    }
}

/// Records the bits that changed between the ledger's previous snapshot and
/// `cur`, then returns the statistics for this refresh.
pub fn record_flips(
    ledger: &mut FlipLedger,
    cur: &[Mask],
    weights: &[&Tensor],
    step: usize,
    total_steps: usize,
) -> Result<MaskStats> {
    let r = flip_rate(&ledger.previous, cur)?;
    let i = init_flip_rate(&ledger.initial, cur)?;
    let s = sparse_weight_ratio(weights, cur)?;
    let mut flipped_mag = 0.0;
    let mut flipped = 0usize;
    let mut kept_mag = 0.0;
    let mut kept = 0usize;
    for (layer, ((prev, now), w)) in ledger
        .previous
        .iter()
        .zip(cur)
        .zip(weights)
        .enumerate()
    {
        for (idx, ((&a, &b), &v)) in prev.bits.iter().zip(&now.bits).zip(w.data()).enumerate() {
            if b {
                kept_mag += v.abs();
                kept += 1;
            }
            if a != b {
                let e = &mut ledger.entries[layer][idx];
                e.flips += 1;
                e.last_flip_step = step;
                e.magnitude_at_last_flip = v.abs();
                flipped_mag += v.abs();
                flipped += 1;
            }
        }
    }
    if flipped > 0 {
        ledger.last_avg_magnitude_at_flip = flipped_mag / flipped as f64;
        ledger.flip_events += flipped as u64;
        ledger.magnitude_sum_over_events += flipped_mag;
    }
    ledger.previous = cur.to_vec();
    Ok(MaskStats {
        flip_rate: r,
        init_flip_rate: i,
        sparse_weight_ratio: s,
        avg_unmasked_magnitude: if kept == 0 { 0.0 } else { kept_mag / kept as f64 },
        avg_magnitude_at_flip: ledger.last_avg_magnitude_at_flip,
        avg_progress_at_last_flip: ledger.avg_progress_at_last_flip(total_steps),
    })
}

/// One N:M mask per layer from current magnitudes.
pub fn one_shot_magnitude_prune(weights: &[&Tensor], cfg: &NMConfig) -> Result<Vec<Mask>> {
    weights.iter().map(|w| compute_nm_mask(w, cfg)).collect()
}
