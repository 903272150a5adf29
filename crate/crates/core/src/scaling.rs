//! Learnable group-wise weight scaling.
//!
//! Each row of an `R x C` weight matrix is split into `n` contiguous
//! segments of `C / n` columns and every segment gets its own multiplier.
//! `n = 1` is plain row scaling. Because the scaling is an elementwise
//! product it can be folded into the weights at export time.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multipliers for one `R x C` matrix, stored as `R x n`.
pub type SegmentFactors = Tensor;

/// Scaling factors for every sparsifiable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingFactors {
    pub segments: usize,
    pub layers: Vec<SegmentFactors>,
}

/// Checks that `n` segments of a row of `cols` entries each hold a whole
/// number of `m_group`-wide N:M groups.
pub fn check_segments(cols: usize, segments: usize, m_group: usize) -> Result<()> {
    if segments == 0 || !cols.is_multiple_of(segments) {
        return Err(Error::Config(format!(
            "{segments} scaling segments do not divide {cols} columns"
        )));
    }
    if !(cols / segments).is_multiple_of(m_group) {
        return Err(Error::Config(format!(
            "scaling segment width {} is not a multiple of the group size {m_group}",
            cols / segments
        )));
    }
    Ok(())
}

/// All-ones factors for each `(rows, cols)` layer shape.
pub fn init_scaling(layer_shapes: &[(usize, usize)], segments: usize, m_group: usize) -> Result<ScalingFactors> {
    let mut layers = Vec::with_capacity(layer_shapes.len());
    for &(r, c) in layer_shapes {
        check_segments(c, segments, m_group)?;
        layers.push(Tensor::ones(&[r, segments]));
    }
    Ok(ScalingFactors { segments, layers })
}

fn dims(w: &Tensor, a: &Tensor) -> Result<(usize, usize, usize)> {
    match (w.shape(), a.shape()) {
        ([r, c], [ra, n]) if r == ra && *n > 0 && c % n == 0 => Ok((*r, *c, *n)),
        _ => Err(Error::Shape(format!(
            "scaling factors {:?} do not fit weights {:?}",
            a.shape(),
            w.shape()
        ))),
    }
}

pub(crate) fn group_scale_tensor(w: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (r, c, n) = dims(w, a)?;
    let seg = c / n;
    let mut out = Vec::with_capacity(w.len());
    for i in 0..r {
        let arow = a.row(i);
        for (j, &v) in w.row(i).iter().enumerate() {
            out.push(v * arow[j / seg]);
        }
    }
    Tensor::new(w.shape(), out)
}

/// `∂L/∂a[r, s] = Σ_{c in segment s} ∂L/∂W_scaled[r, c] · w[r, c]`.
pub(crate) fn group_scale_adjoint(g: &Tensor, w: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (r, c, n) = dims(w, a)?;
    let seg = c / n;
    let mut out = vec![0.0; r * n];
    for i in 0..r {
        let (grow, wrow) = (g.row(i), w.row(i));
        for j in 0..c {
            out[i * n + j / seg] += grow[j] * wrow[j];
        }
    }
    Ok(Tensor::from_parts(vec![r, n], out))
}

/// Entry `(r, c)` multiplied by `a[r, c / (C / n)]`.
pub fn apply_group_scaling(w: &Tensor, a: &SegmentFactors) -> Result<Tensor> {
    group_scale_tensor(w, a)
}

/// Materializes the scaled weights so a forward pass with unit factors is
/// exactly equivalent.
pub fn fold_scaling(w: &Tensor, a: &SegmentFactors) -> Result<Tensor> {
    group_scale_tensor(w, a)
}

/// Count of negative and of exactly-zero factors; either one breaks the
/// correspondence between raw and scaled magnitudes.
pub fn factor_diagnostics(a: &SegmentFactors) -> (usize, usize) {
    a.data().iter().fold((0, 0), |(neg, zero), &v| {
        (neg + (v < 0.0) as usize, zero + (v == 0.0) as usize)
    })
}
