use crate::autograd::{Program, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::model::{Family, Model};

/// Which weights a forward pass sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Full weights (scaled when factors are present).
    Dense,
    /// `W ⊙ M` (scaled when factors are present); masks must be set.
    Sparse,
}

/// One batch of training or evaluation data.
#[derive(Debug, Clone, PartialEq)]
pub enum Batch {
    /// `batch x context` token ids stored row-major, with next-token targets
    /// of the same layout.
    Tokens {
        batch: usize,
        context: usize,
        ids: Vec<usize>,
        targets: Vec<usize>,
    },
    /// `N x in` features and `N x out` regression targets.
    Features { x: Tensor, y: Tensor },
}

impl Batch {
    /// Number of prediction rows (tokens or samples).
    pub fn rows(&self) -> usize {
        match self {
            Batch::Tokens { ids, .. } => ids.len(),
            Batch::Features { x, .. } => x.rows(),
        }
    }
}

/// Parameter leaves of one model recorded into a program.
#[derive(Debug, Clone)]
pub struct Bound {
    pub weights: Vec<Var>,
    pub scaling: Vec<Option<Var>>,
}

/// Records every slot as a trainable leaf (`trainable`) or as a constant.
pub fn bind(prog: &mut Program, model: &Model, trainable: bool) -> Bound {
    let mut leaf = |t: &Tensor| {
        if trainable {
            prog.param(t.clone())
        } else {
            prog.constant(t.clone())
        }
    };
    let weights = model.slots.iter().map(|s| leaf(&s.value)).collect();
    let scaling = model
        .slots
        .iter()
        .map(|s| s.scaling.as_ref().map(&mut leaf))
        .collect();
    Bound { weights, scaling }
}

fn effective(prog: &mut Program, model: &Model, bound: &Bound, idx: usize, mode: ForwardMode) -> Result<Var> {
    let slot = &model.slots[idx];
    let mut w = bound.weights[idx];
    if mode == ForwardMode::Sparse && slot.sparsifiable {
        let mask = slot
            .mask
            .as_ref()
            .ok_or_else(|| Error::Config(format!("sparse forward needs a mask for {}", slot.name)))?;
        w = prog.mask_ste(w, &mask.to_tensor())?;
    }
    if let Some(a) = bound.scaling[idx] {
        w = prog.group_scale(w, a)?;
    }
    Ok(w)
}

fn linear(prog: &mut Program, x: Var, w: Var, b: Var) -> Result<Var> {
    let wt = prog.transpose(w)?;
    let y = prog.matmul(x, wt)?;
    prog.add_row_broadcast(y, b)
}

/// Records the model's forward pass and returns the output rows: logits
/// (`tokens x V`) for the transformer, predictions (`N x out`) for the MLP.
pub fn forward(prog: &mut Program, model: &Model, bound: &Bound, batch: &Batch, mode: ForwardMode) -> Result<Var> {
    match (&model.spec.family, batch) {
        (Family::Mlp { widths }, Batch::Features { x, .. }) => {
            if x.ndim() != 2 || x.cols() != widths[0] {
                return Err(Error::Shape(format!(
                    "MLP input {:?} does not match width {}",
                    x.shape(),
                    widths[0]
                )));
            }
            let layers = widths.len() - 1;
            let mut h = prog.constant(x.clone());
            for l in 0..layers {
                let w = effective(prog, model, bound, 2 * l, mode)?;
                h = linear(prog, h, w, bound.weights[2 * l + 1])?;
                if l + 1 < layers {
                    h = prog.gelu(h)?;
                }
            }
            Ok(h)
        }
        (
            Family::Transformer {
                vocab,
                heads,
                layers,
                context,
                width,
            },
            Batch::Tokens {
                batch: b,
                context: s,
                ids,
                ..
            },
        ) => {
            if *s == 0 || s > context || ids.len() != b * s {
                return Err(Error::Shape(format!(
                    "token batch {b}x{s} with {} ids for context {context}",
                    ids.len()
                )));
            }
            if let Some(&bad) = ids.iter().find(|&&id| id >= *vocab) {
                return Err(Error::Shape(format!("token id {bad} outside vocab {vocab}")));
            }
            let tok = model.slot_index("tok_emb").expect("transformer has tok_emb");
            let pos = model.slot_index("pos_emb").expect("transformer has pos_emb");
            let positions: Vec<usize> = (0..ids.len()).map(|i| i % s).collect();
            let te = prog.embedding(bound.weights[tok], ids)?;
            let pe = prog.embedding(bound.weights[pos], &positions)?;
            let mut x = prog.add(te, pe)?;
            let dh = width / heads;
            let inv_sqrt = 1.0 / (dh as f64).sqrt();
            for blk in 0..*layers {
                let ix = model.block_index(blk)?;
                let h = prog.layer_norm(x, bound.weights[ix.ln1.0], bound.weights[ix.ln1.1])?;
                let proj = |prog: &mut Program, (w, bias): (usize, usize), input: Var| -> Result<Var> {
                    let w = effective(prog, model, bound, w, mode)?;
                    linear(prog, input, w, bound.weights[bias])
                };
                let q = proj(prog, ix.q, h)?;
                let k = proj(prog, ix.k, h)?;
                let v = proj(prog, ix.v, h)?;
                let q = prog.split_heads(q, *b, *heads)?;
                let k = prog.split_heads(k, *b, *heads)?;
                let v = prog.split_heads(v, *b, *heads)?;
                let kt = prog.transpose(k)?;
                let scores = prog.matmul(q, kt)?;
                let scores = prog.scale(scores, inv_sqrt)?;
                let att = prog.causal_softmax_rows(scores)?;
                let ctx = prog.matmul(att, v)?;
                let ctx = prog.merge_heads(ctx, *b, *heads)?;
                let o = proj(prog, ix.o, ctx)?;
                x = prog.add(x, o)?;
                let h2 = prog.layer_norm(x, bound.weights[ix.ln2.0], bound.weights[ix.ln2.1])?;
                let m = proj(prog, ix.fc_in, h2)?;
                let m = prog.gelu(m)?;
                let m = proj(prog, ix.fc_out, m)?;
                x = prog.add(x, m)?;
            }
            let lnf = (
                model.slot_index("ln_f.gain").expect("ln_f"),
                model.slot_index("ln_f.bias").expect("ln_f"),
            );
            let head = (
                model.slot_index("head.weight").expect("head"),
                model.slot_index("head.bias").expect("head"),
            );
            let x = prog.layer_norm(x, bound.weights[lnf.0], bound.weights[lnf.1])?;
            linear(prog, x, bound.weights[head.0], bound.weights[head.1])
        }
        _ => Err(Error::Shape("batch kind does not match model family".into())),
    }
}

/// Output rows of a frozen forward pass; nothing is recorded for gradients.
pub fn predict(model: &Model, batch: &Batch, mode: ForwardMode) -> Result<Tensor> {
    let mut prog = Program::new();
    let bound = bind(&mut prog, model, false);
    let out = forward(&mut prog, model, &bound, batch, mode)?;
    Ok(prog.value(out).clone())
}
