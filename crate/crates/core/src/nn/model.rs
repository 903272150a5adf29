use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::MomentState;
use crate::scaling::check_segments;
use crate::sparsity::{Mask, NMConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Family {
    /// Feed-forward regressor; `widths` lists input, hidden and output sizes.
    Mlp { widths: Vec<usize> },
    /// Decoder-only character model with learned absolute positions.
    Transformer {
        vocab: usize,
        width: usize,
        heads: usize,
        layers: usize,
        context: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub family: Family,
    pub seed: u64,
}

impl ModelSpec {
    /// Two-block, 64-wide, 4-head model over a 64-symbol vocabulary with
    /// 64-token context.
    pub fn toy_transformer(seed: u64) -> Self {
        ModelSpec {
            family: Family::Transformer {
                vocab: 64,
                width: 64,
                heads: 4,
                layers: 2,
                context: 64,
            },
            seed,
        }
    }

    pub fn mlp(widths: &[usize], seed: u64) -> Self {
        ModelSpec {
            family: Family::Mlp {
                widths: widths.to_vec(),
            },
            seed,
        }
    }

    /// Checks head divisibility and that every sparsifiable input width is a
    /// multiple of `M · n`.
    pub fn validate(&self, nm: &NMConfig, segments: usize) -> Result<()> {
        let check = |cols: usize| check_segments(cols, segments, nm.m());
        match &self.family {
            Family::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::Config(format!("bad MLP widths {:?}", widths)));
                }
                for &w in &widths[..widths.len() - 1] {
                    if widths.len() > 2 {
                        check(w)?;
                    }
                }
                Ok(())
            }
            Family::Transformer {
                vocab,
                width,
                heads,
                layers,
                context,
            } => {
                if *vocab == 0 || *width == 0 || *heads == 0 || *layers == 0 || *context == 0 {
                    return Err(Error::Config("transformer extents must be positive".into()));
                }
                if width % heads != 0 {
                    return Err(Error::Config(format!(
                        "width {width} is not divisible by {heads} heads"
                    )));
                }
                check(*width)?;
                check(4 * width)
            }
        }
    }

    /// Canonical text form; hashed into checkpoint headers.
    pub fn canonical(&self) -> String {
        match &self.family {
            Family::Mlp { widths } => format!(
                "family=mlp\nwidths={}\nseed={}\n",
                widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                self.seed
            ),
            Family::Transformer {
                vocab,
                width,
                heads,
                layers,
                context,
            } => format!(
                "family=transformer\nvocab={vocab}\nwidth={width}\nheads={heads}\nlayers={layers}\ncontext={context}\nseed={}\n",
                self.seed
            ),
        }
    }

    pub fn parse_canonical(text: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad model spec line {line:?}")))?;
            kv.insert(k.trim(), v.trim());
        }
        let num = |k: &str| -> Result<usize> {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("model spec misses {k}")))?
                .parse()
                .map_err(|_| Error::Format(format!("model spec field {k} is not a number")))
        };
        let seed = num("seed")? as u64;
        let family = match kv.get("family").copied() {
            Some("mlp") => Family::Mlp {
                widths: kv
                    .get("widths")
                    .ok_or_else(|| Error::Format("model spec misses widths".into()))?
                    .split(',')
                    .map(|w| {
                        w.trim()
                            .parse()
                            .map_err(|_| Error::Format(format!("bad width {w:?}")))
                    })
                    .collect::<Result<_>>()?,
            },
            Some("transformer") => Family::Transformer {
                vocab: num("vocab")?,
                width: num("width")?,
                heads: num("heads")?,
                layers: num("layers")?,
                context: num("context")?,
            },
            other => return Err(Error::Format(format!("unknown model family {other:?}"))),
        };
        Ok(ModelSpec { family, seed })
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// One trainable tensor with everything the optimizers and the sparsity
/// machinery attach to it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub value: Tensor,
    /// 2-D projection matrices take part in N:M sparsification.
    pub sparsifiable: bool,
    pub mask: Option<Mask>,
    /// Segment multipliers (`R x n`) when weight scaling is enabled.
    pub scaling: Option<Tensor>,
    pub state: MomentState,
    pub scaling_state: Option<MomentState>,
}

impl ParamSlot {
    fn new(name: impl Into<String>, value: Tensor, sparsifiable: bool) -> Self {
        let n = value.len();
        ParamSlot {
            name: name.into(),
            value,
            sparsifiable,
            mask: None,
            scaling: None,
            state: MomentState::zeros(n),
            scaling_state: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub slots: Vec<ParamSlot>,
}

/// Index of every named parameter of the transformer family.
#[derive(Debug, Clone)]
pub(crate) struct BlockIndex {
    pub ln1: (usize, usize),
    pub q: (usize, usize),
    pub k: (usize, usize),
    pub v: (usize, usize),
    pub o: (usize, usize),
    pub ln2: (usize, usize),
    pub fc_in: (usize, usize),
    pub fc_out: (usize, usize),
}

impl Model {
    /// Fresh model; weights drawn from the spec's seed.
    pub fn init(spec: &ModelSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut slots = Vec::new();
        let mut gauss = |shape: &[usize], std: f64| -> Tensor {
            let normal = Normal::new(0.0, std).expect("positive std");
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
        };
        match &spec.family {
            Family::Mlp { widths } => {
                let last = widths.len() - 2;
                for (i, pair) in widths.windows(2).enumerate() {
                    let (fan_in, fan_out) = (pair[0], pair[1]);
                    let w = gauss(&[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt());
                    slots.push(ParamSlot::new(format!("layer{i}.weight"), w, i < last));
                    slots.push(ParamSlot::new(
                        format!("layer{i}.bias"),
                        Tensor::zeros(&[fan_out]),
                        false,
                    ));
                }
            }
            Family::Transformer {
                vocab,
                width,
                layers,
                context,
                ..
            } => {
                let d = *width;
                let std_d = 1.0 / (d as f64).sqrt();
                let std_4d = 1.0 / ((4 * d) as f64).sqrt();
                slots.push(ParamSlot::new("tok_emb", gauss(&[*vocab, d], 0.3), false));
                slots.push(ParamSlot::new("pos_emb", gauss(&[*context, d], 0.1), false));
                for b in 0..*layers {
                    let p = |n: &str| format!("block{b}.{n}");
                    slots.push(ParamSlot::new(p("ln1.gain"), Tensor::ones(&[d]), false));
                    slots.push(ParamSlot::new(p("ln1.bias"), Tensor::zeros(&[d]), false));
                    for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                        slots.push(ParamSlot::new(p(&format!("{name}.weight")), gauss(&[d, d], std_d), true));
                        slots.push(ParamSlot::new(p(&format!("{name}.bias")), Tensor::zeros(&[d]), false));
                    }
                    slots.push(ParamSlot::new(p("ln2.gain"), Tensor::ones(&[d]), false));
                    slots.push(ParamSlot::new(p("ln2.bias"), Tensor::zeros(&[d]), false));
                    slots.push(ParamSlot::new(p("mlp.in.weight"), gauss(&[4 * d, d], std_d), true));
                    slots.push(ParamSlot::new(p("mlp.in.bias"), Tensor::zeros(&[4 * d]), false));
                    slots.push(ParamSlot::new(p("mlp.out.weight"), gauss(&[d, 4 * d], std_4d), true));
                    slots.push(ParamSlot::new(p("mlp.out.bias"), Tensor::zeros(&[d]), false));
                }
                slots.push(ParamSlot::new("ln_f.gain", Tensor::ones(&[d]), false));
                slots.push(ParamSlot::new("ln_f.bias", Tensor::zeros(&[d]), false));
                slots.push(ParamSlot::new("head.weight", gauss(&[*vocab, d], std_d), false));
                slots.push(ParamSlot::new("head.bias", Tensor::zeros(&[*vocab]), false));
            }
        }
        Ok(Model {
            spec: spec.clone(),
            slots,
        })
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn sparsifiable(&self) -> impl Iterator<Item = (usize, &ParamSlot)> {
        self.slots.iter().enumerate().filter(|(_, s)| s.sparsifiable)
    }

    pub fn sparsifiable_indices(&self) -> Vec<usize> {
        self.sparsifiable().map(|(i, _)| i).collect()
    }

    pub fn sparse_weights(&self) -> Vec<&Tensor> {
        self.sparsifiable().map(|(_, s)| &s.value).collect()
    }

    /// Masks of the sparsifiable layers, in slot order.
    pub fn masks(&self) -> Option<Vec<Mask>> {
        self.sparsifiable().map(|(_, s)| s.mask.clone()).collect()
    }

    pub fn has_scaling(&self) -> bool {
        self.slots.iter().any(|s| s.scaling.is_some())
    }

    pub fn parameter_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    /// Resets every optimizer moment (weights and scaling factors).
    pub fn reset_moments(&mut self) {
        for s in &mut self.slots {
            s.state = MomentState::zeros(s.value.len());
            if let Some(a) = &s.scaling {
                s.scaling_state = Some(MomentState::zeros(a.len()));
            }
        }
    }

    pub(crate) fn block_index(&self, b: usize) -> Result<BlockIndex> {
        let find = |n: &str| -> Result<usize> {
            let name = format!("block{b}.{n}");
            self.slot_index(&name)
                .ok_or_else(|| Error::Format(format!("model has no parameter {name}")))
        };
        let pair = |n: &str, a: &str, c: &str| -> Result<(usize, usize)> {
            Ok((find(&format!("{n}.{a}"))?, find(&format!("{n}.{c}"))?))
        };
        Ok(BlockIndex {
            ln1: pair("ln1", "gain", "bias")?,
            q: pair("attn.q", "weight", "bias")?,
            k: pair("attn.k", "weight", "bias")?,
            v: pair("attn.v", "weight", "bias")?,
            o: pair("attn.o", "weight", "bias")?,
            ln2: pair("ln2", "gain", "bias")?,
            fc_in: pair("mlp.in", "weight", "bias")?,
            fc_out: pair("mlp.out", "weight", "bias")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_spec_is_valid_for_2_4_with_two_segments() {
        let spec = ModelSpec::toy_transformer(0);
        spec.validate(&NMConfig::default(), 2).unwrap();
        let m = Model::init(&spec).unwrap();
        assert_eq!(m.sparsifiable().count(), 12);
        assert!(m.slot_index("head.weight").is_some());
        assert!(!m.slots[m.slot_index("tok_emb").unwrap()].sparsifiable);
    }

    #[test]
    fn head_divisibility_is_checked() {
        let spec = ModelSpec {
            family: Family::Transformer {
                vocab: 64,
                width: 64,
                heads: 3,
                layers: 1,
                context: 8,
            },
            seed: 0,
        };
        assert!(spec.validate(&NMConfig::default(), 2).is_err());
        let narrow = ModelSpec::mlp(&[6, 16, 1], 0);
        assert!(narrow.validate(&NMConfig::default(), 2).is_err());
    }

    #[test]
    fn canonical_round_trip() {
        for spec in [ModelSpec::toy_transformer(9), ModelSpec::mlp(&[8, 16, 1], 3)] {
            assert_eq!(ModelSpec::parse_canonical(&spec.canonical()).unwrap(), spec);
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::init(&ModelSpec::toy_transformer(5)).unwrap();
        let b = Model::init(&ModelSpec::toy_transformer(5)).unwrap();
        let c = Model::init(&ModelSpec::toy_transformer(6)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
