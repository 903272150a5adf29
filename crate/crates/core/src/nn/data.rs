//! Character corpus, synthetic text generator and batch sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autograd::softmax_rows;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::forward::Batch;

/// The 64 symbols of the character vocabulary, in id order.
pub const ALPHABET: &[u8; 64] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789 .";

pub const VOCAB_SIZE: usize = 64;

/// Id of a byte; bytes outside the alphabet map to the space symbol.
pub fn encode_byte(b: u8) -> usize {
    match b {
        b'a'..=b'z' => (b - b'a') as usize,
        b'A'..=b'Z' => 26 + (b - b'A') as usize,
        b'0'..=b'9' => 52 + (b - b'0') as usize,
        b'.' => 63,
        _ => 62,
    }
}

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| encode_byte(b)).collect()
}

pub fn decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&i| {
            ALPHABET
                .get(i)
                .copied()
                .ok_or_else(|| Error::Shape(format!("token id {i} outside vocab")))
        })
        .collect()
}

/// Tab-separated `id, byte value, printable symbol` table.
pub fn vocab_table() -> String {
    let mut out = String::from("id\tbyte\tsymbol\n");
    for (i, &b) in ALPHABET.iter().enumerate() {
        let sym = if b == b' ' { "<space>".to_string() } else { (b as char).to_string() };
        out.push_str(&format!("{i}\t{b}\t{sym}\n"));
    }
    out.push_str("# any other byte is read as id 62 (<space>)\n");
    out
}

/// Seeded second-order Markov source over the vocabulary.
///
/// The next-symbol distribution is `softmax(sharpness · (U[prev1] + W[prev2]))`
/// with Gaussian tables `U` and `W`.
#[derive(Debug, Clone)]
pub struct MarkovText {
    seed: u64,
    /// Row `prev2 * V + prev1` holds the next-symbol distribution.
    probs: Tensor,
}

impl MarkovText {
    pub const DEFAULT_SHARPNESS: f64 = 2.0;

    pub fn new(seed: u64, sharpness: f64) -> Result<Self> {
        if !(sharpness.is_finite() && sharpness >= 0.0) {
            return Err(Error::Config(format!("sharpness {sharpness} must be finite and >= 0")));
        }
        let v = VOCAB_SIZE;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut table = || -> Vec<f64> { (0..v * v).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let u = table();
        let w = table();
        let mut logits = Vec::with_capacity(v * v * v);
        for p2 in 0..v {
            for p1 in 0..v {
                for n in 0..v {
                    logits.push(sharpness * (u[p1 * v + n] + w[p2 * v + n]));
                }
            }
        }
        let probs = softmax_rows(&Tensor::new(&[v * v, v], logits)?, false);
        Ok(MarkovText { seed, probs })
    }

    pub fn next_distribution(&self, prev2: usize, prev1: usize) -> &[f64] {
        self.probs.row(prev2 * VOCAB_SIZE + prev1)
    }

    /// Entropy in nats of the next symbol given the two previous ones.
    pub fn conditional_entropy(&self, prev2: usize, prev1: usize) -> f64 {
        self.next_distribution(prev2, prev1)
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// `len` symbol ids; the first two are drawn uniformly.
    pub fn generate(&self, len: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_7e47);
        rng.set_stream(1);
        let mut out = Vec::with_capacity(len);
        for i in 0..len {
            let id = if i < 2 {
                rng.gen_range(0..VOCAB_SIZE)
            } else {
                let p = self.next_distribution(out[i - 2], out[i - 1]);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = VOCAB_SIZE - 1;
                for (j, &pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                pick
            };
            out.push(id);
        }
        out
    }

    pub fn generate_bytes(&self, len: usize) -> Vec<u8> {
        decode(&self.generate(len)).expect("generator ids are in range")
    }

    /// Average conditional entropy over the contexts visited by `ids`: the
    /// entropy rate the source actually emitted at.
    pub fn empirical_entropy_rate(&self, ids: &[usize]) -> f64 {
        if ids.len() < 3 {
            return (VOCAB_SIZE as f64).ln();
        }
        let n = ids.len() - 2;
        ids.windows(3)
            .map(|w| self.conditional_entropy(w[0], w[1]))
            .sum::<f64>()
            / n as f64
    }
}

/// Token stream split into a training prefix and a validation suffix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    ids: Vec<usize>,
    train_end: usize,
}

impl Corpus {
    /// First 90% for training, the rest for validation.
    pub fn new(ids: Vec<usize>, context: usize) -> Result<Self> {
        let train_end = ids.len() * 9 / 10;
        if train_end <= context || ids.len() - train_end <= context {
            return Err(Error::Config(format!(
                "corpus of {} symbols is too short for context {context}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= VOCAB_SIZE) {
            return Err(Error::Shape(format!("token id {bad} outside vocab")));
        }
        Ok(Corpus { ids, train_end })
    }

    pub fn from_bytes(bytes: &[u8], context: usize) -> Result<Self> {
        Corpus::new(encode(bytes), context)
    }

    pub fn train(&self) -> &[usize] {
        &self.ids[..self.train_end]
    }

    pub fn val(&self) -> &[usize] {
        &self.ids[self.train_end..]
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn window_batch(stream: &[usize], starts: &[usize], context: usize) -> Batch {
    let mut ids = Vec::with_capacity(starts.len() * context);
    let mut targets = Vec::with_capacity(starts.len() * context);
    for &s in starts {
        ids.extend_from_slice(&stream[s..s + context]);
        targets.extend_from_slice(&stream[s + 1..s + context + 1]);
    }
    Batch::Tokens {
        batch: starts.len(),
        context,
        ids,
        targets,
    }
}

/// Saved position of a [`Sampler`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplerState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

/// Draws random training windows reproducibly.
#[derive(Debug, Clone)]
pub struct Sampler {
    seed: u64,
    rng: ChaCha8Rng,
}

impl Sampler {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        Sampler { seed, rng }
    }

    pub fn state(&self) -> SamplerState {
        SamplerState {
            seed: self.seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(state: SamplerState) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Sampler { seed: state.seed, rng }
    }

    /// `batch` windows of `context` tokens (plus shifted targets) from the
    /// training split.
    pub fn next_batch(&mut self, corpus: &Corpus, batch: usize, context: usize) -> Batch {
        let train = corpus.train();
        let starts: Vec<usize> = (0..batch)
            .map(|_| self.rng.gen_range(0..train.len() - context))
            .collect();
        window_batch(train, &starts, context)
    }

    /// Standard-normal features with targets `y = A x` (no noise).
    pub fn next_regression(&mut self, target_map: &Tensor, rows: usize) -> Batch {
        let cols = target_map.cols();
        let x: Vec<f64> = (0..rows * cols).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let x = Tensor::from_parts(vec![rows, cols], x);
        let y = x.matmul(&target_map.transpose().expect("2-D")).expect("shapes agree");
        Batch::Features { x, y }
    }
}

/// Up to `sequences` non-overlapping validation windows, grouped into
/// batches of at most `batch` windows.
pub fn val_batches(corpus: &Corpus, context: usize, sequences: usize, batch: usize) -> Vec<Batch> {
    let val = corpus.val();
    let available = (val.len() - 1) / context;
    let starts: Vec<usize> = (0..sequences.min(available)).map(|i| i * context).collect();
    starts
        .chunks(batch.max(1))
        .map(|c| window_batch(val, c, context))
        .collect()
}

/// Random `out x in` map for the regression task.
pub fn regression_target(seed: u64, inputs: usize, outputs: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let normal = Normal::new(0.0, 1.0 / (inputs as f64).sqrt()).expect("positive std");
    let data = (0..inputs * outputs).map(|_| normal.sample(&mut rng)).collect();
    Tensor::from_parts(vec![outputs, inputs], data)
}
