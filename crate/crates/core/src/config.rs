//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Keys left unset fall back to the defaults of the chosen method.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::nn::data::{MarkovText, VOCAB_SIZE};
use crate::nn::{Family, ModelSpec};
use crate::optim::{Betas, Schedule};
use crate::sparsity::NMConfig;
use crate::trainer::{Lambda, Method, TrainPlan};

/// Every accepted key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("method", "dense | cast | srste | naive"),
    ("corpus", "path to a text corpus; empty means synthetic"),
    ("corpus_seed", "seed of the synthetic corpus"),
    ("corpus_bytes", "length of the synthetic corpus"),
    ("corpus_sharpness", "peakedness of the synthetic source"),
    ("dense_checkpoint", "dense starting point for sparsification"),
    ("model_seed", "initialization seed"),
    ("width", "model width d"),
    ("heads", "attention heads"),
    ("layers", "transformer blocks"),
    ("context", "context length s"),
    ("steps", "training steps T (dense 8000, cast 3000, srste and naive 4000)"),
    ("batch", "sequences per step"),
    ("lr", "base learning rate"),
    ("warmup", "warmup steps; 0 gives a constant rate"),
    ("beta1", "first-moment decay"),
    ("beta2", "second-moment decay"),
    ("eps", "denominator floor"),
    ("n_keep", "N of N:M"),
    ("m_group", "M of N:M"),
    ("segments", "scaling segments per row; 0 disables scaling"),
    ("refresh_every", "mask refresh cadence"),
    ("eval_every", "evaluation cadence"),
    ("lambda", "decay strength or auto"),
    ("eta", "distillation weight"),
    ("kd", "distil from the dense checkpoint (true | false)"),
    ("seed", "data-order seed"),
    ("export_threshold", "minimum sparse weight ratio for a CAST export"),
    ("calibration_batches", "batches used to calibrate lambda = auto"),
    ("val_sequences", "validation windows"),
];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }

    fn num<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("config field {key} has invalid value {v:?}"))),
        }
    }

    pub fn method(&self) -> Result<Method> {
        Method::parse(self.get("method").unwrap_or("dense"))
    }

    pub fn corpus_path(&self) -> Option<PathBuf> {
        self.get("corpus").map(PathBuf::from)
    }

    pub fn dense_checkpoint(&self) -> Option<PathBuf> {
        self.get("dense_checkpoint").map(PathBuf::from)
    }

    pub fn synthetic_corpus(&self) -> Result<(u64, usize, f64)> {
        Ok((
            self.num("corpus_seed", 0)?,
            self.num("corpus_bytes", 200_000)?,
            self.num("corpus_sharpness", MarkovText::DEFAULT_SHARPNESS)?,
        ))
    }

    pub fn val_sequences(&self) -> Result<usize> {
        self.num("val_sequences", 16)
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        let spec = ModelSpec {
            family: Family::Transformer {
                vocab: VOCAB_SIZE,
                width: self.num("width", 64)?,
                heads: self.num("heads", 4)?,
                layers: self.num("layers", 2)?,
                context: self.num("context", 64)?,
            },
            seed: self.num("model_seed", 0)?,
        };
        let plan = self.plan()?;
        spec.validate(&plan.nm, plan.segments.max(1))?;
        Ok(spec)
    }

    pub fn plan(&self) -> Result<TrainPlan> {
        let method = self.method()?;
        let default_steps = match method {
            Method::Dense => 8000,
            Method::Cast => 3000,
            Method::Srste | Method::Naive => 4000,
        };
        let steps = self.num("steps", default_steps)?;
        let mut p = match method {
            Method::Dense => TrainPlan::dense(steps),
            Method::Cast => TrainPlan::cast(steps),
            Method::Srste => TrainPlan::srste(steps),
            Method::Naive => TrainPlan::naive(steps),
        };
        p.batch = self.num("batch", p.batch)?;
        p.context = self.num("context", p.context)?;
        let (base, warm) = match p.schedule {
            Schedule::WarmupCosine { base, warmup } => (base, warmup),
            Schedule::Constant { base } => (base, 0),
        };
        let base = self.num("lr", base)?;
        let warmup = self.num("warmup", warm)?;
        p.schedule = if warmup == 0 {
            Schedule::Constant { base }
        } else {
            Schedule::WarmupCosine { base, warmup }
        };
        p.betas = Betas {
            beta1: self.num("beta1", p.betas.beta1)?,
            beta2: self.num("beta2", p.betas.beta2)?,
            eps: self.num("eps", p.betas.eps)?,
        };
        p.nm = NMConfig::new(self.num("n_keep", p.nm.n())?, self.num("m_group", p.nm.m())?)?;
        p.segments = self.num("segments", p.segments)?;
        p.refresh_every = self.num("refresh_every", p.refresh_every)?;
        p.eval_every = self.num("eval_every", p.eval_every)?;
        p.lambda = match self.get("lambda") {
            None => p.lambda,
            Some("auto") => Lambda::Auto,
            Some(v) => Lambda::Fixed(
                v.parse()
                    .map_err(|_| Error::Config(format!("config field lambda has invalid value {v:?}")))?,
            ),
        };
        p.eta = self.num("eta", p.eta)?;
        p.kd = self.num("kd", p.kd)?;
        p.seed = self.num("seed", p.seed)?;
        p.export_threshold = self.num("export_threshold", p.export_threshold)?;
        p.calibration_batches = self.num("calibration_batches", p.calibration_batches)?;
        p.validate()?;
        Ok(p)
    }

    /// Every key with its effective value, for the run directory.
    pub fn resolved(&self) -> Result<String> {
        let p = self.plan()?;
        let spec = self.model_spec()?;
        let (cseed, cbytes, sharp) = self.synthetic_corpus()?;
        let Family::Transformer {
            width,
            heads,
            layers,
            context,
            ..
        } = spec.family
        else {
            unreachable!("configs describe transformers")
        };
        let (lr, warmup) = match p.schedule {
            Schedule::WarmupCosine { base, warmup } => (base, warmup),
            Schedule::Constant { base } => (base, 0),
        };
        let lambda = match p.lambda {
            Lambda::Auto => "auto".to_string(),
            Lambda::Fixed(l) => l.to_string(),
        };
        let path = |o: Option<PathBuf>| o.map(|p| p.display().to_string()).unwrap_or_default();
        let pairs: Vec<(&str, String)> = vec![
            ("method", p.method.name().into()),
            ("corpus", path(self.corpus_path())),
            ("corpus_seed", cseed.to_string()),
            ("corpus_bytes", cbytes.to_string()),
            ("corpus_sharpness", sharp.to_string()),
            ("dense_checkpoint", path(self.dense_checkpoint())),
            ("model_seed", spec.seed.to_string()),
            ("width", width.to_string()),
            ("heads", heads.to_string()),
            ("layers", layers.to_string()),
            ("context", context.to_string()),
            ("steps", p.steps.to_string()),
            ("batch", p.batch.to_string()),
            ("lr", lr.to_string()),
            ("warmup", warmup.to_string()),
            ("beta1", p.betas.beta1.to_string()),
            ("beta2", p.betas.beta2.to_string()),
            ("eps", p.betas.eps.to_string()),
            ("n_keep", p.nm.n().to_string()),
            ("m_group", p.nm.m().to_string()),
            ("segments", p.segments.to_string()),
            ("refresh_every", p.refresh_every.to_string()),
            ("eval_every", p.eval_every.to_string()),
            ("lambda", lambda),
            ("eta", p.eta.to_string()),
            ("kd", p.kd.to_string()),
            ("seed", p.seed.to_string()),
            ("export_threshold", p.export_threshold.to_string()),
            ("calibration_batches", p.calibration_batches.to_string()),
            ("val_sequences", self.val_sequences()?.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&format!("{k} = {v}\n"));
        }
        Ok(out)
    }
}
