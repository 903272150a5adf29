//! Command-line front end.
//!
//! Exit codes: 0 success, 1 divergence or I/O failure, 2 configuration or
//! missing input, 3 export refused by the sparse-weight-ratio gate,
//! 4 checkpoint format error.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::data::{encode, vocab_table, Corpus, MarkovText, Sampler, VOCAB_SIZE};
use crate::nn::{perplexity, Family, ForwardMode, Model};
use crate::plot::{render, Series, Style};
use crate::scalinglaw::{fit_token_law, leave_one_out, parse_points_csv, report, tokens_to_match};
use crate::trainer::metrics::mask_log_csv;
use crate::trainer::probe::{dense_forward_series, ste_error_probe};
use crate::trainer::{calibrate_lambda, evaluate, train, Checkpoint, Method, RunMetrics, RunOutcome, Task};

#[derive(Parser, Debug)]
#[command(name = "sparselab", version, about = "N:M sparsity-aware training on desk-scale models")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct RunArgs {
    /// Run configuration file (key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Data-order seed (pretraining also uses it for initialization).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Text corpus; a synthetic corpus is generated when absent.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory (default: runs/<method>-seed<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra overrides, `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SparseMethod {
    Cast,
    Srste,
    Naive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ForwardArg {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ProbeType {
    SteError,
    DenseForward,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a dense model from scratch.
    Pretrain(RunArgs),
    /// Convert a dense checkpoint into an N:M sparse one.
    Sparsify {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        method: Option<SparseMethod>,
        /// Decay strength, or `auto`.
        #[arg(long)]
        lambda: Option<String>,
        #[arg(long = "dense-checkpoint")]
        dense_checkpoint: Option<PathBuf>,
    },
    /// Validation perplexity of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "dense")]
        forward: ForwardArg,
        /// Append a result row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Fit the token-only scaling law to `tokens_billions,perplexity` rows.
    FitLaw {
        points: PathBuf,
        #[arg(long, default_value_t = crate::scalinglaw::DEFAULT_BETA)]
        beta: f64,
        /// Hold out the largest token count and predict it.
        #[arg(long)]
        loo: bool,
        #[arg(long = "target-ppl")]
        target_ppl: Option<f64>,
    },
    /// Diagnostic probes.
    Probe {
        #[arg(long = "type", value_enum)]
        kind: ProbeType,
        /// Checkpoint to probe (ste-error).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Run directory holding metrics.csv (dense-forward).
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Decay strength for ste-error; calibrated when absent.
        #[arg(long)]
        lambda: Option<f64>,
        /// Output directory for the CSV and SVG.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic corpus and its vocabulary map.
    GenCorpus {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 200_000)]
        bytes: usize,
        #[arg(long, default_value_t = MarkovText::DEFAULT_SHARPNESS)]
        sharpness: f64,
        out: PathBuf,
    },
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Law(_) => 2,
        Error::ExportRefused { .. } => 3,
        Error::Format(_) => 4,
        _ => 1,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() {
    std::process::exit(run(std::env::args_os()));
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(run) => cmd_train(run, Method::Dense, None, None),
        Command::Sparsify {
            run,
            method,
            lambda,
            dense_checkpoint,
        } => {
            let m = method.map(|m| match m {
                SparseMethod::Cast => Method::Cast,
                SparseMethod::Srste => Method::Srste,
                SparseMethod::Naive => Method::Naive,
            });
            cmd_train(run, m.unwrap_or(Method::Cast), lambda, dense_checkpoint)
        }
        Command::Eval {
            checkpoint,
            config,
            corpus,
            forward,
            csv,
        } => cmd_eval(&checkpoint, config, corpus, forward, csv),
        Command::FitLaw {
            points,
            beta,
            loo,
            target_ppl,
        } => cmd_fit_law(&points, beta, loo, target_ppl),
        Command::Probe {
            kind,
            checkpoint,
            run,
            config,
            corpus,
            lambda,
            out,
        } => cmd_probe(kind, checkpoint, run, config, corpus, lambda, &out),
        Command::GenCorpus {
            seed,
            bytes,
            sharpness,
            out,
        } => cmd_gen_corpus(seed, bytes, sharpness, &out),
    }
}

fn read_input(path: &Path, field: &str) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Config(format!("{field}: cannot read {}: {e}", path.display())))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => {
            let text = String::from_utf8(read_input(p, "config")?)
                .map_err(|_| Error::Config("config: file is not UTF-8".into()))?;
            RunConfig::parse(&text)
        }
        None => Ok(RunConfig::default()),
    }
}

fn load_task(cfg: &RunConfig) -> Result<Task> {
    let plan = cfg.plan()?;
    let ids = match cfg.corpus_path() {
        Some(p) => encode(&read_input(&p, "corpus")?),
        None => {
            let (seed, len, sharp) = cfg.synthetic_corpus()?;
            MarkovText::new(seed, sharp)?.generate(len)
        }
    };
    let corpus = Corpus::new(ids, plan.context)?;
    Ok(Task::language(corpus, plan.context, cfg.val_sequences()?))
}

fn load_checkpoint(path: &Path, field: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Config(format!("{field}: {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_train(args: RunArgs, method: Method, lambda: Option<String>, dense: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.set("method", method.name())?;
    if let Some(s) = args.seed {
        cfg.set("seed", &s.to_string())?;
        if method == Method::Dense {
            cfg.set("model_seed", &s.to_string())?;
        }
    }
    if let Some(s) = args.steps {
        cfg.set("steps", &s.to_string())?;
    }
    if let Some(c) = &args.corpus {
        cfg.set("corpus", &c.display().to_string())?;
    }
    if let Some(l) = &lambda {
        cfg.set("lambda", l)?;
    }
    if let Some(d) = &dense {
        cfg.set("dense_checkpoint", &d.display().to_string())?;
    }
    for o in &args.overrides {
        cfg.set_pair(o)?;
    }
    let plan = cfg.plan()?;
    let spec = cfg.model_spec()?;
    let resolved = cfg.resolved()?;
    let start = match method {
        Method::Dense => Model::init(&spec)?,
        _ => {
            let path = cfg
                .dense_checkpoint()
                .ok_or_else(|| Error::Config("dense_checkpoint: a dense checkpoint is required".into()))?;
            let ck = load_checkpoint(&path, "dense_checkpoint")?;
            if let Family::Transformer { context, .. } = ck.model.spec.family {
                if context < plan.context {
                    return Err(Error::Config(format!(
                        "context: checkpoint supports {context} tokens, config asks for {}",
                        plan.context
                    )));
                }
            }
            ck.model
        }
    };
    let task = load_task(&cfg)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", method.name(), plan.seed)));

    let result = train(&plan, &task, &start, Some(&start));
    let outcome = match result {
        Ok(o) => o,
        Err(e) => {
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.cfg"), &resolved)?;
            fs::write(out.join("report.txt"), format!("status\tfailed\nerror\t{e}\n"))?;
            return Err(e);
        }
    };
    write_run(&out, &resolved, &outcome)?;
    match outcome.export() {
        Ok(_) | Err(Error::Config(_)) => Ok(()),
        Err(e) => Err(e),
    }
}

fn write_run(out: &Path, resolved: &str, o: &RunOutcome) -> Result<()> {
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    fs::write(out.join("config.cfg"), resolved)?;
    fs::write(out.join("vocab.tsv"), vocab_table())?;
    fs::write(out.join("metrics.csv"), o.metrics.to_csv())?;
    if !o.mask_log.is_empty() {
        fs::write(out.join("mask_stats.csv"), mask_log_csv(&o.mask_log))?;
    }
    let mut meta = vec![
        ("method".to_string(), o.method.name().to_string()),
        ("lambda".to_string(), o.lambda.to_string()),
        ("flop_weight".to_string(), o.flop_weight.to_string()),
    ];
    if let Some(s) = o.final_sparse_weight_ratio {
        meta.push(("sparse_weight_ratio".into(), s.to_string()));
    }
    let mut trained = Checkpoint::new(o.model.clone(), o.steps as u64);
    trained.sampler = Some(o.sampler);
    trained.meta.extend(meta.iter().cloned());
    let trained_bytes = trained.to_bytes();
    let name = if o.method == Method::Dense { "final.ckpt" } else { "trained.ckpt" };
    fs::write(ck_dir.join(name), &trained_bytes)?;

    let mut rep = String::new();
    let mut line = |k: &str, v: String| rep.push_str(&format!("{k}\t{v}\n"));
    line("method", o.method.name().into());
    line("steps", o.steps.to_string());
    line("flop_weight", o.flop_weight.to_string());
    line("lambda", o.lambda.to_string());
    if let Some(r) = o.metrics.last() {
        line("val_ce", r.val_ce.to_string());
        line("val_ppl", format!("{:.4}", r.val_ppl));
        line("dense_ppl", format!("{:.4}", r.dense_ppl));
    }
    line(&format!("{name}_sha256"), sha256_hex(&trained_bytes));
    if let Some(s) = o.final_sparse_weight_ratio {
        line("sparse_weight_ratio", s.to_string());
        line("export_threshold", o.export_threshold.to_string());
        line("avg_magnitude_at_last_flip", o.flips.avg_magnitude_at_last_flip.to_string());
        line("avg_magnitude_over_flip_events", o.flips.avg_magnitude_over_events.to_string());
        line("ever_flipped", format!("{} of {}", o.flips.ever_flipped, o.flips.total_entries));
    }
    if let Some(d) = o.prune_delta {
        line("prune_val_ce_before", d.before.to_string());
        line("prune_val_ce_after", d.after.to_string());
        line("prune_relative_change", d.relative().to_string());
    }
    match (&o.exported, o.method) {
        (Some(m), _) => {
            let mut ck = Checkpoint::new(m.clone(), o.steps as u64);
            ck.meta.extend(meta.iter().cloned());
            let bytes = ck.to_bytes();
            fs::write(ck_dir.join("exported.ckpt"), &bytes)?;
            line("exported.ckpt_sha256", sha256_hex(&bytes));
            line("export", "ok".into());
        }
        (None, Method::Dense) => {}
        (None, _) => line("export", "refused: sparse weight ratio below threshold".into()),
    }
    fs::write(out.join("report.txt"), rep)?;
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    config: Option<PathBuf>,
    corpus: Option<PathBuf>,
    forward: ForwardArg,
    csv: Option<PathBuf>,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint, "checkpoint")?;
    let mut cfg = load_config(config.as_deref())?;
    if let Some(c) = &corpus {
        cfg.set("corpus", &c.display().to_string())?;
    }
    let mode = match forward {
        ForwardArg::Dense => ForwardMode::Dense,
        ForwardArg::Sparse => {
            if ck.model.masks().is_none() {
                return Err(Error::Config(
                    "forward: sparse evaluation needs a checkpoint with masks".into(),
                ));
            }
            ForwardMode::Sparse
        }
    };
    let task = load_task(&cfg)?;
    let ce = evaluate(&ck.model, task.val(), mode)?;
    let ppl = perplexity(ce);
    println!("{ppl:.4}");
    if let Some(path) = csv {
        let fresh = !path.exists();
        let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
        if fresh {
            writeln!(f, "checkpoint,forward,val_ce,val_ppl")?;
        }
        let fwd = if mode == ForwardMode::Dense { "dense" } else { "sparse" };
        writeln!(f, "{},{fwd},{ce},{ppl}", checkpoint.display())?;
    }
    Ok(())
}

fn cmd_fit_law(points: &Path, beta: f64, loo: bool, target: Option<f64>) -> Result<()> {
    let text = String::from_utf8(read_input(points, "points")?)
        .map_err(|_| Error::Config("points: file is not UTF-8".into()))?;
    let pts = parse_points_csv(&text).map_err(|e| Error::Config(format!("points: {e}")))?;
    let fit = fit_token_law(&pts, beta)?;
    let held = if loo { Some(leave_one_out(&pts, beta)?) } else { None };
    let tgt = match target {
        Some(t) => Some((t, tokens_to_match(&fit, t)?)),
        None => None,
    };
    print!("{}", report(&fit, held.as_ref(), tgt));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_probe(
    kind: ProbeType,
    checkpoint: Option<PathBuf>,
    run: Option<PathBuf>,
    config: Option<PathBuf>,
    corpus: Option<PathBuf>,
    lambda: Option<f64>,
    out: &Path,
) -> Result<()> {
    match kind {
        ProbeType::SteError => {
            let path = checkpoint.ok_or_else(|| Error::Config("checkpoint: ste-error needs --checkpoint".into()))?;
            let ck = load_checkpoint(&path, "checkpoint")?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(c) = &corpus {
                cfg.set("corpus", &c.display().to_string())?;
            }
            let plan = cfg.plan()?;
            let task = load_task(&cfg)?;
            let lambda = match lambda {
                Some(l) => l,
                None => calibrate_lambda(&ck.model, &task, &plan)?,
            };
            let batch = task.next_batch(&mut Sampler::new(plan.seed), &plan);
            let probe = ste_error_probe(&ck.model, &batch, lambda, &plan.nm)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("ste_error.csv"), probe.to_csv())?;
            let svg = render(
                "STE gradient error on masked weights",
                "|theta|",
                "delta",
                &[Series {
                    label: format!("slope {:.4}, r {:.3}", probe.slope, probe.pearson),
                    points: probe.pairs.clone(),
                    style: Style::Points,
                }],
            );
            fs::write(out.join("ste_error.svg"), svg)?;
            println!("lambda\t{lambda}");
            println!("masked_entries\t{}", probe.pairs.len());
            println!("slope\t{}", probe.slope);
            println!("intercept\t{}", probe.intercept);
            println!("pearson\t{}", probe.pearson);
        }
        ProbeType::DenseForward => {
            let dir = run.ok_or_else(|| Error::Config("run: dense-forward needs --run".into()))?;
            let text = String::from_utf8(read_input(&dir.join("metrics.csv"), "run")?)
                .map_err(|_| Error::Format("metrics.csv is not UTF-8".into()))?;
            let metrics = RunMetrics::from_csv(&text)?;
            let series = dense_forward_series(&metrics);
            fs::create_dir_all(out)?;
            let mut csv = String::from("step,dense_ppl\n");
            for (s, p) in &series {
                csv.push_str(&format!("{s},{p}\n"));
            }
            fs::write(out.join("dense_forward.csv"), csv)?;
            let pts: Vec<(f64, f64)> = series.iter().map(|&(s, p)| (s as f64, p)).collect();
            let svg = render(
                "Validation perplexity under dense forward",
                "step",
                "perplexity",
                &[Series {
                    label: dir.display().to_string(),
                    points: pts,
                    style: Style::Line,
                }],
            );
            fs::write(out.join("dense_forward.svg"), svg)?;
            println!("points\t{}", series.len());
        }
    }
    Ok(())
}

fn cmd_gen_corpus(seed: u64, bytes: usize, sharpness: f64, out: &Path) -> Result<()> {
    let min = 2 * 64 * 10;
    if bytes <= min {
        return Err(Error::Config(format!("bytes: need more than {min} symbols")));
    }
    let g = MarkovText::new(seed, sharpness)?;
    let ids = g.generate(bytes);
    let text = crate::nn::data::decode(&ids)?;
    fs::write(out, &text)?;
    let mut vocab = out.as_os_str().to_owned();
    vocab.push(".vocab.tsv");
    fs::write(PathBuf::from(vocab), vocab_table())?;
    println!("sha256\t{}", sha256_hex(&text));
    println!("symbols\t{VOCAB_SIZE}");
    println!("entropy_rate_nats\t{:.4}", g.empirical_entropy_rate(&ids));
    println!("uniform_nats\t{:.4}", (VOCAB_SIZE as f64).ln());
    Ok(())
}
