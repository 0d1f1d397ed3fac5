//! Command-line runner: `run`, `gradcheck` and `sweep`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::attack::{
    apply_trigger, backdoor_loss_and_grads, trigger_loss_and_grads, AttackKind, FlipStrategy, PoisonedSample,
    StealthWeights, Trigger,
};
use crate::diffnet::{ce_with_grad, max_relative_error, Activation, Gradients, Model};
use crate::error::{Error, Result};
use crate::proto::{combined_loss_and_grads, ClassPrototype, PrototypeBank};
use crate::rng::Stream;
use crate::sim::{run_experiment_with, EvalMode, ExperimentConfig, RoundMetrics};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "protofl", version, about = "Prototype-based federated learning backdoor simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one experiment and write metrics.csv, summary.json and optional prototype dumps.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare analytic and finite-difference gradients of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per loss.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Perturb one loss's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<LossKind>,
    },
    /// Run one experiment per value of a single parameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(clap::Args, Debug, Default, Clone)]
pub struct Overrides {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    pub attack: Option<AttackKind>,
    #[arg(long, value_parser = parse_flip)]
    pub flip: Option<FlipStrategy>,
    #[arg(long)]
    pub attack_rate: Option<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_parser = parse_eval_mode)]
    pub eval_mode: Option<EvalMode>,
}

fn parse_kind(s: &str) -> std::result::Result<AttackKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_flip(s: &str) -> std::result::Result<FlipStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_eval_mode(s: &str) -> std::result::Result<EvalMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown eval mode `{s}` (expected head or nearest_prototype)"))
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(kind) = self.attack {
            cfg.attack.kind = kind;
        }
        if let Some(flip) = self.flip {
            cfg.attack.flip_strategy = flip;
        }
        if let Some(rate) = self.attack_rate {
            cfg.attack.attack_rate = rate;
        }
        if let Some(rounds) = self.rounds {
            cfg.rounds = rounds;
        }
        if let Some(threads) = self.threads {
            cfg.threads = threads;
        }
        if let Some(mode) = self.eval_mode {
            cfg.eval_mode = mode;
        }
    }
}

/// Reads a JSON config; relative dataset paths are taken relative to the
/// config file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        cfg.dataset.resolve_paths(dir);
    }
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub final_metrics: Option<RoundMetrics>,
    pub metrics_csv: PathBuf,
    pub prototypes: Option<PathBuf>,
    pub elapsed_seconds: f64,
    pub version: String,
}

fn csv_field(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// Runs `cfg`, writing its outputs under `cfg.out_dir`. Metrics rows are
/// flushed as rounds complete, so a failed run leaves a partial CSV behind.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let started = Instant::now();
    fs::create_dir_all(&cfg.out_dir)?;
    let metrics_path = cfg.out_dir.join("metrics.csv");
    let mut metrics = csv::Writer::from_path(&metrics_path).map_err(csv_error)?;
    metrics
        .write_record(["round", "acc_mean", "asr_mean", "proto_drift", "per_client"])
        .map_err(csv_error)?;
    let protos_path = cfg.out_dir.join("prototypes.jsonl");
    let mut protos = if cfg.dump_prototypes {
        Some(BufWriter::new(File::create(&protos_path)?))
    } else {
        None
    };

    let result = run_experiment_with(cfg, |m, bank| {
        let per_client = serde_json::to_string(&m.per_client).map_err(std::io::Error::from)?;
        metrics
            .write_record([
                m.round.to_string(),
                csv_field(m.acc_mean),
                csv_field(m.asr_mean),
                csv_field(m.proto_drift),
                per_client,
            ])
            .map_err(csv_error)?;
        metrics.flush()?;
        if let Some(out) = protos.as_mut() {
            bank.write_jsonl(out, m.round)?;
        }
        Ok(())
    });
    metrics.flush()?;
    if let Some(out) = protos.as_mut() {
        out.flush()?;
    }
    let rounds = result?;

    let summary = RunSummary {
        config: cfg.clone(),
        final_metrics: rounds.last().cloned(),
        metrics_csv: metrics_path,
        prototypes: cfg.dump_prototypes.then_some(protos_path),
        elapsed_seconds: started.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    let file = File::create(cfg.out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(file), &summary).map_err(std::io::Error::from)?;
    Ok(summary)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Cross-entropy of the decision head.
    Supervised,
    /// Cross-entropy plus prototype alignment.
    Combined,
    /// Clean/poisoned mixture used by malicious clients.
    Backdoor,
    /// Trigger objective, differentiated with respect to the trigger.
    Trigger,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::Supervised,
        LossKind::Combined,
        LossKind::Backdoor,
        LossKind::Trigger,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Supervised => "supervised",
            LossKind::Combined => "combined",
            LossKind::Backdoor => "backdoor",
            LossKind::Trigger => "trigger",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub loss: LossKind,
    pub instances: usize,
    pub max_relative_error: f64,
}

impl GradcheckEntry {
    pub fn passed(&self) -> bool {
        self.max_relative_error < GRADCHECK_TOLERANCE
    }
}

const GC_INPUT: usize = 6;
const GC_CLASSES: usize = 4;
const GC_BATCH: usize = 4;
const GC_EPS: f64 = 1e-5;

fn gc_model(rng: &mut Stream) -> Result<Model> {
    let mut m = Model::init(GC_INPUT, &[7, 5], GC_CLASSES, Activation::Relu, rng)?;
    for layer in m.extractor.iter_mut().chain(std::iter::once(&mut m.head)) {
        layer.bias.iter_mut().for_each(|b| *b = rng.uniform_in(-0.5, 0.5));
    }
    Ok(m)
}

fn gc_vec(rng: &mut Stream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

fn gc_bank(rng: &mut Stream, dim: usize) -> Result<PrototypeBank> {
    PrototypeBank::from_prototypes((0..GC_CLASSES).map(|k| ClassPrototype {
        class_id: k,
        count: 1,
        vector: (0..dim).map(|_| rng.uniform_in(0.0, 2.0)).collect(),
    }))
}

fn corrupt_if(grad: &mut [f64], enabled: bool) {
    if enabled {
        if let Some(g) = grad.first_mut() {
            *g += 0.1 * g.abs().max(1.0);
        }
    }
}

fn model_loss_error<F>(model: &Model, corrupt: bool, loss: F) -> f64
where
    F: Fn(&Model) -> (f64, Gradients),
{
    let mut analytic = loss(model).1.flat();
    corrupt_if(&mut analytic, corrupt);
    let mut probe = model.clone();
    max_relative_error(&model.params_flat(), &analytic, GC_EPS, |p| {
        probe.set_params_flat(p).expect("same model shape");
        loss(&probe).0
    })
}

/// Pre-activations closer than this to the ReLU kink make a central
/// difference straddle a non-differentiable point; such draws are resampled.
const GC_KINK_MARGIN: f64 = 1e-3;

fn near_kink(model: &Model, inputs: &[&[f64]]) -> Result<bool> {
    for x in inputs {
        let trace = model.forward(x)?;
        if trace.pre.iter().flatten().any(|z| z.abs() < GC_KINK_MARGIN) {
            return Ok(true);
        }
    }
    Ok(false)
}

fn one_instance(kind: LossKind, rng: &mut Stream, corrupt: bool) -> Result<f64> {
    loop {
        if let Some(err) = try_instance(kind, rng, corrupt)? {
            return Ok(err);
        }
    }
}

fn try_instance(kind: LossKind, rng: &mut Stream, corrupt: bool) -> Result<Option<f64>> {
    let model = gc_model(rng)?;
    let batch_x: Vec<Vec<f64>> = (0..GC_BATCH).map(|_| gc_vec(rng, GC_INPUT)).collect();
    let batch_y: Vec<usize> = (0..GC_BATCH).map(|_| rng.below(GC_CLASSES)).collect();
    let xs: Vec<&[f64]> = batch_x.iter().map(Vec::as_slice).collect();
    if near_kink(&model, &xs)? {
        return Ok(None);
    }
    let batch: Vec<(&[f64], usize)> = batch_x.iter().map(Vec::as_slice).zip(batch_y.iter().copied()).collect();
    let bank = gc_bank(rng, model.embed_dim())?;
    Ok(Some(match kind {
        LossKind::Supervised => model_loss_error(&model, corrupt, |m| {
            let mut grads = Gradients::zeros_like(m);
            let mut loss = 0.0;
            let zero = vec![0.0; m.embed_dim()];
            let scale = 1.0 / batch.len() as f64;
            for &(x, y) in &batch {
                let trace = m.forward(x).expect("valid input");
                let (ce, mut d) = ce_with_grad(&trace.logits, y).expect("valid label");
                d.iter_mut().for_each(|v| *v *= scale);
                m.backward_into(&trace, &d, &zero, Some(&mut grads), None).expect("valid trace");
                loss += ce * scale;
            }
            (loss, grads)
        }),
        LossKind::Combined => model_loss_error(&model, corrupt, |m| {
            combined_loss_and_grads(m, &batch, &bank, 1.0).expect("valid batch")
        }),
        LossKind::Backdoor => {
            let poisoned: Vec<PoisonedSample> = (0..GC_BATCH)
                .map(|_| PoisonedSample {
                    x: gc_vec(rng, GC_INPUT),
                    target: rng.below(GC_CLASSES),
                    clean_class: 0,
                })
                .collect();
            let px: Vec<&[f64]> = poisoned.iter().map(|p| p.x.as_slice()).collect();
            if near_kink(&model, &px)? {
                return Ok(None);
            }
            model_loss_error(&model, corrupt, |m| {
                backdoor_loss_and_grads(m, &batch, &poisoned, 0.75).expect("valid batch")
            })
        }
        LossKind::Trigger => {
            let trigger = Trigger {
                target_label: rng.below(GC_CLASSES),
                delta_params: (0..GC_INPUT).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
                mask_logits: (0..GC_INPUT).map(|_| rng.uniform_in(-2.0, 2.0)).collect(),
            };
            let triggered = xs
                .iter()
                .map(|x| apply_trigger(&trigger, x))
                .collect::<Result<Vec<_>>>()?;
            let tx: Vec<&[f64]> = triggered.iter().map(Vec::as_slice).collect();
            if near_kink(&model, &tx)? {
                return Ok(None);
            }
            let weights = StealthWeights {
                lambda1: 0.1,
                lambda2: 0.01,
                lambda3: 0.001,
            };
            let (_, grads) = trigger_loss_and_grads(&model, &trigger, &xs, &bank, weights)?;
            let mut params = trigger.delta_params.clone();
            params.extend_from_slice(&trigger.mask_logits);
            let mut analytic = grads.delta_params.clone();
            analytic.extend_from_slice(&grads.mask_logits);
            corrupt_if(&mut analytic, corrupt);
            max_relative_error(&params, &analytic, GC_EPS, |p| {
                let probe = Trigger {
                    target_label: trigger.target_label,
                    delta_params: p[..GC_INPUT].to_vec(),
                    mask_logits: p[GC_INPUT..].to_vec(),
                };
                trigger_loss_and_grads(&model, &probe, &xs, &bank, weights)
                    .expect("valid batch")
                    .0
            })
        }
    }))
}

/// Worst relative gradient error over `instances` random models, batches and
/// prototype banks for each training loss.
pub fn run_gradcheck(seed: u64, instances: usize, corrupt: Option<LossKind>) -> Result<Vec<GradcheckEntry>> {
    LossKind::ALL
        .iter()
        .enumerate()
        .map(|(i, &kind)| {
            let mut rng = Stream::derived(seed, 0x4743_4b00, i as u64);
            let mut worst: f64 = 0.0;
            for _ in 0..instances {
                worst = worst.max(one_instance(kind, &mut rng, corrupt == Some(kind))?);
            }
            Ok(GradcheckEntry {
                loss: kind,
                instances,
                max_relative_error: worst,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepAxis {
    AttackRate,
    Lambda,
    P,
    Q,
    Std,
    FlipStrategy,
    Ablation,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::AttackRate => "attack_rate",
            SweepAxis::Lambda => "lambda",
            SweepAxis::P => "p",
            SweepAxis::Q => "q",
            SweepAxis::Std => "std",
            SweepAxis::FlipStrategy => "flip_strategy",
            SweepAxis::Ablation => "ablation",
        }
    }

    /// Applies one sweep value to a config.
    pub fn apply(&self, cfg: &mut ExperimentConfig, value: &str) -> Result<()> {
        let number = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{} value `{value}` is not a number", self.name())))
        };
        match self {
            SweepAxis::AttackRate => cfg.attack.attack_rate = number()?,
            SweepAxis::Lambda => cfg.lambda = number()?,
            SweepAxis::P => cfg.partition.p = number()?,
            SweepAxis::Q => cfg.partition.q = number()?,
            SweepAxis::Std => cfg.partition.std = number()?,
            SweepAxis::FlipStrategy => cfg.attack.flip_strategy = value.parse()?,
            SweepAxis::Ablation => match value.to_lowercase().as_str() {
                "static_trigger" | "static" => cfg.attack.kind = AttackKind::StaticTrigger,
                "static+pps" => {
                    cfg.attack.kind = AttackKind::Bapfl;
                    cfg.attack.tom = false;
                }
                "pps+tom" | "bapfl" => {
                    cfg.attack.kind = AttackKind::Bapfl;
                    cfg.attack.tom = true;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "ablation value `{value}` (expected static_trigger, static+pps or pps+tom)"
                    )))
                }
            },
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub acc: Option<f64>,
    pub asr: Option<f64>,
    pub proto_drift: Option<f64>,
}

/// One run per value under `<out_dir>/<axis>-<value>`, and a combined
/// `sweep.csv` in `out_dir` that is rewritten after every completed run.
pub fn cmd_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut cfgs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, v)?;
        cfg.out_dir = base.out_dir.join(format!("{}-{}", axis.name(), sanitize(v)));
        cfg.validate()?;
        cfgs.push(cfg);
    }
    fs::create_dir_all(&base.out_dir)?;
    let mut rows = Vec::new();
    for (v, cfg) in values.iter().zip(&cfgs) {
        let summary = cmd_run(cfg);
        let outcome = summary.map(|s| {
            let last = s.final_metrics;
            rows.push(SweepRow {
                value: v.clone(),
                acc: last.as_ref().and_then(|m| m.acc_mean),
                asr: last.as_ref().and_then(|m| m.asr_mean),
                proto_drift: last.as_ref().and_then(|m| m.proto_drift),
            });
        });
        write_sweep_csv(&base.out_dir.join("sweep.csv"), axis, &rows)?;
        outcome?;
    }
    Ok(rows)
}

fn sanitize(v: &str) -> String {
    v.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect()
}

fn write_sweep_csv(path: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record([axis.name(), "acc", "asr", "proto_drift"]).map_err(csv_error)?;
    for r in rows {
        w.write_record([r.value.clone(), csv_field(r.acc), csv_field(r.asr), csv_field(r.proto_drift)])
            .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Config(_) | Error::AttackConfig(_) | Error::Ingest { .. } | Error::Partition(_) => EXIT_CONFIG,
        Error::Divergence(_) => EXIT_DIVERGED,
        _ => EXIT_CHECK_FAILED,
    }
}

fn prepared(config: &Path, overrides: &Overrides) -> Result<ExperimentConfig> {
    let mut cfg = load_config(config)?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Executes a parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Run { config, overrides } => prepared(&config, &overrides).and_then(|cfg| {
            let summary = cmd_run(&cfg)?;
            if let Some(m) = &summary.final_metrics {
                println!(
                    "round {}: acc {} asr {} drift {}",
                    m.round,
                    csv_field(m.acc_mean),
                    csv_field(m.asr_mean),
                    csv_field(m.proto_drift)
                );
            }
            println!("wrote {}", cfg.out_dir.display());
            Ok(EXIT_OK)
        }),
        Command::Gradcheck {
            seed,
            instances,
            corrupt,
        } => run_gradcheck(seed, instances.max(1), corrupt).map(|entries| {
            let mut code = EXIT_OK;
            for e in &entries {
                let status = if e.passed() { "ok" } else { "FAIL" };
                println!(
                    "{:<10} instances {:>4}  max relative error {:.3e}  {status}",
                    e.loss.name(),
                    e.instances,
                    e.max_relative_error
                );
                if !e.passed() {
                    code = EXIT_CHECK_FAILED;
                }
            }
            if code != EXIT_OK {
                let failing: Vec<&str> = entries.iter().filter(|e| !e.passed()).map(|e| e.loss.name()).collect();
                eprintln!("gradient check failed for: {}", failing.join(", "));
            }
            code
        }),
        Command::Sweep {
            config,
            axis,
            values,
            overrides,
        } => prepared(&config, &overrides).and_then(|cfg| {
            let values: Vec<String> = values
                .split(',')
                .map(|v| v.trim().to_string())
                .filter(|v| !v.is_empty())
                .collect();
            let rows = cmd_sweep(&cfg, axis, &values)?;
            println!("{:<14} {:>8} {:>8}", axis.name(), "acc", "asr");
            for r in rows {
                println!("{:<14} {:>8} {:>8}", r.value, fmt2(r.acc), fmt2(r.asr));
            }
            Ok(EXIT_OK)
        }),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn fmt2(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.2}"))
}

/// Parses `args` (including the program name) and executes them.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(cli),
        Err(e) => {
            let _ = e.print();
            match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_CONFIG,
            }
        }
    }
}
