//! `psvit`: describe, cost, validate, train, search, and inspect staged vision transformers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use psvit_core::arch::{count_flops_with, preset, validate, CostConvention, Genotype, PRESET_NAMES};
use psvit_core::harness::{
    run_correlate, run_eval, run_search, run_supernet_train, run_train, DatasetSpec, RunConfig, SyntheticDataset,
};
use psvit_core::nas::{reduced_schedule, toy_schedule};

/// Supernet schedules, usable wherever a preset is accepted.
const SUPERNET_PRESETS: &[&str] = &["toy-supernet", "reduced-supernet"];

#[derive(Parser)]
#[command(name = "psvit", version, about = "Staged vision transformers with attention sharing and supernet search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a genotype as JSON.
    Describe(Source),
    /// Per-layer MAC and parameter report.
    Flops {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum, default_value_t = Convention::True)]
        convention: Convention,
        /// Human-readable table instead of JSON.
        #[arg(long)]
        table: bool,
    },
    /// Check a genotype against the architecture rules; exit 1 on any violation.
    Validate(Source),
    /// Train a fixed genotype.
    Train(TrainCmd),
    /// Single-path supernet training over a stage schedule.
    SupernetTrain(TrainCmd),
    /// Evolutionary search with inherited supernet weights.
    Search(SearchCmd),
    /// Accuracy of a model checkpoint, or of one path of a supernet checkpoint.
    Eval(EvalCmd),
    /// Adjacent-layer attention-map correlation table.
    Correlate(CorrelateCmd),
    /// Write the synthetic classification dataset.
    GenData(GenDataCmd),
}

#[derive(Clone, Copy, ValueEnum)]
enum Convention {
    /// One MAC per multiply-accumulate.
    True,
    /// Charges both attention products twice.
    Paired,
}

#[derive(Args, Clone, Default)]
struct Source {
    #[arg(long, conflicts_with = "genotype", help = preset_help())]
    preset: Option<String>,
    /// Genotype JSON file.
    #[arg(long)]
    genotype: Option<PathBuf>,
}

fn preset_help() -> String {
    let mut names: Vec<&str> = PRESET_NAMES.to_vec();
    names.extend(SUPERNET_PRESETS);
    format!("Named preset: {}", names.join(", "))
}

#[derive(Args)]
struct Common {
    /// Run configuration: a JSON file or a previous run log. Flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    source: Source,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for logs, checkpoints, and reports.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    common: Common,
    /// Continue from a checkpoint written by the same command.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long, conflicts_with = "no_clip")]
    clip_norm: Option<f64>,
    /// Disable gradient clipping.
    #[arg(long)]
    no_clip: bool,
    /// Also write a numbered checkpoint every this many steps.
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Args)]
struct SearchCmd {
    #[command(flatten)]
    common: Common,
    /// Supernet checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// FLOPS budget in MACs.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    population: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    total_samples: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    mutation_prob: Option<f64>,
    #[arg(long)]
    crossover_rate: Option<f64>,
    /// Allow a shared pair as the last realized layer.
    #[arg(long)]
    allow_shared_last: bool,
    /// Fitness evaluation threads; results are identical for any count.
    #[arg(long)]
    workers: Option<usize>,
    /// Cap on validation images used per fitness evaluation.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args)]
struct EvalCmd {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Cell choices for a supernet checkpoint, e.g. "BSIB".
    #[arg(long)]
    path: Option<String>,
}

#[derive(Args)]
struct CorrelateCmd {
    #[command(flatten)]
    common: Common,
    /// Model checkpoint; without one, the genotype is initialized from --seed.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of input images.
    #[arg(long)]
    samples: Option<usize>,
    /// JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct GenDataCmd {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DatasetSpec::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = DatasetSpec::default().num_classes)]
    classes: usize,
    #[arg(long, default_value_t = DatasetSpec::default().samples)]
    samples: usize,
    #[arg(long, default_value_t = DatasetSpec::default().image_size)]
    image_size: usize,
    #[arg(long, default_value_t = DatasetSpec::default().channels)]
    channels: usize,
    #[arg(long, default_value_t = DatasetSpec::default().noise)]
    noise: f64,
    /// Percentage of samples hashed into the validation split.
    #[arg(long, default_value_t = DatasetSpec::default().val_percent)]
    val_percent: u64,
}

enum Failure {
    /// Bad or missing arguments: exit 2.
    Usage(String),
    /// The request was well-formed but failed: exit 1.
    Domain(anyhow::Error),
}

impl From<psvit_core::Error> for Failure {
    fn from(e: psvit_core::Error) -> Self {
        let code = e.code();
        Failure::Domain(anyhow::Error::new(e).context(code))
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn resolve(source: &Source) -> Result<Option<Genotype>, Failure> {
    match (&source.preset, &source.genotype) {
        (Some(name), _) => {
            let g = match name.as_str() {
                "toy-supernet" => Some(toy_schedule(6)),
                "reduced-supernet" => Some(reduced_schedule()),
                n => preset(n),
            };
            g.map(Some).ok_or_else(|| usage(format!("unknown preset {name:?}; {}", preset_help())))
        }
        (None, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let g = Genotype::from_json(&text).with_context(|| format!("parsing genotype {}", path.display()))?;
            Ok(Some(g))
        }
        (None, None) => Ok(None),
    }
}

fn need_genotype(source: &Source) -> Result<Genotype, Failure> {
    resolve(source)?.ok_or_else(|| usage("expected --preset or --genotype"))
}

/// Writes to stdout; a closed pipe (`psvit ... | head`) is not an error.
fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(anyhow::Error::new(e).context("writing output").into()),
        _ => Ok(()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Outcome {
    emit(&(serde_json::to_string_pretty(value).context("serializing output")? + "\n"))
}

fn base_config(command: &str, c: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    cfg.command = command.to_string();
    if let Some(g) = resolve(&c.source)? {
        cfg.genotype = Some(g);
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = &c.$field {
                cfg.$field = v.clone().into();
            }
        )*};
    }
    set!(data, out, seed);
    Ok(cfg)
}

fn train_config(command: &str, t: &TrainCmd) -> Result<RunConfig, Failure> {
    let mut cfg = base_config(command, &t.common)?;
    if let Some(r) = &t.resume {
        cfg.resume = Some(r.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = t.$field {
                cfg.$field = v;
            }
        )*};
    }
    set!(iterations, batch_size, lr, momentum, weight_decay, label_smoothing, warmup_steps, checkpoint_every);
    if t.no_clip {
        cfg.clip_norm = None;
    } else if let Some(v) = t.clip_norm {
        cfg.clip_norm = Some(v);
    }
    if cfg.genotype.is_none() && cfg.resume.is_none() {
        return Err(usage(format!("{command} needs --preset, --genotype, or --resume")));
    }
    if cfg.data.is_none() {
        return Err(usage(format!("{command} needs --data")));
    }
    Ok(cfg)
}

fn search_config(s: &SearchCmd) -> Result<RunConfig, Failure> {
    let mut cfg = base_config("search", &s.common)?;
    if let Some(p) = &s.checkpoint {
        cfg.checkpoint = Some(p.clone());
    }
    macro_rules! set {
        ($($field:ident),*) => {$(
            if let Some(v) = s.$field {
                cfg.$field = v.into();
            }
        )*};
    }
    set!(budget, population, max_iterations, total_samples, topk, mutation_prob, crossover_rate, workers, samples);
    if s.allow_shared_last {
        cfg.last_layer_independent = false;
    }
    if cfg.checkpoint.is_none() || cfg.data.is_none() {
        return Err(usage("search needs --checkpoint and --data"));
    }
    Ok(cfg)
}

fn describe(source: &Source) -> Outcome {
    let g = need_genotype(source)?;
    emit(&(g.to_json() + "\n"))
}

fn flops(source: &Source, convention: Convention, table: bool) -> Outcome {
    let g = need_genotype(source)?;
    let convention = match convention {
        Convention::True => CostConvention::MultiplyAccumulate,
        Convention::Paired => CostConvention::PairedScoreOps,
    };
    let report = count_flops_with(&g, convention)?;
    if table {
        emit(&report.to_table())
    } else {
        emit(&(report.to_json() + "\n"))
    }
}

fn validate_cmd(source: &Source) -> Outcome {
    let g = need_genotype(source)?;
    let violations = validate(&g);
    print_json(&serde_json::json!({ "valid": violations.is_empty(), "violations": violations }))?;
    if let Some(first) = violations.first() {
        for v in &violations {
            eprintln!("{}: {}", v.code.as_str(), v.message);
        }
        return Err(Failure::Domain(anyhow::anyhow!("{}", first.code.as_str())));
    }
    Ok(())
}

fn gen_data(a: &GenDataCmd) -> Outcome {
    let spec = DatasetSpec {
        seed: a.seed,
        num_classes: a.classes,
        samples: a.samples,
        image_size: a.image_size,
        channels: a.channels,
        noise: a.noise,
        val_percent: a.val_percent,
    };
    let ds = SyntheticDataset::generate(spec)?;
    ds.save(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "samples": ds.images.len(),
        "train": ds.train.len(),
        "val": ds.val.len(),
    }))
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Describe(s) => describe(&s),
        Command::Flops { source, convention, table } => flops(&source, convention, table),
        Command::Validate(s) => validate_cmd(&s),
        Command::Train(t) => print_json(&run_train(&train_config("train", &t)?)?),
        Command::SupernetTrain(t) => print_json(&run_supernet_train(&train_config("supernet-train", &t)?)?),
        Command::Search(s) => {
            let (_, ranked) = run_search(&search_config(&s)?)?;
            print_json(&ranked)
        }
        Command::Eval(e) => {
            let mut cfg = base_config("eval", &e.common)?;
            cfg.checkpoint = e.checkpoint.or(cfg.checkpoint);
            cfg.path = e.path.or(cfg.path);
            if cfg.checkpoint.is_none() || cfg.data.is_none() {
                return Err(usage("eval needs --checkpoint and --data"));
            }
            print_json(&run_eval(&cfg)?)
        }
        Command::Correlate(c) => {
            let mut cfg = base_config("correlate", &c.common)?;
            cfg.checkpoint = c.checkpoint.or(cfg.checkpoint);
            cfg.samples = c.samples.or(cfg.samples);
            if cfg.checkpoint.is_none() && cfg.genotype.is_none() {
                return Err(usage("correlate needs --checkpoint, --preset, or --genotype"));
            }
            let report = run_correlate(&cfg)?;
            if let Some(dir) = &cfg.out {
                write_report(dir, &report.to_json())?;
            }
            if c.json {
                emit(&(report.to_json() + "\n"))
            } else {
                emit(&report.to_table())
            }
        }
        Command::GenData(a) => gen_data(&a),
    }
}

fn write_report(dir: &Path, json: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("correlation.json"), format!("{json}\n"))?;
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
