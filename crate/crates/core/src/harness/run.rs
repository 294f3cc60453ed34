//! Run configuration, JSON-lines run logs, and the command drivers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path as FsPath, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ModelKind};
use super::correlate::{correlate, CorrelationReport};
use super::data::SyntheticDataset;
use crate::arch::{count_flops, Genotype};
use crate::error::{Error, Result};
use crate::layers::{ImageClassifier, VitModel};
use crate::nas::{
    accuracy, evaluate_subnet, evolutionary_search, OptimConfig, Path, SearchConfig, SearchOutcome, Supernet,
    TrainConfig, Trainer,
};

pub const RUN_CONFIG_VERSION: u32 = 1;

/// Every knob of a run. Logged verbatim as the first line of each run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub version: u32,
    pub command: String,
    pub genotype: Option<Genotype>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub path: Option<String>,
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub warmup_steps: usize,
    pub clip_norm: Option<f64>,
    pub checkpoint_every: usize,
    pub budget: Option<u64>,
    pub population: usize,
    pub max_iterations: usize,
    pub total_samples: usize,
    pub topk: usize,
    pub mutation_prob: f64,
    pub crossover_rate: f64,
    pub last_layer_independent: bool,
    pub workers: usize,
    /// Inputs used by `correlate` and, when set, a cap on search evaluation samples.
    pub samples: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        let s = SearchConfig::default();
        Self {
            version: RUN_CONFIG_VERSION,
            command: String::new(),
            genotype: None,
            data: None,
            out: None,
            checkpoint: None,
            resume: None,
            path: None,
            seed: 0,
            iterations: 1000,
            batch_size: 16,
            lr: o.lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            label_smoothing: o.label_smoothing,
            warmup_steps: o.warmup_steps,
            clip_norm: o.clip_norm,
            checkpoint_every: 0,
            budget: None,
            population: s.population_size,
            max_iterations: s.max_iterations,
            total_samples: s.total_samples,
            topk: s.topk_retained,
            mutation_prob: s.mutation_prob,
            crossover_rate: s.crossover_rate,
            last_layer_independent: s.last_layer_independent,
            workers: s.workers,
            samples: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ConfigLine {
    run_config: RunConfig,
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optim: OptimConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
                label_smoothing: self.label_smoothing,
                warmup_steps: self.warmup_steps,
                clip_norm: self.clip_norm,
            },
            batch_size: self.batch_size,
            iterations: self.iterations,
            seed: self.seed,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            flops_budget: self.budget.unwrap_or(u64::MAX),
            population_size: self.population,
            max_iterations: self.max_iterations,
            total_samples: self.total_samples,
            topk_retained: self.topk,
            mutation_prob: self.mutation_prob,
            crossover_rate: self.crossover_rate,
            seed: self.seed,
            last_layer_independent: self.last_layer_independent,
            workers: self.workers,
        }
    }

    /// Reads a config file: either a bare RunConfig JSON object or a run log,
    /// whose first line carries the config.
    pub fn read(path: &FsPath) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let first = text.lines().next().unwrap_or_default();
        let cfg = match serde_json::from_str::<ConfigLine>(first) {
            Ok(line) => line.run_config,
            Err(_) => serde_json::from_str(&text)?,
        };
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(Error::Version {
                what: "run config",
                found: cfg.version,
                expected: RUN_CONFIG_VERSION,
            });
        }
        Ok(cfg)
    }

    fn need_genotype(&self) -> Result<&Genotype> {
        self.genotype
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} needs a genotype", self.command)))
    }

    fn need_data(&self) -> Result<SyntheticDataset> {
        let dir = self
            .data
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("{} needs a dataset directory", self.command)))?;
        SyntheticDataset::load(dir)
    }

    fn out_dir(&self) -> Result<Option<&PathBuf>> {
        if let Some(d) = &self.out {
            fs::create_dir_all(d)?;
        }
        Ok(self.out.as_ref())
    }
}

/// JSON-lines log whose first record is the run configuration.
pub struct RunLog {
    out: Option<BufWriter<fs::File>>,
}

impl RunLog {
    pub fn create(path: Option<&FsPath>, cfg: &RunConfig) -> Result<Self> {
        let mut log = Self {
            out: path.map(fs::File::create).transpose()?.map(BufWriter::new),
        };
        log.record(&ConfigLine {
            run_config: cfg.clone(),
        })?;
        Ok(log)
    }

    pub fn record(&mut self, value: &impl Serialize) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, value)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_acc: f64,
    pub val_acc: f64,
    pub flops: u64,
    pub params: u64,
    pub wall_seconds: f64,
    pub iterations: usize,
    pub final_loss: Option<f64>,
}

fn check_data(g: &Genotype, ds: &SyntheticDataset) -> Result<()> {
    let s = &ds.spec;
    if g.patch.image != s.image_size || g.patch.channels != s.channels || g.num_classes != s.num_classes {
        return Err(Error::DatasetMismatch(format!(
            "model expects {0}×{0}×{1} images in {2} classes, dataset has {3}×{3}×{4} in {5}",
            g.patch.image, g.patch.channels, g.num_classes, s.image_size, s.channels, s.num_classes
        )));
    }
    Ok(())
}

fn split_accuracy(model: &dyn ImageClassifier, ds: &SyntheticDataset) -> Result<(f64, f64)> {
    let train = ds.train_split();
    let val = ds.val_split();
    let t = accuracy(model, train.examples()?)?;
    let v = if val.images.is_empty() { f64::NAN } else { accuracy(model, val.examples()?)? };
    Ok((t, v))
}

fn model_init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

pub const CHECKPOINT_FILE: &str = "checkpoint.psvl";

/// File name of the checkpoint written after `step` steps by `checkpoint_every`.
pub fn periodic_checkpoint(step: usize) -> String {
    format!("checkpoint-{step:06}.psvl")
}
pub const LOG_FILE: &str = "log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";

fn write_json(path: &FsPath, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn abort(log: &mut RunLog, e: Error) -> Error {
    // best effort: the training error is what the caller needs to see
    let _ = log.record(&serde_json::json!({ "abort": e.to_string() }));
    let _ = log.flush();
    e
}

/// Trains a fixed genotype for `cfg.iterations` steps. A resumed run continues
/// with the checkpoint's own training config, so its schedule is unchanged.
pub fn run_train(cfg: &RunConfig) -> Result<Metrics> {
    let start = Instant::now();
    let ds = cfg.need_data()?;
    let (mut model, mut trainer) = match &cfg.resume {
        Some(p) => Checkpoint::load(p)?.restore_model()?,
        None => {
            let m = VitModel::new(cfg.need_genotype()?, &mut model_init_rng(cfg.seed))?;
            let n = m.store.len();
            (m, Trainer::new(cfg.train_config(), n))
        }
    };
    check_data(&model.genotype, &ds)?;
    let out = cfg.out_dir()?;
    let mut log = RunLog::create(out.map(|d| d.join(LOG_FILE)).as_deref(), cfg)?;
    let train = ds.train_split();
    let mut final_loss = None;
    while trainer.step < trainer.cfg.iterations {
        let rec = trainer
            .step_model(&mut model, train.examples()?)
            .map_err(|e| abort(&mut log, e))?;
        log.record(&rec)?;
        final_loss = Some(rec.loss);
        if let Some(dir) = out.filter(|_| cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0) {
            Checkpoint::of_model(&model, &trainer).save(&dir.join(periodic_checkpoint(trainer.step)))?;
        }
    }
    if let Some(dir) = out {
        Checkpoint::of_model(&model, &trainer).save(&dir.join(CHECKPOINT_FILE))?;
    }
    let (train_acc, val_acc) = split_accuracy(&model, &ds)?;
    let metrics = Metrics {
        train_acc,
        val_acc,
        flops: count_flops(&model.genotype)?.total_macs(),
        params: model.store.numel() as u64,
        wall_seconds: start.elapsed().as_secs_f64(),
        iterations: trainer.step,
        final_loss,
    };
    log.record(&serde_json::json!({ "metrics": metrics }))?;
    log.flush()?;
    if let Some(dir) = out {
        write_json(&dir.join(METRICS_FILE), &metrics)?;
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupernetMetrics {
    pub iterations: usize,
    pub cells: usize,
    pub params: u64,
    pub final_loss: Option<f64>,
    pub wall_seconds: f64,
}

/// Single-path supernet training over the schedule in `cfg.genotype`, or resumed.
pub fn run_supernet_train(cfg: &RunConfig) -> Result<SupernetMetrics> {
    let start = Instant::now();
    let ds = cfg.need_data()?;
    let (mut net, mut trainer) = match &cfg.resume {
        Some(p) => Checkpoint::load(p)?.restore_supernet()?,
        None => {
            let net = Supernet::new(cfg.need_genotype()?, &mut model_init_rng(cfg.seed))?;
            let n = net.store.len();
            (net, Trainer::new(cfg.train_config(), n))
        }
    };
    check_data(&net.schedule, &ds)?;
    let out = cfg.out_dir()?;
    let mut log = RunLog::create(out.map(|d| d.join(LOG_FILE)).as_deref(), cfg)?;
    let train = ds.train_split();
    let mut final_loss = None;
    while trainer.step < trainer.cfg.iterations {
        let rec = trainer
            .step_supernet(&mut net, train.examples()?, None)
            .map_err(|e| abort(&mut log, e))?;
        log.record(&rec)?;
        final_loss = Some(rec.loss);
        if let Some(dir) = out.filter(|_| cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0) {
            Checkpoint::of_supernet(&net, &trainer).save(&dir.join(periodic_checkpoint(trainer.step)))?;
        }
    }
    if let Some(dir) = out {
        Checkpoint::of_supernet(&net, &trainer).save(&dir.join(CHECKPOINT_FILE))?;
    }
    let metrics = SupernetMetrics {
        iterations: trainer.step,
        cells: net.num_cells(),
        params: net.store.numel() as u64,
        final_loss,
        wall_seconds: start.elapsed().as_secs_f64(),
    };
    log.record(&serde_json::json!({ "metrics": metrics }))?;
    log.flush()?;
    if let Some(dir) = out {
        write_json(&dir.join(METRICS_FILE), &metrics)?;
    }
    Ok(metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGenotype {
    pub rank: usize,
    pub path: String,
    pub flops: u64,
    pub fitness: f64,
    pub genotype: Genotype,
}

pub const RANKED_FILE: &str = "ranked.json";

fn need_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let p = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("{} needs a checkpoint", cfg.command)))?;
    Checkpoint::load(p)
}

/// Evolutionary search with inherited-weight validation accuracy as fitness.
pub fn run_search(cfg: &RunConfig) -> Result<(SearchOutcome, Vec<RankedGenotype>)> {
    let ds = cfg.need_data()?;
    let (net, _) = need_checkpoint(cfg)?.restore_supernet()?;
    check_data(&net.schedule, &ds)?;
    let mut val = ds.val_split();
    if val.images.is_empty() {
        return Err(Error::DatasetMismatch("search needs a non-empty validation split".into()));
    }
    if let Some(n) = cfg.samples {
        val.images.truncate(n.max(1));
        val.labels.truncate(n.max(1));
    }
    let examples = val.examples()?;
    let out = cfg.out_dir()?;
    let mut log = RunLog::create(out.map(|d| d.join(LOG_FILE)).as_deref(), cfg)?;
    let outcome = evolutionary_search(
        net.num_cells(),
        &cfg.search_config(),
        |p| net.path_flops(p),
        |p| evaluate_subnet(&net, p, examples),
    )?;
    for c in &outcome.archive {
        log.record(&serde_json::json!({
            "iteration": c.iteration,
            "path": c.path.to_string(),
            "flops": c.flops,
            "fitness": c.fitness,
        }))?;
    }
    let ranked = outcome
        .top
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(RankedGenotype {
                rank: i + 1,
                path: c.path.to_string(),
                flops: c.flops,
                fitness: c.fitness,
                genotype: net.genotype(&c.path)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    log.record(&serde_json::json!({ "best_history": outcome.best_history }))?;
    log.flush()?;
    if let Some(dir) = out {
        write_json(&dir.join(RANKED_FILE), &ranked)?;
    }
    Ok((outcome, ranked))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ModelKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub train_acc: f64,
    pub val_acc: f64,
    pub flops: u64,
}

/// Accuracy of a trained model, or of one supernet path with inherited weights.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let ds = cfg.need_data()?;
    let ck = need_checkpoint(cfg)?;
    match ck.kind {
        ModelKind::Model => {
            let (model, _) = ck.restore_model()?;
            check_data(&model.genotype, &ds)?;
            let (train_acc, val_acc) = split_accuracy(&model, &ds)?;
            Ok(EvalReport {
                kind: ck.kind,
                path: None,
                train_acc,
                val_acc,
                flops: count_flops(&model.genotype)?.total_macs(),
            })
        }
        ModelKind::Supernet => {
            let (net, _) = ck.restore_supernet()?;
            check_data(&net.schedule, &ds)?;
            let text = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::Contract("evaluating a supernet needs a path".into()))?;
            let path = Path::parse(text)?;
            let view = net.view(&path)?;
            let (train_acc, val_acc) = split_accuracy(&view, &ds)?;
            Ok(EvalReport {
                kind: ck.kind,
                path: Some(path.to_string()),
                train_acc,
                val_acc,
                flops: net.path_flops(&path)?,
            })
        }
    }
}

/// Correlation report for a model checkpoint (or a freshly initialized
/// genotype) over the first validation images, or seeded noise without data.
pub fn run_correlate(cfg: &RunConfig) -> Result<CorrelationReport> {
    let model = match (&cfg.checkpoint, &cfg.genotype) {
        (Some(_), _) => need_checkpoint(cfg)?.restore_model()?.0,
        (None, Some(g)) => VitModel::new(g, &mut model_init_rng(cfg.seed))?,
        (None, None) => return Err(Error::Contract("correlate needs a checkpoint or a genotype".into())),
    };
    let n = cfg.samples.unwrap_or(8).max(1);
    let images = match &cfg.data {
        Some(_) => {
            let ds = cfg.need_data()?;
            check_data(&model.genotype, &ds)?;
            let mut v = ds.val_split().images;
            if v.is_empty() {
                v = ds.train_split().images;
            }
            v.truncate(n);
            v
        }
        None => {
            use rand_distr::{Distribution, StandardNormal};
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let p = &model.genotype.patch;
            (0..n)
                .map(|_| {
                    crate::tensor::Tensor::from_fn([p.image, p.image, p.channels], |_| {
                        StandardNormal.sample(&mut rng)
                    })
                })
                .collect()
        }
    };
    correlate(&model, &images)
}
