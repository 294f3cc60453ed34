//! SGD with momentum, cosine schedule, resumable training loops, and accuracy.

use std::f64::consts::PI;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::supernet::{Path, Supernet};
use crate::error::{Error, Result};
use crate::layers::{Ctx, ImageClassifier, ParamId, ParamStore, VitModel};
use crate::tensor::{Tape, Tensor};

/// Images with their class labels.
#[derive(Debug, Clone, Copy)]
pub struct Examples<'a> {
    pub images: &'a [Tensor],
    pub labels: &'a [usize],
}

impl<'a> Examples<'a> {
    pub fn new(images: &'a [Tensor], labels: &'a [usize]) -> Result<Self> {
        if images.len() != labels.len() || images.is_empty() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn head(&self, n: usize) -> Examples<'a> {
        let n = n.min(self.len());
        Examples {
            images: &self.images[..n],
            labels: &self.labels[..n],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    /// Linear ramp from 0 over this many steps before the cosine decay starts.
    pub warmup_steps: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub clip_norm: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            label_smoothing: 0.1,
            warmup_steps: 0,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch_size: usize,
    /// Length of the cosine schedule.
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            batch_size: 16,
            iterations: 1000,
            seed: 0,
        }
    }
}

/// Cosine-annealed learning rate at `step` of `total`, decaying to zero.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.lr * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let t = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    0.5 * cfg.lr * (1.0 + (PI * t).cos())
}

/// Momentum SGD whose buffers exist only for parameters that have received a gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub cfg: OptimConfig,
    pub velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(cfg: OptimConfig, params: usize) -> Self {
        Self {
            cfg,
            velocity: vec![None; params],
        }
    }

    /// Updates exactly the parameters in `grads`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|(_, g)| g.data())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (id, g) in grads {
            let w = store.get_mut(*id);
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                let d = gi * scale + self.cfg.weight_decay * *wi;
                *vi = self.cfg.momentum * *vi + d;
                *wi -= lr * *vi;
            }
        }
    }
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    pub loss: f64,
    pub lr: f64,
}

/// Mean label-smoothed loss of a batch and the gradients of every parameter it reached.
pub fn batch_gradients(
    model: &dyn ImageClassifier,
    batch: Examples<'_>,
    smoothing: f64,
) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, model.store());
    let refs: Vec<&Tensor> = batch.images.iter().collect();
    let loss = model.batch_logits(&ctx, &refs)?.cross_entropy(batch.labels, smoothing)?;
    let value = loss.value().item().expect("scalar loss");
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    loss.backward()?;
    Ok((value, ctx.grads()))
}

/// Resumable training state: step counter, data/path RNG, and optimizer buffers.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub opt: Sgd,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, params: usize) -> Self {
        Self {
            cfg,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            opt: Sgd::new(cfg.optim, params),
        }
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(&self.cfg.optim, self.step, self.cfg.iterations)
    }

    fn sample_batch<'a>(&mut self, data: Examples<'a>) -> (Vec<Tensor>, Vec<usize>) {
        let n = self.cfg.batch_size.min(data.len());
        let idx = index::sample(&mut self.rng, data.len(), n);
        idx.iter()
            .map(|i| (data.images[i].clone(), data.labels[i]))
            .unzip()
    }

    fn finish_step(&mut self, store: &mut ParamStore, loss: f64, grads: &[(ParamId, Tensor)], path: Option<String>) -> Result<StepRecord> {
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: self.step as u64,
                loss,
            });
        }
        let lr = self.lr();
        self.opt.step(store, grads, lr);
        let rec = StepRecord {
            iteration: self.step,
            path,
            loss,
            lr,
        };
        self.step += 1;
        Ok(rec)
    }

    /// One minibatch step on a standalone model.
    pub fn step_model(&mut self, model: &mut VitModel, data: Examples<'_>) -> Result<StepRecord> {
        let (images, labels) = self.sample_batch(data);
        let (loss, grads) = batch_gradients(&*model, Examples::new(&images, &labels)?, self.cfg.optim.label_smoothing)?;
        self.finish_step(&mut model.store, loss, &grads, None)
    }

    /// One single-path step: sample a path (unless `fixed`), then a batch, and
    /// update only the parameters that path touches.
    pub fn step_supernet(&mut self, net: &mut Supernet, data: Examples<'_>, fixed: Option<&Path>) -> Result<StepRecord> {
        let path = match fixed {
            Some(p) => p.clone(),
            None => net.sample_path(&mut self.rng),
        };
        let (images, labels) = self.sample_batch(data);
        let (loss, grads) = batch_gradients(
            &net.view(&path)?,
            Examples::new(&images, &labels)?,
            self.cfg.optim.label_smoothing,
        )?;
        self.finish_step(&mut net.store, loss, &grads, Some(path.to_string()))
    }

    /// Runs standalone steps until `until`, reporting each record.
    pub fn train_model(
        &mut self,
        model: &mut VitModel,
        data: Examples<'_>,
        until: usize,
        mut on_step: impl FnMut(&StepRecord, &VitModel) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.step < until {
            let rec = self.step_model(model, data)?;
            on_step(&rec, model)?;
            log.push(rec);
        }
        Ok(log)
    }

    /// Runs single-path supernet steps until `until`, reporting each record.
    pub fn train_supernet(
        &mut self,
        net: &mut Supernet,
        data: Examples<'_>,
        until: usize,
        mut on_step: impl FnMut(&StepRecord, &Supernet) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.step < until {
            let rec = self.step_supernet(net, data, None)?;
            on_step(&rec, net)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted class per image, forward-only.
pub fn predict(model: &dyn ImageClassifier, images: &[Tensor]) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|img| {
            let tape = Tape::new();
            let ctx = Ctx::frozen(&tape, model.store());
            let logits = model.logits(&ctx, img)?.value();
            if !logits.is_finite() {
                return Err(Error::NonFinite { op: "logits" });
            }
            Ok(argmax(logits.data()))
        })
        .collect()
}

/// Fraction of correctly classified examples.
pub fn accuracy(model: &dyn ImageClassifier, data: Examples<'_>) -> Result<f64> {
    let pred = predict(model, data.images)?;
    let hits = pred.iter().zip(data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Accuracy of `path` with weights inherited from the supernet.
pub fn evaluate_subnet(net: &Supernet, path: &Path, data: Examples<'_>) -> Result<f64> {
    accuracy(&net.view(path)?, data)
}
