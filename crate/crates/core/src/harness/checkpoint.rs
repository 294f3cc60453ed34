//! Framed binary checkpoints.
//!
//! Layout (little-endian): magic `PSVL`, `u32` version, `u8` kind, then
//! length-prefixed JSON blobs for the genotype and training config, the
//! iteration counter, the RNG position, and two tensor tables (parameters and
//! momentum buffers). A tensor record is a length-prefixed name, a `u64` rank,
//! the extents, and the row-major `f64` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::data::Reader;
use crate::arch::Genotype;
use crate::error::{Error, Result};
use crate::layers::{ParamStore, VitModel};
use crate::nas::{RngState, Sgd, Supernet, TrainConfig, Trainer};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSVL";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// A fixed architecture; the genotype is the model.
    Model = 0,
    /// A supernet; the genotype gives the stage schedule and cell count.
    Supernet = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub genotype: Genotype,
    pub train_config: TrainConfig,
    pub iteration: u64,
    pub rng: RngState,
    pub params: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

fn tables(store: &ParamStore, opt: &Sgd) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
    let params = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
    let momentum = store
        .iter()
        .filter_map(|(id, n, _)| Some((n.to_string(), opt.velocity[id.0].clone()?)))
        .collect();
    (params, momentum)
}

fn restore_trainer(ck: &Checkpoint, store: &ParamStore) -> Result<Trainer> {
    let mut trainer = Trainer::new(ck.train_config, store.len());
    trainer.step = ck.iteration as usize;
    trainer.rng = ck.rng.restore();
    for (name, t) in &ck.momentum {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Format(format!("momentum for unknown parameter {name}")))?;
        if store.get(id).shape() != t.shape() {
            return Err(Error::ParamShape {
                name: name.clone(),
                expected: store.get(id).shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
        trainer.opt.velocity[id.0] = Some(t.clone());
    }
    Ok(trainer)
}

impl Checkpoint {
    pub fn of_model(model: &VitModel, trainer: &Trainer) -> Self {
        let (params, momentum) = tables(&model.store, &trainer.opt);
        Self {
            kind: ModelKind::Model,
            genotype: model.genotype.clone(),
            train_config: trainer.cfg,
            iteration: trainer.step as u64,
            rng: RngState::capture(&trainer.rng),
            params,
            momentum,
        }
    }

    pub fn of_supernet(net: &Supernet, trainer: &Trainer) -> Self {
        let (params, momentum) = tables(&net.store, &trainer.opt);
        Self {
            kind: ModelKind::Supernet,
            genotype: net.schedule.clone(),
            train_config: trainer.cfg,
            iteration: trainer.step as u64,
            rng: RngState::capture(&trainer.rng),
            params,
            momentum,
        }
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("checkpoint holds a {:?}, not a {kind:?}", self.kind)));
        }
        Ok(())
    }

    fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        store.load_named(self.params.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Rebuilds the model and the trainer state it was saved with.
    pub fn restore_model(&self) -> Result<(VitModel, Trainer)> {
        self.expect_kind(ModelKind::Model)?;
        let mut model = VitModel::new(&self.genotype, &mut self.rng.restore())?;
        self.load_into(&mut model.store)?;
        let trainer = restore_trainer(self, &model.store)?;
        Ok((model, trainer))
    }

    pub fn restore_supernet(&self) -> Result<(Supernet, Trainer)> {
        self.expect_kind(ModelKind::Supernet)?;
        let mut net = Supernet::new(&self.genotype, &mut self.rng.restore())?;
        self.load_into(&mut net.store)?;
        let trainer = restore_trainer(self, &net.store)?;
        Ok((net, trainer))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        w.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        w.push(self.kind as u8);
        put_bytes(&mut w, self.genotype.to_json().as_bytes());
        put_bytes(
            &mut w,
            serde_json::to_string(&self.train_config).expect("config serializes").as_bytes(),
        );
        w.extend_from_slice(&self.iteration.to_le_bytes());
        w.extend_from_slice(&self.rng.seed);
        w.extend_from_slice(&self.rng.stream.to_le_bytes());
        w.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        for table in [&self.params, &self.momentum] {
            w.extend_from_slice(&(table.len() as u64).to_le_bytes());
            for (name, t) in table {
                put_bytes(&mut w, name.as_bytes());
                w.extend_from_slice(&(t.rank() as u64).to_le_bytes());
                for &d in t.shape() {
                    w.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in t.data() {
                    w.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (missing PSVL magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let kind = match r.take(1)?[0] {
            0 => ModelKind::Model,
            1 => ModelKind::Supernet,
            k => return Err(Error::Format(format!("unknown model kind {k}"))),
        };
        let genotype = Genotype::from_json(get_str(&mut r)?)?;
        let train_config = serde_json::from_str(get_str(&mut r)?)?;
        let iteration = r.u64()?;
        let seed = r.take(32)?.try_into().expect("32 bytes");
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let mut tables = [Vec::new(), Vec::new()];
        for table in &mut tables {
            let n = r.u64()?;
            for _ in 0..n {
                let name = get_str(&mut r)?.to_string();
                let rank = r.u64()? as usize;
                let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
                let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let numel = numel.filter(|&n| n.saturating_mul(8) <= bytes.len() - r.pos).ok_or_else(|| {
                    Error::Format(format!("tensor {name} with shape {shape:?} exceeds the file"))
                })?;
                let data = (0..numel).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
                table.push((name, Tensor::new(shape, data)?));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let [params, momentum] = tables;
        Ok(Self {
            kind,
            genotype,
            train_config,
            iteration,
            rng: RngState { seed, stream, word_pos },
            params,
            momentum,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_bytes(w: &mut Vec<u8>, b: &[u8]) {
    w.extend_from_slice(&(b.len() as u64).to_le_bytes());
    w.extend_from_slice(b);
}

fn get_str<'a>(r: &mut Reader<'a>) -> Result<&'a str> {
    let n = r.u64()? as usize;
    std::str::from_utf8(r.take(n)?).map_err(|e| Error::Format(format!("invalid UTF-8 in checkpoint: {e}")))
}
