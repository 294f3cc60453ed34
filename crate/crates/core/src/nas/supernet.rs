use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arch::{count_flops, CellChoice, Genotype, StageLayout, StageSpec};
use crate::error::{Error, Result};
use crate::layers::{
    build_with, Backbone, Ctx, EncoderLayer, EncoderLayerConfig, HeadMaps, ImageClassifier, ParamId, ParamStore,
    VitModel,
};
use crate::tensor::{Tensor, Var};

/// One cell choice per supernet cell, stage-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Path(pub Vec<CellChoice>);

impl Path {
    pub fn uniform(choice: CellChoice, cells: usize) -> Self {
        Path(vec![choice; cells])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse(s: &str) -> Result<Self> {
        s.chars()
            .filter(|c| !matches!(c, '|' | ' ' | ','))
            .map(|c| CellChoice::from_symbol(c).ok_or_else(|| Error::Format(format!("unknown cell symbol {c:?}"))))
            .collect::<Result<Vec<_>>>()
            .map(Path)
    }

    /// Replaces the last non-identity cell with a Basic layer if it is a shared pair,
    /// so the final realized layer computes its own attention.
    pub fn repair_last_layer(&mut self) -> bool {
        match self.0.iter_mut().rev().find(|c| **c != CellChoice::Identity) {
            Some(c @ CellChoice::SharedPair) => {
                *c = CellChoice::Basic;
                true
            }
            _ => false,
        }
    }
}

impl fmt::Display for Path {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.iter().try_for_each(|c| write!(f, "{}", c.symbol()))
    }
}

/// Each cell independently uniform over the three choices.
pub fn sample_path(cells: usize, rng: &mut impl Rng) -> Path {
    Path((0..cells).map(|_| CellChoice::ALL[rng.random_range(0..3)]).collect())
}

#[derive(Debug, Clone)]
pub struct SupernetCell {
    pub basic: EncoderLayer,
    /// Independent first layer and sharing second layer of the shared pair.
    pub pair: [EncoderLayer; 2],
}

impl SupernetCell {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        let basic = EncoderLayer::new(store, &format!("{name}.basic"), EncoderLayerConfig::new(dim, heads, false), rng)?;
        let p0 = EncoderLayer::new(store, &format!("{name}.pair0"), EncoderLayerConfig::new(dim, heads, false), rng)?;
        let p1 = EncoderLayer::new(store, &format!("{name}.pair1"), EncoderLayerConfig::new(dim, heads, true), rng)?;
        Ok(Self {
            basic,
            pair: [p0, p1],
        })
    }

    /// The layers realized by `choice`, in order.
    fn realized(&self, choice: CellChoice) -> Vec<&EncoderLayer> {
        match choice {
            CellChoice::Basic => vec![&self.basic],
            CellChoice::SharedPair => self.pair.iter().collect(),
            CellChoice::Identity => Vec::new(),
        }
    }
}

/// Over-parameterized network holding every cell's Basic and SharedPair paths
/// on a fixed stage schedule.
#[derive(Debug, Clone)]
pub struct Supernet {
    /// Stage schedule; the cell choices stored here are ignored, only their count matters.
    pub schedule: Genotype,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub cells: Vec<Vec<SupernetCell>>,
}

impl Supernet {
    pub fn new(schedule: &Genotype, rng: &mut impl Rng) -> Result<Self> {
        let mut sched = schedule.clone();
        for (s, st) in sched.stages.iter_mut().enumerate() {
            let n = st
                .cells()
                .ok_or_else(|| Error::Contract(format!("stage {s}: supernet schedules need cell lists")))?
                .len();
            st.layout = StageLayout::Cells {
                cells: vec![CellChoice::Basic; n],
            };
        }
        let mut store = ParamStore::new();
        let (backbone, cells) = build_with(&sched, &mut store, rng, |store, s, rng| {
            let st = &sched.stages[s];
            (0..st.depth())
                .map(|c| SupernetCell::new(store, &format!("stage{s}.cell{c}"), st.dim, st.heads, rng))
                .collect()
        })?;
        Ok(Self {
            schedule: sched,
            store,
            backbone,
            cells,
        })
    }

    pub fn num_cells(&self) -> usize {
        self.cells.iter().map(Vec::len).sum()
    }

    pub fn sample_path(&self, rng: &mut impl Rng) -> Path {
        sample_path(self.num_cells(), rng)
    }

    fn check(&self, path: &Path) -> Result<()> {
        if path.len() != self.num_cells() {
            return Err(Error::Contract(format!(
                "path has {} cells, supernet has {}",
                path.len(),
                self.num_cells()
            )));
        }
        Ok(())
    }

    /// The architecture a path selects.
    pub fn genotype(&self, path: &Path) -> Result<Genotype> {
        self.check(path)?;
        let mut g = self.schedule.clone();
        let mut choices = path.0.iter().copied();
        for st in &mut g.stages {
            let n = st.depth();
            *st = StageSpec::with_cells(st.tokens, st.dim, st.heads, choices.by_ref().take(n).collect());
        }
        Ok(g)
    }

    pub fn path_flops(&self, path: &Path) -> Result<u64> {
        Ok(count_flops(&self.genotype(path)?)?.total_macs())
    }

    fn stage_cells<'p>(&self, path: &'p Path) -> Vec<&'p [CellChoice]> {
        let mut rest = path.0.as_slice();
        self.cells
            .iter()
            .map(|cells| {
                let (head, tail) = rest.split_at(cells.len());
                rest = tail;
                head
            })
            .collect()
    }

    /// Logits along `path` plus the maps of every realized layer.
    pub fn forward_traced<'t>(
        &self,
        ctx: &Ctx<'t>,
        path: &Path,
        image: &Tensor,
    ) -> Result<(Var<'t>, Vec<HeadMaps<'t>>)> {
        self.check(path)?;
        let mut x = self.backbone.embed(ctx, image)?;
        let mut trace = Vec::new();
        for (s, (cells, choices)) in self.cells.iter().zip(self.stage_cells(path)).enumerate() {
            if s > 0 {
                x = self.backbone.pool(ctx, s, x)?;
            }
            let mut prev: Option<HeadMaps<'t>> = None;
            for (cell, &choice) in cells.iter().zip(choices) {
                for layer in cell.realized(choice) {
                    let (y, maps) = layer.forward(ctx, x, prev.as_ref())?;
                    x = y;
                    trace.push(maps.clone());
                    prev = Some(maps);
                }
            }
        }
        Ok((self.backbone.classify(ctx, x)?, trace))
    }

    /// Backbone parameters plus those of the cells' selected paths.
    pub fn path_params(&self, path: &Path) -> Result<Vec<ParamId>> {
        self.check(path)?;
        let mut out = self.backbone.params();
        for (cells, choices) in self.cells.iter().zip(self.stage_cells(path)) {
            for (cell, &choice) in cells.iter().zip(choices) {
                for layer in cell.realized(choice) {
                    out.extend(layer.params());
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Standalone model for `path` with weights copied out of the supernet.
    pub fn extract(&self, path: &Path) -> Result<VitModel> {
        let g = self.genotype(path)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = VitModel::new(&g, &mut rng)?;
        let mut rename = Vec::new();
        for (s, choices) in self.stage_cells(path).into_iter().enumerate() {
            let mut layer = 0;
            for (c, &choice) in choices.iter().enumerate() {
                let prefixes: &[&str] = match choice {
                    CellChoice::Basic => &["basic"],
                    CellChoice::SharedPair => &["pair0", "pair1"],
                    CellChoice::Identity => &[],
                };
                for p in prefixes {
                    rename.push((format!("stage{s}.layer{layer}."), format!("stage{s}.cell{c}.{p}.")));
                    layer += 1;
                }
            }
        }
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let name = model.store.name(id).to_string();
            let source = rename
                .iter()
                .find_map(|(from, to)| name.strip_prefix(from.as_str()).map(|rest| format!("{to}{rest}")))
                .unwrap_or(name);
            let src = self.store.id(&source).ok_or_else(|| Error::MissingParam(source.clone()))?;
            model.store.set(id, self.store.get(src).clone())?;
        }
        Ok(model)
    }

    pub fn view<'a>(&'a self, path: &'a Path) -> Result<SubnetView<'a>> {
        self.check(path)?;
        Ok(SubnetView { net: self, path })
    }
}

/// A supernet evaluated along one fixed path, with inherited weights.
#[derive(Debug, Clone, Copy)]
pub struct SubnetView<'a> {
    pub net: &'a Supernet,
    pub path: &'a Path,
}

impl ImageClassifier for SubnetView<'_> {
    fn store(&self) -> &ParamStore {
        &self.net.store
    }

    fn logits<'t>(&self, ctx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>> {
        Ok(self.net.forward_traced(ctx, self.path, image)?.0)
    }

    fn num_classes(&self) -> usize {
        self.net.schedule.num_classes
    }
}
