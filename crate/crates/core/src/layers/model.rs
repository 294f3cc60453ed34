//! Whole networks assembled from a [`Genotype`].

use rand::Rng;

use super::attention::HeadMaps;
use super::basic::LayerNorm;
use super::embed::{PatchEmbed, PatchEmbedConfig};
use super::encoder::{EncoderLayer, EncoderLayerConfig};
use super::head::{ClassifierHead, HeadMode};
use super::params::{normal, Ctx, ParamId, ParamStore};
use super::pool::{TokenPool, TokenPool1d, TokenPool2d};
use crate::arch::{validate, Genotype, PatchSpec, PoolingMode};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Anything that maps one image to `[1 × classes]` logits through a parameter store.
pub trait ImageClassifier {
    fn store(&self) -> &ParamStore;

    fn logits<'t>(&self, ctx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>>;

    fn num_classes(&self) -> usize;

    /// Stacked logits of a batch, `[batch × classes]`.
    fn batch_logits<'t>(&self, ctx: &Ctx<'t>, images: &[&Tensor]) -> Result<Var<'t>> {
        let rows = images
            .iter()
            .map(|img| self.logits(ctx, img))
            .collect::<Result<Vec<_>>>()?;
        Var::concat_rows(&rows)
    }
}

#[derive(Debug, Clone)]
struct StagePool {
    pool: TokenPool,
    pos: ParamId,
}

/// Everything outside the transformer layers: patch embedding, pools with their
/// per-stage positional embeddings, final norm, and classifier.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub mode: PoolingMode,
    pub patch: PatchSpec,
    /// `(tokens, dim, heads)` per stage.
    pub schedule: Vec<(usize, usize, usize)>,
    pub embed: PatchEmbed,
    pools: Vec<StagePool>,
    pub norm: LayerNorm,
    pub head: ClassifierHead,
}

impl Backbone {
    /// Registers embedding and pool parameters; call [`Backbone::finish`] after the stage layers.
    fn start(store: &mut ParamStore, g: &Genotype, rng: &mut impl Rng) -> Result<BackboneBuilder> {
        let first = &g.stages[0];
        let embed = PatchEmbed::new(
            store,
            "embed",
            PatchEmbedConfig {
                image_size: g.patch.image,
                patch_size: g.patch.patch,
                in_channels: g.patch.channels,
                embed_dim: first.dim,
                use_cls_token: g.patch.cls,
            },
            rng,
        )?;
        Ok(BackboneBuilder {
            embed,
            pools: Vec::new(),
        })
    }

    pub fn has_cls(&self) -> bool {
        self.patch.cls
    }

    pub fn embed<'t>(&self, ctx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>> {
        self.embed.forward(ctx, image)
    }

    /// Pools stage `stage - 1` tokens into stage `stage` and adds that stage's positions.
    pub fn pool<'t>(&self, ctx: &Ctx<'t>, stage: usize, x: Var<'t>) -> Result<Var<'t>> {
        let sp = &self.pools[stage - 1];
        let pooled = match &sp.pool {
            TokenPool::OneD(p) => p.forward(ctx, x)?,
            TokenPool::TwoD(p) => {
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let side = (n as f64).sqrt().round() as usize;
                let y = p.forward(ctx, x.reshape([side, side, d])?)?;
                let s = y.shape();
                y.reshape([s[0] * s[1], s[2]])?
            }
        };
        pooled.add(ctx.param(sp.pos))
    }

    pub fn classify<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let x = self.norm.forward(ctx, x)?;
        self.head.forward(ctx, x, self.has_cls())
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.embed.params();
        for sp in &self.pools {
            out.extend(sp.pool.params());
            out.push(sp.pos);
        }
        out.extend(self.norm.params());
        out.extend(self.head.params());
        out
    }
}

struct BackboneBuilder {
    embed: PatchEmbed,
    pools: Vec<StagePool>,
}

impl BackboneBuilder {
    fn add_pool(&mut self, store: &mut ParamStore, g: &Genotype, stage: usize, rng: &mut impl Rng) -> Result<()> {
        let (prev, st) = (&g.stages[stage - 1], &g.stages[stage]);
        let name = format!("pool{stage}");
        let pool = match g.pooling_mode {
            PoolingMode::OneD => TokenPool::OneD(TokenPool1d::new(store, &name, prev.dim, st.dim, rng)?),
            PoolingMode::TwoD => TokenPool::TwoD(TokenPool2d::new(store, &name, prev.dim, st.dim, rng)?),
        };
        let pos = store.add(format!("{name}.pos"), normal(rng, &[st.tokens, st.dim], 0.02));
        self.pools.push(StagePool { pool, pos });
        Ok(())
    }

    fn finish(self, store: &mut ParamStore, g: &Genotype, rng: &mut impl Rng) -> Backbone {
        let last = g.stages.last().expect("validated");
        let mode = match g.pooling_mode {
            PoolingMode::OneD if g.patch.cls => HeadMode::ClsToken,
            _ => HeadMode::Gap,
        };
        Backbone {
            mode: g.pooling_mode,
            patch: g.patch,
            schedule: g.stages.iter().map(|s| (s.tokens, s.dim, s.heads)).collect(),
            embed: self.embed,
            pools: self.pools,
            norm: LayerNorm::new(store, "norm", last.dim),
            head: ClassifierHead::new(store, "head", mode, last.dim, g.num_classes, rng),
        }
    }
}

/// Builds a backbone plus per-stage layers produced by `make_stage`.
pub(crate) fn build_with<S, R: Rng>(
    g: &Genotype,
    store: &mut ParamStore,
    rng: &mut R,
    mut make_stage: impl FnMut(&mut ParamStore, usize, &mut R) -> Result<S>,
) -> Result<(Backbone, Vec<S>)> {
    let violations = validate(g);
    if !violations.is_empty() {
        return Err(Error::InvalidGenotype(violations));
    }
    let mut b = Backbone::start(store, g, rng)?;
    let mut stages = Vec::with_capacity(g.stages.len());
    for s in 0..g.stages.len() {
        if s > 0 {
            b.add_pool(store, g, s, rng)?;
        }
        stages.push(make_stage(store, s, rng)?);
    }
    Ok((b.finish(store, g, rng), stages))
}

/// A single fixed architecture.
#[derive(Debug, Clone)]
pub struct VitModel {
    pub genotype: Genotype,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub stages: Vec<Vec<EncoderLayer>>,
}

impl VitModel {
    pub fn new(genotype: &Genotype, rng: &mut impl Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let (backbone, stages) = build_with(genotype, &mut store, rng, |store, s, rng| {
            let st = &genotype.stages[s];
            st.share_flags()
                .into_iter()
                .enumerate()
                .map(|(i, share)| {
                    EncoderLayer::new(
                        store,
                        &format!("stage{s}.layer{i}"),
                        EncoderLayerConfig::new(st.dim, st.heads, share),
                        rng,
                    )
                })
                .collect()
        })?;
        Ok(Self {
            genotype: genotype.clone(),
            store,
            backbone,
            stages,
        })
    }

    /// Logits plus the attention maps of every realized layer, in order.
    pub fn forward_traced<'t>(&self, ctx: &Ctx<'t>, image: &Tensor) -> Result<(Var<'t>, Vec<HeadMaps<'t>>)> {
        let mut x = self.backbone.embed(ctx, image)?;
        let mut trace = Vec::new();
        for (s, layers) in self.stages.iter().enumerate() {
            if s > 0 {
                x = self.backbone.pool(ctx, s, x)?;
            }
            let mut prev: Option<HeadMaps<'t>> = None;
            for layer in layers {
                let (y, maps) = layer.forward(ctx, x, prev.as_ref())?;
                x = y;
                trace.push(maps.clone());
                prev = Some(maps);
            }
        }
        Ok((self.backbone.classify(ctx, x)?, trace))
    }

    pub fn layers(&self) -> impl Iterator<Item = &EncoderLayer> {
        self.stages.iter().flatten()
    }
}

impl ImageClassifier for VitModel {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn logits<'t>(&self, ctx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>> {
        Ok(self.forward_traced(ctx, image)?.0)
    }

    fn num_classes(&self) -> usize {
        self.genotype.num_classes
    }
}
