use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{HeadMaps, MultiHeadAttention};
use super::basic::{LayerNorm, Linear};
use super::params::{Ctx, ParamId, ParamStore};
use crate::arch::MLP_RATIO;
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderLayerConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub share_attention_from_previous: bool,
}

impl EncoderLayerConfig {
    pub fn new(dim: usize, heads: usize, share: bool) -> Self {
        Self {
            dim,
            heads,
            mlp_ratio: MLP_RATIO,
            share_attention_from_previous: share,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) || self.mlp_ratio == 0 {
            return Err(Error::Contract(format!(
                "dim {} must be a positive multiple of heads {} (mlp_ratio {})",
                self.dim, self.heads, self.mlp_ratio
            )));
        }
        Ok(())
    }
}

/// Pre-norm transformer layer: `x + MHA(LN(x))`, then `+ MLP(LN(·))`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub cfg: EncoderLayerConfig,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderLayerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.mlp_ratio * cfg.dim;
        Ok(Self {
            cfg,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.dim),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.dim),
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), cfg.dim, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), hidden, cfg.dim, rng),
        })
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        shared_in: Option<&HeadMaps<'t>>,
    ) -> Result<(Var<'t>, HeadMaps<'t>)> {
        let (a, maps) = self.attn.forward(ctx, self.norm1.forward(ctx, x)?, shared_in)?;
        let x = x.add(a)?;
        let h = self.fc1.forward(ctx, self.norm2.forward(ctx, x)?)?.gelu();
        let x = x.add(self.fc2.forward(ctx, h)?)?;
        Ok((x, maps))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        out.extend(self.norm1.params());
        out.extend(self.attn.params());
        out.extend(self.norm2.params());
        out.extend(self.fc1.params());
        out.extend(self.fc2.params());
        out
    }

    /// Zeroes both residual-branch output projections, making the layer the identity.
    pub fn zero_branch_outputs(&self, store: &mut ParamStore) {
        for id in self.attn.proj.params().into_iter().chain(self.fc2.params()) {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).expect("same shape");
        }
    }
}
