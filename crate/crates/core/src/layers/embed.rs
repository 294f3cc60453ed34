use rand::Rng;
use serde::{Deserialize, Serialize};

use super::basic::Linear;
use super::params::{normal, Ctx, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchEmbedConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub use_cls_token: bool,
}

impl PatchEmbedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_size == 0
            || self.in_channels == 0
            || self.embed_dim == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Contract(format!(
                "image {} must be a positive multiple of patch {}",
                self.image_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid() + usize::from(self.use_cls_token)
    }
}

/// Flattens non-overlapping `p×p×C` patches of an `[H × W × C]` image into rows
/// ordered by grid row, then grid column; each row is ordered (py, px, c).
pub fn extract_patches(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != s[1] || patch == 0 || !s[0].is_multiple_of(patch) {
        return Err(shape_err(
            "patch_embed",
            format!("image {s:?} not divisible into {patch}×{patch} patches"),
        ));
    }
    let (side, c) = (s[0], s[2]);
    let grid = side / patch;
    let row_len = patch * patch * c;
    let src = image.data();
    let mut data = Vec::with_capacity(grid * grid * row_len);
    for gy in 0..grid {
        for gx in 0..grid {
            for py in 0..patch {
                let y = gy * patch + py;
                let start = (y * side + gx * patch) * c;
                data.extend_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new([grid * grid, row_len], data)
}

#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: Linear,
    pub cls: Option<ParamId>,
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, name: &str, cfg: PatchEmbedConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let row = cfg.patch_size * cfg.patch_size * cfg.in_channels;
        let proj = Linear::new(store, &format!("{name}.proj"), row, d, rng);
        let cls = cfg
            .use_cls_token
            .then(|| store.add(format!("{name}.cls"), normal(rng, &[1, d], 0.02)));
        let pos = store.add(format!("{name}.pos"), normal(rng, &[cfg.num_tokens(), d], 0.02));
        Ok(Self { cfg, proj, cls, pos })
    }

    /// `[H × W × C]` image → `[N × dim]` tokens with positions added.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, image: &Tensor) -> Result<Var<'t>> {
        let c = &self.cfg;
        if image.shape() != [c.image_size, c.image_size, c.in_channels] {
            return Err(shape_err(
                "patch_embed",
                format!(
                    "expected [{0} × {0} × {1}], got {2:?}",
                    c.image_size,
                    c.in_channels,
                    image.shape()
                ),
            ));
        }
        let patches = ctx.constant(extract_patches(image, c.patch_size)?);
        let mut x = self.proj.forward(ctx, patches)?;
        if let Some(cls) = self.cls {
            x = Var::concat_rows(&[ctx.param(cls), x])?;
        }
        x.add(ctx.param(self.pos))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = self.proj.params().to_vec();
        out.extend(self.cls);
        out.push(self.pos);
        out
    }
}
