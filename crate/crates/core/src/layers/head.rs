use rand::Rng;
use serde::{Deserialize, Serialize};

use super::basic::Linear;
use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    /// Classify from the CLS token's final state.
    ClsToken,
    /// Classify from the mean of all spatial tokens.
    Gap,
}

#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub mode: HeadMode,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, mode: HeadMode, dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        Self {
            mode,
            linear: Linear::new(store, name, dim, classes, rng),
        }
    }

    /// `[N × dim]` features → `[1 × classes]` logits. `has_cls` says whether row 0 is a CLS token.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, features: Var<'t>, has_cls: bool) -> Result<Var<'t>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != self.linear.in_dim {
            return Err(Error::Contract(format!(
                "head expects [N × {}] features, got {shape:?}",
                self.linear.in_dim
            )));
        }
        let pooled = match self.mode {
            HeadMode::ClsToken => {
                if !has_cls {
                    return Err(Error::Contract("CLS-token head on features without a CLS token".into()));
                }
                features.slice_rows(0, 1)?
            }
            HeadMode::Gap => {
                let spatial = if has_cls {
                    if shape[0] < 2 {
                        return Err(Error::Contract("GAP head needs spatial tokens".into()));
                    }
                    features.slice_rows(1, shape[0])?
                } else {
                    features
                };
                spatial.mean(&[0])?.reshape([1, shape[1]])?
            }
        };
        self.linear.forward(ctx, pooled)
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.linear.params()
    }
}
