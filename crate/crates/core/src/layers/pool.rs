//! Token pooling between stages.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tensor, Var};

const KERNEL: usize = 3;

fn conv_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng))
}

/// 1D pooling over the token sequence: a width-3 convolution that changes the
/// feature dimension, then max pooling (kernel 3, stride 2, padding 1).
///
/// A CLS token, if present, is pooled like any other position.
#[derive(Debug, Clone)]
pub struct TokenPool1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl TokenPool1d {
    pub fn new(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim_out < dim_in {
            return Err(Error::Contract(format!(
                "token pooling must not shrink features ({dim_in} -> {dim_out})"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            conv_init(rng, &[dim_out, dim_in, KERNEL], dim_in * KERNEL),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim_out]));
        Ok(Self {
            weight,
            bias,
            dim_in,
            dim_out,
        })
    }

    /// `[N × dim_in]` → `[floor((N - 1) / 2) + 1 × dim_out]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] < 2 || shape[1] != self.dim_in {
            return Err(shape_err(
                "token_pool_1d",
                format!("need [N >= 2 × {}], got {shape:?}", self.dim_in),
            ));
        }
        x.conv1d(ctx.param(self.weight), ctx.param(self.bias), KERNEL, 1, 1)?
            .maxpool1d(3, 2, 1)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// 2D pooling on the token grid: a 3×3 convolution with stride 2 and padding 1.
#[derive(Debug, Clone)]
pub struct TokenPool2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub dim_in: usize,
    pub dim_out: usize,
}

impl TokenPool2d {
    pub fn new(store: &mut ParamStore, name: &str, dim_in: usize, dim_out: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim_out < dim_in {
            return Err(Error::Contract(format!(
                "token pooling must not shrink features ({dim_in} -> {dim_out})"
            )));
        }
        let weight = store.add(
            format!("{name}.weight"),
            conv_init(rng, &[dim_out, dim_in, KERNEL, KERNEL], dim_in * KERNEL * KERNEL),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([dim_out]));
        Ok(Self {
            weight,
            bias,
            dim_in,
            dim_out,
        })
    }

    /// `[H × W × dim_in]` → `[H/2 × W/2 × dim_out]`.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.dim_in {
            return Err(shape_err(
                "token_pool_2d",
                format!("need [H × W × {}], got {shape:?}", self.dim_in),
            ));
        }
        if !shape[0].is_multiple_of(2) || !shape[1].is_multiple_of(2) {
            return Err(shape_err(
                "token_pool_2d",
                format!("grid {}×{} is not even", shape[0], shape[1]),
            ));
        }
        x.conv2d(ctx.param(self.weight), ctx.param(self.bias), KERNEL, 2, 1)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

#[derive(Debug, Clone)]
pub enum TokenPool {
    OneD(TokenPool1d),
    TwoD(TokenPool2d),
}

impl TokenPool {
    pub fn params(&self) -> [ParamId; 2] {
        match self {
            TokenPool::OneD(p) => p.params(),
            TokenPool::TwoD(p) => p.params(),
        }
    }
}
