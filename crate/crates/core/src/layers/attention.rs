//! Scaled dot-product and multi-head attention, with the map-sharing path.

use std::io::{Read, Write};

use rand::Rng;

use super::basic::Linear;
use super::encoder::EncoderLayerConfig;
use super::params::{Ctx, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Post-softmax attention scores, `[heads × N × N]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    heads: usize,
    tokens: usize,
    data: Vec<f64>,
}

impl AttentionMaps {
    pub fn new(heads: usize, tokens: usize, data: Vec<f64>) -> Result<Self> {
        if heads == 0 || tokens == 0 || data.len() != heads * tokens * tokens {
            return Err(Error::Contract(format!(
                "attention maps need {heads}×{tokens}×{tokens} values, got {}",
                data.len()
            )));
        }
        Ok(Self { heads, tokens, data })
    }

    /// Per-head identity maps.
    pub fn identity(heads: usize, tokens: usize) -> Self {
        let eye = Tensor::eye(tokens).into_data();
        Self {
            heads,
            tokens,
            data: eye.repeat(heads),
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn head(&self, h: usize) -> &[f64] {
        let n2 = self.tokens * self.tokens;
        &self.data[h * n2..(h + 1) * n2]
    }

    pub fn head_tensor(&self, h: usize) -> Tensor {
        Tensor::new([self.tokens, self.tokens], self.head(h).to_vec()).expect("consistent shape")
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        self.data
            .chunks(self.tokens)
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v)) && self.max_row_sum_error() <= tol
    }

    /// Dense dump: `heads` and `N` as u64 little-endian, then the values as f64 little-endian.
    pub fn write_dump(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.heads as u64).to_le_bytes())?;
        w.write_all(&(self.tokens as u64).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_dump(r: &mut impl Read) -> Result<Self> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let heads = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let tokens = u64::from_le_bytes(b8) as usize;
        let n = heads
            .checked_mul(tokens)
            .and_then(|x| x.checked_mul(tokens))
            .filter(|&n| n > 0 && n <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("bad map header {heads}×{tokens}")))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Self::new(heads, tokens, data)
    }
}

/// Attention maps as live tape values, one `[N × N]` var per head.
#[derive(Debug, Clone)]
pub struct HeadMaps<'t> {
    pub heads: Vec<Var<'t>>,
}

impl<'t> HeadMaps<'t> {
    pub fn from_values(tape: &'t Tape, maps: &AttentionMaps) -> Self {
        Self {
            heads: (0..maps.heads())
                .map(|h| tape.constant(maps.head_tensor(h)))
                .collect(),
        }
    }

    pub fn to_values(&self) -> AttentionMaps {
        let tokens = self.heads[0].shape()[0];
        let data = self
            .heads
            .iter()
            .flat_map(|v| v.value().into_data())
            .collect();
        AttentionMaps::new(self.heads.len(), tokens, data).expect("maps built by the layer")
    }

    fn check(&self, heads: usize, tokens: usize) -> Result<()> {
        if self.heads.len() != heads {
            return Err(Error::Contract(format!(
                "shared maps have {} heads, layer has {heads}",
                self.heads.len()
            )));
        }
        for v in &self.heads {
            if v.shape() != [tokens, tokens] {
                return Err(Error::Contract(format!(
                    "shared map shape {:?} does not match {tokens} tokens",
                    v.shape()
                )));
            }
        }
        Ok(())
    }
}

/// `softmax(Q·Kᵀ / √d_h) · V` for one head. Returns (output, scores).
pub fn scaled_dot_product_attention<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || qs != ks || qs != vs {
        return Err(Error::Contract(format!(
            "attention needs equal [N × d_h] inputs, got Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    let scale = 1.0 / (qs[1] as f64).sqrt();
    let scores = q.matmul(k.transpose()?)?.scale(scale).softmax(1)?;
    Ok((scores.matmul(v)?, scores))
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: EncoderLayerConfig,
    /// Query and key projections; absent on layers that reuse maps.
    pub query_key: Option<(Linear, Linear)>,
    pub value: Linear,
    pub proj: Linear,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderLayerConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let query_key = if cfg.share_attention_from_previous {
            None
        } else {
            Some((
                Linear::new(store, &format!("{name}.query"), d, d, rng),
                Linear::new(store, &format!("{name}.key"), d, d, rng),
            ))
        };
        Ok(Self {
            cfg,
            query_key,
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
        })
    }

    /// Computes fresh maps (independent layer) or applies `shared_in` (sharing layer).
    /// Independent layers ignore `shared_in`.
    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t>,
        x: Var<'t>,
        shared_in: Option<&HeadMaps<'t>>,
    ) -> Result<(Var<'t>, HeadMaps<'t>)> {
        let Some((query, key)) = &self.query_key else {
            let maps = shared_in.ok_or_else(|| {
                Error::Contract("sharing layer called without attention maps".into())
            })?;
            return Ok((self.forward_with_maps(ctx, x, maps)?, maps.clone()));
        };
        let q = query.forward(ctx, x)?;
        let k = key.forward(ctx, x)?;
        let v = self.value.forward(ctx, x)?;
        let dh = self.cfg.head_dim();
        let mut outs = Vec::with_capacity(self.cfg.heads);
        let mut maps = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let (o, s) = scaled_dot_product_attention(
                q.slice_cols(lo, hi)?,
                k.slice_cols(lo, hi)?,
                v.slice_cols(lo, hi)?,
            )?;
            outs.push(o);
            maps.push(s);
        }
        let out = self.proj.forward(ctx, Var::concat_cols(&outs)?)?;
        Ok((out, HeadMaps { heads: maps }))
    }

    /// Output with the score computation bypassed: `maps[h] · V_h` per head, then projected.
    pub fn forward_with_maps<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>, maps: &HeadMaps<'t>) -> Result<Var<'t>> {
        let n = x.shape()[0];
        maps.check(self.cfg.heads, n)?;
        let v = self.value.forward(ctx, x)?;
        let dh = self.cfg.head_dim();
        let outs = maps
            .heads
            .iter()
            .enumerate()
            .map(|(h, m)| m.matmul(v.slice_cols(h * dh, (h + 1) * dh)?))
            .collect::<Result<Vec<_>>>()?;
        self.proj.forward(ctx, Var::concat_cols(&outs)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some((q, k)) = &self.query_key {
            out.extend(q.params());
            out.extend(k.params());
        }
        out.extend(self.value.params());
        out.extend(self.proj.params());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn single_token_attention() {
        let tape = Tape::new();
        let q = tape.constant(t(&[1, 2], &[0.3, -0.7]));
        let k = tape.constant(t(&[1, 2], &[1.5, 2.0]));
        let v = tape.constant(t(&[1, 2], &[4.0, 5.0]));
        let (out, s) = scaled_dot_product_attention(q, k, v).unwrap();
        assert_eq!(s.value().data(), &[1.0]);
        assert_eq!(out.value().data(), &[4.0, 5.0]);
    }

    #[test]
    fn zero_queries_average_values() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros([3, 2]));
        let k = tape.constant(t(&[3, 2], &[1.0, 2.0, -3.0, 0.5, 2.0, 2.0]));
        let v = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]));
        let (out, s) = scaled_dot_product_attention(q, k, v).unwrap();
        for p in s.value().data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let o = out.value();
        for r in 0..3 {
            assert!((o.at2(r, 0) - 3.0).abs() < 1e-12);
            assert!((o.at2(r, 1) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_closed_form() {
        let tape = Tape::new();
        let q = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let k = tape.constant(t(&[2, 1], &[1.0, 0.0]));
        let v = tape.constant(t(&[2, 1], &[2.0, 4.0]));
        let (out, s) = scaled_dot_product_attention(q, k, v).unwrap();
        let e = std::f64::consts::E;
        let s = s.value();
        assert!((s.at2(0, 0) - e / (e + 1.0)).abs() < 1e-12);
        assert!((s.at2(0, 1) - 1.0 / (e + 1.0)).abs() < 1e-12);
        let row0 = (2.0 * e + 4.0) / (e + 1.0);
        assert!((out.value().at2(0, 0) - row0).abs() < 1e-12);
        assert!((row0 - 2.5379).abs() < 1e-4);
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros([2, 3]));
        let k = tape.constant(Tensor::zeros([2, 2]));
        assert!(matches!(
            scaled_dot_product_attention(q, k, k),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dump_round_trip() {
        let maps = AttentionMaps::new(2, 2, vec![0.5, 0.5, 0.25, 0.75, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let mut buf = Vec::new();
        maps.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * 8);
        let back = AttentionMaps::read_dump(&mut buf.as_slice()).unwrap();
        assert_eq!(back, maps);
        assert!(back.is_row_stochastic(1e-12));
    }
}
