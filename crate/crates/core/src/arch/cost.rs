//! Analytical cost model. One FLOP is one multiply-accumulate (MAC).
//!
//! Per realized layer with `N` tokens, width `d`, `h` heads:
//!
//! | term | independent layer | sharing layer |
//! |------|-------------------|---------------|
//! | Q, K, V, output projections | `4·N·d²` | `2·N·d²` (V, output) |
//! | `Q·Kᵀ` scores | `N²·d` | 0 |
//! | scores · V | `N²·d` | `N²·d` |
//! | softmax | `N²·h` | 0 |
//! | MLP | `8·N·d²` | `8·N·d²` |
//! | two layer norms | `2·5·N·d` | `2·5·N·d` |
//!
//! [`CostConvention::PairedScoreOps`] instead charges the two `N²·d` products twice
//! (a multiply and an add each), the accounting behind [`attention_compute_share`].

use num_rational::Ratio;
use serde::Serialize;

use super::genotype::{Genotype, PoolingMode, MLP_RATIO};
use super::validate::validate;
use crate::error::{Error, Result};

pub const NORM_MACS_PER_ELEMENT: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostConvention {
    #[default]
    MultiplyAccumulate,
    PairedScoreOps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    PatchEmbed,
    Layer,
    SharedLayer,
    Pool,
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostEntry {
    pub id: String,
    pub kind: EntryKind,
    pub attention_macs: u64,
    pub mlp_macs: u64,
    pub other_macs: u64,
    pub params_attention: u64,
    pub params_mlp: u64,
    pub params_other: u64,
}

impl CostEntry {
    fn new(id: String, kind: EntryKind) -> Self {
        Self {
            id,
            kind,
            attention_macs: 0,
            mlp_macs: 0,
            other_macs: 0,
            params_attention: 0,
            params_mlp: 0,
            params_other: 0,
        }
    }

    pub fn macs(&self) -> u64 {
        self.attention_macs + self.mlp_macs + self.other_macs
    }

    pub fn params(&self) -> u64 {
        self.params_attention + self.params_mlp + self.params_other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CostTotals {
    pub attention_macs: u64,
    pub mlp_macs: u64,
    pub other_macs: u64,
    pub macs: u64,
    pub params_attention: u64,
    pub params_mlp: u64,
    pub params_other: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopsReport {
    pub convention: CostConvention,
    pub entries: Vec<CostEntry>,
    pub totals: CostTotals,
}

impl FlopsReport {
    fn from_entries(convention: CostConvention, entries: Vec<CostEntry>) -> Self {
        let mut t = CostTotals::default();
        for e in &entries {
            t.attention_macs += e.attention_macs;
            t.mlp_macs += e.mlp_macs;
            t.other_macs += e.other_macs;
            t.params_attention += e.params_attention;
            t.params_mlp += e.params_mlp;
            t.params_other += e.params_other;
        }
        t.macs = t.attention_macs + t.mlp_macs + t.other_macs;
        t.params = t.params_attention + t.params_mlp + t.params_other;
        Self {
            convention,
            entries,
            totals: t,
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.totals.macs
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text rendering, one row per entry plus a totals row.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:<13} {:>14} {:>14} {:>12} {:>12} {:>12}\n",
            "entry", "kind", "attn_macs", "mlp_macs", "other_macs", "params_attn", "params_mlp"
        );
        for e in &self.entries {
            s += &format!(
                "{:<16} {:<13} {:>14} {:>14} {:>12} {:>12} {:>12}\n",
                e.id,
                format!("{:?}", e.kind),
                e.attention_macs,
                e.mlp_macs,
                e.other_macs,
                e.params_attention,
                e.params_mlp
            );
        }
        let t = &self.totals;
        s += &format!(
            "{:<16} {:<13} {:>14} {:>14} {:>12} {:>12} {:>12}\n",
            "total", "", t.attention_macs, t.mlp_macs, t.other_macs, t.params_attention, t.params_mlp
        );
        s += &format!(
            "total MACs {} ({:.3} G), params {} ({:.3} M)\n",
            t.macs,
            t.macs as f64 / 1e9,
            t.params,
            t.params as f64 / 1e6
        );
        s
    }
}

/// MAC breakdown of a single realized transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerMacs {
    pub projections: u64,
    pub scores: u64,
    pub softmax: u64,
    pub mlp: u64,
    pub norms: u64,
}

impl LayerMacs {
    pub fn attention(&self) -> u64 {
        self.projections + self.scores + self.softmax
    }
}

pub fn layer_macs(
    tokens: usize,
    dim: usize,
    heads: usize,
    shares: bool,
    convention: CostConvention,
) -> LayerMacs {
    let (n, d, h) = (tokens as u64, dim as u64, heads as u64);
    let score_factor = match convention {
        CostConvention::MultiplyAccumulate => 1,
        CostConvention::PairedScoreOps => 2,
    };
    let product = score_factor * n * n * d;
    let (proj, scores, softmax) = if shares {
        (2 * n * d * d, product, 0)
    } else {
        (4 * n * d * d, 2 * product, n * n * h)
    };
    LayerMacs {
        projections: proj,
        scores,
        softmax,
        mlp: 2 * MLP_RATIO as u64 * n * d * d,
        norms: 2 * NORM_MACS_PER_ELEMENT * n * d,
    }
}

/// Parameter split of one realized layer.
pub fn layer_params(dim: usize, shares: bool, biases: bool) -> (u64, u64, u64) {
    let d = dim as u64;
    let b = u64::from(biases);
    let hidden = MLP_RATIO as u64 * d;
    let projections = if shares { 2 } else { 4 };
    let attention = projections * (d * d + b * d);
    let mlp = 2 * d * hidden + b * (hidden + d);
    let norms = 4 * d;
    (attention, mlp, norms)
}

pub fn count_flops(g: &Genotype) -> Result<FlopsReport> {
    count_flops_with(g, CostConvention::default())
}

pub fn count_flops_with(g: &Genotype, convention: CostConvention) -> Result<FlopsReport> {
    let violations = validate(g);
    if !violations.is_empty() {
        return Err(Error::InvalidGenotype(violations));
    }
    Ok(FlopsReport::from_entries(
        convention,
        cost_entries(g, convention, true),
    ))
}

fn cost_entries(g: &Genotype, convention: CostConvention, biases: bool) -> Vec<CostEntry> {
    let b = u64::from(biases);
    let p = &g.patch;
    let first = &g.stages[0];
    let mut entries = Vec::new();

    let mut embed = CostEntry::new("patch_embed".into(), EntryKind::PatchEmbed);
    let d0 = first.dim as u64;
    embed.other_macs = (p.patch_tokens() * p.patch_len()) as u64 * d0;
    embed.params_other = p.patch_len() as u64 * d0
        + b * d0
        + u64::from(p.cls) * d0
        + first.tokens as u64 * d0;
    entries.push(embed);

    for (s, st) in g.stages.iter().enumerate() {
        if s > 0 {
            let prev = &g.stages[s - 1];
            let (din, dout) = (prev.dim as u64, st.dim as u64);
            let mut pool = CostEntry::new(format!("pool{s}"), EntryKind::Pool);
            pool.other_macs = match g.pooling_mode {
                // conv k=3 s=1 over every input position, then max over 3-wide windows
                PoolingMode::OneD => prev.tokens as u64 * 3 * din * dout + st.tokens as u64 * 3 * dout,
                PoolingMode::TwoD => st.tokens as u64 * 9 * din * dout,
            };
            let taps = match g.pooling_mode {
                PoolingMode::OneD => 3,
                PoolingMode::TwoD => 9,
            };
            pool.params_other = taps * din * dout + b * dout + st.tokens as u64 * dout;
            entries.push(pool);
        }
        for (i, shares) in st.share_flags().into_iter().enumerate() {
            let kind = if shares {
                EntryKind::SharedLayer
            } else {
                EntryKind::Layer
            };
            let mut e = CostEntry::new(format!("s{s}.l{i}"), kind);
            let m = layer_macs(st.tokens, st.dim, st.heads, shares, convention);
            e.attention_macs = m.attention();
            e.mlp_macs = m.mlp;
            e.other_macs = m.norms;
            let (pa, pm, pn) = layer_params(st.dim, shares, biases);
            e.params_attention = pa;
            e.params_mlp = pm;
            e.params_other = pn;
            entries.push(e);
        }
    }

    let last = g.stages.last().expect("validated genotype has stages");
    let (n, d, c) = (last.tokens as u64, last.dim as u64, g.num_classes as u64);
    let mut head = CostEntry::new("head".into(), EntryKind::Head);
    let pooled = match g.pooling_mode {
        PoolingMode::OneD => 0,
        PoolingMode::TwoD => n * d,
    };
    head.other_macs = NORM_MACS_PER_ELEMENT * n * d + pooled + d * c;
    head.params_other = 2 * d + d * c + b * c;
    entries.push(head);
    entries
}

/// Parameter counts per component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ParamCounts {
    pub attention: u64,
    pub mlp: u64,
    pub norms: u64,
    pub embedding: u64,
    pub pools: u64,
    pub head: u64,
    pub total: u64,
}

pub fn count_params(g: &Genotype, biases: bool) -> Result<ParamCounts> {
    let violations = validate(g);
    if !violations.is_empty() {
        return Err(Error::InvalidGenotype(violations));
    }
    let mut c = ParamCounts::default();
    for e in cost_entries(g, CostConvention::default(), biases) {
        match e.kind {
            EntryKind::PatchEmbed => c.embedding += e.params_other,
            EntryKind::Pool => c.pools += e.params_other,
            EntryKind::Head => c.head += e.params_other,
            EntryKind::Layer | EntryKind::SharedLayer => {
                c.attention += e.params_attention;
                c.mlp += e.params_mlp;
                c.norms += e.params_other;
            }
        }
    }
    c.total = c.attention + c.mlp + c.norms + c.embedding + c.pools + c.head;
    Ok(c)
}

/// Attention's share of a layer's matrix-product cost, `(d + N) / (3d + N)`.
///
/// This is `(4Nd² + 4N²d) / (12Nd² + 4N²d)`, i.e. the [`CostConvention::PairedScoreOps`]
/// accounting of projections, score products, and MLP.
pub fn attention_compute_share(tokens: u64, dim: u64) -> Ratio<u64> {
    assert!(tokens > 0 && dim > 0, "tokens and dim must be positive");
    Ratio::new(dim + tokens, 3 * dim + tokens)
}
