//! Adjacent-layer attention-map correlation reports.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{attention_correlation, Ctx, VitModel};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    /// Realized layer indices (network order) of the pair.
    pub layers: (usize, usize),
    pub stages: (usize, usize),
    /// Whether the second layer reuses the first layer's maps.
    pub shared: bool,
    /// Mean over heads and inputs; `None` across a pooling boundary.
    pub correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub inputs: usize,
    pub rows: Vec<CorrelationRow>,
}

/// Correlates each pair of consecutive realized layers over `images`.
pub fn correlate(model: &VitModel, images: &[Tensor]) -> Result<CorrelationReport> {
    let plans = model.genotype.layers();
    if plans.len() < 2 {
        return Err(Error::Contract(format!(
            "correlation needs at least two layers, model has {}",
            plans.len()
        )));
    }
    if images.is_empty() {
        return Err(Error::Contract("correlation needs at least one input".into()));
    }
    let mut sums = vec![0.0; plans.len() - 1];
    for img in images {
        let tape = Tape::new();
        let ctx = Ctx::frozen(&tape, &model.store);
        let (_, trace) = model.forward_traced(&ctx, img)?;
        let maps: Vec<_> = trace.iter().map(|m| m.to_values()).collect();
        for (i, pair) in plans.windows(2).enumerate() {
            if pair[0].stage == pair[1].stage {
                let per_head = attention_correlation(&maps[i], &maps[i + 1])?;
                sums[i] += per_head.iter().sum::<f64>() / per_head.len() as f64;
            }
        }
    }
    let rows = plans
        .windows(2)
        .enumerate()
        .map(|(i, pair)| {
            let same = pair[0].stage == pair[1].stage;
            CorrelationRow {
                layers: (i, i + 1),
                stages: (pair[0].stage, pair[1].stage),
                shared: same && pair[1].shares,
                correlation: same.then(|| sums[i] / images.len() as f64),
            }
        })
        .collect();
    Ok(CorrelationReport {
        inputs: images.len(),
        rows,
    })
}

impl CorrelationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:<8} {:<7} {:>12}\n", "layers", "stages", "shared", "correlation");
        for r in &self.rows {
            let c = r.correlation.map_or("N/A".to_string(), |c| format!("{c:.6}"));
            out += &format!(
                "{:<10} {:<8} {:<7} {:>12}\n",
                format!("{}-{}", r.layers.0, r.layers.1),
                format!("{}-{}", r.stages.0, r.stages.1),
                if r.shared { "yes" } else { "no" },
                c
            );
        }
        out
    }
}
