use super::attention::AttentionMaps;
use crate::error::{Error, Result};

/// Pearson correlation of the flattened maps, per head.
pub fn attention_correlation(a: &AttentionMaps, b: &AttentionMaps) -> Result<Vec<f64>> {
    if a.heads() != b.heads() || a.tokens() != b.tokens() {
        return Err(Error::Contract(format!(
            "cannot correlate {}×{n1}×{n1} with {}×{n2}×{n2} maps",
            a.heads(),
            b.heads(),
            n1 = a.tokens(),
            n2 = b.tokens()
        )));
    }
    (0..a.heads())
        .map(|h| pearson(a.head(h), b.head(h)).ok_or_else(|| {
            Error::UndefinedCorrelation(format!("head {h} has a constant map"))
        }))
        .collect()
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    // sqrt(s * s) == s exactly, so identical maps give exactly 1
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}
