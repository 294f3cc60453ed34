use num_bigint::BigUint;
use serde::{Deserialize, Serialize};

/// Per-layer choice counts of the unreduced pooling/sharing search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceParams {
    pub token_choices: u32,
    pub dim_choices: u32,
    pub share_choices: u32,
    pub layers: u32,
}

/// Exact `(token_choices · dim_choices · share_choices) ^ layers`.
pub fn search_space_size(p: &SearchSpaceParams) -> BigUint {
    let per_layer =
        BigUint::from(p.token_choices) * BigUint::from(p.dim_choices) * BigUint::from(p.share_choices);
    per_layer.pow(p.layers)
}

/// Number of distinct paths through a supernet with `cells` three-way cells.
pub fn supernet_cardinality(cells: u32) -> BigUint {
    BigUint::from(3u32).pow(cells)
}
