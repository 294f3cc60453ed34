//! Architecture descriptions, validation, and the analytical cost model.

mod cost;
mod genotype;
pub mod presets;
mod space;
mod validate;

pub use cost::{
    attention_compute_share, count_flops, count_flops_with, count_params, layer_macs, layer_params,
    CostConvention, CostEntry, CostTotals, EntryKind, FlopsReport, LayerMacs, ParamCounts,
    NORM_MACS_PER_ELEMENT,
};
pub use genotype::{
    pooled_tokens, CellChoice, Genotype, LayerPlan, PatchSpec, PoolingMode, StageLayout, StageSpec,
    GENOTYPE_VERSION, MLP_RATIO,
};
pub use presets::{canonical_genotypes, preset, toy_patch, PRESET_NAMES, TOY_DIMS, TOY_HEADS, TOY_TOKENS};
pub use space::{search_space_size, supernet_cardinality, SearchSpaceParams};
pub use validate::{validate, validate_with, ValidationPolicy, Violation, ViolationCode};
