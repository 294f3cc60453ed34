//! Supernet, single-path training, and FLOPS-constrained evolutionary search.

mod search;
mod supernet;
mod train;

pub use search::{evolutionary_search, exhaustive_search, rank_order, Candidate, SearchConfig, SearchOutcome};
pub use supernet::{sample_path, Path, SubnetView, Supernet, SupernetCell};
pub use train::{
    accuracy, argmax, batch_gradients, cosine_lr, evaluate_subnet, predict, Examples, OptimConfig, RngState, Sgd,
    StepRecord, TrainConfig, Trainer,
};

use crate::arch::{toy_patch, CellChoice, Genotype, PoolingMode, StageSpec, TOY_DIMS, TOY_HEADS, TOY_TOKENS};

/// Toy-scale supernet schedule with `cells` cells in each of the three stages.
pub fn toy_schedule(cells: usize) -> Genotype {
    let stages = (0..3)
        .map(|i| StageSpec::with_cells(TOY_TOKENS[i], TOY_DIMS[i], TOY_HEADS[i], vec![CellChoice::Basic; cells]))
        .collect();
    Genotype::new(PoolingMode::OneD, toy_patch(), stages, 10)
}

/// The four-cell space (two stages of two cells) small enough to enumerate.
pub fn reduced_schedule() -> Genotype {
    let stages = (0..2)
        .map(|i| StageSpec::with_cells(TOY_TOKENS[i], TOY_DIMS[i], TOY_HEADS[i], vec![CellChoice::Basic; 2]))
        .collect();
    Genotype::new(PoolingMode::OneD, toy_patch(), stages, 10)
}
