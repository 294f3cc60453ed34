//! Named reference schedules.
//!
//! The staged schedules use four Basic cells per stage wherever the searched
//! cell choices are unpublished; with that depth the cost model lands on the
//! reported budgets.

use super::genotype::{CellChoice, Genotype, PatchSpec, PoolingMode, StageSpec};

pub const PRESET_NAMES: &[&str] = &[
    "deit-tiny",
    "deit-small",
    "dimension1",
    "dimension2",
    "tiny8",
    "tiny16",
    "small8",
    "small16",
    "sharing2",
    "sharing3",
    "toy",
    "toy-sharing2",
];

fn imagenet(patch: usize) -> PatchSpec {
    PatchSpec {
        image: 224,
        patch,
        channels: 3,
        cls: true,
    }
}

fn staged(patch: PatchSpec, tokens: [usize; 3], dims: [usize; 3], heads: [usize; 3], layers: [usize; 3], classes: usize) -> Genotype {
    let stages = (0..3)
        .map(|i| StageSpec::with_cells(tokens[i], dims[i], heads[i], vec![CellChoice::Basic; layers[i]]))
        .collect();
    Genotype::new(PoolingMode::OneD, patch, stages, classes)
}

fn single_stage(stage: StageSpec) -> Genotype {
    Genotype::new(PoolingMode::OneD, imagenet(16), vec![stage], 1000)
}

/// Toy patch layout: 32×32 RGB, patch 4, CLS token → 65 tokens.
pub fn toy_patch() -> PatchSpec {
    PatchSpec {
        image: 32,
        patch: 4,
        channels: 3,
        cls: true,
    }
}

pub const TOY_TOKENS: [usize; 3] = [65, 33, 17];
pub const TOY_DIMS: [usize; 3] = [16, 24, 32];
pub const TOY_HEADS: [usize; 3] = [2, 2, 4];

pub fn preset(name: &str) -> Option<Genotype> {
    let g = match name {
        "deit-tiny" => single_stage(StageSpec::with_cells(197, 192, 3, vec![CellChoice::Basic; 12])),
        "deit-small" => single_stage(StageSpec::with_cells(197, 384, 6, vec![CellChoice::Basic; 12])),
        "dimension1" => staged(imagenet(16), [197, 99, 50], [192, 192, 192], [3, 3, 3], [4, 8, 20], 1000),
        "dimension2" => staged(imagenet(16), [197, 99, 50], [192, 256, 384], [3, 4, 6], [4, 4, 4], 1000),
        "tiny8" => staged(imagenet(8), [785, 393, 197], [64, 144, 192], [1, 3, 3], [4, 4, 4], 1000),
        "tiny16" => staged(imagenet(16), [197, 99, 50], [192, 288, 384], [3, 6, 6], [4, 4, 4], 1000),
        "small8" => staged(imagenet(8), [785, 393, 197], [144, 256, 384], [3, 4, 6], [4, 4, 4], 1000),
        "small16" => staged(imagenet(16), [197, 99, 50], [288, 512, 768], [6, 8, 12], [4, 4, 4], 1000),
        "sharing2" => single_stage(StageSpec::with_cells(197, 192, 3, vec![CellChoice::SharedPair; 6])),
        "sharing3" => single_stage(StageSpec::with_share_flags(197, 192, 3, [false, true, true].repeat(4)),
        ),
        "toy" => staged(toy_patch(), TOY_TOKENS, TOY_DIMS, TOY_HEADS, [2, 2, 2], 10),
        "toy-sharing2" => {
            let stages = (0..3)
                .map(|i| StageSpec::with_cells(TOY_TOKENS[i], TOY_DIMS[i], TOY_HEADS[i], vec![CellChoice::SharedPair]))
                .collect();
            Genotype::new(PoolingMode::OneD, toy_patch(), stages, 10)
        }
        _ => return None,
    };
    Some(g)
}

pub fn canonical_genotypes() -> Vec<(&'static str, Genotype)> {
    PRESET_NAMES
        .iter()
        .map(|&n| (n, preset(n).expect("listed preset exists")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::validate;

    #[test]
    fn every_preset_validates() {
        for (name, g) in canonical_genotypes() {
            assert!(validate(&g).is_empty(), "{name}: {:?}", validate(&g));
        }
    }

    #[test]
    fn table_schedules() {
        let g = preset("tiny16").unwrap();
        let dims: Vec<_> = g.stages.iter().map(|s| s.dim).collect();
        let heads: Vec<_> = g.stages.iter().map(|s| s.heads).collect();
        let tokens: Vec<_> = g.stages.iter().map(|s| s.tokens).collect();
        assert_eq!((dims, heads, tokens), (vec![192, 288, 384], vec![3, 6, 6], vec![197, 99, 50]));

        let g = preset("small8").unwrap();
        let dims: Vec<_> = g.stages.iter().map(|s| s.dim).collect();
        let heads: Vec<_> = g.stages.iter().map(|s| s.heads).collect();
        let tokens: Vec<_> = g.stages.iter().map(|s| s.tokens).collect();
        assert_eq!((dims, heads, tokens), (vec![144, 256, 384], vec![3, 4, 6], vec![785, 393, 197]));

        let g = preset("dimension1").unwrap();
        let depth: Vec<_> = g.stages.iter().map(|s| s.depth()).collect();
        assert_eq!(depth, vec![4, 8, 20]);
        assert!(g.stages.iter().all(|s| s.dim == 192));
    }

    #[test]
    fn sharing_variants_keep_depth() {
        assert_eq!(preset("sharing2").unwrap().depth(), 12);
        let g = preset("sharing3").unwrap();
        assert_eq!(g.depth(), 12);
        assert_eq!(g.layers().iter().filter(|l| l.shares).count(), 8);
        assert_eq!(preset("toy").unwrap().depth(), preset("toy-sharing2").unwrap().depth());
    }
}
