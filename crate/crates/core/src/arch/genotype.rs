use serde::{Deserialize, Serialize};

use crate::tensor::window_out_len;

pub const GENOTYPE_VERSION: u32 = 1;

/// Hidden width of every MLP relative to the token dimension.
pub const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PoolingMode {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    /// Square input side in pixels.
    pub image: usize,
    pub patch: usize,
    pub channels: usize,
    /// Prepend a CLS token (1D mode only).
    pub cls: bool,
}

impl PatchSpec {
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    pub fn patch_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn initial_tokens(&self) -> usize {
        self.patch_tokens() + usize::from(self.cls)
    }

    pub fn patch_len(&self) -> usize {
        self.patch * self.patch * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CellChoice {
    #[serde(rename = "B")]
    Basic,
    #[serde(rename = "S")]
    SharedPair,
    #[serde(rename = "I")]
    Identity,
}

impl CellChoice {
    pub const ALL: [CellChoice; 3] = [CellChoice::Basic, CellChoice::SharedPair, CellChoice::Identity];

    /// Realized layers as share flags: Basic is one independent layer, SharedPair an
    /// independent layer followed by one that reuses its maps.
    pub fn layers(self) -> &'static [bool] {
        match self {
            CellChoice::Basic => &[false],
            CellChoice::SharedPair => &[false, true],
            CellChoice::Identity => &[],
        }
    }

    pub fn symbol(self) -> char {
        match self {
            CellChoice::Basic => 'B',
            CellChoice::SharedPair => 'S',
            CellChoice::Identity => 'I',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            'B' => Some(CellChoice::Basic),
            'S' => Some(CellChoice::SharedPair),
            'I' => Some(CellChoice::Identity),
            _ => None,
        }
    }
}

/// Layers of one stage: either supernet-style cells, or an explicit list of
/// per-layer share flags for layouts cells cannot express (e.g. three layers on one map).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StageLayout {
    Cells { cells: Vec<CellChoice> },
    Layers { share: Vec<bool> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(flatten)]
    pub layout: StageLayout,
}

impl StageSpec {
    pub fn with_cells(tokens: usize, dim: usize, heads: usize, cells: Vec<CellChoice>) -> Self {
        Self {
            tokens,
            dim,
            heads,
            layout: StageLayout::Cells { cells },
        }
    }

    pub fn with_share_flags(tokens: usize, dim: usize, heads: usize, share: Vec<bool>) -> Self {
        Self {
            tokens,
            dim,
            heads,
            layout: StageLayout::Layers { share },
        }
    }

    pub fn share_flags(&self) -> Vec<bool> {
        match &self.layout {
            StageLayout::Cells { cells } => {
                cells.iter().flat_map(|c| c.layers().iter().copied()).collect()
            }
            StageLayout::Layers { share } => share.clone(),
        }
    }

    pub fn depth(&self) -> usize {
        match &self.layout {
            StageLayout::Cells { cells } => cells.iter().map(|c| c.layers().len()).sum(),
            StageLayout::Layers { share } => share.len(),
        }
    }

    pub fn cells(&self) -> Option<&[CellChoice]> {
        match &self.layout {
            StageLayout::Cells { cells } => Some(cells),
            StageLayout::Layers { .. } => None,
        }
    }
}

/// One realized transformer layer of a genotype.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerPlan {
    pub stage: usize,
    pub index: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
    pub shares: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Genotype {
    pub version: u32,
    pub pooling_mode: PoolingMode,
    pub patch: PatchSpec,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
}

impl Genotype {
    pub fn new(
        pooling_mode: PoolingMode,
        patch: PatchSpec,
        stages: Vec<StageSpec>,
        num_classes: usize,
    ) -> Self {
        Self {
            version: GENOTYPE_VERSION,
            pooling_mode,
            patch,
            stages,
            num_classes,
        }
    }

    pub fn depth(&self) -> usize {
        self.stages.iter().map(StageSpec::depth).sum()
    }

    pub fn layers(&self) -> Vec<LayerPlan> {
        let mut out = Vec::new();
        for (s, st) in self.stages.iter().enumerate() {
            for (i, shares) in st.share_flags().into_iter().enumerate() {
                out.push(LayerPlan {
                    stage: s,
                    index: i,
                    tokens: st.tokens,
                    dim: st.dim,
                    heads: st.heads,
                    shares,
                });
            }
        }
        out
    }

    /// All cell choices in stage-major order; `None` if any stage uses explicit share flags.
    pub fn cell_choices(&self) -> Option<Vec<CellChoice>> {
        let mut out = Vec::new();
        for st in &self.stages {
            out.extend_from_slice(st.cells()?);
        }
        Some(out)
    }

    /// Side length of the token grid at `stage` (2D mode).
    pub fn grid_side(&self, stage: usize) -> usize {
        self.patch.grid() >> stage
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("genotype serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Compact cell string like `BBSI|BSII`, stages separated by `|`.
    pub fn cell_string(&self) -> String {
        self.stages
            .iter()
            .map(|st| match &st.layout {
                StageLayout::Cells { cells } => cells.iter().map(|c| c.symbol()).collect(),
                StageLayout::Layers { share } => share
                    .iter()
                    .map(|&s| if s { 's' } else { 'a' })
                    .collect::<String>(),
            })
            .collect::<Vec<String>>()
            .join("|")
    }
}

/// Token count after one pooling step, or `None` if the input cannot be pooled.
pub fn pooled_tokens(mode: PoolingMode, tokens: usize) -> Option<usize> {
    match mode {
        PoolingMode::OneD => (tokens >= 2).then(|| window_out_len(tokens, 3, 2, 1).ok())?,
        PoolingMode::TwoD => {
            let side = (tokens as f64).sqrt().round() as usize;
            (side * side == tokens && side.is_multiple_of(2) && side > 0).then_some((side / 2) * (side / 2))
        }
    }
}
