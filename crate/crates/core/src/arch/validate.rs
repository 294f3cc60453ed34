use serde::Serialize;

use super::genotype::{pooled_tokens, Genotype, PoolingMode, GENOTYPE_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationCode {
    UnsupportedVersion,
    NoStages,
    ZeroClasses,
    BadPatch,
    ClsIn2d,
    HeadsZero,
    DimNotDivisible,
    TokensNotDecreasing,
    NondecreasingDim,
    TokenCountMismatch,
    ShareWithoutSource,
    LastLayerShared,
}

impl ViolationCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ViolationCode::UnsupportedVersion => "UNSUPPORTED_VERSION",
            ViolationCode::NoStages => "NO_STAGES",
            ViolationCode::ZeroClasses => "ZERO_CLASSES",
            ViolationCode::BadPatch => "BAD_PATCH",
            ViolationCode::ClsIn2d => "CLS_IN_2D",
            ViolationCode::HeadsZero => "HEADS_ZERO",
            ViolationCode::DimNotDivisible => "DIM_NOT_DIVISIBLE",
            ViolationCode::TokensNotDecreasing => "TOKENS_NOT_DECREASING",
            ViolationCode::NondecreasingDim => "NONDECREASING_DIM",
            ViolationCode::TokenCountMismatch => "TOKEN_COUNT_MISMATCH",
            ViolationCode::ShareWithoutSource => "SHARE_WITHOUT_SOURCE",
            ViolationCode::LastLayerShared => "LAST_LAYER_SHARED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub code: ViolationCode,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ValidationPolicy {
    /// Reject genotypes whose final realized layer reuses attention maps.
    pub last_layer_independent: bool,
}

pub fn validate(g: &Genotype) -> Vec<Violation> {
    validate_with(g, ValidationPolicy::default())
}

/// Every rule the genotype breaks, in a stable order.
pub fn validate_with(g: &Genotype, policy: ValidationPolicy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |code: ViolationCode, message: String| out.push(Violation { code, message });

    if g.version != GENOTYPE_VERSION {
        push(
            ViolationCode::UnsupportedVersion,
            format!("version {} (expected {GENOTYPE_VERSION})", g.version),
        );
    }
    if g.num_classes == 0 {
        push(ViolationCode::ZeroClasses, "num_classes must be positive".into());
    }
    let p = &g.patch;
    let patch_ok = p.image > 0 && p.patch > 0 && p.channels > 0 && p.image.is_multiple_of(p.patch);
    if !patch_ok {
        push(
            ViolationCode::BadPatch,
            format!(
                "image {} must be a positive multiple of patch {} with channels > 0",
                p.image, p.patch
            ),
        );
    }
    if g.pooling_mode == PoolingMode::TwoD && p.cls {
        push(ViolationCode::ClsIn2d, "2D pooling keeps no CLS token".into());
    }
    if g.stages.is_empty() {
        push(ViolationCode::NoStages, "at least one stage required".into());
    }

    for (i, st) in g.stages.iter().enumerate() {
        if st.heads == 0 {
            push(ViolationCode::HeadsZero, format!("stage {i}: heads must be positive"));
        } else if st.dim == 0 || st.dim % st.heads != 0 {
            push(
                ViolationCode::DimNotDivisible,
                format!("stage {i}: dim {} not divisible by {} heads", st.dim, st.heads),
            );
        }
        if st.share_flags().first() == Some(&true) {
            push(
                ViolationCode::ShareWithoutSource,
                format!("stage {i}: first layer has no preceding map in its stage"),
            );
        }
    }

    for (i, pair) in g.stages.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        if b.tokens >= a.tokens {
            push(
                ViolationCode::TokensNotDecreasing,
                format!("stage {}: tokens {} -> {}", i + 1, a.tokens, b.tokens),
            );
        }
        if b.dim < a.dim {
            push(
                ViolationCode::NondecreasingDim,
                format!("stage {}: dim {} -> {}", i + 1, a.dim, b.dim),
            );
        }
    }

    if patch_ok && !(g.pooling_mode == PoolingMode::TwoD && p.cls) {
        let mut expected = Some(p.initial_tokens());
        for (i, st) in g.stages.iter().enumerate() {
            if i > 0 {
                expected = expected.and_then(|t| pooled_tokens(g.pooling_mode, t));
            }
            if expected != Some(st.tokens) {
                let want = expected.map_or("unpoolable".to_string(), |t| t.to_string());
                push(
                    ViolationCode::TokenCountMismatch,
                    format!("stage {i}: tokens {} but the pooling schedule gives {want}", st.tokens),
                );
                expected = Some(st.tokens);
            }
        }
    }

    if policy.last_layer_independent && g.layers().last().is_some_and(|l| l.shares) {
        push(
            ViolationCode::LastLayerShared,
            "the final layer reuses attention maps".into(),
        );
    }
    out
}
