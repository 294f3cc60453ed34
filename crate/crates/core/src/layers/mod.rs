//! Transformer building blocks and genotype-driven models.

mod attention;
mod basic;
mod correlation;
mod embed;
mod encoder;
mod head;
mod model;
mod params;
mod pool;

pub use attention::{scaled_dot_product_attention, AttentionMaps, HeadMaps, MultiHeadAttention};
pub use basic::{LayerNorm, Linear, LAYER_NORM_EPS};
pub use correlation::attention_correlation;
pub use embed::{extract_patches, PatchEmbed, PatchEmbedConfig};
pub use encoder::{EncoderLayer, EncoderLayerConfig};
pub use head::{ClassifierHead, HeadMode};
pub(crate) use model::build_with;
pub use model::{Backbone, ImageClassifier, VitModel};
pub use params::{Ctx, ParamId, ParamStore};
pub use pool::{TokenPool, TokenPool1d, TokenPool2d};
