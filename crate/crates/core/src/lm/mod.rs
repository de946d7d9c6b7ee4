//! The toy decoder-only language model and its data.

mod config;
mod corpus;
mod data;
mod model;
mod params;
mod pretrain;
mod size;
mod taps;

pub use config::{LayerId, LinearKind, ModelConfig, BYTE_VOCAB};
pub use corpus::synthesize_corpus;
pub use data::{ingest_corpus, DataConfig, Split, TokenDataset};
pub use model::{
    batch_loss_and_grad, block_logits, block_loss_and_grad, block_nll, build_block_graph, forward_nll, BlockGraph,
    TapHook, Trainable,
};
pub(crate) use params::layout;
pub use params::{ParamRole, Parameters};
pub use pretrain::{pretrain_base, PretrainConfig, PretrainReport};
pub use size::{quantized_weight_bytes, weight_size_bytes};
pub use taps::{capture_layer_taps, capture_taps, layer_groups, LayerTap, Propagation, SequentialTaps};
