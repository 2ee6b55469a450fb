//! The segmentation network and its parameters.

mod checkpoint;
mod network;
mod params;
pub mod patches;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use network::{
    task_token, transformer_block, Forward, ForwardOutput, Model, Phase, SkipAddition, TokenSet, BN_EPS, BN_MOMENTUM, LN_EPS,
};
pub use params::{batchnorm_layers, conv_spec, count_params, layout, BoundParams, Init, ParamSpec, ParameterStore, BLOCKS_PER_LEVEL};
