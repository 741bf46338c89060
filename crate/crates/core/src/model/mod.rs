//! Decoder-only multimodal transformer whose latent slots take the model's
//! own post-norm hidden states as input embeddings.

mod checkpoint;
mod config;
mod decode;
mod layout;
mod net;
mod tokenizer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use decode::{argmax_lowest, decode, scaled_log_softmax, DecodeMode, DecodeOptions, DecodeStep, DecodeTrace};
pub use layout::{ElementKind, LossMask, PatchGrid, SequenceElement, SequenceLayout};
pub use net::{
    init_parameters, latent_feedback, param_layout, KvCache, LatentSource, LayerIndex, Model, Net, ParamIndex, RunOutput,
};
pub use tokenizer::{tok, Tokenizer};

#[cfg(test)]
mod tests;
