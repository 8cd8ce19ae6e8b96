//! Toy decoder-only transformer: vocabulary, model, pretraining, decoding,
//! and bit-exact checkpoints.

pub mod checkpoint;
pub mod model;
pub mod vocab;

pub use model::{
    pretrain, teacher_forced_accuracy, ForwardRecord, HookSpec, ModelConfig, PlainForward,
    PretrainConfig, StagedModel, TinyModel,
};
pub use vocab::Vocab;
