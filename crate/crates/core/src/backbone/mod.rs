//! Toy decoder-only language model with hidden-state injection hooks.

mod model;
pub mod pretrain;

pub use model::{
    argmax, generate, last_rows, split_rows, Backbone, BackboneConfig, ForwardOutput, GenerateOptions,
    HiddenStates, Hook, Injection, Sites, StepHook, Train, PREFIX,
};
pub use pretrain::{
    lm_loss, pretrain, pretrained_or_train, sharded_step, LmExample, Packed, PretrainConfig, StepLoss,
};
