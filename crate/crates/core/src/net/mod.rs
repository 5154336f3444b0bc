//! The denoising network: architecture config, parameters and forward passes.

pub mod config;
pub mod model;
pub mod params;

pub use config::{group_count, ArchConfig, ContextEncoding, ContextSpec};
pub use model::{
    condition_channels, context_channels, denoise_channels, denoise_forward, denoise_on_tape, embed_context, embed_contexts_on_tape, propagate_on_tape,
    propagate_state, stack_channels, step_embedding, DenoiseOutput, DenoiseVars, HiddenState,
};
pub use params::ModelParams;
