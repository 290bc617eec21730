//! The toy conditional latent diffusion transformer.

pub mod checkpoint;
pub mod config;
pub mod draws;
pub mod loss;
pub mod network;
pub mod params;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointMeta};
pub use config::ModelConfig;
pub use draws::{
    seeded_stratified, seeded_uniform, stratified_draws, uniform_draws, Draw, T_MARGIN,
};
pub use loss::{diffusion_loss, loss_and_gradient_sum, loss_gradient, loss_gradient_by_name};
pub use network::Transformer;
pub use params::{section_specs, LayerGroup, ModelParams};
pub use sampler::{sample, GENERATED_ID};
pub use schedule::{diffuse, noise_schedule, v_target};
pub use train::{train, TrainConfig};
