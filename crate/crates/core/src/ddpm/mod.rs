//! Diffusion forward process, noise schedule and the ε-prediction U-Net.

mod forward;
mod schedule;
mod train;
mod unet;

pub use forward::{q_sample, q_sample_with_alpha_bar, q_step, q_step_with_beta, standard_normal};
pub use schedule::{NoiseSchedule, ScheduleConfig};
pub use train::{
    denoising_loss, load_checkpoint, save_checkpoint, train_denoiser, DdpmCheckpoint, DdpmTrainConfig,
    DdpmTrainHistory,
};
pub use unet::{timestep_embedding, UNet, UNetConfig, UNetOutput};
