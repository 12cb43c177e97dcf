//! Spatial-spectral diffusion pretraining with contrastive learning,
//! adaptive timestep selection by spectral angle, and multi-timestep feature
//! fusion for hyperspectral image classification — sized for CPU-scale
//! experiments on synthetic or container-packed scenes.

pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod elem;
pub mod evaluation;
pub mod nn;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod timesteps;

pub use data::{HsiCube, Instance, LabelRaster, SampleSplit, SplitStrategy, SynthSpec};
pub use diffusion::{NoisePredictor, NoiseSchedule, NoisyInstance};
pub use elem::Elem;
