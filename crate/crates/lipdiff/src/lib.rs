//! Audio-driven talking-head synthesis with a conditional latent diffusion model.
//!
//! The pipeline trains a denoising network in the latent space of a frozen
//! convolutional autoencoder. Each generated frame is conditioned on a
//! smoothed audio feature, a reference frame of the target identity, a
//! mouth-masked pose frame, and masked facial landmarks. Inference runs
//! DDIM steps with an optional progressive reference chain for temporal
//! coherence.
//!
//! The numeric core is generic over the scalar type (`f32` for training
//! speed, `f64` for gradient verification); see [`Scalar`] and the [`Real`]
//! alias.

pub mod audio;
pub mod autoencoder;
pub mod ckpt;
pub mod config;
pub mod datakit;
pub mod denoiser;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod sampler;
pub mod scalar;
pub mod schedule;
pub mod trainer;
pub mod types;
pub mod visual;
pub mod wav;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};
pub use types::{
    LandmarkFeature, LandmarkSet, LatentCondition, LatentImage, PixelImage, SmoothedAudioFeature,
    VisualCondition,
};

/// Dimension of the smoothed audio feature vector.
pub const AUDIO_FEATURE_DIM: usize = 64;
/// Dimension of the landmark feature vector.
pub const LANDMARK_FEATURE_DIM: usize = 64;
/// Dimension of the latent condition fed to cross-attention (audio + landmarks).
pub const CONTEXT_DIM: usize = AUDIO_FEATURE_DIM + LANDMARK_FEATURE_DIM;
/// Number of facial landmarks per frame (iBUG 68-point convention).
pub const NUM_LANDMARKS: usize = 68;
/// Landmark indices covering the mouth (outer + inner lips).
pub const MOUTH_LANDMARKS: std::ops::Range<usize> = 48..68;
/// Minimum temporal distance between a training target and its reference frame.
pub const REFERENCE_MIN_GAP: usize = 60;
