//! Joint training of the denoiser, the audio temporal filter, and the
//! landmark encoder over a frozen latent space.
//!
//! Each step draws (target, reference, t, eps) per sample, forms the noisy
//! latent with the closed-form forward process, assembles the condition
//! set, and minimizes the mean squared error between the drawn and the
//! predicted noise. The autoencoder never receives gradients: its latents
//! are baked into the prepared dataset before training starts.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::audio::{
    frame_features, temporal_filter_graph, FeatureBackend, FrameFeature, TemporalFilterParams,
    FILTER_HALF_WINDOW, NEIGHBORHOOD,
};
use crate::autoencoder::{encode_batch, AutoencoderParams};
use crate::datakit::LoadedVideo;
use crate::denoiser::{
    denoise_eps_graph, init_denoiser, time_embedding_batch, DenoiserConfig, DenoiserParams,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::{AdamConfig, AdamState, GradStore};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::schedule::{q_sample, NoiseSchedule};
use crate::types::LandmarkSet;
use crate::visual::{mask_image, mask_landmarks, mouth_mask_region, select_reference};
use crate::REFERENCE_MIN_GAP;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub total_steps: usize,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 disables checkpoints.
    pub ckpt_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 8,
            lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            total_steps: 10_000,
            seed: 0,
            ckpt_every: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

/// The three jointly optimized parameter groups.
#[derive(Clone, Debug)]
pub struct ModelBundle<T: Scalar> {
    pub denoiser: DenoiserParams<T>,
    pub filter: TemporalFilterParams<T>,
    pub landmark: crate::visual::LandmarkEncoderParams<T>,
}

impl<T: Scalar> ModelBundle<T> {
    pub fn init(config: &DenoiserConfig, feature_dim: usize, rng: &mut Prng) -> Result<Self> {
        Ok(ModelBundle {
            denoiser: init_denoiser(config, rng)?,
            filter: TemporalFilterParams::init(feature_dim, rng),
            landmark: crate::visual::LandmarkEncoderParams::init(rng),
        })
    }
}

/// One video with everything the trainer needs precomputed over the frozen
/// latent space.
#[derive(Debug)]
pub struct PreparedVideo<T: Scalar> {
    pub identity: String,
    /// Scaled latent of each frame, `[1, 3, h, w]`.
    pub latents: Vec<ArrayD<T>>,
    /// Scaled latent of each mouth-masked frame.
    pub masked_latents: Vec<ArrayD<T>>,
    /// Base audio feature map per frame.
    pub frame_features: Vec<FrameFeature<T>>,
    /// Mouth-masked landmarks per frame.
    pub masked_landmarks: Vec<LandmarkSet<T>>,
}

impl<T: Scalar> PreparedVideo<T> {
    pub fn frame_count(&self) -> usize {
        self.latents.len()
    }
}

#[derive(Debug)]
pub struct PreparedDataset<T: Scalar> {
    pub videos: Vec<PreparedVideo<T>>,
    pub latent_h: usize,
    pub latent_w: usize,
    pub feature_len: usize,
}

impl<T: Scalar> PreparedDataset<T> {
    pub fn num_frames(&self) -> usize {
        self.videos.iter().map(|v| v.frame_count()).sum()
    }
}

/// Encode frames, masked frames, landmarks, and audio features once.
///
/// Requires a frozen autoencoder; every video must have at least
/// `2 * REFERENCE_MIN_GAP` frames so all targets admit a valid reference.
pub fn prepare_dataset<T: Scalar>(
    videos: &[LoadedVideo<T>],
    ae: &AutoencoderParams<T>,
    backend: &dyn FeatureBackend<T>,
) -> Result<PreparedDataset<T>> {
    if !ae.frozen() {
        return Err(Error::State(
            "autoencoder must be frozen before diffusion training".into(),
        ));
    }
    if videos.is_empty() {
        return Err(Error::Data("no videos to prepare".into()));
    }
    let mut prepared = Vec::with_capacity(videos.len());
    let mut latent_hw = None;
    for video in videos {
        let frames = video.frames.len();
        if frames < 2 * REFERENCE_MIN_GAP {
            return Err(Error::Data(format!(
                "video {} has {frames} frames; training needs at least {}",
                video.record.identity,
                2 * REFERENCE_MIN_GAP
            )));
        }
        if video.track.frame_count() < frames {
            return Err(Error::Data(format!(
                "video {} audio covers {} frames but has {frames} images",
                video.record.identity,
                video.track.frame_count()
            )));
        }
        let features = frame_features(&video.track, backend)?;
        let mut latents = Vec::with_capacity(frames);
        let mut masked_latents = Vec::with_capacity(frames);
        let mut masked_lms = Vec::with_capacity(frames);
        for (frame, lm) in video.frames.iter().zip(video.landmarks.iter()) {
            let z = encode_batch(&frame.to_nchw(), ae)?;
            let region = mouth_mask_region(lm);
            let masked = mask_image(frame, &region);
            let zm = encode_batch(&masked.to_nchw(), ae)?;
            latents.push(z);
            masked_latents.push(zm);
            masked_lms.push(mask_landmarks(lm));
        }
        if let Some((h, w)) = latent_hw {
            if latents[0].shape()[2] != h || latents[0].shape()[3] != w {
                return Err(Error::Data("mixed latent shapes across videos".into()));
            }
        } else {
            latent_hw = Some((latents[0].shape()[2], latents[0].shape()[3]));
        }
        prepared.push(PreparedVideo {
            identity: video.record.identity.clone(),
            latents,
            masked_latents,
            frame_features: features[..frames].to_vec(),
            masked_landmarks: masked_lms,
        });
    }
    let (latent_h, latent_w) = latent_hw.expect("at least one video");
    let feature_len = prepared[0].frame_features[0].flatten().len();
    Ok(PreparedDataset {
        videos: prepared,
        latent_h,
        latent_w,
        feature_len,
    })
}

/// Indices of one training sample; the tensors live in the prepared set.
#[derive(Clone, Copy, Debug)]
pub struct TrainSample {
    pub video: usize,
    pub target: usize,
    pub reference: usize,
}

/// Draw a batch of samples (video, target, reference) with the reference
/// gap rule enforced by construction.
pub fn draw_samples<T: Scalar>(
    prep: &PreparedDataset<T>,
    batch_size: usize,
    rng: &mut Prng,
) -> Result<Vec<TrainSample>> {
    (0..batch_size)
        .map(|_| {
            let video = rng.below(prep.videos.len());
            let frames = prep.videos[video].frame_count();
            let target = rng.below(frames);
            let reference = select_reference(target, frames, rng)?;
            Ok(TrainSample {
                video,
                target,
                reference,
            })
        })
        .collect()
}

/// Fully materialized training batch (everything the graph consumes).
pub struct PreparedBatch<T: Scalar> {
    /// `[n, 9, h, w]` channel-stacked `z_t | z_m | z_r`.
    pub cv: ArrayD<T>,
    /// Drawn timesteps per sample.
    pub ts: Vec<usize>,
    /// `[n, 17, feature_len]` audio feature neighborhoods.
    pub neigh: ArrayD<T>,
    /// `[n, 136]` flattened masked landmarks.
    pub landmarks: ArrayD<T>,
    /// `[n, 3, h, w]` the drawn noise (regression target).
    pub eps: ArrayD<T>,
}

/// Draw `(t, eps)` for every sample and assemble the batch tensors.
pub fn assemble_batch<T: Scalar>(
    prep: &PreparedDataset<T>,
    samples: &[TrainSample],
    sched: &NoiseSchedule<T>,
    rng: &mut Prng,
) -> Result<PreparedBatch<T>> {
    if samples.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let n = samples.len();
    let (h, w) = (prep.latent_h, prep.latent_w);
    let mut cv = Vec::with_capacity(n * 9 * h * w);
    let mut eps_all = Vec::with_capacity(n * 3 * h * w);
    let mut neigh = Vec::with_capacity(n * NEIGHBORHOOD * prep.feature_len);
    let mut lms = Vec::with_capacity(n * 136);
    let mut ts = Vec::with_capacity(n);
    for s in samples {
        let video = &prep.videos[s.video];
        let frames = video.frame_count();
        if s.target >= frames || s.reference >= frames {
            return Err(Error::Index(format!(
                "sample indices {}/{} outside video of {frames} frames",
                s.target, s.reference
            )));
        }
        if s.target.abs_diff(s.reference) < REFERENCE_MIN_GAP {
            return Err(Error::Selection(format!(
                "reference {} too close to target {}",
                s.reference, s.target
            )));
        }
        let t = rng.below(sched.len());
        let eps = rng.normal_tensor::<T>(&[1, 3, h, w]);
        let z_t = q_sample(&video.latents[s.target], t, &eps, sched)?;
        cv.extend(z_t.iter().copied());
        cv.extend(video.masked_latents[s.target].iter().copied());
        cv.extend(video.latents[s.reference].iter().copied());
        eps_all.extend(eps.iter().copied());
        ts.push(t);
        let last = frames as isize - 1;
        for d in -(FILTER_HALF_WINDOW as isize)..=FILTER_HALF_WINDOW as isize {
            let j = (s.target as isize + d).clamp(0, last) as usize;
            neigh.extend(video.frame_features[j].flatten().iter().copied());
        }
        lms.extend(video.masked_landmarks[s.target].flatten().iter().copied());
    }
    Ok(PreparedBatch {
        cv: ArrayD::from_shape_vec(IxDyn(&[n, 9, h, w]), cv).unwrap(),
        ts,
        neigh: ArrayD::from_shape_vec(IxDyn(&[n, NEIGHBORHOOD, prep.feature_len]), neigh).unwrap(),
        landmarks: ArrayD::from_shape_vec(IxDyn(&[n, 136]), lms).unwrap(),
        eps: ArrayD::from_shape_vec(IxDyn(&[n, 3, h, w]), eps_all).unwrap(),
    })
}

/// Mean squared error between a noise prediction and the drawn noise,
/// averaged over batch and elements.
pub fn noise_mse<T: Scalar>(eps_hat: &ArrayD<T>, eps: &ArrayD<T>) -> Result<f64> {
    if eps_hat.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "noise shapes differ: {:?} vs {:?}",
            eps_hat.shape(),
            eps.shape()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in eps_hat.iter().zip(eps.iter()) {
        let d = a.to_f64c() - b.to_f64c();
        acc += d * d;
    }
    Ok(acc / eps.len() as f64)
}

struct LossGraph<T: Scalar> {
    g: Graph<T>,
    loss: crate::graph::Var,
    denoiser_vars: crate::nn::BoundVars,
    filter_vars: crate::nn::BoundVars,
    landmark_vars: crate::nn::BoundVars,
}

fn build_loss_graph<T: Scalar>(bundle: &ModelBundle<T>, batch: &PreparedBatch<T>) -> LossGraph<T> {
    let g = Graph::new();
    let denoiser_vars = bundle.denoiser.store().bind(&g);
    let filter_vars = bundle.filter.store().bind(&g);
    let landmark_vars = bundle.landmark.store().bind(&g);
    let neigh = g.constant(batch.neigh.clone());
    let (audio, _) = temporal_filter_graph(&g, &filter_vars, neigh);
    let lm_in = g.constant(batch.landmarks.clone());
    let lm_feat = crate::visual::encode_landmarks_graph(&g, &landmark_vars, lm_in);
    let ctx = g.concat(&[audio, lm_feat], 1);
    let cv = g.constant(batch.cv.clone());
    let sin = g.constant(time_embedding_batch::<T>(
        &batch.ts,
        bundle.denoiser.config().time_embed_dim,
    ));
    let eps_hat = denoise_eps_graph(&g, &denoiser_vars, bundle.denoiser.config(), cv, sin, ctx);
    let eps = g.constant(batch.eps.clone());
    let diff = g.sub(eps_hat, eps);
    let loss = g.mean(g.mul(diff, diff));
    LossGraph {
        g,
        loss,
        denoiser_vars,
        filter_vars,
        landmark_vars,
    }
}

/// Denoising objective for a batch of samples: draws `(t, eps)` per sample
/// and returns the scalar loss without updating anything.
pub fn training_loss<T: Scalar>(
    samples: &[TrainSample],
    prep: &PreparedDataset<T>,
    bundle: &ModelBundle<T>,
    sched: &NoiseSchedule<T>,
    rng: &mut Prng,
) -> Result<f64> {
    let batch = assemble_batch(prep, samples, sched, rng)?;
    let lg = build_loss_graph(bundle, &batch);
    Ok(lg.g.value(lg.loss).first().copied().unwrap().to_f64c())
}

/// Optimizer state over the three trainable groups.
pub struct TrainState<T: Scalar> {
    pub bundle: ModelBundle<T>,
    pub step: usize,
    cfg: TrainerConfig,
    adam: AdamConfig,
    adam_denoiser: AdamState<T>,
    adam_filter: AdamState<T>,
    adam_landmark: AdamState<T>,
    rng: Prng,
}

/// Per-group gradients of one step (exposed for the gradient checks).
pub struct StepGrads<T: Scalar> {
    pub denoiser: GradStore<T>,
    pub filter: GradStore<T>,
    pub landmark: GradStore<T>,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(bundle: ModelBundle<T>, cfg: TrainerConfig) -> Result<Self> {
        cfg.validate()?;
        let OptimizerKind::Adam = cfg.optimizer;
        let adam_denoiser = AdamState::new(bundle.denoiser.store());
        let adam_filter = AdamState::new(bundle.filter.store());
        let adam_landmark = AdamState::new(bundle.landmark.store());
        let rng = Prng::seed_from_u64(cfg.seed);
        Ok(TrainState {
            bundle,
            step: 0,
            adam: AdamConfig::with_lr(cfg.lr),
            cfg,
            adam_denoiser,
            adam_filter,
            adam_landmark,
            rng,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.cfg
    }

    pub fn rng_mut(&mut self) -> &mut Prng {
        &mut self.rng
    }
}

/// Loss and gradients of one assembled batch (no update applied).
pub fn batch_gradients<T: Scalar>(
    bundle: &ModelBundle<T>,
    batch: &PreparedBatch<T>,
) -> Result<(f64, StepGrads<T>)> {
    let lg = build_loss_graph(bundle, batch);
    let loss = lg.g.value(lg.loss).first().copied().unwrap().to_f64c();
    if !loss.is_finite() {
        return Err(Error::Training(format!("non-finite loss {loss}")));
    }
    let grads = lg.g.backward(lg.loss);
    Ok((
        loss,
        StepGrads {
            denoiser: lg.denoiser_vars.collect_grads(&lg.g, &grads),
            filter: lg.filter_vars.collect_grads(&lg.g, &grads),
            landmark: lg.landmark_vars.collect_grads(&lg.g, &grads),
        },
    ))
}

/// One optimizer update on a drawn batch; returns the loss.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    prep: &PreparedDataset<T>,
    sched: &NoiseSchedule<T>,
) -> Result<f64> {
    let samples = draw_samples(prep, state.cfg.batch_size, &mut state.rng)?;
    let batch = assemble_batch(prep, &samples, sched, &mut state.rng)?;
    let (loss, grads) = batch_gradients(&state.bundle, &batch)?;
    state
        .adam_denoiser
        .update(state.bundle.denoiser.store_mut(), &grads.denoiser, &state.adam)?;
    state
        .adam_filter
        .update(state.bundle.filter.store_mut(), &grads.filter, &state.adam)?;
    state
        .adam_landmark
        .update(state.bundle.landmark.store_mut(), &grads.landmark, &state.adam)?;
    state.step += 1;
    Ok(loss)
}

/// Run the configured number of steps; returns the final bundle and the
/// `(step, loss)` history. Checkpoints are written at the configured
/// cadence when `ckpt_dir` is given.
pub fn train<T: Scalar>(
    cfg: &TrainerConfig,
    prep: &PreparedDataset<T>,
    bundle: ModelBundle<T>,
    sched: &NoiseSchedule<T>,
    ckpt_dir: Option<&Path>,
) -> Result<(ModelBundle<T>, Vec<(usize, f64)>)> {
    let mut state = TrainState::new(bundle, *cfg)?;
    let mut history = Vec::with_capacity(cfg.total_steps);
    for _ in 0..cfg.total_steps {
        let loss = train_step(&mut state, prep, sched)?;
        history.push((state.step, loss));
        if cfg.ckpt_every > 0 && state.step % cfg.ckpt_every == 0 {
            if let Some(dir) = ckpt_dir {
                crate::ckpt::save_model_bundle(&dir.join("model.ckpt"), &state.bundle)?;
            }
        }
    }
    Ok((state.bundle, history))
}

/// Loss history as `step,loss` CSV.
pub fn history_csv(history: &[(usize, f64)]) -> String {
    let mut out = String::from("step,loss\n");
    for (step, loss) in history {
        out.push_str(&format!("{step},{loss:.8}\n"));
    }
    out
}
