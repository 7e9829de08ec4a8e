//! DDIM sampling and the progressive reference strategy.
//!
//! Inference iterates deterministic (eta = 0) or stochastic DDIM updates
//! over a strictly decreasing timestep subsequence ending at step 0, then
//! decodes the final latent. For video, each synthesized frame becomes the
//! reference image of the next frame; this chain exists only at inference.

use ndarray::ArrayD;

use crate::autoencoder::{decode_batch, encode_batch, AutoencoderParams};
use crate::denoiser::{cl_batch, denoise_eps_batch};
use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::schedule::{predict_z0, NoiseSchedule};
use crate::trainer::ModelBundle;
use crate::types::{LandmarkSet, LatentCondition, PixelImage, SmoothedAudioFeature};
use crate::visual::{assemble_latent, encode_landmarks, stack_nchw_conditions};

#[derive(Clone, Copy, Debug)]
pub struct SamplerConfig {
    /// DDIM steps (at most the schedule length).
    pub steps: usize,
    /// Stochasticity knob: 0 = deterministic, 1 = ancestral.
    pub eta: f64,
    pub seed: u64,
    /// Clamp the predicted clean latent to +-3 at every step.
    pub clip_latents: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 200,
            eta: 0.0,
            seed: 0,
            clip_latents: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched_len: usize) -> Result<()> {
        if self.steps == 0 || self.steps > sched_len {
            return Err(Error::Config(format!(
                "sampler steps {} must be in 1..={sched_len}",
                self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

/// Strictly decreasing timestep subsequence with uniform stride, ending at
/// step 0. With `steps == t_total` this is every step.
pub fn timestep_subsequence(t_total: usize, steps: usize) -> Vec<usize> {
    (0..steps).rev().map(|k| k * t_total / steps).collect()
}

const Z0_CLIP: f64 = 3.0;

#[allow(clippy::too_many_arguments)]
fn ddim_step_inner<T: Scalar>(
    z_t: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    t: usize,
    t_prev: isize,
    eta: f64,
    clip_z0: bool,
    sched: &NoiseSchedule<T>,
    rng: Option<&mut Prng>,
) -> Result<ArrayD<T>> {
    if t_prev >= t as isize {
        return Err(Error::Ordering(format!(
            "ddim step requires t_prev < t, got {t_prev} >= {t}"
        )));
    }
    if t_prev < -1 {
        return Err(Error::Ordering(format!("invalid t_prev {t_prev}")));
    }
    let abar_t = sched.alpha_bar(t)?.to_f64c();
    let abar_prev = if t_prev < 0 {
        1.0
    } else {
        sched.alpha_bar(t_prev as usize)?.to_f64c()
    };
    let mut z0 = predict_z0(z_t, eps_hat, t, sched)?;
    if clip_z0 {
        let lo = T::from_f64c(-Z0_CLIP);
        let hi = T::from_f64c(Z0_CLIP);
        z0.mapv_inplace(|v| v.max(lo).min(hi));
    }
    let sigma = eta
        * ((1.0 - abar_prev) / (1.0 - abar_t)).sqrt()
        * (1.0 - abar_t / abar_prev).sqrt();
    let dir = (1.0 - abar_prev - sigma * sigma).max(0.0).sqrt();
    let c_signal = T::from_f64c(abar_prev.sqrt());
    let c_dir = T::from_f64c(dir);
    let mut out = z0.mapv(|v| v * c_signal);
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        *o += c_dir * e;
    });
    if sigma > 0.0 {
        let rng = rng.ok_or_else(|| {
            Error::Request("stochastic ddim step (eta > 0) needs a noise generator".into())
        })?;
        let noise = rng.normal_tensor::<T>(z_t.shape());
        let s = T::from_f64c(sigma);
        ndarray::Zip::from(&mut out).and(&noise).for_each(|o, &n| {
            *o += s * n;
        });
    }
    Ok(out)
}

/// One DDIM update from step `t` to `t_prev` (`t_prev = -1` denotes the
/// final fully denoised output, alpha-bar = 1).
pub fn ddim_step<T: Scalar>(
    z_t: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    t: usize,
    t_prev: isize,
    eta: f64,
    sched: &NoiseSchedule<T>,
    rng: Option<&mut Prng>,
) -> Result<ArrayD<T>> {
    ddim_step_inner(z_t, eps_hat, t, t_prev, eta, false, sched, rng)
}

/// Run the full DDIM loop from an initial latent, querying `eps_fn` for the
/// noise estimate at every visited step.
pub fn run_ddim<T: Scalar>(
    z_init: ArrayD<T>,
    mut eps_fn: impl FnMut(&ArrayD<T>, usize) -> Result<ArrayD<T>>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<ArrayD<T>> {
    cfg.validate(sched.len())?;
    let ts = timestep_subsequence(sched.len(), cfg.steps);
    let mut z = z_init;
    for (i, &t) in ts.iter().enumerate() {
        let eps = eps_fn(&z, t)?;
        let t_prev = if i + 1 < ts.len() {
            ts[i + 1] as isize
        } else {
            -1
        };
        z = ddim_step_inner(&z, &eps, t, t_prev, cfg.eta, cfg.clip_latents, sched, Some(rng))?;
    }
    Ok(z)
}

/// Everything needed to synthesize one frame.
#[derive(Clone, Debug)]
pub struct FrameSynthesisRequest<T: Scalar> {
    /// Smoothed audio feature for this frame.
    pub audio: SmoothedAudioFeature<T>,
    /// Mouth-masked landmarks of the pose frame.
    pub masked_landmarks: LandmarkSet<T>,
    /// Mouth-masked pose frame x_m (head pose + background source).
    pub masked_pose: PixelImage<T>,
    /// Reference image x_r supplying mouth/face appearance. Required for
    /// single-frame synthesis and for the first frame of a sequence.
    pub reference: Option<PixelImage<T>>,
}

fn frame_rng(seed: u64, frame: usize) -> Prng {
    Prng::seed_from_u64(seed).derive(&format!("frame-{frame}"))
}

fn synthesize_one<T: Scalar>(
    req: &FrameSynthesisRequest<T>,
    reference: &PixelImage<T>,
    bundle: &ModelBundle<T>,
    ae: &AutoencoderParams<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
    rng: &mut Prng,
) -> Result<PixelImage<T>> {
    let z_m = encode_batch(&req.masked_pose.to_nchw(), ae)?;
    let z_r = encode_batch(&reference.to_nchw(), ae)?;
    let l = encode_landmarks(&req.masked_landmarks, &bundle.landmark)?;
    let cl: LatentCondition<T> = assemble_latent(&req.audio, &l)?;
    let ctx = cl_batch(std::slice::from_ref(&cl));
    let z_init = rng.normal_tensor::<T>(z_m.shape());
    let z0 = run_ddim(
        z_init,
        |z, t| {
            let cv = stack_nchw_conditions(z, &z_m, &z_r)?;
            denoise_eps_batch(&cv, &[t], &ctx, &bundle.denoiser)
        },
        sched,
        cfg,
        rng,
    )?;
    let x = decode_batch(&z0, ae)?;
    PixelImage::from_nchw(&x)
}

/// Synthesize a single frame from its request.
pub fn sample_frame<T: Scalar>(
    req: &FrameSynthesisRequest<T>,
    bundle: &ModelBundle<T>,
    ae: &AutoencoderParams<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
) -> Result<PixelImage<T>> {
    let reference = req
        .reference
        .as_ref()
        .ok_or_else(|| Error::Request("frame synthesis needs a reference image".into()))?;
    let mut rng = frame_rng(cfg.seed, 0);
    synthesize_one(req, reference, bundle, ae, sched, cfg, &mut rng)
}

/// Synthesize a sequence where frame 1 uses the supplied reference and each
/// later frame uses the previous synthesized frame as its reference.
pub fn progressive_sequence<T: Scalar>(
    requests: &[FrameSynthesisRequest<T>],
    bundle: &ModelBundle<T>,
    ae: &AutoencoderParams<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
) -> Result<Vec<PixelImage<T>>> {
    Ok(progressive_sequence_traced(requests, bundle, ae, sched, cfg)?.0)
}

/// [`progressive_sequence`] that also returns the reference image actually
/// used for every frame (for chain verification).
pub fn progressive_sequence_traced<T: Scalar>(
    requests: &[FrameSynthesisRequest<T>],
    bundle: &ModelBundle<T>,
    ae: &AutoencoderParams<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
) -> Result<(Vec<PixelImage<T>>, Vec<PixelImage<T>>)> {
    if requests.is_empty() {
        return Err(Error::Request(
            "progressive synthesis needs at least one frame".into(),
        ));
    }
    let first_ref = requests[0].reference.clone().ok_or_else(|| {
        Error::Request("first frame of a progressive sequence needs a reference".into())
    })?;
    let mut outputs: Vec<PixelImage<T>> = Vec::with_capacity(requests.len());
    let mut refs: Vec<PixelImage<T>> = Vec::with_capacity(requests.len());
    for (i, req) in requests.iter().enumerate() {
        let reference = if i == 0 {
            first_ref.clone()
        } else {
            outputs[i - 1].clone()
        };
        let mut rng = frame_rng(cfg.seed, i);
        let out = synthesize_one(req, &reference, bundle, ae, sched, cfg, &mut rng)?;
        refs.push(reference);
        outputs.push(out);
    }
    Ok((outputs, refs))
}

/// Synthesize a sequence using each request's own reference (no chaining).
/// Frame `i` consumes the same noise stream as in a progressive run with
/// the same seed, so the two strategies compare pairwise.
pub fn independent_sequence<T: Scalar>(
    requests: &[FrameSynthesisRequest<T>],
    bundle: &ModelBundle<T>,
    ae: &AutoencoderParams<T>,
    sched: &NoiseSchedule<T>,
    cfg: &SamplerConfig,
) -> Result<Vec<PixelImage<T>>> {
    requests
        .iter()
        .enumerate()
        .map(|(i, req)| {
            let reference = req.reference.as_ref().ok_or_else(|| {
                Error::Request(format!("frame {i} request is missing its reference image"))
            })?;
            let mut rng = frame_rng(cfg.seed, i);
            synthesize_one(req, reference, bundle, ae, sched, cfg, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use crate::schedule::{build_schedule, q_sample, ScheduleConfig, ScheduleKind};
    use proptest::prelude::*;

    fn two_step() -> NoiseSchedule<f64> {
        build_schedule(&ScheduleConfig {
            steps: 2,
            kind: ScheduleKind::Linear,
            beta_start: 0.1,
            beta_end: 0.1,
        })
        .unwrap()
    }

    #[test]
    fn eta_zero_draws_no_noise() {
        let s = two_step();
        let mut rng = Prng::seed_from_u64(0);
        let z = rng.normal_tensor::<f64>(&[4]);
        let e = rng.normal_tensor::<f64>(&[4]);
        // no rng supplied: must succeed because sigma = 0
        let out = ddim_step(&z, &e, 1, 0, 0.0, &s, None).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn final_step_returns_predicted_z0() {
        let s = two_step();
        let mut rng = Prng::seed_from_u64(1);
        let z = rng.normal_tensor::<f64>(&[4]);
        let e = rng.normal_tensor::<f64>(&[4]);
        let out = ddim_step(&z, &e, 0, -1, 0.0, &s, None).unwrap();
        let z0 = predict_z0(&z, &e, 0, &s).unwrap();
        for (a, b) in out.iter().zip(z0.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn eta_one_matches_ddpm_ancestral_oracle() {
        // T = 2 schedule, step t=1 -> t_prev=0, scalar inputs, same noise.
        let s = two_step();
        let z = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.3358898943540674);
        let e = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 1.0);
        let mut rng = Prng::seed_from_u64(42);
        let out = ddim_step(&z, &e, 1, 0, 1.0, &s, Some(&mut rng)).unwrap();

        // independent oracle: DDPM ancestral update with the same draw
        let noise = Prng::seed_from_u64(42).clone().normal();
        let (beta, abar_t, abar_prev) = (0.1f64, 0.81f64, 0.9f64);
        let alpha = 1.0 - beta;
        let mean = (z[[0]] - beta / (1.0f64 - abar_t).sqrt() * e[[0]]) / alpha.sqrt();
        let var = (1.0 - abar_prev) / (1.0 - abar_t) * beta;
        let oracle = mean + var.sqrt() * noise;
        assert!(
            (out[[0]] - oracle).abs() < 1e-12,
            "ddim {} vs ddpm oracle {oracle}",
            out[[0]]
        );
    }

    #[test]
    fn ordering_violation_is_error() {
        let s = two_step();
        let z = ndarray::ArrayD::<f64>::zeros(ndarray::IxDyn(&[2]));
        assert!(matches!(
            ddim_step(&z, &z, 0, 0, 0.0, &s, None).unwrap_err(),
            Error::Ordering(_)
        ));
        assert!(matches!(
            ddim_step(&z, &z, 0, 1, 0.0, &s, None).unwrap_err(),
            Error::Ordering(_)
        ));
    }

    #[test]
    fn subsequence_full_schedule_is_every_step() {
        let ts = timestep_subsequence(200, 200);
        assert_eq!(ts.len(), 200);
        assert_eq!(ts[0], 199);
        assert_eq!(ts[199], 0);
        for w in ts.windows(2) {
            assert_eq!(w[0], w[1] + 1);
        }
    }

    #[test]
    fn full_inversion_with_oracle_noise() {
        // eta = 0, all steps, oracle noise: the loop must recover z0.
        let sched: NoiseSchedule<f64> = build_schedule(&ScheduleConfig::default()).unwrap();
        let mut rng = Prng::seed_from_u64(9);
        let z0 = rng.normal_tensor::<f64>(&[3, 8, 8]);
        let eps = rng.normal_tensor::<f64>(&[3, 8, 8]);
        let z_t = q_sample(&z0, 199, &eps, &sched).unwrap();
        let cfg = SamplerConfig {
            steps: 200,
            eta: 0.0,
            seed: 0,
            clip_latents: false,
        };
        let mut loop_rng = Prng::seed_from_u64(0);
        let out = run_ddim(z_t, |_, _| Ok(eps.clone()), &sched, &cfg, &mut loop_rng).unwrap();
        let max_err = out
            .iter()
            .zip(z0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1e-4, "inversion max abs error {max_err}");
    }

    proptest! {
        #[test]
        fn subsequence_is_strictly_decreasing_to_zero(
            t_total in 1usize..400,
            frac in 0.01f64..1.0,
        ) {
            let steps = ((t_total as f64 * frac).ceil() as usize).clamp(1, t_total);
            let ts = timestep_subsequence(t_total, steps);
            prop_assert_eq!(ts.len(), steps);
            prop_assert_eq!(*ts.last().unwrap(), 0);
            for w in ts.windows(2) {
                prop_assert!(w[0] > w[1]);
            }
            for &t in &ts {
                prop_assert!(t < t_total);
            }
        }
    }
}
