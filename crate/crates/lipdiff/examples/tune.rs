//! Desk-scale tuning harness (not part of the test suite).
//! Usage: cargo run --release -p lipdiff --example tune -- <stage> [args]

use std::time::Instant;

use lipdiff::audio::{smooth_sequence, FilterbankBackend, SmoothingMode, FEATURE_BANDS};
use lipdiff::autoencoder::{train_autoencoder, AeTrainConfig, AutoencoderConfig};
use lipdiff::datakit::{
    generate_toy_video, measure_mouth_opening, opening_signal, permute_track_frames,
    toy_video_in_memory,
};
use lipdiff::denoiser::DenoiserConfig;
use lipdiff::metrics::{psnr_images, ssim_images};
use lipdiff::rng::Prng;
use lipdiff::sampler::{progressive_sequence, FrameSynthesisRequest, SamplerConfig};
use lipdiff::schedule::{build_schedule, ScheduleConfig};
use lipdiff::trainer::{prepare_dataset, train, ModelBundle, TrainerConfig};
use lipdiff::visual::{mask_image, mask_landmarks, mouth_mask_region};
use lipdiff::Real;

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let stage = args.first().map(|s| s.as_str()).unwrap_or("all");
    let arg = |i: usize, default: f64| -> f64 {
        args.get(i).and_then(|s| s.parse().ok()).unwrap_or(default)
    };

    if stage == "ae" || stage == "all" {
        // autoencoder quality/time at 64 px
        let width = arg(1, 16.0) as usize;
        let steps = arg(2, 1200.0) as usize;
        let lr = arg(3, 2e-3);
        let video = toy_video_in_memory::<Real>(1, 200, 64, 25.0);
        let net = AutoencoderConfig::new(4, 64, width).unwrap();
        let tr = AeTrainConfig {
            steps,
            batch_size: 4,
            lr,
            seed: 1,
        };
        let t0 = Instant::now();
        let (params, history) = train_autoencoder(&video.frames, &net, &tr).unwrap();
        let train_time = t0.elapsed().as_secs_f64();
        let psnr = lipdiff::autoencoder::roundtrip_psnr(&video.frames, &params).unwrap();
        println!(
            "[ae] width={width} steps={steps} lr={lr}: psnr={psnr:.2} dB, loss {:.5}->{:.6}, {train_time:.1}s",
            history[0],
            history.last().unwrap()
        );
    }

    if stage == "diff" || stage == "all" {
        let base = arg(1, 32.0) as usize;
        let steps = arg(2, 3000.0) as usize;
        let lr = arg(3, 4e-4);
        let batch = arg(4, 8.0) as usize;
        let ddim_steps = arg(5, 40.0) as usize;
        let eval_frames = arg(6, 32.0) as usize;

        let t0 = Instant::now();
        let video = toy_video_in_memory::<Real>(1, 200, 64, 25.0);
        let net = AutoencoderConfig::new(4, 64, 16).unwrap();
        let tr = AeTrainConfig {
            steps: 1200,
            batch_size: 4,
            lr: 2e-3,
            seed: 1,
        };
        let (mut ae, _) = train_autoencoder(&video.frames, &net, &tr).unwrap();
        ae.freeze();
        let ae_psnr = lipdiff::autoencoder::roundtrip_psnr(&video.frames, &ae).unwrap();
        println!("[diff] ae ready: {:.2} dB in {:.0}s", ae_psnr, t0.elapsed().as_secs_f64());

        let backend = FilterbankBackend::new(16_000);
        let prep = prepare_dataset(&[video], &ae, &backend).unwrap();
        let sched = build_schedule::<Real>(&ScheduleConfig::default()).unwrap();
        let dcfg = DenoiserConfig {
            base_width: base,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            cross_attn_levels: vec![0, 1],
            time_embed_dim: 128,
            context_dim: lipdiff::CONTEXT_DIM,
        };
        let mut rng = Prng::seed_from_u64(11);
        let bundle = ModelBundle::<Real>::init(&dcfg, FEATURE_BANDS, &mut rng).unwrap();
        let tcfg = TrainerConfig {
            batch_size: batch,
            lr,
            total_steps: steps,
            seed: 5,
            ..Default::default()
        };
        let t1 = Instant::now();
        let (bundle, history) = train(&tcfg, &prep, bundle, &sched, None).unwrap();
        let train_time = t1.elapsed().as_secs_f64();
        let tail: f64 =
            history.iter().rev().take(50).map(|(_, l)| l).sum::<f64>() / 50.0f64.min(steps as f64);
        println!(
            "[diff] base={base} steps={steps} lr={lr} batch={batch}: loss[0]={:.4} tail50={tail:.4}, {train_time:.0}s ({:.2} s/step)",
            history[0].1,
            train_time / steps as f64
        );

        // cache for the diag stage
        let cache = std::path::Path::new("/tmp/tune_ckpt");
        std::fs::create_dir_all(cache).unwrap();
        lipdiff::ckpt::save_autoencoder(&cache.join("ae.ckpt"), &ae).unwrap();
        lipdiff::ckpt::save_model_bundle(&cache.join("model.ckpt"), &bundle).unwrap();

        // resynthesis of training frames, progressive refs
        let video = toy_video_in_memory::<Real>(1, 200, 64, 25.0);
        let smoothed = smooth_sequence(
            &video.track,
            &bundle.filter,
            &backend,
            SmoothingMode::TemporalFilter,
        )
        .unwrap();
        let reqs: Vec<FrameSynthesisRequest<Real>> = (0..eval_frames)
            .map(|i| {
                let region = mouth_mask_region(&video.landmarks[i]);
                FrameSynthesisRequest {
                    audio: smoothed[i].clone(),
                    masked_landmarks: mask_landmarks(&video.landmarks[i]),
                    masked_pose: mask_image(&video.frames[i], &region),
                    reference: if i == 0 {
                        Some(video.frames[150].clone())
                    } else {
                        None
                    },
                }
            })
            .collect();
        let scfg = SamplerConfig {
            steps: ddim_steps,
            eta: 0.0,
            seed: 3,
            clip_latents: false,
        };
        let t2 = Instant::now();
        let outs = progressive_sequence(&reqs, &bundle, &ae, &sched, &scfg).unwrap();
        let synth_time = t2.elapsed().as_secs_f64();
        let mut psnr = 0.0;
        let mut ssim = 0.0;
        for (o, gt) in outs.iter().zip(video.frames.iter()) {
            psnr += psnr_images(o, gt).unwrap();
            ssim += ssim_images(o, gt).unwrap();
        }
        psnr /= outs.len() as f64;
        ssim /= outs.len() as f64;
        println!(
            "[diff] resynth {eval_frames} frames @{ddim_steps} ddim: psnr={psnr:.2} dB ssim={ssim:.4}, {synth_time:.0}s"
        );

        // audio-lip coupling on permuted audio
        let mut perm_rng = Prng::seed_from_u64(77);
        let perm = perm_rng.permutation(video.track.frame_count());
        let permuted = permute_track_frames(&video.track, &perm).unwrap();
        let target = opening_signal(&permuted);
        let smoothed_p =
            smooth_sequence(&permuted, &bundle.filter, &backend, SmoothingMode::TemporalFilter)
                .unwrap();
        let n_corr = eval_frames.min(60);
        let reqs: Vec<FrameSynthesisRequest<Real>> = (0..n_corr)
            .map(|i| {
                let region = mouth_mask_region(&video.landmarks[i]);
                FrameSynthesisRequest {
                    audio: smoothed_p[i].clone(),
                    masked_landmarks: mask_landmarks(&video.landmarks[i]),
                    masked_pose: mask_image(&video.frames[i], &region),
                    reference: if i == 0 {
                        Some(video.frames[150].clone())
                    } else {
                        None
                    },
                }
            })
            .collect();
        let outs = progressive_sequence(&reqs, &bundle, &ae, &sched, &scfg).unwrap();
        let measured: Vec<f64> = outs
            .iter()
            .enumerate()
            .map(|(i, f)| measure_mouth_opening(f, &video.landmarks[i]))
            .collect();
        let corr = pearson(&measured, &target[..n_corr]);
        println!("[diff] permuted-audio correlation over {n_corr} frames: {corr:.3}");
        let meas_gt: Vec<f64> = (0..n_corr)
            .map(|i| measure_mouth_opening(&video.frames[i], &video.landmarks[i]))
            .collect();
        let orig = opening_signal(&video.track);
        println!(
            "[diff] sanity: gt-frame probe vs original law corr {:.3}",
            pearson(&meas_gt, &orig[..n_corr])
        );
    }

    if stage == "diag" {
        // load the cached run and dissect where error comes from
        let cache = std::path::Path::new("/tmp/tune_ckpt");
        let ae = lipdiff::ckpt::load_autoencoder::<Real>(&cache.join("ae.ckpt")).unwrap();
        let bundle = lipdiff::ckpt::load_model_bundle::<Real>(&cache.join("model.ckpt")).unwrap();
        let video = toy_video_in_memory::<Real>(1, 200, 64, 25.0);
        let backend = FilterbankBackend::new(16_000);
        let prep = prepare_dataset(&[video], &ae, &backend).unwrap();
        let sched = build_schedule::<Real>(&ScheduleConfig::default()).unwrap();
        let video = toy_video_in_memory::<Real>(1, 200, 64, 25.0);

        // loss binned by timestep
        for &t_fix in &[10usize, 50, 100, 150, 199] {
            let mut rng = Prng::seed_from_u64(500 + t_fix as u64);
            let samples = lipdiff::trainer::draw_samples(&prep, 16, &mut rng).unwrap();
            let mut batch =
                lipdiff::trainer::assemble_batch(&prep, &samples, &sched, &mut rng).unwrap();
            // re-noise at the fixed t
            for (k, s) in samples.iter().enumerate() {
                let z0 = &prep.videos[s.video].latents[s.target];
                let eps = batch
                    .eps
                    .index_axis(ndarray::Axis(0), k)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0));
                let zt = lipdiff::schedule::q_sample(&z0.clone(), t_fix, &eps.into_dyn(), &sched)
                    .unwrap();
                batch
                    .cv
                    .index_axis_mut(ndarray::Axis(0), k)
                    .slice_mut(ndarray::s![0..3, .., ..])
                    .assign(&zt.index_axis(ndarray::Axis(0), 0));
                batch.ts[k] = t_fix;
            }
            let (loss, _) = lipdiff::trainer::batch_gradients(&bundle, &batch).unwrap();
            println!("[diag] loss at t={t_fix}: {loss:.5}");
        }

        // one-step z0 hat quality by t (conditional skill at each noise level)
        let smoothed = smooth_sequence(
            &video.track,
            &bundle.filter,
            &backend,
            SmoothingMode::TemporalFilter,
        )
        .unwrap();
        let frame = 30usize;
        let region = mouth_mask_region(&video.landmarks[frame]);
        let z0 = lipdiff::autoencoder::encode_batch(&video.frames[frame].to_nchw(), &ae).unwrap();
        let zm = lipdiff::autoencoder::encode_batch(
            &mask_image(&video.frames[frame], &region).to_nchw(),
            &ae,
        )
        .unwrap();
        let zr = lipdiff::autoencoder::encode_batch(&video.frames[150].to_nchw(), &ae).unwrap();
        let l = lipdiff::visual::encode_landmarks(
            &mask_landmarks(&video.landmarks[frame]),
            &bundle.landmark,
        )
        .unwrap();
        let cl = lipdiff::visual::assemble_latent(&smoothed[frame], &l).unwrap();
        let ctx = lipdiff::denoiser::cl_batch(std::slice::from_ref(&cl));
        let mut rng = Prng::seed_from_u64(1234);
        for &t in &[50usize, 100, 150, 175, 199] {
            let eps = rng.normal_tensor::<Real>(z0.shape());
            let zt = lipdiff::schedule::q_sample(&z0, t, &eps, &sched).unwrap();
            let cv = lipdiff::visual::stack_nchw_conditions(&zt, &zm, &zr).unwrap();
            let eps_hat =
                lipdiff::denoiser::denoise_eps_batch(&cv, &[t], &ctx, &bundle.denoiser).unwrap();
            let z0_hat = lipdiff::schedule::predict_z0(&zt, &eps_hat, t, &sched).unwrap();
            let dec = lipdiff::autoencoder::decode_batch(&z0_hat, &ae).unwrap();
            let img = lipdiff::PixelImage::from_nchw(&dec).unwrap();
            let psnr = psnr_images(&img, &video.frames[frame]).unwrap();
            // latent-space error too
            let lat_err = z0_hat
                .iter()
                .zip(z0.iter())
                .map(|(a, b)| {
                    let d = (a - b) as f64;
                    d * d
                })
                .sum::<f64>()
                / z0.len() as f64;
            println!("[diag] one-step z0 from t={t}: psnr={psnr:.2} dB latent mse={lat_err:.4}");
        }

        // resynthesis at several ddim step counts
        for &steps in &[40usize, 100, 200] {
            let reqs: Vec<FrameSynthesisRequest<Real>> = (0..16)
                .map(|i| {
                    let region = mouth_mask_region(&video.landmarks[i]);
                    FrameSynthesisRequest {
                        audio: smoothed[i].clone(),
                        masked_landmarks: mask_landmarks(&video.landmarks[i]),
                        masked_pose: mask_image(&video.frames[i], &region),
                        reference: if i == 0 {
                            Some(video.frames[150].clone())
                        } else {
                            None
                        },
                    }
                })
                .collect();
            let scfg = SamplerConfig {
                steps,
                eta: 0.0,
                seed: 3,
                clip_latents: false,
            };
            let outs = progressive_sequence(&reqs, &bundle, &ae, &sched, &scfg).unwrap();
            let mut psnr = 0.0;
            for (o, gt) in outs.iter().zip(video.frames.iter()) {
                psnr += psnr_images(o, gt).unwrap();
            }
            println!("[diag] resynth 16 frames @{steps} ddim: psnr={:.2} dB", psnr / 16.0);
        }
    }

    if stage == "gen" {
        // look at the generated data distribution
        let (_, frames, lms, track, _, openings) = generate_toy_video::<Real>(1, 200, 64, 25.0);
        let measured: Vec<f64> = frames
            .iter()
            .zip(lms.iter())
            .map(|(f, l)| measure_mouth_opening(f, l))
            .collect();
        println!(
            "[gen] opening range {:.3}..{:.3}, probe corr {:.4}",
            openings.iter().cloned().fold(1.0, f64::min),
            openings.iter().cloned().fold(0.0, f64::max),
            pearson(&measured, &openings)
        );
        for lag in [1usize, 5, 10, 60, 90] {
            let a = &openings[..openings.len() - lag];
            let b = &openings[lag..];
            println!("[gen] opening autocorr lag {lag}: {:.3}", pearson(a, b));
        }
        let mean = openings.iter().sum::<f64>() / openings.len() as f64;
        println!("[gen] opening mean {mean:.3}");

        // linear decodability of the opening from the init-state smoothed
        // audio feature (upper bound on what the denoiser can read out)
        let backend = FilterbankBackend::new(16_000);
        let mut rng = Prng::seed_from_u64(9);
        let params =
            lipdiff::audio::TemporalFilterParams::<Real>::init(FEATURE_BANDS, &mut rng);
        let smoothed =
            smooth_sequence(&track, &params, &backend, SmoothingMode::TemporalFilter).unwrap();
        let n = smoothed.len();
        let d = 65usize; // 64 dims + intercept
        let mut xtx = vec![0.0f64; d * d];
        let mut xty = vec![0.0f64; d];
        for (i, a) in smoothed.iter().enumerate() {
            let mut row = vec![1.0f64; d];
            for (j, v) in a.values().iter().enumerate() {
                row[j + 1] = *v as f64;
            }
            for p in 0..d {
                for q in 0..d {
                    xtx[p * d + q] += row[p] * row[q];
                }
                xty[p] += row[p] * openings[i];
            }
        }
        for p in 0..d {
            xtx[p * d + p] += 1e-6; // ridge
        }
        // gaussian elimination
        let mut w = xty.clone();
        for col in 0..d {
            let pivot = (col..d)
                .max_by(|&a, &b| xtx[a * d + col].abs().partial_cmp(&xtx[b * d + col].abs()).unwrap())
                .unwrap();
            for q in 0..d {
                xtx.swap(col * d + q, pivot * d + q);
            }
            w.swap(col, pivot);
            let diag = xtx[col * d + col];
            for r in 0..d {
                if r != col && xtx[r * d + col].abs() > 0.0 {
                    let f = xtx[r * d + col] / diag;
                    for q in col..d {
                        xtx[r * d + q] -= f * xtx[col * d + q];
                    }
                    w[r] -= f * w[col];
                }
            }
        }
        for col in 0..d {
            w[col] /= xtx[col * d + col];
        }
        let pred: Vec<f64> = smoothed
            .iter()
            .map(|a| {
                w[0] + a
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(j, v)| w[j + 1] * *v as f64)
                    .sum::<f64>()
            })
            .collect();
        println!(
            "[gen] linear readout of opening from init smoothed feature: corr {:.3}",
            pearson(&pred, &openings[..n])
        );
    }
}
