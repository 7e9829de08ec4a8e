//! Command-line surface of the talking-head diffusion pipeline.
//!
//! Subcommands: `make-toy-data`, `train-autoencoder`, `train`,
//! `synthesize`, `eval`. Every run writes a `manifest.json` (config hash,
//! seeds, checkpoint ids) into its output directory so reruns with the
//! same inputs are byte-comparable.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lipdiff::audio::{AudioTrack, FilterbankBackend, SmoothingMode};
use lipdiff::config::ExperimentConfig;
use lipdiff::datakit;
use lipdiff::metrics::MetricReport;
use lipdiff::sampler::{progressive_sequence, FrameSynthesisRequest};
use lipdiff::trainer::{self, ModelBundle};
use lipdiff::visual::{mask_image, mask_landmarks, mouth_mask_region};
use lipdiff::Real;

#[derive(Parser)]
#[command(name = "lipdiff", version, about = "Audio-driven talking-head synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Config overrides, `section.key=value` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(self.config.as_deref(), &self.overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic talking-face dataset.
    MakeToyData {
        #[arg(long)]
        identities: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 25.0)]
        fps: f64,
    },
    /// Pretrain the image autoencoder on a dataset.
    TrainAutoencoder {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train denoiser, audio filter, and landmark encoder jointly.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pretrained autoencoder checkpoint (frozen during training).
        #[arg(long)]
        autoencoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Synthesize a talking-head video with progressive references.
    Synthesize {
        /// Directory holding ae.ckpt and model.ckpt.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Driving audio (WAV, resampled to 16 kHz mono).
        #[arg(long)]
        audio: PathBuf,
        /// Identity directory providing pose frames and landmarks.
        #[arg(long)]
        pose_video: PathBuf,
        /// Frame index of the pose video used as the first reference.
        #[arg(long, default_value_t = 0)]
        ref_frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Number of frames to synthesize (default: all available).
        #[arg(long)]
        frames: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare synthesized frames against ground truth (PSNR/SSIM CSV).
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Output directory for metrics.csv and the manifest
        /// (default: the prediction directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_hash: Option<String>,
    seeds: serde_json::Value,
    checkpoint_ids: serde_json::Value,
    inputs: serde_json::Value,
    outputs: serde_json::Value,
}

fn write_manifest(dir: &Path, manifest: &Manifest) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output dir {}", dir.display()))?;
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)?;
    std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_all_videos(data: &Path) -> anyhow::Result<Vec<lipdiff::datakit::LoadedVideo<Real>>> {
    let records = datakit::load_dataset(data)?;
    if records.is_empty() {
        bail!("dataset {} contains no videos", data.display());
    }
    records
        .iter()
        .map(|r| Ok(datakit::load_video::<Real>(r)?))
        .collect()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::MakeToyData {
            identities,
            frames,
            seed,
            out,
            size,
            fps,
        } => {
            let cfg = datakit::ToyConfig {
                identities,
                frames,
                seed,
                image_size: size,
                fps,
            };
            datakit::synthesize_toy_dataset(&cfg, &out)?;
            let hash = datakit::dataset_tree_hash(&out)?;
            write_manifest(
                &out,
                &Manifest {
                    command: "make-toy-data".into(),
                    config_hash: None,
                    seeds: serde_json::json!({ "root": seed }),
                    checkpoint_ids: serde_json::json!({}),
                    inputs: serde_json::json!({
                        "identities": identities,
                        "frames": frames,
                        "size": size,
                        "fps": fps,
                    }),
                    outputs: serde_json::json!({ "dataset_hash": hash }),
                },
            )?;
            eprintln!("wrote toy dataset to {}", out.display());
            Ok(())
        }
        Command::TrainAutoencoder { data, out, config } => {
            let mut cfg = config.load()?;
            let videos = load_all_videos(&data)?;
            let images: Vec<_> = videos
                .iter()
                .flat_map(|v| v.frames.iter().cloned())
                .collect();
            // resolution comes from the data
            let size = images[0].height();
            if cfg.autoencoder.image_size != size {
                eprintln!(
                    "autoencoder.image_size {} resolved to dataset resolution {size}",
                    cfg.autoencoder.image_size
                );
                cfg.autoencoder.image_size = size;
            }
            let net = lipdiff::autoencoder::AutoencoderConfig::new(
                cfg.autoencoder.factor,
                cfg.autoencoder.image_size,
                cfg.autoencoder.width,
            )?;
            let train = lipdiff::autoencoder::AeTrainConfig {
                steps: cfg.autoencoder.steps,
                batch_size: cfg.autoencoder.batch_size,
                lr: cfg.autoencoder.lr,
                seed: cfg.autoencoder.seed,
            };
            let (params, history) = lipdiff::autoencoder::train_autoencoder(&images, &net, &train)?;
            let psnr = lipdiff::autoencoder::roundtrip_psnr(&images, &params)?;
            std::fs::create_dir_all(&out)?;
            let ckpt = out.join("ae.ckpt");
            lipdiff::ckpt::save_autoencoder(&ckpt, &params)?;
            std::fs::write(
                out.join("ae_loss.csv"),
                history
                    .iter()
                    .enumerate()
                    .fold(String::from("step,loss\n"), |mut acc, (i, l)| {
                        acc.push_str(&format!("{},{l:.8}\n", i + 1));
                        acc
                    }),
            )?;
            write_manifest(
                &out,
                &Manifest {
                    command: "train-autoencoder".into(),
                    config_hash: Some(cfg.hash()),
                    seeds: serde_json::json!({ "autoencoder": cfg.autoencoder.seed }),
                    checkpoint_ids: serde_json::json!({
                        "autoencoder": lipdiff::ckpt::file_sha256(&ckpt)?,
                    }),
                    inputs: serde_json::json!({ "data": data.display().to_string() }),
                    outputs: serde_json::json!({ "roundtrip_psnr_db": psnr }),
                },
            )?;
            eprintln!("autoencoder round-trip psnr: {psnr:.2} dB");
            Ok(())
        }
        Command::Train {
            data,
            autoencoder,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let videos = load_all_videos(&data)?;
            let ae = lipdiff::ckpt::load_autoencoder::<Real>(&autoencoder)?;
            let backend = FilterbankBackend::new(16_000);
            let prep = trainer::prepare_dataset(&videos, &ae, &backend)?;
            let sched = lipdiff::schedule::build_schedule::<Real>(&cfg.schedule_config()?)?;
            let mut rng = lipdiff::rng::Prng::seed_from_u64(cfg.train.seed).derive("init");
            let bundle = ModelBundle::<Real>::init(
                &cfg.denoiser_config()?,
                lipdiff::audio::FEATURE_BANDS,
                &mut rng,
            )?;
            std::fs::create_dir_all(&out)?;
            let tcfg = cfg.trainer_config()?;
            let (bundle, history) = trainer::train(&tcfg, &prep, bundle, &sched, Some(&out))?;
            let ckpt = out.join("model.ckpt");
            lipdiff::ckpt::save_model_bundle(&ckpt, &bundle)?;
            std::fs::write(out.join("loss.csv"), trainer::history_csv(&history))?;
            // keep the frozen autoencoder next to the model so the
            // directory is a complete synthesis checkpoint
            let ae_copy = out.join("ae.ckpt");
            if ae_copy != autoencoder {
                std::fs::copy(&autoencoder, &ae_copy)
                    .with_context(|| format!("copying {}", autoencoder.display()))?;
            }
            write_manifest(
                &out,
                &Manifest {
                    command: "train".into(),
                    config_hash: Some(cfg.hash()),
                    seeds: serde_json::json!({ "train": cfg.train.seed }),
                    checkpoint_ids: serde_json::json!({
                        "autoencoder": lipdiff::ckpt::file_sha256(&autoencoder)?,
                        "model": lipdiff::ckpt::file_sha256(&ckpt)?,
                    }),
                    inputs: serde_json::json!({ "data": data.display().to_string() }),
                    outputs: serde_json::json!({
                        "final_loss": history.last().map(|(_, l)| *l),
                        "steps": history.len(),
                    }),
                },
            )?;
            eprintln!(
                "trained {} steps, final loss {:.5}",
                history.len(),
                history.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Synthesize {
            checkpoint,
            audio,
            pose_video,
            ref_frame,
            out,
            frames,
            config,
        } => {
            let cfg = config.load()?;
            let ae_path = checkpoint.join("ae.ckpt");
            let model_path = checkpoint.join("model.ckpt");
            let ae = lipdiff::ckpt::load_autoencoder::<Real>(&ae_path)?;
            let bundle = lipdiff::ckpt::load_model_bundle::<Real>(&model_path)?;
            let sched = lipdiff::schedule::build_schedule::<Real>(&cfg.schedule_config()?)?;
            let scfg = cfg.sampler_config();

            // pose video: frames + landmarks of the target identity
            let records = datakit::load_dataset(
                pose_video
                    .parent()
                    .ok_or_else(|| anyhow::anyhow!("pose video path has no parent"))?,
            )?;
            let identity = pose_video
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or_default();
            let record = records
                .iter()
                .find(|r| r.identity == identity)
                .ok_or_else(|| anyhow::anyhow!("identity {identity} not found"))?;
            let pose = datakit::load_video::<Real>(record)?;
            if ref_frame >= pose.frames.len() {
                bail!(
                    "reference frame {ref_frame} outside pose video of {} frames",
                    pose.frames.len()
                );
            }

            let track = AudioTrack::<Real>::load(&audio, record.fps)?;
            let backend = FilterbankBackend::new(16_000);
            let smoothed = lipdiff::audio::smooth_sequence(
                &track,
                &bundle.filter,
                &backend,
                SmoothingMode::TemporalFilter,
            )?;
            let n = frames
                .unwrap_or(usize::MAX)
                .min(pose.frames.len())
                .min(smoothed.len());
            if n == 0 {
                bail!("nothing to synthesize: no overlapping audio/pose frames");
            }
            let requests: Vec<FrameSynthesisRequest<Real>> = (0..n)
                .map(|i| {
                    let region = mouth_mask_region(&pose.landmarks[i]);
                    FrameSynthesisRequest {
                        audio: smoothed[i].clone(),
                        masked_landmarks: mask_landmarks(&pose.landmarks[i]),
                        masked_pose: mask_image(&pose.frames[i], &region),
                        reference: if i == 0 {
                            Some(pose.frames[ref_frame].clone())
                        } else {
                            None
                        },
                    }
                })
                .collect();
            let outputs = progressive_sequence(&requests, &bundle, &ae, &sched, &scfg)?;
            std::fs::create_dir_all(&out)?;
            for (i, frame) in outputs.iter().enumerate() {
                datakit::save_png(&out.join(format!("{i:06}.png")), frame)?;
            }
            let ids = serde_json::json!({
                "autoencoder": lipdiff::ckpt::file_sha256(&ae_path)?,
                "model": lipdiff::ckpt::file_sha256(&model_path)?,
            });
            let sidecar = serde_json::json!({
                "seed": scfg.seed,
                "config_hash": cfg.hash(),
                "checkpoint_ids": ids,
            });
            std::fs::write(
                out.join("sidecar.json"),
                serde_json::to_string_pretty(&sidecar)?,
            )?;
            write_manifest(
                &out,
                &Manifest {
                    command: "synthesize".into(),
                    config_hash: Some(cfg.hash()),
                    seeds: serde_json::json!({ "sampler": scfg.seed }),
                    checkpoint_ids: ids,
                    inputs: serde_json::json!({
                        "audio": audio.display().to_string(),
                        "pose_video": pose_video.display().to_string(),
                        "ref_frame": ref_frame,
                    }),
                    outputs: serde_json::json!({ "frames": n }),
                },
            )?;
            eprintln!("synthesized {n} frames into {}", out.display());
            Ok(())
        }
        Command::Eval { pred, gt, out } => {
            let load_dir = |dir: &Path| -> anyhow::Result<Vec<lipdiff::PixelImage<Real>>> {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                    .with_context(|| format!("reading {}", dir.display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().map(|s| s == "png").unwrap_or(false))
                    .collect();
                files.sort();
                files
                    .iter()
                    .map(|p| Ok(datakit::load_png::<Real>(p)?))
                    .collect()
            };
            let pred_frames = load_dir(&pred)?;
            let gt_frames = load_dir(&gt)?;
            if pred_frames.is_empty() {
                bail!("no predicted frames in {}", pred.display());
            }
            if gt_frames.len() < pred_frames.len() {
                bail!(
                    "ground truth has {} frames but {} were predicted",
                    gt_frames.len(),
                    pred_frames.len()
                );
            }
            let report = MetricReport::compare(&pred_frames, &gt_frames[..pred_frames.len()])?;
            let out_dir = out.unwrap_or_else(|| pred.clone());
            std::fs::create_dir_all(&out_dir)?;
            std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
            println!("{}", report.summary());
            write_manifest(
                &out_dir,
                &Manifest {
                    command: "eval".into(),
                    config_hash: None,
                    seeds: serde_json::json!({}),
                    checkpoint_ids: serde_json::json!({}),
                    inputs: serde_json::json!({
                        "pred": pred.display().to_string(),
                        "gt": gt.display().to_string(),
                    }),
                    outputs: serde_json::json!({
                        "mean_psnr_db": report.mean_psnr_db,
                        "mean_ssim": report.mean_ssim,
                        "lpips": "n/a",
                        "syncnet": "n/a",
                        "frames": report.per_frame.len(),
                    }),
                },
            )?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single-line machine-parsable error
            eprintln!("{}", serde_json::json!({ "error": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
