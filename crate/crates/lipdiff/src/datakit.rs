//! Dataset layout, loading, and the deterministic synthetic talking-face
//! generator.
//!
//! Layout on disk, one directory per identity:
//!
//! ```text
//! root/<identity>/frames/%06d.png   8-bit RGB frames
//! root/<identity>/landmarks.txt    one line per frame: idx + 136 coords
//! root/<identity>/audio.wav        16 kHz mono 16-bit PCM
//! root/<identity>/meta.json        {"fps": .., "frame_count": ..}
//! ```
//!
//! Toy faces are parametric cartoons: an elliptical head with eyes, brows
//! and nose, plus a dark mouth ellipse whose vertical radius follows the
//! audio envelope. The audio-to-mouth law is fixed and measurable, so the
//! audio-to-lip mapping of a trained model can be verified numerically.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use sha2::Digest;

use crate::audio::AudioTrack;
use crate::error::{hex_string, Error, Result};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::types::{LandmarkSet, PixelImage};
use crate::visual::mouth_mask_region;
use crate::wav;
use crate::NUM_LANDMARKS;

/// One video of the dataset.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub identity: String,
    pub frame_dir: PathBuf,
    pub landmark_file: PathBuf,
    pub audio_file: PathBuf,
    pub fps: f64,
    pub frame_count: usize,
}

/// A record with its content loaded into memory.
pub struct LoadedVideo<T: Scalar> {
    pub record: VideoRecord,
    pub frames: Vec<PixelImage<T>>,
    pub landmarks: Vec<LandmarkSet<T>>,
    pub track: AudioTrack<T>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    fps: f64,
    frame_count: usize,
}

/// Scan a dataset root. Fails hard on count mismatches, naming the video.
pub fn load_dataset(root: &Path) -> Result<Vec<VideoRecord>> {
    if !root.is_dir() {
        return Err(Error::Data(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut records = Vec::with_capacity(dirs.len());
    for dir in dirs {
        let identity = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let meta_path = dir.join("meta.json");
        let meta_raw =
            std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: Meta = serde_json::from_str(&meta_raw)
            .map_err(|e| Error::Data(format!("{}: bad meta.json: {e}", identity)))?;
        let frame_dir = dir.join("frames");
        let mut frame_files: Vec<PathBuf> = std::fs::read_dir(&frame_dir)
            .map_err(|e| Error::io(&frame_dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|s| s == "png").unwrap_or(false))
            .collect();
        frame_files.sort();
        if frame_files.len() != meta.frame_count {
            return Err(Error::Data(format!(
                "video {identity}: meta says {} frames but {} png files found",
                meta.frame_count,
                frame_files.len()
            )));
        }
        let landmark_file = dir.join("landmarks.txt");
        let rows = count_landmark_rows(&landmark_file)?;
        if rows != meta.frame_count {
            return Err(Error::Data(format!(
                "video {identity}: {} landmark rows for {} frames",
                rows, meta.frame_count
            )));
        }
        let audio_file = dir.join("audio.wav");
        if !audio_file.is_file() {
            return Err(Error::Data(format!("video {identity}: missing audio.wav")));
        }
        records.push(VideoRecord {
            identity,
            frame_dir,
            landmark_file,
            audio_file,
            fps: meta.fps,
            frame_count: meta.frame_count,
        });
    }
    Ok(records)
}

fn count_landmark_rows(path: &Path) -> Result<usize> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(std::io::BufReader::new(file)
        .lines()
        .map_while(|l| l.ok())
        .filter(|l| !l.trim().is_empty())
        .count())
}

/// Load one PNG frame as a `[-1, 1]` image.
pub fn load_png<T: Scalar>(path: &Path) -> Result<PixelImage<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("cannot read image {}: {e}", path.display())))?
        .into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array3::zeros((h, w, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    PixelImage::from_unit(data)
}

/// Save a `[-1, 1]` image as 8-bit RGB PNG.
pub fn save_png<T: Scalar>(path: &Path, img: &PixelImage<T>) -> Result<()> {
    let unit = img.to_unit();
    let (h, w, _) = unit.dim();
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] = (unit[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out.save(path)
        .map_err(|e| Error::Data(format!("cannot write image {}: {e}", path.display())))
}

/// Parse a landmark file: one line per frame, `idx x0 y0 ... x67 y67`.
pub fn load_landmarks<T: Scalar>(path: &Path, expected: usize) -> Result<Vec<LandmarkSet<T>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(expected);
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let idx: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}:{lineno}: bad frame index", path.display())))?;
        if idx != out.len() {
            return Err(Error::Data(format!(
                "{}:{lineno}: frame index {idx} out of order",
                path.display()
            )));
        }
        let coords: Vec<f64> = it
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("{}:{lineno}: {e}", path.display())))?;
        if coords.len() != NUM_LANDMARKS * 2 {
            return Err(Error::Data(format!(
                "{}:{lineno}: expected {} coordinates, got {}",
                path.display(),
                NUM_LANDMARKS * 2,
                coords.len()
            )));
        }
        let mut pts = Array2::zeros((NUM_LANDMARKS, 2));
        for i in 0..NUM_LANDMARKS {
            pts[[i, 0]] = T::from_f64c(coords[2 * i]);
            pts[[i, 1]] = T::from_f64c(coords[2 * i + 1]);
        }
        out.push(LandmarkSet::new(pts)?);
    }
    if out.len() != expected {
        return Err(Error::Data(format!(
            "{}: {} landmark rows for {expected} frames",
            path.display(),
            out.len()
        )));
    }
    Ok(out)
}

/// Write landmarks in the dataset text format.
pub fn save_landmarks<T: Scalar>(path: &Path, landmarks: &[LandmarkSet<T>]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for (i, lm) in landmarks.iter().enumerate() {
        let mut line = format!("{i}");
        for v in lm.points().iter() {
            line.push_str(&format!(" {:.8}", v.to_f64c()));
        }
        line.push('\n');
        f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Load a full video (frames, landmarks, audio) into memory.
pub fn load_video<T: Scalar>(record: &VideoRecord) -> Result<LoadedVideo<T>> {
    let mut frames = Vec::with_capacity(record.frame_count);
    for i in 0..record.frame_count {
        frames.push(load_png(&record.frame_dir.join(format!("{i:06}.png")))?);
    }
    let landmarks = load_landmarks(&record.landmark_file, record.frame_count)?;
    let track = AudioTrack::load(&record.audio_file, record.fps)?;
    Ok(LoadedVideo {
        record: record.clone(),
        frames,
        landmarks,
        track,
    })
}

// --- toy face geometry -------------------------------------------------

/// Mouth half-width as a fraction of image width.
pub const MOUTH_RX: f64 = 0.13;
/// Mouth vertical radius at opening 0 (fraction of image height).
pub const MOUTH_RY_BASE: f64 = 0.02;
/// Extra vertical radius at opening 1 (fraction of image height).
pub const MOUTH_RY_GAIN: f64 = 0.09;
/// Carrier amplitude of the toy audio.
pub const CARRIER_AMPLITUDE: f64 = 0.8;
/// RMS reference used to rescale the envelope into `[0, 1]`.
pub const RMS_REFERENCE: f64 = 0.85 * CARRIER_AMPLITUDE * std::f64::consts::FRAC_1_SQRT_2;
/// Luminance threshold separating mouth pixels from skin.
pub const DARK_THRESHOLD: f64 = 0.45;

/// Per-identity appearance and geometry.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IdentityStyle {
    pub skin: [f64; 3],
    pub mouth: [f64; 3],
    pub background: [f64; 3],
    pub carrier_hz: f64,
    /// Head center at rest (before the per-frame pose offset).
    pub center: (f64, f64),
    pub head_rx: f64,
    pub head_ry: f64,
}

impl IdentityStyle {
    /// Draw a style from the per-identity stream.
    pub fn sample(rng: &mut Prng) -> Self {
        let skin = [
            0.78 + 0.10 * (rng.uniform() - 0.5),
            0.66 + 0.10 * (rng.uniform() - 0.5),
            0.58 + 0.10 * (rng.uniform() - 0.5),
        ];
        // dark mouth with an identity-specific hue
        let hue = rng.uniform();
        let mouth = hsv_to_rgb(hue, 0.75, 0.30);
        let background = [
            0.62 + 0.15 * (rng.uniform() - 0.5),
            0.66 + 0.15 * (rng.uniform() - 0.5),
            0.72 + 0.15 * (rng.uniform() - 0.5),
        ];
        IdentityStyle {
            skin,
            mouth,
            background,
            carrier_hz: 350.0 + 200.0 * rng.uniform(),
            center: (0.5, 0.47),
            head_rx: 0.30,
            head_ry: 0.38,
        }
    }

    pub fn mouth_center(&self, pose: (f64, f64)) -> (f64, f64) {
        (
            self.center.0 + pose.0,
            self.center.1 + pose.1 + 0.22,
        )
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Everything the generator decided, for oracle checks.
#[derive(Clone, Debug)]
pub struct ToyFaceParams {
    pub styles: Vec<IdentityStyle>,
    /// Per identity, per frame pose offset of the whole face.
    pub poses: Vec<Vec<(f64, f64)>>,
    /// Per identity, per frame mouth opening in `[0, 1]`.
    pub openings: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, Debug)]
pub struct ToyConfig {
    pub identities: usize,
    pub frames: usize,
    pub seed: u64,
    pub image_size: usize,
    pub fps: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            identities: 1,
            frames: 200,
            seed: 0,
            image_size: 64,
            fps: 25.0,
        }
    }
}

fn soft_ellipse_alpha(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let dx = (px - cx) / rx;
    let dy = (py - cy) / ry;
    let rho = (dx * dx + dy * dy).sqrt();
    // ~1 px soft edge, scaled by the smaller radius
    let edge = 1.0 / rx.min(ry).max(1.0);
    ((1.0 - rho) / edge + 0.5).clamp(0.0, 1.0)
}

fn paint_ellipse(img: &mut Array3<f64>, cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3]) {
    let (h, w, _) = img.dim();
    let y0 = ((cy - ry - 1.5).floor().max(0.0)) as usize;
    let y1 = ((cy + ry + 1.5).ceil().min(h as f64 - 1.0)) as usize;
    let x0 = ((cx - rx - 1.5).floor().max(0.0)) as usize;
    let x1 = ((cx + rx + 1.5).ceil().min(w as f64 - 1.0)) as usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let a = soft_ellipse_alpha(x as f64 + 0.5, y as f64 + 0.5, cx, cy, rx, ry);
            if a > 0.0 {
                for c in 0..3 {
                    img[[y, x, c]] = img[[y, x, c]] * (1.0 - a) + color[c] * a;
                }
            }
        }
    }
}

/// Render one toy face frame.
pub fn render_toy_frame<T: Scalar>(
    style: &IdentityStyle,
    pose: (f64, f64),
    opening: f64,
    size: usize,
) -> PixelImage<T> {
    let s = size as f64;
    let mut img = Array3::from_shape_fn((size, size, 3), |(_, _, c)| style.background[c]);
    let (cx, cy) = (
        (style.center.0 + pose.0) * s,
        (style.center.1 + pose.1) * s,
    );
    // head
    paint_ellipse(
        &mut img,
        cx,
        cy,
        style.head_rx * s,
        style.head_ry * s,
        style.skin,
    );
    let dark = [0.12, 0.10, 0.10];
    // eyes and brows
    for side in [-1.0f64, 1.0] {
        let ex = cx + side * 0.11 * s;
        let ey = cy - 0.10 * s;
        paint_ellipse(&mut img, ex, ey, 0.045 * s, 0.055 * s, dark);
        paint_ellipse(&mut img, ex, cy - 0.19 * s, 0.055 * s, 0.014 * s, dark);
    }
    // nose
    let nose = [
        style.skin[0] * 0.85,
        style.skin[1] * 0.85,
        style.skin[2] * 0.85,
    ];
    paint_ellipse(&mut img, cx, cy + 0.04 * s, 0.014 * s, 0.06 * s, nose);
    // mouth: vertical radius follows the opening
    let (mx, my) = style.mouth_center(pose);
    let ry = (MOUTH_RY_BASE + MOUTH_RY_GAIN * opening.clamp(0.0, 1.0)) * s;
    paint_ellipse(&mut img, mx * s, my * s, MOUTH_RX * s, ry, style.mouth);
    PixelImage::from_unit(img).expect("generated image")
}

/// Analytic landmarks of a toy face. The mouth points trace the mouth
/// region at its full aperture, independent of the per-frame opening, so
/// the mask region never leaks lip motion.
pub fn toy_landmarks<T: Scalar>(style: &IdentityStyle, pose: (f64, f64)) -> LandmarkSet<T> {
    let (cx, cy) = (style.center.0 + pose.0, style.center.1 + pose.1);
    let mut pts = Array2::zeros((NUM_LANDMARKS, 2));
    let mut set = |i: usize, x: f64, y: f64| {
        pts[[i, 0]] = T::from_f64c(x.clamp(0.0, 1.0));
        pts[[i, 1]] = T::from_f64c(y.clamp(0.0, 1.0));
    };
    // jaw 0..=16: lower head arc from right ear to left ear
    for k in 0..17 {
        let a = std::f64::consts::PI * k as f64 / 16.0;
        set(k, cx + style.head_rx * a.cos(), cy + style.head_ry * a.sin());
    }
    // brows 17..=21 (left) and 22..=26 (right)
    for (base, side) in [(17, -1.0f64), (22, 1.0)] {
        for k in 0..5 {
            let frac = k as f64 / 4.0 - 0.5;
            set(
                base + k,
                cx + side * 0.11 + frac * 0.11,
                cy - 0.19 + 0.008 * (frac * 2.0).abs(),
            );
        }
    }
    // nose bridge 27..=30 and base 31..=35
    for k in 0..4 {
        set(27 + k, cx, cy - 0.04 + 0.04 * k as f64);
    }
    for k in 0..5 {
        set(31 + k, cx + (k as f64 / 4.0 - 0.5) * 0.06, cy + 0.10);
    }
    // eyes 36..=41 (left) and 42..=47 (right), hexagon on the eye ellipse
    for (base, side) in [(36, -1.0f64), (42, 1.0)] {
        let (ex, ey) = (cx + side * 0.11, cy - 0.10);
        for k in 0..6 {
            let a = std::f64::consts::TAU * k as f64 / 6.0;
            set(base + k, ex + 0.045 * a.cos(), ey + 0.055 * a.sin());
        }
    }
    // mouth: outer lip 48..=59 at full aperture, inner lip 60..=67
    let (mx, my) = style.mouth_center(pose);
    let ry_max = MOUTH_RY_BASE + MOUTH_RY_GAIN;
    for k in 0..12 {
        let a = std::f64::consts::TAU * k as f64 / 12.0;
        set(48 + k, mx + MOUTH_RX * a.cos(), my + ry_max * a.sin());
    }
    for k in 0..8 {
        let a = std::f64::consts::TAU * k as f64 / 8.0;
        set(
            60 + k,
            mx + 0.6 * MOUTH_RX * a.cos(),
            my + 0.6 * ry_max * a.sin(),
        );
    }
    LandmarkSet::new(pts).expect("68 x 2 landmarks")
}

/// The fixed audio-to-mouth law: per-frame RMS of the track, 3-frame
/// moving average, rescaled by the carrier RMS reference and clamped to
/// `[0, 1]`.
pub fn opening_signal<T: Scalar>(track: &AudioTrack<T>) -> Vec<f64> {
    let frames = track.frame_count();
    let sr = track.sample_rate() as f64;
    let samples = track.samples();
    let mut rms = Vec::with_capacity(frames);
    for i in 0..frames {
        let start = (i as f64 / track.video_fps() * sr).round() as usize;
        let end = (((i + 1) as f64 / track.video_fps() * sr).round() as usize).min(samples.len());
        let n = (end - start).max(1);
        let acc: f64 = samples[start..end.max(start + 1).min(samples.len())]
            .iter()
            .map(|v| {
                let x = v.to_f64c();
                x * x
            })
            .sum();
        rms.push((acc / n as f64).sqrt());
    }
    (0..frames)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(frames - 1);
            let ma = (rms[lo] + rms[i] + rms[hi]) / 3.0;
            (ma / RMS_REFERENCE).clamp(0.0, 1.0)
        })
        .collect()
}

/// Deterministic toy audio for one identity: a carrier tone under a
/// pseudo-random per-frame envelope, quantized exactly like the on-disk
/// PCM.
///
/// The envelope is Gaussian-smoothed frame noise pushed through the normal
/// CDF: its marginal is uniform on `[0, 1]` (good coverage of mouth
/// openings) and its autocorrelation dies out after a few frames, so a
/// reference frame 60+ frames away carries no information about the
/// current mouth.
pub fn toy_audio<T: Scalar>(
    style: &IdentityStyle,
    frames: usize,
    fps: f64,
    rng: &mut Prng,
) -> AudioTrack<T> {
    let sr = wav::TARGET_SAMPLE_RATE;
    let n = (frames as f64 / fps * sr as f64).round() as usize;
    let envelope = envelope_curve(frames, rng);
    let samples: Vec<T> = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            // linear interpolation between frame envelope values
            let pos = (t * fps).min(frames as f64 - 1.0);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(frames - 1);
            let frac = pos - lo as f64;
            let e = envelope[lo] * (1.0 - frac) + envelope[hi] * frac;
            let raw =
                CARRIER_AMPLITUDE * e * (std::f64::consts::TAU * style.carrier_hz * t).sin();
            // quantize like the 16-bit wav on disk
            let q = (raw.clamp(-1.0, 1.0) * i16::MAX as f64).round() / i16::MAX as f64;
            T::from_f64c(q)
        })
        .collect();
    AudioTrack::from_samples(samples, sr, fps).expect("non-empty toy audio")
}

/// Per-frame envelope: unit-variance Gaussian-smoothed noise mapped through
/// the normal CDF.
fn envelope_curve(frames: usize, rng: &mut Prng) -> Vec<f64> {
    let sigma = 2.0f64;
    let radius = 5i64;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    let noise: Vec<f64> = (0..frames as i64 + 2 * radius).map(|_| rng.normal()).collect();
    (0..frames)
        .map(|i| {
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                acc += w * noise[i + k];
            }
            normal_cdf(acc / norm)
        })
        .collect()
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z * std::f64::consts::FRAC_1_SQRT_2))
}

/// Abramowitz-Stegun 7.1.26 approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let y = 1.0
        - (((((1.061405429 * t - 1.453152027) * t) + 1.421413741) * t - 0.284496736) * t
            + 0.254829592)
            * t
            * (-x * x).exp();
    sign * y
}

/// Smooth per-frame pose offsets (slow 2-d wander).
pub fn toy_poses(frames: usize, rng: &mut Prng) -> Vec<(f64, f64)> {
    let fx = 1.0 / (40.0 + 40.0 * rng.uniform());
    let fy = 1.0 / (30.0 + 40.0 * rng.uniform());
    let px = rng.uniform();
    let py = rng.uniform();
    (0..frames)
        .map(|i| {
            let t = i as f64;
            (
                0.03 * (std::f64::consts::TAU * (fx * t + px)).sin(),
                0.02 * (std::f64::consts::TAU * (fy * t + py)).sin(),
            )
        })
        .collect()
}

/// Generate one toy identity fully in memory.
pub fn generate_toy_video<T: Scalar>(
    identity_seed: u64,
    frames: usize,
    size: usize,
    fps: f64,
) -> (
    IdentityStyle,
    Vec<PixelImage<T>>,
    Vec<LandmarkSet<T>>,
    AudioTrack<T>,
    Vec<(f64, f64)>,
    Vec<f64>,
) {
    let mut rng = Prng::seed_from_u64(identity_seed);
    let style = IdentityStyle::sample(&mut rng);
    let (imgs, lms, track, poses, openings) =
        generate_with_style::<T>(&style, &mut rng, frames, size, fps);
    (style, imgs, lms, track, poses, openings)
}

/// Generate a toy video for a caller-supplied style (e.g. identities that
/// differ only in mouth color); `motion_seed` drives audio and pose.
pub fn generate_toy_video_styled<T: Scalar>(
    style: &IdentityStyle,
    motion_seed: u64,
    frames: usize,
    size: usize,
    fps: f64,
) -> (
    Vec<PixelImage<T>>,
    Vec<LandmarkSet<T>>,
    AudioTrack<T>,
    Vec<(f64, f64)>,
    Vec<f64>,
) {
    let mut rng = Prng::seed_from_u64(motion_seed);
    generate_with_style(style, &mut rng, frames, size, fps)
}

fn generate_with_style<T: Scalar>(
    style: &IdentityStyle,
    rng: &mut Prng,
    frames: usize,
    size: usize,
    fps: f64,
) -> (
    Vec<PixelImage<T>>,
    Vec<LandmarkSet<T>>,
    AudioTrack<T>,
    Vec<(f64, f64)>,
    Vec<f64>,
) {
    let track = toy_audio::<T>(style, frames, fps, rng);
    let poses = toy_poses(frames, rng);
    let openings = opening_signal(&track);
    let imgs: Vec<PixelImage<T>> = (0..frames)
        .map(|i| render_toy_frame(style, poses[i], openings[i], size))
        .collect();
    let lms: Vec<LandmarkSet<T>> = (0..frames)
        .map(|i| toy_landmarks(style, poses[i]))
        .collect();
    (imgs, lms, track, poses, openings)
}

/// Wrap in-memory parts as a [`LoadedVideo`].
pub fn loaded_video_from_parts<T: Scalar>(
    identity: &str,
    frames: Vec<PixelImage<T>>,
    landmarks: Vec<LandmarkSet<T>>,
    track: AudioTrack<T>,
    fps: f64,
) -> LoadedVideo<T> {
    let frame_count = frames.len();
    LoadedVideo {
        record: VideoRecord {
            identity: identity.to_string(),
            frame_dir: PathBuf::new(),
            landmark_file: PathBuf::new(),
            audio_file: PathBuf::new(),
            fps,
            frame_count,
        },
        frames,
        landmarks,
        track,
    }
}

/// In-memory [`LoadedVideo`] for desk experiments and tests.
pub fn toy_video_in_memory<T: Scalar>(
    identity_seed: u64,
    frames: usize,
    size: usize,
    fps: f64,
) -> LoadedVideo<T> {
    let (_, imgs, lms, track, _, _) = generate_toy_video::<T>(identity_seed, frames, size, fps);
    LoadedVideo {
        record: VideoRecord {
            identity: format!("mem{identity_seed}"),
            frame_dir: PathBuf::new(),
            landmark_file: PathBuf::new(),
            audio_file: PathBuf::new(),
            fps,
            frame_count: frames,
        },
        frames: imgs,
        landmarks: lms,
        track,
    }
}

/// Render the dataset to disk; returns the generator parameters.
pub fn synthesize_toy_dataset(cfg: &ToyConfig, root: &Path) -> Result<ToyFaceParams> {
    if cfg.identities == 0 || cfg.frames == 0 || cfg.image_size == 0 {
        return Err(Error::Config("toy dataset needs positive counts".into()));
    }
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut params = ToyFaceParams {
        styles: Vec::new(),
        poses: Vec::new(),
        openings: Vec::new(),
    };
    for id in 0..cfg.identities {
        let identity = format!("id{id:02}");
        let dir = root.join(&identity);
        let frame_dir = dir.join("frames");
        std::fs::create_dir_all(&frame_dir).map_err(|e| Error::io(&frame_dir, e))?;
        let identity_seed = cfg
            .seed
            .wrapping_mul(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(id as u64);
        let (style, imgs, lms, track, poses, openings) =
            generate_toy_video::<f64>(identity_seed, cfg.frames, cfg.image_size, cfg.fps);
        for (i, img) in imgs.iter().enumerate() {
            save_png(&frame_dir.join(format!("{i:06}.png")), img)?;
        }
        save_landmarks(&dir.join("landmarks.txt"), &lms)?;
        let samples: Vec<f64> = track.samples().to_vec();
        wav::save_wav(&dir.join("audio.wav"), &samples)?;
        let meta = Meta {
            fps: cfg.fps,
            frame_count: cfg.frames,
        };
        let meta_path = dir.join("meta.json");
        std::fs::write(
            &meta_path,
            serde_json::to_string_pretty(&meta).expect("meta json"),
        )
        .map_err(|e| Error::io(&meta_path, e))?;
        params.styles.push(style);
        params.poses.push(poses);
        params.openings.push(openings);
    }
    Ok(params)
}

/// Reorder a track's frame-aligned sample chunks (used to build held-out
/// audio permutations).
pub fn permute_track_frames<T: Scalar>(
    track: &AudioTrack<T>,
    perm: &[usize],
) -> Result<AudioTrack<T>> {
    let frames = track.frame_count();
    if perm.len() != frames {
        return Err(Error::Data(format!(
            "permutation of {} entries for {frames} frames",
            perm.len()
        )));
    }
    let chunk = (track.sample_rate() as f64 / track.video_fps()).round() as usize;
    let samples = track.samples();
    let mut out = Vec::with_capacity(frames * chunk);
    for &src in perm {
        if src >= frames {
            return Err(Error::Data(format!("permutation entry {src} out of range")));
        }
        let start = src * chunk;
        let end = ((src + 1) * chunk).min(samples.len());
        out.extend_from_slice(&samples[start..end]);
        // pad the tail chunk if the track ended early
        while out.len() % chunk != 0 {
            out.push(T::zero());
        }
    }
    AudioTrack::from_samples(out, track.sample_rate(), track.video_fps())
}

/// Measured mouth opening in `[0, 1]`: the vertical extent of the dark
/// mouth mass inside the landmark-derived mouth region, normalized by the
/// calibrated span of the toy-face family. Returns 0 on an empty region.
pub fn measure_mouth_opening<T: Scalar>(frame: &PixelImage<T>, landmarks: &LandmarkSet<T>) -> f64 {
    let region = mouth_mask_region(landmarks);
    if region.is_empty() {
        return 0.0;
    }
    let (h, w) = (frame.height(), frame.width());
    let unit = frame.to_unit();
    let (x0, x1) = (
        (region.x0 * w as f64).floor().max(0.0) as usize,
        ((region.x1 * w as f64).ceil() as usize).min(w),
    );
    let (y0, y1) = (
        (region.y0 * h as f64).floor().max(0.0) as usize,
        ((region.y1 * h as f64).ceil() as usize).min(h),
    );
    if x0 >= x1 || y0 >= y1 {
        return 0.0;
    }
    let mut mass = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let l = (unit[[y, x, 0]] + unit[[y, x, 1]] + unit[[y, x, 2]]) / 3.0;
            // soft count around the threshold to keep sub-pixel accuracy
            mass += ((DARK_THRESHOLD - l) / 0.08 + 0.5).clamp(0.0, 1.0);
        }
    }
    let rx = MOUTH_RX * w as f64;
    let ry = mass / (std::f64::consts::PI * rx);
    let base = MOUTH_RY_BASE * h as f64;
    let gain = MOUTH_RY_GAIN * h as f64;
    ((ry - base) / gain).clamp(0.0, 1.0)
}

/// Mean RGB (unit range) of the dark mouth pixels inside the mouth region;
/// `None` when no pixel is dark enough (mouth closed or absent).
pub fn measure_mouth_color<T: Scalar>(
    frame: &PixelImage<T>,
    landmarks: &LandmarkSet<T>,
) -> Option<[f64; 3]> {
    let region = mouth_mask_region(landmarks);
    let (h, w) = (frame.height(), frame.width());
    let unit = frame.to_unit();
    let (x0, x1) = (
        (region.x0 * w as f64).floor().max(0.0) as usize,
        ((region.x1 * w as f64).ceil() as usize).min(w),
    );
    let (y0, y1) = (
        (region.y0 * h as f64).floor().max(0.0) as usize,
        ((region.y1 * h as f64).ceil() as usize).min(h),
    );
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for y in y0..y1 {
        for x in x0..x1 {
            let l = (unit[[y, x, 0]] + unit[[y, x, 1]] + unit[[y, x, 2]]) / 3.0;
            if l < DARK_THRESHOLD {
                for c in 0..3 {
                    acc[c] += unit[[y, x, c]];
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        None
    } else {
        Some([
            acc[0] / count as f64,
            acc[1] / count as f64,
            acc[2] / count as f64,
        ])
    }
}

/// SHA-256 over the sorted relative paths and contents of a tree.
pub fn dataset_tree_hash(root: &Path) -> Result<String> {
    fn walk(dir: &Path, base: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, base, files)?;
            } else {
                files.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    let mut hasher = sha2::Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(std::fs::read(&f).map_err(|e| Error::io(&f, e))?);
    }
    Ok(hex_string(&hasher.finalize()))
}
