//! Smooth audio feature extraction.
//!
//! Two smoothing stages: (1) the raw signal is reorganized into overlapped
//! windows of 16 contiguous 20 ms intervals centered on each video frame,
//! and a deterministic filterbank backend turns every window into a 16 x 29
//! feature map; (2) a learned self-attention filter mixes the feature maps
//! of the 17 frames around the target into one 64-d audio feature.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{linear_fwd, linear_init, BoundVars, ParamStore};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::types::SmoothedAudioFeature;
use crate::wav;
use crate::AUDIO_FEATURE_DIM;

/// Intervals per window.
pub const WINDOW_INTERVALS: usize = 16;
/// Length of one interval in seconds.
pub const INTERVAL_SECONDS: f64 = 0.020;
/// Feature bands produced by the default backend.
pub const FEATURE_BANDS: usize = 29;
/// Half-width of the temporal filter neighborhood.
pub const FILTER_HALF_WINDOW: usize = 8;
/// Neighborhood length consumed by the temporal filter.
pub const NEIGHBORHOOD: usize = 2 * FILTER_HALF_WINDOW + 1;

/// Mono audio aligned with a video timeline.
#[derive(Clone, Debug)]
pub struct AudioTrack<T: Scalar> {
    samples: Vec<T>,
    sample_rate: u32,
    video_fps: f64,
}

impl<T: Scalar> AudioTrack<T> {
    pub fn from_samples(samples: Vec<T>, sample_rate: u32, video_fps: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty audio track".into()));
        }
        if sample_rate == 0 || video_fps <= 0.0 {
            return Err(Error::Data(format!(
                "invalid track timing: rate {sample_rate}, fps {video_fps}"
            )));
        }
        Ok(AudioTrack {
            samples,
            sample_rate,
            video_fps,
        })
    }

    /// Load a WAV file (resampled to 16 kHz mono).
    pub fn load(path: &Path, video_fps: f64) -> Result<Self> {
        let samples = wav::load_wav(path)?;
        AudioTrack::from_samples(
            samples.into_iter().map(T::from_f64c).collect(),
            wav::TARGET_SAMPLE_RATE,
            video_fps,
        )
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn video_fps(&self) -> f64 {
        self.video_fps
    }

    /// Samples per 20 ms interval.
    pub fn interval_samples(&self) -> usize {
        (INTERVAL_SECONDS * self.sample_rate as f64).round() as usize
    }

    /// Number of whole video frames the track covers.
    pub fn frame_count(&self) -> usize {
        (self.samples.len() as f64 / self.sample_rate as f64 * self.video_fps).floor() as usize
    }
}

/// One window of 16 contiguous 20 ms intervals.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioWindow<T: Scalar> {
    /// `(16, samples_per_interval)`
    pub intervals: Array2<T>,
}

/// Reorganize the track into the window centered on `frame_idx`
/// (8 intervals before the frame time, 8 after, edge-clamped).
pub fn extract_window<T: Scalar>(track: &AudioTrack<T>, frame_idx: usize) -> Result<AudioWindow<T>> {
    let frames = track.frame_count();
    if frame_idx >= frames {
        return Err(Error::Index(format!(
            "frame {frame_idx} outside video of {frames} frames"
        )));
    }
    let s = track.interval_samples();
    let center =
        (frame_idx as f64 / track.video_fps * track.sample_rate as f64).round() as isize;
    let n = track.samples.len() as isize;
    let half = (WINDOW_INTERVALS / 2 * s) as isize;
    let mut intervals = Array2::zeros((WINDOW_INTERVALS, s));
    for j in 0..WINDOW_INTERVALS {
        for k in 0..s {
            let idx = center - half + (j * s + k) as isize;
            let idx = idx.clamp(0, n - 1) as usize;
            intervals[[j, k]] = track.samples[idx];
        }
    }
    Ok(AudioWindow { intervals })
}

/// Per-frame audio feature map `(16, D_F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeature<T: Scalar>(Array2<T>);

impl<T: Scalar> FrameFeature<T> {
    pub fn new(map: Array2<T>) -> Result<Self> {
        if map.shape()[0] != WINDOW_INTERVALS {
            return Err(Error::Shape(format!(
                "feature map must have {WINDOW_INTERVALS} rows, got {:?}",
                map.shape()
            )));
        }
        if map.iter().any(|v| !v.is_finite()) {
            return Err(Error::Feature("non-finite frame feature".into()));
        }
        Ok(FrameFeature(map))
    }

    pub fn map(&self) -> &Array2<T> {
        &self.0
    }

    pub fn feature_dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn flatten(&self) -> Array1<T> {
        Array1::from_iter(self.0.iter().copied())
    }
}

/// Deterministic per-window feature extractor.
pub trait FeatureBackend<T: Scalar> {
    fn name(&self) -> &'static str;
    fn feature_dim(&self) -> usize;
    fn features(&self, window: &AudioWindow<T>) -> Result<FrameFeature<T>>;
}

/// Log-energy triangular filterbank over each 20 ms interval, 29 bands on a
/// mel-spaced grid from 0 Hz to Nyquist. Silence maps to exactly zero
/// because features are `ln(1 + energy)`.
#[derive(Clone, Debug)]
pub struct FilterbankBackend {
    sample_rate: u32,
}

impl FilterbankBackend {
    pub fn new(sample_rate: u32) -> Self {
        FilterbankBackend { sample_rate }
    }

    fn mel(f: f64) -> f64 {
        2595.0 * (1.0 + f / 700.0).log10()
    }

    fn mel_inv(m: f64) -> f64 {
        700.0 * (10f64.powf(m / 2595.0) - 1.0)
    }

    /// Center frequencies of the triangular bands.
    pub fn band_centers(&self) -> Vec<f64> {
        let edges = self.band_edges();
        (0..FEATURE_BANDS).map(|b| edges[b + 1]).collect()
    }

    fn band_edges(&self) -> Vec<f64> {
        let fmax = self.sample_rate as f64 / 2.0;
        let mmax = Self::mel(fmax);
        (0..FEATURE_BANDS + 2)
            .map(|i| Self::mel_inv(mmax * i as f64 / (FEATURE_BANDS + 1) as f64))
            .collect()
    }

    /// Band energies of one interval via a direct real DFT.
    fn interval_energies<T: Scalar>(&self, interval: &[T]) -> Vec<f64> {
        let s = interval.len();
        let bins = s / 2 + 1;
        let mut power = vec![0.0f64; bins];
        let samples: Vec<f64> = interval.iter().map(|v| v.to_f64c()).collect();
        for (k, p) in power.iter_mut().enumerate() {
            let w = -2.0 * std::f64::consts::PI * k as f64 / s as f64;
            let mut re = 0.0;
            let mut im = 0.0;
            for (n, &x) in samples.iter().enumerate() {
                let phase = w * n as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            *p = (re * re + im * im) / s as f64;
        }
        let edges = self.band_edges();
        let bin_hz = self.sample_rate as f64 / s as f64;
        let mut energies = vec![0.0f64; FEATURE_BANDS];
        for (k, &p) in power.iter().enumerate() {
            let f = k as f64 * bin_hz;
            for b in 0..FEATURE_BANDS {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                if f <= lo || f >= hi {
                    continue;
                }
                let w = if f <= mid {
                    (f - lo) / (mid - lo)
                } else {
                    (hi - f) / (hi - mid)
                };
                energies[b] += w * p;
            }
        }
        energies
    }
}

impl<T: Scalar> FeatureBackend<T> for FilterbankBackend {
    fn name(&self) -> &'static str {
        "filterbank29"
    }

    fn feature_dim(&self) -> usize {
        FEATURE_BANDS
    }

    fn features(&self, window: &AudioWindow<T>) -> Result<FrameFeature<T>> {
        let mut map = Array2::zeros((WINDOW_INTERVALS, FEATURE_BANDS));
        for (j, row) in window.intervals.rows().into_iter().enumerate() {
            let interval: Vec<T> = row.iter().copied().collect();
            let energies = self.interval_energies(&interval);
            for (b, &e) in energies.iter().enumerate() {
                map[[j, b]] = T::from_f64c((1.0 + e).ln());
            }
        }
        FrameFeature::new(map)
    }
}

/// Extract the per-frame feature map of one window.
pub fn base_features<T: Scalar>(
    window: &AudioWindow<T>,
    backend: &dyn FeatureBackend<T>,
) -> Result<FrameFeature<T>> {
    backend.features(window)
}

/// Learned single-head attention over the 17-frame neighborhood.
///
/// Parameters: a value projection of the flattened feature map, a learned
/// query vector scoring each projected frame, a per-position logit bias
/// (so the attention can tell the center frame from its neighbors), and an
/// output projection to the audio feature dimension. The bias starts
/// center-peaked, mirroring the local averaging the filter is meant to
/// learn; positions enter the scores only, so a neighborhood of identical
/// features still reduces to the shared value projection.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalFilterParams<T: Scalar> {
    store: ParamStore<T>,
    feature_len: usize,
}

impl<T: Scalar> TemporalFilterParams<T> {
    pub fn init(feature_dim: usize, rng: &mut Prng) -> Self {
        let feature_len = WINDOW_INTERVALS * feature_dim;
        let mut store = ParamStore::new();
        linear_init(&mut store, "value", feature_len, AUDIO_FEATURE_DIM, rng);
        linear_init(&mut store, "out", AUDIO_FEATURE_DIM, AUDIO_FEATURE_DIM, rng);
        store.insert(
            "query",
            crate::nn::init_weight(&[AUDIO_FEATURE_DIM, 1], AUDIO_FEATURE_DIM, rng),
        );
        let center = FILTER_HALF_WINDOW as f64;
        let bias: Vec<T> = (0..NEIGHBORHOOD)
            .map(|j| {
                let d = (j as f64 - center) / 2.0;
                T::from_f64c(-0.5 * d * d)
            })
            .collect();
        store.insert(
            "pos_bias",
            ArrayD::from_shape_vec(IxDyn(&[NEIGHBORHOOD]), bias).unwrap(),
        );
        TemporalFilterParams { store, feature_len }
    }

    pub fn half_window(&self) -> usize {
        FILTER_HALF_WINDOW
    }

    pub fn feature_len(&self) -> usize {
        self.feature_len
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        let feature_len = store
            .try_get("value.weight")
            .ok_or_else(|| Error::Checkpoint("temporal filter missing value.weight".into()))?
            .shape()[0];
        Ok(TemporalFilterParams { store, feature_len })
    }
}

/// Attention forward pass on the graph: `neigh [n, 17, flat]` -> `[n, 64]`.
pub fn temporal_filter_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    neigh: Var,
) -> (Var, Var) {
    let shape = g.shape(neigh);
    let (n, k, flat) = (shape[0], shape[1], shape[2]);
    let x = g.reshape(neigh, &[n * k, flat]);
    let values = linear_fwd(g, vars, "value", x); // [n*k, 64]
    let logits = g.matmul(values, vars.var("query")); // [n*k, 1]
    let logits = g.reshape(logits, &[n, k]);
    let scale = T::from_f64c(1.0 / (AUDIO_FEATURE_DIM as f64).sqrt());
    let logits = g.scale(logits, scale);
    let logits = g.add_row_bias(logits, vars.var("pos_bias"));
    let weights = g.softmax(logits, 1); // [n, k]
    let values = g.reshape(values, &[n, k, AUDIO_FEATURE_DIM]);
    let mixed = g.weighted_sum(weights, values); // [n, 64]
    let out = linear_fwd(g, vars, "out", mixed);
    (out, weights)
}

fn neighborhood_tensor<T: Scalar>(
    neighborhood: &[FrameFeature<T>],
    params: &TemporalFilterParams<T>,
) -> Result<ArrayD<T>> {
    if neighborhood.len() != NEIGHBORHOOD {
        return Err(Error::Shape(format!(
            "temporal filter expects {NEIGHBORHOOD} frame features, got {}",
            neighborhood.len()
        )));
    }
    let mut data = Vec::with_capacity(NEIGHBORHOOD * params.feature_len);
    for f in neighborhood {
        let flat = f.flatten();
        if flat.len() != params.feature_len {
            return Err(Error::Shape(format!(
                "frame feature length {} does not match filter input {}",
                flat.len(),
                params.feature_len
            )));
        }
        data.extend(flat.iter().copied());
    }
    Ok(ArrayD::from_shape_vec(
        IxDyn(&[1, NEIGHBORHOOD, params.feature_len]),
        data,
    )
    .unwrap())
}

/// Smoothed audio feature for one frame from its 17-frame neighborhood.
pub fn temporal_filter<T: Scalar>(
    neighborhood: &[FrameFeature<T>],
    params: &TemporalFilterParams<T>,
) -> Result<SmoothedAudioFeature<T>> {
    Ok(temporal_filter_with_weights(neighborhood, params)?.0)
}

/// Same as [`temporal_filter`] but also returns the attention weights.
pub fn temporal_filter_with_weights<T: Scalar>(
    neighborhood: &[FrameFeature<T>],
    params: &TemporalFilterParams<T>,
) -> Result<(SmoothedAudioFeature<T>, Vec<T>)> {
    let input = neighborhood_tensor(neighborhood, params)?;
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let x = g.constant(input);
    let (out, weights) = temporal_filter_graph(&g, &vars, x);
    let a = Array1::from_iter(g.value(out).iter().copied());
    let w = g.value(weights).iter().copied().collect();
    Ok((SmoothedAudioFeature::new(a)?, w))
}

/// How the second smoothing stage is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothingMode {
    /// Attention over the full 17-frame neighborhood.
    TemporalFilter,
    /// Ablation: the center frame feature alone, projected to the audio
    /// feature dimension through the same parameters.
    CenterOnly,
}

/// One smoothed audio feature per video frame. Neighborhoods are clamped at
/// the sequence edges by repeating the first/last frame feature.
pub fn smooth_sequence<T: Scalar>(
    track: &AudioTrack<T>,
    params: &TemporalFilterParams<T>,
    backend: &dyn FeatureBackend<T>,
    mode: SmoothingMode,
) -> Result<Vec<SmoothedAudioFeature<T>>> {
    let features = frame_features(track, backend)?;
    smooth_features(&features, params, mode)
}

/// Per-frame base feature maps for a whole track.
pub fn frame_features<T: Scalar>(
    track: &AudioTrack<T>,
    backend: &dyn FeatureBackend<T>,
) -> Result<Vec<FrameFeature<T>>> {
    let frames = track.frame_count();
    if frames == 0 {
        return Err(Error::Data(
            "audio track does not cover a single video frame".into(),
        ));
    }
    (0..frames)
        .map(|i| base_features(&extract_window(track, i)?, backend))
        .collect()
}

/// Apply the second smoothing stage to precomputed frame features.
pub fn smooth_features<T: Scalar>(
    features: &[FrameFeature<T>],
    params: &TemporalFilterParams<T>,
    mode: SmoothingMode,
) -> Result<Vec<SmoothedAudioFeature<T>>> {
    if features.is_empty() {
        return Err(Error::Data("no frame features to smooth".into()));
    }
    let frames = features.len();
    let mut out = Vec::with_capacity(frames);
    for i in 0..frames {
        let neigh = neighborhood_features(features, i, mode);
        out.push(temporal_filter(&neigh, params)?);
    }
    Ok(out)
}

/// The 17 features feeding frame `i` (edge-clamped, or 17 copies of the
/// center in [`SmoothingMode::CenterOnly`]).
pub fn neighborhood_features<T: Scalar>(
    features: &[FrameFeature<T>],
    i: usize,
    mode: SmoothingMode,
) -> Vec<FrameFeature<T>> {
    let last = features.len() as isize - 1;
    (-(FILTER_HALF_WINDOW as isize)..=FILTER_HALF_WINDOW as isize)
        .map(|d| {
            let j = match mode {
                SmoothingMode::TemporalFilter => (i as isize + d).clamp(0, last) as usize,
                SmoothingMode::CenterOnly => i,
            };
            features[j].clone()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn ramp_track(n: usize) -> AudioTrack<f64> {
        let samples: Vec<f64> = (0..n).map(|i| i as f64).collect();
        AudioTrack::from_samples(samples, 16_000, 25.0).unwrap()
    }

    #[test]
    fn interval_is_320_samples_at_16k() {
        let track = ramp_track(16_000);
        assert_eq!(track.interval_samples(), 320);
        let w = extract_window(&track, 12).unwrap();
        assert_eq!(w.intervals.shape(), &[16, 320]);
        // 16 intervals x 320 samples = 5120 samples total
        assert_eq!(w.intervals.len(), 5120);
    }

    #[test]
    fn window_centered_on_frame() {
        // frame 20 at 25 fps -> t = 0.8 s -> sample 12800 on a long track
        let track = ramp_track(32_000);
        let w = extract_window(&track, 20).unwrap();
        let c = 12_800f64;
        assert_eq!(w.intervals[[0, 0]], c - 2560.0);
        assert_eq!(w.intervals[[15, 319]], c + 2560.0 - 1.0);
        // contiguous coverage of [c - 2560, c + 2560)
        assert_eq!(w.intervals[[8, 0]], c);
    }

    #[test]
    fn leading_window_is_edge_clamped() {
        let track = ramp_track(16_000);
        let w = extract_window(&track, 0).unwrap();
        // everything before sample 0 clamps to sample 0
        for j in 0..8 {
            assert_eq!(w.intervals[[j, 0]], 0.0);
        }
        assert_eq!(w.intervals[[0, 319]], 0.0);
        // the second half is real signal
        assert_eq!(w.intervals[[8, 1]], 1.0);
    }

    #[test]
    fn frame_outside_video_is_index_error() {
        let track = ramp_track(16_000); // 1 s -> 25 frames
        assert_eq!(track.frame_count(), 25);
        assert!(matches!(
            extract_window(&track, 25).unwrap_err(),
            Error::Index(_)
        ));
    }

    #[test]
    fn adjacent_windows_overlap_at_video_rate() {
        // At 25 fps the frame spacing (0.04 s) is far below the window span
        // (0.32 s), so consecutive windows share samples.
        let track = ramp_track(32_000);
        let a = extract_window(&track, 10).unwrap();
        let b = extract_window(&track, 11).unwrap();
        // frame 11 starts 640 samples later; its first samples lie inside a's window
        assert_eq!(b.intervals[[0, 0]], a.intervals[[2, 0]]);
    }

    #[test]
    fn silence_maps_to_zero_features() {
        let backend = FilterbankBackend::new(16_000);
        let w = AudioWindow {
            intervals: Array2::<f64>::zeros((16, 320)),
        };
        let f = base_features(&w, &backend).unwrap();
        assert!(f.map().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_windows_identical_features() {
        let track = ramp_track(16_000);
        let backend = FilterbankBackend::new(16_000);
        let w = extract_window(&track, 7).unwrap();
        let f1 = base_features(&w, &backend).unwrap();
        let f2 = base_features(&w, &backend).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn sine_at_band_center_concentrates_energy() {
        let backend = FilterbankBackend::new(16_000);
        let centers = backend.band_centers();
        let band = 14;
        // snap the tone to the nearest DFT bin (50 Hz at 320 samples)
        let freq = (centers[band] / 50.0).round() * 50.0;
        let samples: Vec<f64> = (0..320)
            .map(|n| (2.0 * std::f64::consts::PI * freq * n as f64 / 16_000.0).sin() * 0.5)
            .collect();
        let mut intervals = Array2::zeros((16, 320));
        for j in 0..16 {
            for k in 0..320 {
                intervals[[j, k]] = samples[k];
            }
        }
        let f = base_features(&AudioWindow { intervals }, &backend).unwrap();

        // independent oracle: direct DFT of the sine, same triangle weights
        let mut best = (0usize, f64::MIN);
        for b in 0..FEATURE_BANDS {
            let v = f.map()[[0, b]];
            if v > best.1 {
                best = (b, v);
            }
        }
        assert_eq!(best.0, band, "energy should peak in band {band}");

        let oracle = oracle_band_energies(&samples, 16_000);
        let argmax_oracle = oracle
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax_oracle, band);
        for b in 0..FEATURE_BANDS {
            assert!(
                (f.map()[[0, b]] - (1.0 + oracle[b]).ln()).abs() < 1e-9,
                "band {b}"
            );
        }
    }

    /// Test-local band energies: direct DFT + triangle weights, written
    /// independently of the backend implementation.
    fn oracle_band_energies(samples: &[f64], rate: u32) -> Vec<f64> {
        let s = samples.len();
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let mel_inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let mmax = mel(rate as f64 / 2.0);
        let edges: Vec<f64> = (0..FEATURE_BANDS + 2)
            .map(|i| mel_inv(mmax * i as f64 / (FEATURE_BANDS + 1) as f64))
            .collect();
        let mut energies = vec![0.0; FEATURE_BANDS];
        for k in 0..=s / 2 {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &x) in samples.iter().enumerate() {
                let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / s as f64;
                re += x * ph.cos();
                im += x * ph.sin();
            }
            let p = (re * re + im * im) / s as f64;
            let f = k as f64 * rate as f64 / s as f64;
            for b in 0..FEATURE_BANDS {
                let (lo, mid, hi) = (edges[b], edges[b + 1], edges[b + 2]);
                if f > lo && f < hi {
                    let w = if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    };
                    energies[b] += w * p;
                }
            }
        }
        energies
    }

    fn random_feature(rng: &mut Prng) -> FrameFeature<f64> {
        let data = rng.normal_tensor::<f64>(&[16, FEATURE_BANDS]);
        FrameFeature::new(
            data.into_dimensionality::<ndarray::Ix2>().unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn identical_neighborhood_reduces_to_projection() {
        let mut rng = Prng::seed_from_u64(11);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let f = random_feature(&mut rng);
        let neigh: Vec<_> = (0..NEIGHBORHOOD).map(|_| f.clone()).collect();
        let (a, weights) = temporal_filter_with_weights(&neigh, &params).unwrap();

        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6, "weights sum {sum}");

        // Convex mixture of identical items = the shared value projection.
        let flat = f.flatten();
        let w = params.store().get("value.weight");
        let b = params.store().get("value.bias");
        let mut value = vec![0.0f64; AUDIO_FEATURE_DIM];
        for (j, val) in value.iter_mut().enumerate() {
            let mut acc = b[[j]];
            for (i, &x) in flat.iter().enumerate() {
                acc += x * w[[i, j]];
            }
            *val = acc;
        }
        let wo = params.store().get("out.weight");
        let bo = params.store().get("out.bias");
        for j in 0..AUDIO_FEATURE_DIM {
            let mut acc = bo[[j]];
            for (i, &v) in value.iter().enumerate() {
                acc += v * wo[[i, j]];
            }
            assert!((a.values()[j] - acc).abs() < 1e-9, "dim {j}");
        }
    }

    #[test]
    fn weights_always_sum_to_one() {
        let mut rng = Prng::seed_from_u64(23);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        for _ in 0..5 {
            let neigh: Vec<_> = (0..NEIGHBORHOOD).map(|_| random_feature(&mut rng)).collect();
            let (_, weights) = temporal_filter_with_weights(&neigh, &params).unwrap();
            let sum: f64 = weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scaled_logits_approach_one_hot_selection() {
        let mut rng = Prng::seed_from_u64(31);
        let mut params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let neigh: Vec<_> = (0..NEIGHBORHOOD).map(|_| random_feature(&mut rng)).collect();

        // Temperature -> 0 by scaling the query: the content scores swamp
        // the positional bias and attention becomes one-hot.
        params.store_mut().get_mut("query").mapv_inplace(|v| v * 1e4);
        let (a, weights) = temporal_filter_with_weights(&neigh, &params).unwrap();
        let argmax = weights
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.partial_cmp(y.1).unwrap())
            .unwrap()
            .0;
        assert!(weights[argmax] > 1.0 - 1e-9, "weights {weights:?}");
        let one_hot: Vec<_> = (0..NEIGHBORHOOD).map(|_| neigh[argmax].clone()).collect();
        let a_sel = temporal_filter(&one_hot, &params).unwrap();
        for (x, y) in a.values().iter().zip(a_sel.values().iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_neighborhood_length_is_shape_error() {
        let mut rng = Prng::seed_from_u64(37);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let neigh: Vec<_> = (0..5).map(|_| random_feature(&mut rng)).collect();
        assert!(matches!(
            temporal_filter(&neigh, &params).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn one_frame_video_uses_17_copies() {
        let track = ramp_track(640); // exactly 1 frame at 25 fps
        assert_eq!(track.frame_count(), 1);
        let backend = FilterbankBackend::new(16_000);
        let mut rng = Prng::seed_from_u64(41);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let seq =
            smooth_sequence(&track, &params, &backend, SmoothingMode::TemporalFilter).unwrap();
        assert_eq!(seq.len(), 1);
        let f = frame_features(&track, &backend).unwrap();
        let copies: Vec<_> = (0..NEIGHBORHOOD).map(|_| f[0].clone()).collect();
        let direct = temporal_filter(&copies, &params).unwrap();
        assert_eq!(seq[0], direct);
    }

    #[test]
    fn constant_audio_gives_identical_features_per_frame() {
        let samples = vec![0.25f64; 16_000 * 2];
        let track = AudioTrack::from_samples(samples, 16_000, 25.0).unwrap();
        let backend = FilterbankBackend::new(16_000);
        let mut rng = Prng::seed_from_u64(43);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let seq =
            smooth_sequence(&track, &params, &backend, SmoothingMode::TemporalFilter).unwrap();
        for a in &seq[1..] {
            assert_eq!(a, &seq[0]);
        }
    }

    #[test]
    fn hundred_frame_track_shapes() {
        let track = ramp_track(64_000); // 4 s -> 100 frames
        assert_eq!(track.frame_count(), 100);
        let backend = FilterbankBackend::new(16_000);
        let mut rng = Prng::seed_from_u64(47);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let seq =
            smooth_sequence(&track, &params, &backend, SmoothingMode::TemporalFilter).unwrap();
        assert_eq!(seq.len(), 100);
        for a in &seq {
            assert_eq!(a.values().len(), AUDIO_FEATURE_DIM);
        }
    }

    #[test]
    fn filtering_smooths_white_noise_sequences() {
        let mut rng = Prng::seed_from_u64(53);
        let samples: Vec<f64> = (0..32_000).map(|_| rng.normal() * 0.3).collect();
        let track = AudioTrack::from_samples(samples, 16_000, 25.0).unwrap();
        let backend = FilterbankBackend::new(16_000);
        let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
        let filtered =
            smooth_sequence(&track, &params, &backend, SmoothingMode::TemporalFilter).unwrap();
        let center =
            smooth_sequence(&track, &params, &backend, SmoothingMode::CenterOnly).unwrap();
        let mean_l2 = |seq: &[SmoothedAudioFeature<f64>]| {
            let mut acc = 0.0;
            for pair in seq.windows(2) {
                let d: f64 = pair[0]
                    .values()
                    .iter()
                    .zip(pair[1].values().iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                acc += d.sqrt();
            }
            acc / (seq.len() - 1) as f64
        };
        let smooth = mean_l2(&filtered);
        let rough = mean_l2(&center);
        assert!(
            smooth < rough,
            "temporal filter should smooth consecutive features: {smooth} vs {rough}"
        );
    }
}
