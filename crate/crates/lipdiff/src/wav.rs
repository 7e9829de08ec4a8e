//! WAV audio I/O.
//!
//! Tracks are 16 kHz mono internally; files at other rates are linearly
//! resampled at load and stereo files are averaged to mono.

use std::path::Path;

use crate::error::{Error, Result};

/// Canonical sample rate of the pipeline.
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Read a PCM WAV file into mono `[-1, 1]` samples at 16 kHz.
pub fn load_wav(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Data(format!("cannot open wav {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Data(format!("wav {} has no channels", path.display())));
    }
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let max = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| v as f64 / max))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("wav {}: {e}", path.display())))?
        }
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Data(format!("wav {}: {e}", path.display())))?,
    };
    let mono: Vec<f64> = raw
        .chunks(channels)
        .map(|frame| frame.iter().sum::<f64>() / channels as f64)
        .collect();
    if mono.is_empty() {
        return Err(Error::Data(format!("wav {} is empty", path.display())));
    }
    if spec.sample_rate == TARGET_SAMPLE_RATE {
        Ok(mono)
    } else {
        Ok(resample_linear(&mono, spec.sample_rate, TARGET_SAMPLE_RATE))
    }
}

/// Write mono `[-1, 1]` samples as 16-bit PCM at 16 kHz.
pub fn save_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: TARGET_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Data(format!("cannot create wav {}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::Data(format!("wav write {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Data(format!("wav finalize {}: {e}", path.display())))?;
    Ok(())
}

fn resample_linear(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    let ratio = from as f64 / to as f64;
    let out_len = ((samples.len() as f64) / ratio).floor() as usize;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(samples.len() - 1);
            let frac = pos - lo as f64;
            samples[lo] * (1.0 - frac) + samples[hi] * frac
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.wav");
        let samples: Vec<f64> = (0..1600)
            .map(|i| (i as f64 / 50.0).sin() * 0.5)
            .collect();
        save_wav(&path, &samples).unwrap();
        let back = load_wav(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        for (a, b) in back.iter().zip(&samples) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn resample_halves_length() {
        let samples: Vec<f64> = (0..320).map(|i| i as f64).collect();
        let out = resample_linear(&samples, 32_000, 16_000);
        assert_eq!(out.len(), 160);
        assert!((out[1] - 2.0).abs() < 1e-12); // every other sample
    }
}
