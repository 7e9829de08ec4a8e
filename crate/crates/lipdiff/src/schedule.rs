//! Noise schedule and the forward diffusion process.
//!
//! Steps are indexed `t in 0..T` with `t = 0` the least-noised step.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Number of denoising steps `T`.
    pub steps: usize,
    pub kind: ScheduleKind,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: 200,
            kind: ScheduleKind::Linear,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(self.beta_start > 0.0 && self.beta_start < 1.0) {
            return Err(Error::Config(format!(
                "beta_start {} outside (0, 1)",
                self.beta_start
            )));
        }
        if !(self.beta_end > 0.0 && self.beta_end < 1.0) {
            return Err(Error::Config(format!(
                "beta_end {} outside (0, 1)",
                self.beta_end
            )));
        }
        if self.beta_start > self.beta_end {
            return Err(Error::Config(format!(
                "beta_start {} > beta_end {}",
                self.beta_start, self.beta_end
            )));
        }
        Ok(())
    }
}

/// Per-step beta/alpha tables governing forward and reverse diffusion.
#[derive(Clone, Debug)]
pub struct NoiseSchedule<T: Scalar> {
    betas: Vec<T>,
    alphas: Vec<T>,
    alpha_bars: Vec<T>,
}

/// Build the tables for a validated config.
pub fn build_schedule<T: Scalar>(config: &ScheduleConfig) -> Result<NoiseSchedule<T>> {
    config.validate()?;
    let t_total = config.steps;
    let mut betas = Vec::with_capacity(t_total);
    match config.kind {
        ScheduleKind::Linear => {
            for t in 0..t_total {
                let frac = if t_total > 1 {
                    t as f64 / (t_total - 1) as f64
                } else {
                    0.0
                };
                betas.push(config.beta_start + (config.beta_end - config.beta_start) * frac);
            }
        }
    }
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(t_total);
    let mut prod = 1.0;
    for &a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        betas: betas.into_iter().map(T::from_f64c).collect(),
        alphas: alphas.into_iter().map(T::from_f64c).collect(),
        alpha_bars: alpha_bars.into_iter().map(T::from_f64c).collect(),
    })
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.len() {
            return Err(Error::Index(format!(
                "step {t} out of range for schedule of length {}",
                self.len()
            )));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(self.betas[t])
    }

    pub fn alpha(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(self.alphas[t])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.check(t)?;
        Ok(self.alpha_bars[t])
    }

    pub fn betas(&self) -> &[T] {
        &self.betas
    }

    pub fn alphas(&self) -> &[T] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[T] {
        &self.alpha_bars
    }
}

fn check_same_shape<T: Scalar>(a: &ArrayD<T>, b: &ArrayD<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Forward diffusion: `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(
    z0: &ArrayD<T>,
    t: usize,
    eps: &ArrayD<T>,
    sched: &NoiseSchedule<T>,
) -> Result<ArrayD<T>> {
    check_same_shape(z0, eps, "q_sample signal vs noise")?;
    let abar = sched.alpha_bar(t)?;
    let c_signal = abar.sqrt();
    let c_noise = (T::one() - abar).sqrt();
    let mut out = z0.mapv(|v| v * c_signal);
    ndarray::Zip::from(&mut out).and(eps).for_each(|o, &e| {
        *o += c_noise * e;
    });
    Ok(out)
}

/// Invert [`q_sample`] given a noise estimate:
/// `(z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_z0<T: Scalar>(
    z_t: &ArrayD<T>,
    eps_hat: &ArrayD<T>,
    t: usize,
    sched: &NoiseSchedule<T>,
) -> Result<ArrayD<T>> {
    check_same_shape(z_t, eps_hat, "predict_z0 sample vs noise estimate")?;
    let abar = sched.alpha_bar(t)?;
    let c_noise = (T::one() - abar).sqrt();
    let inv_signal = T::one() / abar.sqrt();
    let mut out = z_t.clone();
    ndarray::Zip::from(&mut out).and(eps_hat).for_each(|o, &e| {
        *o = (*o - c_noise * e) * inv_signal;
    });
    Ok(out)
}
