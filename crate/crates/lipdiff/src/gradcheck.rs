//! Finite-difference gradient verification.
//!
//! The checks here are the independent oracle against which every
//! backpropagated gradient in this crate is validated; they never touch the
//! autodiff tape.

use ndarray::ArrayD;

use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `x0`, one element at a time.
pub fn central_diff<T: Scalar>(
    x0: &ArrayD<T>,
    step: f64,
    mut f: impl FnMut(&ArrayD<T>) -> T,
) -> ArrayD<T> {
    let h = T::from_f64c(step);
    let two_h = h + h;
    let mut grad = ArrayD::zeros(x0.raw_dim());
    let mut probe = x0.clone();
    for idx in 0..x0.len() {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / two_h;
    }
    grad
}

/// Relative disagreement between an analytic and a numeric derivative,
/// guarded against division by near-zero values.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-10 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Outcome of spot-checking a parameter tensor.
#[derive(Debug, Clone)]
pub struct SpotCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Compare an analytic gradient against central differences at the `probes`
/// entries of largest magnitude (well-conditioned for a relative test).
///
/// `f` evaluates the scalar objective given a perturbed copy of the tensor.
pub fn spot_check_tensor<T: Scalar>(
    name: &str,
    value: &ArrayD<T>,
    analytic: &ArrayD<T>,
    step: f64,
    probes: usize,
    mut f: impl FnMut(&ArrayD<T>) -> T,
) -> Vec<SpotCheck> {
    let mut order: Vec<usize> = (0..analytic.len()).collect();
    let asl = analytic.as_slice().unwrap();
    order.sort_by(|&i, &j| {
        asl[j]
            .abs()
            .partial_cmp(&asl[i].abs())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let h = T::from_f64c(step);
    let two_h = h + h;
    let mut out = Vec::new();
    let mut probe = value.clone();
    for &idx in order.iter().take(probes) {
        let orig = probe.as_slice().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        let numeric = ((fp - fm) / two_h).to_f64c();
        let analytic = asl[idx].to_f64c();
        out.push(SpotCheck {
            name: name.to_string(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    out
}
