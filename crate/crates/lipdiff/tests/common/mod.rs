//! Shared helpers for the integration suites.
#![allow(dead_code)]

use lipdiff::gradcheck::{relative_error, spot_check_tensor};
use lipdiff::nn::{GradStore, ParamStore};
use lipdiff::types::PixelImage;
use lipdiff::visual::Region;
use lipdiff::Scalar;

pub mod grads;

/// Verify analytic gradients of every tensor in a store against central
/// differences. `eval` recomputes the scalar objective from a modified
/// store. Tensors whose gradient is numerically zero everywhere (e.g. dead
/// query projections) are skipped: a relative comparison is meaningless
/// there.
pub fn check_store_gradients(
    label: &str,
    store: &ParamStore<f64>,
    analytic: &GradStore<f64>,
    step: f64,
    tol: f64,
    probes: usize,
    mut eval: impl FnMut(&ParamStore<f64>) -> f64,
) -> usize {
    let mut checked = 0;
    for (name, value) in store.iter() {
        let grad = analytic.get(name);
        let max_abs = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max_abs < 1e-8 {
            continue;
        }
        let checks = spot_check_tensor(name, value, grad, step, probes, |probe| {
            let mut modified = store.clone();
            *modified.get_mut(name) = probe.clone();
            eval(&modified)
        });
        for c in checks {
            assert!(
                c.rel_error < tol,
                "{label}: {}[{}] analytic {} vs numeric {} (rel {})",
                c.name,
                c.index,
                c.analytic,
                c.numeric,
                c.rel_error
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "{label}: no gradients were checkable");
    checked
}

/// Largest relative disagreement over the spot checks of one tensor.
pub fn max_rel_error(
    store: &ParamStore<f64>,
    analytic: &GradStore<f64>,
    name: &str,
    step: f64,
    probes: usize,
    mut eval: impl FnMut(&ParamStore<f64>) -> f64,
) -> f64 {
    let checks = spot_check_tensor(name, store.get(name), analytic.get(name), step, probes, |p| {
        let mut modified = store.clone();
        *modified.get_mut(name) = p.clone();
        eval(&modified)
    });
    checks
        .iter()
        .map(|c| relative_error(c.analytic, c.numeric))
        .fold(0.0, f64::max)
}

/// Pearson correlation of two equally long series.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt()).max(1e-12)
}

/// Mean absolute pixel difference between consecutive frames, optionally
/// restricted to a normalized region.
pub fn mean_adjacent_diff<T: Scalar>(frames: &[PixelImage<T>], region: Option<&[Region]>) -> f64 {
    assert!(frames.len() >= 2);
    let mut acc = 0.0;
    for i in 1..frames.len() {
        let a = frames[i - 1].to_unit();
        let b = frames[i].to_unit();
        let (h, w, _) = a.dim();
        let mut sum = 0.0;
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if let Some(regions) = region {
                    let cx = (x as f64 + 0.5) / w as f64;
                    let cy = (y as f64 + 0.5) / h as f64;
                    // a pixel counts when it lies in the mouth region of
                    // either endpoint frame
                    if !(regions[i - 1].contains(cx, cy) || regions[i].contains(cx, cy)) {
                        continue;
                    }
                }
                for c in 0..3 {
                    sum += (a[[y, x, c]] - b[[y, x, c]]).abs();
                    count += 1;
                }
            }
        }
        acc += sum / count.max(1) as f64;
    }
    acc / (frames.len() - 1) as f64
}
