//! Image quality metrics.
//!
//! PSNR and SSIM operate on unit-range `[0, 1]` data; the `_images`
//! variants map `[-1, 1]` pixel images first. LPIPS and SyncNet require
//! external pretrained networks and are interface slots only: reports
//! carry `None` and render them as `n/a`.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::types::PixelImage;

/// PSNR cap returned for (near-)identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio in dB over unit-range data.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "psnr shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let mse = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        Ok(PSNR_CAP_DB)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// PSNR of two `[-1, 1]` pixel images (mapped to `[0, 1]`).
pub fn psnr_images<T: Scalar>(a: &PixelImage<T>, b: &PixelImage<T>) -> Result<f64> {
    psnr(&a.to_unit(), &b.to_unit())
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as isize;
    let mut k: Vec<f64> = (-half..=half)
        .map(|i| (-(i * i) as f64 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

fn to_gray(a: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = a.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (a[[y, x, 0]] + a[[y, x, 1]] + a[[y, x, 2]]) / 3.0
    })
}

/// Separable Gaussian filter, valid region only.
fn filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let n = k.len();
    let mut rows = Array2::zeros((h, w - n + 1));
    for y in 0..h {
        for x in 0..w - n + 1 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - n + 1, w - n + 1));
    for y in 0..h - n + 1 {
        for x in 0..w - n + 1 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Mean local SSIM over unit-range data: 11x11 Gaussian window
/// (sigma 1.5), C1 = 0.01^2, C2 = 0.03^2, grayscale by channel mean.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "ssim shapes differ: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let (h, w, _) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} ssim window"
        )));
    }
    let k = gaussian_kernel();
    let ga = to_gray(a);
    let gb = to_gray(b);
    let mu_a = filter_valid(&ga, &k);
    let mu_b = filter_valid(&gb, &k);
    let aa = filter_valid(&(&ga * &ga), &k);
    let bb = filter_valid(&(&gb * &gb), &k);
    let ab = filter_valid(&(&ga * &gb), &k);
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 0..mu_a.dim().0 {
        for x in 0..mu_a.dim().1 {
            let (ma, mb) = (mu_a[[y, x]], mu_b[[y, x]]);
            let va = aa[[y, x]] - ma * ma;
            let vb = bb[[y, x]] - mb * mb;
            let cov = ab[[y, x]] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

/// SSIM of two `[-1, 1]` pixel images.
pub fn ssim_images<T: Scalar>(a: &PixelImage<T>, b: &PixelImage<T>) -> Result<f64> {
    ssim(&a.to_unit(), &b.to_unit())
}

/// Per-frame quality row.
#[derive(Clone, Debug)]
pub struct FrameQuality {
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Aggregate quality report. `lpips` and `syncnet` need pretrained
/// networks and stay unimplemented (`None` -> printed as `n/a`).
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub per_frame: Vec<FrameQuality>,
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub lpips: Option<f64>,
    pub syncnet: Option<f64>,
}

impl MetricReport {
    /// Compare prediction/ground-truth frame pairs.
    pub fn compare<T: Scalar>(pred: &[PixelImage<T>], gt: &[PixelImage<T>]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::Data(format!(
                "frame count mismatch: {} predictions vs {} ground truth",
                pred.len(),
                gt.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Data("no frames to compare".into()));
        }
        let mut per_frame = Vec::with_capacity(pred.len());
        for (i, (p, g)) in pred.iter().zip(gt.iter()).enumerate() {
            per_frame.push(FrameQuality {
                frame: i,
                psnr_db: psnr_images(p, g)?,
                ssim: ssim_images(p, g)?,
            });
        }
        let n = per_frame.len() as f64;
        let mean_psnr_db = per_frame.iter().map(|f| f.psnr_db).sum::<f64>() / n;
        let mean_ssim = per_frame.iter().map(|f| f.ssim).sum::<f64>() / n;
        Ok(MetricReport {
            per_frame,
            mean_psnr_db,
            mean_ssim,
            lpips: None,
            syncnet: None,
        })
    }

    /// CSV rows: `frame,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,psnr,ssim\n");
        for f in &self.per_frame {
            out.push_str(&format!("{},{:.6},{:.6}\n", f.frame, f.psnr_db, f.ssim));
        }
        out
    }

    /// One-line human summary with the unimplemented slots shown as n/a.
    pub fn summary(&self) -> String {
        let slot = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "n/a".to_string(),
        };
        format!(
            "mean_psnr={:.3} dB mean_ssim={:.4} lpips={} syncnet={}",
            self.mean_psnr_db,
            self.mean_ssim,
            slot(self.lpips),
            slot(self.syncnet)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use proptest::prelude::*;

    fn unit_noise(h: usize, w: usize, seed: u64) -> Array3<f64> {
        let mut rng = Prng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.uniform())
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = unit_noise(16, 16, 0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn known_mse_gives_20db() {
        let a = Array3::<f64>::zeros((8, 8, 3));
        let b = Array3::<f64>::from_elem((8, 8, 3), 0.1);
        // MSE = 0.01 -> 10 log10(1/0.01) = 20 dB
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-12);
    }

    #[test]
    fn zeros_vs_ones_is_zero_db() {
        let a = Array3::<f64>::zeros((8, 8, 3));
        let b = Array3::<f64>::ones((8, 8, 3));
        assert!((psnr(&a, &b).unwrap() - 0.0).abs() < 1e-12);
    }

    #[test]
    fn psnr_shape_mismatch() {
        let a = Array3::<f64>::zeros((8, 8, 3));
        let b = Array3::<f64>::zeros((8, 9, 3));
        assert!(matches!(psnr(&a, &b).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = unit_noise(16, 16, 3);
        let s = ssim(&a, &a).unwrap();
        assert!((s - 1.0).abs() < 1e-12, "ssim {s}");
    }

    #[test]
    fn ssim_negative_for_inverted_pattern() {
        // zero-mean-centered checker in unit range: x and 1-x anti-correlate
        let a = Array3::from_shape_fn((16, 16, 3), |(y, x, _)| {
            if (x + y) % 2 == 0 {
                0.9
            } else {
                0.1
            }
        });
        let b = a.mapv(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let a = Array3::<f64>::from_elem((16, 16, 3), 0.5);
        let b = Array3::<f64>::from_elem((16, 16, 3), 0.6);
        let s = ssim(&a, &b).unwrap();
        // contrast/structure terms are 1; luminance term:
        let expect = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.5 * 0.5 + 0.6 * 0.6 + SSIM_C1);
        assert!((s - expect).abs() < 1e-9, "ssim {s} vs {expect}");
    }

    #[test]
    fn ssim_too_small_image_is_error() {
        let a = Array3::<f64>::zeros((8, 8, 3));
        assert!(matches!(ssim(&a, &a).unwrap_err(), Error::Shape(_)));
    }

    #[test]
    fn report_carries_na_slots() {
        let mk = |seed| PixelImage::<f64>::from_unit(unit_noise(16, 16, seed)).unwrap();
        let pred = vec![mk(1), mk(2)];
        let gt = vec![mk(1), mk(3)];
        let report = MetricReport::compare(&pred, &gt).unwrap();
        assert_eq!(report.per_frame.len(), 2);
        assert!(report.lpips.is_none() && report.syncnet.is_none());
        assert!(report.summary().contains("lpips=n/a"));
        assert!(report.summary().contains("syncnet=n/a"));
        let csv = report.to_csv();
        assert!(csv.starts_with("frame,psnr,ssim\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(seed in 0u64..500) {
            let a = unit_noise(12, 12, seed);
            let b = unit_noise(12, 12, seed + 1000);
            prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn psnr_monotone_in_mse(scale in 0.01f64..0.2) {
            let a = Array3::<f64>::from_elem((8, 8, 3), 0.5);
            let small = a.mapv(|v| v + scale * 0.5);
            let large = a.mapv(|v| v + scale);
            prop_assert!(psnr(&a, &small).unwrap() > psnr(&a, &large).unwrap());
        }
    }
}
