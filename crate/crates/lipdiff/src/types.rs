//! Domain types shared across modules.
//!
//! Images are stored height x width x channel. Pixel values live in
//! `[-1, 1]`; latent values are unbounded reals.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::{AUDIO_FEATURE_DIM, CONTEXT_DIM, LANDMARK_FEATURE_DIM, NUM_LANDMARKS};

/// An image in pixel space: `(H, W, 3)`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelImage<T: Scalar>(Array3<T>);

impl<T: Scalar> PixelImage<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "pixel image must have 3 channels, got {:?}",
                data.shape()
            )));
        }
        Ok(PixelImage(data))
    }

    /// Build from unit-range `[0, 1]` RGB data.
    pub fn from_unit(data: Array3<f64>) -> Result<Self> {
        let mapped = data.mapv(|v| T::from_f64c(2.0 * v.clamp(0.0, 1.0) - 1.0));
        PixelImage::new(mapped)
    }

    /// Convert to unit-range `[0, 1]` RGB (used by the metrics and probes).
    pub fn to_unit(&self) -> Array3<f64> {
        self.0.mapv(|v| (v.to_f64c() + 1.0) / 2.0)
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn data(&self) -> &Array3<T> {
        &self.0
    }

    pub fn data_mut(&mut self) -> &mut Array3<T> {
        &mut self.0
    }

    pub fn into_inner(self) -> Array3<T> {
        self.0
    }

    /// `(1, 3, H, W)` layout for network input.
    pub fn to_nchw(&self) -> ArrayD<T> {
        hwc_to_nchw(&self.0)
    }

    pub fn from_nchw(data: &ArrayD<T>) -> Result<Self> {
        PixelImage::new(nchw_to_hwc(data)?)
    }
}

/// A latent-space map: `(h, w, 3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentImage<T: Scalar>(Array3<T>);

impl<T: Scalar> LatentImage<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.shape()[2] != 3 {
            return Err(Error::Shape(format!(
                "latent image must have 3 channels, got {:?}",
                data.shape()
            )));
        }
        Ok(LatentImage(data))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        LatentImage(Array3::zeros((h, w, 3)))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn data(&self) -> &Array3<T> {
        &self.0
    }

    pub fn into_inner(self) -> Array3<T> {
        self.0
    }

    pub fn to_nchw(&self) -> ArrayD<T> {
        hwc_to_nchw(&self.0)
    }

    pub fn from_nchw(data: &ArrayD<T>) -> Result<Self> {
        LatentImage::new(nchw_to_hwc(data)?)
    }
}

fn hwc_to_nchw<T: Scalar>(a: &Array3<T>) -> ArrayD<T> {
    let (h, w, c) = a.dim();
    a.view()
        .permuted_axes([2, 0, 1])
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order(IxDyn(&[1, c, h, w]))
        .unwrap()
}

fn nchw_to_hwc<T: Scalar>(a: &ArrayD<T>) -> Result<Array3<T>> {
    if a.ndim() != 4 || a.shape()[0] != 1 {
        return Err(Error::Shape(format!(
            "expected (1, c, h, w) tensor, got {:?}",
            a.shape()
        )));
    }
    let (c, h, w) = (a.shape()[1], a.shape()[2], a.shape()[3]);
    let hwc = a
        .view()
        .into_shape_with_order(IxDyn(&[c, h, w]))
        .unwrap()
        .permuted_axes(IxDyn(&[1, 2, 0]))
        .as_standard_layout()
        .to_owned();
    Ok(hwc
        .into_dimensionality::<ndarray::Ix3>()
        .expect("3-d after squeeze"))
}

/// 68 facial landmarks, coordinates normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet<T: Scalar>(Array2<T>);

impl<T: Scalar> LandmarkSet<T> {
    pub fn new(points: Array2<T>) -> Result<Self> {
        if points.shape() != [NUM_LANDMARKS, 2] {
            return Err(Error::Shape(format!(
                "expected {NUM_LANDMARKS} x 2 landmarks, got {:?}",
                points.shape()
            )));
        }
        Ok(LandmarkSet(points))
    }

    pub fn points(&self) -> &Array2<T> {
        &self.0
    }

    pub fn points_mut(&mut self) -> &mut Array2<T> {
        &mut self.0
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        (self.0[[i, 0]].to_f64c(), self.0[[i, 1]].to_f64c())
    }

    /// Flattened `[x0, y0, x1, y1, ...]` vector of length 136.
    pub fn flatten(&self) -> Array1<T> {
        Array1::from_iter(self.0.iter().copied())
    }
}

/// Smoothed audio feature `a`, dimension 64.
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothedAudioFeature<T: Scalar>(Array1<T>);

impl<T: Scalar> SmoothedAudioFeature<T> {
    pub fn new(v: Array1<T>) -> Result<Self> {
        if v.len() != AUDIO_FEATURE_DIM {
            return Err(Error::Shape(format!(
                "audio feature must have dim {AUDIO_FEATURE_DIM}, got {}",
                v.len()
            )));
        }
        if v.iter().any(|e| !e.is_finite()) {
            return Err(Error::Feature("non-finite audio feature".into()));
        }
        Ok(SmoothedAudioFeature(v))
    }

    pub fn values(&self) -> &Array1<T> {
        &self.0
    }
}

/// Landmark feature `l`, dimension 64.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkFeature<T: Scalar>(Array1<T>);

impl<T: Scalar> LandmarkFeature<T> {
    pub fn new(v: Array1<T>) -> Result<Self> {
        if v.len() != LANDMARK_FEATURE_DIM {
            return Err(Error::Shape(format!(
                "landmark feature must have dim {LANDMARK_FEATURE_DIM}, got {}",
                v.len()
            )));
        }
        Ok(LandmarkFeature(v))
    }

    pub fn values(&self) -> &Array1<T> {
        &self.0
    }
}

/// Channel-stacked visual condition `(h, w, 9)`:
/// `[0..3] = noisy map, [3..6] = masked ground truth, [6..9] = reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualCondition<T: Scalar>(Array3<T>);

impl<T: Scalar> VisualCondition<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        if data.shape()[2] != 9 {
            return Err(Error::Shape(format!(
                "visual condition must have 9 channels, got {:?}",
                data.shape()
            )));
        }
        Ok(VisualCondition(data))
    }

    pub fn data(&self) -> &Array3<T> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }

    fn slice3(&self, start: usize) -> Array3<T> {
        self.0
            .slice_axis(Axis(2), ndarray::Slice::from(start..start + 3))
            .to_owned()
    }

    pub fn noisy(&self) -> LatentImage<T> {
        LatentImage(self.slice3(0))
    }

    pub fn masked_truth(&self) -> LatentImage<T> {
        LatentImage(self.slice3(3))
    }

    pub fn reference(&self) -> LatentImage<T> {
        LatentImage(self.slice3(6))
    }

    /// `(1, 9, h, w)` layout for the denoiser.
    pub fn to_nchw(&self) -> ArrayD<T> {
        let (h, w, c) = self.0.dim();
        self.0
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .unwrap()
    }
}

/// Concatenated latent condition `[a; l]`, dimension 128.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCondition<T: Scalar>(Array1<T>);

impl<T: Scalar> LatentCondition<T> {
    pub fn new(v: Array1<T>) -> Result<Self> {
        if v.len() != CONTEXT_DIM {
            return Err(Error::Shape(format!(
                "latent condition must have dim {CONTEXT_DIM}, got {}",
                v.len()
            )));
        }
        Ok(LatentCondition(v))
    }

    pub fn values(&self) -> &Array1<T> {
        &self.0
    }

    pub fn audio_slice(&self) -> Array1<T> {
        self.0.slice(ndarray::s![..AUDIO_FEATURE_DIM]).to_owned()
    }

    pub fn landmark_slice(&self) -> Array1<T> {
        self.0.slice(ndarray::s![AUDIO_FEATURE_DIM..]).to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nchw_roundtrip_preserves_layout() {
        let mut a = Array3::<f64>::zeros((2, 3, 3));
        for (i, v) in a.iter_mut().enumerate() {
            *v = i as f64;
        }
        let img = PixelImage::new(a.clone()).unwrap();
        let back = PixelImage::from_nchw(&img.to_nchw()).unwrap();
        assert_eq!(back.data(), &a);
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let a = Array3::<f64>::zeros((2, 2, 4));
        assert!(matches!(PixelImage::new(a).unwrap_err(), Error::Shape(_)));
    }
}
