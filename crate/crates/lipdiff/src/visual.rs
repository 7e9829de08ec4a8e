//! Identity-preserving visual conditions: reference selection, mouth
//! masking of images and landmarks, the landmark encoder, and assembly of
//! the stacked visual / latent conditions.

use ndarray::{Array1, ArrayD, Axis, IxDyn};
#[cfg(test)]
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{linear_fwd, linear_init, BoundVars, ParamStore};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::types::{
    LandmarkFeature, LandmarkSet, LatentCondition, LatentImage, PixelImage, SmoothedAudioFeature,
    VisualCondition,
};
use crate::{LANDMARK_FEATURE_DIM, MOUTH_LANDMARKS, NUM_LANDMARKS, REFERENCE_MIN_GAP};

/// Pick a reference frame for `target_idx`, uniform over the frames at
/// least [`REFERENCE_MIN_GAP`] away in either direction.
pub fn select_reference(target_idx: usize, num_frames: usize, rng: &mut Prng) -> Result<usize> {
    if num_frames == 0 || target_idx >= num_frames {
        return Err(Error::Index(format!(
            "target {target_idx} outside video of {num_frames} frames"
        )));
    }
    // frames {0..=target-60} before, {target+60..} after
    let before = if target_idx >= REFERENCE_MIN_GAP {
        target_idx - REFERENCE_MIN_GAP + 1
    } else {
        0
    };
    let after_start = target_idx + REFERENCE_MIN_GAP;
    let after = num_frames.saturating_sub(after_start);
    let valid = before + after;
    if valid == 0 {
        return Err(Error::Selection(format!(
            "no frame at distance >= {REFERENCE_MIN_GAP} from target {target_idx} in a video of {num_frames} frames"
        )));
    }
    let k = rng.below(valid);
    Ok(if k < before { k } else { after_start + (k - before) })
}

/// Axis-aligned region in normalized `[0, 1]` image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Region {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Region {
    pub fn empty() -> Self {
        Region {
            x0: 0.0,
            y0: 0.0,
            x1: 0.0,
            y1: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.x1 <= self.x0 || self.y1 <= self.y0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    fn clipped(self) -> Region {
        Region {
            x0: self.x0.clamp(0.0, 1.0),
            y0: self.y0.clamp(0.0, 1.0),
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
        }
    }
}

/// Bounding box of the mouth landmarks expanded by 20% per side, clipped to
/// the image. Degenerate mouth landmarks fall back to the lower third of
/// the face box (or of the image if that is degenerate too).
pub fn mouth_mask_region<T: Scalar>(landmarks: &LandmarkSet<T>) -> Region {
    let bbox = |range: std::ops::Range<usize>| {
        let mut lo = (f64::INFINITY, f64::INFINITY);
        let mut hi = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for i in range {
            let (x, y) = landmarks.point(i);
            lo = (lo.0.min(x), lo.1.min(y));
            hi = (hi.0.max(x), hi.1.max(y));
        }
        Region {
            x0: lo.0,
            y0: lo.1,
            x1: hi.0,
            y1: hi.1,
        }
    };
    let mouth = bbox(MOUTH_LANDMARKS);
    if !mouth.is_empty() {
        let mx = 0.2 * (mouth.x1 - mouth.x0);
        let my = 0.2 * (mouth.y1 - mouth.y0);
        return Region {
            x0: mouth.x0 - mx,
            y0: mouth.y0 - my,
            x1: mouth.x1 + mx,
            y1: mouth.y1 + my,
        }
        .clipped();
    }
    let face = bbox(0..NUM_LANDMARKS);
    if !face.is_empty() {
        let h = face.y1 - face.y0;
        return Region {
            x0: face.x0,
            y0: face.y1 - h / 3.0,
            x1: face.x1,
            y1: face.y1,
        }
        .clipped();
    }
    Region {
        x0: 0.0,
        y0: 2.0 / 3.0,
        x1: 1.0,
        y1: 1.0,
    }
}

/// Fill value for masked pixels (black in `[-1, 1]`).
pub const MASK_FILL: f64 = -1.0;

/// Blank the region of an image; pixels outside are untouched. A pixel is
/// inside when its center falls within the region.
pub fn mask_image<T: Scalar>(image: &PixelImage<T>, region: &Region) -> PixelImage<T> {
    let mut out = image.clone();
    if region.is_empty() {
        return out;
    }
    let (h, w) = (image.height(), image.width());
    let fill = T::from_f64c(MASK_FILL);
    let data = out.data_mut();
    for y in 0..h {
        let cy = (y as f64 + 0.5) / h as f64;
        for x in 0..w {
            let cx = (x as f64 + 0.5) / w as f64;
            if region.contains(cx, cy) {
                for c in 0..3 {
                    data[[y, x, c]] = fill;
                }
            }
        }
    }
    out
}

/// Replace the mouth landmarks (indices 48..68) by the `(0, 0)` sentinel.
pub fn mask_landmarks<T: Scalar>(landmarks: &LandmarkSet<T>) -> LandmarkSet<T> {
    let mut out = landmarks.clone();
    for i in MOUTH_LANDMARKS {
        out.points_mut()[[i, 0]] = T::zero();
        out.points_mut()[[i, 1]] = T::zero();
    }
    out
}

/// MLP landmark encoder: flattened 136-vector -> two hidden layers of 128
/// -> 64-d landmark feature.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkEncoderParams<T: Scalar> {
    store: ParamStore<T>,
}

const HIDDEN: usize = 128;

impl<T: Scalar> LandmarkEncoderParams<T> {
    pub fn init(rng: &mut Prng) -> Self {
        let mut store = ParamStore::new();
        linear_init(&mut store, "fc1", NUM_LANDMARKS * 2, HIDDEN, rng);
        linear_init(&mut store, "fc2", HIDDEN, HIDDEN, rng);
        linear_init(&mut store, "fc3", HIDDEN, LANDMARK_FEATURE_DIM, rng);
        LandmarkEncoderParams { store }
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn from_store(store: ParamStore<T>) -> Result<Self> {
        if store.try_get("fc1.weight").is_none() {
            return Err(Error::Checkpoint("landmark encoder missing fc1.weight".into()));
        }
        Ok(LandmarkEncoderParams { store })
    }
}

/// Encoder forward pass on the graph: `[n, 136] -> [n, 64]`.
pub fn encode_landmarks_graph<T: Scalar>(g: &Graph<T>, vars: &BoundVars, x: Var) -> Var {
    let h = linear_fwd(g, vars, "fc1", x);
    let h = g.silu(h);
    let h = linear_fwd(g, vars, "fc2", h);
    let h = g.silu(h);
    linear_fwd(g, vars, "fc3", h)
}

/// Encode one (already masked) landmark set.
pub fn encode_landmarks<T: Scalar>(
    masked: &LandmarkSet<T>,
    params: &LandmarkEncoderParams<T>,
) -> Result<LandmarkFeature<T>> {
    let flat = masked.flatten();
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let x = g.constant(
        flat.into_shape_with_order(IxDyn(&[1, NUM_LANDMARKS * 2]))
            .unwrap(),
    );
    let y = encode_landmarks_graph(&g, &vars, x);
    LandmarkFeature::new(Array1::from_iter(g.value(y).iter().copied()))
}

/// Stack `z_t | z_m | z_r` channel-wise into the visual condition.
pub fn assemble_visual<T: Scalar>(
    z_t: &LatentImage<T>,
    z_m: &LatentImage<T>,
    z_r: &LatentImage<T>,
) -> Result<VisualCondition<T>> {
    let shape = z_t.data().dim();
    if z_m.data().dim() != shape || z_r.data().dim() != shape {
        return Err(Error::Shape(format!(
            "latent shapes differ: {:?} / {:?} / {:?}",
            z_t.data().dim(),
            z_m.data().dim(),
            z_r.data().dim()
        )));
    }
    let stacked = ndarray::concatenate(
        Axis(2),
        &[z_t.data().view(), z_m.data().view(), z_r.data().view()],
    )
    .expect("concat checked shapes");
    VisualCondition::new(stacked.as_standard_layout().to_owned())
}

/// Concatenate `[a; l]` into the latent condition.
pub fn assemble_latent<T: Scalar>(
    a: &SmoothedAudioFeature<T>,
    l: &LandmarkFeature<T>,
) -> Result<LatentCondition<T>> {
    let mut v = Array1::zeros(a.values().len() + l.values().len());
    for (i, &x) in a.values().iter().enumerate() {
        v[i] = x;
    }
    for (i, &x) in l.values().iter().enumerate() {
        v[a.values().len() + i] = x;
    }
    LatentCondition::new(v)
}

/// NCHW batch view of a visual condition stack (batch of one).
pub fn visual_condition_nchw<T: Scalar>(cv: &VisualCondition<T>) -> ArrayD<T> {
    cv.to_nchw()
}

/// Assemble a `(h, w, 9)` HWC stack from three `(1, 3, h, w)` tensors used
/// inside the training pipeline.
pub fn stack_nchw_conditions<T: Scalar>(
    z_t: &ArrayD<T>,
    z_m: &ArrayD<T>,
    z_r: &ArrayD<T>,
) -> Result<ArrayD<T>> {
    if z_t.shape() != z_m.shape() || z_t.shape() != z_r.shape() {
        return Err(Error::Shape(format!(
            "latent tensor shapes differ: {:?} / {:?} / {:?}",
            z_t.shape(),
            z_m.shape(),
            z_r.shape()
        )));
    }
    Ok(
        ndarray::concatenate(Axis(1), &[z_t.view(), z_m.view(), z_r.view()])
            .expect("concat checked shapes")
            .as_standard_layout()
            .to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn landmarks_with_mouth_box(x0: f64, y0: f64, x1: f64, y1: f64) -> LandmarkSet<f64> {
        let mut pts = Array2::zeros((NUM_LANDMARKS, 2));
        // face scaffold away from the mouth
        for i in 0..48 {
            pts[[i, 0]] = 0.5;
            pts[[i, 1]] = 0.3;
        }
        for (k, i) in MOUTH_LANDMARKS.enumerate() {
            let (x, y) = match k % 4 {
                0 => (x0, y0),
                1 => (x1, y0),
                2 => (x1, y1),
                _ => (x0, y1),
            };
            pts[[i, 0]] = x;
            pts[[i, 1]] = y;
        }
        LandmarkSet::new(pts).unwrap()
    }

    #[test]
    fn reference_support_from_frame_zero() {
        let mut rng = Prng::seed_from_u64(1);
        for _ in 0..200 {
            let r = select_reference(0, 300, &mut rng).unwrap();
            assert!((60..300).contains(&r));
        }
    }

    #[test]
    fn reference_empty_set_is_selection_error() {
        let mut rng = Prng::seed_from_u64(2);
        assert!(matches!(
            select_reference(50, 100, &mut rng).unwrap_err(),
            Error::Selection(_)
        ));
    }

    #[test]
    fn reference_support_enumeration() {
        // target 100, 161 frames: valid exactly {0..=40} and {160}
        let mut rng = Prng::seed_from_u64(3);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..5000 {
            let r = select_reference(100, 161, &mut rng).unwrap();
            assert!(r <= 40 || r == 160, "invalid reference {r}");
            seen.insert(r);
        }
        // uniform sampling over 42 values hits all of them in 5000 draws
        assert_eq!(seen.len(), 42, "support not fully covered: {seen:?}");
    }

    #[test]
    fn mask_region_margin_arithmetic() {
        let lm = landmarks_with_mouth_box(0.4, 0.6, 0.6, 0.7);
        let r = mouth_mask_region(&lm);
        assert!((r.x0 - 0.36).abs() < 1e-12);
        assert!((r.x1 - 0.64).abs() < 1e-12);
        assert!((r.y0 - 0.58).abs() < 1e-12);
        assert!((r.y1 - 0.72).abs() < 1e-12);
    }

    #[test]
    fn mask_region_clips_at_image_corner() {
        let lm = landmarks_with_mouth_box(0.0, 0.9, 0.2, 1.0);
        let r = mouth_mask_region(&lm);
        assert!(r.x0 >= 0.0 && r.y1 <= 1.0);
        assert!((r.x0 - 0.0).abs() < 1e-12);
        assert!((r.y1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn coincident_mouth_falls_back_to_lower_third() {
        let lm = landmarks_with_mouth_box(0.5, 0.5, 0.5, 0.5);
        let r = mouth_mask_region(&lm);
        // face box is degenerate here too (all scaffold points coincide),
        // so the fallback is the lower third of the image
        assert_eq!(
            r,
            Region {
                x0: 0.0,
                y0: 2.0 / 3.0,
                x1: 1.0,
                y1: 1.0
            }
        );
    }

    fn checker_image(h: usize, w: usize) -> PixelImage<f64> {
        let mut img = Array3::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 0.5 } else { -0.5 };
                for c in 0..3 {
                    img[[y, x, c]] = v;
                }
            }
        }
        PixelImage::new(img).unwrap()
    }

    #[test]
    fn empty_region_is_identity() {
        let img = checker_image(8, 8);
        let out = mask_image(&img, &Region::empty());
        assert_eq!(out, img);
    }

    #[test]
    fn full_region_blanks_everything() {
        let img = checker_image(8, 8);
        let out = mask_image(
            &img,
            &Region {
                x0: 0.0,
                y0: 0.0,
                x1: 1.0,
                y1: 1.0,
            },
        );
        assert!(out.data().iter().all(|&v| v == MASK_FILL));
    }

    #[test]
    fn masked_content_is_invariant() {
        let region = Region {
            x0: 0.25,
            y0: 0.25,
            x1: 0.75,
            y1: 0.75,
        };
        let a = checker_image(8, 8);
        let mut b = a.clone();
        for y in 2..6 {
            for x in 2..6 {
                for c in 0..3 {
                    b.data_mut()[[y, x, c]] = 0.9;
                }
            }
        }
        let ma = mask_image(&a, &region);
        let mb = mask_image(&b, &region);
        assert_eq!(ma, mb);
        // pixels outside the region are bit-identical to the input
        for y in 0..8 {
            for x in 0..8 {
                let cx = (x as f64 + 0.5) / 8.0;
                let cy = (y as f64 + 0.5) / 8.0;
                if !region.contains(cx, cy) {
                    for c in 0..3 {
                        assert_eq!(ma.data()[[y, x, c]], a.data()[[y, x, c]]);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_landmarks_zeroes_mouth_only() {
        let lm = landmarks_with_mouth_box(0.4, 0.6, 0.6, 0.7);
        let masked = mask_landmarks(&lm);
        for i in MOUTH_LANDMARKS {
            assert_eq!(masked.points()[[i, 0]], 0.0);
            assert_eq!(masked.points()[[i, 1]], 0.0);
        }
        for i in 0..48 {
            assert_eq!(masked.points()[[i, 0]], lm.points()[[i, 0]]);
            assert_eq!(masked.points()[[i, 1]], lm.points()[[i, 1]]);
        }
        // two sets differing only in mouth points mask identically
        let other = landmarks_with_mouth_box(0.3, 0.5, 0.7, 0.9);
        assert_eq!(mask_landmarks(&other), masked);
    }

    #[test]
    fn landmark_encoder_is_deterministic_with_dim_64() {
        let mut rng = Prng::seed_from_u64(5);
        let params = LandmarkEncoderParams::<f64>::init(&mut rng);
        let lm = mask_landmarks(&landmarks_with_mouth_box(0.4, 0.6, 0.6, 0.7));
        let a = encode_landmarks(&lm, &params).unwrap();
        let b = encode_landmarks(&lm, &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.values().len(), LANDMARK_FEATURE_DIM);
    }

    #[test]
    fn assemble_visual_slices_back_exactly() {
        let mut rng = Prng::seed_from_u64(7);
        let mk = |rng: &mut Prng| {
            LatentImage::new(
                rng.normal_tensor::<f64>(&[4, 4, 3])
                    .into_dimensionality()
                    .unwrap(),
            )
            .unwrap()
        };
        let (zt, zm, zr) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let cv = assemble_visual(&zt, &zm, &zr).unwrap();
        assert_eq!(cv.data().shape(), &[4, 4, 9]);
        assert_eq!(cv.noisy(), zt);
        assert_eq!(cv.masked_truth(), zm);
        assert_eq!(cv.reference(), zr);
        // order contract: permuting inputs moves the slices
        let swapped = assemble_visual(&zm, &zt, &zr).unwrap();
        assert_eq!(swapped.noisy(), zm);
        assert_ne!(swapped.noisy(), zt);
    }

    #[test]
    fn assemble_visual_shape_mismatch() {
        let a = LatentImage::<f64>::zeros(4, 4);
        let b = LatentImage::<f64>::zeros(5, 4);
        assert!(matches!(
            assemble_visual(&a, &b, &a).unwrap_err(),
            Error::Shape(_)
        ));
    }

    #[test]
    fn assemble_latent_concatenation() {
        let a = SmoothedAudioFeature::new(Array1::from_elem(64, 2.0f64)).unwrap();
        let l = LandmarkFeature::new(Array1::from_elem(64, -3.0f64)).unwrap();
        let c = assemble_latent(&a, &l).unwrap();
        assert_eq!(c.values().len(), 128);
        assert!(c.audio_slice().iter().all(|&v| v == 2.0));
        assert!(c.landmark_slice().iter().all(|&v| v == -3.0));

        let zero = assemble_latent(
            &SmoothedAudioFeature::new(Array1::<f64>::zeros(64)).unwrap(),
            &LandmarkFeature::new(Array1::<f64>::zeros(64)).unwrap(),
        )
        .unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }
}
