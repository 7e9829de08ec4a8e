//! Convolutional image autoencoder defining the latent space.
//!
//! A strided encoder with `log2(f)` downsampling stages maps `(H, W, 3)`
//! pixels to `(H/f, W/f, 3)` latents; the decoder mirrors it with
//! nearest-neighbor upsampling and ends in `tanh` so outputs stay in
//! `[-1, 1]`. After reconstruction training a global scalar rescales the
//! latents to unit standard deviation; the parameters are then frozen for
//! the rest of the pipeline.

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv2d_fwd, conv2d_init, AdamConfig, AdamState, BoundVars, ParamStore};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::types::{LatentImage, PixelImage};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AutoencoderConfig {
    /// Spatial downsampling factor `f` (4 for 256-px training, 8 for 512).
    pub factor: usize,
    /// Nominal training resolution (H = W), recorded in checkpoints.
    pub image_size: usize,
    /// Channel width of the hidden convolutions.
    pub width: usize,
}

impl AutoencoderConfig {
    pub fn new(factor: usize, image_size: usize, width: usize) -> Result<Self> {
        let cfg = AutoencoderConfig {
            factor,
            image_size,
            width,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::Config(format!(
                "downsampling factor must be a power of two >= 2, got {}",
                self.factor
            )));
        }
        if self.image_size == 0 || self.image_size % self.factor != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by factor {}",
                self.image_size, self.factor
            )));
        }
        if self.width == 0 {
            return Err(Error::Config("zero autoencoder width".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.factor.trailing_zeros() as usize
    }
}

/// Paired encoder/decoder parameters plus the latent scale.
#[derive(Clone, Debug)]
pub struct AutoencoderParams<T: Scalar> {
    config: AutoencoderConfig,
    store: ParamStore<T>,
    latent_scale: T,
    frozen: bool,
}

impl<T: Scalar> AutoencoderParams<T> {
    pub fn config(&self) -> &AutoencoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn latent_scale(&self) -> T {
        self.latent_scale
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Freeze permanently; training refuses frozen parameters.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn from_parts(
        config: AutoencoderConfig,
        store: ParamStore<T>,
        latent_scale: T,
        frozen: bool,
    ) -> Result<Self> {
        config.validate()?;
        Ok(AutoencoderParams {
            config,
            store,
            latent_scale,
            frozen,
        })
    }
}

/// Fresh unfrozen parameters with unit latent scale.
pub fn init_autoencoder<T: Scalar>(
    config: &AutoencoderConfig,
    rng: &mut Prng,
) -> Result<AutoencoderParams<T>> {
    config.validate()?;
    let w = config.width;
    let mut store = ParamStore::new();
    conv2d_init(&mut store, "enc.conv_in", 3, w, 3, false, rng);
    for s in 0..config.stages() {
        conv2d_init(&mut store, &format!("enc.down{s}"), w, w, 3, false, rng);
    }
    conv2d_init(&mut store, "enc.conv_out", w, 3, 3, false, rng);
    conv2d_init(&mut store, "dec.conv_in", 3, w, 3, false, rng);
    for s in 0..config.stages() {
        conv2d_init(&mut store, &format!("dec.up{s}"), w, w, 3, false, rng);
    }
    conv2d_init(&mut store, "dec.conv_out", w, 3, 3, false, rng);
    Ok(AutoencoderParams {
        config: *config,
        store,
        latent_scale: T::one(),
        frozen: false,
    })
}

/// Encoder forward on the graph (raw latents, before the global scale).
pub fn encode_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    config: &AutoencoderConfig,
    x: Var,
) -> Var {
    let mut h = conv2d_fwd(g, vars, "enc.conv_in", x, 1, 1);
    h = g.silu(h);
    for s in 0..config.stages() {
        h = conv2d_fwd(g, vars, &format!("enc.down{s}"), h, 2, 1);
        h = g.silu(h);
    }
    conv2d_fwd(g, vars, "enc.conv_out", h, 1, 1)
}

/// Decoder forward on the graph (expects raw, unscaled latents).
pub fn decode_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    config: &AutoencoderConfig,
    z: Var,
) -> Var {
    let mut h = conv2d_fwd(g, vars, "dec.conv_in", z, 1, 1);
    h = g.silu(h);
    for s in 0..config.stages() {
        h = g.upsample_nearest_2x(h);
        h = conv2d_fwd(g, vars, &format!("dec.up{s}"), h, 1, 1);
        h = g.silu(h);
    }
    let h = conv2d_fwd(g, vars, "dec.conv_out", h, 1, 1);
    g.tanh(h)
}

fn check_divisible<T: Scalar>(img: &PixelImage<T>, f: usize) -> Result<()> {
    if img.height() % f != 0 || img.width() % f != 0 {
        return Err(Error::Shape(format!(
            "image {}x{} not divisible by downsampling factor {f}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Encode a batch `[n, 3, H, W] -> [n, 3, H/f, W/f]` (scaled latents).
pub fn encode_batch<T: Scalar>(x: &ArrayD<T>, params: &AutoencoderParams<T>) -> Result<ArrayD<T>> {
    if x.ndim() != 4 || x.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "expected (n, 3, h, w) pixel batch, got {:?}",
            x.shape()
        )));
    }
    let f = params.config.factor;
    if x.shape()[2] % f != 0 || x.shape()[3] % f != 0 {
        return Err(Error::Shape(format!(
            "batch {:?} not divisible by downsampling factor {f}",
            x.shape()
        )));
    }
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let xv = g.constant(x.clone());
    let z = encode_graph(&g, &vars, &params.config, xv);
    let z = g.scale(z, params.latent_scale);
    Ok(g.value(z))
}

/// Decode a batch `[n, 3, h, w] -> [n, 3, h*f, w*f]`.
pub fn decode_batch<T: Scalar>(z: &ArrayD<T>, params: &AutoencoderParams<T>) -> Result<ArrayD<T>> {
    if z.ndim() != 4 || z.shape()[1] != 3 {
        return Err(Error::Shape(format!(
            "expected (n, 3, h, w) latent batch, got {:?}",
            z.shape()
        )));
    }
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let unscaled = g.scale(g.constant(z.clone()), T::one() / params.latent_scale);
    let x = decode_graph(&g, &vars, &params.config, unscaled);
    Ok(g.value(x))
}

/// Encode one image into the latent space.
pub fn encode<T: Scalar>(
    x: &PixelImage<T>,
    params: &AutoencoderParams<T>,
) -> Result<LatentImage<T>> {
    check_divisible(x, params.config.factor)?;
    let z = encode_batch(&x.to_nchw(), params)?;
    LatentImage::from_nchw(&z)
}

/// Decode one latent back to pixel space.
pub fn decode<T: Scalar>(
    z: &LatentImage<T>,
    params: &AutoencoderParams<T>,
) -> Result<PixelImage<T>> {
    let x = decode_batch(&z.to_nchw(), params)?;
    PixelImage::from_nchw(&x)
}

/// Reconstruction-training settings.
#[derive(Clone, Copy, Debug)]
pub struct AeTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            steps: 2000,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
        }
    }
}

fn images_to_batch<T: Scalar>(images: &[&PixelImage<T>]) -> ArrayD<T> {
    let (h, w) = (images[0].height(), images[0].width());
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        data.extend(img.to_nchw().iter().copied());
    }
    ArrayD::from_shape_vec(IxDyn(&[images.len(), 3, h, w]), data).unwrap()
}

/// Train encoder and decoder jointly with plain reconstruction MSE.
///
/// Returns unfrozen parameters (callers freeze before diffusion training)
/// and the per-step loss history.
pub fn train_autoencoder<T: Scalar>(
    images: &[PixelImage<T>],
    net: &AutoencoderConfig,
    train: &AeTrainConfig,
) -> Result<(AutoencoderParams<T>, Vec<f64>)> {
    if images.is_empty() {
        return Err(Error::Data("autoencoder training needs at least one image".into()));
    }
    let (h, w) = (images[0].height(), images[0].width());
    for img in images {
        if img.height() != h || img.width() != w {
            return Err(Error::Data(format!(
                "mixed resolutions in autoencoder training: {}x{} vs {h}x{w}",
                img.height(),
                img.width()
            )));
        }
        check_divisible(img, net.factor)?;
    }
    let mut rng = Prng::seed_from_u64(train.seed);
    let mut params = init_autoencoder::<T>(net, &mut rng)?;
    let mut adam = AdamState::new(&params.store);
    let adam_cfg = AdamConfig::with_lr(train.lr);
    let mut history = Vec::with_capacity(train.steps);
    for _ in 0..train.steps {
        let batch: Vec<&PixelImage<T>> = (0..train.batch_size.min(images.len()))
            .map(|_| &images[rng.below(images.len())])
            .collect();
        let x = images_to_batch(&batch);
        let g = Graph::new();
        let vars = params.store.bind(&g);
        let xv = g.constant(x);
        let z = encode_graph(&g, &vars, net, xv);
        let y = decode_graph(&g, &vars, net, z);
        let diff = g.sub(y, xv);
        let loss = g.mean(g.mul(diff, diff));
        let loss_val = g.value(loss).first().copied().unwrap().to_f64c();
        if !loss_val.is_finite() {
            return Err(Error::Training(format!(
                "autoencoder loss became non-finite at step {}",
                history.len()
            )));
        }
        let grads = g.backward(loss);
        let grad_store = vars.collect_grads(&g, &grads);
        adam.update(&mut params.store, &grad_store, &adam_cfg)?;
        history.push(loss_val);
    }
    params.latent_scale = compute_latent_scale(images, &params)?;
    Ok((params, history))
}

/// `1 / std` of the raw encoder outputs over a dataset.
fn compute_latent_scale<T: Scalar>(
    images: &[PixelImage<T>],
    params: &AutoencoderParams<T>,
) -> Result<T> {
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for img in images {
        let g = Graph::new();
        let vars = params.store.bind_frozen(&g);
        let xv = g.constant(img.to_nchw());
        let z = encode_graph(&g, &vars, &params.config, xv);
        for v in g.value(z).iter() {
            let v = v.to_f64c();
            sum += v;
            sumsq += v * v;
            count += 1;
        }
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(0.0);
    let std = var.sqrt();
    Ok(if std > 1e-8 {
        T::from_f64c(1.0 / std)
    } else {
        T::one()
    })
}

/// Mean reconstruction PSNR (dB, unit range) of `decode(encode(x))` over a
/// set of images.
pub fn roundtrip_psnr<T: Scalar>(
    images: &[PixelImage<T>],
    params: &AutoencoderParams<T>,
) -> Result<f64> {
    let mut acc = 0.0;
    for img in images {
        let z = encode(img, params)?;
        let rec = decode(&z, params)?;
        acc += crate::metrics::psnr_images(img, &rec)?;
    }
    Ok(acc / images.len() as f64)
}
