//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! * magic, 4 bytes: `AEC1` (autoencoder) or `DNZ1` (denoiser bundle)
//! * format version, u32 (currently 1)
//! * header. Autoencoder: `f: u32, H: u32, W: u32, latent_scale: f64`.
//!   Denoiser bundle: u32-length-prefixed JSON of the denoiser config.
//! * parameter table: u32 count, then per parameter in ascending
//!   lexicographic name order: u16 name length, name bytes, u8 ndim,
//!   u32 dims, values as f64 little-endian.
//!
//! Values are stored as f64, so an f32 model round-trips bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use sha2::Digest;

use crate::audio::TemporalFilterParams;
use crate::error::hex_string;
use crate::autoencoder::{AutoencoderConfig, AutoencoderParams};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::trainer::ModelBundle;
use crate::visual::LandmarkEncoderParams;

const AE_MAGIC: &[u8; 4] = b"AEC1";
const MODEL_MAGIC: &[u8; 4] = b"DNZ1";
const FORMAT_VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn write_params<T: Scalar, W: Write>(w: &mut W, store: &ParamStore<T>) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (name, value) in store.iter() {
        let bytes = name.as_bytes();
        w.write_u16::<LittleEndian>(bytes.len() as u16)?;
        w.write_all(bytes)?;
        w.write_u8(value.ndim() as u8)?;
        for &d in value.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for v in value.iter() {
            w.write_f64::<LittleEndian>(v.to_f64c())?;
        }
    }
    Ok(())
}

fn read_params<T: Scalar, R: Read>(r: &mut R) -> std::io::Result<ParamStore<T>> {
    let count = r.read_u32::<LittleEndian>()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::from_f64c(r.read_f64::<LittleEndian>()?));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        store.insert(&name, arr);
    }
    Ok(store)
}

/// Write an autoencoder checkpoint.
pub fn save_autoencoder<T: Scalar>(path: &Path, params: &AutoencoderParams<T>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    let mut run = || -> std::io::Result<()> {
        f.write_all(AE_MAGIC)?;
        f.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let cfg = params.config();
        f.write_u32::<LittleEndian>(cfg.factor as u32)?;
        f.write_u32::<LittleEndian>(cfg.image_size as u32)?;
        f.write_u32::<LittleEndian>(cfg.image_size as u32)?;
        f.write_f64::<LittleEndian>(params.latent_scale().to_f64c())?;
        write_params(&mut f, params.store())
    };
    run().map_err(io_err(path))
}

/// Load an autoencoder checkpoint. Loaded parameters come back frozen
/// (a checkpointed autoencoder is a pretrained one).
pub fn load_autoencoder<T: Scalar>(path: &Path) -> Result<AutoencoderParams<T>> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != AE_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not an autoencoder checkpoint",
            path.display()
        )));
    }
    let version = f.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let factor = f.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let h = f.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let _w = f.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let scale = f.read_f64::<LittleEndian>().map_err(io_err(path))?;
    let store: ParamStore<T> = read_params(&mut f).map_err(io_err(path))?;
    // hidden width is recoverable from the first encoder convolution
    let width = store
        .try_get("enc.conv_in.weight")
        .ok_or_else(|| Error::Checkpoint("checkpoint missing enc.conv_in.weight".into()))?
        .shape()[0];
    let config = AutoencoderConfig::new(factor, h, width)?;
    let mut params = AutoencoderParams::from_parts(config, store, T::from_f64c(scale), false)?;
    params.freeze();
    Ok(params)
}

/// Write the jointly trained model groups (denoiser, temporal filter,
/// landmark encoder) as one checkpoint with the denoiser config in the
/// header.
pub fn save_model_bundle<T: Scalar>(path: &Path, bundle: &ModelBundle<T>) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    let config_json = serde_json::to_vec(bundle.denoiser.config())
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    let mut merged = ParamStore::<T>::new();
    for (name, v) in bundle.denoiser.store().iter() {
        merged.insert(&format!("denoiser.{name}"), v.clone());
    }
    for (name, v) in bundle.filter.store().iter() {
        merged.insert(&format!("audio_filter.{name}"), v.clone());
    }
    for (name, v) in bundle.landmark.store().iter() {
        merged.insert(&format!("landmark_encoder.{name}"), v.clone());
    }
    let mut run = || -> std::io::Result<()> {
        f.write_all(MODEL_MAGIC)?;
        f.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        f.write_u32::<LittleEndian>(config_json.len() as u32)?;
        f.write_all(&config_json)?;
        write_params(&mut f, &merged)
    };
    run().map_err(io_err(path))
}

/// Load a model bundle checkpoint.
pub fn load_model_bundle<T: Scalar>(path: &Path) -> Result<ModelBundle<T>> {
    let mut f = std::fs::File::open(path).map_err(io_err(path))?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint",
            path.display()
        )));
    }
    let version = f.read_u32::<LittleEndian>().map_err(io_err(path))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let cfg_len = f.read_u32::<LittleEndian>().map_err(io_err(path))? as usize;
    let mut cfg_raw = vec![0u8; cfg_len];
    f.read_exact(&mut cfg_raw).map_err(io_err(path))?;
    let config: DenoiserConfig = serde_json::from_slice(&cfg_raw)
        .map_err(|e| Error::Checkpoint(format!("config deserialization: {e}")))?;
    let merged: ParamStore<T> = read_params(&mut f).map_err(io_err(path))?;
    let mut denoiser = ParamStore::new();
    let mut filter = ParamStore::new();
    let mut landmark = ParamStore::new();
    for (name, v) in merged.iter() {
        if let Some(rest) = name.strip_prefix("denoiser.") {
            denoiser.insert(rest, v.clone());
        } else if let Some(rest) = name.strip_prefix("audio_filter.") {
            filter.insert(rest, v.clone());
        } else if let Some(rest) = name.strip_prefix("landmark_encoder.") {
            landmark.insert(rest, v.clone());
        } else {
            return Err(Error::Checkpoint(format!("unknown parameter group in {name}")));
        }
    }
    Ok(ModelBundle {
        denoiser: DenoiserParams::from_parts(config, denoiser)?,
        filter: TemporalFilterParams::from_store(filter)?,
        landmark: LandmarkEncoderParams::from_store(landmark)?,
    })
}

/// SHA-256 of a file, as the checkpoint id recorded in run manifests.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&bytes);
    Ok(hex_string(&hasher.finalize()))
}
