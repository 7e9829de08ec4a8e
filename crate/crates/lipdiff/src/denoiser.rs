//! Conditional UNet noise predictor.
//!
//! The 9-channel visual condition (noisy latent | masked ground truth |
//! reference) enters the first convolution; the 128-d latent condition
//! (audio + landmarks) is a single context token serving as key and value
//! for cross-attention layers at the configured resolution levels; the
//! timestep enters through a sinusoidal embedding with a learned 2-layer
//! projection, added per channel inside every residual block.

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    conv2d_fwd, conv2d_init, group_norm_fwd, group_norm_init, init_weight, linear_fwd,
    linear_init, BoundVars, ParamStore,
};
use crate::rng::Prng;
use crate::scalar::Scalar;
use crate::types::{LatentCondition, LatentImage, VisualCondition};
use crate::CONTEXT_DIM;

/// Channels entering the first layer (z_t | z_m | z_r).
pub const INPUT_CHANNELS: usize = 9;
/// Channels of the predicted noise map.
pub const OUTPUT_CHANNELS: usize = 3;
/// Group count for all normalization layers.
pub const NORM_GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub base_width: usize,
    pub channel_mults: Vec<usize>,
    pub res_blocks: usize,
    /// Level indices (0 = full latent resolution) that carry cross-attention.
    /// The mid block always attends.
    pub cross_attn_levels: Vec<usize>,
    pub time_embed_dim: usize,
    pub context_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            base_width: 64,
            channel_mults: vec![1, 2, 4],
            res_blocks: 2,
            cross_attn_levels: vec![1, 2],
            time_embed_dim: 128,
            context_dim: CONTEXT_DIM,
        }
    }
}

impl DenoiserConfig {
    /// Smallest config exercising every mechanism; used by the desk-scale
    /// training runs on 16 x 16 latents.
    pub fn micro() -> Self {
        DenoiserConfig {
            base_width: 32,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            cross_attn_levels: vec![1],
            time_embed_dim: 128,
            context_dim: CONTEXT_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.context_dim != CONTEXT_DIM {
            return Err(Error::Config(format!(
                "context dim must be {CONTEXT_DIM}, got {}",
                self.context_dim
            )));
        }
        if self.channel_mults.is_empty() {
            return Err(Error::Config("channel_mults must not be empty".into()));
        }
        if self.res_blocks == 0 {
            return Err(Error::Config("need at least one res block per level".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        for (i, &m) in self.channel_mults.iter().enumerate() {
            if m == 0 {
                return Err(Error::Config("zero channel multiplier".into()));
            }
            let w = self.base_width * m;
            if w % NORM_GROUPS != 0 {
                return Err(Error::Config(format!(
                    "level {i} width {w} not divisible by {NORM_GROUPS} norm groups"
                )));
            }
        }
        for &l in &self.cross_attn_levels {
            if l >= self.channel_mults.len() {
                return Err(Error::Config(format!(
                    "cross-attention level {l} outside the {} levels",
                    self.channel_mults.len()
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_width(&self, i: usize) -> usize {
        self.base_width * self.channel_mults[i]
    }

    fn attended(&self, level: usize) -> bool {
        self.cross_attn_levels.contains(&level)
    }
}

/// All learnable tensors of the denoiser, keyed by layer path.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams<T: Scalar> {
    config: DenoiserConfig,
    store: ParamStore<T>,
}

impl<T: Scalar> DenoiserParams<T> {
    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn from_parts(config: DenoiserConfig, store: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(DenoiserParams { config, store })
    }
}

fn res_block_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    time_dim: usize,
    rng: &mut Prng,
) {
    group_norm_init(store, &format!("{name}.gn1"), cin);
    conv2d_init(store, &format!("{name}.conv1"), cin, cout, 3, false, rng);
    linear_init(store, &format!("{name}.emb"), time_dim, cout, rng);
    group_norm_init(store, &format!("{name}.gn2"), cout);
    conv2d_init(store, &format!("{name}.conv2"), cout, cout, 3, false, rng);
    if cin != cout {
        conv2d_init(store, &format!("{name}.skip"), cin, cout, 1, false, rng);
    }
}

fn cross_attn_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    width: usize,
    context_dim: usize,
    rng: &mut Prng,
) {
    group_norm_init(store, &format!("{name}.norm"), width);
    store.insert(
        &format!("{name}.q.weight"),
        init_weight(&[width, width], width, rng),
    );
    store.insert(
        &format!("{name}.k.weight"),
        init_weight(&[context_dim, width], context_dim, rng),
    );
    store.insert(
        &format!("{name}.v.weight"),
        init_weight(&[context_dim, width], context_dim, rng),
    );
    linear_init(store, &format!("{name}.out"), width, width, rng);
}

/// Initialize all parameters: fan-in scaled Gaussians, zero-initialized
/// output convolution so the predicted noise is exactly zero at init.
pub fn init_denoiser<T: Scalar>(config: &DenoiserConfig, rng: &mut Prng) -> Result<DenoiserParams<T>> {
    config.validate()?;
    let mut store = ParamStore::new();
    let time_dim = config.time_embed_dim;
    linear_init(&mut store, "temb.fc1", time_dim, time_dim, rng);
    linear_init(&mut store, "temb.fc2", time_dim, time_dim, rng);
    conv2d_init(
        &mut store,
        "conv_in",
        INPUT_CHANNELS,
        config.base_width,
        3,
        false,
        rng,
    );
    let levels = config.levels();
    let mut ch = config.base_width;
    for i in 0..levels {
        let cout = config.level_width(i);
        for b in 0..config.res_blocks {
            res_block_init(&mut store, &format!("down{i}.res{b}"), ch, cout, time_dim, rng);
            ch = cout;
            if config.attended(i) {
                cross_attn_init(
                    &mut store,
                    &format!("down{i}.attn{b}"),
                    cout,
                    config.context_dim,
                    rng,
                );
            }
        }
        if i + 1 < levels {
            conv2d_init(&mut store, &format!("down{i}.downsample"), ch, ch, 3, false, rng);
        }
    }
    res_block_init(&mut store, "mid.res1", ch, ch, time_dim, rng);
    cross_attn_init(&mut store, "mid.attn", ch, config.context_dim, rng);
    res_block_init(&mut store, "mid.res2", ch, ch, time_dim, rng);
    for i in (0..levels).rev() {
        let cout = config.level_width(i);
        for b in 0..config.res_blocks {
            let cin = if b == 0 { 2 * cout } else { cout };
            res_block_init(&mut store, &format!("up{i}.res{b}"), cin, cout, time_dim, rng);
            if config.attended(i) {
                cross_attn_init(
                    &mut store,
                    &format!("up{i}.attn{b}"),
                    cout,
                    config.context_dim,
                    rng,
                );
            }
        }
        if i > 0 {
            conv2d_init(
                &mut store,
                &format!("up{i}.upsample"),
                cout,
                config.level_width(i - 1),
                3,
                false,
                rng,
            );
        }
    }
    group_norm_init(&mut store, "out.norm", config.base_width);
    conv2d_init(
        &mut store,
        "out.conv",
        config.base_width,
        OUTPUT_CHANNELS,
        3,
        true,
        rng,
    );
    Ok(DenoiserParams {
        config: config.clone(),
        store,
    })
}

/// Sinusoidal part of the timestep embedding:
/// `[sin(t w_0).. sin(t w_{h-1}), cos(t w_0).. cos(t w_{h-1})]`.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for j in 0..half {
        let exponent = if half > 1 {
            j as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let freq = 10_000f64.powf(-exponent);
        out[j] = (t as f64 * freq).sin();
        out[half + j] = (t as f64 * freq).cos();
    }
    out
}

/// Batch of sinusoidal embeddings for per-sample timesteps.
pub fn time_embedding_batch<T: Scalar>(ts: &[usize], dim: usize) -> ArrayD<T> {
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        data.extend(sinusoidal_time_embedding(t, dim).iter().map(|&v| T::from_f64c(v)));
    }
    ArrayD::from_shape_vec(IxDyn(&[ts.len(), dim]), data).unwrap()
}

fn time_projection_graph<T: Scalar>(g: &Graph<T>, vars: &BoundVars, sin: Var) -> Var {
    let h = linear_fwd(g, vars, "temb.fc1", sin);
    let h = g.silu(h);
    linear_fwd(g, vars, "temb.fc2", h)
}

/// Full timestep embedding (sinusoid + learned projection).
pub fn time_embed<T: Scalar>(t: usize, params: &DenoiserParams<T>) -> Array1<T> {
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let sin = g.constant(time_embedding_batch::<T>(&[t], params.config.time_embed_dim));
    let out = time_projection_graph(&g, &vars, sin);
    Array1::from_iter(g.value(out).iter().copied())
}

fn res_block_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    name: &str,
    x: Var,
    cin: usize,
    cout: usize,
    temb: Var,
) -> Var {
    let h = group_norm_fwd(g, vars, &format!("{name}.gn1"), x, NORM_GROUPS);
    let h = g.silu(h);
    let h = conv2d_fwd(g, vars, &format!("{name}.conv1"), h, 1, 1);
    let e = g.silu(temb);
    let e = linear_fwd(g, vars, &format!("{name}.emb"), e);
    let h = g.add_chan_vec(h, e);
    let h = group_norm_fwd(g, vars, &format!("{name}.gn2"), h, NORM_GROUPS);
    let h = g.silu(h);
    let h = conv2d_fwd(g, vars, &format!("{name}.conv2"), h, 1, 1);
    let skip = if cin == cout {
        x
    } else {
        conv2d_fwd(g, vars, &format!("{name}.skip"), x, 1, 0)
    };
    g.add(skip, h)
}

/// Single-token cross-attention core on sequence features:
/// `x_seq [n, q, c]`, `ctx [n, context_dim]` -> projected attention output
/// `[n, q, c]` (no residual; callers add it).
pub fn cross_attention_core<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    name: &str,
    x_seq: Var,
    ctx: Var,
) -> Var {
    let shape = g.shape(x_seq);
    let (n, q, c) = (shape[0], shape[1], shape[2]);
    let flat = g.reshape(x_seq, &[n * q, c]);
    let queries = g.matmul(flat, vars.var(&format!("{name}.q.weight")));
    let queries = g.reshape(queries, &[n, q, c]);
    let keys = g.matmul(ctx, vars.var(&format!("{name}.k.weight"))); // [n, c]
    let values = g.matmul(ctx, vars.var(&format!("{name}.v.weight"))); // [n, c]
    let logits = g.dot_last(queries, keys); // [n, q]
    let logits = g.scale(logits, T::from_f64c(1.0 / (c as f64).sqrt()));
    // one context token: softmax over the token axis
    let logits = g.reshape(logits, &[n, q, 1]);
    let weights = g.softmax(logits, 2);
    let weights = g.reshape(weights, &[n, q]);
    let attended = g.outer_last(weights, values); // [n, q, c]
    let attended = g.reshape(attended, &[n * q, c]);
    let out = linear_fwd(g, vars, &format!("{name}.out"), attended);
    g.reshape(out, &[n, q, c])
}

fn cross_attn_block_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    name: &str,
    x: Var,
    ctx: Var,
) -> Var {
    let shape = g.shape(x);
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let normed = group_norm_fwd(g, vars, &format!("{name}.norm"), x, NORM_GROUPS);
    let seq = g.permute(normed, &[0, 2, 3, 1]);
    let seq = g.reshape(seq, &[n, h * w, c]);
    let att = cross_attention_core(g, vars, name, seq, ctx);
    let att = g.reshape(att, &[n, h, w, c]);
    let att = g.permute(att, &[0, 3, 1, 2]);
    g.add(x, att)
}

/// Full UNet forward on the graph.
///
/// `cv [n, 9, h, w]`, `temb_sin [n, time_embed_dim]`, `ctx [n, context_dim]`
/// -> predicted noise `[n, 3, h, w]`.
pub fn denoise_eps_graph<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    config: &DenoiserConfig,
    cv: Var,
    temb_sin: Var,
    ctx: Var,
) -> Var {
    let temb = time_projection_graph(g, vars, temb_sin);
    let mut h = conv2d_fwd(g, vars, "conv_in", cv, 1, 1);
    let levels = config.levels();
    let mut ch = config.base_width;
    let mut skips: Vec<(Var, usize)> = Vec::with_capacity(levels);
    for i in 0..levels {
        let cout = config.level_width(i);
        for b in 0..config.res_blocks {
            h = res_block_graph(g, vars, &format!("down{i}.res{b}"), h, ch, cout, temb);
            ch = cout;
            if config.attended(i) {
                h = cross_attn_block_graph(g, vars, &format!("down{i}.attn{b}"), h, ctx);
            }
        }
        skips.push((h, ch));
        if i + 1 < levels {
            h = conv2d_fwd(g, vars, &format!("down{i}.downsample"), h, 2, 1);
        }
    }
    h = res_block_graph(g, vars, "mid.res1", h, ch, ch, temb);
    h = cross_attn_block_graph(g, vars, "mid.attn", h, ctx);
    h = res_block_graph(g, vars, "mid.res2", h, ch, ch, temb);
    for i in (0..levels).rev() {
        let cout = config.level_width(i);
        let (skip, skip_ch) = skips[i];
        h = g.concat(&[h, skip], 1);
        ch += skip_ch;
        for b in 0..config.res_blocks {
            h = res_block_graph(g, vars, &format!("up{i}.res{b}"), h, ch, cout, temb);
            ch = cout;
            if config.attended(i) {
                h = cross_attn_block_graph(g, vars, &format!("up{i}.attn{b}"), h, ctx);
            }
        }
        if i > 0 {
            h = g.upsample_nearest_2x(h);
            h = conv2d_fwd(g, vars, &format!("up{i}.upsample"), h, 1, 1);
            ch = config.level_width(i - 1);
        }
    }
    let out = group_norm_fwd(g, vars, "out.norm", h, NORM_GROUPS);
    let out = g.silu(out);
    conv2d_fwd(g, vars, "out.conv", out, 1, 1)
}

/// Predict the noise for one conditioned sample.
pub fn denoise_eps<T: Scalar>(
    cv: &VisualCondition<T>,
    t: usize,
    cl: &LatentCondition<T>,
    params: &DenoiserParams<T>,
) -> Result<LatentImage<T>> {
    let batch = denoise_eps_batch(
        &cv.to_nchw(),
        &[t],
        &cl_batch(std::slice::from_ref(cl)),
        params,
    )?;
    LatentImage::from_nchw(&batch)
}

/// Stack latent conditions into a `[n, context_dim]` tensor.
pub fn cl_batch<T: Scalar>(cls: &[LatentCondition<T>]) -> ArrayD<T> {
    let dim = CONTEXT_DIM;
    let mut data = Vec::with_capacity(cls.len() * dim);
    for cl in cls {
        data.extend(cl.values().iter().copied());
    }
    ArrayD::from_shape_vec(IxDyn(&[cls.len(), dim]), data).unwrap()
}

/// Batched forward pass without gradient tracking.
pub fn denoise_eps_batch<T: Scalar>(
    cv: &ArrayD<T>,
    ts: &[usize],
    ctx: &ArrayD<T>,
    params: &DenoiserParams<T>,
) -> Result<ArrayD<T>> {
    let cfg = &params.config;
    if cv.ndim() != 4 || cv.shape()[1] != INPUT_CHANNELS {
        return Err(Error::Shape(format!(
            "visual condition batch must be (n, {INPUT_CHANNELS}, h, w), got {:?}",
            cv.shape()
        )));
    }
    if cv.shape()[0] != ts.len() || ctx.shape() != [ts.len(), cfg.context_dim] {
        return Err(Error::Shape(format!(
            "batch sizes disagree: cv {:?}, ts {}, ctx {:?}",
            cv.shape(),
            ts.len(),
            ctx.shape()
        )));
    }
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let cv_v = g.constant(cv.clone());
    let sin = g.constant(time_embedding_batch::<T>(ts, cfg.time_embed_dim));
    let ctx_v = g.constant(ctx.clone());
    let out = denoise_eps_graph(&g, &vars, cfg, cv_v, sin, ctx_v);
    Ok(g.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;
    use ndarray::Array1;

    fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            base_width: 16,
            channel_mults: vec![1, 2],
            res_blocks: 1,
            cross_attn_levels: vec![1],
            time_embed_dim: 16,
            context_dim: CONTEXT_DIM,
        }
    }

    fn random_inputs(
        rng: &mut Prng,
        h: usize,
    ) -> (VisualCondition<f64>, LatentCondition<f64>) {
        let cv = VisualCondition::new(
            rng.normal_tensor::<f64>(&[h, h, 9])
                .into_dimensionality()
                .unwrap(),
        )
        .unwrap();
        let cl = LatentCondition::new(Array1::from_iter(
            (0..CONTEXT_DIM).map(|_| rng.normal()),
        ))
        .unwrap();
        (cv, cl)
    }

    #[test]
    fn zero_init_output_layer_gives_zero_noise() {
        let mut rng = Prng::seed_from_u64(1);
        let params = init_denoiser::<f64>(&tiny_config(), &mut rng).unwrap();
        let (cv, cl) = random_inputs(&mut rng, 8);
        let eps = denoise_eps(&cv, 3, &cl, &params).unwrap();
        assert!(eps.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_denoiser::<f64>(&tiny_config(), &mut Prng::seed_from_u64(9)).unwrap();
        let b = init_denoiser::<f64>(&tiny_config(), &mut Prng::seed_from_u64(9)).unwrap();
        assert_eq!(a.store(), b.store());
    }

    #[test]
    fn bad_context_dim_is_config_error() {
        let cfg = DenoiserConfig {
            context_dim: 64,
            ..tiny_config()
        };
        assert!(matches!(
            init_denoiser::<f64>(&cfg, &mut Prng::seed_from_u64(0)).unwrap_err(),
            Error::Config(_)
        ));
    }

    #[test]
    fn sinusoid_at_t_zero() {
        let e = sinusoidal_time_embedding(0, 16);
        for j in 0..8 {
            assert_eq!(e[j], 0.0);
            assert_eq!(e[8 + j], 1.0);
        }
    }

    #[test]
    fn time_embedding_is_injective_over_schedule() {
        let mut rng = Prng::seed_from_u64(3);
        let params = init_denoiser::<f64>(&tiny_config(), &mut rng).unwrap();
        let embeds: Vec<Array1<f64>> = (0..200).map(|t| time_embed(t, &params)).collect();
        let mut min_dist = f64::INFINITY;
        for i in 0..200 {
            for j in (i + 1)..200 {
                let d: f64 = embeds[i]
                    .iter()
                    .zip(embeds[j].iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                min_dist = min_dist.min(d.sqrt());
            }
        }
        assert!(min_dist > 1e-9, "embeddings collide: min dist {min_dist}");
        // determinism
        assert_eq!(time_embed(17, &params), time_embed(17, &params));
    }

    #[test]
    fn output_shape_follows_input() {
        let mut rng = Prng::seed_from_u64(5);
        let mut params = init_denoiser::<f64>(&tiny_config(), &mut rng).unwrap();
        // unfreeze the zero output layer so the result is generic
        *params.store_mut().get_mut("out.conv.weight") =
            rng.normal_tensor(&[OUTPUT_CHANNELS, 16, 3, 3]);
        let (cv, cl) = random_inputs(&mut rng, 8);
        let eps = denoise_eps(&cv, 1, &cl, &params).unwrap();
        assert_eq!(eps.data().shape(), &[8, 8, 3]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = Prng::seed_from_u64(7);
        let mut params = init_denoiser::<f64>(&tiny_config(), &mut rng).unwrap();
        *params.store_mut().get_mut("out.conv.weight") =
            rng.normal_tensor(&[OUTPUT_CHANNELS, 16, 3, 3]);
        let (cv, cl) = random_inputs(&mut rng, 8);
        let a = denoise_eps(&cv, 2, &cl, &params).unwrap();
        let b = denoise_eps(&cv, 2, &cl, &params).unwrap();
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn perturbing_context_changes_output() {
        let mut rng = Prng::seed_from_u64(11);
        let mut params = init_denoiser::<f64>(&tiny_config(), &mut rng).unwrap();
        *params.store_mut().get_mut("out.conv.weight") =
            rng.normal_tensor(&[OUTPUT_CHANNELS, 16, 3, 3]);
        let (cv, cl) = random_inputs(&mut rng, 8);
        let base = denoise_eps(&cv, 2, &cl, &params).unwrap();
        let mut bumped = cl.values().clone();
        bumped[5] += 1.0;
        let cl2 = LatentCondition::new(bumped).unwrap();
        let out = denoise_eps(&cv, 2, &cl2, &params).unwrap();
        let diff: f64 = base
            .data()
            .iter()
            .zip(out.data().iter())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 0.0, "context perturbation had no effect");
    }

    /// Standalone cross-attention contract checks.
    mod cross_attend_contract {
        use super::*;
        use crate::denoiser::{cross_attend as cross_attend_op, CrossAttentionParams};

        #[test]
        fn single_token_softmax_is_one() {
            let mut rng = Prng::seed_from_u64(13);
            let params = CrossAttentionParams::<f64>::init(24, &mut rng);
            let feats = rng.normal_tensor::<f64>(&[6, 24]);
            let cl = LatentCondition::new(Array1::from_iter(
                (0..CONTEXT_DIM).map(|_| rng.normal()),
            ))
            .unwrap();
            let (_, weights) = cross_attend_op(&feats, &cl, &params).unwrap();
            for w in weights {
                assert!((w - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn zero_value_projection_is_identity() {
            let mut rng = Prng::seed_from_u64(17);
            let mut params = CrossAttentionParams::<f64>::init(24, &mut rng);
            params.store.get_mut("attn.v.weight").fill(0.0);
            let feats = rng.normal_tensor::<f64>(&[6, 24]);
            let cl = LatentCondition::new(Array1::from_iter(
                (0..CONTEXT_DIM).map(|_| rng.normal()),
            ))
            .unwrap();
            let (out, _) = cross_attend_op(&feats, &cl, &params).unwrap();
            for (a, b) in out.iter().zip(feats.iter()) {
                assert_eq!(a, b);
            }
        }

        #[test]
        fn context_sensitivity() {
            let mut rng = Prng::seed_from_u64(19);
            let params = CrossAttentionParams::<f64>::init(24, &mut rng);
            let feats = rng.normal_tensor::<f64>(&[6, 24]);
            let mk = |rng: &mut Prng| {
                LatentCondition::new(Array1::from_iter(
                    (0..CONTEXT_DIM).map(|_| rng.normal()),
                ))
                .unwrap()
            };
            let (a, _) = cross_attend_op(&feats, &mk(&mut rng), &params).unwrap();
            let (b, _) = cross_attend_op(&feats, &mk(&mut rng), &params).unwrap();
            let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
            assert!(diff > 0.0);
        }

        #[test]
        fn dim_mismatch_is_shape_error() {
            let mut rng = Prng::seed_from_u64(23);
            let params = CrossAttentionParams::<f64>::init(24, &mut rng);
            let feats = rng.normal_tensor::<f64>(&[6, 16]);
            let cl = LatentCondition::new(Array1::from_iter(
                (0..CONTEXT_DIM).map(|_| rng.normal()),
            ))
            .unwrap();
            assert!(matches!(
                cross_attend_op(&feats, &cl, &params).unwrap_err(),
                Error::Shape(_)
            ));
        }
    }
}

/// Parameters of one standalone cross-attention layer over `width`-dim
/// spatial features.
#[derive(Clone, Debug)]
pub struct CrossAttentionParams<T: Scalar> {
    pub store: ParamStore<T>,
    pub width: usize,
}

impl<T: Scalar> CrossAttentionParams<T> {
    pub fn init(width: usize, rng: &mut Prng) -> Self {
        let mut store = ParamStore::new();
        store.insert("attn.q.weight", init_weight(&[width, width], width, rng));
        store.insert(
            "attn.k.weight",
            init_weight(&[CONTEXT_DIM, width], CONTEXT_DIM, rng),
        );
        store.insert(
            "attn.v.weight",
            init_weight(&[CONTEXT_DIM, width], CONTEXT_DIM, rng),
        );
        linear_init(&mut store, "attn.out", width, width, rng);
        CrossAttentionParams { store, width }
    }
}

/// Attend a `[n, width]` feature matrix to one latent-condition token:
/// queries from the spatial features, key/value projected from the
/// condition, residual connection around the attention. Also returns the
/// softmax weights (one per query; with a single token they are all 1).
pub fn cross_attend<T: Scalar>(
    features: &ArrayD<T>,
    cl: &LatentCondition<T>,
    params: &CrossAttentionParams<T>,
) -> Result<(ArrayD<T>, Vec<T>)> {
    if features.ndim() != 2 || features.shape()[1] != params.width {
        return Err(Error::Shape(format!(
            "features must be (n, {}), got {:?}",
            params.width,
            features.shape()
        )));
    }
    let n = features.shape()[0];
    let g = Graph::new();
    let vars = params.store.bind_frozen(&g);
    let x = g.constant(
        features
            .clone()
            .into_shape_with_order(IxDyn(&[1, n, params.width]))
            .unwrap(),
    );
    let ctx = g.constant(
        cl.values()
            .clone()
            .into_shape_with_order(IxDyn(&[1, CONTEXT_DIM]))
            .unwrap(),
    );
    let att = cross_attention_core(&g, &vars, "attn", x, ctx);
    let out = g.add(x, att);
    let out = g.reshape(out, &[n, params.width]);
    // recompute the weights the same way the core does
    let flat = g.reshape(x, &[n, params.width]);
    let q = g.matmul(flat, vars.var("attn.q.weight"));
    let q = g.reshape(q, &[1, n, params.width]);
    let k = g.matmul(ctx, vars.var("attn.k.weight"));
    let logits = g.dot_last(q, k);
    let logits = g.scale(logits, T::from_f64c(1.0 / (params.width as f64).sqrt()));
    let logits = g.reshape(logits, &[1, n, 1]);
    let weights = g.softmax(logits, 2);
    Ok((g.value(out), g.value(weights).iter().copied().collect()))
}
