//! Finite-difference checks of the three trainable modules, shared between
//! the gradient suite and the acceptance criteria.

use lipdiff::audio::{temporal_filter_graph, TemporalFilterParams, FEATURE_BANDS, NEIGHBORHOOD};
use lipdiff::denoiser::{denoise_eps_graph, init_denoiser, time_embedding_batch, DenoiserConfig};
use lipdiff::graph::Graph;
use lipdiff::nn::ParamStore;
use lipdiff::rng::Prng;
use lipdiff::visual::{encode_landmarks_graph, LandmarkEncoderParams};
use lipdiff::CONTEXT_DIM;

use super::check_store_gradients;

pub const STEP: f64 = 1e-3;
pub const TOL_MODULE: f64 = 1e-4;

pub fn micro_denoiser_config() -> DenoiserConfig {
    DenoiserConfig {
        base_width: 16,
        channel_mults: vec![1, 2],
        res_blocks: 1,
        cross_attn_levels: vec![1],
        time_embed_dim: 32,
        context_dim: CONTEXT_DIM,
    }
}

/// Temporal-filter gradients against central differences; returns probes.
pub fn check_temporal_filter() -> usize {
    let mut rng = Prng::seed_from_u64(101);
    let params = TemporalFilterParams::<f64>::init(FEATURE_BANDS, &mut rng);
    let input = rng.normal_tensor::<f64>(&[2, NEIGHBORHOOD, 16 * FEATURE_BANDS]);
    let eval = |store: &ParamStore<f64>| {
        let g = Graph::new();
        let vars = store.bind(&g);
        let x = g.constant(input.clone());
        let (out, _) = temporal_filter_graph(&g, &vars, x);
        let sq = g.mul(out, out);
        let obj = g.sum(sq);
        g.value(obj).first().copied().unwrap()
    };
    let g = Graph::new();
    let vars = params.store().bind(&g);
    let x = g.constant(input.clone());
    let (out, _) = temporal_filter_graph(&g, &vars, x);
    let sq = g.mul(out, out);
    let obj = g.sum(sq);
    let grads = g.backward(obj);
    let store = vars.collect_grads(&g, &grads);
    check_store_gradients("temporal filter", params.store(), &store, STEP, TOL_MODULE, 4, eval)
}

/// Landmark-encoder gradients against central differences.
pub fn check_landmark_encoder() -> usize {
    let mut rng = Prng::seed_from_u64(102);
    let params = LandmarkEncoderParams::<f64>::init(&mut rng);
    let input = rng.normal_tensor::<f64>(&[3, 136]).mapv(|v| v.abs() % 1.0);
    let eval = |store: &ParamStore<f64>| {
        let g = Graph::new();
        let vars = store.bind(&g);
        let x = g.constant(input.clone());
        let out = encode_landmarks_graph(&g, &vars, x);
        let sq = g.mul(out, out);
        let obj = g.sum(sq);
        g.value(obj).first().copied().unwrap()
    };
    let g = Graph::new();
    let vars = params.store().bind(&g);
    let x = g.constant(input.clone());
    let out = encode_landmarks_graph(&g, &vars, x);
    let sq = g.mul(out, out);
    let obj = g.sum(sq);
    let grads = g.backward(obj);
    let store = vars.collect_grads(&g, &grads);
    check_store_gradients("landmark encoder", params.store(), &store, STEP, TOL_MODULE, 4, eval)
}

/// Micro-denoiser gradients against central differences.
pub fn check_micro_denoiser() -> usize {
    let cfg = micro_denoiser_config();
    let mut rng = Prng::seed_from_u64(103);
    let mut params = init_denoiser::<f64>(&cfg, &mut rng).unwrap();
    // the output convolution is zero-initialized by contract; give it
    // generic values so gradients reach every layer
    *params.store_mut().get_mut("out.conv.weight") =
        rng.normal_tensor::<f64>(&[3, 16, 3, 3]).mapv(|v| v * 0.2);
    let cv = rng.normal_tensor::<f64>(&[1, 9, 8, 8]);
    let ctx = rng.normal_tensor::<f64>(&[1, CONTEXT_DIM]);
    let eval = |store: &ParamStore<f64>| {
        let g = Graph::new();
        let vars = store.bind(&g);
        let cv_v = g.constant(cv.clone());
        let sin = g.constant(time_embedding_batch::<f64>(&[3], cfg.time_embed_dim));
        let ctx_v = g.constant(ctx.clone());
        let eps = denoise_eps_graph(&g, &vars, &cfg, cv_v, sin, ctx_v);
        let sq = g.mul(eps, eps);
        let obj = g.sum(sq);
        g.value(obj).first().copied().unwrap()
    };
    let g = Graph::new();
    let vars = params.store().bind(&g);
    let cv_v = g.constant(cv.clone());
    let sin = g.constant(time_embedding_batch::<f64>(&[3], cfg.time_embed_dim));
    let ctx_v = g.constant(ctx.clone());
    let eps = denoise_eps_graph(&g, &vars, &cfg, cv_v, sin, ctx_v);
    let sq = g.mul(eps, eps);
    let obj = g.sum(sq);
    let grads = g.backward(obj);
    let store = vars.collect_grads(&g, &grads);
    check_store_gradients("micro denoiser", params.store(), &store, STEP, TOL_MODULE, 2, eval)
}
