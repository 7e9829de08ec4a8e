//! Parameter storage, layer helpers, and the Adam optimizer.
//!
//! Parameters live in a [`ParamStore`] keyed by a dotted path. A forward
//! pass binds the store into a [`Graph`] once ([`ParamStore::bind`]) and
//! layer functions fetch their tensors by name, so initialization and
//! forward code share a single naming scheme.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::graph::{Grads, Graph, Var};
use crate::rng::Prng;
use crate::scalar::Scalar;

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Scalar> {
    map: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        assert!(
            self.map.insert(name.to_string(), value).is_none(),
            "duplicate parameter {name}"
        );
    }

    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<T> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.map.get(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Iterate in lexicographic name order (the checkpoint ordering).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<T>)> {
        self.map.iter_mut()
    }

    /// Bind every parameter into `g` as a differentiable leaf.
    pub fn bind(&self, g: &Graph<T>) -> BoundVars {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.param(v.clone())))
            .collect();
        BoundVars { map }
    }

    /// Bind as constants (frozen weights: no gradients tracked).
    pub fn bind_frozen(&self, g: &Graph<T>) -> BoundVars {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        BoundVars { map }
    }

    /// Convert the stored scalars (used to load f64 checkpoints into f32
    /// models and for casting test fixtures).
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let map = self
            .map
            .iter()
            .map(|(k, v)| (k.clone(), v.mapv(|e| U::from_f64c(e.to_f64c()))))
            .collect();
        ParamStore { map }
    }
}

/// Graph handles for a bound [`ParamStore`].
pub struct BoundVars {
    map: BTreeMap<String, Var>,
}

impl BoundVars {
    pub fn var(&self, name: &str) -> Var {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("missing bound parameter {name}"))
    }

    /// Pull gradients for every bound parameter out of a backward pass.
    pub fn collect_grads<T: Scalar>(&self, g: &Graph<T>, grads: &Grads<T>) -> GradStore<T> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.map {
            let grad = grads
                .get(*var)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&g.shape(*var))));
            out.insert(name.clone(), grad);
        }
        GradStore { map: out }
    }
}

/// Gradients keyed like their [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradStore<T: Scalar> {
    map: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn get(&self, name: &str) -> &ArrayD<T> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing gradient {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |acc, v| acc.max(v.to_f64c().abs()))
    }
}

/// Adam configuration.
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

/// First/second moment state for one parameter group.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    m: BTreeMap<String, ArrayD<T>>,
    v: BTreeMap<String, ArrayD<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = |p: &ParamStore<T>| {
            p.iter()
                .map(|(k, v)| (k.clone(), ArrayD::zeros(v.raw_dim())))
                .collect::<BTreeMap<_, _>>()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over the whole group.
    pub fn update(
        &mut self,
        params: &mut ParamStore<T>,
        grads: &GradStore<T>,
        cfg: &AdamConfig,
    ) -> Result<()> {
        self.step += 1;
        let b1 = T::from_f64c(cfg.beta1);
        let b2 = T::from_f64c(cfg.beta2);
        let one = T::one();
        let bias1 = T::from_f64c(1.0 - cfg.beta1.powi(self.step as i32));
        let bias2 = T::from_f64c(1.0 - cfg.beta2.powi(self.step as i32));
        let lr = T::from_f64c(cfg.lr);
        let eps = T::from_f64c(cfg.eps);
        for (name, value) in params.iter_mut() {
            let g = grads.get(name);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient in parameter {name}"
                )));
            }
            let m = self.m.get_mut(name).expect("moment m");
            let v = self.v.get_mut(name).expect("moment v");
            ndarray::Zip::from(value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &gg| {
                    *m = b1 * *m + (one - b1) * gg;
                    *v = b2 * *v + (one - b2) * gg * gg;
                    let mhat = *m / bias1;
                    let vhat = *v / bias2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Draw a fan-in scaled Gaussian weight tensor.
pub fn init_weight<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Prng) -> ArrayD<T> {
    let std = (1.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| rng.normal_scaled(std)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Register a dense layer `in_dim -> out_dim` (weight + bias).
pub fn linear_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut Prng,
) {
    store.insert(
        &format!("{name}.weight"),
        init_weight(&[in_dim, out_dim], in_dim, rng),
    );
    store.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[out_dim])));
}

/// `x [m, in] -> [m, out]`.
pub fn linear_fwd<T: Scalar>(g: &Graph<T>, vars: &BoundVars, name: &str, x: Var) -> Var {
    let y = g.matmul(x, vars.var(&format!("{name}.weight")));
    g.add_row_bias(y, vars.var(&format!("{name}.bias")))
}

/// Register a square-kernel conv layer; `zero_init` zeroes both tensors
/// (used for the denoiser output head).
pub fn conv2d_init<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    zero_init: bool,
    rng: &mut Prng,
) {
    let w = if zero_init {
        ArrayD::zeros(IxDyn(&[cout, cin, k, k]))
    } else {
        init_weight(&[cout, cin, k, k], cin * k * k, rng)
    };
    store.insert(&format!("{name}.weight"), w);
    store.insert(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout])));
}

pub fn conv2d_fwd<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let y = g.conv2d(x, vars.var(&format!("{name}.weight")), stride, pad);
    g.add_chan_bias(y, vars.var(&format!("{name}.bias")))
}

/// Register a group-norm layer (unit scale, zero shift).
pub fn group_norm_init<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) {
    store.insert(
        &format!("{name}.gamma"),
        ArrayD::from_elem(IxDyn(&[channels]), T::one()),
    );
    store.insert(&format!("{name}.beta"), ArrayD::zeros(IxDyn(&[channels])));
}

pub fn group_norm_fwd<T: Scalar>(
    g: &Graph<T>,
    vars: &BoundVars,
    name: &str,
    x: Var,
    groups: usize,
) -> Var {
    g.group_norm(
        x,
        vars.var(&format!("{name}.gamma")),
        vars.var(&format!("{name}.beta")),
        groups,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_descends_a_quadratic() {
        // minimize (p - 3)^2 elementwise
        let mut params = ParamStore::<f64>::new();
        params.insert("p", ArrayD::zeros(IxDyn(&[4])));
        let mut state = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..500 {
            let grad = params.get("p").mapv(|v| 2.0 * (v - 3.0));
            let mut gs = BTreeMap::new();
            gs.insert("p".to_string(), grad);
            let grads = GradStore { map: gs };
            state.update(&mut params, &grads, &cfg).unwrap();
        }
        for &v in params.get("p").iter() {
            assert!((v - 3.0).abs() < 1e-2, "converged to {v}");
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = ParamStore::<f64>::new();
        params.insert("p", ArrayD::zeros(IxDyn(&[2])));
        let mut state = AdamState::new(&params);
        let mut gs = BTreeMap::new();
        gs.insert("p".to_string(), ArrayD::from_elem(IxDyn(&[2]), f64::NAN));
        let grads = GradStore { map: gs };
        let err = state
            .update(&mut params, &grads, &AdamConfig::default())
            .unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn bind_and_collect_roundtrip() {
        let mut rng = Prng::seed_from_u64(0);
        let mut params = ParamStore::<f64>::new();
        linear_init(&mut params, "lin", 3, 2, &mut rng);
        let g = Graph::new();
        let vars = params.bind(&g);
        let x = g.constant(rng.normal_tensor(&[5, 3]));
        let y = linear_fwd(&g, &vars, "lin", x);
        let out = g.mean(y);
        let grads = g.backward(out);
        let store = vars.collect_grads(&g, &grads);
        assert_eq!(store.get("lin.weight").shape(), &[3, 2]);
        assert_eq!(store.get("lin.bias").shape(), &[2]);
        assert!(store.max_abs() > 0.0);
    }
}
