//! Small parameterised layers over the autograd graph.

use objpose_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;

pub type NnResult<T> = objpose_tensor::Result<T>;

/// Uniform He-style initialisation with bound `sqrt(6 / fan_in) * gain`.
pub fn init_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt() * gain;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(rng, &[din, dout], din, gain));
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[dout])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> NnResult<Var> {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        store.get(self.w).len() + self.b.map_or(0, |b| store.get(b).len())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> NnResult<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta, 1e-5)
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        store.get(self.gamma).len() + store.get(self.beta).len()
    }
}

/// `k × k` convolution with bias, zero padding `k / 2`.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            init_uniform(rng, &[k, k, cin, cout], k * k * cin, gain),
        );
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        Self {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> NnResult<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Zeroes every parameter whose name starts with `prefix`.
pub fn zero_params(store: &mut ParamStore, prefix: &str) {
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}

/// Total scalar count of parameters whose name starts with `prefix`.
pub fn count_params(store: &ParamStore, prefix: &str) -> usize {
    store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .map(|id| store.get(id).len())
        .sum()
}
