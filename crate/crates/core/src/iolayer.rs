//! Joint image/object attention layer. Each modality computes its
//! queries, keys and values once; the same tensors feed self attention and
//! the cross attention in both directions. Also keypoint pruning between
//! layers.

use objpose_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

use crate::matching::MatchHead;
use crate::nn::{count_params, LayerNorm, Linear};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum IoError {
    #[error("pruning would leave no keypoints")]
    EmptyCloud,
    #[error("keep fraction {0} outside (0, 1]")]
    BadFraction(f64),
    #[error("confidence matrix has {got} columns for {want} object tokens")]
    ColumnMismatch { got: usize, want: usize },
    #[error("prune schedule has {schedule} entries for {layers} layers")]
    ScheduleTooLong { schedule: usize, layers: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IoConfig {
    pub dim: usize,
    pub heads: usize,
    /// Cross attention aggregates the other modality's keys instead of its
    /// values.
    pub aggregate_keys: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            heads: 4,
            aggregate_keys: false,
        }
    }
}

/// `φ(x) = elu(x) + 1`.
pub fn feature_map(g: &mut Graph, x: Var) -> Var {
    let e = g.elu(x);
    g.add_scalar(e, 1.0)
}

/// Block-diagonal `[dim, dim]` mask of ones, one block per head.
pub fn head_mask(dim: usize, heads: usize) -> Tensor {
    let hd = dim / heads;
    Tensor::from_fn(&[dim, dim], |i| if (i / dim) / hd == (i % dim) / hd { 1.0 } else { 0.0 })
}

/// Kernelised attention `φ(Q)(φ(K)ᵀV) / φ(Q)Σφ(K)`, per head. `q` is
/// `[..., Lq, C]` and `k, v` are `[..., Lk, C]` with matching leading axes
/// (rank 2 or 3).
pub fn linear_attention(g: &mut Graph, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, TensorError> {
    let shape = g.shape(q).to_vec();
    let rank = shape.len();
    let dim = shape[rank - 1];
    let fq = feature_map(g, q);
    let fk = feature_map(g, k);
    let (kv, ksum) = if rank == 2 {
        (g.matmul_t(fk, v, true, false)?, g.sum_axis(fk, 0)?)
    } else {
        (g.bmm_t(fk, v, true, false)?, g.sum_axis(fk, 1)?)
    };
    let mask = g.constant(head_mask(dim, heads));
    let kv = if heads > 1 { g.mul(kv, mask)? } else { kv };
    let num = if rank == 2 { g.matmul(fq, kv)? } else { g.bmm(fq, kv)? };
    let weighted = g.mul(fq, ksum)?;
    let den = g.linear(weighted, mask, None)?;
    let den = g.add_scalar(den, 1e-9);
    g.div(num, den)
}

/// Weights owned by one modality.
#[derive(Debug, Clone, Copy)]
pub struct ModalityParams {
    pub norm1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub merge: Linear,
    pub norm2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl ModalityParams {
    fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            q: Linear::new(store, &format!("{name}.q"), dim, dim, true, 0.5, rng),
            k: Linear::new(store, &format!("{name}.k"), dim, dim, true, 0.5, rng),
            v: Linear::new(store, &format!("{name}.v"), dim, dim, true, 0.5, rng),
            merge: Linear::new(store, &format!("{name}.merge"), 2 * dim, dim, true, 0.3, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff1: Linear::new(store, &format!("{name}.ff1"), dim, 2 * dim, true, 1.0, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 2 * dim, dim, true, 0.3, rng),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IoLayer {
    pub cfg: IoConfig,
    pub name: String,
    pub image: ModalityParams,
    pub object: ModalityParams,
}

/// Image and object token sequences plus the original keypoint id of each
/// surviving object token.
#[derive(Debug, Clone)]
pub struct IoState {
    pub image: Var,
    pub object: Var,
    pub object_indices: Vec<usize>,
}

/// Which tensor fed which attention input, recorded during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct ProjectionTrace {
    pub uses: Vec<(&'static str, Var)>,
}

impl ProjectionTrace {
    pub fn get(&self, role: &str) -> Option<Var> {
        self.uses.iter().find(|(r, _)| *r == role).map(|&(_, v)| v)
    }
}

struct Projected {
    q: Var,
    k: Var,
    v: Var,
}

impl IoLayer {
    pub fn new(store: &mut ParamStore, name: &str, cfg: IoConfig, rng: &mut impl Rng) -> Self {
        assert!(cfg.dim % cfg.heads == 0, "width must split evenly into heads");
        Self {
            cfg,
            name: name.to_string(),
            image: ModalityParams::new(store, &format!("{name}.img"), cfg.dim, rng),
            object: ModalityParams::new(store, &format!("{name}.obj"), cfg.dim, rng),
        }
    }

    pub fn num_scalars(&self, store: &ParamStore) -> usize {
        count_params(store, &format!("{}.", self.name))
    }

    fn project(&self, g: &mut Graph, store: &ParamStore, p: &ModalityParams, x: Var) -> Result<Projected, TensorError> {
        let h = p.norm1.forward(g, store, x)?;
        Ok(Projected {
            q: p.q.forward(g, store, h)?,
            k: p.k.forward(g, store, h)?,
            v: p.v.forward(g, store, h)?,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn update(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        p: &ModalityParams,
        x: Var,
        own: &Projected,
        other: &Projected,
        tag: &'static [&'static str; 6],
        trace: &mut Option<&mut ProjectionTrace>,
    ) -> Result<Var, TensorError> {
        let heads = self.cfg.heads;
        let self_msg = linear_attention(g, own.q, own.k, own.v, heads)?;
        let cross_vals = if self.cfg.aggregate_keys { other.k } else { other.v };
        let cross_msg = linear_attention(g, own.q, other.k, cross_vals, heads)?;
        if let Some(t) = trace.as_deref_mut() {
            for (role, v) in tag.iter().zip([own.q, own.k, own.v, own.q, other.k, cross_vals]) {
                t.uses.push((role, v));
            }
        }
        let axis = g.shape(x).len() - 1;
        let msg = g.concat(&[self_msg, cross_msg], axis)?;
        let msg = p.merge.forward(g, store, msg)?;
        let x = g.add(x, msg)?;
        let h = p.norm2.forward(g, store, x)?;
        let h = p.ff1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = p.ff2.forward(g, store, h)?;
        g.add(x, h)
    }

    /// Both branches are updated from the same pre-layer projections.
    /// `image` and `object` may be `[L, C]` or batched `[B, L, C]`.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        object: Var,
        mut trace: Option<&mut ProjectionTrace>,
    ) -> Result<(Var, Var), TensorError> {
        let pi = self.project(g, store, &self.image, image)?;
        let po = self.project(g, store, &self.object, object)?;
        const IMG: [&str; 6] = ["img.self.q", "img.self.k", "img.self.v", "img.cross.q", "obj.cross.k", "obj.cross.v"];
        const OBJ: [&str; 6] = ["obj.self.q", "obj.self.k", "obj.self.v", "obj.cross.q", "img.cross.k", "img.cross.v"];
        let ni = self.update(g, store, &self.image, image, &pi, &po, &IMG, &mut trace)?;
        let no = self.update(g, store, &self.object, object, &po, &pi, &OBJ, &mut trace)?;
        Ok((ni, no))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        state: &IoState,
        trace: Option<&mut ProjectionTrace>,
    ) -> Result<IoState, TensorError> {
        let (image, object) = self.forward_tokens(g, store, state.image, state.object, trace)?;
        Ok(IoState {
            image,
            object,
            object_indices: state.object_indices.clone(),
        })
    }
}

/// Scalar count of a layer that keeps separate query/key/value weights for
/// self and for cross attention in each modality, at the same width.
pub fn duplicated_baseline_params(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> usize {
    for m in ["img", "obj"] {
        ModalityParams::new(store, &format!("{name}.{m}"), dim, rng);
        for p in ["q", "k", "v"] {
            Linear::new(store, &format!("{name}.{m}.cross_{p}"), dim, dim, true, 1.0, rng);
        }
    }
    count_params(store, &format!("{name}."))
}

/// Positions to keep: the top `⌈keep·L⌉` by score, ties to the lower index,
/// returned in ascending order.
pub fn prune_indices(scores: &[f64], keep: f64) -> Result<Vec<usize>, IoError> {
    if !(keep > 0.0 && keep <= 1.0) {
        return Err(IoError::BadFraction(keep));
    }
    let n = ((keep * scores.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    if n == 0 {
        return Err(IoError::EmptyCloud);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..n].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Column sums of a confidence matrix.
pub fn column_scores(p: &Tensor) -> Vec<f64> {
    let (rows, cols) = (p.shape()[0], p.shape()[1]);
    let mut s = vec![0.0; cols];
    for r in 0..rows {
        for (acc, v) in s.iter_mut().zip(p.row(r)) {
            *acc += v;
        }
    }
    s
}

/// Drops the lowest-scoring object tokens, scoring each by its summed
/// confidence over all image tokens.
pub fn prune(g: &mut Graph, state: &IoState, confidences: &Tensor, keep: f64) -> Result<IoState, IoError> {
    let want = state.object_indices.len();
    let got = confidences.shape()[1];
    if got != want {
        return Err(IoError::ColumnMismatch { got, want });
    }
    if keep == 1.0 {
        return Ok(state.clone());
    }
    let kept = prune_indices(&column_scores(confidences), keep)?;
    Ok(IoState {
        image: state.image,
        object: g.gather_rows(state.object, &kept)?,
        object_indices: kept.iter().map(|&k| state.object_indices[k]).collect(),
    })
}

/// Output of a full stack: final state, the confidence matrix after every
/// layer (the last one is the final matching), and token ids per layer.
#[derive(Debug, Clone)]
pub struct StackOutput {
    pub state: IoState,
    pub confidences: Vec<Var>,
    pub indices: Vec<Vec<usize>>,
}

/// Runs the layers in order; after layer `i` the matching head scores the
/// keypoints and, if `schedule[i]` exists, keeps that fraction.
pub fn stack_forward(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[IoLayer],
    head: &MatchHead,
    initial: IoState,
    schedule: &[f64],
    tau: f64,
) -> Result<StackOutput, IoError> {
    if schedule.len() > layers.len() {
        return Err(IoError::ScheduleTooLong {
            schedule: schedule.len(),
            layers: layers.len(),
        });
    }
    let mut state = initial;
    let mut confidences = Vec::with_capacity(layers.len());
    let mut indices = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        state = layer.forward(g, store, &state, None)?;
        let p = head.confidence(g, store, state.image, state.object, tau)?;
        confidences.push(p);
        indices.push(state.object_indices.clone());
        if let Some(&keep) = schedule.get(i) {
            if i + 1 < layers.len() {
                let pv = g.value(p).clone();
                state = prune(g, &state, &pv, keep)?;
            }
        }
    }
    Ok(StackOutput {
        state,
        confidences,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::zero_params;
    use crate::synth::rng_for;

    fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = rng_for(&[seed]);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn spec_pruning_example() {
        assert_eq!(prune_indices(&[0.9, 0.1, 0.5, 0.5], 0.5).unwrap(), vec![0, 2]);
        assert_eq!(prune_indices(&[0.3; 30], 0.1).unwrap(), vec![0, 1, 2]);
        assert_eq!(prune_indices(&[], 0.5).unwrap_err(), IoError::EmptyCloud);
        assert!(matches!(prune_indices(&[1.0], 0.0), Err(IoError::BadFraction(_))));
    }

    #[test]
    fn keep_all_is_identity() {
        let mut g = Graph::new();
        let state = IoState {
            image: g.constant(Tensor::zeros(&[2, 4])),
            object: g.constant(rand_tensor(1, &[3, 4])),
            object_indices: vec![4, 7, 9],
        };
        let out = prune(&mut g, &state, &Tensor::full(&[2, 3], 0.2), 1.0).unwrap();
        assert_eq!(out.object, state.object);
        assert_eq!(out.object_indices, state.object_indices);
    }

    #[test]
    fn attention_matches_scalar_oracle() {
        let (lq, lk, dim, heads) = (3, 4, 4, 2);
        let (q, k, v) = (rand_tensor(2, &[lq, dim]), rand_tensor(3, &[lk, dim]), rand_tensor(4, &[lk, dim]));
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = linear_attention(&mut g, qv, kv, vv, heads).unwrap();
        let phi = |x: f64| if x > 0.0 { x + 1.0 } else { x.exp() };
        let hd = dim / heads;
        for i in 0..lq {
            for c in 0..dim {
                let h0 = (c / hd) * hd;
                let mut num = 0.0;
                let mut den = 0.0;
                for j in 0..lk {
                    let sim: f64 = (h0..h0 + hd).map(|d| phi(q.at(&[i, d])) * phi(k.at(&[j, d]))).sum();
                    num += sim * v.at(&[j, c]);
                    den += sim;
                }
                assert!((g.value(out).at(&[i, c]) - num / (den + 1e-9)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batched_attention_equals_per_sample() {
        let mut g = Graph::new();
        let q = g.constant(rand_tensor(5, &[2, 3, 4]));
        let k = g.constant(rand_tensor(6, &[2, 5, 4]));
        let v = g.constant(rand_tensor(7, &[2, 5, 4]));
        let all = linear_attention(&mut g, q, k, v, 2).unwrap();
        for b in 0..2 {
            let pick = |g: &mut Graph, x: Var, l: usize| {
                let n = g.narrow(x, 0, b, 1).unwrap();
                g.reshape(n, &[l, 4]).unwrap()
            };
            let (qb, kb, vb) = (pick(&mut g, q, 3), pick(&mut g, k, 5), pick(&mut g, v, 5));
            let one = linear_attention(&mut g, qb, kb, vb, 2).unwrap();
            let got = pick(&mut g, all, 3);
            assert!(g.value(one).max_abs_diff(g.value(got)) < 1e-14);
        }
    }

    #[test]
    fn zero_values_and_ffn_output_pass_tokens_through() {
        let mut store = ParamStore::new();
        let layer = IoLayer::new(&mut store, "io", IoConfig { dim: 8, heads: 2, aggregate_keys: false }, &mut rng_for(&[8]));
        for m in ["img", "obj"] {
            zero_params(&mut store, &format!("io.{m}.v."));
            zero_params(&mut store, &format!("io.{m}.merge.b"));
            zero_params(&mut store, &format!("io.{m}.ff2."));
        }
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(9, &[5, 8]));
        let b = g.constant(rand_tensor(10, &[7, 8]));
        let (na, nb) = layer.forward_tokens(&mut g, &store, a, b, None).unwrap();
        assert!(g.value(na).max_abs_diff(g.value(a)) < 1e-12);
        assert!(g.value(nb).max_abs_diff(g.value(b)) < 1e-12);
    }

    #[test]
    fn object_permutation_equivariance() {
        let mut store = ParamStore::new();
        let layer = IoLayer::new(&mut store, "io", IoConfig { dim: 8, heads: 2, aggregate_keys: false }, &mut rng_for(&[11]));
        let obj = rand_tensor(12, &[6, 8]);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut g = Graph::new();
        let a = g.constant(rand_tensor(13, &[4, 8]));
        let b = g.constant(obj);
        let bp = g.gather_rows(b, &perm).unwrap();
        let (ia, oa) = layer.forward_tokens(&mut g, &store, a, b, None).unwrap();
        let (ib, ob) = layer.forward_tokens(&mut g, &store, a, bp, None).unwrap();
        assert!(g.value(ia).max_abs_diff(g.value(ib)) < 1e-10);
        let oa_p = g.gather_rows(oa, &perm).unwrap();
        assert!(g.value(oa_p).max_abs_diff(g.value(ob)) < 1e-10);
    }

    #[test]
    fn projections_are_shared_between_self_and_cross() {
        let mut store = ParamStore::new();
        for keys in [false, true] {
            let name = if keys { "lit" } else { "io" };
            let layer = IoLayer::new(&mut store, name, IoConfig { dim: 8, heads: 1, aggregate_keys: keys }, &mut rng_for(&[14]));
            let mut g = Graph::new();
            let a = g.constant(rand_tensor(15, &[4, 8]));
            let b = g.constant(rand_tensor(16, &[6, 8]));
            let mut trace = ProjectionTrace::default();
            layer.forward_tokens(&mut g, &store, a, b, Some(&mut trace)).unwrap();
            for (x, y) in [
                ("img.self.q", "img.cross.q"),
                ("obj.self.q", "obj.cross.q"),
                ("img.self.k", "img.cross.k"),
                ("obj.self.k", "obj.cross.k"),
            ] {
                let (vx, vy) = (trace.get(x).unwrap(), trace.get(y).unwrap());
                assert_eq!(vx, vy);
                assert_eq!(g.value(vx).data(), g.value(vy).data());
            }
            let cross_v = trace.get("obj.cross.v").unwrap();
            let want = if keys { trace.get("obj.self.k") } else { trace.get("obj.self.v") };
            assert_eq!(Some(cross_v), want);
        }
    }

    #[test]
    fn parameter_count_below_duplicated_baseline() {
        let mut store = ParamStore::new();
        let layer = IoLayer::new(&mut store, "io", IoConfig::default(), &mut rng_for(&[17]));
        let ours = layer.num_scalars(&store);
        let base = duplicated_baseline_params(&mut store, "dup", 64, &mut rng_for(&[18]));
        // per modality: 2 norms (4·64) + q,k,v (3·(64²+64)) + merge (128·64+64)
        // + feed-forward (64·128+128 + 128·64+64)
        let per_mod = 4 * 64 + 3 * (64 * 64 + 64) + (128 * 64 + 64) + (64 * 128 + 128) + (128 * 64 + 64);
        assert_eq!(ours, 2 * per_mod);
        assert_eq!(ours, 75136);
        assert_eq!(base, 2 * (per_mod + 3 * (64 * 64 + 64)));
        assert_eq!(base, 100096);
        assert!(ours < base);
    }
}
