//! Finite-difference checks shared by the tensor tests and the core
//! acceptance suite. Each case reports its worst relative error.

use objpose_tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Worst normwise relative error between the tape gradient and central
/// differences, over all inputs.
pub fn grad_error(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars);
    let grads = g.backward(loss).unwrap();
    let eval = |ins: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.leaf(t.clone())).collect();
        let l = f(&mut g, &vars);
        g.value(l).item()
    };
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(&g, vars[k])
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[j] -= STEP;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        worst = worst.max(diff / scale);
    }
    worst
}

/// Random weights for a scalar readout so every output element matters.
pub fn readout(g: &mut Graph, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random(g.shape(y), &mut rng));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

pub const PRIMITIVE_TOL: f64 = 1e-6;

/// `(name, relative error, tolerance)` for every differentiable op.
pub fn cases() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[3, 4], &mut rng);
        let b = Tensor::from_fn(&[3, 4], |_| rng.random_range(0.5..1.5));
        let row = Tensor::from_fn(&[4], |_| rng.random_range(0.5..1.5));
        let col = Tensor::from_fn(&[3, 1], |_| rng.random_range(0.5..1.5));
        for other in [b, row, col] {
            let e = grad_error(&[a.clone(), other], |g, v| {
                let s = g.add(v[0], v[1]).unwrap();
                let d = g.sub(s, v[1]).unwrap();
                let d = g.sub(d, v[1]).unwrap();
                let m = g.mul(d, v[1]).unwrap();
                let q = g.div(m, v[1]).unwrap();
                let q = g.div(q, v[1]).unwrap();
                readout(g, q, 7)
            });
            out.push((format!("binary ops"), e, PRIMITIVE_TOL));
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // keep away from the kinks of relu/abs/clamp
        let x = Tensor::from_fn(&[10], |i| {
            let m = rng.random_range(0.1..1.0);
            if i % 2 == 0 {
                m
            } else {
                -m
            }
        });
        let pos = Tensor::from_fn(&[10], |_| rng.random_range(0.2..2.0));
        type U = fn(&mut Graph, Var) -> Var;
        let ops: Vec<(&str, U, bool)> = vec![
            ("neg", |g, x| g.neg(x), false),
            ("relu", |g, x| g.relu(x), false),
            ("elu", |g, x| g.elu(x), false),
            ("exp", |g, x| g.exp(x), false),
            ("abs", |g, x| g.abs(x), false),
            ("square", |g, x| g.square(x), false),
            ("scale", |g, x| g.scale(x, -2.5), false),
            ("add_scalar", |g, x| g.add_scalar(x, 0.3), false),
            ("clamp_min", |g, x| g.clamp_min(x, 0.05), false),
            ("log", |g, x| g.log(x), true),
            ("sqrt", |g, x| g.sqrt(x), true),
            ("powf", |g, x| g.powf(x, 2.7), true),
        ];
        for (name, op, positive) in ops {
            let input = if positive { pos.clone() } else { x.clone() };
            let e = grad_error(&[input], |g, v| {
                let y = op(g, v[0]);
                readout(g, y, 3)
            });
            out.push((format!("{name}"), e, PRIMITIVE_TOL));
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for ta in [false, true] {
            for tb in [false, true] {
                let a = random(if ta { &[4, 3] } else { &[3, 4] }, &mut rng);
                let b = random(if tb { &[5, 4] } else { &[4, 5] }, &mut rng);
                let e = grad_error(&[a, b], |g, v| {
                    let c = g.matmul_t(v[0], v[1], ta, tb).unwrap();
                    readout(g, c, 4)
                });
                out.push((format!("matmul ta={ta} tb={tb}"), e, PRIMITIVE_TOL));
            }
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for ta in [false, true] {
            for tb in [false, true] {
                let a = random(if ta { &[2, 4, 3] } else { &[2, 3, 4] }, &mut rng);
                let b = random(if tb { &[2, 5, 4] } else { &[2, 4, 5] }, &mut rng);
                let e = grad_error(&[a, b], |g, v| {
                    let c = g.bmm_t(v[0], v[1], ta, tb).unwrap();
                    readout(g, c, 5)
                });
                out.push((format!("bmm ta={ta} tb={tb}"), e, PRIMITIVE_TOL));
            }
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&[2, 3, 4], &mut rng);
        let e = grad_error(&[x.clone()], |g, v| {
            let m = g.mean(v[0]);
            let s = g.square(v[0]);
            let s = g.sum(s);
            let t = g.mul(m, s).unwrap();
            g.sum(t)
        });
        out.push((format!("sum/mean"), e, PRIMITIVE_TOL));
        for axis in 0..3 {
            let e = grad_error(&[x.clone()], |g, v| {
                let y = g.sum_axis(v[0], axis).unwrap();
                let y = g.square(y);
                readout(g, y, 6)
            });
            out.push((format!("sum_axis {axis}"), e, PRIMITIVE_TOL));
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&[5, 6], &mut rng);
        for axis in 0..2 {
            let e = grad_error(&[x.clone()], |g, v| {
                let y = g.softmax(v[0], axis).unwrap();
                readout(g, y, 8)
            });
            out.push((format!("softmax axis {axis}"), e, PRIMITIVE_TOL));
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(&[4, 6], &mut rng);
        let gamma = random(&[6], &mut rng);
        let beta = random(&[6], &mut rng);
        let e = grad_error(&[x, gamma, beta], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
            readout(g, y, 9)
        });
        out.push((format!("layer_norm"), e, PRIMITIVE_TOL));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
            let x = random(&[6, 5, 2], &mut rng);
            let w = random(&[k, k, 2, 3], &mut rng);
            let b = random(&[3], &mut rng);
            let e = grad_error(&[x, w, b], |g, v| {
                let y = g.conv2d(v[0], v[1], Some(v[2]), stride, pad).unwrap();
                readout(g, y, 10)
            });
            out.push((format!("conv2d s={stride} p={pad} k={k}"), e, PRIMITIVE_TOL));
        }
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random(&[2, 3, 4], &mut rng);
        let b = random(&[2, 2, 4], &mut rng);
        let e = grad_error(&[a, b], |g, v| {
            let c = g.concat(&[v[0], v[1]], 1).unwrap();
            let t = g.transpose(c).unwrap();
            let r = g.reshape(t, &[8, 5]).unwrap();
            let n = g.narrow(r, 0, 1, 6).unwrap();
            let n = g.square(n);
            readout(g, n, 11)
        });
        out.push((format!("shape ops"), e, PRIMITIVE_TOL));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(&[5, 3], &mut rng);
        let e = grad_error(&[x], |g, v| {
            let mixed = g
                .row_mix(v[0], 3, vec![(0, 1, 0.25), (0, 2, 0.75), (2, 4, -1.5), (1, 1, 2.0)])
                .unwrap();
            let gathered = g.gather_rows(v[0], &[4, 4, 0]).unwrap();
            let scattered = g.scatter_rows(gathered, &[1, 1, 2], 3).unwrap();
            let s = g.add(mixed, scattered).unwrap();
            let s = g.square(s);
            let t = g.take(s, vec![0, 4, 8, 8]).unwrap();
            readout(g, t, 12)
        });
        out.push((format!("row ops"), e, PRIMITIVE_TOL));
    }
    {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(&[4, 5], &mut rng);
        let b = random(&[6, 5], &mut rng);
        let e = grad_error(&[a, b], |g, v| {
            let s = g.cosine_similarity_matrix(v[0], v[1]).unwrap();
            let s = g.scale(s, 10.0);
            let p = g.softmax(s, 1).unwrap();
            let phi = g.elu(v[1]);
            let phi = g.add_scalar(phi, 1.0);
            let kv = g.matmul(p, phi).unwrap();
            readout(g, kv, 13)
        });
        out.push((format!("composite"), e, 1e-4));
    }
    out
}
