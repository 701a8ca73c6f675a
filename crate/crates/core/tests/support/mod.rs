//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;
use std::time::Instant;

use objpose::data::camera;
use objpose::eval::read_csv;
use objpose::features::PosEnc3D;
use objpose::geom::{rotation_geodesic, Camera, Pose, Vec2, Vec3};
use objpose::iolayer::{prune, IoConfig, IoLayer, IoState};
use objpose::matching::{
    coarse_loss, dual_softmax, extract_matches, fine_loss, fine_refine_2d, project_keypoints, MatchHead, FOCAL_GAMMA,
};
use objpose::model::PoseModel;
use objpose::pnp::{solve_pnp_ransac, Correspondence, RansacConfig};
use objpose::refine3d::{apply_pose_delta, refine_losses, CropBox, PoseDelta, RefineConfig, RefineMatch, Refiner};
use objpose::synth::rng_for;
use objpose::train::{load_model, Checkpoint, TrainConfig, Trainer};
use objpose_tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

#[path = "../../../tensor/tests/support/primitives.rs"]
pub mod primitives;

pub const COMPOSED_TOL: f64 = 1e-4;

pub fn random_pose(rng: &mut impl Rng) -> Pose {
    let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(0.0..3.1);
    let aa = if axis.norm() > 1e-6 { axis.normalize() * angle } else { Vec3::zeros() };
    let t = Vec3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(1.5..3.5));
    Pose::from_axis_angle(aa, t)
}

/// Pinhole projection written out by hand.
pub fn pinhole(pose: &Pose, cam: &Camera, p: &Vec3) -> Vec2 {
    let c = pose.rotation() * p + pose.translation();
    Vec2::new(cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy)
}

pub struct PnpOracle {
    pub max_rot: f64,
    pub max_trans: f64,
    pub seconds: f64,
}

/// Random poses with exact correspondences, solved by RANSAC + refinement.
pub fn pnp_oracle(trials: usize, points: usize) -> PnpOracle {
    let cam = camera();
    let start = Instant::now();
    let (mut max_rot, mut max_trans) = (0.0f64, 0.0f64);
    for s in 0..trials {
        let mut rng = rng_for(&[0x9a9, s as u64]);
        let gt = random_pose(&mut rng);
        let corrs: Vec<Correspondence> = (0..points)
            .map(|_| {
                let p = Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                Correspondence::new(pinhole(&gt, &cam, &p), p, 1.0)
            })
            .collect();
        let r = solve_pnp_ransac(&corrs, &cam, &RansacConfig::default(), &mut rng).expect("exact data solves");
        max_rot = max_rot.max(rotation_geodesic(r.pose.rotation(), gt.rotation()));
        max_trans = max_trans.max((r.pose.translation() - gt.translation()).norm());
    }
    PnpOracle {
        max_rot,
        max_trans,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Two-pass softmax product with explicit loops.
pub fn dual_softmax_oracle(s: &[f64], rows: usize, cols: usize, tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let x = s[i * cols + j] / tau;
            let rmax = (0..cols).map(|k| s[i * cols + k] / tau).fold(f64::NEG_INFINITY, f64::max);
            let cmax = (0..rows).map(|k| s[k * cols + j] / tau).fold(f64::NEG_INFINITY, f64::max);
            let rsum: f64 = (0..cols).map(|k| (s[i * cols + k] / tau - rmax).exp()).sum();
            let csum: f64 = (0..rows).map(|k| (s[k * cols + j] / tau - cmax).exp()).sum();
            out[i * cols + j] = (x - rmax).exp() / rsum * ((x - cmax).exp() / csum);
        }
    }
    out
}

/// All `(row, col)` pairs that are each other's strict-first maximum and
/// reach `theta`, by exhaustive comparison.
pub fn mnn_oracle(p: &[f64], rows: usize, cols: usize, theta: f64) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..rows {
        for j in 0..cols {
            let v = p[i * cols + j];
            let row_best = (0..cols).all(|k| p[i * cols + k] < v || (p[i * cols + k] == v && k >= j));
            let col_best = (0..rows).all(|k| p[k * cols + j] < v || (p[k * cols + j] == v && k >= i));
            if row_best && col_best && v >= theta {
                out.push((i, j));
            }
        }
    }
    out
}

pub struct MatchingOracle {
    pub sets_equal: bool,
    pub max_p_diff: f64,
    pub nonempty: usize,
}

pub fn matching_oracle(trials: usize) -> MatchingOracle {
    let (rows, cols, tau, theta) = (20, 30, 0.1, 0.1);
    let mut res = MatchingOracle {
        sets_equal: true,
        max_p_diff: 0.0,
        nonempty: 0,
    };
    for s in 0..trials {
        let mut rng = rng_for(&[0xd5, s as u64]);
        let scores = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-1.0..1.0));
        let mut g = Graph::new();
        let sv = g.constant(scores.clone());
        let p = dual_softmax(&mut g, sv, tau).unwrap();
        let oracle = dual_softmax_oracle(scores.data(), rows, cols, tau);
        for (a, b) in g.value(p).data().iter().zip(&oracle) {
            res.max_p_diff = res.max_p_diff.max((a - b).abs());
        }
        let got: Vec<(usize, usize)> = extract_matches(g.value(p), theta).iter().map(|m| (m.cell, m.keypoint)).collect();
        let want = mnn_oracle(g.value(p).data(), rows, cols, theta);
        res.sets_equal &= got == want;
        res.nonempty += usize::from(!got.is_empty());
    }
    res
}

/// Largest translation error of `apply_pose_delta` against a ground truth
/// built by hand from a known zoom and pixel offset.
pub fn pose_delta_oracle(trials: usize) -> f64 {
    let cam = camera();
    let mut worst = 0.0f64;
    for s in 0..trials {
        let mut rng = rng_for(&[0xde17a, s as u64]);
        let pose0 = random_pose(&mut rng);
        let zoom = rng.random_range(0.7..1.43);
        let off = Vec2::new(rng.random_range(-6.4..6.4), rng.random_range(-6.4..6.4));
        let t0 = pose0.translation();
        let p0 = Vec2::new(cam.fx * t0.x / t0.z + cam.cx, cam.fy * t0.y / t0.z + cam.cy);
        let pg = p0 + off;
        let zg = t0.z * zoom;
        let tg = Vec3::new((pg.x - cam.cx) * zg / cam.fx, (pg.y - cam.cy) * zg / cam.fy, zg);
        let crop = CropBox::centred(p0, 64.0);
        let (q0, qg) = (crop.normalize(p0), crop.normalize(pg));
        let delta = PoseDelta {
            zoom,
            shift: Vec2::new(qg.x / q0.x, qg.y / q0.y),
        };
        let back = apply_pose_delta(&pose0, &delta, &cam, &crop).unwrap();
        worst = worst.max((back.translation() - tg).norm());
        worst = worst.max((back.rotation() - pose0.rotation()).abs().max());
    }
    worst
}

/// Survivors of `prune` against sorting column sums by hand.
pub fn pruning_oracle(trials: usize) -> bool {
    let mut ok = true;
    for s in 0..trials {
        let mut rng = rng_for(&[0x9e, s as u64]);
        let (rows, cols) = (rng.random_range(4..40), rng.random_range(4..80));
        let keep = rng.random_range(0.05..1.0);
        let p = Tensor::from_fn(&[rows, cols], |_| rng.random_range(0.0..1.0));
        let mut g = Graph::new();
        let state = IoState {
            image: g.constant(Tensor::zeros(&[rows, 2])),
            object: g.constant(Tensor::from_fn(&[cols, 2], |i| i as f64)),
            object_indices: (0..cols).map(|c| 1000 + c).collect(),
        };
        let out = prune(&mut g, &state, &p, keep).unwrap();
        let sums: Vec<f64> = (0..cols).map(|c| (0..rows).map(|r| p.data()[r * cols + c]).sum()).collect();
        let mut order: Vec<usize> = (0..cols).collect();
        order.sort_by(|&a, &b| sums[b].partial_cmp(&sums[a]).unwrap().then(a.cmp(&b)));
        let n = (keep * cols as f64 - 1e-9).ceil() as usize;
        let mut want: Vec<usize> = order[..n].iter().map(|c| 1000 + c).collect();
        want.sort_unstable();
        ok &= out.object_indices == want;
        let rows_ok = out
            .object_indices
            .iter()
            .enumerate()
            .all(|(r, &k)| g.value(out.object).data()[2 * r] == (2 * (k - 1000)) as f64);
        ok &= rows_ok;
    }
    ok
}

/// Fraction of ground-truth-visible template keypoints that survive a 50%
/// prune when confidences are one-hot on the true cells.
pub fn gt_visible_retention(samples: usize) -> f64 {
    let cfg = TrainConfig::desk();
    let mut t = Trainer::new(cfg).unwrap();
    let (mut kept, mut visible) = (0usize, 0usize);
    for i in 0..samples {
        let s = t.sample(0, i, 0).unwrap();
        let proj = project_keypoints(&s.query, &s.cloud.points, s.diameter);
        let cells = (s.query.cam.width / 4) * (s.query.cam.height / 4);
        let n = proj.len();
        let p = Tensor::from_fn(&[cells, n], |k| {
            let (c, j) = (k / n, k % n);
            if proj[j].cell == Some(c) {
                1.0
            } else {
                0.0
            }
        });
        let mut g = Graph::new();
        let state = IoState {
            image: g.constant(Tensor::zeros(&[cells, 1])),
            object: g.constant(Tensor::zeros(&[n, 1])),
            object_indices: (0..n).collect(),
        };
        let out = prune(&mut g, &state, &p, 0.5).unwrap();
        visible += proj.iter().filter(|q| q.cell.is_some()).count();
        kept += out.object_indices.iter().filter(|&&j| proj[j].cell.is_some()).count();
    }
    kept as f64 / visible as f64
}

/// Central differences over a sample of parameter scalars whose names start
/// with `prefix`; worst `max |analytic − numeric| / max |numeric|`.
pub fn param_grad_error(
    store: &mut ParamStore,
    prefix: &str,
    per_param: usize,
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
) -> f64 {
    const STEP: f64 = 1e-5;
    let mut g = Graph::new();
    let loss = f(&mut g, store);
    let grads = g.backward(loss).unwrap().for_params(&g, store);
    let ids: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    assert!(!ids.is_empty(), "no parameters under {prefix}");
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for id in ids {
        let len = store.get(id).len();
        let analytic = grads[id.index()].clone().unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let picks: Vec<usize> = (0..per_param.min(len)).map(|k| k * len / per_param.min(len)).collect();
        for j in picks {
            let base = store.get(id).data()[j];
            store.get_mut(id).data_mut()[j] = base + STEP;
            let mut gp = Graph::new();
            let lp = f(&mut gp, store);
            let plus = gp.value(lp).item();
            store.get_mut(id).data_mut()[j] = base - STEP;
            let mut gm = Graph::new();
            let lm = f(&mut gm, store);
            let minus = gm.value(lm).item();
            store.get_mut(id).data_mut()[j] = base;
            let numeric = (plus - minus) / (2.0 * STEP);
            diff = diff.max((analytic.data()[j] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
    }
    diff / scale.max(1e-8)
}

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `(name, relative error, tolerance)` for the composed training graphs.
pub fn composed_cases() -> Vec<(String, f64, f64)> {
    let mut out = Vec::new();
    let mut rng = rng_for(&[0xc0]);

    // dual softmax into the focal loss, wrt the score matrix
    let s = random_tensor(&[6, 8], &mut rng);
    let gt = vec![(0, 1), (2, 5), (3, 3), (5, 0)];
    let e = primitives::grad_error(&[s], |g, v| {
        let p = dual_softmax(g, v[0], 0.1).unwrap();
        coarse_loss(g, p, &gt, FOCAL_GAMMA).unwrap()
    });
    out.push(("dual softmax focal loss".into(), e, COMPOSED_TOL));

    // tokens through the shared matching head
    let mut store = ParamStore::new();
    let head = MatchHead::new(&mut store, "head", 8, &mut rng);
    let img = random_tensor(&[6, 8], &mut rng);
    let obj = random_tensor(&[7, 8], &mut rng);
    let e = {
        let store = &store;
        primitives::grad_error(&[img.clone(), obj.clone()], |g, v| {
            let p = head.confidence(g, store, v[0], v[1], 0.1).unwrap();
            coarse_loss(g, p, &gt, FOCAL_GAMMA).unwrap()
        })
    };
    out.push(("coarse loss wrt tokens".into(), e, COMPOSED_TOL));
    let e = param_grad_error(&mut store, "head", 16, |g, st| {
        let (a, b) = (g.constant(img.clone()), g.constant(obj.clone()));
        let p = head.confidence(g, st, a, b, 0.1).unwrap();
        coarse_loss(g, p, &gt, FOCAL_GAMMA).unwrap()
    });
    out.push(("coarse loss wrt head".into(), e, COMPOSED_TOL));

    // attention layer into the coarse loss
    let mut store = ParamStore::new();
    let layer = IoLayer::new(
        &mut store,
        "io",
        IoConfig {
            dim: 8,
            heads: 2,
            aggregate_keys: false,
        },
        &mut rng,
    );
    let head = MatchHead::new(&mut store, "head", 8, &mut rng);
    let e = param_grad_error(&mut store, "io", 6, |g, st| {
        let (a, b) = (g.constant(img.clone()), g.constant(obj.clone()));
        let (a, b) = layer.forward_tokens(g, st, a, b, None).unwrap();
        let p = head.confidence(g, st, a, b, 0.1).unwrap();
        coarse_loss(g, p, &gt, FOCAL_GAMMA).unwrap()
    });
    out.push(("coarse loss wrt attention layer".into(), e, COMPOSED_TOL));

    // 3D positional encoding
    let mut store = ParamStore::new();
    let enc = PosEnc3D::new(&mut store, "pos3d", 8, &mut rng);
    let xyz = random_tensor(&[5, 3], &mut rng);
    let w = random_tensor(&[5, 8], &mut rng);
    let e = param_grad_error(&mut store, "pos3d", 16, |g, st| {
        let x = g.constant(xyz.clone());
        let y = enc.forward(g, st, x).unwrap();
        let wv = g.constant(w.clone());
        let y = g.mul(y, wv).unwrap();
        g.sum(y)
    });
    out.push(("3D encoding wrt weights".into(), e, 1e-5));

    // fine windows into the fine loss, variances frozen as in training
    let (h, wdt, c) = (9, 9, 6);
    let fq = random_tensor(&[h * wdt, c], &mut rng);
    let anchors = random_tensor(&[3, c], &mut rng);
    let centres = [(4i64, 4i64), (1, 7), (8, 0)];
    let gt_off = Tensor::from_fn(&[3, 2], |_| rng.random_range(-1.5..1.5));
    let frozen = {
        let mut g = Graph::new();
        let (a, b) = (g.constant(fq.clone()), g.constant(anchors.clone()));
        let f = fine_refine_2d(&mut g, a, (h, wdt), &centres, b, 5).unwrap();
        g.value(f.variances).clone()
    };
    let e = primitives::grad_error(&[fq.clone(), anchors.clone()], |g, v| {
        let f = fine_refine_2d(g, v[0], (h, wdt), &centres, v[1], 5).unwrap();
        let var = g.constant(frozen.clone());
        fine_loss(g, f.offsets, var, &gt_off, 0.05).unwrap()
    });
    out.push(("fine loss".into(), e, COMPOSED_TOL));

    // 3D refinement branch wrt its parameters
    let mut store = ParamStore::new();
    let cfg = RefineConfig {
        bins: 10,
        hidden: 8,
        heads: 2,
        ..RefineConfig::default()
    };
    let refiner = Refiner::new(&mut store, "refine", 8, cfg, &mut rng);
    // zero-initialised biases leave empty grid cells exactly on the relu kink
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with("refine.conv") && store.get(id).shape().len() == 1 {
            store.get_mut(id).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        }
    }
    let fq = random_tensor(&[64 * 64, 8], &mut rng);
    let tf = random_tensor(&[12, 8], &mut rng);
    let matches: Vec<RefineMatch> = (0..12)
        .map(|_| RefineMatch {
            point: Vec3::new(rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4), rng.random_range(-0.4..0.4)),
            confidence: rng.random_range(0.1..1.0),
        })
        .collect();
    let pose0 = Pose::from_axis_angle(Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.05, -0.03, 2.0));
    let cam = camera();
    let crop = CropBox::centred(Vec2::new(34.0, 30.8), 64.0);
    let gt = PoseDelta {
        zoom: 1.21,
        shift: Vec2::new(1.07, 0.93),
    };
    for part in ["refine.io", "refine.conv", "refine.shift", "refine.zoom"] {
        let e = param_grad_error(&mut store, part, 8, |g, st| {
            let (a, b) = (g.constant(fq.clone()), g.constant(tf.clone()));
            let (_, r) = refiner.forward(g, st, &matches, &pose0, &cam, a, b, &crop).unwrap();
            let (lz, l2d) = refine_losses(g, &r, &gt).unwrap();
            g.add(lz, l2d).unwrap()
        });
        out.push((format!("refine loss wrt {part}"), e, COMPOSED_TOL));
    }
    out
}

static TRAIN_LOCK: Mutex<()> = Mutex::new(());

pub struct TrainedRun {
    pub cfg: TrainConfig,
    pub dir: PathBuf,
    pub model: PoseModel,
    pub store: ParamStore,
    /// Training wall time summed over epochs, whether trained now or cached.
    pub train_seconds: f64,
}

#[derive(serde::Deserialize)]
struct EpochRow {
    seconds: f64,
}

/// The desk preset trained once and cached under the target directory;
/// an interrupted run resumes from its last epoch checkpoint.
pub fn trained_desk_run() -> TrainedRun {
    let _guard = TRAIN_LOCK.lock().unwrap_or_else(|e| e.into_inner());
    let cfg = TrainConfig::desk();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("desk-{}", &cfg.fingerprint()[..12]));
    let ckpt_path = dir.join("checkpoint.pmck");
    let existing = Checkpoint::load(&ckpt_path).ok().filter(|c| c.fingerprint == cfg.fingerprint());
    let ckpt = match existing {
        Some(c) if c.epoch >= cfg.epochs => c,
        other => {
            let mut t = match other {
                Some(c) => Trainer::from_checkpoint(cfg.clone(), &c).unwrap(),
                None => Trainer::new(cfg.clone()).unwrap(),
            };
            t.run(Some(&dir), |m| {
                eprintln!(
                    "desk epoch {:>2}: loss {:.3} coarse {:.3} correct {:.1} ({:.0}s)",
                    m.epoch, m.loss, m.coarse, m.correct, m.seconds
                )
            })
            .unwrap();
            t.checkpoint()
        }
    };
    let rows: Vec<EpochRow> = read_csv(&dir.join("metrics.csv")).unwrap();
    let train_seconds = rows.iter().map(|r| r.seconds).sum();
    let (model, store) = load_model(&cfg, &ckpt).unwrap();
    TrainedRun {
        cfg,
        dir,
        model,
        store,
        train_seconds,
    }
}
