//! Pose from 2D–3D correspondences: 6-point DLT inside RANSAC, then damped
//! Gauss-Newton on the weighted reprojection error.

use nalgebra::{DMatrix, Matrix2x3, Matrix3x4, Matrix6, Rotation3, SymmetricEigen, Vector6};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use thiserror::Error;

use crate::geom::{nearest_rotation, Camera, Mat3, Pose, Vec2, Vec3, MIN_DEPTH};

pub const MIN_CORRESPONDENCES: usize = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PnpError {
    #[error("need at least 6 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("every minimal sample was degenerate")]
    DegenerateConfiguration,
    #[error("point {0} lies behind the camera")]
    NonPositiveDepth(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub pixel: Vec2,
    pub point: Vec3,
    pub weight: f64,
}

impl Correspondence {
    pub fn new(pixel: Vec2, point: Vec3, weight: f64) -> Self {
        Self { pixel, point, weight }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PnpResult {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    /// Mean reprojection error over inliers, in pixels.
    pub mean_error: f64,
}

impl PnpResult {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub inlier_px: f64,
    pub iterations: usize,
    pub refine_iterations: usize,
    pub tolerance: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            inlier_px: 3.0,
            iterations: 256,
            refine_iterations: 30,
            tolerance: 1e-12,
        }
    }
}

fn normalized(cam: &Camera, px: &Vec2) -> Vec2 {
    Vec2::new((px.x - cam.cx) / cam.fx, (px.y - cam.cy) / cam.fy)
}

/// Linear pose from ≥ 6 correspondences via the null vector of the
/// `2N × 12` system, with points centred and scaled for conditioning.
pub fn dlt(corrs: &[Correspondence], cam: &Camera) -> Option<Pose> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return None;
    }
    let c = corrs.iter().map(|k| k.point).sum::<Vec3>() / n as f64;
    let s = (corrs.iter().map(|k| (k.point - c).norm()).sum::<f64>() / n as f64).max(1e-12);
    // reject flat or collinear point sets
    let mut cov = Mat3::zeros();
    for k in corrs {
        let d = (k.point - c) / s;
        cov += d * d.transpose();
    }
    let ev = SymmetricEigen::new(cov).eigenvalues;
    if ev.min() < 1e-8 * ev.max() {
        return None;
    }
    let mut a = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, k) in corrs.iter().enumerate() {
        let x = (k.point - c) / s;
        let m = normalized(cam, &k.pixel);
        let xh = [x.x, x.y, x.z, 1.0];
        for j in 0..4 {
            a[(2 * i, j)] = xh[j];
            a[(2 * i, 8 + j)] = -m.x * xh[j];
            a[(2 * i + 1, 4 + j)] = xh[j];
            a[(2 * i + 1, 8 + j)] = -m.y * xh[j];
        }
    }
    let (v, sv) = if 2 * n >= 12 {
        let svd = a.svd(false, true);
        (svd.v_t?.transpose(), svd.singular_values)
    } else {
        return None;
    };
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&x, &y| sv[x].total_cmp(&sv[y]));
    let (smallest, second) = (order[0], order[1]);
    if sv[second] < 1e-10 * sv[order[order.len() - 1]] {
        return None;
    }
    let p = v.column(smallest);
    let mut pm = Matrix3x4::from_fn(|r, col| p[4 * r + col]);
    // undo point normalisation: X' = (X − c) / s
    let t_norm = nalgebra::Matrix4::new(
        1.0 / s, 0.0, 0.0, -c.x / s,
        0.0, 1.0 / s, 0.0, -c.y / s,
        0.0, 0.0, 1.0 / s, -c.z / s,
        0.0, 0.0, 0.0, 1.0,
    );
    pm *= t_norm;
    let mut m: Mat3 = pm.fixed_view::<3, 3>(0, 0).into_owned();
    let mut t: Vec3 = pm.column(3).into_owned();
    if m.determinant() < 0.0 {
        m = -m;
        t = -t;
    }
    let svd = m.svd(false, false);
    let scale = svd.singular_values.sum() / 3.0;
    if scale <= 0.0 || !scale.is_finite() {
        return None;
    }
    let r = nearest_rotation(&m);
    Some(Pose::from_approx(&r, t / scale))
}

/// Reprojection error in pixels, or infinity behind the camera.
pub fn reprojection_error(pose: &Pose, cam: &Camera, k: &Correspondence) -> f64 {
    let pc = pose.transform(&k.point);
    if pc.z <= MIN_DEPTH {
        return f64::INFINITY;
    }
    (cam.pixel(&pc) - k.pixel).norm()
}

/// Sort key making the solver independent of input order.
fn canonical_order(corrs: &[Correspondence]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..corrs.len()).collect();
    let key = |k: &Correspondence| [k.pixel.x, k.pixel.y, k.point.x, k.point.y, k.point.z, k.weight];
    idx.sort_by(|&a, &b| {
        let (ka, kb) = (key(&corrs[a]), key(&corrs[b]));
        ka.iter()
            .zip(&kb)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx
}

fn score(pose: &Pose, cam: &Camera, corrs: &[Correspondence], thr: f64) -> (usize, f64) {
    let mut count = 0;
    let mut err = 0.0;
    for k in corrs {
        let e = reprojection_error(pose, cam, k);
        if e <= thr {
            count += 1;
            err += e;
        }
    }
    (count, err)
}

/// RANSAC over minimal DLT solves, then DLT and Gauss-Newton on the
/// consensus set.
pub fn solve_pnp_ransac(
    corrs: &[Correspondence],
    cam: &Camera,
    cfg: &RansacConfig,
    rng: &mut impl Rng,
) -> Result<PnpResult, PnpError> {
    let n = corrs.len();
    if n < MIN_CORRESPONDENCES {
        return Err(PnpError::TooFewCorrespondences(n));
    }
    let order = canonical_order(corrs);
    let sorted: Vec<Correspondence> = order.iter().map(|&i| corrs[i]).collect();
    let mut best: Option<(Pose, usize, f64)> = None;
    for _ in 0..cfg.iterations.max(1) {
        let pick: Vec<Correspondence> = sample_indices(rng, n, MIN_CORRESPONDENCES)
            .into_iter()
            .map(|i| sorted[i])
            .collect();
        let Some(pose) = dlt(&pick, cam) else { continue };
        let (count, err) = score(&pose, cam, &sorted, cfg.inlier_px);
        let better = match best {
            None => true,
            Some((_, bc, be)) => count > bc || (count == bc && err < be),
        };
        if better {
            best = Some((pose, count, err));
        }
        if count == n {
            break;
        }
    }
    let (mut pose, _, _) = best.ok_or(PnpError::DegenerateConfiguration)?;
    for _ in 0..2 {
        let inl: Vec<Correspondence> = sorted
            .iter()
            .filter(|k| reprojection_error(&pose, cam, k) <= cfg.inlier_px)
            .copied()
            .collect();
        if inl.len() < MIN_CORRESPONDENCES {
            break;
        }
        if let Ok((refined, _)) = refine_gauss_newton(&pose, &inl, cam, cfg.refine_iterations, cfg.tolerance) {
            pose = refined;
        }
    }
    let mut inliers = vec![false; n];
    let mut total = 0.0;
    let mut count = 0;
    for (k, &orig) in order.iter().enumerate() {
        let e = reprojection_error(&pose, cam, &sorted[k]);
        if e <= cfg.inlier_px {
            inliers[orig] = true;
            total += e;
            count += 1;
        }
    }
    Ok(PnpResult {
        pose,
        inliers,
        mean_error: if count > 0 { total / count as f64 } else { f64::INFINITY },
    })
}

/// Left-multiplied update: `R ← exp(ω)·R`, `t ← t + δt`, `δ = (ω, δt)`.
pub fn apply_increment(pose: &Pose, delta: &Vector6<f64>) -> Pose {
    let w = Vec3::new(delta[0], delta[1], delta[2]);
    let dr = Rotation3::new(w).into_inner();
    let t = pose.translation() + Vec3::new(delta[3], delta[4], delta[5]);
    Pose::from_approx(&(dr * pose.rotation()), t)
}

/// Unweighted residuals `π(R·X + t) − u`, two per correspondence.
pub fn residuals(pose: &Pose, cam: &Camera, corrs: &[Correspondence]) -> Vec<f64> {
    corrs
        .iter()
        .flat_map(|k| {
            let r = cam.pixel(&pose.transform(&k.point)) - k.pixel;
            [r.x, r.y]
        })
        .collect()
}

/// `2 × 6` Jacobian of one residual with respect to the left increment.
pub fn residual_jacobian(pose: &Pose, cam: &Camera, point: &Vec3) -> nalgebra::Matrix2x6<f64> {
    let rx = pose.rotation() * point;
    let pc = rx + pose.translation();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let dproj = Matrix2x3::new(
        cam.fx / z, 0.0, -cam.fx * x / (z * z),
        0.0, cam.fy / z, -cam.fy * y / (z * z),
    );
    // d(exp(ω)·Rx)/dω at ω = 0 is −[Rx]×
    let skew = Mat3::new(0.0, -rx.z, rx.y, rx.z, 0.0, -rx.x, -rx.y, rx.x, 0.0);
    let mut j = nalgebra::Matrix2x6::zeros();
    j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(dproj * -skew));
    j.fixed_view_mut::<2, 3>(0, 3).copy_from(&dproj);
    j
}

fn weighted_cost(pose: &Pose, cam: &Camera, corrs: &[Correspondence]) -> f64 {
    corrs
        .iter()
        .map(|k| {
            let pc = pose.transform(&k.point);
            if pc.z <= MIN_DEPTH {
                f64::INFINITY
            } else {
                k.weight * (cam.pixel(&pc) - k.pixel).norm_squared()
            }
        })
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussNewtonStats {
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub costs: Vec<f64>,
}

/// Levenberg-damped Gauss-Newton on `Σ w·|π(R·X + t) − u|²`. Rejected steps
/// raise the damping, so accepted costs never increase.
pub fn refine_gauss_newton(
    initial: &Pose,
    corrs: &[Correspondence],
    cam: &Camera,
    max_iters: usize,
    tol: f64,
) -> Result<(Pose, GaussNewtonStats), PnpError> {
    for (i, k) in corrs.iter().enumerate() {
        if initial.transform(&k.point).z <= MIN_DEPTH {
            return Err(PnpError::NonPositiveDepth(i));
        }
    }
    let mut pose = *initial;
    let mut cost = weighted_cost(&pose, cam, corrs);
    let mut stats = GaussNewtonStats {
        iterations: 0,
        costs: vec![cost],
    };
    let mut lambda = 1e-6;
    for it in 0..max_iters {
        stats.iterations = it + 1;
        let mut h = Matrix6::<f64>::zeros();
        let mut grad = Vector6::<f64>::zeros();
        for k in corrs {
            let j = residual_jacobian(&pose, cam, &k.point);
            let r = cam.pixel(&pose.transform(&k.point)) - k.pixel;
            h += k.weight * j.transpose() * j;
            grad += k.weight * j.transpose() * r;
        }
        let mut accepted = false;
        for _ in 0..20 {
            let mut damped = h;
            for d in 0..6 {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-12);
            }
            let Some(step) = damped.cholesky().map(|c| -c.solve(&grad)) else {
                lambda *= 10.0;
                continue;
            };
            if step.norm() < tol {
                return Ok((pose, stats));
            }
            let cand = apply_increment(&pose, &step);
            let c = weighted_cost(&cand, cam, corrs);
            if c <= cost {
                pose = cand;
                cost = c;
                stats.costs.push(c);
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            break;
        }
    }
    Ok((pose, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{project, rotation_geodesic};
    use crate::synth::rng_for;

    fn cam() -> Camera {
        Camera::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap()
    }

    fn scene(seed: u64, n: usize) -> (Pose, Vec<Correspondence>) {
        let mut rng = rng_for(&[seed]);
        let aa = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let t = Vec3::new(rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(1.8..2.4));
        let pose = Pose::from_axis_angle(aa, t);
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)))
            .collect();
        let (px, _) = project(&pose, &cam(), &pts).unwrap();
        let corrs = px.iter().zip(&pts).map(|(u, x)| Correspondence::new(*u, *x, 1.0)).collect();
        (pose, corrs)
    }

    #[test]
    fn too_few() {
        let (_, c) = scene(0, 5);
        assert_eq!(
            solve_pnp_ransac(&c, &cam(), &RansacConfig::default(), &mut rng_for(&[1])).unwrap_err(),
            PnpError::TooFewCorrespondences(5)
        );
    }

    #[test]
    fn exact_correspondences() {
        for seed in 0..20 {
            let (gt, c) = scene(seed, 32);
            let r = solve_pnp_ransac(&c, &cam(), &RansacConfig::default(), &mut rng_for(&[seed, 9])).unwrap();
            assert!(rotation_geodesic(r.pose.rotation(), gt.rotation()) < 1e-6);
            assert!((r.pose.translation() - gt.translation()).norm() < 1e-6);
            assert_eq!(r.inlier_count(), 32);
        }
    }

    #[test]
    fn planar_points_are_degenerate() {
        let (gt, mut c) = scene(3, 12);
        for k in c.iter_mut() {
            k.point.z = 0.0;
            k.pixel = cam().pixel(&gt.transform(&k.point));
        }
        assert_eq!(
            solve_pnp_ransac(&c, &cam(), &RansacConfig::default(), &mut rng_for(&[2])).unwrap_err(),
            PnpError::DegenerateConfiguration
        );
    }

    #[test]
    fn order_invariance() {
        let (_, mut c) = scene(4, 40);
        let mut rng = rng_for(&[5]);
        for k in c.iter_mut().take(12) {
            k.pixel = Vec2::new(rng.random_range(0.0..64.0), rng.random_range(0.0..64.0));
        }
        let a = solve_pnp_ransac(&c, &cam(), &RansacConfig::default(), &mut rng_for(&[6])).unwrap();
        let perm: Vec<usize> = (0..40).rev().collect();
        let shuffled: Vec<Correspondence> = perm.iter().map(|&i| c[i]).collect();
        let b = solve_pnp_ransac(&shuffled, &cam(), &RansacConfig::default(), &mut rng_for(&[6])).unwrap();
        assert_eq!(a.pose, b.pose);
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.inliers[k], a.inliers[i]);
        }
    }

    #[test]
    fn fixed_point_at_ground_truth() {
        let (gt, c) = scene(7, 20);
        let (p, stats) = refine_gauss_newton(&gt, &c, &cam(), 10, 1e-12).unwrap();
        assert!(rotation_geodesic(p.rotation(), gt.rotation()) < 1e-12);
        assert!((p.translation() - gt.translation()).norm() < 1e-12);
        assert!(stats.iterations <= 1);
    }

    #[test]
    fn recovers_from_perturbation_with_monotone_cost() {
        for seed in 0..20 {
            let (gt, c) = scene(100 + seed, 24);
            let mut rng = rng_for(&[seed, 1]);
            let axis: Vec3 = Vec3::new(rng.random(), rng.random(), rng.random()).normalize();
            let rot = Rotation3::new(axis * 5f64.to_radians()).into_inner();
            let init = Pose::from_approx(&(rot * gt.rotation()), gt.translation() * 1.05);
            let (p, stats) = refine_gauss_newton(&init, &c, &cam(), 50, 1e-14).unwrap();
            assert!(rotation_geodesic(p.rotation(), gt.rotation()) < 1e-6);
            assert!((p.translation() - gt.translation()).norm() < 1e-6);
            assert!(stats.costs.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn behind_camera_is_rejected() {
        let (gt, c) = scene(8, 10);
        let flipped = Pose::from_approx(gt.rotation(), -gt.translation());
        assert!(matches!(refine_gauss_newton(&flipped, &c, &cam(), 5, 1e-9), Err(PnpError::NonPositiveDepth(_))));
    }
}
