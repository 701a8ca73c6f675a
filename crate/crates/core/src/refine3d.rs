//! Translation refinement conditioned on an initial pose: fine windows are
//! re-centred where the initial pose projects each matched keypoint, one
//! attention layer refines window and keypoint features, and a small CNN
//! reads the per-match residuals off a coarse grid to predict a centroid
//! shift and a depth zoom.

use objpose_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

use crate::features::COARSE_STRIDE;
use crate::geom::{Camera, Pose, Vec2, Vec3, MIN_DEPTH};
use crate::iolayer::{IoConfig, IoLayer};
use crate::matching::{clamp_window, window_expectation};
use crate::nn::{Conv, Linear};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RefineError {
    #[error("no matches to refine from")]
    NoMatches,
    #[error("zoom must be positive, got {0}")]
    NonPositiveZoom(f64),
    #[error("initial pose puts the object centre behind the camera")]
    BehindCamera,
    #[error("expected {what} of {want}, got {got}")]
    ShapeMismatch { what: &'static str, want: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Square crop in pixels; normalised coordinates run over `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub size: f64,
}

impl CropBox {
    pub fn centred(p: Vec2, size: f64) -> Self {
        Self {
            x0: p.x - size / 2.0,
            y0: p.y - size / 2.0,
            size,
        }
    }

    pub fn normalize(&self, p: Vec2) -> Vec2 {
        Vec2::new((p.x - self.x0) / self.size, (p.y - self.y0) / self.size)
    }

    pub fn denormalize(&self, q: Vec2) -> Vec2 {
        Vec2::new(self.x0 + q.x * self.size, self.y0 + q.y * self.size)
    }
}

/// Depth factor and multiplicative factor on the crop-normalised centroid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseDelta {
    pub zoom: f64,
    pub shift: Vec2,
}

impl PoseDelta {
    pub fn identity() -> Self {
        Self {
            zoom: 1.0,
            shift: Vec2::new(1.0, 1.0),
        }
    }
}

/// Pixel where the object origin projects.
pub fn centroid_pixel(pose: &Pose, cam: &Camera) -> Result<Vec2, RefineError> {
    let t = pose.translation();
    if t.z <= MIN_DEPTH {
        return Err(RefineError::BehindCamera);
    }
    Ok(cam.pixel(t))
}

/// Scales depth by the zoom and moves the projected centroid to
/// `crop(normalised(p) ⊙ shift)`, keeping the rotation.
pub fn apply_pose_delta(pose: &Pose, delta: &PoseDelta, cam: &Camera, crop: &CropBox) -> Result<Pose, RefineError> {
    if !(delta.zoom > 0.0) {
        return Err(RefineError::NonPositiveZoom(delta.zoom));
    }
    let p = centroid_pixel(pose, cam)?;
    let q = crop.normalize(p);
    let target = crop.denormalize(Vec2::new(q.x * delta.shift.x, q.y * delta.shift.y));
    let z = pose.translation().z * delta.zoom;
    let t = Vec3::new((target.x - cam.cx) / cam.fx * z, (target.y - cam.cy) / cam.fy * z, z);
    Ok(pose.with_translation(t))
}

/// Builds an initial pose from ground truth by dividing depth by `zoom` and
/// moving the projected centroid by `-offset_px`. Returns the initial pose,
/// the crop centred on its centroid, and the delta that undoes the change.
pub fn perturb_pose(
    gt: &Pose,
    zoom: f64,
    offset_px: Vec2,
    cam: &Camera,
    crop_size: f64,
) -> Result<(Pose, CropBox, PoseDelta), RefineError> {
    if !(zoom > 0.0) {
        return Err(RefineError::NonPositiveZoom(zoom));
    }
    let p_gt = centroid_pixel(gt, cam)?;
    let p0 = p_gt - offset_px;
    let z0 = gt.translation().z / zoom;
    let t0 = Vec3::new((p0.x - cam.cx) / cam.fx * z0, (p0.y - cam.cy) / cam.fy * z0, z0);
    let pose0 = gt.with_translation(t0);
    let crop = CropBox::centred(p0, crop_size);
    let (q0, qg) = (crop.normalize(p0), crop.normalize(p_gt));
    let delta = PoseDelta {
        zoom,
        shift: Vec2::new(qg.x / q0.x, qg.y / q0.y),
    };
    Ok((pose0, crop, delta))
}

/// Samples a training perturbation: log-normal zoom clamped to the bin
/// range, uniform centroid offset of up to `shift_frac · crop_size`.
pub fn sample_perturbation(cfg: &RefineConfig, crop_size: f64, rng: &mut impl Rng) -> (f64, Vec2) {
    use rand_distr::{Distribution, Normal};
    let ln = Normal::new(0.0, cfg.zoom_sigma.max(1e-12)).expect("finite sigma");
    let zoom = ln.sample(rng).exp().clamp(cfg.zoom_min, cfg.zoom_max);
    let m = cfg.shift_frac * crop_size;
    let off = if m > 0.0 {
        Vec2::new(rng.random_range(-m..=m), rng.random_range(-m..=m))
    } else {
        Vec2::zeros()
    };
    (zoom, off)
}

/// `bins` zoom values log-uniform over `[lo, hi]`.
pub fn zoom_bins(bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    if bins == 1 {
        return vec![(lo * hi).sqrt()];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..bins)
        .map(|i| (a + (b - a) * i as f64 / (bins - 1) as f64).exp())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub window: usize,
    pub hidden: usize,
    pub bins: usize,
    pub zoom_min: f64,
    pub zoom_max: f64,
    pub heads: usize,
    /// Training perturbation: std of log zoom.
    pub zoom_sigma: f64,
    /// Training perturbation: max centroid offset as a fraction of the crop.
    pub shift_frac: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            window: 7,
            hidden: 32,
            bins: 100,
            zoom_min: 0.7,
            zoom_max: 1.43,
            heads: 4,
            zoom_sigma: 0.025,
            shift_frac: 0.025,
        }
    }
}

/// Grid channels: validity, truncation, offset (2), heatmap confidence,
/// position relative to the crop centre (2), radial offset, match confidence.
pub const GRID_CHANNELS: usize = 9;

/// Per-match inputs to the refinement branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineMatch {
    pub point: Vec3,
    pub confidence: f64,
}

#[derive(Debug, Clone)]
pub struct RefineInput {
    /// `[g, g, GRID_CHANNELS]` coarse grid.
    pub grid: Var,
    /// `[n, 2]` per-match expected offsets in pixels.
    pub offsets: Var,
    /// `[n]` heatmap variances.
    pub variances: Var,
    pub projected: Vec<Vec2>,
    pub centres: Vec<(usize, usize)>,
    pub truncated: Vec<bool>,
    pub crop: CropBox,
}

#[derive(Debug, Clone, Copy)]
pub struct RefineOutput {
    /// `[2]` multiplicative centroid factor.
    pub shift: Var,
    /// `[bins]`
    pub zoom_logits: Var,
    /// `[1]` expected zoom.
    pub zoom: Var,
}

impl RefineOutput {
    pub fn delta(&self, g: &Graph) -> PoseDelta {
        let s = g.value(self.shift).data();
        PoseDelta {
            zoom: g.value(self.zoom).data()[0],
            shift: Vec2::new(s[0], s[1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Refiner {
    pub cfg: RefineConfig,
    pub io: IoLayer,
    convs: [Conv; 3],
    shift_head: Linear,
    zoom_head: Linear,
    bins: Vec<f64>,
}

/// Extra head inputs from [`residual_fit`].
pub const FIT_FEATURES: usize = 3;

/// Weighted least-squares fit of `offset = t + k * rel` over occupied,
/// untruncated grid cells, returned as `[1, 3] = [k, t_x, t_y]`. Weights and
/// positions are constants, so the fit is a fixed linear map of the offset
/// channels and stays differentiable. A uniform scale error shows up in `k`,
/// a centroid shift in `t`.
pub fn residual_fit(g: &mut Graph, grid: Var) -> Result<Var, RefineError> {
    let s = g.shape(grid).to_vec();
    let cells = s[0] * s[1];
    let x = g.reshape(grid, &[cells, GRID_CHANNELS])?;
    let vals = g.value(x).data().to_vec();
    let row = |i: usize| &vals[i * GRID_CHANNELS..(i + 1) * GRID_CHANNELS];
    let w: Vec<f64> = (0..cells).map(|i| (row(i)[0] - row(i)[1]).max(0.0)).collect();
    let rel: Vec<[f64; 2]> = (0..cells).map(|i| [row(i)[5], row(i)[6]]).collect();
    let total: f64 = w.iter().sum();
    let mut coef = vec![0.0; 3 * cells * 2];
    if total > 1e-9 {
        let mean = [0, 1].map(|a| w.iter().zip(&rel).map(|(w, r)| w * r[a]).sum::<f64>() / total);
        let spread: f64 = w
            .iter()
            .zip(&rel)
            .map(|(w, r)| w * ((r[0] - mean[0]).powi(2) + (r[1] - mean[1]).powi(2)))
            .sum();
        for i in 0..cells {
            for a in 0..2 {
                let k = if spread > 1e-9 { w[i] * (rel[i][a] - mean[a]) / spread } else { 0.0 };
                coef[i * 2 + a] = k;
                for b in 0..2 {
                    let avg = if a == b { w[i] / total } else { 0.0 };
                    coef[(1 + b) * cells * 2 + i * 2 + a] = avg - mean[b] * k;
                }
            }
        }
    }
    let off = g.narrow(x, 1, 2, 2)?;
    let off = g.reshape(off, &[cells * 2, 1])?;
    let m = g.constant(Tensor::new(&[3, cells * 2], coef)?);
    let fit = g.matmul(m, off)?;
    Ok(g.reshape(fit, &[1, FIT_FEATURES])?)
}

impl Refiner {
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, cfg: RefineConfig, rng: &mut impl Rng) -> Self {
        let io_cfg = IoConfig {
            dim: feat_dim,
            heads: cfg.heads,
            aggregate_keys: false,
        };
        let h = cfg.hidden;
        let convs = [
            Conv::new(store, &format!("{name}.conv1"), 3, GRID_CHANNELS, h, 1, 1.0, rng),
            Conv::new(store, &format!("{name}.conv2"), 3, h, h, 2, 1.0, rng),
            Conv::new(store, &format!("{name}.conv3"), 3, h, h, 2, 1.0, rng),
        ];
        let shift_head = Linear::new(store, &format!("{name}.shift"), h + FIT_FEATURES, 2, true, 0.1, rng);
        if let Some(b) = shift_head.b {
            store.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        Self {
            cfg,
            io: IoLayer::new(store, &format!("{name}.io"), io_cfg, rng),
            convs,
            shift_head,
            zoom_head: Linear::new(store, &format!("{name}.zoom"), h + FIT_FEATURES, cfg.bins, true, 0.1, rng),
            bins: zoom_bins(cfg.bins, cfg.zoom_min, cfg.zoom_max),
        }
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    /// Re-centres fine windows on the initial-pose projections, runs the
    /// attention layer per match and scatters the per-match expectations on
    /// the coarse grid. `fine_query` is `[H·W, C]`, `template_feats` is
    /// `[n, C]` with one row per match.
    #[allow(clippy::too_many_arguments)]
    pub fn build_input(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        matches: &[RefineMatch],
        pose0: &Pose,
        cam: &Camera,
        fine_query: Var,
        template_feats: Var,
        crop: &CropBox,
    ) -> Result<RefineInput, RefineError> {
        let n = matches.len();
        if n == 0 {
            return Err(RefineError::NoMatches);
        }
        if g.shape(template_feats)[0] != n {
            return Err(RefineError::ShapeMismatch {
                what: "template rows",
                want: n,
                got: g.shape(template_feats)[0],
            });
        }
        let (h, wd) = (cam.height, cam.width);
        let c = g.shape(fine_query)[1];
        let w = self.cfg.window;
        let r = (w / 2) as i64;
        let mut projected = Vec::with_capacity(n);
        let mut centres = Vec::with_capacity(n);
        let mut truncated = Vec::with_capacity(n);
        let mut idx = Vec::with_capacity(n * w * w);
        for m in matches {
            let pc = pose0.transform(&m.point);
            let px = if pc.z > MIN_DEPTH { cam.pixel(&pc) } else { Vec2::new(f64::NAN, f64::NAN) };
            let (rx, ry) = if px.x.is_finite() && px.y.is_finite() {
                (px.x.round().clamp(-1e6, 1e6) as i64, px.y.round().clamp(-1e6, 1e6) as i64)
            } else {
                (wd as i64 / 2, h as i64 / 2)
            };
            let ctr = clamp_window(rx, ry, w, (h, wd));
            truncated.push(ctr != (rx.max(0) as usize, ry.max(0) as usize) || rx < 0 || ry < 0);
            for dy in -r..=r {
                for dx in -r..=r {
                    idx.push((ctr.1 as i64 + dy) as usize * wd + (ctr.0 as i64 + dx) as usize);
                }
            }
            projected.push(px);
            centres.push(ctr);
        }
        let win = g.gather_rows(fine_query, &idx)?;
        let win = g.reshape(win, &[n, w * w, c])?;
        let tmpl = g.reshape(template_feats, &[n, 1, c])?;
        let (win, tmpl) = self.io.forward_tokens(g, store, win, tmpl, None)?;
        let tmpl = g.reshape(tmpl, &[n, c])?;
        let (mean, var, _) = window_expectation(g, win, tmpl, w)?;
        // offsets relative to the projected pixel rather than the window centre
        let shift = Tensor::from_fn(&[n, 2], |i| {
            let (k, a) = (i / 2, i % 2);
            let (ctr, p) = (centres[k], projected[k]);
            if !(p.x.is_finite() && p.y.is_finite()) {
                return 0.0;
            }
            if a == 0 { ctr.0 as f64 - p.x } else { ctr.1 as f64 - p.y }
        });
        let shift = g.constant(shift);
        let offsets = g.add(mean, shift)?;
        let grid = self.scatter(g, matches, offsets, var, &centres, &truncated, crop, (h, wd))?;
        Ok(RefineInput {
            grid,
            offsets,
            variances: var,
            projected,
            centres,
            truncated,
            crop: *crop,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn scatter(
        &self,
        g: &mut Graph,
        matches: &[RefineMatch],
        offsets: Var,
        var: Var,
        centres: &[(usize, usize)],
        truncated: &[bool],
        crop: &CropBox,
        size: (usize, usize),
    ) -> Result<Var, RefineError> {
        let n = matches.len();
        let (gh, gw) = (size.0 / COARSE_STRIDE, size.1 / COARSE_STRIDE);
        let r = (self.cfg.window / 2).max(1) as f64;
        let half = crop.size / 2.0;
        let centre = Vec2::new(crop.x0 + half, crop.y0 + half);
        let rel: Vec<Vec2> = centres
            .iter()
            .map(|&(x, y)| (Vec2::new(x as f64, y as f64) - centre) / half)
            .collect();
        let flags = Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { 1.0 } else { truncated[i / 2] as u8 as f64 });
        let rel_t = Tensor::from_fn(&[n, 2], |i| rel[i / 2][i % 2]);
        let conf_t = Tensor::from_fn(&[n, 1], |i| matches[i].confidence);
        let off = g.scale(offsets, 1.0 / r);
        let var = g.reshape(var, &[n, 1])?;
        let v1 = g.add_scalar(var, 1.0);
        let one = g.constant(Tensor::full(&[n, 1], 1.0));
        let heat_conf = g.div(one, v1)?;
        let rel_v = g.constant(rel_t);
        let radial = g.mul(off, rel_v)?;
        let radial = g.sum_axis(radial, 1)?;
        let flags = g.constant(flags);
        let conf_v = g.constant(conf_t);
        let rows = g.concat(&[flags, off, heat_conf, rel_v, radial, conf_v], 1)?;
        let cell_of = |&(x, y): &(usize, usize)| (y / COARSE_STRIDE).min(gh - 1) * gw + (x / COARSE_STRIDE).min(gw - 1);
        let cells: Vec<usize> = centres.iter().map(cell_of).collect();
        let mut count = vec![0usize; gh * gw];
        for &c in &cells {
            count[c] += 1;
        }
        let entries = cells
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i, 1.0 / count[c] as f64))
            .collect();
        let grid = g.row_mix(rows, gh * gw, entries)?;
        Ok(g.reshape(grid, &[gh, gw, GRID_CHANNELS])?)
    }

    /// CNN over the grid, global mean pooling, then the centroid-shift
    /// regression and zoom classification heads.
    pub fn head_forward(&self, g: &mut Graph, store: &ParamStore, grid: Var) -> Result<RefineOutput, RefineError> {
        let s = g.shape(grid).to_vec();
        if s.len() != 3 || s[2] != GRID_CHANNELS {
            return Err(RefineError::ShapeMismatch {
                what: "grid channels",
                want: GRID_CHANNELS,
                got: s.last().copied().unwrap_or(0),
            });
        }
        let mut x = grid;
        for conv in &self.convs {
            x = conv.forward(g, store, x)?;
            x = g.relu(x);
        }
        let xs = g.shape(x).to_vec();
        let cells = xs[0] * xs[1];
        let x = g.reshape(x, &[cells, xs[2]])?;
        let pooled = g.sum_axis(x, 0)?;
        let pooled = g.scale(pooled, 1.0 / cells as f64);
        let fit = residual_fit(g, grid)?;
        let pooled = g.concat(&[pooled, fit], 1)?;
        let shift = self.shift_head.forward(g, store, pooled)?;
        let shift = g.reshape(shift, &[2])?;
        let logits = self.zoom_head.forward(g, store, pooled)?;
        let k = self.bins.len();
        let probs = g.softmax(logits, 1)?;
        let bins = g.constant(Tensor::new(&[k, 1], self.bins.clone())?);
        let zoom = g.matmul(probs, bins)?;
        let zoom = g.reshape(zoom, &[1])?;
        let zoom_logits = g.reshape(logits, &[k])?;
        Ok(RefineOutput { shift, zoom_logits, zoom })
    }

    /// Full branch for one sample.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        matches: &[RefineMatch],
        pose0: &Pose,
        cam: &Camera,
        fine_query: Var,
        template_feats: Var,
        crop: &CropBox,
    ) -> Result<(RefineInput, RefineOutput), RefineError> {
        let input = self.build_input(g, store, matches, pose0, cam, fine_query, template_feats, crop)?;
        let out = self.head_forward(g, store, input.grid)?;
        Ok((input, out))
    }
}

/// `|zoom − ε_z|` and `Σ|shift − ε_2d|`.
pub fn refine_losses(g: &mut Graph, out: &RefineOutput, gt: &PoseDelta) -> Result<(Var, Var), TensorError> {
    let gz = g.constant(Tensor::new(&[1], vec![gt.zoom])?);
    let dz = g.sub(out.zoom, gz)?;
    let dz = g.abs(dz);
    let lz = g.sum(dz);
    let gs = g.constant(Tensor::new(&[2], vec![gt.shift.x, gt.shift.y])?);
    let ds = g.sub(out.shift, gs)?;
    let ds = g.abs(ds);
    let l2d = g.sum(ds);
    Ok((lz, l2d))
}

/// `L_c + L_f + α (L_z + L_2d)`.
pub fn total_loss(g: &mut Graph, lc: Var, lf: Var, lz: Var, l2d: Var, alpha: f64) -> Result<Var, TensorError> {
    let a = g.add(lc, lf)?;
    let r = g.add(lz, l2d)?;
    let r = g.scale(r, alpha);
    g.add(a, r)
}
