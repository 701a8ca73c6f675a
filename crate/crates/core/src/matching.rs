//! Coarse image-to-keypoint matching: dual-softmax confidences, mutual
//! nearest neighbours, focal loss, and fine window refinement.

use objpose_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

use crate::features::{cell_centre, coarse_cell, COARSE_STRIDE};
use crate::geom::{project, Vec3};
use crate::nn::Linear;
use crate::synth::RenderedView;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const CONFIDENCE_FLOOR: f64 = 1e-12;
/// Depth tolerance for visibility, as a fraction of the object diameter.
pub const VISIBILITY_TOLERANCE: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MatchError {
    #[error("no ground-truth pairs to supervise")]
    NoGroundTruthPairs,
    #[error("window size must be odd, got {0}")]
    EvenWindow(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Row softmax times column softmax of `scores / tau`.
pub fn dual_softmax(g: &mut Graph, scores: Var, tau: f64) -> Result<Var, TensorError> {
    let s = g.scale(scores, 1.0 / tau);
    let rows = g.softmax(s, 1)?;
    let cols = g.softmax(s, 0)?;
    g.mul(rows, cols)
}

/// Shared projection followed by cosine similarity; also used on
/// intermediate attention outputs to score keypoints for pruning.
#[derive(Debug, Clone, Copy)]
pub struct MatchHead {
    proj: Linear,
}

impl MatchHead {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true, 1.0, rng),
        }
    }

    pub fn similarity(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        object: Var,
    ) -> Result<Var, TensorError> {
        let a = self.proj.forward(g, store, image)?;
        let b = self.proj.forward(g, store, object)?;
        g.cosine_similarity_matrix(a, b)
    }

    pub fn confidence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        object: Var,
        tau: f64,
    ) -> Result<Var, TensorError> {
        let s = self.similarity(g, store, image, object)?;
        dual_softmax(g, s, tau)
    }
}

/// One accepted correspondence between a coarse query cell and a keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub cell: usize,
    pub keypoint: usize,
    pub confidence: f64,
    /// Refined query pixel, once fine refinement ran.
    pub pixel: (f64, f64),
    pub variance: f64,
    /// Inserted from ground truth rather than predicted.
    pub padded: bool,
}

impl Match {
    pub fn new(cell: usize, keypoint: usize, confidence: f64) -> Self {
        Self {
            cell,
            keypoint,
            confidence,
            pixel: (f64::NAN, f64::NAN),
            variance: f64::NAN,
            padded: false,
        }
    }
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mutual nearest neighbours of `p` (rows × cols) with confidence ≥ `theta`,
/// ordered by row. Argmax ties go to the lowest index.
pub fn extract_matches(p: &Tensor, theta: f64) -> Vec<Match> {
    let (rows, cols) = (p.shape()[0], p.shape()[1]);
    let d = p.data();
    let row_best: Vec<usize> = (0..rows).map(|i| argmax_first(d[i * cols..(i + 1) * cols].iter().copied())).collect();
    let col_best: Vec<usize> = (0..cols).map(|c| argmax_first((0..rows).map(|i| d[i * cols + c]))).collect();
    (0..rows)
        .filter_map(|i| {
            let c = row_best[i];
            let v = d[i * cols + c];
            (cols > 0 && col_best[c] == i && v >= theta).then(|| Match::new(i, c, v))
        })
        .collect()
}

/// Focal negative log-likelihood over ground-truth `(row, col)` pairs.
pub fn coarse_loss(g: &mut Graph, p: Var, gt_pairs: &[(usize, usize)], gamma: f64) -> Result<Var, MatchError> {
    if gt_pairs.is_empty() {
        return Err(MatchError::NoGroundTruthPairs);
    }
    let cols = g.shape(p)[1];
    let idx = gt_pairs.iter().map(|&(i, c)| i * cols + c).collect();
    let pv = g.take(p, idx)?;
    let pv = g.clamp_min(pv, CONFIDENCE_FLOOR);
    let logp = g.log(pv);
    let one_minus = g.neg(pv);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let w = g.powf(one_minus, gamma);
    let terms = g.mul(w, logp)?;
    let m = g.mean(terms);
    Ok(g.neg(m))
}

/// Fine refinement outputs, one row per match.
#[derive(Debug, Clone)]
pub struct FineOutput {
    /// `[n, 2]` expected `(dx, dy)` relative to the window centre.
    pub offsets: Var,
    /// `[n]` total variance of each heatmap.
    pub variances: Var,
    /// `[n, w·w]` heatmaps.
    pub heatmaps: Var,
    /// Window centres after clamping into the image.
    pub centres: Vec<(usize, usize)>,
}

/// Centre nearest to `(cx, cy)` whose `w × w` window lies inside the image.
pub fn clamp_window(cx: i64, cy: i64, w: usize, size: (usize, usize)) -> (usize, usize) {
    let r = (w / 2) as i64;
    let (h, wd) = (size.0 as i64, size.1 as i64);
    (cx.clamp(r, wd - 1 - r) as usize, cy.clamp(r, h - 1 - r) as usize)
}

/// `[w·w, 2]` grid of `(dx, dy)` offsets, row-major over the window.
pub fn window_grid(w: usize) -> Tensor {
    let r = (w / 2) as f64;
    Tensor::from_fn(&[w * w, 2], |i| {
        let (k, axis) = (i / 2, i % 2);
        if axis == 0 {
            (k % w) as f64 - r
        } else {
            (k / w) as f64 - r
        }
    })
}

/// Heatmap expectation and total variance over `w × w` windows of
/// `window_feats` (`[n, w·w, C]`) correlated with `anchors` (`[n, C]`).
pub fn window_expectation(
    g: &mut Graph,
    window_feats: Var,
    anchors: Var,
    w: usize,
) -> Result<(Var, Var, Var), TensorError> {
    let n = g.shape(anchors)[0];
    let c = g.shape(anchors)[1];
    let a = g.reshape(anchors, &[n, c, 1])?;
    let corr = g.bmm(window_feats, a)?;
    let corr = g.reshape(corr, &[n, w * w])?;
    let corr = g.scale(corr, 1.0 / (c as f64).sqrt());
    let heat = g.softmax(corr, 1)?;
    let grid = window_grid(w);
    let sq = Tensor::from_fn(&[w * w, 1], |k| grid.at(&[k, 0]).powi(2) + grid.at(&[k, 1]).powi(2));
    let grid = g.constant(grid);
    let sq = g.constant(sq);
    let mean = g.matmul(heat, grid)?;
    let second = g.matmul(heat, sq)?;
    let second = g.reshape(second, &[n])?;
    let mean_sq = g.square(mean);
    let mean_sq = g.sum_axis(mean_sq, 1)?;
    let mean_sq = g.reshape(mean_sq, &[n])?;
    let var = g.sub(second, mean_sq)?;
    Ok((mean, var, heat))
}

/// Correlates each anchor feature with the fine query map over a `w × w`
/// window around its requested centre pixel (clamped into the image).
pub fn fine_refine_2d(
    g: &mut Graph,
    fine_query: Var,
    size: (usize, usize),
    centres: &[(i64, i64)],
    anchors: Var,
    w: usize,
) -> Result<FineOutput, MatchError> {
    if w % 2 == 0 {
        return Err(MatchError::EvenWindow(w));
    }
    let n = centres.len();
    let c = g.shape(fine_query)[1];
    let r = (w / 2) as i64;
    let clamped: Vec<(usize, usize)> = centres.iter().map(|&(x, y)| clamp_window(x, y, w, size)).collect();
    let mut idx = Vec::with_capacity(n * w * w);
    for &(x, y) in &clamped {
        for dy in -r..=r {
            for dx in -r..=r {
                idx.push((y as i64 + dy) as usize * size.1 + (x as i64 + dx) as usize);
            }
        }
    }
    let win = g.gather_rows(fine_query, &idx)?;
    let win = g.reshape(win, &[n, w * w, c])?;
    let (offsets, variances, heatmaps) = window_expectation(g, win, anchors, w)?;
    Ok(FineOutput {
        offsets,
        variances,
        heatmaps,
        centres: clamped,
    })
}

/// Mean of `|offset − gt|² / max(σ², floor)` with `σ²` detached.
pub fn fine_loss(
    g: &mut Graph,
    offsets: Var,
    variances: Var,
    gt: &Tensor,
    var_floor: f64,
) -> Result<Var, TensorError> {
    let n = g.shape(offsets)[0];
    let gt = g.constant(gt.clone());
    let diff = g.sub(offsets, gt)?;
    let sq = g.square(diff);
    let err = g.sum_axis(sq, 1)?;
    let err = g.reshape(err, &[n])?;
    let var = g.detach(variances);
    let var = g.clamp_min(var, var_floor);
    let weighted = g.div(err, var)?;
    Ok(g.mean(weighted))
}

/// Where a template keypoint lands in a query view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointProjection {
    pub pixel: (f64, f64),
    /// Coarse cell index when the keypoint is visible.
    pub cell: Option<usize>,
}

/// Projects keypoints with the view's ground-truth pose. A keypoint is
/// visible when it lands on a masked pixel whose rendered depth agrees within
/// `VISIBILITY_TOLERANCE · diameter`.
pub fn project_keypoints(view: &RenderedView, points: &[Vec3], diameter: f64) -> Vec<KeypointProjection> {
    let cam = view.cam;
    let grid_w = cam.width / COARSE_STRIDE;
    let tol = VISIBILITY_TOLERANCE * diameter;
    points
        .iter()
        .map(|p| {
            let Ok((px, z)) = project(&view.pose, &cam, std::slice::from_ref(p)) else {
                return KeypointProjection { pixel: (f64::NAN, f64::NAN), cell: None };
            };
            let (u, v) = (px[0].x, px[0].y);
            let (c, r) = (u.round(), v.round());
            let visible = c >= 0.0
                && r >= 0.0
                && (c as usize) < cam.width
                && (r as usize) < cam.height
                && {
                    let i = r as usize * cam.width + c as usize;
                    view.mask[i] && (view.depth[i] - z[0]).abs() <= tol
                };
            let cell = visible.then(|| coarse_cell(v) as usize * grid_w + coarse_cell(u) as usize);
            KeypointProjection { pixel: (u, v), cell }
        })
        .collect()
}

/// `(cell, token)` positives for the current object tokens, where
/// `tokens[t]` is the original keypoint id of token `t`.
pub fn ground_truth_pairs(proj: &[KeypointProjection], tokens: &[usize]) -> Vec<(usize, usize)> {
    tokens
        .iter()
        .enumerate()
        .filter_map(|(t, &k)| proj[k].cell.map(|c| (c, t)))
        .collect()
}

/// Fine window centre pixel for a coarse cell: the pixel just right/below
/// the cell's continuous centre.
pub fn cell_window_centre(cell: usize, grid_w: usize) -> (i64, i64) {
    let (cx, cy) = (cell % grid_w, cell / grid_w);
    (cell_centre(cx).ceil() as i64, cell_centre(cy).ceil() as i64)
}
