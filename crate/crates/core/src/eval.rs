//! Held-out evaluation: test set construction, per-query pose errors,
//! ADD accuracy and threshold curves, pruning and template ablations, CSV
//! export.

use std::path::Path;

use objpose_tensor::ParamStore;
use rand::Rng;
use rand_distr::{Distribution, UnitSphere};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{camera, eye_direction, fetch_object, query_pose, render_all, Split};
use crate::geom::{add_metric, rotation_geodesic, Pose, Vec3};
use crate::matching::Match;
use crate::model::{InferOptions, ModelError, PoseModel, TemplateBank};
use crate::synth::{render, rng_for, RenderedView, SynthError, SyntheticObject, ViewpointSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("test set is empty")]
    EmptyTestset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub objects: usize,
    pub queries_per_object: usize,
    pub points_per_object: usize,
    pub template_views: usize,
    pub view_distance: f64,
    /// Template keypoints sampled across all template views.
    pub bank_keypoints: usize,
    /// Model points used for ADD.
    pub metric_points: usize,
    /// Success threshold as a fraction of the diameter.
    pub threshold: f64,
    pub curve_points: usize,
    pub warmup_runs: usize,
    /// Queries whose nearest template direction is farther than this are
    /// flagged as low coverage.
    pub coverage_deg: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            objects: 20,
            queries_per_object: 30,
            points_per_object: 16_000,
            template_views: 60,
            view_distance: 2.0,
            bank_keypoints: 2048,
            metric_points: 500,
            threshold: 0.1,
            curve_points: 50,
            warmup_runs: 3,
            coverage_deg: 30.0,
        }
    }
}

/// One held-out object with its template renders and queries.
#[derive(Debug, Clone)]
pub struct TestObject {
    pub index: usize,
    pub object: SyntheticObject,
    pub views: ViewpointSet,
    pub templates: Vec<RenderedView>,
    pub queries: Vec<RenderedView>,
    pub metric_points: Vec<Vec3>,
}

impl TestObject {
    pub fn diameter(&self) -> f64 {
        self.object.cloud.diameter()
    }
}

fn spread(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

pub fn build_test_object(cfg: &EvalConfig, index: usize, dir: Option<&Path>) -> Result<TestObject, EvalError> {
    let cam = camera();
    let object = fetch_object(dir, cfg.seed, Split::Test, index, cfg.points_per_object)?;
    let views = ViewpointSet::fibonacci(cfg.template_views, cfg.view_distance);
    let templates = render_all(&object, &views, &cam)?;
    let mut rng = rng_for(&[cfg.seed, 0x7e57, index as u64]);
    let queries = (0..cfg.queries_per_object)
        .map(|_| {
            let d: [f64; 3] = UnitSphere.sample(&mut rng);
            let pose = query_pose(&Vec3::from(d), &mut rng);
            render(&object, &pose, &cam).map_err(SynthError::from)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let pts = object.cloud.points();
    let metric_points = spread(pts.len(), cfg.metric_points).into_iter().map(|i| pts[i]).collect();
    Ok(TestObject {
        index,
        object,
        views,
        templates,
        queries,
        metric_points,
    })
}

pub fn build_testset(cfg: &EvalConfig, dir: Option<&Path>) -> Result<Vec<TestObject>, EvalError> {
    (0..cfg.objects).map(|i| build_test_object(cfg, i, dir)).collect()
}

/// One evaluated query. Failed queries carry infinite errors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub object: usize,
    pub query: usize,
    pub diameter: f64,
    pub rot_err_deg: f64,
    pub trans_err: f64,
    pub add: f64,
    pub add_s: f64,
    /// ADD of the PnP pose before 3D refinement.
    pub add_initial: f64,
    pub matches: usize,
    pub inliers: usize,
    pub match_ms: f64,
    pub total_ms: f64,
    /// Angle from the query direction to the nearest template direction.
    pub coverage_deg: f64,
    pub failed: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// Object index, or `all`.
    pub series: String,
    pub threshold_frac: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<QueryRow>,
    pub threshold: f64,
    pub accuracy: f64,
    pub median_rot_deg: f64,
    /// Means over rows after the warmup runs.
    pub mean_match_ms: f64,
    pub mean_total_ms: f64,
    pub low_coverage: bool,
    pub curves: Vec<CurveRow>,
}

fn frac_below(rows: &[&QueryRow], frac: f64, initial: bool) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let ok = rows
        .iter()
        .filter(|r| (if initial { r.add_initial } else { r.add }) < frac * r.diameter)
        .count();
    ok as f64 / rows.len() as f64
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<QueryRow>, cfg: &EvalConfig) -> Self {
        let all: Vec<&QueryRow> = rows.iter().collect();
        let timed: Vec<&QueryRow> = rows.iter().skip(cfg.warmup_runs).collect();
        let mean = |f: fn(&QueryRow) -> f64| {
            if timed.is_empty() {
                0.0
            } else {
                timed.iter().map(|r| f(r)).sum::<f64>() / timed.len() as f64
            }
        };
        let mut series: Vec<usize> = rows.iter().map(|r| r.object).collect();
        series.dedup();
        let mut curves = Vec::new();
        let steps = cfg.curve_points.max(2);
        let mut push = |name: String, subset: &[&QueryRow]| {
            for i in 0..steps {
                let t = 0.5 * i as f64 / (steps - 1) as f64;
                curves.push(CurveRow {
                    series: name.clone(),
                    threshold_frac: t,
                    accuracy: frac_below(subset, t, false),
                });
            }
        };
        for &o in &series {
            let subset: Vec<&QueryRow> = rows.iter().filter(|r| r.object == o).collect();
            push(format!("{o}"), &subset);
        }
        push("all".into(), &all);
        Self {
            threshold: cfg.threshold,
            accuracy: frac_below(&all, cfg.threshold, false),
            median_rot_deg: median(rows.iter().map(|r| r.rot_err_deg).collect()),
            mean_match_ms: mean(|r| r.match_ms),
            mean_total_ms: mean(|r| r.total_ms),
            low_coverage: rows.iter().any(|r| r.coverage_deg > cfg.coverage_deg),
            curves,
            rows,
        }
    }

    /// Fraction of queries with ADD below `frac` of the diameter; `initial`
    /// scores the pose before 3D refinement.
    pub fn accuracy_at(&self, frac: f64, initial: bool) -> f64 {
        frac_below(&self.rows.iter().collect::<Vec<_>>(), frac, initial)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.failed).count()
    }

    pub fn write_rows(&self, path: &Path) -> Result<(), EvalError> {
        write_csv(path, &self.rows)
    }

    pub fn write_curves(&self, path: &Path) -> Result<(), EvalError> {
        write_csv(path, &self.curves)
    }

    pub fn summary(&self) -> Summary {
        Summary {
            queries: self.rows.len(),
            failures: self.failures(),
            threshold: self.threshold,
            accuracy: self.accuracy,
            accuracy_2pct: self.accuracy_at(0.02, false),
            accuracy_2pct_initial: self.accuracy_at(0.02, true),
            median_rot_deg: self.median_rot_deg,
            mean_match_ms: self.mean_match_ms,
            mean_total_ms: self.mean_total_ms,
            low_coverage: self.low_coverage,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub queries: usize,
    pub failures: usize,
    pub threshold: f64,
    pub accuracy: f64,
    pub accuracy_2pct: f64,
    pub accuracy_2pct_initial: f64,
    pub median_rot_deg: f64,
    pub mean_match_ms: f64,
    pub mean_total_ms: f64,
    pub low_coverage: bool,
}

/// Writes `rows` with a header; an empty table still gets its header.
pub fn write_csv<T: Serialize + Default>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    if rows.is_empty() {
        let mut probe = csv::Writer::from_writer(Vec::new());
        probe.serialize(T::default())?;
        let bytes = probe.into_inner().map_err(|e| e.into_error())?;
        let header = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
        std::fs::write(path, [header, b"\n"].concat())?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, EvalError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub query_pixel_x: f64,
    pub query_pixel_y: f64,
    pub keypoint_id: usize,
    pub confidence: f64,
}

pub fn match_rows(matches: &[Match]) -> Vec<MatchRow> {
    matches
        .iter()
        .map(|m| MatchRow {
            query_pixel_x: m.pixel.0,
            query_pixel_y: m.pixel.1,
            keypoint_id: m.keypoint,
            confidence: m.confidence,
        })
        .collect()
}

/// Binary PGM (one channel) or PPM (first three channels) of a rendered
/// view, intensities clamped to `[0, 1]`.
pub fn write_view_image(view: &RenderedView, path: &Path) -> std::io::Result<()> {
    let (w, h) = (view.cam.width, view.cam.height);
    let out_ch = if view.channels >= 3 { 3 } else { 1 };
    let mut buf = format!("{}\n{w} {h}\n255\n", if out_ch == 3 { "P6" } else { "P5" }).into_bytes();
    for px in view.image.chunks(view.channels) {
        buf.extend(px[..out_ch].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    std::fs::write(path, buf)
}

fn nearest_template_deg(views: &ViewpointSet, subset: &[usize], pose: &Pose) -> f64 {
    let d = eye_direction(pose);
    subset
        .iter()
        .map(|&i| eye_direction(&views.poses[i]).dot(&d).clamp(-1.0, 1.0).acos())
        .fold(f64::INFINITY, f64::min)
        .to_degrees()
}

/// Keypoint bank over a subset of the template views. The sampling seed
/// depends only on the object, so the full subset reproduces the default bank.
pub fn template_bank(
    model: &PoseModel,
    store: &ParamStore,
    t: &TestObject,
    subset: &[usize],
    cfg: &EvalConfig,
) -> Result<TemplateBank, EvalError> {
    let views: Vec<RenderedView> = subset.iter().map(|&i| t.templates[i].clone()).collect();
    let mut rng = rng_for(&[cfg.seed, 0xba4c, t.index as u64]);
    Ok(model.build_bank(store, &views, cfg.bank_keypoints, &mut rng)?)
}

fn score(t: &TestObject, q: usize, res: Result<crate::model::Inference, ModelError>, coverage: f64) -> QueryRow {
    let gt = &t.queries[q].pose;
    let mut row = QueryRow {
        object: t.index,
        query: q,
        diameter: t.diameter(),
        rot_err_deg: 180.0,
        trans_err: f64::INFINITY,
        add: f64::INFINITY,
        add_s: f64::INFINITY,
        add_initial: f64::INFINITY,
        matches: 0,
        inliers: 0,
        match_ms: 0.0,
        total_ms: 0.0,
        coverage_deg: coverage,
        failed: true,
    };
    if let Ok(inf) = res {
        row.rot_err_deg = rotation_geodesic(inf.pose.rotation(), gt.rotation()).to_degrees();
        row.trans_err = (inf.pose.translation() - gt.translation()).norm();
        row.add = add_metric(&inf.pose, gt, &t.metric_points, false);
        row.add_s = add_metric(&inf.pose, gt, &t.metric_points, true);
        row.add_initial = add_metric(&inf.initial, gt, &t.metric_points, false);
        row.matches = inf.matches.len();
        row.inliers = inf.inliers;
        row.match_ms = inf.match_ms;
        row.total_ms = inf.total_ms;
        row.failed = false;
    }
    row
}

/// Evaluates every query of every object against banks built from the
/// template views in `subset` (all views when `None`).
pub fn evaluate_with(
    model: &PoseModel,
    store: &ParamStore,
    testset: &[TestObject],
    opts: &InferOptions,
    cfg: &EvalConfig,
    subset: impl Fn(&TestObject) -> Vec<usize>,
) -> Result<EvalReport, EvalError> {
    if testset.iter().all(|t| t.queries.is_empty()) {
        return Err(EvalError::EmptyTestset);
    }
    let mut rows = Vec::new();
    for t in testset {
        let sub = subset(t);
        let bank = template_bank(model, store, t, &sub, cfg)?;
        for (q, query) in t.queries.iter().enumerate() {
            let o = InferOptions {
                seed: rng_for(&[opts.seed, t.index as u64, q as u64]).random(),
                ..opts.clone()
            };
            let res = model.infer(store, query, &bank, &o);
            if let Err(e) = &res {
                if !matches!(e, ModelError::NoMatches | ModelError::Pnp(_) | ModelError::Refine(_)) {
                    return Err(res.unwrap_err().into());
                }
            }
            rows.push(score(t, q, res, nearest_template_deg(&t.views, &sub, &query.pose)));
        }
    }
    Ok(EvalReport::from_rows(rows, cfg))
}

pub fn evaluate(
    model: &PoseModel,
    store: &ParamStore,
    testset: &[TestObject],
    opts: &InferOptions,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    evaluate_with(model, store, testset, opts, cfg, |t| (0..t.templates.len()).collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneRow {
    pub keep_fraction: f64,
    pub accuracy: f64,
    pub mean_match_ms: f64,
    pub mean_total_ms: f64,
}

/// One sweep per keep fraction, applied at every pruning layer of `opts`.
pub fn ablate_pruning(
    model: &PoseModel,
    store: &ParamStore,
    testset: &[TestObject],
    opts: &InferOptions,
    cfg: &EvalConfig,
    fractions: &[f64],
) -> Result<(Vec<PruneRow>, Vec<EvalReport>), EvalError> {
    let mut table = Vec::new();
    let mut reports = Vec::new();
    for &f in fractions {
        let o = InferOptions {
            schedule: vec![f; opts.schedule.len()],
            ..opts.clone()
        };
        let r = evaluate(model, store, testset, &o, cfg)?;
        table.push(PruneRow {
            keep_fraction: f,
            accuracy: r.accuracy,
            mean_match_ms: r.mean_match_ms,
            mean_total_ms: r.mean_total_ms,
        });
        reports.push(r);
    }
    Ok((table, reports))
}

/// Greedy farthest-point sampling on rotation geodesics, seeded at view 0.
/// Returned indices are sorted.
pub fn farthest_views(views: &ViewpointSet, k: usize) -> Vec<usize> {
    let n = views.len();
    if n == 0 || k == 0 {
        return Vec::new();
    }
    let k = k.min(n);
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = (0..n).map(|j| views.angle(0, j)).collect();
    while chosen.len() < k {
        let (next, _) = dist
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |b, (j, &d)| if d > b.1 { (j, d) } else { b });
        chosen.push(next);
        for (j, d) in dist.iter_mut().enumerate() {
            *d = d.min(views.angle(next, j));
        }
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TemplateRow {
    pub percentage: f64,
    pub views: usize,
    pub accuracy: f64,
    pub median_rot_deg: f64,
}

pub fn ablate_templates(
    model: &PoseModel,
    store: &ParamStore,
    testset: &[TestObject],
    opts: &InferOptions,
    cfg: &EvalConfig,
    percentages: &[f64],
) -> Result<(Vec<TemplateRow>, Vec<EvalReport>), EvalError> {
    let mut table = Vec::new();
    let mut reports = Vec::new();
    for &p in percentages {
        let k = |t: &TestObject| ((p / 100.0 * t.templates.len() as f64).round() as usize).max(2);
        let r = evaluate_with(model, store, testset, opts, cfg, |t| farthest_views(&t.views, k(t)))?;
        table.push(TemplateRow {
            percentage: p,
            views: testset.first().map_or(0, |t| k(t).min(t.templates.len())),
            accuracy: r.accuracy,
            median_rot_deg: r.median_rot_deg,
        });
        reports.push(r);
    }
    Ok((table, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(object: usize, add: f64, rot: f64) -> QueryRow {
        QueryRow {
            object,
            query: 0,
            diameter: 1.0,
            rot_err_deg: rot,
            trans_err: 0.0,
            add,
            add_s: add,
            add_initial: 2.0 * add,
            matches: 10,
            inliers: 8,
            match_ms: 1.0,
            total_ms: 2.0,
            coverage_deg: 10.0,
            failed: false,
        }
    }

    #[test]
    fn aggregates_count_rows() {
        let cfg = EvalConfig {
            curve_points: 5,
            warmup_runs: 1,
            ..EvalConfig::default()
        };
        let rows = vec![row(0, 0.05, 1.0), row(0, 0.2, 30.0), row(1, 0.01, 2.0), row(1, f64::INFINITY, 180.0)];
        let r = EvalReport::from_rows(rows, &cfg);
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.median_rot_deg, 16.0);
        assert_eq!(r.curves.len(), 15);
        assert!(r.curves.iter().all(|c| (0.0..=1.0).contains(&c.accuracy)));
        assert_eq!(r.curves[0].threshold_frac, 0.0);
        assert_eq!(r.curves[4].threshold_frac, 0.5);
        assert_eq!(r.curves[14].accuracy, 0.75);
        assert_eq!(r.accuracy_at(0.1, true), 0.25);
        assert_eq!(r.summary().queries, 4);
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("pm_eval_{}", std::process::id()));
        let rows = vec![row(0, 0.05, 1.0), row(3, f64::INFINITY, 180.0)];
        write_csv(&dir.join("rows.csv"), &rows).unwrap();
        let back: Vec<QueryRow> = read_csv(&dir.join("rows.csv")).unwrap();
        assert_eq!(back, rows);
        let m = vec![MatchRow {
            query_pixel_x: 1.5,
            query_pixel_y: 2.25,
            keypoint_id: 7,
            confidence: 0.5,
        }];
        write_csv(&dir.join("m.csv"), &m).unwrap();
        let text = std::fs::read_to_string(dir.join("m.csv")).unwrap();
        assert!(text.starts_with("query_pixel_x,query_pixel_y,keypoint_id,confidence\n"));
        write_csv::<MatchRow>(&dir.join("empty.csv"), &[]).unwrap();
        let text = std::fs::read_to_string(dir.join("empty.csv")).unwrap();
        assert_eq!(text, "query_pixel_x,query_pixel_y,keypoint_id,confidence\n");
        assert!(read_csv::<MatchRow>(&dir.join("empty.csv")).unwrap().is_empty());
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn farthest_views_spread() {
        let v = ViewpointSet::fibonacci(60, 2.0);
        let all = farthest_views(&v, 60);
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        let six = farthest_views(&v, 6);
        assert_eq!(six.len(), 6);
        let min_gap = |s: &[usize]| {
            let mut m = f64::INFINITY;
            for &a in s {
                for &b in s {
                    if a != b {
                        m = m.min(v.angle(a, b));
                    }
                }
            }
            m
        };
        assert!(min_gap(&six) > min_gap(&spread(60, 6)) * 0.9);
    }

    #[test]
    fn median_even_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
