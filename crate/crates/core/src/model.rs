//! The full network and the inference pipeline: features, attention stack,
//! coarse matching, fine refinement, PnP and the translation refiner.

use std::time::Instant;

use objpose_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

use crate::features::{bilinear_entries, encode_2d, Backbone, FeatureConfig, FeatureError, FeaturePyramid, PosEnc3D};
use crate::geom::{Pose, Vec2, Vec3};
use crate::iolayer::{stack_forward, IoConfig, IoError, IoLayer, IoState, StackOutput};
use crate::matching::{cell_window_centre, extract_matches, fine_refine_2d, FineOutput, Match, MatchError, MatchHead};
use crate::pnp::{solve_pnp_ransac, Correspondence, PnpError, RansacConfig};
use crate::refine3d::{apply_pose_delta, centroid_pixel, CropBox, RefineConfig, RefineError, RefineMatch, Refiner};
use crate::synth::{rng_for, sample_template_points, RenderedView, SynthError, TemplateCloud};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("no matches above threshold")]
    NoMatches,
    #[error("need at least 2 template views, got {0}")]
    TooFewTemplates(usize),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Pnp(#[from] PnpError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub features: FeatureConfig,
    pub io: IoConfig,
    pub layers: usize,
    pub tau: f64,
    pub theta: f64,
    pub fine_window: usize,
    pub pos_2d: bool,
    pub pos_3d: bool,
    pub refine: RefineConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            io: IoConfig::default(),
            layers: 3,
            tau: crate::matching::DEFAULT_TEMPERATURE,
            theta: crate::matching::DEFAULT_THRESHOLD,
            fine_window: 5,
            pos_2d: true,
            pos_3d: true,
            refine: RefineConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoseModel {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub pos3d: PosEnc3D,
    pub layers: Vec<IoLayer>,
    pub head: MatchHead,
    pub refiner: Refiner,
}

/// Image as an `[H, W, C]` tensor.
pub fn view_tensor(view: &RenderedView) -> Tensor {
    Tensor::new(&[view.cam.height, view.cam.width, view.channels], view.image.clone()).expect("image sized by camera")
}

/// Template keypoints with their coarse (3D-encoded) and fine features.
#[derive(Debug, Clone)]
pub struct TemplateBank {
    pub points: Vec<Vec3>,
    /// `[n, Ĉ]`
    pub coarse: Tensor,
    /// `[n, C̃]`
    pub fine: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub schedule: Vec<f64>,
    pub refine3d: bool,
    pub ransac: RansacConfig,
    /// Matches handed to the refiner, highest confidence first.
    pub refine_top: usize,
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            schedule: vec![0.5, 0.5],
            refine3d: true,
            ransac: RansacConfig::default(),
            refine_top: 128,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Inference {
    /// Pose from PnP on the refined 2D matches.
    pub initial: Pose,
    pub pose: Pose,
    pub matches: Vec<Match>,
    pub inliers: usize,
    /// Attention stack plus coarse matching.
    pub match_ms: f64,
    pub total_ms: f64,
}

impl PoseModel {
    pub fn new(store: &mut ParamStore, cfg: ModelConfig, rng: &mut impl Rng) -> Self {
        let backbone = Backbone::new(store, "backbone", cfg.features, rng);
        let pos3d = PosEnc3D::new(store, "pos3d", cfg.io.dim, rng);
        let layers = (0..cfg.layers)
            .map(|i| IoLayer::new(store, &format!("io{i}"), cfg.io, rng))
            .collect();
        let head = MatchHead::new(store, "head", cfg.io.dim, rng);
        let refiner = Refiner::new(store, "refine", cfg.features.fine_dim, cfg.refine, rng);
        Self {
            cfg,
            backbone,
            pos3d,
            layers,
            head,
            refiner,
        }
    }

    /// Backbone features of the query plus its 2D-encoded coarse tokens.
    pub fn query_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        view: &RenderedView,
    ) -> Result<(FeaturePyramid, Var), ModelError> {
        let img = g.constant(view_tensor(view));
        let pyr = self.backbone.extract(g, store, img)?;
        let tokens = encode_2d(g, pyr.coarse, pyr.coarse_size, self.cfg.pos_2d)?;
        Ok((pyr, tokens))
    }

    /// Coarse (bilinearly sampled, 3D-encoded) and fine features for every
    /// keypoint of `cloud`, read from the template view it came from.
    pub fn template_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        views: &[&RenderedView],
        cloud: &TemplateCloud,
    ) -> Result<(Var, Var), ModelError> {
        let mut slot = vec![usize::MAX; views.len()];
        let mut coarse = Vec::new();
        let mut fine = Vec::new();
        let mut sizes = None;
        for &v in &cloud.view {
            if slot[v] == usize::MAX {
                slot[v] = coarse.len();
                let img = g.constant(view_tensor(views[v]));
                let pyr = self.backbone.extract(g, store, img)?;
                coarse.push(pyr.coarse);
                fine.push(pyr.fine);
                sizes = Some((pyr.coarse_size, pyr.fine_size));
            }
        }
        let ((ch, cw), (fh, fw)) = sizes.ok_or(SynthError::EmptyTemplate)?;
        let coarse_all = if coarse.len() == 1 { coarse[0] } else { g.concat(&coarse, 0)? };
        let fine_all = if fine.len() == 1 { fine[0] } else { g.concat(&fine, 0)? };
        let mut entries = Vec::with_capacity(cloud.len() * 4);
        let mut fine_idx = Vec::with_capacity(cloud.len());
        for (k, (&v, &(col, row))) in cloud.view.iter().zip(&cloud.pixels).enumerate() {
            let s = slot[v];
            for (_, i, w) in bilinear_entries(&[(col as f64, row as f64)], (ch, cw)) {
                entries.push((k, s * ch * cw + i, w));
            }
            fine_idx.push(s * fh * fw + row * fw + col);
        }
        let c = g.row_mix(coarse_all, cloud.len(), entries)?;
        let c = self.pos3d.encode(g, store, c, &cloud.points, self.cfg.pos_3d)?;
        let f = g.gather_rows(fine_all, &fine_idx)?;
        Ok((c, f))
    }

    pub fn match_stack(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query_tokens: Var,
        object_tokens: Var,
        schedule: &[f64],
    ) -> Result<StackOutput, ModelError> {
        let n = g.shape(object_tokens)[0];
        let state = IoState {
            image: query_tokens,
            object: object_tokens,
            object_indices: (0..n).collect(),
        };
        Ok(stack_forward(g, store, &self.layers, &self.head, state, schedule, self.cfg.tau)?)
    }

    /// 2D refinement around each match's coarse cell; `anchors` holds one
    /// fine template feature per match.
    pub fn fine_matches(
        &self,
        g: &mut Graph,
        pyr: &FeaturePyramid,
        cells: &[usize],
        anchors: Var,
    ) -> Result<FineOutput, ModelError> {
        let grid_w = pyr.coarse_size.1;
        let centres: Vec<(i64, i64)> = cells.iter().map(|&c| cell_window_centre(c, grid_w)).collect();
        Ok(fine_refine_2d(g, pyr.fine, pyr.fine_size, &centres, anchors, self.cfg.fine_window)?)
    }

    /// Samples `total` keypoints spread evenly over the template views and
    /// caches their features.
    pub fn build_bank(
        &self,
        store: &ParamStore,
        views: &[RenderedView],
        total: usize,
        rng: &mut impl Rng,
    ) -> Result<TemplateBank, ModelError> {
        if views.len() < 2 {
            return Err(ModelError::TooFewTemplates(views.len()));
        }
        let nv = views.len();
        let counts: Vec<usize> = (0..nv).map(|v| total / nv + usize::from(v < total % nv)).collect();
        let refs: Vec<&RenderedView> = views.iter().collect();
        let cloud = sample_template_points(&refs, &counts, rng)?;
        let mut g = Graph::new();
        let (c, f) = self.template_features(&mut g, store, &refs, &cloud)?;
        Ok(TemplateBank {
            points: cloud.points,
            coarse: g.value(c).clone(),
            fine: g.value(f).clone(),
        })
    }

    /// Coarse matches refined to sub-pixel positions; empty when nothing
    /// clears the confidence threshold. Also returns the query features, the
    /// fine bank constant and the matching time in milliseconds.
    fn match_query(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        query: &RenderedView,
        bank: &TemplateBank,
        opts: &InferOptions,
    ) -> Result<(FeaturePyramid, Var, Vec<Match>, f64), ModelError> {
        let (pyr, qtok) = self.query_features(g, store, query)?;
        let t_match = Instant::now();
        let otok = g.constant(bank.coarse.clone());
        let out = self.match_stack(g, store, qtok, otok, &opts.schedule)?;
        let p = *out.confidences.last().expect("at least one layer");
        let ids = out.indices.last().expect("at least one layer").clone();
        let mut matches = extract_matches(g.value(p), self.cfg.theta);
        let match_ms = t_match.elapsed().as_secs_f64() * 1e3;
        let fine_bank = g.constant(bank.fine.clone());
        if matches.is_empty() {
            return Ok((pyr, fine_bank, matches, match_ms));
        }
        for m in matches.iter_mut() {
            m.keypoint = ids[m.keypoint];
        }
        let kp: Vec<usize> = matches.iter().map(|m| m.keypoint).collect();
        let anchors = g.gather_rows(fine_bank, &kp)?;
        let cells: Vec<usize> = matches.iter().map(|m| m.cell).collect();
        let fine = self.fine_matches(g, &pyr, &cells, anchors)?;
        let off = g.value(fine.offsets).data().to_vec();
        let var = g.value(fine.variances).data().to_vec();
        for (i, m) in matches.iter_mut().enumerate() {
            let (cx, cy) = fine.centres[i];
            m.pixel = (cx as f64 + off[2 * i], cy as f64 + off[2 * i + 1]);
            m.variance = var[i];
        }
        Ok((pyr, fine_bank, matches, match_ms))
    }

    /// Refined 2D-3D matches for one query, without solving for a pose.
    pub fn matches(
        &self,
        store: &ParamStore,
        query: &RenderedView,
        bank: &TemplateBank,
        opts: &InferOptions,
    ) -> Result<Vec<Match>, ModelError> {
        Ok(self.match_query(&mut Graph::new(), store, query, bank, opts)?.2)
    }

    /// Full pipeline for one query against a cached template bank.
    pub fn infer(
        &self,
        store: &ParamStore,
        query: &RenderedView,
        bank: &TemplateBank,
        opts: &InferOptions,
    ) -> Result<Inference, ModelError> {
        let start = Instant::now();
        let mut g = Graph::new();
        let (pyr, fine_bank, matches, match_ms) = self.match_query(&mut g, store, query, bank, opts)?;
        if matches.is_empty() {
            return Err(ModelError::NoMatches);
        }
        let corrs: Vec<Correspondence> = matches
            .iter()
            .map(|m| Correspondence::new(Vec2::new(m.pixel.0, m.pixel.1), bank.points[m.keypoint], m.confidence))
            .collect();
        let sol = solve_pnp_ransac(&corrs, &query.cam, &opts.ransac, &mut rng_for(&[opts.seed, 0x9e37]))?;
        let initial = sol.pose;
        let mut pose = initial;
        if opts.refine3d {
            if let Ok(c) = centroid_pixel(&initial, &query.cam) {
                let mut order: Vec<usize> = (0..matches.len()).collect();
                order.sort_by(|&a, &b| matches[b].confidence.total_cmp(&matches[a].confidence).then(a.cmp(&b)));
                order.truncate(opts.refine_top.max(1));
                let rm: Vec<RefineMatch> = order
                    .iter()
                    .map(|&i| RefineMatch {
                        point: bank.points[matches[i].keypoint],
                        confidence: matches[i].confidence,
                    })
                    .collect();
                let rows: Vec<usize> = order.iter().map(|&i| matches[i].keypoint).collect();
                let tf = g.gather_rows(fine_bank, &rows)?;
                let crop = CropBox::centred(c, query.cam.width as f64);
                let (_, r) = self.refiner.forward(&mut g, store, &rm, &initial, &query.cam, pyr.fine, tf, &crop)?;
                pose = apply_pose_delta(&initial, &r.delta(&g), &query.cam, &crop)?;
            }
        }
        Ok(Inference {
            initial,
            pose,
            matches,
            inliers: sol.inliers.iter().filter(|&&b| b).count(),
            match_ms,
            total_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Camera;
    use crate::synth::{generate_object, look_at_pose, render, ShapeFamily};

    fn views() -> Vec<RenderedView> {
        let obj = generate_object(3, 4000, ShapeFamily::Ellipsoid, 3).unwrap();
        let cam = Camera::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap();
        [Vec3::new(2.0, 0.0, 0.3), Vec3::new(0.0, 2.0, 0.3), Vec3::new(-2.0, 0.1, 0.0)]
            .iter()
            .map(|e| render(&obj, &look_at_pose(e), &cam).unwrap())
            .collect()
    }

    fn small() -> ModelConfig {
        ModelConfig {
            io: IoConfig { dim: 16, heads: 2, aggregate_keys: false },
            features: FeatureConfig { stem: 8, mid: 8, coarse_dim: 16, fine_dim: 8, ..Default::default() },
            refine: RefineConfig { hidden: 8, heads: 2, ..Default::default() },
            layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn template_features_match_direct_lookup() {
        let mut store = ParamStore::new();
        let model = PoseModel::new(&mut store, small(), &mut rng_for(&[1]));
        let vs = views();
        let refs: Vec<&RenderedView> = vs.iter().collect();
        let cloud = sample_template_points(&refs, &[5, 0, 7], &mut rng_for(&[2])).unwrap();
        let mut g = Graph::new();
        let (_, f) = model.template_features(&mut g, &store, &refs, &cloud).unwrap();
        let img = g.constant(view_tensor(&vs[2]));
        let pyr = model.backbone.extract(&mut g, &store, img).unwrap();
        let (col, row) = cloud.pixels[9];
        let want = g.value(pyr.fine).row(row * 64 + col).to_vec();
        assert_eq!(g.value(f).row(9), &want[..]);
    }

    #[test]
    fn bank_needs_two_views() {
        let mut store = ParamStore::new();
        let model = PoseModel::new(&mut store, small(), &mut rng_for(&[1]));
        let vs = views();
        let err = model.build_bank(&store, &vs[..1], 10, &mut rng_for(&[0])).unwrap_err();
        assert!(matches!(err, ModelError::TooFewTemplates(1)));
        let bank = model.build_bank(&store, &vs, 10, &mut rng_for(&[0])).unwrap();
        assert_eq!(bank.points.len(), 10);
        assert_eq!(bank.coarse.shape(), &[10, 16]);
    }

    #[test]
    fn inference_is_deterministic() {
        let mut store = ParamStore::new();
        let model = PoseModel::new(&mut store, small(), &mut rng_for(&[1]));
        let vs = views();
        let bank = model.build_bank(&store, &vs[1..], 200, &mut rng_for(&[0])).unwrap();
        let opts = InferOptions { schedule: vec![0.5], ..Default::default() };
        let a = model.infer(&store, &vs[0], &bank, &opts);
        let b = model.infer(&store, &vs[0], &bank, &opts);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a.pose, b.pose);
                assert_eq!(a.matches, b.matches);
            }
            (Err(a), Err(b)) => assert_eq!(a.to_string(), b.to_string()),
            _ => panic!("runs disagree"),
        }
    }
}
