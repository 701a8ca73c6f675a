//! Three-view training: sampling, the combined loss, AdamW with warmup and
//! cosine decay, checkpoints and per-epoch metrics.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use objpose_tensor::{read_records, write_records, AdamState, AdamW, CheckpointError, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{camera, eye_direction, fetch_object, jitter_direction, query_pose, Split};
use crate::features::FeatureConfig;
use crate::geom::Vec2;
use crate::iolayer::IoConfig;
use crate::matching::{coarse_loss, extract_matches, fine_loss, ground_truth_pairs, project_keypoints, KeypointProjection, Match, FOCAL_GAMMA};
use crate::model::{ModelConfig, ModelError, PoseModel};
use crate::refine3d::{perturb_pose, refine_losses, sample_perturbation, total_loss, RefineConfig, RefineInput, RefineMatch};
use crate::synth::{
    augment, build_template_cloud, render, rng_for, sample_three_views, AugmentConfig, RenderedView, SynthError,
    SyntheticObject, TemplateCloud, ViewpointSet,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    Divergence { epoch: usize, step: u64 },
    #[error("checkpoint was written for config {found}, current config is {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl From<objpose_tensor::TensorError> for TrainError {
    fn from(e: objpose_tensor::TensorError) -> Self {
        TrainError::Model(ModelError::Tensor(e))
    }
}

impl From<crate::matching::MatchError> for TrainError {
    fn from(e: crate::matching::MatchError) -> Self {
        TrainError::Model(ModelError::Match(e))
    }
}

impl From<crate::refine3d::RefineError> for TrainError {
    fn from(e: crate::refine3d::RefineError) -> Self {
        TrainError::Model(ModelError::Refine(e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub max_grad_norm: f64,
    pub objects: usize,
    pub samples_per_object: usize,
    pub points_per_object: usize,
    pub views: usize,
    pub view_distance: f64,
    /// Template keypoints sampled from each of the two templates.
    pub m_per_view: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub prune_schedule: Vec<f64>,
    pub tau: f64,
    pub theta: f64,
    pub alpha: f64,
    pub zoom_bins: usize,
    pub zoom_sigma: f64,
    pub shift_frac: f64,
    pub fine_window: usize,
    pub fine_var_floor: f64,
    pub refine_window: usize,
    /// Matches used to supervise fine and 3D refinement.
    pub refine_top: usize,
    /// Weight of the loss on the refiner's per-match local offsets.
    pub refine_local_weight: f64,
    /// Let the refinement loss reach the backbone.
    pub refine_backbone_grad: bool,
    /// Apply the coarse loss after every attention layer, not just the last.
    pub deep_supervision: bool,
    /// Epochs trained on matching losses only before the refiner joins.
    pub matching_warmup_epochs: usize,
    pub aggregate_keys: bool,
    /// Max angle in degrees between the query direction and its lattice view.
    pub query_jitter_deg: f64,
    pub aug_brightness: f64,
    pub aug_contrast: f64,
    pub aug_noise: f64,
    pub aug_log_zoom: f64,
    pub aug_shift: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            epochs: 20,
            batch_size: 4,
            lr: 5e-4,
            warmup_epochs: 2,
            weight_decay: 0.01,
            max_grad_norm: 5.0,
            objects: 200,
            samples_per_object: 2,
            points_per_object: 16_000,
            views: 60,
            view_distance: 2.0,
            m_per_view: 256,
            dim: 64,
            heads: 4,
            layers: 3,
            prune_schedule: vec![0.5, 0.5],
            tau: 0.1,
            theta: 0.1,
            alpha: 100.0,
            zoom_bins: 100,
            zoom_sigma: 0.025,
            shift_frac: 0.025,
            fine_window: 5,
            fine_var_floor: 0.05,
            refine_window: 7,
            refine_top: 128,
            refine_local_weight: 1.0,
            refine_backbone_grad: false,
            deep_supervision: true,
            matching_warmup_epochs: 0,
            aggregate_keys: false,
            query_jitter_deg: 8.0,
            aug_brightness: 0.1,
            aug_contrast: 0.1,
            aug_noise: 0.01,
            aug_log_zoom: 0.0,
            aug_shift: 0.0,
        }
    }

    /// The full-size schedule; not meant to run on a desk machine.
    pub fn full() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 1e-4,
            warmup_epochs: 5,
            objects: 1500,
            samples_per_object: 10,
            views: 250,
            m_per_view: 2048,
            refine_top: 512,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "full" => Some(Self::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        if self.m_per_view == 0 {
            return bad("m_per_view must be at least 1");
        }
        if !(self.lr > 0.0 && self.tau > 0.0 && self.theta > 0.0 && self.zoom_sigma > 0.0) {
            return bad("rates must be positive");
        }
        if self.alpha < 0.0 || self.weight_decay < 0.0 || self.max_grad_norm < 0.0 || self.shift_frac < 0.0 {
            return bad("weights must be non-negative");
        }
        if self.batch_size == 0 || self.objects == 0 || self.samples_per_object == 0 {
            return bad("batch_size, objects and samples_per_object must be positive");
        }
        if self.layers == 0 || self.prune_schedule.len() > self.layers {
            return bad("prune schedule longer than the layer stack");
        }
        if self.prune_schedule.iter().any(|&k| !(k > 0.0 && k <= 1.0)) {
            return bad("keep fractions must lie in (0, 1]");
        }
        if self.fine_window % 2 == 0 || self.refine_window % 2 == 0 {
            return bad("windows must be odd");
        }
        if self.dim % self.heads != 0 || self.dim % 4 != 0 {
            return bad("dim must split into heads and be a multiple of 4");
        }
        if self.views < 7 || self.zoom_bins == 0 {
            return bad("need at least 7 views and one zoom bin");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 of the serialised config.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            features: FeatureConfig {
                coarse_dim: self.dim,
                ..FeatureConfig::default()
            },
            io: IoConfig {
                dim: self.dim,
                heads: self.heads,
                aggregate_keys: self.aggregate_keys,
            },
            layers: self.layers,
            tau: self.tau,
            theta: self.theta,
            fine_window: self.fine_window,
            pos_2d: true,
            pos_3d: true,
            refine: RefineConfig {
                window: self.refine_window,
                bins: self.zoom_bins,
                zoom_sigma: self.zoom_sigma,
                shift_frac: self.shift_frac,
                ..RefineConfig::default()
            },
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            brightness: self.aug_brightness,
            contrast: self.aug_contrast,
            noise_std: self.aug_noise,
            max_log_zoom: self.aug_log_zoom,
            max_shift: self.aug_shift,
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.objects * self.samples_per_object).div_ceil(self.batch_size)
    }
}

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay
/// reaching 0 at step `total − 1`.
pub fn lr_schedule(step: usize, base: f64, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(1).saturating_sub(warmup);
    if span == 0 {
        return base;
    }
    let t = ((step - warmup) as f64 / span as f64).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Appends ground-truth `(cell, keypoint)` pairs not already matched until
/// `target` entries exist. Padded entries are flagged.
pub fn pad_with_gt_matches(mut matches: Vec<Match>, gt_pairs: &[(usize, usize)], target: usize) -> Vec<Match> {
    let mut seen: HashSet<(usize, usize)> = matches.iter().map(|m| (m.cell, m.keypoint)).collect();
    for &(c, k) in gt_pairs {
        if matches.len() >= target {
            break;
        }
        if seen.insert((c, k)) {
            let mut m = Match::new(c, k, 1.0);
            m.padded = true;
            matches.push(m);
        }
    }
    matches
}

/// One three-view training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub object: usize,
    pub query: RenderedView,
    pub pos: RenderedView,
    pub neg: RenderedView,
    pub cloud: TemplateCloud,
    pub diameter: f64,
    pub zoom: f64,
    pub offset: Vec2,
    pub seed: u64,
}

/// Draws a query near a lattice view, a positive template within the
/// angular band and a far negative template.
pub fn make_sample(
    cfg: &TrainConfig,
    object: usize,
    obj: &SyntheticObject,
    lattice: &ViewpointSet,
    rng: &mut impl Rng,
) -> Result<TrainSample, TrainError> {
    let cam = camera();
    let (q, p, n) = sample_three_views(lattice, rng)?;
    let dir = jitter_direction(&eye_direction(&lattice.poses[q]), cfg.query_jitter_deg.to_radians(), rng);
    let qpose = query_pose(&dir, rng);
    let query = render(obj, &qpose, &cam).map_err(SynthError::from)?;
    let query = augment(&query, &cfg.augment(), rng);
    let pos = render(obj, &lattice.poses[p], &cam).map_err(SynthError::from)?;
    let neg = render(obj, &lattice.poses[n], &cam).map_err(SynthError::from)?;
    let cloud = build_template_cloud(&pos, &neg, cfg.m_per_view, rng)?;
    let (zoom, offset) = sample_perturbation(&cfg.model_config().refine, cam.width as f64, rng);
    Ok(TrainSample {
        object,
        query,
        pos,
        neg,
        cloud,
        diameter: obj.cloud.diameter(),
        zoom,
        offset,
        seed: rng.random(),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub total: f64,
    pub coarse: f64,
    pub fine: f64,
    pub zoom: f64,
    pub shift: f64,
    pub local: f64,
    pub matches: usize,
    pub correct: usize,
    pub padded: usize,
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item()
}

/// Builds the loss graph for one sample.
pub fn sample_loss(
    model: &PoseModel,
    store: &ParamStore,
    cfg: &TrainConfig,
    s: &TrainSample,
    with_refine: bool,
) -> Result<(Graph, Var, LossTerms), TrainError> {
    let mut g = Graph::new();
    let (pyr, qtok) = model.query_features(&mut g, store, &s.query)?;
    let (tc, tf) = model.template_features(&mut g, store, &[&s.pos, &s.neg], &s.cloud)?;
    let out = model.match_stack(&mut g, store, qtok, tc, &cfg.prune_schedule)?;
    let proj = project_keypoints(&s.query, &s.cloud.points, s.diameter);
    let last = out.confidences.len() - 1;
    let layers: Vec<usize> = if cfg.deep_supervision { (0..=last).collect() } else { vec![last] };
    let mut coarse_terms = Vec::new();
    for &l in &layers {
        let gt = ground_truth_pairs(&proj, &out.indices[l]);
        if !gt.is_empty() {
            coarse_terms.push(coarse_loss(&mut g, out.confidences[l], &gt, FOCAL_GAMMA)?);
        }
    }
    let lc = match coarse_terms.len() {
        0 => g.constant(Tensor::scalar(0.0)),
        n => {
            let mut acc = coarse_terms[0];
            for &t in &coarse_terms[1..] {
                acc = g.add(acc, t)?;
            }
            g.scale(acc, 1.0 / n as f64)
        }
    };
    let p_last = out.confidences[last];
    let ids = &out.indices[last];
    let token_of: HashMap<usize, usize> = ids.iter().enumerate().map(|(t, &k)| (k, t)).collect();
    let mut predicted = extract_matches(g.value(p_last), cfg.theta);
    for m in predicted.iter_mut() {
        m.keypoint = ids[m.keypoint];
    }
    let n_pred = predicted.len();
    let mut correct: Vec<Match> = predicted
        .into_iter()
        .filter(|m| proj[m.keypoint].cell == Some(m.cell))
        .collect();
    correct.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.cell.cmp(&b.cell)));
    correct.truncate(cfg.refine_top);
    let n_correct = correct.len();
    let mut gt_kp: Vec<(usize, usize)> = ground_truth_pairs(&proj, ids).into_iter().map(|(c, t)| (c, ids[t])).collect();
    gt_kp.shuffle(&mut rng_for(&[s.seed]));
    let mut set = pad_with_gt_matches(correct, &gt_kp, cfg.refine_top);
    let cols = g.shape(p_last)[1];
    for m in set.iter_mut().filter(|m| m.padded) {
        m.confidence = g.value(p_last).data()[m.cell * cols + token_of[&m.keypoint]];
    }
    let mut terms = LossTerms {
        matches: n_pred,
        correct: n_correct,
        padded: set.len() - n_correct,
        ..Default::default()
    };
    let zero = g.constant(Tensor::scalar(0.0));
    let (mut lf, mut lz, mut l2d, mut ll) = (zero, zero, zero, zero);
    if !set.is_empty() {
        let kps: Vec<usize> = set.iter().map(|m| m.keypoint).collect();
        let cells: Vec<usize> = set.iter().map(|m| m.cell).collect();
        let anchors = g.gather_rows(tf, &kps)?;
        let fine = model.fine_matches(&mut g, &pyr, &cells, anchors)?;
        let gt = Tensor::from_fn(&[set.len(), 2], |i| {
            let (k, a) = (i / 2, i % 2);
            let (cx, cy) = fine.centres[k];
            let (u, v) = proj[kps[k]].pixel;
            if a == 0 { u - cx as f64 } else { v - cy as f64 }
        });
        lf = fine_loss(&mut g, fine.offsets, fine.variances, &gt, cfg.fine_var_floor)?;
        if with_refine && cfg.alpha > 0.0 {
            let cam = s.query.cam;
            if let Ok((pose0, crop, delta)) = perturb_pose(&s.query.pose, s.zoom, s.offset, &cam, cam.width as f64) {
                let rm: Vec<RefineMatch> = set
                    .iter()
                    .map(|m| RefineMatch {
                        point: s.cloud.points[m.keypoint],
                        confidence: m.confidence,
                    })
                    .collect();
                let (fq, tfr) = if cfg.refine_backbone_grad {
                    (pyr.fine, anchors)
                } else {
                    (g.detach(pyr.fine), g.detach(anchors))
                };
                let (inp, r) = model.refiner.forward(&mut g, store, &rm, &pose0, &cam, fq, tfr, &crop)?;
                (lz, l2d) = refine_losses(&mut g, &r, &delta)?;
                if cfg.refine_local_weight > 0.0 {
                    ll = local_offset_loss(&mut g, &inp, &kps, &proj, cfg)?;
                }
            }
        }
    }
    let total = total_loss(&mut g, lc, lf, lz, l2d, cfg.alpha)?;
    let weighted = g.scale(ll, cfg.refine_local_weight);
    let total = g.add(total, weighted)?;
    terms.total = scalar(&g, total);
    terms.coarse = scalar(&g, lc);
    terms.fine = scalar(&g, lf);
    terms.zoom = scalar(&g, lz);
    terms.shift = scalar(&g, l2d);
    terms.local = scalar(&g, ll);
    Ok((g, total, terms))
}

/// Fine loss on the refiner's per-match offsets, over matches whose true
/// location falls inside their window.
fn local_offset_loss(
    g: &mut Graph,
    inp: &RefineInput,
    kps: &[usize],
    proj: &[KeypointProjection],
    cfg: &TrainConfig,
) -> Result<Var, TrainError> {
    let r = (cfg.refine_window / 2) as f64 + 0.5;
    let mut rows = Vec::new();
    let mut gt = Vec::new();
    for (i, &k) in kps.iter().enumerate() {
        let (u, v) = proj[k].pixel;
        let (cx, cy) = inp.centres[i];
        let p = inp.projected[i];
        if inp.truncated[i] || (u - cx as f64).abs() > r || (v - cy as f64).abs() > r {
            continue;
        }
        rows.push(i);
        gt.extend([u - p.x, v - p.y]);
    }
    if rows.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = rows.len();
    let off = g.gather_rows(inp.offsets, &rows)?;
    let m = g.shape(inp.variances)[0];
    let var = g.reshape(inp.variances, &[m, 1])?;
    let var = g.gather_rows(var, &rows)?;
    let var = g.reshape(var, &[n])?;
    Ok(fine_loss(g, off, var, &Tensor::new(&[n, 2], gt)?, cfg.fine_var_floor)?)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: u64,
    pub lr: f64,
    pub loss: f64,
    pub coarse: f64,
    pub fine: f64,
    pub zoom: f64,
    pub shift: f64,
    pub local: f64,
    pub matches: f64,
    pub correct: f64,
    pub padded: f64,
    pub mask_too_small: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub lr: f64,
    pub grad_norm: f64,
    pub terms: Vec<LossTerms>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub epoch: usize,
    pub step: u64,
    pub params: Vec<(String, Tensor)>,
    pub adam: AdamState,
}

const CKPT_MAGIC: &[u8; 4] = b"PMCK";
const CKPT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<(), TrainError> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.fingerprint.len() as u32).to_le_bytes())?;
        w.write_all(self.fingerprint.as_bytes())?;
        w.write_all(&(self.epoch as u64).to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&self.adam.step.to_le_bytes())?;
        let names: Vec<&str> = self.params.iter().map(|(n, _)| n.as_str()).collect();
        write_records(&mut w, self.params.iter().map(|(n, t)| (n.as_str(), t)))?;
        write_records(&mut w, names.iter().copied().zip(&self.adam.m))?;
        write_records(&mut w, names.iter().copied().zip(&self.adam.v))?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CKPT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version).into());
        }
        r.read_exact(&mut b4)?;
        let mut fp = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut fp)?;
        let fingerprint =
            String::from_utf8(fp).map_err(|_| CheckpointError::Malformed("fingerprint is not utf-8".into()))?;
        let mut b8 = [0u8; 8];
        let mut next = || -> Result<u64, TrainError> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let (epoch, step, adam_step) = (next()? as usize, next()?, next()?);
        let params = read_records(&mut r)?;
        let m = read_records(&mut r)?;
        let v = read_records(&mut r)?;
        if m.len() != params.len() || v.len() != params.len() {
            return Err(CheckpointError::Malformed("optimizer state does not match parameters".into()).into());
        }
        Ok(Self {
            fingerprint,
            epoch,
            step,
            params,
            adam: AdamState {
                step: adam_step,
                m: m.into_iter().map(|(_, t)| t).collect(),
                v: v.into_iter().map(|(_, t)| t).collect(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::read(BufReader::new(File::open(path)?))
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: PoseModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub adam: AdamState,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
    pub data_dir: Option<std::path::PathBuf>,
    objects: HashMap<usize, (SyntheticObject, ViewpointSet)>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = PoseModel::new(&mut store, cfg.model_config(), &mut rng_for(&[cfg.seed, 0x1417]));
        let adam = AdamState::new(&store);
        let opt = AdamW {
            weight_decay: cfg.weight_decay,
            ..AdamW::default()
        };
        Ok(Self {
            cfg,
            model,
            store,
            opt,
            adam,
            epoch: 0,
            step: 0,
            data_dir: None,
            objects: HashMap::new(),
        })
    }

    pub fn from_checkpoint(cfg: TrainConfig, ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let expected = cfg.fingerprint();
        if ckpt.fingerprint != expected {
            return Err(TrainError::FingerprintMismatch {
                expected,
                found: ckpt.fingerprint.clone(),
            });
        }
        let mut t = Self::new(cfg)?;
        t.store.load_records(&ckpt.params)?;
        if ckpt.adam.m.len() != t.store.len() {
            return Err(CheckpointError::Malformed("optimizer state does not match parameters".into()).into());
        }
        t.adam = ckpt.adam.clone();
        t.epoch = ckpt.epoch;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            fingerprint: self.cfg.fingerprint(),
            epoch: self.epoch,
            step: self.step,
            params: self.store.records().map(|(n, t)| (n.to_string(), t.clone())).collect(),
            adam: self.adam.clone(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.epochs * self.cfg.steps_per_epoch()
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let spe = self.cfg.steps_per_epoch();
        lr_schedule(step as usize, self.cfg.lr, self.cfg.warmup_epochs * spe, self.total_steps())
    }

    /// The object and its training viewpoints, drawn once per object.
    fn object(&mut self, i: usize) -> Result<&(SyntheticObject, ViewpointSet), TrainError> {
        if !self.objects.contains_key(&i) {
            let o = fetch_object(self.data_dir.as_deref(), self.cfg.seed, Split::Train, i, self.cfg.points_per_object)?;
            let mut rng = rng_for(&[self.cfg.seed, i as u64, 0x0715]);
            let views = ViewpointSet::random(self.cfg.views, self.cfg.view_distance, &mut rng);
            self.objects.insert(i, (o, views));
        }
        Ok(&self.objects[&i])
    }

    /// `(object, repeat)` pairs of an epoch in training order.
    pub fn epoch_order(&self, epoch: usize) -> Vec<(usize, usize)> {
        let mut order: Vec<(usize, usize)> = (0..self.cfg.objects)
            .flat_map(|o| (0..self.cfg.samples_per_object).map(move |r| (o, r)))
            .collect();
        order.shuffle(&mut rng_for(&[self.cfg.seed, epoch as u64, 0x0dde]));
        order
    }

    pub fn sample(&mut self, epoch: usize, object: usize, repeat: usize) -> Result<TrainSample, TrainError> {
        let mut rng = rng_for(&[self.cfg.seed, epoch as u64, object as u64, repeat as u64]);
        let cfg = self.cfg.clone();
        let (obj, views) = self.object(object)?;
        make_sample(&cfg, object, obj, views, &mut rng)
    }

    /// Forward, backward and one AdamW update over `batch`.
    pub fn train_step(&mut self, batch: &[TrainSample], with_refine: bool) -> Result<StepReport, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let mut acc: Vec<Option<Tensor>> = vec![None; self.store.len()];
        let mut terms = Vec::with_capacity(batch.len());
        let inv = 1.0 / batch.len() as f64;
        for s in batch {
            let (g, loss, t) = sample_loss(&self.model, &self.store, &self.cfg, s, with_refine)?;
            if !t.total.is_finite() {
                return Err(TrainError::Divergence {
                    epoch: self.epoch,
                    step: self.step,
                });
            }
            let grads = g.backward(loss)?.for_params(&g, &self.store);
            for (a, gr) in acc.iter_mut().zip(grads) {
                if let Some(gr) = gr {
                    match a {
                        Some(a) => a.data_mut().iter_mut().zip(gr.data()).for_each(|(x, y)| *x += inv * y),
                        None => {
                            let mut gr = gr;
                            gr.data_mut().iter_mut().for_each(|x| *x *= inv);
                            *a = Some(gr);
                        }
                    }
                }
            }
            terms.push(t);
        }
        let norm = acc
            .iter()
            .flatten()
            .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(TrainError::Divergence {
                epoch: self.epoch,
                step: self.step,
            });
        }
        if self.cfg.max_grad_norm > 0.0 && norm > self.cfg.max_grad_norm {
            let k = self.cfg.max_grad_norm / norm;
            acc.iter_mut().flatten().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= k));
        }
        let lr = self.lr_at(self.step);
        self.opt.step(&mut self.store, &acc, &mut self.adam, lr)?;
        self.step += 1;
        Ok(StepReport {
            lr,
            grad_norm: norm,
            terms,
        })
    }

    /// Trains the next epoch.
    pub fn run_epoch(&mut self, mut on_step: impl FnMut(&StepReport)) -> Result<EpochMetrics, TrainError> {
        let start = Instant::now();
        let epoch = self.epoch;
        let with_refine = epoch >= self.cfg.matching_warmup_epochs;
        let order = self.epoch_order(epoch);
        let mut m = EpochMetrics {
            epoch,
            ..Default::default()
        };
        let mut n = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&(o, r)| self.sample(epoch, o, r))
                .collect::<Result<Vec<_>, _>>()?;
            m.mask_too_small += batch.iter().filter(|s| s.cloud.mask_too_small).count();
            let rep = self.train_step(&batch, with_refine)?;
            on_step(&rep);
            m.lr = rep.lr;
            for t in &rep.terms {
                m.loss += t.total;
                m.coarse += t.coarse;
                m.fine += t.fine;
                m.zoom += t.zoom;
                m.shift += t.shift;
                m.local += t.local;
                m.matches += t.matches as f64;
                m.correct += t.correct as f64;
                m.padded += t.padded as f64;
                n += 1.0;
            }
            m.steps += 1;
        }
        for v in [
            &mut m.loss,
            &mut m.coarse,
            &mut m.fine,
            &mut m.zoom,
            &mut m.shift,
            &mut m.local,
            &mut m.matches,
            &mut m.correct,
            &mut m.padded,
        ] {
            *v /= n;
        }
        m.seconds = start.elapsed().as_secs_f64();
        self.epoch += 1;
        Ok(m)
    }

    /// Runs the remaining epochs. With `out_dir`, writes the config, appends
    /// to `metrics.csv` and saves `checkpoint.pmck` after every epoch.
    pub fn run(
        &mut self,
        out_dir: Option<&Path>,
        mut on_epoch: impl FnMut(&EpochMetrics),
    ) -> Result<Vec<EpochMetrics>, TrainError> {
        if let Some(d) = out_dir {
            std::fs::create_dir_all(d)?;
            std::fs::write(d.join("config.toml"), self.cfg.to_toml())?;
        }
        let mut all = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.run_epoch(|_| {})?;
            if let Some(d) = out_dir {
                let path = d.join("metrics.csv");
                let fresh = !path.exists() || m.epoch == 0;
                let file = if fresh {
                    File::create(&path)?
                } else {
                    std::fs::OpenOptions::new().append(true).open(&path)?
                };
                let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
                w.serialize(m)?;
                w.flush()?;
                self.checkpoint().save(&d.join("checkpoint.pmck"))?;
            }
            on_epoch(&m);
            all.push(m);
        }
        Ok(all)
    }
}

/// Loads a model for inference from a checkpoint and its config.
pub fn load_model(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<(PoseModel, ParamStore), TrainError> {
    let t = Trainer::from_checkpoint(cfg.clone(), ckpt)?;
    Ok((t.model, t.store))
}
