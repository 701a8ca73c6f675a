//! Procedural textured objects, a point-splat z-buffer renderer, viewpoint
//! sets, three-view sampling, template point sampling and augmentation.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Rotation3;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use thiserror::Error;

use crate::geom::{
    backproject_pixels, look_at, max_pairwise_distance, nearest_rotation, rotation_geodesic,
    Camera, GeomError, Mat3, PointCloud3D, Pose, Vec3,
};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("need at least 7 viewpoints, got {0}")]
    TooFewViews(usize),
    #[error("no viewpoint lies in the positive angular band")]
    NoEligiblePositive,
    #[error("template view has an empty mask")]
    EmptyTemplate,
    #[error("unknown shape family {0:?}")]
    UnknownShape(String),
    #[error("cache file: {0}")]
    Cache(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Mixes a list of integers into one seed (splitmix64 finaliser per word).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Ellipsoid,
    RoundedBox,
    Blob,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 4] = [
        ShapeFamily::Sphere,
        ShapeFamily::Ellipsoid,
        ShapeFamily::RoundedBox,
        ShapeFamily::Blob,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Ellipsoid => "ellipsoid",
            ShapeFamily::RoundedBox => "rounded_box",
            ShapeFamily::Blob => "blob",
        }
    }
}

impl std::str::FromStr for ShapeFamily {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, SynthError> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| SynthError::UnknownShape(s.to_string()))
    }
}

/// Point cloud with per-point attribute rows in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticObject {
    pub seed: u64,
    pub family: ShapeFamily,
    pub cloud: PointCloud3D,
    /// Row-major `N × channels`.
    pub texture: Vec<f64>,
    pub channels: usize,
}

impl SyntheticObject {
    pub fn attribute(&self, i: usize) -> &[f64] {
        &self.texture[i * self.channels..(i + 1) * self.channels]
    }
}

pub const MIN_OBJECT_POINTS: usize = 64;

/// Fibonacci lattice on the unit sphere, mirrored so the set is antipodal
/// (odd counts get one extra unmirrored direction).
fn antipodal_directions(n: usize) -> Vec<Vec3> {
    let half = n / 2;
    let golden = PI * (3.0 - 5f64.sqrt());
    let mut dirs = Vec::with_capacity(n);
    for i in 0..half {
        // upper hemisphere only, so the mirrored copies never coincide
        let z = 1.0 - (i as f64 + 0.5) / half as f64;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        dirs.push(Vec3::new(r * phi.cos(), r * phi.sin(), z));
    }
    for i in 0..half {
        let d = -dirs[i];
        dirs.push(d);
    }
    if n % 2 == 1 {
        dirs.push(Vec3::new(1.0, 0.0, 0.0));
    }
    dirs
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Mat3 {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..PI);
    Rotation3::new(Vec3::from(axis) * angle).into_inner()
}

/// Band-limited random field: sum of cosines with random directions,
/// squashed into `(0, 1)`.
struct CosineField {
    waves: Vec<(Vec3, f64)>,
}

impl CosineField {
    fn new(rng: &mut ChaCha8Rng, terms: usize, min_freq: f64, max_freq: f64) -> Self {
        let waves = (0..terms)
            .map(|_| {
                let d: [f64; 3] = UnitSphere.sample(rng);
                let f = rng.random_range(min_freq..max_freq);
                (Vec3::from(d) * f, rng.random_range(0.0..2.0 * PI))
            })
            .collect();
        Self { waves }
    }

    fn eval(&self, p: &Vec3) -> f64 {
        let s: f64 = self.waves.iter().map(|(w, ph)| (w.dot(p) + ph).cos()).sum();
        // each cosine has variance 1/2
        0.5 + 0.5 * (s / (self.waves.len() as f64 / 2.0).sqrt()).tanh()
    }
}

/// Deterministic object for `seed`: surface points with diameter 1, centred
/// on their mean, plus a smooth `channels`-dimensional texture.
pub fn generate_object(
    seed: u64,
    n_points: usize,
    family: ShapeFamily,
    channels: usize,
) -> Result<SyntheticObject, SynthError> {
    if n_points < MIN_OBJECT_POINTS {
        return Err(SynthError::TooFewPoints {
            need: MIN_OBJECT_POINTS,
            got: n_points,
        });
    }
    let mut rng = rng_for(&[seed, 0x0b1e]);
    let dirs = antipodal_directions(n_points);
    let orient = random_rotation(&mut rng);
    let raw: Vec<Vec3> = match family {
        ShapeFamily::Sphere => dirs,
        ShapeFamily::Ellipsoid => {
            let a = Vec3::new(1.0, rng.random_range(0.55..1.0), rng.random_range(0.55..1.0));
            dirs.iter()
                .map(|d| {
                    let r = 1.0 / d.component_div(&a).norm();
                    orient * (d * r)
                })
                .collect()
        }
        ShapeFamily::RoundedBox => {
            let a = Vec3::new(1.0, rng.random_range(0.6..1.0), rng.random_range(0.6..1.0));
            let p = 4.0;
            dirs.iter()
                .map(|d| {
                    let s: f64 = (0..3).map(|k| (d[k] / a[k]).abs().powf(p)).sum();
                    orient * (d * s.powf(-1.0 / p))
                })
                .collect()
        }
        ShapeFamily::Blob => {
            let bumps: Vec<(Vec3, f64, f64)> = (0..4)
                .map(|_| {
                    let d: [f64; 3] = UnitSphere.sample(&mut rng);
                    (
                        Vec3::from(d) * rng.random_range(1.5..3.5),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.03..0.07),
                    )
                })
                .collect();
            dirs.iter()
                .map(|d| {
                    let r = 1.0 + bumps.iter().map(|(w, ph, a)| a * (w.dot(d) + ph).cos()).sum::<f64>();
                    orient * (d * r)
                })
                .collect()
        }
    };
    let centre = if family == ShapeFamily::Sphere {
        Vec3::zeros()
    } else {
        raw.iter().sum::<Vec3>() / raw.len() as f64
    };
    let centred: Vec<Vec3> = raw.iter().map(|p| p - centre).collect();
    let scale = 1.0 / max_pairwise_distance(&centred);
    let points: Vec<Vec3> = centred.iter().map(|p| p * scale).collect();

    let fields: Vec<(CosineField, CosineField)> = (0..channels)
        .map(|_| {
            (
                CosineField::new(&mut rng, 6, 3.0, 9.0),
                CosineField::new(&mut rng, 6, 9.0, 24.0),
            )
        })
        .collect();
    let mut texture = Vec::with_capacity(points.len() * channels);
    for p in &points {
        for (low, high) in &fields {
            texture.push(0.6 * low.eval(p) + 0.4 * high.eval(p));
        }
    }
    Ok(SyntheticObject {
        seed,
        family,
        cloud: PointCloud3D::new(points)?,
        texture,
        channels,
    })
}

/// One rendered viewpoint. Images are row-major `H × W × C`.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub image: Vec<f64>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub pose: Pose,
    pub cam: Camera,
    pub channels: usize,
}

impl RenderedView {
    pub fn mask_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn masked_pixels(&self) -> Vec<(usize, usize)> {
        (0..self.mask.len())
            .filter(|&i| self.mask[i])
            .map(|i| (i % self.cam.width, i / self.cam.width))
            .collect()
    }

    pub fn pixel(&self, col: usize, row: usize) -> &[f64] {
        let i = (row * self.cam.width + col) * self.channels;
        &self.image[i..i + self.channels]
    }
}

/// Splat radius (pixels) used by the default renderer.
pub const SPLAT_RADIUS: f64 = 0.7;

/// Z-buffered point splatting: every point covers the pixel centres within
/// `radius` of its projection; each pixel keeps the nearest point.
pub fn render_with_radius(
    obj: &SyntheticObject,
    pose: &Pose,
    cam: &Camera,
    radius: f64,
) -> Result<RenderedView, GeomError> {
    let (w, h) = (cam.width, cam.height);
    let mut zbuf = vec![f64::INFINITY; w * h];
    let mut owner = vec![usize::MAX; w * h];
    let r2 = radius * radius;
    for (index, p) in obj.cloud.points().iter().enumerate() {
        let pc = pose.transform(p);
        if pc.z <= crate::geom::MIN_DEPTH {
            return Err(GeomError::NonPositiveDepth { index, depth: pc.z });
        }
        let px = cam.pixel(&pc);
        let (c0, c1) = ((px.x - radius).ceil(), (px.x + radius).floor());
        let (r0, r1) = ((px.y - radius).ceil(), (px.y + radius).floor());
        if c1 < 0.0 || r1 < 0.0 || c0 >= w as f64 || r0 >= h as f64 {
            continue;
        }
        for r in (r0.max(0.0) as usize)..=(r1.min(h as f64 - 1.0) as usize) {
            for c in (c0.max(0.0) as usize)..=(c1.min(w as f64 - 1.0) as usize) {
                let (du, dv) = (c as f64 - px.x, r as f64 - px.y);
                if du * du + dv * dv <= r2 && pc.z < zbuf[r * w + c] {
                    zbuf[r * w + c] = pc.z;
                    owner[r * w + c] = index;
                }
            }
        }
    }
    let ch = obj.channels;
    let mut image = vec![0.0; w * h * ch];
    let mut depth = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for i in 0..w * h {
        if owner[i] != usize::MAX {
            mask[i] = true;
            depth[i] = zbuf[i];
            image[i * ch..(i + 1) * ch].copy_from_slice(obj.attribute(owner[i]));
        }
    }
    Ok(RenderedView {
        image,
        depth,
        mask,
        pose: *pose,
        cam: *cam,
        channels: ch,
    })
}

pub fn render(obj: &SyntheticObject, pose: &Pose, cam: &Camera) -> Result<RenderedView, GeomError> {
    render_with_radius(obj, pose, cam, SPLAT_RADIUS)
}

/// Camera poses around the object with a precomputed angle table.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointSet {
    pub poses: Vec<Pose>,
    angles: Vec<f64>,
}

impl ViewpointSet {
    pub fn new(poses: Vec<Pose>) -> Self {
        let n = poses.len();
        let mut angles = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                angles[i * n + j] = rotation_geodesic(poses[i].rotation(), poses[j].rotation());
            }
        }
        Self { poses, angles }
    }

    /// `n` look-at poses on a Fibonacci sphere of radius `distance`, camera
    /// up aligned with +z (zero roll).
    pub fn fibonacci(n: usize, distance: f64) -> Self {
        let golden = PI * (3.0 - 5f64.sqrt());
        let poses = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                let eye = Vec3::new(r * phi.cos(), r * phi.sin(), z) * distance;
                look_at_pose(&eye)
            })
            .collect();
        Self::new(poses)
    }

    /// `n` zero-roll look-at poses from uniformly random directions.
    pub fn random(n: usize, distance: f64, rng: &mut impl Rng) -> Self {
        let poses = (0..n)
            .map(|_| {
                let d: [f64; 3] = UnitSphere.sample(rng);
                look_at_pose(&(Vec3::from(d) * distance))
            })
            .collect();
        Self::new(poses)
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Geodesic angle between the rotations of views `i` and `j`.
    pub fn angle(&self, i: usize, j: usize) -> f64 {
        self.angles[i * self.poses.len() + j]
    }
}

/// Pose of a camera at `eye` looking at the object origin, image up = +z.
pub fn look_at_pose(eye: &Vec3) -> Pose {
    let r = look_at(eye, &Vec3::z());
    Pose::from_approx(&r, -(r * eye))
}

pub const POSITIVE_BAND_DEG: (f64, f64) = (5.0, 25.0);
pub const NEGATIVE_POOL: usize = 5;

fn in_band(a: f64) -> bool {
    let (lo, hi) = POSITIVE_BAND_DEG;
    a >= lo.to_radians() - 1e-12 && a <= hi.to_radians() + 1e-12
}

/// Positive and negative partners for a fixed query view.
pub fn sample_pair_for_query(
    views: &ViewpointSet,
    query: usize,
    rng: &mut impl Rng,
) -> Result<(usize, usize), SynthError> {
    if views.len() < NEGATIVE_POOL + 2 {
        return Err(SynthError::TooFewViews(views.len()));
    }
    let pos_pool: Vec<usize> = (0..views.len())
        .filter(|&j| j != query && in_band(views.angle(query, j)))
        .collect();
    if pos_pool.is_empty() {
        return Err(SynthError::NoEligiblePositive);
    }
    let pos = pos_pool[rng.random_range(0..pos_pool.len())];
    let mut far: Vec<usize> = (0..views.len()).filter(|&j| j != query).collect();
    far.sort_by(|&a, &b| {
        views
            .angle(query, b)
            .total_cmp(&views.angle(query, a))
            .then(a.cmp(&b))
    });
    let neg = far[rng.random_range(0..NEGATIVE_POOL)];
    Ok((pos, neg))
}

/// Query drawn uniformly among views that have an in-band partner, then a
/// positive from the band and a negative from the farthest views.
pub fn sample_three_views(
    views: &ViewpointSet,
    rng: &mut impl Rng,
) -> Result<(usize, usize, usize), SynthError> {
    if views.len() < NEGATIVE_POOL + 2 {
        return Err(SynthError::TooFewViews(views.len()));
    }
    let eligible: Vec<usize> = (0..views.len())
        .filter(|&q| (0..views.len()).any(|j| j != q && in_band(views.angle(q, j))))
        .collect();
    if eligible.is_empty() {
        return Err(SynthError::NoEligiblePositive);
    }
    let q = eligible[rng.random_range(0..eligible.len())];
    let (p, n) = sample_pair_for_query(views, q, rng)?;
    Ok((q, p, n))
}

/// Object-frame keypoints sampled from template views, with the view and
/// `(col, row)` pixel each came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateCloud {
    pub points: Vec<Vec3>,
    pub view: Vec<usize>,
    pub pixels: Vec<(usize, usize)>,
    /// Set when some view had fewer masked pixels than requested, so
    /// sampling fell back to drawing with replacement.
    pub mask_too_small: bool,
}

impl TemplateCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Samples `counts[v]` masked pixels from each view and backprojects them.
pub fn sample_template_points(
    views: &[&RenderedView],
    counts: &[usize],
    rng: &mut impl Rng,
) -> Result<TemplateCloud, SynthError> {
    let mut out = TemplateCloud {
        points: Vec::new(),
        view: Vec::new(),
        pixels: Vec::new(),
        mask_too_small: false,
    };
    for (v, (view, &m)) in views.iter().zip(counts).enumerate() {
        if m == 0 {
            continue;
        }
        let pool = view.masked_pixels();
        if pool.is_empty() {
            return Err(SynthError::EmptyTemplate);
        }
        let picked: Vec<(usize, usize)> = if pool.len() >= m {
            let mut idx = sample_indices(rng, pool.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| pool[i]).collect()
        } else {
            out.mask_too_small = true;
            (0..m).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        };
        out.points
            .extend(backproject_pixels(&view.depth, &view.cam, &view.pose, &picked));
        out.view.extend(std::iter::repeat_n(v, m));
        out.pixels.extend(picked);
    }
    Ok(out)
}

/// `m` keypoints from each of the positive and negative templates (view 0
/// and view 1 respectively).
pub fn build_template_cloud(
    pos: &RenderedView,
    neg: &RenderedView,
    m: usize,
    rng: &mut impl Rng,
) -> Result<TemplateCloud, SynthError> {
    sample_template_points(&[pos, neg], &[m, m], rng)
}

/// Photometric and geometric augmentation strengths. All-zero is identity.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentConfig {
    /// Max absolute additive brightness shift per channel.
    pub brightness: f64,
    /// Max relative contrast change per channel.
    pub contrast: f64,
    /// Std-dev of per-pixel Gaussian noise on masked pixels.
    pub noise_std: f64,
    /// Max absolute log of the zoom factor.
    pub max_log_zoom: f64,
    /// Max crop-centre shift as a fraction of image width.
    pub max_shift: f64,
}

/// Crop a square of side `W / zoom` centred at `(bx, by)` and resample it to
/// the full image by nearest neighbour. Intrinsics follow exactly, so every
/// original pixel `u` maps to `zoom·(u − b) + (W − 1)/2`.
pub fn zoom_view(view: &RenderedView, zoom: f64, bx: f64, by: f64) -> RenderedView {
    let cam = view.cam;
    let (w, h, ch) = (cam.width, cam.height, view.channels);
    let (ox, oy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let new_cam = Camera {
        fx: cam.fx * zoom,
        fy: cam.fy * zoom,
        cx: zoom * (cam.cx - bx) + ox,
        cy: zoom * (cam.cy - by) + oy,
        width: w,
        height: h,
    };
    let mut out = RenderedView {
        image: vec![0.0; view.image.len()],
        depth: vec![0.0; view.depth.len()],
        mask: vec![false; view.mask.len()],
        pose: view.pose,
        cam: new_cam,
        channels: ch,
    };
    for r in 0..h {
        let sy = ((r as f64 - oy) / zoom + by).round();
        if sy < 0.0 || sy >= h as f64 {
            continue;
        }
        for c in 0..w {
            let sx = ((c as f64 - ox) / zoom + bx).round();
            if sx < 0.0 || sx >= w as f64 {
                continue;
            }
            let (si, di) = (sy as usize * w + sx as usize, r * w + c);
            if view.mask[si] {
                out.mask[di] = true;
                out.depth[di] = view.depth[si];
                out.image[di * ch..(di + 1) * ch].copy_from_slice(&view.image[si * ch..(si + 1) * ch]);
            }
        }
    }
    out
}

pub fn augment(view: &RenderedView, cfg: &AugmentConfig, rng: &mut impl Rng) -> RenderedView {
    let mut out = if cfg.max_log_zoom > 0.0 || cfg.max_shift > 0.0 {
        let zoom = if cfg.max_log_zoom > 0.0 {
            rng.random_range(-cfg.max_log_zoom..cfg.max_log_zoom).exp()
        } else {
            1.0
        };
        let w = view.cam.width as f64;
        let centre = ((w - 1.0) / 2.0, (view.cam.height as f64 - 1.0) / 2.0);
        let (dx, dy) = if cfg.max_shift > 0.0 {
            (
                rng.random_range(-cfg.max_shift..cfg.max_shift) * w,
                rng.random_range(-cfg.max_shift..cfg.max_shift) * w,
            )
        } else {
            (0.0, 0.0)
        };
        zoom_view(view, zoom, centre.0 + dx, centre.1 + dy)
    } else {
        view.clone()
    };
    let ch = out.channels;
    if cfg.brightness > 0.0 || cfg.contrast > 0.0 {
        let gains: Vec<(f64, f64)> = (0..ch)
            .map(|_| {
                let b = if cfg.brightness > 0.0 { rng.random_range(-cfg.brightness..cfg.brightness) } else { 0.0 };
                let c = if cfg.contrast > 0.0 { rng.random_range(-cfg.contrast..cfg.contrast) } else { 0.0 };
                (1.0 + c, b)
            })
            .collect();
        for (i, &m) in out.mask.iter().enumerate() {
            if m {
                for (k, &(g, b)) in gains.iter().enumerate() {
                    let v = &mut out.image[i * ch + k];
                    *v = ((*v - 0.5) * g + 0.5 + b).clamp(0.0, 1.0);
                }
            }
        }
    }
    if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("finite std");
        for (i, &m) in out.mask.iter().enumerate() {
            if m {
                for k in 0..ch {
                    out.image[i * ch + k] += normal.sample(rng);
                }
            }
        }
    }
    out
}

/// Re-expresses views in an object frame rotated by `r0`: points become
/// `r0·x` and poses become `pose ∘ r0⁻¹`, leaving images untouched.
pub fn rotate_frame(obj: &SyntheticObject, r0: &Mat3) -> SyntheticObject {
    let r0 = nearest_rotation(r0);
    let points = obj.cloud.points().iter().map(|p| r0 * p).collect();
    SyntheticObject {
        cloud: PointCloud3D::new(points).expect("same size as before"),
        ..obj.clone()
    }
}

pub fn rotate_pose_frame(pose: &Pose, r0: &Mat3) -> Pose {
    pose.compose(&Pose::from_approx(&r0.transpose(), Vec3::zeros()))
}

const CACHE_MAGIC: &[u8; 4] = b"PMOB";
const CACHE_VERSION: u32 = 1;

/// Binary object cache: magic, version, seed, family, counts, then points
/// and texture as little-endian f64.
pub fn write_object<W: Write>(mut w: W, obj: &SyntheticObject) -> Result<(), SynthError> {
    w.write_all(CACHE_MAGIC)?;
    w.write_all(&CACHE_VERSION.to_le_bytes())?;
    w.write_all(&obj.seed.to_le_bytes())?;
    w.write_all(&[obj.family.code()])?;
    w.write_all(&(obj.cloud.len() as u32).to_le_bytes())?;
    w.write_all(&(obj.channels as u32).to_le_bytes())?;
    for p in obj.cloud.points() {
        for k in 0..3 {
            w.write_all(&p[k].to_le_bytes())?;
        }
    }
    for v in &obj.texture {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, SynthError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, SynthError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn read_object<R: Read>(mut r: R) -> Result<SyntheticObject, SynthError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(SynthError::Cache("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CACHE_VERSION {
        return Err(SynthError::Cache(format!("unsupported version {version}")));
    }
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let mut fam = [0u8; 1];
    r.read_exact(&mut fam)?;
    let family = ShapeFamily::from_code(fam[0])
        .ok_or_else(|| SynthError::Cache(format!("bad shape code {}", fam[0])))?;
    let n = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        points.push(Vec3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?));
    }
    let mut texture = Vec::with_capacity(n * channels);
    for _ in 0..n * channels {
        texture.push(read_f64(&mut r)?);
    }
    Ok(SyntheticObject {
        seed: u64::from_le_bytes(seed),
        family,
        cloud: PointCloud3D::new(points)?,
        texture,
        channels,
    })
}

pub fn save_object(path: &Path, obj: &SyntheticObject) -> Result<(), SynthError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_object(f, obj)
}

pub fn load_object(path: &Path) -> Result<SyntheticObject, SynthError> {
    read_object(std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cam() -> Camera {
        Camera::new(80.0, 80.0, 32.0, 32.0, 64, 64).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_object(0, 2000, ShapeFamily::Blob, 3).unwrap();
        let b = generate_object(0, 2000, ShapeFamily::Blob, 3).unwrap();
        assert_eq!(a, b);
        let c = generate_object(1, 2000, ShapeFamily::Blob, 3).unwrap();
        assert_ne!(a.texture, c.texture);
    }

    #[test]
    fn sphere_radius_and_diameter() {
        let s = generate_object(3, 4000, ShapeFamily::Sphere, 3).unwrap();
        let c = s.cloud.centroid();
        for p in s.cloud.points() {
            assert!(((p - c).norm() - 0.5).abs() < 1e-6);
        }
        for fam in ShapeFamily::ALL {
            let o = generate_object(5, 1000, fam, 2).unwrap();
            assert!((o.cloud.diameter() - 1.0).abs() < 1e-6, "{fam:?}");
            assert_eq!(o.texture.len(), 1000 * 2);
            assert!(o.texture.iter().all(|&t| (0.0..=1.0).contains(&t)));
        }
    }

    #[test]
    fn too_few_points() {
        assert!(matches!(
            generate_object(0, 63, ShapeFamily::Sphere, 3),
            Err(SynthError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn single_point_lights_principal_pixel() {
        let mut obj = generate_object(0, 64, ShapeFamily::Sphere, 3).unwrap();
        let far = Vec3::new(0.0, 0.0, 100.0);
        let mut pts: Vec<Vec3> = vec![Vec3::zeros(); 4];
        pts[1] = far + Vec3::new(50.0, 0.0, 0.0);
        pts[2] = far + Vec3::new(-50.0, 0.0, 0.0);
        pts[3] = far + Vec3::new(0.0, 50.0, 0.0);
        obj.cloud = PointCloud3D::new(pts).unwrap();
        obj.texture = vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let cam = Camera::new(10.0, 10.0, 3.0, 2.0, 6, 5).unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 1.0));
        let v = render(&obj, &pose, &cam).unwrap();
        assert_eq!(v.masked_pixels(), vec![(3, 2)]);
        assert_eq!(v.pixel(3, 2), &[0.1, 0.2, 0.3]);
        assert_eq!(v.depth[2 * 6 + 3], 1.0);
    }

    #[test]
    fn nearer_point_wins_on_shared_ray() {
        let mut obj = generate_object(0, 64, ShapeFamily::Sphere, 1).unwrap();
        let off = Vec3::new(0.0, 0.0, -50.0);
        obj.cloud = PointCloud3D::new(vec![
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.0, 0.0, 1.0),
            off,
            off + Vec3::new(0.0, 1.0, 0.0),
        ])
        .unwrap();
        obj.texture = vec![0.9, 0.4, 0.0, 0.0];
        let cam = Camera::new(10.0, 10.0, 2.0, 2.0, 5, 5).unwrap();
        let v = render_with_radius(&obj, &Pose::identity(), &cam, 0.5);
        // the last two points sit behind the camera
        assert!(matches!(v, Err(GeomError::NonPositiveDepth { index: 2, .. })));
        obj.cloud = PointCloud3D::new(vec![
            Vec3::new(0.0, 0.0, 2.0),
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(100.0, 0.0, 1.0),
            Vec3::new(0.0, 100.0, 1.0),
        ])
        .unwrap();
        let v = render_with_radius(&obj, &Pose::identity(), &cam, 0.5).unwrap();
        assert_eq!(v.pixel(2, 2), &[0.4]);
        assert_eq!(v.depth[2 * 5 + 2], 1.0);
    }

    #[test]
    fn sphere_mask_matches_projected_disc() {
        let s = generate_object(1, 16000, ShapeFamily::Sphere, 3).unwrap();
        let cam = small_cam();
        for d in [1.8, 2.0, 2.5] {
            let v = render(&s, &Pose::from_translation(Vec3::new(0.0, 0.0, d)), &cam).unwrap();
            let r: f64 = 0.5;
            let disc = 80.0 * r / (d * d - r * r).sqrt();
            let area = PI * disc * disc;
            let got = v.mask_count() as f64;
            assert!((got - area).abs() / area < 0.1, "d={d} got {got} want {area}");
        }
    }

    #[test]
    fn front_surface_has_no_holes() {
        let cam = small_cam();
        for fam in ShapeFamily::ALL {
            let o = generate_object(11, 16000, fam, 3).unwrap();
            let views = ViewpointSet::fibonacci(12, 1.8);
            for pose in &views.poses {
                let v = render(&o, pose, &cam).unwrap();
                // a hole shows the far side: depth well beyond its 4-neighbours
                let mut holes = 0;
                for r in 1..63 {
                    for c in 1..63 {
                        let i = r * 64 + c;
                        let nb = [i - 1, i + 1, i - 64, i + 64];
                        if v.mask[i] && nb.iter().all(|&j| v.mask[j]) {
                            let m = nb.iter().map(|&j| v.depth[j]).fold(f64::INFINITY, f64::min);
                            if v.depth[i] > m + 0.2 {
                                holes += 1;
                            }
                        }
                    }
                }
                assert!(holes as f64 <= 0.005 * v.mask_count() as f64, "{fam:?}: {holes}");
            }
        }
    }

    #[test]
    fn texture_is_spatially_correlated() {
        for seed in 0..3u64 {
            let o = generate_object(seed, 3000, ShapeFamily::Ellipsoid, 3).unwrap();
            let pts = o.cloud.points();
            for ch in 0..3 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for i in (0..pts.len()).step_by(7) {
                    let j = (0..pts.len())
                        .filter(|&j| j != i)
                        .min_by(|&a, &b| (pts[a] - pts[i]).norm().total_cmp(&(pts[b] - pts[i]).norm()))
                        .unwrap();
                    xs.push(o.attribute(i)[ch]);
                    ys.push(o.attribute(j)[ch]);
                }
                let n = xs.len() as f64;
                let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
                let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
                let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
                let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
                let corr = cov / (vx * vy).sqrt();
                assert!(corr > 0.3, "seed {seed} ch {ch}: {corr}");
            }
        }
    }

    #[test]
    fn ring_positive_is_a_near_neighbour() {
        let poses: Vec<Pose> = (0..36)
            .map(|k| {
                let a = (k as f64 * 10.0).to_radians();
                look_at_pose(&(Vec3::new(a.cos(), a.sin(), 0.0) * 2.0))
            })
            .collect();
        let views = ViewpointSet::new(poses);
        let mut rng = rng_for(&[1]);
        for _ in 0..200 {
            let (p, n) = sample_pair_for_query(&views, 0, &mut rng).unwrap();
            assert!([1, 2, 34, 35].contains(&p), "{p}");
            // farthest five around 180°: indices 16..=20
            assert!((16..=20).contains(&n), "{n}");
        }
    }

    #[test]
    fn too_few_views_is_an_error() {
        let views = ViewpointSet::fibonacci(6, 2.0);
        let mut rng = rng_for(&[2]);
        assert!(matches!(sample_three_views(&views, &mut rng), Err(SynthError::TooFewViews(6))));
    }

    #[test]
    fn template_cloud_points_land_in_mask() {
        let obj = generate_object(4, 8000, ShapeFamily::RoundedBox, 3).unwrap();
        let views = ViewpointSet::fibonacci(20, 2.0);
        let cam = small_cam();
        let a = render(&obj, &views.poses[0], &cam).unwrap();
        let b = render(&obj, &views.poses[10], &cam).unwrap();
        let mut rng = rng_for(&[3]);
        let t = build_template_cloud(&a, &b, 4, &mut rng).unwrap();
        assert_eq!(t.len(), 8);
        assert!(!t.mask_too_small);
        for k in 0..t.len() {
            let v = if t.view[k] == 0 { &a } else { &b };
            let (px, _) = crate::geom::project(&v.pose, &v.cam, &[t.points[k]]).unwrap();
            let (c, r) = t.pixels[k];
            assert!(v.mask[r * 64 + c]);
            assert!((px[0].x - c as f64).abs() < 0.5 && (px[0].y - r as f64).abs() < 0.5);
        }
        let dup = build_template_cloud(&a, &a, 16, &mut rng).unwrap();
        assert_eq!(dup.len(), 32);
    }

    #[test]
    fn small_mask_falls_back_to_replacement() {
        let obj = generate_object(4, 8000, ShapeFamily::Sphere, 3).unwrap();
        let cam = small_cam();
        let far = Pose::from_translation(Vec3::new(0.0, 0.0, 40.0));
        let v = render(&obj, &far, &cam).unwrap();
        let n = v.mask_count();
        assert!(n > 0 && n < 50);
        let t = build_template_cloud(&v, &v, 50, &mut rng_for(&[4])).unwrap();
        assert!(t.mask_too_small);
        assert_eq!(t.len(), 100);
    }

    #[test]
    fn opposite_templates_cover_the_sphere() {
        let obj = generate_object(6, 16000, ShapeFamily::Sphere, 3).unwrap();
        // far, long-focal camera: each view sees almost a full hemisphere
        let cam = Camera::new(240.0, 240.0, 32.0, 32.0, 64, 64).unwrap();
        let a = render(&obj, &look_at_pose(&Vec3::new(0.0, 0.0, 6.0)), &cam).unwrap();
        let b = render(&obj, &look_at_pose(&Vec3::new(0.0, 0.0, -6.0)), &cam).unwrap();
        let m = a.mask_count().min(b.mask_count());
        let t = build_template_cloud(&a, &b, m, &mut rng_for(&[5])).unwrap();
        // coverage oracle: 8 latitude × 16 longitude bins of equal area
        let mut hit = [[false; 16]; 8];
        for p in &t.points {
            let d = p.normalize();
            let lat = (((d.z + 1.0) / 2.0 * 8.0) as usize).min(7);
            let lon = (((d.y.atan2(d.x) + PI) / (2.0 * PI) * 16.0) as usize).min(15);
            hit[lat][lon] = true;
        }
        let covered = hit.iter().flatten().filter(|&&h| h).count();
        assert!(covered as f64 >= 0.9 * 128.0, "{covered}");
    }

    #[test]
    fn zero_augmentation_is_identity() {
        let obj = generate_object(7, 4000, ShapeFamily::Blob, 3).unwrap();
        let v = render(&obj, &look_at_pose(&Vec3::new(2.0, 0.0, 0.3)), &small_cam()).unwrap();
        let out = augment(&v, &AugmentConfig::default(), &mut rng_for(&[6]));
        assert_eq!(out, v);
    }

    #[test]
    fn zoom_keeps_reprojection_consistent() {
        let obj = generate_object(8, 8000, ShapeFamily::Ellipsoid, 3).unwrap();
        let v = render(&obj, &look_at_pose(&Vec3::new(0.3, 2.0, 0.4)), &small_cam()).unwrap();
        let (bx, by) = (31.5, 31.5);
        let z = zoom_view(&v, 2.0, bx, by);
        let pix = v.masked_pixels();
        let pts = backproject_pixels(&v.depth, &v.cam, &v.pose, &pix);
        let (proj, _) = crate::geom::project(&z.pose, &z.cam, &pts).unwrap();
        for (k, &(c, r)) in pix.iter().enumerate() {
            let expect = (2.0 * (c as f64 - bx) + 31.5, 2.0 * (r as f64 - by) + 31.5);
            assert!((proj[k].x - expect.0).abs() < 0.5 && (proj[k].y - expect.1).abs() < 0.5);
        }
        // a masked output pixel's depth comes from a source pixel at most half a
        // source pixel away
        assert!(z.mask_count() > 3 * v.mask_count());
    }

    #[test]
    fn frame_rotation_preserves_geometry() {
        let obj = generate_object(9, 500, ShapeFamily::Blob, 3).unwrap();
        let r0 = Rotation3::new(Vec3::new(0.3, -1.1, 0.7)).into_inner();
        let rot = rotate_frame(&obj, &r0);
        let pose = look_at_pose(&Vec3::new(1.0, 1.0, 1.0));
        let moved = rotate_pose_frame(&pose, &r0);
        for (a, b) in obj.cloud.points().iter().zip(rot.cloud.points()) {
            assert!((pose.transform(a) - moved.transform(b)).norm() < 1e-9);
        }
    }

    #[test]
    fn cache_round_trip() {
        let obj = generate_object(10, 300, ShapeFamily::RoundedBox, 3).unwrap();
        let mut buf = Vec::new();
        write_object(&mut buf, &obj).unwrap();
        assert_eq!(read_object(&buf[..]).unwrap(), obj);
        buf[0] = b'X';
        assert!(matches!(read_object(&buf[..]), Err(SynthError::Cache(_))));
    }
}
