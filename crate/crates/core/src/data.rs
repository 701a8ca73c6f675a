//! Deterministic synthetic datasets: object seeds per split, template
//! viewpoints, query poses and the on-disk object cache.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::geom::{Camera, Pose, Vec3};
use crate::synth::{
    generate_object, load_object, look_at_pose, mix_seed, render, save_object, RenderedView, ShapeFamily, SynthError,
    SyntheticObject, ViewpointSet,
};

pub const IMAGE_SIZE: usize = 64;
pub const FOCAL: f64 = 80.0;
pub const QUERY_DEPTH: (f64, f64) = (1.8, 2.4);
/// Max lateral offset of the object in a query, camera-frame units.
pub const QUERY_OFFSET: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169,
            Split::Test => 0x7465_7374,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn camera() -> Camera {
    let c = (IMAGE_SIZE as f64) / 2.0;
    Camera::new(FOCAL, FOCAL, c, c, IMAGE_SIZE, IMAGE_SIZE).expect("valid intrinsics")
}

pub fn object_seed(seed: u64, split: Split, index: usize) -> u64 {
    mix_seed(&[seed, split.tag(), index as u64])
}

/// Shape families cycle with the object index.
pub fn family_for(index: usize) -> ShapeFamily {
    ShapeFamily::ALL[index % ShapeFamily::ALL.len()]
}

pub fn make_object(seed: u64, split: Split, index: usize, points: usize) -> Result<SyntheticObject, SynthError> {
    generate_object(object_seed(seed, split, index), points, family_for(index), 3)
}

/// Unit vector from the object origin towards the camera.
pub fn eye_direction(pose: &Pose) -> Vec3 {
    (-(pose.rotation().transpose() * pose.translation())).normalize()
}

/// Direction within `max_angle` radians of `dir`, uniform in angle.
pub fn jitter_direction(dir: &Vec3, max_angle: f64, rng: &mut impl Rng) -> Vec3 {
    if max_angle <= 0.0 {
        return *dir;
    }
    let r: [f64; 3] = UnitSphere.sample(rng);
    let axis = Vec3::from(r).cross(dir);
    if axis.norm() < 1e-9 {
        return *dir;
    }
    let rot = nalgebra::Rotation3::new(axis.normalize() * rng.random_range(0.0..max_angle));
    (rot * dir).normalize()
}

/// Zero-roll look-at from `dir` at a random depth, then shifted sideways in
/// the camera frame.
pub fn query_pose(dir: &Vec3, rng: &mut impl Rng) -> Pose {
    let d = rng.random_range(QUERY_DEPTH.0..QUERY_DEPTH.1);
    let base = look_at_pose(&(dir.normalize() * d));
    let off = Vec3::new(
        rng.random_range(-QUERY_OFFSET..QUERY_OFFSET),
        rng.random_range(-QUERY_OFFSET..QUERY_OFFSET),
        0.0,
    );
    base.with_translation(base.translation() + off)
}

pub fn render_all(obj: &SyntheticObject, views: &ViewpointSet, cam: &Camera) -> Result<Vec<RenderedView>, SynthError> {
    views
        .poses
        .iter()
        .map(|p| render(obj, p, cam).map_err(SynthError::from))
        .collect()
}

pub fn object_path(dir: &Path, split: Split, index: usize) -> PathBuf {
    dir.join(split.name()).join(format!("obj_{index:05}.pmob"))
}

/// Writes `count` objects of a split under `dir/<split>/`.
pub fn write_split(dir: &Path, seed: u64, split: Split, count: usize, points: usize) -> Result<(), SynthError> {
    std::fs::create_dir_all(dir.join(split.name()))?;
    for i in 0..count {
        save_object(&object_path(dir, split, i), &make_object(seed, split, i, points)?)?;
    }
    Ok(())
}

/// Reads a cached object when `dir` is given, otherwise regenerates it.
pub fn fetch_object(
    dir: Option<&Path>,
    seed: u64,
    split: Split,
    index: usize,
    points: usize,
) -> Result<SyntheticObject, SynthError> {
    match dir {
        Some(d) => load_object(&object_path(d, split, index)),
        None => make_object(seed, split, index, points),
    }
}
