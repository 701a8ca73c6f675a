//! Rigid poses, pinhole projection, backprojection and pose-error metrics.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3, Vector4};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeomError {
    #[error("point {index} has non-positive depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },
    #[error("mask selects no pixels")]
    EmptyMask,
    #[error("rotation is not orthonormal with det +1")]
    NotARotation,
    #[error("invalid camera: {0}")]
    BadCamera(&'static str),
    #[error("point cloud needs at least 4 points, got {0}")]
    TooFewPoints(usize),
    #[error("depth map and mask sizes disagree with the camera")]
    SizeMismatch,
}

/// Depths at or below this are rejected by projection.
pub const MIN_DEPTH: f64 = 1e-9;

/// Rigid transform taking object coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    /// Validates orthonormality (`RᵀR = I`, `det R = 1`) to 1e-9.
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self, GeomError> {
        let ortho = (rotation.transpose() * rotation - Mat3::identity()).amax();
        if ortho > 1e-9 || (rotation.determinant() - 1.0).abs() > 1e-9 {
            return Err(GeomError::NotARotation);
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    /// Projects `rotation` onto SO(3) (polar decomposition) before building.
    pub fn from_approx(rotation: &Mat3, translation: Vec3) -> Self {
        Self {
            rotation: nearest_rotation(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: t,
        }
    }

    /// Rotation by `axis_angle` (Rodrigues vector) followed by `t`.
    pub fn from_axis_angle(axis_angle: Vec3, t: Vec3) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn with_translation(&self, t: Vec3) -> Self {
        Self {
            rotation: self.rotation,
            translation: t,
        }
    }

    pub fn transform(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: nearest_rotation(&(self.rotation * other.rotation)),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

/// Closest rotation in Frobenius norm, via SVD with a reflection fix.
pub fn nearest_rotation(m: &Mat3) -> Mat3 {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * vt
}

/// Pinhole intrinsics with image size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeomError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(GeomError::BadCamera("focal lengths must be positive"));
        }
        if !(0.0..width as f64).contains(&cx) || !(0.0..height as f64).contains(&cy) {
            return Err(GeomError::BadCamera("principal point outside image"));
        }
        Ok(Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Pixel of a camera-frame point (no depth check).
    pub fn pixel(&self, pc: &Vec3) -> Vec2 {
        Vec2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// Camera-frame point at `depth` along the ray through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vec3 {
        Vec3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }
}

/// Object-frame point set with its diameter (largest pairwise distance).
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud3D {
    points: Vec<Vec3>,
    diameter: f64,
}

impl PointCloud3D {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeomError> {
        if points.len() < 4 {
            return Err(GeomError::TooFewPoints(points.len()));
        }
        let diameter = max_pairwise_distance(&points);
        Ok(Self { points, diameter })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn centroid(&self) -> Vec3 {
        self.points.iter().sum::<Vec3>() / self.points.len() as f64
    }
}

/// Exact diameter. Pairs are visited in decreasing distance-from-centroid
/// order and cut off once `r_i + r_j` cannot beat the best so far.
pub fn max_pairwise_distance(points: &[Vec3]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let c = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut order: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - c).norm(), i))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut best = 0.0f64;
    for (a, &(ra, i)) in order.iter().enumerate() {
        if ra + order[0].0 <= best {
            break;
        }
        for &(rb, j) in &order[..a] {
            if ra + rb <= best {
                break;
            }
            best = best.max((points[i] - points[j]).norm());
        }
    }
    best
}

/// Pixels and camera-frame depths of `pts` under `pose`.
pub fn project(
    pose: &Pose,
    cam: &Camera,
    pts: &[Vec3],
) -> Result<(Vec<Vec2>, Vec<f64>), GeomError> {
    let mut pixels = Vec::with_capacity(pts.len());
    let mut depths = Vec::with_capacity(pts.len());
    for (index, p) in pts.iter().enumerate() {
        let pc = pose.transform(p);
        if pc.z <= MIN_DEPTH {
            return Err(GeomError::NonPositiveDepth {
                index,
                depth: pc.z,
            });
        }
        pixels.push(cam.pixel(&pc));
        depths.push(pc.z);
    }
    Ok((pixels, depths))
}

/// Object-frame points behind masked pixels, with their `(col, row)` pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Backprojection {
    pub points: Vec<Vec3>,
    pub pixels: Vec<(usize, usize)>,
}

/// Lifts every masked pixel of a row-major depth map into the object frame.
/// Pixel centres sit at integer coordinates.
pub fn backproject(
    depth: &[f64],
    mask: &[bool],
    cam: &Camera,
    pose: &Pose,
) -> Result<Backprojection, GeomError> {
    if depth.len() != cam.pixels() || mask.len() != cam.pixels() {
        return Err(GeomError::SizeMismatch);
    }
    let pixels: Vec<(usize, usize)> = (0..cam.pixels())
        .filter(|&i| mask[i])
        .map(|i| (i % cam.width, i / cam.width))
        .collect();
    if pixels.is_empty() {
        return Err(GeomError::EmptyMask);
    }
    let points = backproject_pixels(depth, cam, pose, &pixels);
    Ok(Backprojection { points, pixels })
}

/// Object-frame points for selected `(col, row)` pixels of a depth map.
pub fn backproject_pixels(
    depth: &[f64],
    cam: &Camera,
    pose: &Pose,
    pixels: &[(usize, usize)],
) -> Vec<Vec3> {
    let inv = pose.inverse();
    pixels
        .iter()
        .map(|&(c, r)| {
            let d = depth[r * cam.width + c];
            inv.transform(&cam.unproject(c as f64, r as f64, d))
        })
        .collect()
}

/// ADD (mean distance between corresponding transformed points) or, with
/// `symmetric`, ADD-S (mean distance to the closest transformed point).
pub fn add_metric(pred: &Pose, gt: &Pose, pts: &[Vec3], symmetric: bool) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    let p: Vec<Vec3> = pts.iter().map(|x| pred.transform(x)).collect();
    let g: Vec<Vec3> = pts.iter().map(|x| gt.transform(x)).collect();
    let total: f64 = if symmetric {
        p.iter()
            .map(|a| {
                g.iter()
                    .map(|b| (a - b).norm_squared())
                    .fold(f64::INFINITY, f64::min)
                    .sqrt()
            })
            .sum()
    } else {
        p.iter().zip(&g).map(|(a, b)| (a - b).norm()).sum()
    };
    total / pts.len() as f64
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_geodesic(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Rotation whose camera looks from `eye` at the origin, with `up` giving the
/// image's upward direction (camera y points down the image).
pub fn look_at(eye: &Vec3, up: &Vec3) -> Mat3 {
    let z = (-eye).normalize();
    let mut x = z.cross(up);
    if x.norm() < 1e-6 {
        x = z.cross(&Vec3::x());
        if x.norm() < 1e-6 {
            x = z.cross(&Vec3::y());
        }
    }
    let x = x.normalize();
    let y = z.cross(&x);
    // rows are the camera axes expressed in object coordinates
    Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

/// Homogeneous-coordinates reference projection used by tests.
pub fn project_homogeneous(pose: &Pose, cam: &Camera, p: &Vec3) -> (Vec2, f64) {
    let k = Matrix3::new(cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0);
    let rt = pose.to_homogeneous().fixed_view::<3, 4>(0, 0).into_owned();
    let x = k * rt * Vector4::new(p.x, p.y, p.z, 1.0);
    (Vec2::new(x.x / x.z, x.y / x.z), x.z)
}
