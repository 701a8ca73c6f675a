//! Convolutional feature extractor (coarse stride-4 map plus full-resolution
//! fine map) and 2D/3D positional encodings.

use objpose_tensor::{Graph, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use thiserror::Error;

use crate::geom::Vec3;
use crate::nn::{Conv, Linear};

pub const COARSE_STRIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("image {h}x{w} is not divisible by stride {stride}")]
    BadShape { h: usize, w: usize, stride: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub in_channels: usize,
    pub stem: usize,
    pub mid: usize,
    pub coarse_dim: usize,
    pub fine_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stem: 16,
            mid: 32,
            coarse_dim: 64,
            fine_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: FeatureConfig,
    blocks: [Conv; 4],
    fine: Conv,
}

/// Coarse map flattened to `[h·w, Ĉ]`, fine map flattened to `[H·W, C̃]`.
#[derive(Debug, Clone, Copy)]
pub struct FeaturePyramid {
    pub coarse: Var,
    pub fine: Var,
    pub coarse_size: (usize, usize),
    pub fine_size: (usize, usize),
}

impl Backbone {
    pub fn new(store: &mut ParamStore, name: &str, cfg: FeatureConfig, rng: &mut impl Rng) -> Self {
        let c = cfg;
        let blocks = [
            Conv::new(store, &format!("{name}.b1"), 3, c.in_channels, c.stem, 1, 1.0, rng),
            Conv::new(store, &format!("{name}.b2"), 3, c.stem, c.mid, 2, 1.0, rng),
            Conv::new(store, &format!("{name}.b3"), 3, c.mid, c.coarse_dim, 2, 1.0, rng),
            Conv::new(store, &format!("{name}.b4"), 3, c.coarse_dim, c.coarse_dim, 1, 0.5, rng),
        ];
        let fine = Conv::new(store, &format!("{name}.fine"), 3, c.stem, c.fine_dim, 1, 0.5, rng);
        Self { cfg, blocks, fine }
    }

    /// `image` is `[H, W, C_in]`.
    pub fn extract(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
    ) -> Result<FeaturePyramid, FeatureError> {
        let s = g.shape(image).to_vec();
        if s.len() != 3 || s[0] % COARSE_STRIDE != 0 || s[1] % COARSE_STRIDE != 0 || s[2] != self.cfg.in_channels {
            return Err(FeatureError::BadShape {
                h: s.first().copied().unwrap_or(0),
                w: s.get(1).copied().unwrap_or(0),
                stride: COARSE_STRIDE,
            });
        }
        let (h, w) = (s[0], s[1]);
        let x1 = self.blocks[0].forward(g, store, image)?;
        let x1 = g.relu(x1);
        let x2 = self.blocks[1].forward(g, store, x1)?;
        let x2 = g.relu(x2);
        let x3 = self.blocks[2].forward(g, store, x2)?;
        let x3 = g.relu(x3);
        let coarse = self.blocks[3].forward(g, store, x3)?;
        let fine = self.fine.forward(g, store, x1)?;
        let (ch, cw) = (h / COARSE_STRIDE, w / COARSE_STRIDE);
        Ok(FeaturePyramid {
            coarse: g.reshape(coarse, &[ch * cw, self.cfg.coarse_dim])?,
            fine: g.reshape(fine, &[h * w, self.cfg.fine_dim])?,
            coarse_size: (ch, cw),
            fine_size: (h, w),
        })
    }
}

/// Coarse cell containing fine pixel `u` (pixel centres at integers).
pub fn coarse_cell(u: f64) -> i64 {
    ((u + 0.5) / COARSE_STRIDE as f64).floor() as i64
}

/// Fine-pixel coordinate of a coarse cell's centre.
pub fn cell_centre(j: usize) -> f64 {
    (COARSE_STRIDE * j) as f64 + (COARSE_STRIDE as f64 - 1.0) / 2.0
}

/// `row_mix` entries that bilinearly sample a flattened `h × w` coarse map
/// at fine pixel positions.
pub fn bilinear_entries(pixels: &[(f64, f64)], size: (usize, usize)) -> Vec<(usize, usize, f64)> {
    let (h, w) = size;
    let half = (COARSE_STRIDE as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(pixels.len() * 4);
    for (k, &(u, v)) in pixels.iter().enumerate() {
        let x = ((u - half) / COARSE_STRIDE as f64).clamp(0.0, (w - 1) as f64);
        let y = ((v - half) / COARSE_STRIDE as f64).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (ax, ay) = (x - x0 as f64, y - y0 as f64);
        for (r, c, wt) in [
            (y0, x0, (1.0 - ax) * (1.0 - ay)),
            (y0, x1, ax * (1.0 - ay)),
            (y1, x0, (1.0 - ax) * ay),
            (y1, x1, ax * ay),
        ] {
            if wt != 0.0 {
                out.push((k, r * w + c, wt));
            }
        }
    }
    out
}

/// Fixed sinusoidal table `[h·w, dim]`. The first half of the channels
/// encodes the row, the second the column; inside each half channels
/// alternate `sin, cos` over geometric frequencies. Coordinates are scaled
/// to `2π · index / size`, so cell `(0, 0)` has all sines 0 and cosines 1.
pub fn sine_table_2d(h: usize, w: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "positional width must be a multiple of 4");
    let half = dim / 2;
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut data = vec![0.0; h * w * dim];
    for r in 0..h {
        for c in 0..w {
            let base = (r * w + c) * dim;
            for (offset, pos) in [(0, two_pi * r as f64 / h as f64), (half, two_pi * c as f64 / w as f64)] {
                for k in 0..half / 2 {
                    let freq = 10000f64.powf(2.0 * k as f64 / half as f64);
                    data[base + offset + 2 * k] = (pos / freq).sin();
                    data[base + offset + 2 * k + 1] = (pos / freq).cos();
                }
            }
        }
    }
    Tensor::new(&[h * w, dim], data).expect("sized above")
}

/// Adds the sinusoidal table to a flattened coarse map when `enabled`.
pub fn encode_2d(
    g: &mut Graph,
    coarse: Var,
    size: (usize, usize),
    enabled: bool,
) -> Result<Var, TensorError> {
    if !enabled {
        return Ok(coarse);
    }
    let dim = g.shape(coarse)[1];
    let table = g.constant(sine_table_2d(size.0, size.1, dim));
    g.add(coarse, table)
}

/// Three-layer MLP from object-frame xyz to the coarse width.
#[derive(Debug, Clone, Copy)]
pub struct PosEnc3D {
    layers: [Linear; 3],
}

impl PosEnc3D {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            layers: [
                Linear::new(store, &format!("{name}.l1"), 3, dim, true, 1.0, rng),
                Linear::new(store, &format!("{name}.l2"), dim, dim, true, 1.0, rng),
                Linear::new(store, &format!("{name}.l3"), dim, dim, true, 0.5, rng),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, xyz: Var) -> Result<Var, TensorError> {
        let h = self.layers[0].forward(g, store, xyz)?;
        let h = g.relu(h);
        let h = self.layers[1].forward(g, store, h)?;
        let h = g.relu(h);
        self.layers[2].forward(g, store, h)
    }

    /// Adds the encoding of `points` to `feats` when `enabled`.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        feats: Var,
        points: &[Vec3],
        enabled: bool,
    ) -> Result<Var, TensorError> {
        if !enabled {
            return Ok(feats);
        }
        let xyz = g.constant(points_tensor(points));
        let enc = self.forward(g, store, xyz)?;
        g.add(feats, enc)
    }
}

pub fn points_tensor(points: &[Vec3]) -> Tensor {
    let data = points.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    Tensor::new(&[points.len(), 3], data).expect("three columns")
}
