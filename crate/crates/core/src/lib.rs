//! One-shot object pose estimation by matching query pixels to a template
//! point cloud, solving PnP and refining translation with a learned head.

pub mod geom;
pub mod synth;
pub mod features;
pub mod nn;
pub mod matching;
pub mod iolayer;
pub mod pnp;
pub mod refine3d;
pub mod model;
pub mod data;
pub mod train;
pub mod eval;
