//! Synthetic scenes, scene directories, prior perturbation and PLY export.

pub mod error;
pub mod io;
pub mod perturb;
pub mod ply;
pub mod synth;

pub use error::{Result, SceneError};
pub use io::{read_geometry, read_scene, write_geometry, write_scene};
pub use perturb::{perturb_priors, Noise, PriorFile};
pub use synth::{synth_scene, GroundTruth, Layout, Scene, SynthSpec};
