//! Training-time 2D semantics assistance for 3D visual grounding at desk scale:
//! synthetic scenes and queries, a masked multi-modal fusion transformer,
//! its losses, training loop, evaluation and ablation protocols.

pub mod ablation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod embeddings;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod params;
pub mod projection2d;
pub mod real;
pub mod rng;
pub mod scene_synth;
pub mod tensor;
pub mod training;

pub use error::{Result, SatError};
pub use real::{Precision, Real};
