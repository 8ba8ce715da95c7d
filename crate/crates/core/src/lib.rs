//! Cooperative V2V LiDAR perception with simulation-to-reality adaptation.
//!
//! The pipeline projects every connected vehicle's point cloud into the ego
//! frame, encodes each cloud into a bird's-eye-view pillar feature map, fuses the
//! stacked maps with an uncertainty-gated local/global windowed transformer, and
//! detects vehicles with a single-stage head. Domain discriminators behind
//! gradient reversal align simulated and real features during training.
//!
//! Model math is generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification); the aliases below name the two concrete variants.

pub mod afa;
pub mod container;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod params;
pub mod pillars;
pub mod scalar;
pub mod scenario;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod uvit;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use model::{Model32, Model64, ModelConfig, S2rModel};
pub use params::{Ctx, Init, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use trainer::TrainConfig;
