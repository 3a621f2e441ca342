//! Low-rank continual segmentation with a 3D pyramid vision transformer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod engine;
pub mod error;
pub mod fusion;
mod linalg;
pub mod lora;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod pvt;
pub mod reference;
pub mod report;
pub mod scenario;
pub mod seed;
pub mod synth;
pub mod tensor;

pub use autodiff::{Conv3dGeom, Tape, Var};
pub use engine::{Adaptation, ModelState, TaskSpec};
pub use error::{CheckpointError, Error, Result};
pub use lora::{LoraConv3d, LoraLinear, LoraPair};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Graph, ParamGroup, ParamId, ParamStore, TaskId};
pub use pvt::{PvtConfig, PvtModel};
pub use tensor::Tensor;
