//! Point-cloud sequence modeling on CPU.
//!
//! Raw clouds are grouped into patches (farthest point sampling + kNN),
//! embedded by a small shared-MLP encoder, serialized into 1D token
//! sequences along space-filling curves or per-axis sorts, and encoded by a
//! stack of selective state-space (Mamba-style) blocks with a sparsely
//! inserted latent-attention block. Pretraining denoises masked token
//! features with a conditional diffusion head.
//!
//! Everything runs on a small reverse-mode autodiff substrate in
//! [`autodiff`] over `f64` [`Tensor`]s.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod nn;
pub mod optim;
pub mod params;
pub mod patch;
pub mod pointcloud;
pub mod rng;
pub mod serialization;
pub mod ssm;
pub mod tensor;

pub use autodiff::{Graph, Padding, Var};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tensor::Tensor;
