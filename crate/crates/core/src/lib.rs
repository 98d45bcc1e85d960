//! Parallel spatial-channel attention (RALA) and cascaded dual-view attention
//! (DVCA) blocks for multimodal feature fusion, built on a small dense tensor
//! library with reverse-mode automatic differentiation.
//!
//! The crate is generic over the scalar type ([`Scalar`]: `f32` or `f64`).
//! Double precision is the reference: finite-difference verification and the
//! exactness properties of the transforms are stated for `f64`. The aliases at
//! the crate root name the concrete `f64` and `f32` instantiations.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod dvca;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod network;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rala;
pub mod scalar;
pub mod tensor;
pub mod transforms;

pub use autodiff::{Gradients, Graph, Mode, Tape, Var};
pub use config::{Components, ModelConfig, Modules, Wiring};
pub use dvca::{Dvca, Hysfa, Mmmua};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use kernels::{ConvGeometry, ConvKind, PoolKind};
pub use optim::{Adam, AdamConfig};
pub use network::{count_layers, count_params_macs, mml_loss, Cost, HypcaNet, LayerSpec};
pub use params::{Init, ParamId, ParamStore, Parameter};
pub use rala::{Rala, Scala, Scpfa};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
pub use transforms::{WaveletBands, WindowLayout, WindowTokens};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type ParamStore64 = ParamStore<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type Graph64<'p> = Graph<'p, f64>;
