//! Canopy height estimation: a small reverse-mode autodiff engine, the U-Net and
//! hybrid ViT height models with their losses, the GEDI/Sentinel data pipeline and
//! the evaluation metric suite.

pub mod autodiff;
pub mod datapipe;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod train;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod unet;
pub mod vit;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use nn::{Graph, Mode};
pub use params::ParamSet;
pub use tensor::{DType, Float, Tensor};
