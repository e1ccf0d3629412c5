pub mod autodiff;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod instance_decoder;
pub mod io;
pub mod kernels;
pub mod losses;
pub mod mask_decoder;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod rle;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod tracker;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{AdamW, ParamId, ParamStore};
pub use tensor::{DType, Tensor};
