pub mod attention;
pub mod audio;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod noise;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod se_net;
pub mod sid_net;
pub mod tensor;
pub mod train;

pub use autodiff::{grad_check, grad_check_report, GradCheckReport, Conv2dSpec, Gradients, PadMode, PoolMode, Tape, Var};
pub use error::TensorError;
pub use tensor::{Real, Tensor};
