//! Desk-scale anchor-free object detector: a small residual backbone with
//! global-context attention, an FPN neck, a scale-equalizing pyramid
//! convolution head, FCOS-style assignment, focal/center-ness/CIoU losses,
//! COCO-protocol evaluation, and a self-contained reverse-mode tensor
//! library underneath.

pub mod assign;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fpn;
pub mod gc;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod loss;
pub mod model;
pub mod params;
pub mod postprocess;
pub mod sepc;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use params::{Param, ParamStore};
pub use tape::{Precision, Tape, Var};
pub use tensor::Tensor;
