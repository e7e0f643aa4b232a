//! Desk-scale tiny-object detector playground.
//!
//! A deterministic f64 tensor engine with reverse-mode gradients, a
//! large-kernel selection backbone, a deformable-attention encoder, a
//! spatial/frequency fusion block, an NMS-free query decoder with
//! Hungarian set matching, an analytic cost profiler, and a synthetic
//! dataset + training/eval harness that exercises all of it.

pub mod error;
pub mod tensor;
pub mod fft;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod gradcheck;
pub mod oracle;

pub use error::{Error, Result};
pub use kernels::ConvSpec;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Activation, Gradients, Tape, ValueId};
pub use tensor::{ComplexTensor, Tensor};
