//! Speech-driven lip synthesis on a synthetic corpus.
//!
//! The pipeline decomposes a talking-head clip into a speech-driven
//! implicit lip-appearance field in a canonical head pose, explicit
//! depth-based geometric warping between poses, and a residual blending
//! network, trained end to end on a procedurally generated corpus with
//! analytic ground truth.

pub mod autodiff;
pub mod compose;
pub mod error;
pub mod field;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod sync;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::{Real, Scalar};
pub use tensor::Tensor;
