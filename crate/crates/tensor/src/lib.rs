//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every op applied to its [`Var`]s; [`Graph::backward`]
//! walks the tape in reverse to produce leaf gradients. Precision is a
//! property of the graph: [`Precision::Single`] rounds every intermediate to
//! `f32`, [`Precision::Double`] keeps full width for gradient checking.
//!
//! Broadcasting is limited to leading dims (`matmul`,
//! `add_leading_broadcast`); everything else needs explicit reshapes.
//!
//! Kernels are deterministic: each output element is accumulated by a single
//! task in a fixed order, so reruns are bit-identical regardless of the
//! rayon pool size.

mod error;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckFailure, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use ops::conv::{pixel_weighted_sum, Conv2dSpec};
pub use ops::nn::IGNORE_INDEX;
pub use params::{ParamStore, Parameter};
pub use tensor::{Precision, Tensor};
