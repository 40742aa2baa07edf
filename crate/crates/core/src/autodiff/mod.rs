//! Reverse-mode automatic differentiation with the operator set the counting
//! network needs, the Adam optimizer and a finite-difference checker.

mod conv;
mod gradcheck;
mod graph;
mod optim;
mod smw;
mod tensor;

pub use conv::{conv_output_size, Conv2dParams, ConvTranspose2dParams};
pub use gradcheck::{finite_difference_check, gradcheck_suite, GradFn, OpCheck, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use graph::{BatchNormStats, Graph, PadMode, PadSpec, Var};
pub use optim::{adam_step, AdamState, Parameter};
pub use smw::{decode_weights, encode_weights, read_weights, write_weights, SMW_MAGIC};
pub(crate) use smw::{write_name, Reader};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
