//! Dense tensor math with reverse-mode gradients.

pub mod gradcheck;
pub mod init;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use ops::{attention, cross_entropy, dropout, layer_norm, linear, softmax, Mode};
pub use tape::{AnnotatorReduction, CeRow, Gradients, L1Row, Tape, Var};
pub use tensor::{argmax, rank_descending, Tensor};
