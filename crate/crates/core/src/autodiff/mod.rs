//! Minimal dense reverse-mode autodiff, the SIREN model and Adam.

pub mod adam;
pub mod siren;
pub mod tape;
pub mod tensor;

pub use adam::{Adam, LrSchedule};
pub use siren::{Dense, Scaling, SirenModel, SirenTapeOutput, SirenVars};
pub use tape::{normal_aware_term, relative_weight, smooth_l1, Gradients, Tape, Var};
pub use tensor::Tensor;
