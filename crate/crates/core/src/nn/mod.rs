//! Minimal neural-network toolkit: tape autograd, parameter stores and
//! pre-norm transformer stacks.

pub mod optim;
pub mod params;
pub mod tape;
pub mod transformer;

pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Mat, Tape, Var};
