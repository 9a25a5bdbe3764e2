//! Tensor engine: parameter storage, differentiable ops, the reverse-mode
//! tape, and optimizers. Everything runs on f32 NCHW arrays on the CPU with
//! deterministic iteration order.

pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use ops::ConvSpec;
pub use optim::{name_has_prefix, Optimizer};
pub use params::{Initializer, ParamId, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
