//! Differentiable compute core: arrays, tape autodiff, layers, AdamW, RNG.

pub mod array;
pub mod attention;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;

pub use array::RealArray;
pub use attention::{AttnLayout, AttnSegment, SegmentMask};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use optim::{adamw_step, scheduled_lr, OptimizerState};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use rng::{Rng, RngState};
pub use tape::{Tape, Var};
