//! Minimal differentiable building blocks: layers, sequential networks and
//! optimizers.

mod layers;
mod network;
mod optim;

pub use layers::{BatchNorm2d, Cache, Conv2d, Layer, Linear, PatchExpand};
pub use network::{patch_expand, Arch, Grads, Sequential, Tape};
pub use optim::{AdamVec, Optimizer, OptimizerKind, Schedule};

#[cfg(test)]
mod tests;
