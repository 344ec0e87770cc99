//! Tensor layers, networks, optimizer, gradient checking, checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layer;
pub mod network;
pub mod optim;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use layer::{LayerSpec, LayerState, Mode};
pub use network::{Gradients, Network, NetworkSpec, Trace};
pub use optim::SgdMomentum;
