//! Dense float64 tensors with reverse-mode autodiff, Adam, seeded RNG and
//! checkpoint files. Sized for desk-scale graph models (tens of nodes).

mod adam;
mod checkpoint;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use params::{BoundParams, ParamSet};
pub use rng::{glorot_init, SeededRng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
