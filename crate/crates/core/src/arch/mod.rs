//! Model configuration, parameter store, forward pass and checkpoint container.

mod checkpoint;
mod config;
mod model;
mod state;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use config::{ModalitySpec, MomeConfig};
pub use model::*;
pub use state::{names, ModelState, Param};
