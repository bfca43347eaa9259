//! Networks for `Y₀` and `Z`, their optimizer, and checkpoint persistence.

pub mod checkpoint;
mod mlp;
mod rmsprop;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use mlp::{init_mlp, mlp_apply, BoundMlp, Dense, MlpConfig, MlpParams, Mode, DEFAULT_HIDDEN};
pub use rmsprop::{rmsprop_step, RmsProp, RmsPropState};
