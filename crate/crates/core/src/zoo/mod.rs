//! Block variants, architecture layouts, built models and checkpoints.

mod arch;
mod block;
pub mod checkpoint;
mod model;

pub use arch::{known_arch_names, resolve_layer_alias, ArchSpec};
pub use block::{make_block, BlockKind, BlockPlan, BlockSpec, ConvPlan, ConvRole};
pub use model::{Block, BlockCache, ConvBn, ForwardCache, Gradients, Model, TensorRole};
