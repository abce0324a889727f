//! Checkpoint persistence, pretrained-weight loading and freeze policies.

mod checkpoint;
mod freeze;
mod pretrained;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION, DTYPE_F32, DTYPE_F64,
};
pub use freeze::{apply_freeze_policy, half_layer_prefixes, FreezePolicy, FreezeVariant};
pub use pretrained::{head_params, load_pretrained, PretrainedReport};
