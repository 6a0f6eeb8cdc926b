//! Training harness around `varlab-core`: run configuration, synthetic
//! corpus generation, checkpointing, the training loop, and offline
//! checkpoint inspection. The `varlab` binary is a thin CLI over this
//! library so integration tests can drive everything in-process.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod inspect;
pub mod presets;
pub mod train;
