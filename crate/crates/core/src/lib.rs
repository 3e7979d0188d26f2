//! Dynamic token merging for ViT encoders and virtual token unmerging for
//! RoPE attention, with brute-force reference implementations and an
//! analytic attention cost model.
//!
//! - [`merge_map`]: one-hot mapping algebra between full and unique sequences.
//! - [`dtome`]: per-layer bipartite merging and size-weighted attention.
//! - [`calibrate`]: batch-level threshold finding and merge schedules.
//! - [`vit`]: seeded toy encoder with merge hooks.
//! - [`vtu`]: attention over unique tokens that reproduces full RoPE attention.
//! - [`oracle`]: expand-then-compute references.
//! - [`workbench`]: the command implementations behind the `tokmerge` binary.

pub mod calibrate;
pub mod dtome;
pub mod error;
pub mod matrix;
pub mod merge_map;
pub mod nn;
pub mod oracle;
pub mod rope;
pub mod stats;
pub mod synth;
pub mod vit;
pub mod vtu;
pub mod workbench;

pub use error::{Error, Result};
pub use matrix::TokenMatrix;
pub use merge_map::{MergeMap, SizeVector};
pub use rope::{AttentionMask, RopeAngles, RopeConfig};
