//! Depth-cue fusion for dynamic scenes, end to end and framework-free.
//!
//! The crate builds two per-pixel depth cues for a camera triplet: a
//! plane-sweep matching volume from the neighboring frames, and a one-hot
//! volume encoding a monocular depth estimate. A pair of cross-cue attention
//! blocks fuses them, and a soft-argmax head decodes the result into a depth
//! map. Training runs on a deterministic synthetic-scene generator, and the
//! evaluator splits every metric into overall vs. dynamic-area scores so the
//! moving-object failure mode of pure multi-view matching stays visible.
//!
//! Module map:
//! - [`tensor`], [`kernels`], [`tape`], [`store`], [`gradcheck`]: dense
//!   tensors, the reverse-mode tape, parameter storage, and the
//!   finite-difference harness.
//! - [`geometry`]: intrinsics, rigid poses, inverse-depth hypothesis sets,
//!   plane-sweep warping.
//! - [`volumes`]: SSIM matching volumes and one-hot depth volumes.
//! - [`fusion`]: the cross-cue fusion module, its ablation variants, and the
//!   depth head.
//! - [`losses`]: scale-invariant log loss, virtual normal loss, and their
//!   combination.
//! - [`synthdata`]: the synthetic dynamic-scene generator.
//! - [`eval`]: depth metrics, masked evaluation, dynamic-mask estimation.
//! - [`optim`], [`train`], [`pipeline`]: Adam, the training loop, and the
//!   shared sample-to-depth forward path.
//! - [`viz`]: PNG rendering of depth maps, error maps, and masks.

pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod store;
pub mod synthdata;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod viz;
pub mod volumes;

pub use error::{CueError, Result};
