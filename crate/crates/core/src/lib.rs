//! Fully automatic X-ray to CT registration initialization, at desk scale.
//!
//! The crate reproduces a landmark-driven initialization pipeline on
//! procedural CT phantoms:
//!
//! 1. **geometry** – pinhole C-arm model, rigid poses, projection, pose sampling and error metrics.
//! 2. **volume** – voxel volumes, phantom generation, bone masking, surface extraction.
//! 3. **drr** – CPU raycasting renderer with several generator styles.
//! 4. **augment** – randomized nine-stage post-processing of rendered images.
//! 5. **detect** – landmark detector interface and a simulated, view-dependent detector.
//! 6. **refine** – ray backprojection, pairwise-midpoint clustering, surface snapping, error tables.
//! 7. **pnp** – DLT + Levenberg-Marquardt PnP with pose-dependent landmark weights.
//! 8. **register** – NCC similarity and staged derivative-free intensity registration.
//! 9. **harness** – experiment orchestration, sweeps and reports.
//!
//! Data-parallel loops (pixels, poses, trials) run on rayon when the
//! `parallel` feature is enabled and fall back to plain iterators otherwise.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod detect;
pub mod drr;
pub mod exec;
pub mod geometry;
pub mod harness;
pub mod pnp;
pub mod refine;
pub mod register;
pub mod rng;
pub mod volume;

pub use exec::Execution;

/// Schema version stamped into every file this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
