//! Core library for a simulated autonomous grapevine spur-pruning pipeline.
//!
//! Synthetic dormant vines with full ground truth are scanned by a virtual
//! dual-stereo rig, registered with point-to-plane ICP, segmented into canes
//! by bud-seeded region growing, reduced to a pruning graph, and "pruned" by
//! a kinematic arm model, while a ground vehicle simulation handles row
//! navigation. Every stage reports the evaluation metrics used to judge it
//! (registration error, completeness, segmentation F1, cut-point accuracy,
//! workspace volume, TPA/TPC/TPE, navigation error, cost per acre).
//!
//! Data-parallel inner loops (per-point neighborhoods, per-view rendering,
//! Monte-Carlo sampling) run on rayon when the default `parallel` feature is
//! enabled and fall back to plain iterators without it. Results are bitwise
//! identical in both modes: work is sharded deterministically and reduced in
//! fixed order.

pub mod arm;
pub mod budmap;
pub mod cloud;
pub mod config;
pub mod cutgraph;
pub mod grid;
pub mod hull;
pub mod metrics;
pub mod nav;
pub mod obstacles;
pub(crate) mod par;
pub mod register;
pub mod rng;
pub mod segment;
pub mod synth;

pub use cloud::{Label, LabeledCloud, LocalShape, Point3, Vec3};
pub use config::ScenarioConfig;
pub use register::RigidTransform;
