//! Post-detection confidence rescoring for fire and smoke detectors.
//!
//! The crate takes raw detections from an external detector (one primary
//! pass plus optional dropout passes), measures how stable each detection is
//! across passes, scores the detected region for fire/smoke plausibility
//! (color, edge diffuseness, texture), and feeds the five resulting numbers
//! through a small learned network that produces a refined confidence.
//!
//! Alongside the rescoring path it ships six classical post-detection
//! filters for comparison, a precision/recall/AP evaluation engine, and a
//! deterministic synthetic scene generator so everything can be exercised
//! without external data.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod crn;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod imfeat;
pub mod ingest;
pub mod pipeline;
pub mod rng;
pub mod synthbench;
pub mod uncertainty;

pub use error::{Error, Result};
pub use geometry::{BoundingBox, ClassId, Detection, FIRE, SMOKE};
