//! Cylindrical fiducial markers built from cross-ratio coded quad pairs.
//!
//! The crate is organised as the processing chain it implements:
//!
//! 1. [`codec`] – cross-ratio categories, line/feature codes and the
//!    bidirectional window dictionary.
//! 2. [`generator`] – heuristic search for dictionaries whose feature-field
//!    windows are unique in both reading directions.
//! 3. [`layout`] – printable pattern geometry and the ideal 3D corner model on
//!    a cylinder.
//! 4. [`imgproc`] – downsampling, tile-based adaptive threshold, labeling and
//!    ordered border extraction.
//! 5. [`quadfit`] – quad fitting on border chains, area-coverage filtering and
//!    gradient-based sub-pixel edge refinement.
//! 6. [`assembler`] – quad pairing, marker organisation and decoding.
//! 7. [`pose`] – PnP and multi-view stereo model reconstruction.
//! 8. [`synth`] – ground-truth renderer, negative corpus and noise studies.
//! 9. [`metrics`] – precision/recall and pose jitter.
//!
//! [`detector`] ties stages 4–6 together.

// negated comparisons double as NaN rejection
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assembler;
pub mod codec;
pub mod config;
pub mod detector;
pub mod generator;
pub mod geometry;
pub mod imgproc;
pub mod layout;
pub mod metrics;
pub mod pose;
pub mod quadfit;
pub mod synth;

pub use codec::{Dictionary, Direction, FeatureCode, LineCode, MarkerCode, MarkerConfig};
pub use config::DetectorConfig;
pub use detector::Detector;
pub use geometry::{CameraIntrinsics, Line2, RigidTransform, Vec2, Vec3};
pub use imgproc::GrayImage;
