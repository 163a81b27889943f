//! Two-stage commuting-time pipeline:
//!
//! 1. Estimate travel-time accessibility maps to a campus from anonymized
//!    GPS pings: ingest and project raw records ([`ingest`]), segment them
//!    into campus-bound journeys ([`trajectory`]), and smooth the labeled
//!    samples into a regular grid with adaptive-bandwidth kernel regression
//!    ([`kre`]).
//! 2. Estimate the effect of commuting time on GPA: balancing weights over
//!    a generalized propensity score or entropy constraints ([`balance`]),
//!    then weighted polynomial mixed-effects outcome models with
//!    dose-response and marginal-effect curves ([`outcome`]).
//!
//! A synthetic city with a transport network and a known dose-response
//! ([`synth`]) supplies ground truth for end-to-end verification.
//!
//! The numeric core (projection, geometry, kernel regression, descriptive
//! statistics) is generic over the scalar type through [`num::Scalar`];
//! the pipeline entry points use the `f64` aliases exported at the crate
//! root.

pub mod balance;
pub mod eb;
pub mod error;
pub mod geom;
pub mod glmm;
pub mod graph;
pub mod hashing;
pub mod ingest;
pub mod kre;
pub mod lmm;
pub mod num;
pub mod optim;
pub mod outcome;
pub mod stats;
pub mod synth;
pub mod time;
pub mod trajectory;
pub mod utm;

pub use error::{Error, Result};
pub use num::Scalar;

/// Planar point in meters, as used by the pipeline.
pub type Point2 = geom::Point2<f64>;
/// Axis-aligned rectangle in meters.
pub type Rect = geom::Rect<f64>;
/// Labeled kernel-regression sample at `f64` precision.
pub type Sample = kre::Sample<f64>;
/// Sample set backing one accessibility map.
pub type SampleSet = kre::SampleSet<f64>;
/// Regular-grid commuting-time map at `f64` precision.
pub type AccessibilityMap = kre::AccessibilityMap<f64>;
