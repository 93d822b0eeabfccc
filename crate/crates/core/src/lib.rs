//! Detection and correction of selection bias (regression to the mean) in
//! before-after evaluations of road-safety policies.
//!
//! The library covers the full evaluation pipeline:
//!
//! * [`schema`] / [`roads`] — covariate schemas, observed road records and
//!   their aggregation into road-type cells,
//! * [`sim`] — synthetic cities with known ground-truth fatality rates for
//!   validating every estimator against truth,
//! * [`eb`] — nonparametric empirical-Bayes adjustment from the count
//!   histogram,
//! * [`model`] — the zero-truncated Poisson hierarchical log-linear model
//!   (density, analytic gradient, rate assembly),
//! * [`sampler`] — a gradient-based MCMC engine with adaptive step size and
//!   diagonal mass matrix, plus convergence diagnostics,
//! * [`weights`] — survey-weight construction and inverse-probability
//!   reweighting of retrospective observations back to the road population,
//! * [`analysis`] — reduction factors, the causal decomposition, the
//!   mirror-image diagnostic, Cramér's V, finite-population ANOVA summaries,
//!   posterior predictive checks and effect summaries.
//!
//! Numeric kernels are generic over the scalar type through [`num::Real`];
//! concrete `f64` aliases for the main data types live at the crate root.

pub mod analysis;
pub mod eb;
pub mod ingest;
pub mod model;
pub mod num;
pub mod roads;
pub mod sampler;
pub mod schema;
pub mod sim;
pub mod weights;

pub use num::Real;
pub use schema::{CovariateSchema, InteractionPolicy, SchemaError};

/// Scalar type used by the command-line pipeline and the file formats.
pub type Scalar = f64;

/// `f64` road record as produced by CSV ingestion.
pub type RoadRecordF = roads::RoadRecord<f64>;
/// `f64` road-type cell.
pub type TypeCellF = roads::TypeCell<f64>;
/// `f64` synthetic city.
pub type SimCityF = sim::SimCity<f64>;
/// `f64` model specification.
pub type ModelSpecF = model::ModelSpec<f64>;
/// `f64` posterior draws.
pub type PosteriorDrawsF = sampler::PosteriorDraws<f64>;
/// `f64` decomposition ledger.
pub type DecompositionLedgerF = analysis::DecompositionLedger<f64>;
