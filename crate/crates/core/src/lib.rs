//! Spectral and time-domain toolkit for wave equations on asymptotically
//! Euclidean metrics, discretized on a Dirichlet box.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod discretize;
pub mod estimates;
pub mod evolve;
pub mod linalg;
pub mod metric;
pub mod mourre;
pub mod nonlinear;
pub mod quadrature;
pub mod report;
pub mod scalar;
pub mod sparse;
pub mod spectral;

pub use scalar::Real;

pub type MetricField64 = metric::MetricField<f64>;
pub type Grid64 = discretize::Grid<f64>;
pub type DiscreteModel64 = discretize::DiscreteModel<f64>;
pub type SpectralData64 = spectral::SpectralData<f64>;
pub type WaveState64 = evolve::WaveState<f64>;
pub type ConjugateOperator64 = mourre::ConjugateOperator<f64>;
pub type QuadraticForm64 = nonlinear::QuadraticForm<f64>;
