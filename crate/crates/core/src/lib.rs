//! Recursive subspace-based predictive control.
//!
//! The crate estimates subspace predictor matrices online from closed-loop
//! data (with innovation pre-estimation to remove the feedback bias), turns
//! them into an integral-action predictive controller whose flap-saturation
//! constrained QP is solved by a partitioned Hildreth iteration, and ships a
//! scheduled LPV plant that emulates a four-flap bluff body in a wind tunnel.
//!
//! Every numeric module is generic over [`Real`] (`f32` or `f64`); the
//! aliases at the crate root fix the usual double-precision instantiation.

pub mod config;
pub mod controller;
pub mod error;
pub mod estimator;
pub mod harness;
pub mod plant;
pub mod scalar;
pub mod subspace;
pub mod synth;

pub use error::{Result, RspcError};
pub use scalar::Real;

pub type Signal = subspace::Signal<f64>;
pub type LtiRealization = subspace::LtiRealization<f64>;
pub type PredictorGains = estimator::PredictorGains<f64>;
pub type RlsState = estimator::RlsState<f64>;
pub type QpProblem = controller::QpProblem<f64>;
pub type DualSolution = controller::DualSolution<f64>;
pub type RspcController = controller::RspcController<f64>;
pub type PlantModel = plant::PlantModel<f64>;

pub type Signal32 = subspace::Signal<f32>;
pub type LtiRealization32 = subspace::LtiRealization<f32>;
pub type PredictorGains32 = estimator::PredictorGains<f32>;
pub type RlsState32 = estimator::RlsState<f32>;
pub type QpProblem32 = controller::QpProblem<f32>;
pub type DualSolution32 = controller::DualSolution<f32>;
pub type RspcController32 = controller::RspcController<f32>;
pub type PlantModel32 = plant::PlantModel<f32>;
