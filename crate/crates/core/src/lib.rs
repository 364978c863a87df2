//! Recursively recurrent neural network (R2N2) superstructures for
//! learning iterative solvers, with the classical baselines they are
//! measured against.
//!
//! The crate is organized bottom-up: [`linalg`] and [`problems`] supply
//! dense linear algebra and the three problem families, [`superstructure`]
//! runs the network forward, [`autodiff`] differentiates a rollout,
//! [`training`] fits parameters with Adam, [`baselines`] holds GMRES,
//! Newton–Krylov and Runge–Kutta, and [`analysis`] turns trained networks
//! into comparable numbers. [`experiments`] wires them into the named
//! presets used by the command-line tool.

pub mod analysis;
pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod problems;
pub mod rng;
pub mod superstructure;
pub mod training;

pub use error::{Error, Result};
pub use linalg::{DenseMatrix, DenseVector};
pub use problems::{Dataset, ProblemFunction, ProblemInstance};
pub use superstructure::{LayerMode, ParameterGradient, R2N2Config, R2N2Parameters, RolloutTrace};
