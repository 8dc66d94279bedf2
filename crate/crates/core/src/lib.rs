//! Data-driven distributionally robust optimal control.
//!
//! The toolkit learns a Gaussian reference distribution for process noise
//! (stationary or state-dependent via per-dimension Gaussian processes),
//! estimates the radius of a KL-divergence ambiguity set around it with a
//! k-nearest-neighbour estimator, and then controls a plant in receding
//! horizon by minimizing
//!
//! ```text
//! min_θ  min_u  (1/θ) log E_q[exp(θ J)] + d/θ
//! ```
//!
//! The inner minimization is risk-sensitive DDP ([`risk_ddp`]); the outer
//! minimization over `θ` is a cross-entropy search ([`cem`]). Setting
//! `θ = 0` recovers the risk-neutral iLQG baseline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cem;
pub mod config;
pub mod cost;
pub mod dynamics;
pub mod error;
pub mod gp;
pub mod harness;
pub mod io;
pub mod kl_bound;
pub mod mpc;
pub mod noise;
pub mod rng;
pub mod risk_ddp;

pub use cost::{CostExpansion, QuadCost};
pub use dynamics::{Bicycle, CarControl, CarState, LinearPlant, Linearization, Plant};
pub use error::{DrocError, Result};
pub use risk_ddp::{
    backward_pass, entropic_risk_mc, forward_rollout, solve_inner, AffinePolicy, InnerSolution,
    QuadraticValue, RiskParams, SolverConfig, Trajectory,
};
