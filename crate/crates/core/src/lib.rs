//! Safe navigation for a unicycle with a lifted linear (Koopman) model,
//! conformal constraint tightening and a convex QP-based MPC.
//!
//! The numeric core (`sim_env`, `koopman`, `conformal`, `safe_sets`, `qp`,
//! `mpc`, `ref_gen`) is generic over [`Real`] (`f32` or `f64`); the
//! aliases below name the common instantiations. `harness` and the CLI
//! run in `f64`.

// `!(x > 0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformal;
pub mod error;
pub mod harness;
pub mod koopman;
pub mod mpc;
pub mod qp;
pub mod ref_gen;
pub mod safe_sets;
pub mod scalar;
pub mod sim_env;

pub use error::{Error, Result};
pub use scalar::Real;

pub type State64 = sim_env::State<f64>;
pub type State32 = sim_env::State<f32>;
pub type Control64 = sim_env::Control<f64>;
pub type Control32 = sim_env::Control<f32>;
pub type Obstacle64 = sim_env::ObstacleSpec<f64>;
pub type Obstacle32 = sim_env::ObstacleSpec<f32>;
pub type Model64 = koopman::KoopmanModel<f64>;
pub type Model32 = koopman::KoopmanModel<f32>;
pub type Calibration64 = conformal::CalibrationResult<f64>;
pub type Calibration32 = conformal::CalibrationResult<f32>;
pub type QpProblem64 = qp::QpProblem<f64>;
pub type QpProblem32 = qp::QpProblem<f32>;
pub type MpcConfig64 = mpc::MpcConfig<f64>;
pub type MpcConfig32 = mpc::MpcConfig<f32>;
pub type MpcController64 = mpc::MpcController<f64>;
pub type MpcController32 = mpc::MpcController<f32>;
