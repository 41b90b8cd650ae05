//! Fully parallel primal-dual splitting (PADPD) for separable convex programs
//! `min Σ f_i(x_i)  s.t.  Σ A_i x_i = c`, its distributed consensus variant,
//! and a direct multi-block ADMM baseline for comparison.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod cli;
pub mod distributed;
pub mod graph;
pub mod operator;
pub mod problems;
pub mod prox;
pub mod solver;
pub mod trace;

pub use operator::{build_operator, Block, BlockProblem, SplittingOperator};
pub use prox::{FunctionSpec, ProxFunction};
pub use solver::{solve, SolveOutcome, SolverConfig, StopReason};
