//! Forward-reflected-backward iteration and the PADPD solver.
//!
//! One step is
//!
//! ```text
//! Θ_k     = Π_k − 2η H(Π_k) + η H(Π_{k−1})
//! Π_{k+1} = J_{ηΦ}(Θ_k)
//! ```
//!
//! where `J_{ηΦ}` applies `prox_{ηf_i}` to each primal block and the identity
//! to the dual block. Every block of `Π_{k+1}` depends only on the snapshot
//! `(Π_k, Π_{k−1})`, so blocks can be updated in any order (or concurrently).
//! With `q = 2` the executed updates are the two-block algorithm; with `ρ = 0`
//! the penalty terms vanish and the dual couples the blocks alone.

use std::sync::Arc;

use log::warn;
use nalgebra::DVector;
use thiserror::Error;

use crate::operator::{build_operator, BlockProblem, ShapeError, SplittingOperator};
use crate::prox::ProxFunction;
use crate::trace::{IterationRecord, Trace, DIVERGENCE_THRESHOLD};

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite iterate at step {k}")]
    Divergence { k: usize, last: Box<SolverState> },
}

/// How the step size is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaPolicy {
    Explicit(f64),
    /// `η = safety / (2L)` with `L` the default Lipschitz constant of `M_ρ`.
    Auto {
        safety: f64,
    },
}

impl Default for EtaPolicy {
    fn default() -> Self {
        EtaPolicy::Auto {
            safety: DEFAULT_SAFETY,
        }
    }
}

pub const DEFAULT_SAFETY: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub eta: EtaPolicy,
    pub rho: f64,
    pub max_iter: usize,
    /// Stop once the KKT residual is at or below this value.
    pub tol: f64,
    /// Disable trace decimation.
    pub full_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            eta: EtaPolicy::default(),
            rho: 1.0,
            max_iter: 50_000,
            tol: 1e-10,
            full_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = EtaPolicy::Explicit(eta);
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    fn validate(&self) -> Result<(), SolverError> {
        if let EtaPolicy::Explicit(eta) = self.eta {
            if !(eta.is_finite() && eta > 0.0) {
                return Err(SolverError::Config(format!(
                    "eta must be positive, got {eta}"
                )));
            }
        }
        if let EtaPolicy::Auto { safety } = self.eta {
            check_safety(safety)?;
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return Err(SolverError::Config(format!(
                "rho must be nonnegative, got {}",
                self.rho
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(SolverError::Config(format!(
                "tol must be nonnegative, got {}",
                self.tol
            )));
        }
        if self.max_iter == 0 {
            return Err(SolverError::Config("max_iter must be positive".into()));
        }
        Ok(())
    }
}

fn check_safety(safety: f64) -> Result<(), SolverError> {
    if !(safety > 0.0 && safety < 1.0) {
        return Err(SolverError::Config(format!(
            "safety factor must lie in (0, 1), got {safety}"
        )));
    }
    Ok(())
}

/// `safety / (2L)`, a step inside the admissible interval `(0, 1/(2L))`.
pub fn default_eta(lipschitz: f64, safety: f64) -> Result<f64, SolverError> {
    check_safety(safety)?;
    if !(lipschitz.is_finite() && lipschitz > 0.0) {
        return Err(SolverError::Config(format!(
            "Lipschitz constant must be positive, got {lipschitz}"
        )));
    }
    Ok(safety / (2.0 * lipschitz))
}

/// Iterate pair `(Π_k, Π_{k−1})` plus the cached forward value `H(Π_{k−1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub current: DVector<f64>,
    pub previous: DVector<f64>,
    /// `H(Π_{k−1})`, reused as the reflected term of the next step.
    pub forward_previous: DVector<f64>,
    /// `Θ` of the most recent step.
    pub theta: DVector<f64>,
    pub k: usize,
}

impl SolverState {
    /// Evaluates `H(Π_{−1})` once; each subsequent step costs one more `H`.
    pub fn new(
        op: &SplittingOperator,
        current: DVector<f64>,
        previous: DVector<f64>,
    ) -> Result<Self, ShapeError> {
        if current.len() != op.dim() {
            return Err(ShapeError::Length {
                expected: op.dim(),
                got: current.len(),
            });
        }
        let forward_previous = op.apply(&previous)?;
        let theta = DVector::zeros(op.dim());
        Ok(Self {
            current,
            previous,
            forward_previous,
            theta,
            k: 0,
        })
    }

    pub fn zeros(op: &SplittingOperator) -> Self {
        let z = DVector::zeros(op.dim());
        Self::new(op, z.clone(), z).expect("dimensions match by construction")
    }
}

/// One FRB step with blocks updated in natural order.
pub fn frb_step(
    state: &mut SolverState,
    op: &SplittingOperator,
    resolvent: &[Arc<dyn ProxFunction>],
    eta: f64,
) -> Result<(), SolverError> {
    let order: Vec<usize> = (0..=resolvent.len()).collect();
    frb_step_ordered(state, op, resolvent, eta, &order)
}

/// One FRB step updating the `q + 1` blocks in the given order. Index `q`
/// is the dual block. Each block reads only the snapshot, so the result does
/// not depend on `order`.
pub fn frb_step_ordered(
    state: &mut SolverState,
    op: &SplittingOperator,
    resolvent: &[Arc<dyn ProxFunction>],
    eta: f64,
    order: &[usize],
) -> Result<(), SolverError> {
    let layout = op.layout();
    let q = layout.num_blocks();
    if resolvent.len() != q {
        return Err(SolverError::Config(format!(
            "resolvent has {} blocks, operator has {q}",
            resolvent.len()
        )));
    }
    let mut seen = vec![false; q + 1];
    for &b in order {
        if b > q || std::mem::replace(&mut seen[b], true) {
            return Err(SolverError::Config(format!(
                "invalid block order {order:?}"
            )));
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(SolverError::Config(format!(
            "block order {order:?} misses blocks"
        )));
    }
    if !(eta.is_finite() && eta > 0.0) {
        return Err(SolverError::Config(format!(
            "eta must be positive, got {eta}"
        )));
    }

    let forward = op.apply(&state.current)?;
    let mut theta = DVector::zeros(op.dim());
    let mut next = DVector::zeros(op.dim());
    for &b in order {
        let seg = layout.segment(b);
        for i in seg.clone() {
            theta[i] = state.current[i] - 2.0 * eta * forward[i] + eta * state.forward_previous[i];
        }
        if theta
            .rows(seg.start, seg.len())
            .iter()
            .any(|v| !v.is_finite())
        {
            return Err(SolverError::Divergence {
                k: state.k,
                last: Box::new(state.clone()),
            });
        }
        if b < q {
            resolvent[b].prox_into(
                &theta.as_slice()[seg.clone()],
                eta,
                &mut next.as_mut_slice()[seg],
            );
        } else {
            next.rows_mut(seg.start, seg.len())
                .copy_from(&theta.rows(seg.start, seg.len()));
        }
    }
    state.previous = std::mem::replace(&mut state.current, next);
    state.forward_previous = forward;
    state.theta = theta;
    state.k += 1;
    Ok(())
}

/// `max(‖ΣA_i x_i − c‖, max_i ‖x_i − prox_{f_i}(x_i − A_iᵀ(y + ρ(ΣA_j x_j − c)))‖)`.
///
/// Zero exactly at KKT points of the augmented Lagrangian.
pub fn kkt_residual(
    problem: &BlockProblem,
    pi: &DVector<f64>,
    rho: f64,
) -> Result<f64, ShapeError> {
    let layout = problem.layout();
    if pi.len() != layout.total() {
        return Err(ShapeError::Length {
            expected: layout.total(),
            got: pi.len(),
        });
    }
    let r = problem.constraint_residual(&pi.as_slice()[layout.primal()]);
    let y = pi.rows(layout.dual().start, layout.dual().len());
    let shifted = y + &r * rho;
    let mut worst = r.norm();
    for (i, b) in problem.blocks().iter().enumerate() {
        let seg = layout.block(i);
        let xi = pi.rows(seg.start, seg.len());
        let g = b.matrix.tr_mul(&shifted);
        let point = xi - &g;
        let p = b.function.prox(point.as_slice(), 1.0);
        let gap = xi
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(gap);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Converged,
    MaxIter,
    Diverged,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::Converged => "converged",
            StopReason::MaxIter => "max_iter",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub state: SolverState,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    pub eta: f64,
    /// Lipschitz constant used for the step-size check.
    pub lipschitz: f64,
    pub rho: f64,
    pub kkt_residual: f64,
    pub primal_dim: usize,
}

impl SolveOutcome {
    pub fn primal(&self) -> DVector<f64> {
        self.state.current.rows(0, self.primal_dim).clone_owned()
    }

    pub fn dual(&self) -> DVector<f64> {
        let n = self.state.current.len();
        self.state
            .current
            .rows(self.primal_dim, n - self.primal_dim)
            .clone_owned()
    }

    pub fn final_error(&self) -> f64 {
        self.records.last().map(|r| r.error).unwrap_or(f64::NAN)
    }
}

pub(crate) fn record(problem: &BlockProblem, k: usize, pi: &DVector<f64>) -> IterationRecord {
    let layout = problem.layout();
    let primal = &pi.as_slice()[layout.primal()];
    let objective = problem.objective(primal);
    IterationRecord {
        k,
        error: primal.iter().map(|v| v * v).sum::<f64>().sqrt(),
        primal_residual: problem.constraint_residual(primal).norm(),
        dual_norm: pi.rows(layout.dual().start, layout.dual().len()).norm(),
        objective: objective.is_finite().then_some(objective),
    }
}

/// Runs PADPD from `init = (Π_0, Π_{−1})` (zeros if absent) until the KKT
/// residual drops to `config.tol`, the iterate diverges, or `max_iter` steps.
pub fn solve(
    problem: &BlockProblem,
    config: &SolverConfig,
    init: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<SolveOutcome, SolverError> {
    config.validate()?;
    let op = build_operator(problem, config.rho)?;
    let lipschitz = op.lipschitz();
    let eta = match config.eta {
        EtaPolicy::Explicit(eta) => eta,
        EtaPolicy::Auto { safety } => default_eta(lipschitz, safety)?,
    };
    if eta >= 1.0 / (2.0 * lipschitz) {
        warn!(
            "eta = {eta} is outside the admissible interval (0, {}) for L = {lipschitz}; convergence is not guaranteed",
            1.0 / (2.0 * lipschitz)
        );
    }
    let mut state = match init {
        Some((p0, pm1)) => {
            if pm1.len() != op.dim() {
                return Err(ShapeError::Length {
                    expected: op.dim(),
                    got: pm1.len(),
                }
                .into());
            }
            SolverState::new(&op, p0, pm1)?
        }
        None => SolverState::zeros(&op),
    };
    let resolvent: Vec<Arc<dyn ProxFunction>> = problem
        .blocks()
        .iter()
        .map(|b| b.function.clone())
        .collect();

    let mut trace = Trace::new(config.full_trace);
    let first = record(problem, 0, &state.current);
    let mut residual = kkt_residual(problem, &state.current, config.rho)?;
    let mut stop = if residual <= config.tol {
        Some(StopReason::Converged)
    } else {
        None
    };
    trace.push(first);

    while stop.is_none() {
        if state.k >= config.max_iter {
            stop = Some(StopReason::MaxIter);
            break;
        }
        match frb_step(&mut state, &op, &resolvent, eta) {
            Ok(()) => {}
            Err(SolverError::Divergence { .. }) => {
                stop = Some(StopReason::Diverged);
                break;
            }
            Err(e) => return Err(e),
        }
        let rec = record(problem, state.k, &state.current);
        let diverged = !rec.is_finite() || rec.error > DIVERGENCE_THRESHOLD;
        trace.push(rec);
        if diverged {
            stop = Some(StopReason::Diverged);
            break;
        }
        residual = kkt_residual(problem, &state.current, config.rho)?;
        if residual <= config.tol {
            stop = Some(StopReason::Converged);
        }
    }

    Ok(SolveOutcome {
        state,
        records: trace.finish(),
        stop: stop.unwrap_or(StopReason::MaxIter),
        eta,
        lipschitz,
        rho: config.rho,
        kkt_residual: residual,
        primal_dim: problem.primal_dim(),
    })
}
