//! Consensus optimization over a graph.
//!
//! `min Σ_i f_i(s)` over agents `i = 1..m` is lifted to
//! `min Σ_i f_i(x_i)  s.t.  (I − W) x = 0` with `W = 𝒲 ⊗ I_n`. Running the
//! ρ = 0 PADPD iteration on that problem gives a fully local update: agent
//! `i` needs only `x_j, y_j` of its neighbours `j ∈ 𝒩_i ∪ {i}` from the two
//! most recent rounds. Since `‖I − W‖₁, ‖I − W‖∞ ≤ 2` for every doubly
//! stochastic `𝒲`, `L = 2` and any `η ∈ (0, 1/4)` is admissible regardless of
//! the graph.

use std::fmt;
use std::sync::Arc;

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

use crate::graph::Graph;
use crate::operator::{Block, BlockProblem, ShapeError};
use crate::prox::{ProxFunction, SeparableSum};
use crate::solver::StopReason;
use crate::trace::{IterationRecord, Trace, DIVERGENCE_THRESHOLD};

pub const WEIGHT_TOL: f64 = 1e-10;

/// Admissible step sizes, independent of the graph.
pub const ETA_INTERVAL: (f64, f64) = (0.0, 0.25);

#[derive(Debug, Clone, PartialEq)]
pub enum WeightViolation {
    NotSquare {
        rows: usize,
        cols: usize,
    },
    SizeMismatch {
        weights: usize,
        nodes: usize,
    },
    NotSymmetric {
        max_asymmetry: f64,
    },
    RowSums {
        max_deviation: f64,
    },
    ColumnSums {
        max_deviation: f64,
    },
    Negative {
        i: usize,
        j: usize,
        value: f64,
    },
    /// `𝒲_ij ≠ 0` but `i` and `j` are not adjacent.
    Pattern {
        i: usize,
        j: usize,
    },
    /// `λ₂(I − 𝒲)` is not positive.
    Disconnected {
        lambda2: f64,
    },
}

impl fmt::Display for WeightViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotSquare { rows, cols } => {
                write!(f, "weight matrix is {rows}x{cols}, not square")
            }
            Self::SizeMismatch { weights, nodes } => {
                write!(
                    f,
                    "weight matrix has {weights} rows but the graph has {nodes} nodes"
                )
            }
            Self::NotSymmetric { max_asymmetry } => {
                write!(
                    f,
                    "weights are not symmetric (max |W_ij − W_ji| = {max_asymmetry:e})"
                )
            }
            Self::RowSums { max_deviation } => {
                write!(
                    f,
                    "weights are not doubly stochastic (row sums off by {max_deviation:e})"
                )
            }
            Self::ColumnSums { max_deviation } => {
                write!(
                    f,
                    "weights are not doubly stochastic (column sums off by {max_deviation:e})"
                )
            }
            Self::Negative { i, j, value } => write!(f, "negative weight W[{i}][{j}] = {value}"),
            Self::Pattern { i, j } => {
                write!(
                    f,
                    "W[{i}][{j}] is nonzero but nodes {i} and {j} are not adjacent"
                )
            }
            Self::Disconnected { lambda2 } => {
                write!(f, "graph is not connected: λ₂(I − W) = {lambda2:e}")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightReport {
    /// `λ₂(I − 𝒲)`, `None` when the matrix is not square or not symmetric.
    pub lambda2: Option<f64>,
    pub violations: Vec<WeightViolation>,
}

impl WeightReport {
    pub fn passes(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn is_connected(&self) -> bool {
        !self
            .violations
            .iter()
            .any(|v| matches!(v, WeightViolation::Disconnected { .. }))
    }
}

impl fmt::Display for WeightReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passes() {
            return write!(
                f,
                "weights valid (λ₂ = {:e})",
                self.lambda2.unwrap_or(f64::NAN)
            );
        }
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

/// Checks symmetry, double stochasticity, nonnegativity, consistency with the
/// graph and `λ₂(I − 𝒲) > 0`.
pub fn validate_weights(weights: &DMatrix<f64>, graph: &Graph) -> WeightReport {
    let (rows, cols) = weights.shape();
    let mut violations = Vec::new();
    if rows != cols {
        violations.push(WeightViolation::NotSquare { rows, cols });
        return WeightReport {
            lambda2: None,
            violations,
        };
    }
    if rows != graph.nodes() {
        violations.push(WeightViolation::SizeMismatch {
            weights: rows,
            nodes: graph.nodes(),
        });
        return WeightReport {
            lambda2: None,
            violations,
        };
    }
    let m = rows;
    let asym = (weights - weights.transpose()).amax();
    if asym > WEIGHT_TOL {
        violations.push(WeightViolation::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    let row_dev = weights
        .row_iter()
        .map(|r| (r.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    if row_dev > WEIGHT_TOL {
        violations.push(WeightViolation::RowSums {
            max_deviation: row_dev,
        });
    }
    let col_dev = weights
        .column_iter()
        .map(|c| (c.sum() - 1.0).abs())
        .fold(0.0, f64::max);
    if col_dev > WEIGHT_TOL {
        violations.push(WeightViolation::ColumnSums {
            max_deviation: col_dev,
        });
    }
    for i in 0..m {
        for j in 0..m {
            let w = weights[(i, j)];
            if w < 0.0 {
                violations.push(WeightViolation::Negative { i, j, value: w });
            }
            if i != j && w != 0.0 && !graph.has_edge(i, j) {
                violations.push(WeightViolation::Pattern { i, j });
            }
        }
    }
    let lambda2 = if asym <= WEIGHT_TOL {
        let sym = (weights + weights.transpose()) * 0.5;
        let lap = DMatrix::identity(m, m) - sym;
        let mut eig: Vec<f64> = SymmetricEigen::new(lap)
            .eigenvalues
            .iter()
            .copied()
            .collect();
        eig.sort_by(f64::total_cmp);
        // A single agent is trivially connected.
        let l2 = eig.get(1).copied().unwrap_or(f64::INFINITY);
        if !(l2 > WEIGHT_TOL) {
            violations.push(WeightViolation::Disconnected { lambda2: l2 });
        }
        Some(l2)
    } else {
        None
    };
    WeightReport {
        lambda2,
        violations,
    }
}

/// `𝒲_ij = 1 / (1 + max(deg_i, deg_j))` on edges, diagonal fills each row to 1.
pub fn metropolis_weights(graph: &Graph) -> DMatrix<f64> {
    let m = graph.nodes();
    let mut w = DMatrix::zeros(m, m);
    for (i, j) in graph.edges() {
        let v = 1.0 / (1.0 + graph.degree(i).max(graph.degree(j)) as f64);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    for i in 0..m {
        let off: f64 = (0..m).filter(|&j| j != i).map(|j| w[(i, j)]).sum();
        w[(i, i)] = 1.0 - off;
    }
    w
}

#[derive(Debug, Error)]
pub enum DistributedError {
    #[error("weight assumptions violated: {0}")]
    Assumption(WeightReport),
    #[error("agent {agent}: cost has dimension {dim}, expected {expected}")]
    Dimension {
        agent: usize,
        dim: usize,
        expected: usize,
    },
    #[error("expected {expected} agent costs, got {got}")]
    AgentCount { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone)]
pub struct ConsensusProblem {
    weights: DMatrix<f64>,
    graph: Graph,
    costs: Vec<Arc<dyn ProxFunction>>,
    local_dim: usize,
}

impl ConsensusProblem {
    pub fn new(
        weights: DMatrix<f64>,
        graph: Graph,
        costs: Vec<Arc<dyn ProxFunction>>,
        local_dim: usize,
    ) -> Result<Self, DistributedError> {
        let report = validate_weights(&weights, &graph);
        if !report.passes() {
            return Err(DistributedError::Assumption(report));
        }
        if costs.len() != graph.nodes() {
            return Err(DistributedError::AgentCount {
                expected: graph.nodes(),
                got: costs.len(),
            });
        }
        for (agent, f) in costs.iter().enumerate() {
            if f.dimension() != local_dim {
                return Err(DistributedError::Dimension {
                    agent,
                    dim: f.dimension(),
                    expected: local_dim,
                });
            }
        }
        Ok(Self {
            weights,
            graph,
            costs,
            local_dim,
        })
    }

    /// Metropolis weights on `graph`.
    pub fn with_metropolis(
        graph: Graph,
        costs: Vec<Arc<dyn ProxFunction>>,
        local_dim: usize,
    ) -> Result<Self, DistributedError> {
        Self::new(metropolis_weights(&graph), graph, costs, local_dim)
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn costs(&self) -> &[Arc<dyn ProxFunction>] {
        &self.costs
    }

    pub fn agents(&self) -> usize {
        self.graph.nodes()
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    /// `I_{mn} − 𝒲 ⊗ I_n`.
    pub fn disagreement_matrix(&self) -> DMatrix<f64> {
        let (m, n) = (self.agents(), self.local_dim);
        let big = self.weights.kronecker(&DMatrix::<f64>::identity(n, n));
        DMatrix::identity(m * n, m * n) - big
    }

    /// The lifted single-block problem `min f(x)  s.t.  (I − W)x = 0`.
    pub fn lifted(&self) -> BlockProblem {
        let a = self.disagreement_matrix();
        let c = DVector::zeros(a.nrows());
        let f: Arc<dyn ProxFunction> = Arc::new(SeparableSum::new(self.costs.clone()));
        BlockProblem::new(vec![Block::new(a, f)], c).expect("lifted dimensions are consistent")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variable {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lag {
    /// Round `k`.
    Current,
    /// Round `k − 1`.
    Previous,
}

/// One read performed by an agent during a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub round: usize,
    pub reader: usize,
    pub source: usize,
    pub variable: Variable,
    pub lag: Lag,
}

#[derive(Debug, Clone, Default)]
pub struct AccessLog {
    pub entries: Vec<Access>,
}

impl AccessLog {
    /// Reads of agents outside `𝒩_i ∪ {i}`.
    pub fn violations(&self, graph: &Graph) -> Vec<Access> {
        self.entries
            .iter()
            .filter(|a| a.reader != a.source && !graph.has_edge(a.reader, a.source))
            .copied()
            .collect()
    }
}

/// Values exchanged at a round boundary: `x, y` at rounds `k` and `k − 1`.
#[derive(Debug, Clone, PartialEq)]
struct RoundSnapshot {
    x: Vec<DVector<f64>>,
    x_prev: Vec<DVector<f64>>,
    y: Vec<DVector<f64>>,
    y_prev: Vec<DVector<f64>>,
}

/// What agent `i` can see of the snapshot; every read goes through here.
struct NeighborView<'a> {
    round: usize,
    agent: usize,
    snapshot: &'a RoundSnapshot,
    log: Option<&'a mut AccessLog>,
}

impl NeighborView<'_> {
    fn read(&mut self, source: usize, variable: Variable, lag: Lag) -> &DVector<f64> {
        if let Some(log) = self.log.as_deref_mut() {
            log.entries.push(Access {
                round: self.round,
                reader: self.agent,
                source,
                variable,
                lag,
            });
        }
        let s = self.snapshot;
        match (variable, lag) {
            (Variable::X, Lag::Current) => &s.x[source],
            (Variable::X, Lag::Previous) => &s.x_prev[source],
            (Variable::Y, Lag::Current) => &s.y[source],
            (Variable::Y, Lag::Previous) => &s.y_prev[source],
        }
    }
}

/// One agent's round:
///
/// ```text
/// x̂_i    = x_i + (η y_i⁻ − 2η y_i) − Σ_{j∈𝒩_i∪{i}} 𝒲_ij (η y_j⁻ − 2η y_j)
/// x_i⁺   = prox_{ηf_i}(x̂_i)
/// y_i⁺   = y_i + (2η x_i − η x_i⁻) − Σ_{j∈𝒩_i∪{i}} 𝒲_ij (2η x_j − η x_j⁻)
/// ```
fn agent_update(
    problem: &ConsensusProblem,
    view: &mut NeighborView<'_>,
    eta: f64,
) -> (DVector<f64>, DVector<f64>) {
    let i = view.agent;
    let reflected = |cur: &DVector<f64>, prev: &DVector<f64>| cur * (2.0 * eta) - prev * eta;

    let yi = view.read(i, Variable::Y, Lag::Current).clone();
    let yi_prev = view.read(i, Variable::Y, Lag::Previous).clone();
    let xi = view.read(i, Variable::X, Lag::Current).clone();
    let xi_prev = view.read(i, Variable::X, Lag::Previous).clone();

    let mut x_hat = &xi - reflected(&yi, &yi_prev);
    let mut y_next = &yi + reflected(&xi, &xi_prev);

    let closed: Vec<usize> = std::iter::once(i)
        .chain(problem.graph.neighbors(i).iter().copied())
        .collect();
    for j in closed {
        let w = problem.weights[(i, j)];
        let yj = view.read(j, Variable::Y, Lag::Current).clone();
        let yj_prev = view.read(j, Variable::Y, Lag::Previous).clone();
        x_hat += reflected(&yj, &yj_prev) * w;
        let xj = view.read(j, Variable::X, Lag::Current).clone();
        let xj_prev = view.read(j, Variable::X, Lag::Previous).clone();
        y_next -= reflected(&xj, &xj_prev) * w;
    }

    let x_next = DVector::from_vec(problem.costs[i].prox(x_hat.as_slice(), eta));
    (x_next, y_next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusConfig {
    pub eta: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub full_trace: bool,
    /// Keep the stacked `col{x, y}` of every round.
    pub keep_history: bool,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self {
            eta: default_consensus_eta(),
            max_iter: 50_000,
            tol: 1e-10,
            full_trace: false,
            keep_history: false,
        }
    }
}

/// `0.9 · 1/4`.
pub fn default_consensus_eta() -> f64 {
    0.9 * ETA_INTERVAL.1
}

#[derive(Debug, Clone)]
pub struct ConsensusOutcome {
    pub x: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    /// Stacked `col{x_1, …, x_m, y_1, …, y_m}` for rounds `0..=k`, if requested.
    pub history: Vec<DVector<f64>>,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    pub rounds: usize,
    pub eta: f64,
    pub kkt_residual: f64,
}

impl ConsensusOutcome {
    /// Mean of the agents' local copies.
    pub fn average(&self) -> DVector<f64> {
        let m = self.x.len() as f64;
        self.x
            .iter()
            .fold(DVector::zeros(self.x[0].len()), |acc, v| acc + v)
            / m
    }

    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.x, &self.y)
    }
}

fn stack(x: &[DVector<f64>], y: &[DVector<f64>]) -> DVector<f64> {
    let parts: Vec<f64> = x.iter().chain(y).flat_map(|v| v.iter().copied()).collect();
    DVector::from_vec(parts)
}

fn split(v: &DVector<f64>, m: usize, n: usize) -> Vec<DVector<f64>> {
    (0..m).map(|i| v.rows(i * n, n).clone_owned()).collect()
}

pub fn solve_consensus(
    problem: &ConsensusProblem,
    config: &ConsensusConfig,
    init: Option<(DVector<f64>, DVector<f64>)>,
) -> Result<ConsensusOutcome, DistributedError> {
    run(problem, config, init, None)
}

/// As [`solve_consensus`], recording every read each agent makes.
pub fn solve_consensus_logged(
    problem: &ConsensusProblem,
    config: &ConsensusConfig,
    init: Option<(DVector<f64>, DVector<f64>)>,
    log: &mut AccessLog,
) -> Result<ConsensusOutcome, DistributedError> {
    run(problem, config, init, Some(log))
}

fn run(
    problem: &ConsensusProblem,
    config: &ConsensusConfig,
    init: Option<(DVector<f64>, DVector<f64>)>,
    mut log: Option<&mut AccessLog>,
) -> Result<ConsensusOutcome, DistributedError> {
    let eta = config.eta;
    if !(eta.is_finite() && eta > 0.0) {
        return Err(DistributedError::Config(format!(
            "eta must be positive, got {eta}"
        )));
    }
    if eta >= ETA_INTERVAL.1 {
        warn!("eta = {eta} is outside the admissible interval (0, 1/4); convergence is not guaranteed");
    }
    if !(config.tol >= 0.0) {
        return Err(DistributedError::Config(format!(
            "tol must be nonnegative, got {}",
            config.tol
        )));
    }
    let (m, n) = (problem.agents(), problem.local_dim);
    let total = 2 * m * n;
    let (p0, pm1) = match init {
        Some((a, b)) => {
            for v in [&a, &b] {
                if v.len() != total {
                    return Err(ShapeError::Length {
                        expected: total,
                        got: v.len(),
                    }
                    .into());
                }
            }
            (a, b)
        }
        None => (DVector::zeros(total), DVector::zeros(total)),
    };
    let mut snap = RoundSnapshot {
        x: split(&p0.rows(0, m * n).clone_owned(), m, n),
        y: split(&p0.rows(m * n, m * n).clone_owned(), m, n),
        x_prev: split(&pm1.rows(0, m * n).clone_owned(), m, n),
        y_prev: split(&pm1.rows(m * n, m * n).clone_owned(), m, n),
    };

    let disagreement = problem.disagreement_matrix();
    let mut trace = Trace::new(config.full_trace);
    let mut history = Vec::new();
    let mut round = 0;
    let mut residual = consensus_kkt(problem, &disagreement, &snap);
    trace.push(consensus_record(problem, &disagreement, &snap, 0));
    if config.keep_history {
        history.push(stack(&snap.x, &snap.y));
    }
    let mut stop = (residual <= config.tol).then_some(StopReason::Converged);

    while stop.is_none() {
        if round >= config.max_iter {
            stop = Some(StopReason::MaxIter);
            break;
        }
        let mut x_next = Vec::with_capacity(m);
        let mut y_next = Vec::with_capacity(m);
        for agent in 0..m {
            let mut view = NeighborView {
                round,
                agent,
                snapshot: &snap,
                log: log.as_deref_mut(),
            };
            let (x, y) = agent_update(problem, &mut view, eta);
            x_next.push(x);
            y_next.push(y);
        }
        // Round barrier: everyone publishes simultaneously.
        let x_prev = std::mem::replace(&mut snap.x, x_next);
        let y_prev = std::mem::replace(&mut snap.y, y_next);
        snap.x_prev = x_prev;
        snap.y_prev = y_prev;
        round += 1;

        let rec = consensus_record(problem, &disagreement, &snap, round);
        let diverged = !rec.is_finite() || rec.error > DIVERGENCE_THRESHOLD;
        trace.push(rec);
        if config.keep_history {
            history.push(stack(&snap.x, &snap.y));
        }
        if diverged {
            stop = Some(StopReason::Diverged);
            break;
        }
        residual = consensus_kkt(problem, &disagreement, &snap);
        if residual <= config.tol {
            stop = Some(StopReason::Converged);
        }
    }

    Ok(ConsensusOutcome {
        x: snap.x,
        y: snap.y,
        history,
        records: trace.finish(),
        stop: stop.unwrap_or(StopReason::MaxIter),
        rounds: round,
        eta,
        kkt_residual: residual,
    })
}

fn consensus_record(
    problem: &ConsensusProblem,
    disagreement: &DMatrix<f64>,
    snap: &RoundSnapshot,
    k: usize,
) -> IterationRecord {
    let x = stack(&snap.x, &[]);
    let y = stack(&snap.y, &[]);
    let objective: f64 = problem
        .costs
        .iter()
        .zip(&snap.x)
        .map(|(f, xi)| f.evaluate(xi.as_slice()))
        .sum();
    IterationRecord {
        k,
        error: x.norm(),
        primal_residual: (disagreement * &x).norm(),
        dual_norm: y.norm(),
        objective: objective.is_finite().then_some(objective),
    }
}

/// KKT residual of the lifted problem with ρ = 0. Monitoring only; uses
/// global information.
fn consensus_kkt(
    problem: &ConsensusProblem,
    disagreement: &DMatrix<f64>,
    snap: &RoundSnapshot,
) -> f64 {
    let n = problem.local_dim;
    let x = stack(&snap.x, &[]);
    let y = stack(&snap.y, &[]);
    let mut worst = (disagreement * &x).norm();
    let grad = disagreement.tr_mul(&y);
    for (i, f) in problem.costs.iter().enumerate() {
        let point = &snap.x[i] - grad.rows(i * n, n);
        let p = f.prox(point.as_slice(), 1.0);
        let gap = snap.x[i]
            .iter()
            .zip(&p)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(gap);
    }
    worst
}
