//! Direct multi-block extension of ADMM.
//!
//! Each sweep minimizes the augmented Lagrangian
//! `Σ f_i(x_i) + yᵀ(Σ A_i x_i − c) + ρ/2 ‖Σ A_i x_i − c‖²` over one block at a
//! time, Gauss-Seidel style (block `i` sees blocks `< i` already updated),
//! then takes the dual ascent step `y ← y + ρ(Σ A_i x_i − c)`. With two blocks
//! this is standard ADMM; with one it is the method of multipliers. With
//! three or more blocks it is not guaranteed to converge.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::operator::{BlockProblem, ShapeError};
use crate::solver::{kkt_residual, record, StopReason};
use crate::trace::{IterationRecord, Trace, DIVERGENCE_THRESHOLD};

#[derive(Debug, Error, PartialEq)]
pub enum AdmmError {
    #[error("ADMM requires rho > 0, got {0}")]
    Penalty(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("block {block}: subproblem is not solvable ({reason})")]
    Subproblem { block: usize, reason: String },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub divergence_threshold: f64,
    pub full_trace: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_iter: 50_000,
            tol: 1e-10,
            divergence_threshold: DIVERGENCE_THRESHOLD,
            full_trace: false,
        }
    }
}

impl AdmmConfig {
    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    fn validate(&self) -> Result<(), AdmmError> {
        if !(self.rho.is_finite() && self.rho > 0.0) {
            return Err(AdmmError::Penalty(self.rho));
        }
        if self.max_iter == 0 {
            return Err(AdmmError::Config("max_iter must be positive".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(AdmmError::Config(format!(
                "tol must be nonnegative, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Which copy of block `source` a block subproblem read during sweep `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockRead {
    pub iteration: usize,
    pub reader: usize,
    pub source: usize,
    /// `true` if the value read was already updated in this sweep.
    pub updated: bool,
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    /// Final `col{x_1, …, x_q, y}`.
    pub current: DVector<f64>,
    pub records: Vec<IterationRecord>,
    pub stop: StopReason,
    pub iterations: usize,
    pub kkt_residual: f64,
    primal_dim: usize,
}

impl AdmmOutcome {
    pub fn diverged(&self) -> bool {
        self.stop == StopReason::Diverged
    }

    pub fn primal(&self) -> DVector<f64> {
        self.current.rows(0, self.primal_dim).clone_owned()
    }
}

enum Subsolver {
    /// Factored `diag(a) + ρA_iᵀA_i`, with the linear term `diag(a) b`.
    Quadratic {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
        ab: DVector<f64>,
    },
    /// `A_iᵀA_i = I`: the minimizer is `prox_{f_i/ρ}`.
    Orthonormal,
}

fn subsolvers(problem: &BlockProblem, rho: f64) -> Result<Vec<Subsolver>, AdmmError> {
    problem
        .blocks()
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let gram = b.matrix.tr_mul(&b.matrix);
            if let Some((a, center)) = b.function.as_diagonal_quadratic() {
                let mut h = &gram * rho;
                for (j, aj) in a.iter().enumerate() {
                    h[(j, j)] += aj;
                }
                let ab = DVector::from_iterator(a.len(), a.iter().zip(&center).map(|(x, y)| x * y));
                let chol = h.cholesky().ok_or_else(|| AdmmError::Subproblem {
                    block: i,
                    reason: "diag(a) + rho A_i^T A_i is singular".into(),
                })?;
                Ok(Subsolver::Quadratic { chol, ab })
            } else {
                let n = gram.nrows();
                if (&gram - DMatrix::<f64>::identity(n, n)).amax() > 1e-12 {
                    return Err(AdmmError::Subproblem {
                        block: i,
                        reason: "non-quadratic block needs orthonormal columns".into(),
                    });
                }
                Ok(Subsolver::Orthonormal)
            }
        })
        .collect()
}

pub fn admm_direct_multiblock(
    problem: &BlockProblem,
    config: &AdmmConfig,
    init: Option<DVector<f64>>,
) -> Result<AdmmOutcome, AdmmError> {
    run(problem, config, init, None)
}

/// As [`admm_direct_multiblock`], logging which version of each block every
/// subproblem reads.
pub fn admm_direct_multiblock_logged(
    problem: &BlockProblem,
    config: &AdmmConfig,
    init: Option<DVector<f64>>,
    log: &mut Vec<BlockRead>,
) -> Result<AdmmOutcome, AdmmError> {
    run(problem, config, init, Some(log))
}

fn run(
    problem: &BlockProblem,
    config: &AdmmConfig,
    init: Option<DVector<f64>>,
    mut log: Option<&mut Vec<BlockRead>>,
) -> Result<AdmmOutcome, AdmmError> {
    config.validate()?;
    let rho = config.rho;
    let layout = problem.layout();
    let total = layout.total();
    let mut pi = match init {
        Some(v) if v.len() != total => {
            return Err(ShapeError::Length {
                expected: total,
                got: v.len(),
            }
            .into())
        }
        Some(v) => v,
        None => DVector::zeros(total),
    };
    let solvers = subsolvers(problem, rho)?;
    let q = problem.num_blocks();
    let c = problem.c();
    let dual = layout.dual();

    let mut trace = Trace::new(config.full_trace);
    trace.push(record(problem, 0, &pi));
    let mut residual = kkt_residual(problem, &pi, rho)?;
    let mut stop = (residual <= config.tol).then_some(StopReason::Converged);
    let mut k = 0;

    // A_j x_j for every block, refreshed as blocks are updated.
    let mut products: Vec<DVector<f64>> = problem
        .blocks()
        .iter()
        .enumerate()
        .map(|(j, b)| &b.matrix * pi.rows(layout.block(j).start, layout.block(j).len()))
        .collect();

    while stop.is_none() {
        if k >= config.max_iter {
            stop = Some(StopReason::MaxIter);
            break;
        }
        let y = pi.rows(dual.start, dual.len()).clone_owned();
        for i in 0..q {
            // s = Σ_{j≠i} A_j x_j − c with j < i at k+1 and j > i at k.
            let mut s = -c.clone();
            for (j, prod) in products.iter().enumerate() {
                if j == i {
                    continue;
                }
                if let Some(log) = log.as_deref_mut() {
                    log.push(BlockRead {
                        iteration: k,
                        reader: i,
                        source: j,
                        updated: j < i,
                    });
                }
                s += prod;
            }
            let block = &problem.blocks()[i];
            let a = &block.matrix;
            let xi = match &solvers[i] {
                Subsolver::Quadratic { chol, ab } => {
                    // (diag(a) + ρAᵀA) x = diag(a) b − Aᵀy − ρAᵀs
                    let rhs = ab - a.tr_mul(&y) - a.tr_mul(&s) * rho;
                    chol.solve(&rhs)
                }
                Subsolver::Orthonormal => {
                    let point = -a.tr_mul(&(&s + &y / rho));
                    DVector::from_vec(block.function.prox(point.as_slice(), 1.0 / rho))
                }
            };
            let seg = layout.block(i);
            pi.rows_mut(seg.start, seg.len()).copy_from(&xi);
            products[i] = a * &xi;
        }
        let r = products.iter().fold(-c.clone(), |acc, p| acc + p);
        let y_next = &y + &r * rho;
        pi.rows_mut(dual.start, dual.len()).copy_from(&y_next);
        k += 1;

        let rec = record(problem, k, &pi);
        let diverged = !rec.is_finite() || rec.error > config.divergence_threshold;
        trace.push(rec);
        if diverged {
            stop = Some(StopReason::Diverged);
            break;
        }
        residual = kkt_residual(problem, &pi, rho)?;
        if residual <= config.tol {
            stop = Some(StopReason::Converged);
        }
    }

    Ok(AdmmOutcome {
        current: pi,
        records: trace.finish(),
        stop: stop.unwrap_or(StopReason::MaxIter),
        iterations: k,
        kkt_residual: residual,
        primal_dim: layout.primal_dim(),
    })
}
