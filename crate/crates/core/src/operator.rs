//! The affine monotone operator `H(Π) = M_ρ Π + V_ρ` of the saddle-point
//! inclusion, and Lipschitz constants for step-size selection.
//!
//! For blocks `A_1, …, A_q` with `Σ A_i x_i = c`, the stacked variable is
//! `Π = col{x_1, …, x_q, y}` and
//!
//! ```text
//!         ┌ ρA_1ᵀA_1  …  ρA_1ᵀA_q   A_1ᵀ ┐
//!   M_ρ = │    ⋮      ⋱     ⋮        ⋮   │     V_ρ = col{−ρA_1ᵀc, …, −ρA_qᵀc, c}
//!         │ ρA_qᵀA_1  …  ρA_qᵀA_q   A_qᵀ │
//!         └  −A_1     …   −A_q       0   ┘
//! ```
//!
//! The symmetric part of `M_ρ` is `diag(ρAᵀA, 0) ⪰ 0`, so `H` is monotone;
//! at `ρ = 0` it is skew and therefore not cocoercive.

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::prox::ProxFunction;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("problem has no blocks")]
    NoBlocks,
    #[error("block {block}: matrix has {rows} rows but c has length {expected}")]
    RowMismatch {
        block: usize,
        rows: usize,
        expected: usize,
    },
    #[error("block {block}: matrix has {cols} columns but its function has dimension {dim}")]
    ColumnMismatch {
        block: usize,
        cols: usize,
        dim: usize,
    },
    #[error("block {block} has zero columns")]
    EmptyBlock { block: usize },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("expected a vector of length {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("penalty must be finite and nonnegative, got {0}")]
    Penalty(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("power iteration did not converge in {iterations} iterations (best estimate {estimate})")]
pub struct ConvergenceError {
    pub estimate: f64,
    pub iterations: usize,
}

/// One block `(A_i, f_i)` of a separable problem.
#[derive(Debug, Clone)]
pub struct Block {
    pub matrix: DMatrix<f64>,
    pub function: Arc<dyn ProxFunction>,
}

impl Block {
    pub fn new(matrix: DMatrix<f64>, function: Arc<dyn ProxFunction>) -> Self {
        Self { matrix, function }
    }
}

/// `min Σ f_i(x_i)  s.t.  Σ A_i x_i = c`.
#[derive(Debug, Clone)]
pub struct BlockProblem {
    blocks: Vec<Block>,
    c: DVector<f64>,
}

impl BlockProblem {
    pub fn new(blocks: Vec<Block>, c: DVector<f64>) -> Result<Self, ShapeError> {
        if blocks.is_empty() {
            return Err(ShapeError::NoBlocks);
        }
        for (i, b) in blocks.iter().enumerate() {
            if b.matrix.nrows() != c.len() {
                return Err(ShapeError::RowMismatch {
                    block: i,
                    rows: b.matrix.nrows(),
                    expected: c.len(),
                });
            }
            if b.matrix.ncols() == 0 {
                return Err(ShapeError::EmptyBlock { block: i });
            }
            if b.matrix.ncols() != b.function.dimension() {
                return Err(ShapeError::ColumnMismatch {
                    block: i,
                    cols: b.matrix.ncols(),
                    dim: b.function.dimension(),
                });
            }
        }
        Ok(Self { blocks, c })
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn c(&self) -> &DVector<f64> {
        &self.c
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// `p`, the number of coupling constraints.
    pub fn dual_dim(&self) -> usize {
        self.c.len()
    }

    pub fn block_dims(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.matrix.ncols()).collect()
    }

    /// `N = Σ n_i`.
    pub fn primal_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.matrix.ncols()).sum()
    }

    pub fn stacked_dim(&self) -> usize {
        self.primal_dim() + self.dual_dim()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.block_dims(), self.dual_dim())
    }

    /// `[A_1, …, A_q]`.
    pub fn constraint_matrix(&self) -> DMatrix<f64> {
        let p = self.dual_dim();
        let mut out = DMatrix::zeros(p, self.primal_dim());
        let mut col = 0;
        for b in &self.blocks {
            out.view_mut((0, col), (p, b.matrix.ncols()))
                .copy_from(&b.matrix);
            col += b.matrix.ncols();
        }
        out
    }

    /// `Σ A_i x_i − c` for a primal stack `x`.
    pub fn constraint_residual(&self, primal: &[f64]) -> DVector<f64> {
        let layout = self.layout();
        let mut r = -self.c.clone();
        for (i, b) in self.blocks.iter().enumerate() {
            let xi = DVector::from_column_slice(&primal[layout.block(i)]);
            r.gemv(1.0, &b.matrix, &xi, 1.0);
        }
        r
    }

    /// `Σ f_i(x_i)`; may be `+∞`.
    pub fn objective(&self, primal: &[f64]) -> f64 {
        let layout = self.layout();
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| b.function.evaluate(&primal[layout.block(i)]))
            .sum()
    }
}

/// Index ranges of the blocks inside a stacked vector `col{x_1, …, x_q, y}`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    offsets: Vec<usize>,
    dual_dim: usize,
}

impl Layout {
    pub fn new(block_dims: &[usize], dual_dim: usize) -> Self {
        let mut offsets = Vec::with_capacity(block_dims.len() + 1);
        let mut at = 0;
        offsets.push(0);
        for n in block_dims {
            at += n;
            offsets.push(at);
        }
        Self { offsets, dual_dim }
    }

    pub fn num_blocks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn block(&self, i: usize) -> Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn primal(&self) -> Range<usize> {
        0..self.primal_dim()
    }

    pub fn dual(&self) -> Range<usize> {
        let n = self.primal_dim();
        n..n + self.dual_dim
    }

    pub fn primal_dim(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn total(&self) -> usize {
        self.primal_dim() + self.dual_dim
    }

    /// Range of block `i` where `i == num_blocks()` denotes the dual block.
    pub fn segment(&self, i: usize) -> Range<usize> {
        if i == self.num_blocks() {
            self.dual()
        } else {
            self.block(i)
        }
    }
}

/// The pair `(M_ρ, V_ρ)`. Immutable once built.
#[derive(Debug)]
pub struct SplittingOperator {
    m: DMatrix<f64>,
    v: DVector<f64>,
    rho: f64,
    layout: Layout,
    applications: AtomicUsize,
}

impl Clone for SplittingOperator {
    fn clone(&self) -> Self {
        Self {
            m: self.m.clone(),
            v: self.v.clone(),
            rho: self.rho,
            layout: self.layout.clone(),
            applications: AtomicUsize::new(0),
        }
    }
}

impl SplittingOperator {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.v
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn block_dims(&self) -> Vec<usize> {
        (0..self.layout.num_blocks())
            .map(|i| self.layout.block(i).len())
            .collect()
    }

    pub fn dual_dim(&self) -> usize {
        self.layout.dual().len()
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    /// `H(Π) = M Π + V`.
    pub fn apply(&self, pi: &DVector<f64>) -> Result<DVector<f64>, ShapeError> {
        let mut out = DVector::zeros(self.dim());
        self.apply_into(pi, &mut out)?;
        Ok(out)
    }

    pub fn apply_into(&self, pi: &DVector<f64>, out: &mut DVector<f64>) -> Result<(), ShapeError> {
        if pi.len() != self.dim() {
            return Err(ShapeError::Length {
                expected: self.dim(),
                got: pi.len(),
            });
        }
        self.applications.fetch_add(1, Ordering::Relaxed);
        out.copy_from(&self.v);
        out.gemv(1.0, &self.m, pi, 1.0);
        Ok(())
    }

    /// Number of `apply`/`apply_into` calls made on this instance.
    pub fn applications(&self) -> usize {
        self.applications.load(Ordering::Relaxed)
    }

    /// Default Lipschitz constant: the spectral norm of `M_ρ`, falling back to
    /// the `√(‖M‖₁‖M‖∞)` bound if power iteration does not converge.
    pub fn lipschitz(&self) -> f64 {
        spectral_norm(&self.m, 1e-8)
            .unwrap_or_else(|_| lipschitz_bound_norm_product(&self.m).unwrap_or(f64::INFINITY))
    }
}

pub fn apply_h(op: &SplittingOperator, pi: &DVector<f64>) -> Result<DVector<f64>, ShapeError> {
    op.apply(pi)
}

pub fn build_operator(problem: &BlockProblem, rho: f64) -> Result<SplittingOperator, ShapeError> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(ShapeError::Penalty(rho));
    }
    let layout = problem.layout();
    let n = layout.primal_dim();
    let p = problem.dual_dim();
    let mut m = DMatrix::zeros(n + p, n + p);
    let mut v = DVector::zeros(n + p);
    let c = problem.c();
    for (i, bi) in problem.blocks().iter().enumerate() {
        let ri = layout.block(i);
        let ai_t = bi.matrix.transpose();
        if rho != 0.0 {
            for (j, bj) in problem.blocks().iter().enumerate() {
                let rj = layout.block(j);
                let prod = &ai_t * &bj.matrix * rho;
                m.view_mut((ri.start, rj.start), (ri.len(), rj.len()))
                    .copy_from(&prod);
            }
            let rhs = &ai_t * c * (-rho);
            v.rows_mut(ri.start, ri.len()).copy_from(&rhs);
        }
        m.view_mut((ri.start, n), (ri.len(), p)).copy_from(&ai_t);
        m.view_mut((n, ri.start), (p, ri.len()))
            .copy_from(&(-&bi.matrix));
    }
    v.rows_mut(n, p).copy_from(c);
    Ok(SplittingOperator {
        m,
        v,
        rho,
        layout,
        applications: AtomicUsize::new(0),
    })
}

/// Max absolute column sum.
pub fn norm_1(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Max absolute row sum.
pub fn norm_inf(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `√(‖M‖₁ ‖M‖∞)`, an upper bound on `‖M‖₂`.
pub fn lipschitz_bound_norm_product(m: &DMatrix<f64>) -> Result<f64, ShapeError> {
    if m.nrows() != m.ncols() {
        return Err(ShapeError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    Ok((norm_1(m) * norm_inf(m)).sqrt())
}

/// Blockwise max-of-norms quantity: the largest 1-norm over the primal block
/// columns `col{ρA_1ᵀA_j, …, ρA_qᵀA_j, −A_j}` together with `‖[A_1, …, A_q]‖∞`.
///
/// This is *not* guaranteed to dominate `‖M_ρ‖₂`; prefer
/// [`SplittingOperator::lipschitz`].
pub fn lipschitz_bound_blockwise(problem: &BlockProblem, rho: f64) -> Result<f64, ShapeError> {
    if !(rho.is_finite() && rho >= 0.0) {
        return Err(ShapeError::Penalty(rho));
    }
    let p = problem.dual_dim();
    let mut best = norm_inf(&problem.constraint_matrix());
    for bj in problem.blocks() {
        let nj = bj.matrix.ncols();
        let mut column = DMatrix::zeros(problem.primal_dim() + p, nj);
        let mut row = 0;
        for bi in problem.blocks() {
            let ni = bi.matrix.ncols();
            let prod = bi.matrix.transpose() * &bj.matrix * rho;
            column.view_mut((row, 0), (ni, nj)).copy_from(&prod);
            row += ni;
        }
        column.view_mut((row, 0), (p, nj)).copy_from(&(-&bj.matrix));
        best = best.max(norm_1(&column));
    }
    Ok(best)
}

const POWER_MAX_ITER: usize = 200_000;

/// `σ_max(M)` by power iteration on `MᵀM`.
///
/// Starts from the normalized all-ones vector; if that start is (numerically)
/// orthogonal to the range of `MᵀM`, or the iteration fails to converge, it is
/// retried once from a fixed perturbed start. Stops when the relative change of
/// the Rayleigh quotient drops below `tol`.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64) -> Result<f64, ConvergenceError> {
    if m.is_empty() || m.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let n = m.ncols();
    let ones = DVector::from_element(n, 1.0);
    let perturbed = DVector::from_fn(n, |j, _| 1.0 + 0.5 * ((j + 1) as f64).sin());
    let mut best = 0.0f64;
    for start in [ones, perturbed] {
        match power_iterate(m, start, tol) {
            Ok(Some(sigma)) => return Ok(sigma),
            Ok(None) => {}
            Err(e) => best = best.max(e.estimate),
        }
    }
    Err(ConvergenceError {
        estimate: best,
        iterations: 2 * POWER_MAX_ITER,
    })
}

/// `Ok(None)` means the start vector collapsed to zero.
fn power_iterate(
    m: &DMatrix<f64>,
    start: DVector<f64>,
    tol: f64,
) -> Result<Option<f64>, ConvergenceError> {
    let mut v = start.normalize();
    let mut mv = DVector::zeros(m.nrows());
    let mut w = DVector::zeros(m.ncols());
    let mut lambda_prev = 0.0;
    for it in 0..POWER_MAX_ITER {
        mv.gemv(1.0, m, &v, 0.0);
        w.gemv_tr(1.0, m, &mv, 0.0);
        // Rayleigh quotient vᵀMᵀMv with ‖v‖ = 1.
        let lambda = mv.norm_squared();
        let wn = w.norm();
        if wn == 0.0 || lambda == 0.0 {
            return Ok(None);
        }
        if it > 0 && (lambda - lambda_prev).abs() <= tol * lambda {
            return Ok(Some(lambda.sqrt()));
        }
        lambda_prev = lambda;
        v.copy_from(&w);
        v /= wn;
    }
    Err(ConvergenceError {
        estimate: lambda_prev.sqrt(),
        iterations: POWER_MAX_ITER,
    })
}
