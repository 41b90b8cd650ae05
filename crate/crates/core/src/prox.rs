//! Proximity operators.
//!
//! Every solver in this crate touches the objective only through
//! `prox_{ηf}(x) = argmin_u  η f(u) + ½‖u − x‖²`, which is the resolvent of
//! `η ∂f`. Convexity of a [`ProxFunction`] is a caller obligation and is not
//! checked at runtime.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProxError {
    #[error("invalid function: {0}")]
    InvalidFunction(String),
    #[error("prox oracle failed to converge after {sweeps} sweeps (last change {last_change:e})")]
    OracleFailure { sweeps: usize, last_change: f64 },
}

/// A proper closed convex function with a computable proximity operator.
///
/// `evaluate` may return `+∞` outside the domain; `prox_into` must always
/// produce finite output for finite input.
pub trait ProxFunction: fmt::Debug + Send + Sync {
    fn dimension(&self) -> usize;

    fn evaluate(&self, x: &[f64]) -> f64;

    /// Writes `prox_{ηf}(x)` into `out`.
    fn prox_into(&self, x: &[f64], eta: f64, out: &mut [f64]);

    fn prox(&self, x: &[f64], eta: f64) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        self.prox_into(x, eta, &mut out);
        out
    }

    /// `Some((curvature, center))` when `f(u) = ½ Σ a_j (u_j − b_j)²`.
    ///
    /// Used by the ADMM baseline to solve its block subproblems exactly.
    fn as_diagonal_quadratic(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        None
    }

    /// Serializable description, if this function is one of the registered kinds.
    fn spec(&self) -> Option<FunctionSpec> {
        None
    }
}

/// `f ≡ 0`. Its prox is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Zero {
    dim: usize,
}

impl Zero {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl ProxFunction for Zero {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, _x: &[f64]) -> f64 {
        0.0
    }

    fn prox_into(&self, x: &[f64], _eta: f64, out: &mut [f64]) {
        out.copy_from_slice(x);
    }

    fn as_diagonal_quadratic(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((vec![0.0; self.dim], vec![0.0; self.dim]))
    }

    fn spec(&self) -> Option<FunctionSpec> {
        Some(FunctionSpec::Zero { dim: self.dim })
    }
}

/// `f(u) = ½ Σ_j a_j (u_j − b_j)²` with per-coordinate curvature `a_j ≥ 0`.
///
/// With `b = 0` and `a = [1, 0]` this is `½ u₁²`, whose prox is
/// `diag(1/(1+η), 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    curvature: Vec<f64>,
    center: Vec<f64>,
}

impl Quadratic {
    pub fn new(curvature: Vec<f64>) -> Result<Self, ProxError> {
        let center = vec![0.0; curvature.len()];
        Self::with_center(curvature, center)
    }

    pub fn with_center(curvature: Vec<f64>, center: Vec<f64>) -> Result<Self, ProxError> {
        if curvature.len() != center.len() {
            return Err(ProxError::InvalidFunction(format!(
                "quadratic curvature has length {} but center has length {}",
                curvature.len(),
                center.len()
            )));
        }
        if let Some(a) = curvature.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
            return Err(ProxError::InvalidFunction(format!(
                "quadratic curvature must be finite and nonnegative, got {a}"
            )));
        }
        if center.iter().any(|b| !b.is_finite()) {
            return Err(ProxError::InvalidFunction(
                "quadratic center must be finite".into(),
            ));
        }
        Ok(Self { curvature, center })
    }

    /// Same curvature `a` on every coordinate.
    pub fn isotropic(a: f64, dim: usize) -> Result<Self, ProxError> {
        Self::new(vec![a; dim])
    }

    pub fn curvature(&self) -> &[f64] {
        &self.curvature
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }
}

impl ProxFunction for Quadratic {
    fn dimension(&self) -> usize {
        self.curvature.len()
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.curvature
            .iter()
            .zip(&self.center)
            .zip(x)
            .map(|((a, b), u)| 0.5 * a * (u - b) * (u - b))
            .sum()
    }

    fn prox_into(&self, x: &[f64], eta: f64, out: &mut [f64]) {
        for (((o, xi), a), b) in out.iter_mut().zip(x).zip(&self.curvature).zip(&self.center) {
            *o = (xi + eta * a * b) / (1.0 + eta * a);
        }
    }

    fn as_diagonal_quadratic(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        Some((self.curvature.clone(), self.center.clone()))
    }

    fn spec(&self) -> Option<FunctionSpec> {
        let center = if self.center.iter().all(|b| *b == 0.0) {
            None
        } else {
            Some(self.center.clone())
        };
        Some(FunctionSpec::Quadratic {
            curvature: self.curvature.clone(),
            center,
        })
    }
}

/// `f(u) = λ‖u‖₁`. Prox is soft thresholding at `ηλ`.
#[derive(Debug, Clone, PartialEq)]
pub struct L1 {
    lambda: f64,
    dim: usize,
}

impl L1 {
    pub fn new(lambda: f64, dim: usize) -> Result<Self, ProxError> {
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(ProxError::InvalidFunction(format!(
                "l1 weight must be finite and nonnegative, got {lambda}"
            )));
        }
        Ok(Self { lambda, dim })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }
}

impl ProxFunction for L1 {
    fn dimension(&self) -> usize {
        self.dim
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.lambda * x.iter().map(|v| v.abs()).sum::<f64>()
    }

    fn prox_into(&self, x: &[f64], eta: f64, out: &mut [f64]) {
        let t = eta * self.lambda;
        for (o, xi) in out.iter_mut().zip(x) {
            *o = xi.signum() * (xi.abs() - t).max(0.0);
        }
    }

    fn spec(&self) -> Option<FunctionSpec> {
        Some(FunctionSpec::L1 {
            lambda: self.lambda,
            dim: self.dim,
        })
    }
}

/// `f(x₁,…,x_m) = Σ f_i(x_i)` over consecutive coordinate blocks.
///
/// The prox of a separable sum is the stack of the per-block proxes.
#[derive(Debug, Clone)]
pub struct SeparableSum {
    parts: Vec<Arc<dyn ProxFunction>>,
    offsets: Vec<usize>,
}

impl SeparableSum {
    pub fn new(parts: Vec<Arc<dyn ProxFunction>>) -> Self {
        let mut offsets = Vec::with_capacity(parts.len() + 1);
        let mut at = 0;
        offsets.push(at);
        for p in &parts {
            at += p.dimension();
            offsets.push(at);
        }
        Self { parts, offsets }
    }

    pub fn parts(&self) -> &[Arc<dyn ProxFunction>] {
        &self.parts
    }
}

impl ProxFunction for SeparableSum {
    fn dimension(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    fn evaluate(&self, x: &[f64]) -> f64 {
        self.parts
            .iter()
            .enumerate()
            .map(|(i, p)| p.evaluate(&x[self.offsets[i]..self.offsets[i + 1]]))
            .sum()
    }

    fn prox_into(&self, x: &[f64], eta: f64, out: &mut [f64]) {
        for (i, p) in self.parts.iter().enumerate() {
            let r = self.offsets[i]..self.offsets[i + 1];
            p.prox_into(&x[r.clone()], eta, &mut out[r]);
        }
    }

    fn as_diagonal_quadratic(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut curvature = Vec::with_capacity(self.dimension());
        let mut center = Vec::with_capacity(self.dimension());
        for p in &self.parts {
            let (a, b) = p.as_diagonal_quadratic()?;
            curvature.extend(a);
            center.extend(b);
        }
        Some((curvature, center))
    }
}

pub fn prox_zero(x: &[f64], eta: f64) -> Vec<f64> {
    Zero::new(x.len()).prox(x, eta)
}

pub fn prox_quadratic(curvature: &[f64], x: &[f64], eta: f64) -> Result<Vec<f64>, ProxError> {
    let f = if curvature.len() == 1 && x.len() != 1 {
        Quadratic::isotropic(curvature[0], x.len())?
    } else {
        Quadratic::new(curvature.to_vec())?
    };
    if f.dimension() != x.len() {
        return Err(ProxError::InvalidFunction(format!(
            "curvature has length {} but point has length {}",
            f.dimension(),
            x.len()
        )));
    }
    Ok(f.prox(x, eta))
}

pub fn prox_l1(lambda: f64, x: &[f64], eta: f64) -> Result<Vec<f64>, ProxError> {
    Ok(L1::new(lambda, x.len())?.prox(x, eta))
}

/// Tagged, serializable description of a registered function kind.
///
/// The tags (`"zero"`, `"quadratic"`, `"l1"`) are the keys used in problem files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "lowercase", deny_unknown_fields)]
pub enum FunctionSpec {
    Zero {
        dim: usize,
    },
    Quadratic {
        curvature: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        center: Option<Vec<f64>>,
    },
    L1 {
        lambda: f64,
        dim: usize,
    },
}

impl FunctionSpec {
    pub fn tag(&self) -> &'static str {
        match self {
            FunctionSpec::Zero { .. } => "zero",
            FunctionSpec::Quadratic { .. } => "quadratic",
            FunctionSpec::L1 { .. } => "l1",
        }
    }

    pub fn build(&self) -> Result<Arc<dyn ProxFunction>, ProxError> {
        Ok(match self {
            FunctionSpec::Zero { dim } => Arc::new(Zero::new(*dim)),
            FunctionSpec::Quadratic {
                curvature,
                center: None,
            } => Arc::new(Quadratic::new(curvature.clone())?),
            FunctionSpec::Quadratic {
                curvature,
                center: Some(center),
            } => Arc::new(Quadratic::with_center(curvature.clone(), center.clone())?),
            FunctionSpec::L1 { lambda, dim } => Arc::new(L1::new(*lambda, *dim)?),
        })
    }
}

/// Registered function tags.
pub const REGISTERED_TAGS: [&str; 3] = ["zero", "quadratic", "l1"];

/// Test-only reference prox: minimizes `η f(u) + ½‖u − x‖²` by cyclic
/// coordinate descent with golden-section line minimization, touching `f`
/// only through `evaluate`.
///
/// Exact for separable `f` after one sweep (up to the line-search
/// tolerance); converges for smooth-plus-separable `f` in general.
pub fn prox_numeric_oracle(
    f: &dyn ProxFunction,
    x: &[f64],
    eta: f64,
    tol: f64,
) -> Result<Vec<f64>, ProxError> {
    const MAX_SWEEPS: usize = 500;
    if !(eta > 0.0 && tol > 0.0) {
        return Err(ProxError::InvalidFunction(
            "oracle needs eta > 0 and tol > 0".into(),
        ));
    }
    let objective = |u: &[f64]| {
        let d2: f64 = u.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        eta * f.evaluate(u) + 0.5 * d2
    };
    let mut u = x.to_vec();
    let mut last_change = f64::INFINITY;
    for _ in 0..MAX_SWEEPS {
        let before = objective(&u);
        let mut step = 0.0f64;
        for j in 0..u.len() {
            let old = u[j];
            let mut line = |t: f64| {
                u[j] = t;
                let v = objective(&u);
                u[j] = old;
                v
            };
            let t = line_minimize(&mut line, old, tol);
            u[j] = t;
            step = step.max((t - old).abs());
        }
        last_change = before - objective(&u);
        if step <= tol * 1e-2 || (last_change.abs() <= tol * 1e-3 && step <= tol.sqrt()) {
            return Ok(u);
        }
    }
    Err(ProxError::OracleFailure {
        sweeps: MAX_SWEEPS,
        last_change,
    })
}

fn line_minimize(phi: &mut impl FnMut(f64) -> f64, start: f64, tol: f64) -> f64 {
    // Bracket the minimizer of a convex 1-D function by doubling outward.
    let f0 = phi(start);
    let mut h = 1.0f64.max(start.abs());
    let (mut lo, mut hi);
    loop {
        let fl = phi(start - h);
        let fr = phi(start + h);
        if fl >= f0 && fr >= f0 {
            lo = start - h;
            hi = start + h;
            break;
        }
        h *= 2.0;
        if !h.is_finite() {
            return start;
        }
    }
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let mut fa = phi(a);
    let mut fb = phi(b);
    let width = (tol * 1e-4).max(1e-15);
    for _ in 0..400 {
        if hi - lo <= width * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = phi(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = phi(b);
        }
    }
    let mid = 0.5 * (lo + hi);
    // Golden section cannot resolve a flat minimum below ~sqrt(eps); refine
    // with shrinking three-point parabolic fits and keep a step only if it
    // does not increase the objective.
    let (mut best, mut fbest) = [(mid, phi(mid)), (a, fa), (b, fb)]
        .into_iter()
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .unwrap_or((mid, f64::INFINITY));
    let scale = 1.0 + best.abs();
    for h in [1e-2, 1e-3, 1e-4, 1e-5] {
        let h = h * scale;
        let fl = phi(best - h);
        let fr = phi(best + h);
        let curv = fr - 2.0 * fbest + fl;
        if !(curv > 0.0) {
            continue;
        }
        let v = best - h * (fr - fl) / (2.0 * curv);
        if (v - best).abs() > h {
            continue;
        }
        let fv = phi(v);
        if fv <= fbest + 4.0 * f64::EPSILON * (fbest.abs() + 1.0) {
            best = v;
            fbest = fv.min(fbest);
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_prox_is_identity() {
        assert_eq!(prox_zero(&[3.0, -1.0], 0.1), vec![3.0, -1.0]);
        assert_eq!(prox_zero(&[0.0], 1.0), vec![0.0]);
        assert_eq!(prox_zero(&[1e6], 1e-6), vec![1e6]);
    }

    #[test]
    fn quadratic_examples() {
        assert_eq!(
            prox_quadratic(&[1.0, 0.0], &[2.0, 5.0], 1.0).unwrap(),
            vec![1.0, 5.0]
        );
        assert_eq!(prox_quadratic(&[1.0], &[0.0], 0.5).unwrap(), vec![0.0]);
        assert_eq!(prox_quadratic(&[2.0], &[3.0], 0.25).unwrap(), vec![2.0]);
        assert_eq!(
            prox_quadratic(&[0.0, 0.0], &[4.0, -2.0], 3.0).unwrap(),
            vec![4.0, -2.0]
        );
    }

    #[test]
    fn negative_curvature_rejected() {
        assert!(matches!(
            prox_quadratic(&[-1.0], &[1.0], 1.0),
            Err(ProxError::InvalidFunction(_))
        ));
        assert!(Quadratic::with_center(vec![1.0], vec![0.0, 1.0]).is_err());
    }

    #[test]
    fn l1_examples() {
        assert_eq!(
            prox_l1(1.0, &[2.0, -0.5, 0.0], 1.0).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(prox_l1(0.0, &[7.0], 1.0).unwrap(), vec![7.0]);
        let v = prox_l1(3.0, &[1.0], 0.1).unwrap();
        assert!((v[0] - 0.7).abs() < 1e-15);
        assert!(matches!(
            prox_l1(-1.0, &[1.0], 1.0),
            Err(ProxError::InvalidFunction(_))
        ));
    }

    #[test]
    fn oracle_examples() {
        let u = prox_numeric_oracle(&Zero::new(2), &[1.0, 2.0], 1.0, 1e-10).unwrap();
        assert!((u[0] - 1.0).abs() < 1e-10 && (u[1] - 2.0).abs() < 1e-10);
        let q = Quadratic::isotropic(1.0, 1).unwrap();
        let u = prox_numeric_oracle(&q, &[4.0], 1.0, 1e-10).unwrap();
        assert!((u[0] - 2.0).abs() < 1e-9, "{u:?}");
        let l = L1::new(1.0, 1).unwrap();
        let u = prox_numeric_oracle(&l, &[-3.0], 2.0, 1e-10).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-9, "{u:?}");
    }

    #[test]
    fn separable_sum_stacks_blocks() {
        let f = SeparableSum::new(vec![
            Arc::new(Quadratic::isotropic(1.0, 1).unwrap()),
            Arc::new(L1::new(1.0, 2).unwrap()),
        ]);
        assert_eq!(f.dimension(), 3);
        assert_eq!(f.prox(&[2.0, 3.0, -0.5], 1.0), vec![1.0, 2.0, 0.0]);
        assert_eq!(f.evaluate(&[2.0, 3.0, -0.5]), 2.0 + 3.5);
        assert!(f.as_diagonal_quadratic().is_none());
    }

    #[test]
    fn spec_round_trip() {
        let specs = [
            FunctionSpec::Zero { dim: 2 },
            FunctionSpec::Quadratic {
                curvature: vec![1.0, 0.0],
                center: None,
            },
            FunctionSpec::Quadratic {
                curvature: vec![2.0],
                center: Some(vec![0.5]),
            },
            FunctionSpec::L1 {
                lambda: 0.25,
                dim: 3,
            },
        ];
        for s in specs {
            assert_eq!(s.build().unwrap().spec().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert!(json.contains(&format!("\"tag\":\"{}\"", s.tag())));
            assert_eq!(serde_json::from_str::<FunctionSpec>(&json).unwrap(), s);
        }
    }
}
