#![allow(dead_code)]

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use padpd::prox::ProxFunction;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-scale..=scale))
}

pub fn uniform_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-scale..=scale))
}

pub fn max_abs_diff(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Two-block iterate `(x, z, y)`.
#[derive(Debug, Clone)]
pub struct TwoBlockIterate {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

impl TwoBlockIterate {
    pub fn stacked(&self) -> DVector<f64> {
        let v: Vec<f64> = self
            .x
            .iter()
            .chain(self.z.iter())
            .chain(self.y.iter())
            .copied()
            .collect();
        DVector::from_vec(v)
    }

    pub fn split(v: &DVector<f64>, n: usize, m: usize) -> Self {
        Self {
            x: v.rows(0, n).clone_owned(),
            z: v.rows(n, m).clone_owned(),
            y: v.rows(n + m, v.len() - n - m).clone_owned(),
        }
    }
}

/// Two-block PADPD written out term by term, independent of the operator
/// matrix. Returns the iterates for `k = 0..=steps`.
#[allow(clippy::too_many_arguments)]
pub fn two_block_literal(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DVector<f64>,
    f: &Arc<dyn ProxFunction>,
    g: &Arc<dyn ProxFunction>,
    rho: f64,
    eta: f64,
    start: TwoBlockIterate,
    before: TwoBlockIterate,
    steps: usize,
) -> Vec<TwoBlockIterate> {
    let (mut cur, mut prev) = (start, before);
    let mut out = vec![cur.clone()];
    let at = a.transpose();
    let bt = b.transpose();
    for _ in 0..steps {
        let (x, z, y) = (&cur.x, &cur.z, &cur.y);
        let (xp, zp, yp) = (&prev.x, &prev.z, &prev.y);
        let x_hat = x
            - &at * y * (2.0 * eta)
            - &at * a * x * (2.0 * eta * rho)
            - &at * b * z * (2.0 * eta * rho)
            + &at * yp * eta
            + &at * a * xp * (eta * rho)
            + &at * b * zp * (eta * rho)
            + &at * c * (eta * rho);
        let z_hat = z
            - &bt * y * (2.0 * eta)
            - &bt * a * x * (2.0 * eta * rho)
            - &bt * b * z * (2.0 * eta * rho)
            + &bt * yp * eta
            + &bt * a * xp * (eta * rho)
            + &bt * b * zp * (eta * rho)
            + &bt * c * (eta * rho);
        let x_next = DVector::from_vec(f.prox(x_hat.as_slice(), eta));
        let z_next = DVector::from_vec(g.prox(z_hat.as_slice(), eta));
        let y_next =
            y + a * x * (2.0 * eta) + b * z * (2.0 * eta) - a * xp * eta - b * zp * eta - c * eta;
        prev = cur;
        cur = TwoBlockIterate {
            x: x_next,
            z: z_next,
            y: y_next,
        };
        out.push(cur.clone());
    }
    out
}
