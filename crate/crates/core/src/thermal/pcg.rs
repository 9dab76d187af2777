//! Jacobi-preconditioned conjugate gradients on a 5-point stencil.

use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::error::{Error, Result};

/// Symmetric 5-point operator: `(A u)_p = diag_p·u_p − Σ c_nb·u_nb`, with
/// `east[p]` coupling p to p+1 and `north[p]` coupling p to p+nx.
#[derive(Debug, Clone)]
pub(crate) struct Stencil {
    pub nx: usize,
    pub diag: Vec<f64>,
    pub east: Vec<f64>,
    pub north: Vec<f64>,
}

impl Stencil {
    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        let nx = self.nx;
        for p in 0..u.len() {
            let mut v = self.diag[p] * u[p];
            let i = p % nx;
            if i + 1 < nx {
                v -= self.east[p] * u[p + 1];
            }
            if i > 0 {
                v -= self.east[p - 1] * u[p - 1];
            }
            if p + nx < u.len() {
                v -= self.north[p] * u[p + nx];
            }
            if p >= nx {
                v -= self.north[p - nx] * u[p - nx];
            }
            out[p] = v;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solve `A u = b` to `|r| ≤ tol·|b|`. Returns (u, iterations, relative
/// residual).
pub(crate) fn solve(
    a: &Stencil,
    b: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = b.len();
    let mut u = alloc::vec![0.0; n];
    let bn = dot(b, b).sqrt();
    if bn == 0.0 {
        return Ok((u, 0, 0.0));
    }
    let inv: Vec<f64> = a.diag.iter().map(|d| 1.0 / d).collect();
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut q = alloc::vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = 1.0;
    for it in 1..=max_iter {
        a.apply(&p, &mut q);
        let alpha = rz / dot(&p, &q);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        res = dot(&r, &r).sqrt() / bn;
        if res <= tol {
            return Ok((u, it, res));
        }
        for i in 0..n {
            z[i] = r[i] * inv[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        iterations: max_iter,
        residual: res,
    })
}
