//! The replica-symmetric fixed point `q = E th²(βz√q + h)`.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::quadrature::GaussHermite;

pub const DEFAULT_TOL: f64 = 1e-12;
pub const DEFAULT_NODES: usize = 64;
pub const DEFAULT_DAMPING: f64 = 0.5;
pub const DEFAULT_MAX_ITERS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QSolution {
    pub q: f64,
    pub residual: f64,
    pub iterations: usize,
    pub quadrature_nodes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QSolver {
    pub nodes: usize,
    pub damping: f64,
    pub max_iters: usize,
}

impl Default for QSolver {
    fn default() -> Self {
        Self {
            nodes: DEFAULT_NODES,
            damping: DEFAULT_DAMPING,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl QSolver {
    /// Damped iteration `q ← (1−λ)q + λΦ(q)` from `q₀ = th²(h)`. At `h = 0`
    /// the root `q = 0` is returned directly.
    pub fn solve(&self, beta: f64, h: f64, tol: f64) -> Result<QSolution> {
        if !(beta >= 0.0 && beta.is_finite()) || !(h >= 0.0 && h.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "solve_q needs beta >= 0 and h >= 0, got beta = {beta}, h = {h}"
            )));
        }
        if !(tol > 0.0) {
            return Err(Error::InvalidParameter(format!("tolerance must be positive, got {tol}")));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        let rule = GaussHermite::new(self.nodes)?;
        let phi = |q: f64| rule.expect(|z| (beta * z * q.sqrt() + h).tanh().powi(2));
        if h == 0.0 {
            return Ok(QSolution {
                q: 0.0,
                residual: phi(0.0).abs(),
                iterations: 0,
                quadrature_nodes: self.nodes,
            });
        }
        let mut q = h.tanh().powi(2);
        let mut residual = (q - phi(q)).abs();
        let mut iterations = 0;
        while residual >= tol {
            if iterations == self.max_iters {
                return Err(Error::NoConvergence {
                    iterations,
                    last_q: q,
                    residual,
                });
            }
            q = (1.0 - self.damping) * q + self.damping * phi(q);
            residual = (q - phi(q)).abs();
            iterations += 1;
        }
        Ok(QSolution {
            q,
            residual,
            iterations,
            quadrature_nodes: self.nodes,
        })
    }
}

pub fn solve_q(beta: f64, h: f64, tol: f64) -> Result<QSolution> {
    QSolver::default().solve(beta, h, tol)
}
