//! Primal active-set method for
//! `min ½βᵀHβ + cᵀβ  s.t.  Cβ = b, β ≥ 0` with `H` positive semidefinite.
//!
//! The equality rows stay in the working set throughout; only the bounds
//! enter and leave. Each working-set subproblem is an equality-constrained
//! quadratic solved through its KKT system. When that system has no solution
//! the objective is linear along some feasible direction on the face, and we
//! follow that direction to the nearest bound.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{lstsq, null_space_descent, solve_kkt, Kkt};

pub(crate) struct Problem<'a> {
    pub h: &'a DMatrix<f64>,
    pub c: &'a DVector<f64>,
    pub eq: &'a DMatrix<f64>,
    pub rhs: &'a DVector<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub x: DVector<f64>,
    /// Equality multipliers, `Hx + c = Cᵀν + μ`.
    pub nu: DVector<f64>,
    /// Bound multipliers with the standard `μ ≥ 0` sign.
    pub mu: DVector<f64>,
    pub iterations: usize,
    pub stationarity: f64,
    pub complementarity: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Options {
    pub max_iter: usize,
    pub kkt_tol: f64,
}

impl Problem<'_> {
    pub fn scale(&self) -> f64 {
        1.0 + self.h.amax().max(self.c.amax())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(self.h * x)) + self.c.dot(x)
    }
}

fn free_indices(free: &[bool]) -> Vec<usize> {
    free.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i).collect()
}

/// Multipliers and scaled KKT residuals at `x` for the working set `free`.
fn certify(pb: &Problem, x: &DVector<f64>, free: &[usize]) -> (DVector<f64>, DVector<f64>, f64, f64) {
    let g = pb.h * x + pb.c;
    let scale = pb.scale();
    let cf = pb.eq.select_columns(free);
    let gf = g.select_rows(free);
    let nu = lstsq(&cf.transpose(), &gf);
    let mu = &g - pb.eq.transpose() * &nu;
    let mut stat: f64 = 0.0;
    let mut comp: f64 = 0.0;
    for j in 0..x.len() {
        if free.contains(&j) {
            stat = stat.max(mu[j].abs());
        } else {
            stat = stat.max((-mu[j]).max(0.0));
        }
        comp = comp.max((mu[j] * x[j]).abs());
    }
    (nu, mu, stat / scale, comp / scale)
}

/// Runs the active-set iterations from a feasible `start`.
pub(crate) fn solve(pb: &Problem, start: DVector<f64>, opts: Options) -> Result<Solution> {
    let p = start.len();
    let m = pb.eq.nrows();
    let dual_tol = 1e-11 * pb.scale();
    let mut x = start;
    let mut free: Vec<bool> = x.iter().map(|&v| v > 0.0).collect();
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }

    for iter in 0..opts.max_iter {
        let fidx = free_indices(&free);
        let g = pb.h * &x + pb.c;
        let hf = pb.h.select_rows(&fidx).select_columns(&fidx);
        let cf = pb.eq.select_columns(&fidx);
        let gf = g.select_rows(&fidx);

        let (step, ray) = match solve_kkt(&hf, &cf, &(-&gf), &DVector::zeros(m)) {
            Kkt::Solved { x: s } => (s, false),
            Kkt::Inconsistent => (null_space_descent(&hf, &cf, &gf), true),
        };

        let step_tol = 1e-12 * (1.0 + x.amax());
        if step.amax() <= step_tol {
            let (_, mu, _, _) = certify(pb, &x, &fidx);
            let mut entering: Option<usize> = None;
            for j in 0..p {
                if !free[j] && mu[j] < -dual_tol && entering.is_none_or(|e| mu[j] < mu[e]) {
                    entering = Some(j);
                }
            }
            match entering {
                Some(j) => {
                    free[j] = true;
                    continue;
                }
                None => return finish(pb, x, &free, iter + 1, opts),
            }
        }

        // roundoff-level components would block at a zero step and cycle
        let mut step = step;
        let noise = 1e-13 * step.amax();
        step.iter_mut().filter(|s| s.abs() <= noise).for_each(|s| *s = 0.0);
        let mut alpha = if ray { f64::INFINITY } else { 1.0 };
        let mut blocking: Option<usize> = None;
        for (pos, &j) in fidx.iter().enumerate() {
            if step[pos] < 0.0 {
                let a = -x[j] / step[pos];
                if a < alpha {
                    alpha = a;
                    blocking = Some(j);
                }
            }
        }
        if !alpha.is_finite() {
            return Err(Error::Convergence {
                iterations: iter + 1,
                stationarity: f64::INFINITY,
                complementarity: f64::INFINITY,
            });
        }
        for (pos, &j) in fidx.iter().enumerate() {
            x[j] += alpha * step[pos];
        }
        if let Some(j) = blocking {
            x[j] = 0.0;
            free[j] = false;
        }
        for &j in &fidx {
            if free[j] && x[j] <= 0.0 {
                x[j] = 0.0;
                free[j] = false;
            }
        }
    }

    let fidx = free_indices(&free);
    let (_, _, stat, comp) = certify(pb, &x, &fidx);
    Err(Error::Convergence {
        iterations: opts.max_iter,
        stationarity: stat,
        complementarity: comp,
    })
}

/// Polishes the final face solution and certifies it.
fn finish(pb: &Problem, mut x: DVector<f64>, free: &[bool], iterations: usize, opts: Options) -> Result<Solution> {
    let fidx = free_indices(free);
    let hf = pb.h.select_rows(&fidx).select_columns(&fidx);
    let cf = pb.eq.select_columns(&fidx);
    let cfull = pb.c.select_rows(&fidx);
    // absolute re-solve removes drift accumulated over many steps
    if let Kkt::Solved { x: xf } = solve_kkt(&hf, &cf, &(-&cfull), pb.rhs) {
        let mut cand = x.clone();
        for (pos, &j) in fidx.iter().enumerate() {
            cand[j] = xf[pos];
        }
        let feasible = xf.iter().all(|&v| v >= -1e-13);
        let eq_err = (pb.eq * &cand - pb.rhs).amax();
        if feasible && eq_err <= 1e-12 * (1.0 + pb.rhs.amax()) && pb.objective(&cand) <= pb.objective(&x) + 1e-14 * pb.scale() {
            for v in cand.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
            x = cand;
        }
    }
    let (nu, mu, stat, comp) = certify(pb, &x, &fidx);
    if stat > opts.kkt_tol || comp > opts.kkt_tol {
        return Err(Error::Convergence {
            iterations,
            stationarity: stat,
            complementarity: comp,
        });
    }
    Ok(Solution {
        x,
        nu,
        mu,
        iterations,
        stationarity: stat,
        complementarity: comp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts() -> Options {
        Options { max_iter: 500, kkt_tol: 1e-8 }
    }

    #[test]
    fn projects_onto_simplex() {
        // min ½|x - t|² over the simplex with t = (0.8, 0.6, -1)
        let h = DMatrix::identity(3, 3);
        let c = -DVector::from_vec(vec![0.8, 0.6, -1.0]);
        let eq = DMatrix::from_element(1, 3, 1.0);
        let rhs = DVector::from_element(1, 1.0);
        let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
        let sol = solve(&pb, DVector::from_vec(vec![0.0, 0.0, 1.0]), opts()).unwrap();
        assert!((sol.x[0] - 0.6).abs() < 1e-12);
        assert!((sol.x[1] - 0.4).abs() < 1e-12);
        assert_eq!(sol.x[2], 0.0);
        assert!(sol.mu[2] > 0.0);
    }

    #[test]
    fn handles_zero_curvature_faces() {
        // linear objective on the simplex: optimum is the cheapest vertex
        let h = DMatrix::zeros(3, 3);
        let c = DVector::from_vec(vec![2.0, -1.0, 0.5]);
        let eq = DMatrix::from_element(1, 3, 1.0);
        let rhs = DVector::from_element(1, 1.0);
        let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
        let sol = solve(&pb, DVector::from_vec(vec![1.0 / 3.0; 3]), opts()).unwrap();
        assert!((sol.x[1] - 1.0).abs() < 1e-12);
    }
}
