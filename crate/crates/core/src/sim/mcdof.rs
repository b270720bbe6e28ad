//! Monte-Carlo degrees of freedom `(1/σ²) Σ_i Cov(Y_i, Ŷ_i)`.

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;

use super::stream_rng;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::qp::{EngineOptions, Problem, ScFit, EstimatorKind, SolveOptions};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McDof {
    pub df: f64,
    pub se: f64,
    pub replications: usize,
    /// Mean of the per-replication reference values, when supplied.
    pub reference_mean: Option<f64>,
    /// Standard error of `df − reference` from paired replications.
    pub difference_se: Option<f64>,
}

/// Monte-Carlo df of `estimator` under `dgp` with known noise variance.
///
/// Replication `r` draws from ChaCha stream `r` of `seed`.
pub fn mc_dof<D, E>(dgp: D, estimator: E, replications: usize, seed: u64, sigma2: f64, mode: ExecMode) -> Result<McDof>
where
    D: Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync + Send,
    E: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync + Send,
{
    mc_dof_paired(dgp, |y| estimator(y).map(|f| (f, 0.0)), replications, seed, sigma2, mode).map(|m| McDof {
        reference_mean: None,
        difference_se: None,
        ..m
    })
}

/// As [`mc_dof`], with a per-replication reference value (e.g. `|A| − 1`)
/// returned by the estimator and compared on the same draws.
pub fn mc_dof_paired<D, E>(
    dgp: D,
    estimator: E,
    replications: usize,
    seed: u64,
    sigma2: f64,
    mode: ExecMode,
) -> Result<McDof>
where
    D: Fn(&mut ChaCha8Rng) -> DVector<f64> + Sync + Send,
    E: Fn(&DVector<f64>) -> Result<(DVector<f64>, f64)> + Sync + Send,
{
    if replications < 2 {
        return Err(Error::Config("need at least two replications".into()));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config("noise variance must be positive".into()));
    }
    let draws = map_indexed(mode, replications, |r| {
        let y = dgp(&mut stream_rng(seed, r as u64));
        estimator(&y).map(|(f, a)| (y, f, a))
    });
    let mut ys = Vec::with_capacity(replications);
    let mut fs = Vec::with_capacity(replications);
    let mut refs = Vec::with_capacity(replications);
    for d in draws {
        let (y, f, a) = d?;
        ys.push(y);
        fs.push(f);
        refs.push(a);
    }
    let n = ys[0].len();
    let rr = replications as f64;
    let ybar = ys.iter().fold(DVector::zeros(n), |acc, y| acc + y) / rr;
    let fbar = fs.iter().fold(DVector::zeros(n), |acc, f| acc + f) / rr;
    // per-replication contributions to the summed sample covariance
    let terms: Vec<f64> = ys
        .iter()
        .zip(&fs)
        .map(|(y, f)| (y - &ybar).dot(&(f - &fbar)) / sigma2 * rr / (rr - 1.0))
        .collect();
    let (df, se) = mean_se(&terms);
    let (ref_mean, _) = mean_se(&refs);
    let diffs: Vec<f64> = terms.iter().zip(&refs).map(|(t, a)| t - a).collect();
    let (_, diff_se) = mean_se(&diffs);
    Ok(McDof {
        df,
        se,
        replications,
        reference_mean: Some(ref_mean),
        difference_se: Some(diff_se),
    })
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Synthetic control with weights summing to `total` instead of one.
///
/// Varying `total` changes the typical active-set size, which the df
/// experiments use to trace `df` against `E|A| − 1`.
pub fn solve_sc_total(y: &DVector<f64>, x: &DMatrix<f64>, total: f64, opts: &SolveOptions) -> Result<ScFit> {
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::InvalidInput(format!("weight total must be positive, got {total}")));
    }
    if x.nrows() != y.len() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let p = x.ncols();
    let h = x.transpose() * x;
    let c = -(x.transpose() * y);
    let eq = DMatrix::from_element(1, p, 1.0);
    let rhs = DVector::from_element(1, total);
    let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
    let mut start = DVector::zeros(p);
    let best = (0..p)
        .min_by(|&a, &b| (0.5 * total * h[(a, a)] + c[a]).total_cmp(&(0.5 * total * h[(b, b)] + c[b])))
        .unwrap_or(0);
    start[best] = total;
    let eopts = EngineOptions {
        max_iter: opts.max_iter.unwrap_or(50 * (p + 1) + 100),
        kkt_tol: opts.kkt_tol,
    };
    let sol = crate::qp::run_engine(&pb, start, eopts)?;
    Ok(ScFit::from_solution(EstimatorKind::Plain, y, x, &sol, None))
}
