//! Divergences `∂Ŷ/∂Y` and degrees of freedom of the fitted estimators.
//!
//! On a locally stable active set every estimator is an affine function of
//! `Y`: the weights solve an equality-constrained least-squares problem on
//! the active donors with the binding constraints. Its sensitivity map
//! `S = G⁻¹ − G⁻¹Cᵀ(CG⁻¹Cᵀ)⁻¹CG⁻¹` gives all the closed forms below.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::linalg::{constrained_sensitivity, independent_rows, rank, sorted_intersect, sorted_minus};
use crate::panel::Covariates;
use crate::qp::{ActiveSets, EstimatorKind, ScFit};

#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceMatrix {
    pub matrix: DMatrix<f64>,
    pub trace: f64,
}

impl DivergenceMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        let trace = matrix.trace();
        Self { matrix, trace }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, n))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self::new(&self.matrix * s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DofCase {
    Plain,
    /// Enough unmatched weighted covariates: df as without covariates.
    CovMany,
    /// Each exactly matched weighted covariate removes one df.
    CovFew,
    Penalized,
    Masc,
    /// Generic equality-constrained least squares, `rank − h`.
    ConstrainedLs,
    Matching,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DofReport {
    pub df_hat: f64,
    pub case: DofCase,
    pub rank_xa: usize,
    pub size_a: usize,
    pub size_m_cap_e: usize,
    pub size_e_minus_m: usize,
    /// Number of independent binding equality constraints on `A`.
    pub constraint_rank: usize,
}

/// Binding equality rows restricted to the active donors.
///
/// The sum-to-one row always binds. With covariates and a fixed `V`, the
/// inner problem pins `D_E β`, so every positive-weight covariate row binds;
/// rows that are constant on `A` are implied by the sum row and drop out.
fn binding_constraints(fit: &ScFit, cov: Option<&Covariates>, a: &[usize]) -> Result<DMatrix<f64>> {
    let e = &fit.sets.e;
    let mut rows = DMatrix::from_element(1, a.len(), 1.0);
    if !e.is_empty() {
        let cov = cov.ok_or_else(|| Error::InvalidInput("covariate fit requires the covariates".into()))?;
        let de = cov.d.select_rows(e).select_columns(a);
        let mut stacked = DMatrix::zeros(1 + e.len(), a.len());
        stacked.row_mut(0).fill(1.0);
        stacked.view_mut((1, 0), (e.len(), a.len())).copy_from(&de);
        rows = stacked;
    }
    let keep = independent_rows(&rows);
    Ok(rows.select_rows(&keep))
}

fn check_active(fit: &ScFit, x: &DMatrix<f64>) -> Result<()> {
    if fit.weights.beta.len() != x.ncols() || fit.fitted.len() != x.nrows() {
        return Err(Error::InvalidInput("fit does not belong to this donor matrix".into()));
    }
    if fit.sets.a.is_empty() {
        return Err(Error::InvalidInput("empty active set".into()));
    }
    Ok(())
}

/// Divergence of the plain or covariate synthetic control.
pub fn divergence_sc(fit: &ScFit, x: &DMatrix<f64>, cov: Option<&Covariates>) -> Result<DivergenceMatrix> {
    if !matches!(fit.kind, EstimatorKind::Plain | EstimatorKind::Covariate) {
        return Err(Error::InvalidInput(format!("divergence_sc does not apply to {} fits", fit.kind.as_str())));
    }
    check_active(fit, x)?;
    let a = &fit.sets.a;
    let xa = x.select_columns(a);
    let c = binding_constraints(fit, cov, a)?;
    let s = constrained_sensitivity(&xa, &c)?;
    Ok(DivergenceMatrix::new(&xa * s * xa.transpose()))
}

/// Divergence of the penalized estimator (with or without covariates).
///
/// Differentiating the active-set stationarity condition gives
/// `∂β_A/∂Y = S((1+λ)X_Aᵀ − λ·1Yᵀ)`.
pub fn divergence_pen(
    fit: &ScFit,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    cov: Option<&Covariates>,
) -> Result<DivergenceMatrix> {
    if !matches!(fit.kind, EstimatorKind::Penalized | EstimatorKind::Plain) {
        return Err(Error::InvalidInput(format!("divergence_pen does not apply to {} fits", fit.kind.as_str())));
    }
    check_active(fit, x)?;
    let a = &fit.sets.a;
    let xa = x.select_columns(a);
    let c = binding_constraints(fit, cov, a)?;
    let s = constrained_sensitivity(&xa, &c)?;
    let ones = DVector::from_element(a.len(), 1.0);
    let rhs = xa.transpose() * (1.0 + lambda) - ones * y.transpose() * lambda;
    Ok(DivergenceMatrix::new(&xa * (s * rhs)))
}

/// Divergence of MASC: the matching part is locally constant in `Y`.
pub fn divergence_masc(sc_component: &ScFit, lambda: f64, x: &DMatrix<f64>) -> Result<DivergenceMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("MASC weight must lie in [0, 1], got {lambda}")));
    }
    Ok(divergence_sc(sc_component, x, None)?.scaled(1.0 - lambda))
}

/// Divergence of the unconstrained least-squares projection onto `X`.
pub fn ols_divergence(x: &DMatrix<f64>) -> Result<DivergenceMatrix> {
    constrained_ls_divergence(x, &DMatrix::zeros(0, x.ncols()))
}

/// Divergence of equality-constrained least squares, trace `rank(X) − h`.
pub fn constrained_ls_divergence(x: &DMatrix<f64>, d_eq: &DMatrix<f64>) -> Result<DivergenceMatrix> {
    let s = constrained_sensitivity(x, d_eq)?;
    Ok(DivergenceMatrix::new(x * s * x.transpose()))
}

/// Dispatches to the closed-form divergence for any fit.
pub fn analytic_divergence(
    fit: &ScFit,
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    cov: Option<&Covariates>,
) -> Result<DivergenceMatrix> {
    match fit.kind {
        EstimatorKind::Plain | EstimatorKind::Covariate => divergence_sc(fit, x, cov),
        EstimatorKind::Penalized => divergence_pen(fit, x, y, fit.lambda.unwrap_or(0.0), cov),
        EstimatorKind::Masc => {
            let sc = fit
                .sc_component
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("MASC fit without its synthetic-control part".into()))?;
            divergence_masc(sc, fit.lambda.unwrap_or(0.0), x)
        }
        EstimatorKind::Matching => Ok(DivergenceMatrix::zeros(x.nrows())),
    }
}

fn stacked_rank(xa: &DMatrix<f64>, c: &DMatrix<f64>) -> usize {
    let mut m = DMatrix::zeros(xa.nrows() + c.nrows(), xa.ncols());
    m.view_mut((0, 0), (xa.nrows(), xa.ncols())).copy_from(xa);
    m.view_mut((xa.nrows(), 0), (c.nrows(), xa.ncols())).copy_from(c);
    rank(&m)
}

/// Closed-form sample degrees of freedom.
///
/// The constrained-LS count `rank([X_A; C]) − h` is exact for every kind.
/// It reduces to `rank(X_A) − 1` without covariates whenever `X_A` has full
/// column rank. With covariates the two branches `rank(X_A) − 1` (many
/// unmatched weighted rows) and `rank(X_A) − |E\M| − 1` (few) are reported
/// when they agree with it, and `ConstrainedLs` otherwise.
pub fn df_hat(fit: &ScFit, x: &DMatrix<f64>, cov: Option<&Covariates>) -> Result<DofReport> {
    check_active(fit, x)?;
    if fit.kind == EstimatorKind::Masc {
        let sc = fit
            .sc_component
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("MASC fit without its synthetic-control part".into()))?;
        let mut r = df_hat(sc, x, None)?;
        r.df_hat *= 1.0 - fit.lambda.unwrap_or(0.0);
        r.case = DofCase::Masc;
        return Ok(r);
    }
    let a = &fit.sets.a;
    let xa = x.select_columns(a);
    let rank_xa = rank(&xa);
    let me = sorted_intersect(&fit.sets.m, &fit.sets.e);
    let e_minus_m = sorted_minus(&fit.sets.e, &fit.sets.m);
    let mut report = DofReport {
        df_hat: 0.0,
        case: DofCase::Matching,
        rank_xa,
        size_a: a.len(),
        size_m_cap_e: me.len(),
        size_e_minus_m: e_minus_m.len(),
        constraint_rank: 0,
    };
    if fit.kind == EstimatorKind::Matching {
        return Ok(report);
    }
    let c = binding_constraints(fit, cov, a)?;
    report.constraint_rank = c.nrows();
    let exact = (stacked_rank(&xa, &c) - c.nrows()) as f64;
    let has_cov = !fit.sets.e.is_empty();
    let (df, case) = if has_cov {
        let (predicted, branch) = if me.len() + 1 >= a.len() {
            (rank_xa as f64 - 1.0, DofCase::CovMany)
        } else {
            (rank_xa as f64 - e_minus_m.len() as f64 - 1.0, DofCase::CovFew)
        };
        if (predicted - exact).abs() < 0.5 {
            (exact, branch)
        } else {
            (exact, DofCase::ConstrainedLs)
        }
    } else {
        (exact, DofCase::Plain)
    };
    report.df_hat = df;
    report.case = case;
    if fit.kind == EstimatorKind::Penalized {
        report.df_hat *= 1.0 + fit.lambda.unwrap_or(0.0);
        if !has_cov || case != DofCase::ConstrainedLs {
            report.case = DofCase::Penalized;
        }
    }
    Ok(report)
}

/// Outcome of the finite-difference divergence oracle.
#[derive(Debug, Clone)]
pub struct FdResult {
    pub divergence: DivergenceMatrix,
    /// Some perturbed solve changed the active sets, so the comparison with
    /// the analytic divergence is not meaningful.
    pub active_set_changed: bool,
}

/// Relative finite-difference step used by default.
pub const FD_STEP: f64 = 1e-5;

/// Central differences `(Ŷ(Y + h e_i) − Ŷ(Y − h e_i)) / 2h`, column by column.
///
/// `step` is relative to `‖Y‖∞`. The solver returns fitted values and the
/// active sets; any change of sets at a perturbed point is flagged.
pub fn divergence_fd_oracle<F>(solver: F, y: &DVector<f64>, step: f64, mode: ExecMode) -> Result<FdResult>
where
    F: Fn(&DVector<f64>) -> Result<(DVector<f64>, ActiveSets)> + Sync + Send,
{
    if !(step > 0.0) {
        return Err(Error::InvalidInput("finite-difference step must be positive".into()));
    }
    let n = y.len();
    let h = step * y.amax().max(1.0);
    let (_, base_sets) = solver(y)?;
    let cols = map_indexed(mode, n, |i| -> Result<(DVector<f64>, bool)> {
        let mut up = y.clone();
        up[i] += h;
        let mut down = y.clone();
        down[i] -= h;
        let (fu, su) = solver(&up)?;
        let (fd, sd) = solver(&down)?;
        let changed = su != base_sets || sd != base_sets;
        Ok(((fu - fd) / (2.0 * h), changed))
    });
    let mut matrix = DMatrix::zeros(n, n);
    let mut changed = false;
    for (i, c) in cols.into_iter().enumerate() {
        let (col, flip) = c?;
        matrix.set_column(i, &col);
        changed |= flip;
    }
    if changed {
        log::info!("active set changed under finite-difference perturbation");
    }
    Ok(FdResult {
        divergence: DivergenceMatrix::new(matrix),
        active_set_changed: changed,
    })
}

/// Adapter turning a fit into the oracle's `(fitted, sets)` pair.
pub fn fd_output(fit: ScFit) -> (DVector<f64>, ActiveSets) {
    (fit.fitted, fit.sets)
}
