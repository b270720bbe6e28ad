//! Synthetic-control weight solvers.
//!
//! All estimators share one active-set engine over the simplex
//! `{β ≥ 0, 1ᵀβ = 1}`. The penalty only shifts the linear term, and the
//! covariate estimator adds equality rows to the same engine.

mod engine;
mod fit;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::linalg::{independent_rows, rank, spd_inverse};
use crate::panel::{duplicate_columns, Covariates};

pub use fit::{ActiveSets, ActiveTolerances, EstimatorKind, KktCertificate, ScFit, Weights};

pub(crate) use engine::{Options as EngineOptions, Problem, Solution};

pub(crate) fn run_engine(pb: &Problem, start: DVector<f64>, opts: EngineOptions) -> Result<Solution> {
    engine::solve(pb, start, opts)
}

/// Solver settings shared by every estimator.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub kkt_tol: f64,
    /// Defaults to `50·(p + rows) + 100` when unset.
    pub max_iter: Option<usize>,
    /// Re-derive the active set through a tiny-penalty solve when the
    /// weights are not unique.
    pub canonicalize: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            kkt_tol: 1e-8,
            max_iter: None,
            canonicalize: true,
        }
    }
}

/// Penalty added when canonicalizing degenerate solutions.
pub const CANONICAL_LAMBDA: f64 = 1e-8;

impl SolveOptions {
    fn engine(&self, p: usize, rows: usize) -> EngineOptions {
        EngineOptions {
            max_iter: self.max_iter.unwrap_or(50 * (p + rows) + 100),
            kkt_tol: self.kkt_tol,
        }
    }
}

/// Squared distances `‖Y − X_j‖²` of the treated unit to each donor.
pub fn donor_distances(y: &DVector<f64>, x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| (y - c).norm_squared()))
}

fn check_dims(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::InvalidInput(format!(
            "outcome has {} rows, donor matrix has {}",
            y.len(),
            x.nrows()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidInput("no donors".into()));
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite input".into()));
    }
    Ok(())
}

/// Result of the closed-form equality-constrained least-squares solve.
#[derive(Debug, Clone)]
pub struct ConstrainedLsSolution {
    pub beta: DVector<f64>,
    /// `S = G⁻¹ − G⁻¹Dᵀ(DG⁻¹Dᵀ)⁻¹DG⁻¹`, so that `∂β/∂Y = S Xᵀ`.
    pub sensitivity: DMatrix<f64>,
    pub rank_x: usize,
    pub constraint_count: usize,
}

impl ConstrainedLsSolution {
    /// `∂(Xβ)/∂Y = X S Xᵀ`.
    pub fn hat_matrix(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        x * &self.sensitivity * x.transpose()
    }
}

/// `min ½‖Y − Xβ‖²` subject to `D β = z`, without sign constraints.
pub fn solve_constrained_ls(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    d_eq: &DMatrix<f64>,
    z_eq: &DVector<f64>,
) -> Result<ConstrainedLsSolution> {
    check_dims(y, x)?;
    if d_eq.nrows() > 0 && d_eq.ncols() != x.ncols() {
        return Err(Error::InvalidInput("constraint matrix width differs from donor count".into()));
    }
    if d_eq.nrows() != z_eq.len() {
        return Err(Error::InvalidInput("constraint rows and right-hand side differ in length".into()));
    }
    let p = x.ncols();
    if rank(x) < p {
        return Err(Error::Singular { block: "X'X" });
    }
    let g = x.transpose() * x;
    let gi = spd_inverse(&g, "X'X")?;
    let xty = x.transpose() * y;
    let unconstrained = &gi * &xty;
    if d_eq.nrows() == 0 {
        return Ok(ConstrainedLsSolution {
            beta: unconstrained,
            sensitivity: gi,
            rank_x: p,
            constraint_count: 0,
        });
    }
    let dg = d_eq * &gi;
    let schur = &dg * d_eq.transpose();
    let schur_inv = spd_inverse(&schur, "D(X'X)^-1D'")?;
    let shift = &dg.transpose() * (&schur_inv * (d_eq * &unconstrained - z_eq));
    let beta = unconstrained - shift;
    let sensitivity = &gi - dg.transpose() * &schur_inv * &dg;
    Ok(ConstrainedLsSolution {
        beta,
        sensitivity,
        rank_x: p,
        constraint_count: d_eq.nrows(),
    })
}

/// Vertex of the simplex with the smallest objective value.
fn best_vertex(h: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    let p = c.len();
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for j in 0..p {
        let v = 0.5 * h[(j, j)] + c[j];
        if v < best_val {
            best_val = v;
            best = j;
        }
    }
    let mut x = DVector::zeros(p);
    x[best] = 1.0;
    x
}

fn ones_row(p: usize) -> DMatrix<f64> {
    DMatrix::from_element(1, p, 1.0)
}

/// Simplex QP for `½‖Y − Xβ‖² + ½λ Σ β_j ‖Y − X_j‖²`.
fn simplex_ls(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    opts: &SolveOptions,
) -> Result<Solution> {
    let p = x.ncols();
    let h = x.transpose() * x;
    let mut c = -(x.transpose() * y);
    if lambda > 0.0 {
        c += donor_distances(y, x) * (0.5 * lambda);
    }
    let eq = ones_row(p);
    let rhs = DVector::from_element(1, 1.0);
    let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
    engine::solve(&pb, best_vertex(&h, &c), opts.engine(p, 1))
}

/// `true` when the minimizing weights are not unique on the active set.
fn weights_not_unique(x: &DMatrix<f64>, active: &[usize]) -> bool {
    if active.len() <= 1 {
        return false;
    }
    let xa = x.select_columns(active);
    let mut aug = DMatrix::zeros(xa.nrows() + 1, active.len());
    aug.view_mut((0, 0), (xa.nrows(), active.len())).copy_from(&xa);
    aug.row_mut(xa.nrows()).fill(1.0);
    rank(&aug) < active.len()
}

/// Re-solves on the support picked by a tiny extra penalty.
fn canonical_solution(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    opts: &SolveOptions,
    current: &Solution,
) -> Option<Solution> {
    let tiny = simplex_ls(y, x, lambda + CANONICAL_LAMBDA, opts).ok()?;
    let tol = 1e-8 * (1.0 + tiny.x.amax());
    let support: Vec<usize> = (0..x.ncols()).filter(|&j| tiny.x[j] > tol).collect();
    let xs = x.select_columns(&support);
    let sub = simplex_ls_from(y, &xs, lambda, opts, tiny.x.select_rows(&support)).ok()?;
    let mut full = DVector::zeros(x.ncols());
    for (pos, &j) in support.iter().enumerate() {
        full[j] = sub.x[pos];
    }
    let h = x.transpose() * x;
    let mut c = -(x.transpose() * y);
    if lambda > 0.0 {
        c += donor_distances(y, x) * (0.5 * lambda);
    }
    let eq = ones_row(x.ncols());
    let rhs = DVector::from_element(1, 1.0);
    let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
    let scale = pb.scale();
    if pb.objective(&full) > pb.objective(&current.x) + 1e-12 * scale {
        return None;
    }
    // warm start at the canonical point; the engine only certifies it
    engine::solve(&pb, full, opts.engine(x.ncols(), 1)).ok()
}

fn simplex_ls_from(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    opts: &SolveOptions,
    start: DVector<f64>,
) -> Result<Solution> {
    let p = x.ncols();
    let h = x.transpose() * x;
    let mut c = -(x.transpose() * y);
    if lambda > 0.0 {
        c += donor_distances(y, x) * (0.5 * lambda);
    }
    let eq = ones_row(p);
    let rhs = DVector::from_element(1, 1.0);
    let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
    let total = start.sum();
    let start = if total > 0.0 { start / total } else { best_vertex(&h, &c) };
    engine::solve(&pb, start, opts.engine(p, 1))
}

fn warn_duplicates(x: &DMatrix<f64>) {
    let dups = duplicate_columns(x);
    if !dups.is_empty() {
        log::warn!("identical donor columns {dups:?}; weights among them are not unique");
    }
}

fn penalized_core(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    kind: EstimatorKind,
    opts: &SolveOptions,
) -> Result<ScFit> {
    check_dims(y, x)?;
    warn_duplicates(x);
    let mut sol = simplex_ls(y, x, lambda, opts)?;
    let active = fit::threshold_active(&sol.x, None);
    let mut degenerate = weights_not_unique(x, &active);
    if degenerate && opts.canonicalize {
        if let Some(canon) = canonical_solution(y, x, lambda, opts, &sol) {
            sol = canon;
            degenerate = weights_not_unique(x, &fit::threshold_active(&sol.x, None));
        }
    }
    let lam = if kind == EstimatorKind::Penalized { Some(lambda) } else { None };
    let mut out = ScFit::from_solution(kind, y, x, &sol, lam);
    out.degenerate = degenerate;
    Ok(out)
}

/// Plain synthetic control: `min ‖Y − Xβ‖` over the simplex.
pub fn solve_sc(y: &DVector<f64>, x: &DMatrix<f64>, opts: &SolveOptions) -> Result<ScFit> {
    penalized_core(y, x, 0.0, EstimatorKind::Plain, opts)
}

/// Penalized synthetic control with donor-distance penalty weight `lambda`.
pub fn solve_penalized_sc(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    opts: &SolveOptions,
) -> Result<ScFit> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidInput(format!("penalty must be finite and nonnegative, got {lambda}")));
    }
    penalized_core(y, x, lambda, EstimatorKind::Penalized, opts)
}

/// Weight `1/m` on the `m` donors closest to the treated unit.
pub fn matching_weights(y: &DVector<f64>, x: &DMatrix<f64>, m: usize) -> Result<Weights> {
    check_dims(y, x)?;
    let p = x.ncols();
    if m == 0 || m > p {
        return Err(Error::InvalidInput(format!("matching count must be in 1..={p}, got {m}")));
    }
    let dist = donor_distances(y, x);
    let mut order: Vec<usize> = (0..p).collect();
    // stable sort keeps lower column indices first among ties
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]));
    let mut beta = DVector::zeros(p);
    for &j in &order[..m] {
        beta[j] = 1.0 / m as f64;
    }
    Ok(Weights::new(beta))
}

/// Matching estimator as a fit.
pub fn matching_fit(y: &DVector<f64>, x: &DMatrix<f64>, m: usize) -> Result<ScFit> {
    let w = matching_weights(y, x, m)?;
    let mut out = ScFit::from_weights(EstimatorKind::Matching, y, x, w.beta);
    out.m = Some(m);
    Ok(out)
}

/// `λ·matching(m) + (1 − λ)·synthetic control`.
pub fn solve_masc(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    m: usize,
    opts: &SolveOptions,
) -> Result<ScFit> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("MASC weight must lie in [0, 1], got {lambda}")));
    }
    let sc = solve_sc(y, x, opts)?;
    let ma = matching_fit(y, x, m)?;
    Ok(ScFit::masc(lambda, m, y, sc, &ma))
}

/// Plain synthetic control under covariate balancing with fixed diagonal `V`.
pub fn solve_sc_cov_inner(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    cov: &Covariates,
    v: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<ScFit> {
    covariate_core(y, x, cov, v, 0.0, opts)
}

/// Penalized variant of [`solve_sc_cov_inner`].
pub fn solve_penalized_sc_cov_inner(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    cov: &Covariates,
    v: &DVector<f64>,
    lambda: f64,
    opts: &SolveOptions,
) -> Result<ScFit> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::InvalidInput(format!("penalty must be finite and nonnegative, got {lambda}")));
    }
    covariate_core(y, x, cov, v, lambda, opts)
}

fn covariate_core(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    cov: &Covariates,
    v: &DVector<f64>,
    lambda: f64,
    opts: &SolveOptions,
) -> Result<ScFit> {
    check_dims(y, x)?;
    let p = x.ncols();
    if cov.d.nrows() > 0 && cov.d.ncols() != p {
        return Err(Error::InvalidInput("covariate matrix width differs from donor count".into()));
    }
    if v.len() != cov.len() {
        return Err(Error::InvalidInput(format!(
            "V has {} entries for {} covariate rows",
            v.len(),
            cov.len()
        )));
    }
    let kind = if lambda > 0.0 { EstimatorKind::Penalized } else { EstimatorKind::Covariate };
    if cov.is_empty() {
        let mut f = penalized_core(y, x, lambda, kind, opts)?;
        f.v = Some(v.clone());
        f.covariate_residuals = Some(DVector::zeros(0));
        return Ok(f);
    }
    if v.iter().any(|&w| !w.is_finite() || w < 0.0) || v.amax() == 0.0 {
        return Err(Error::InvalidInput("V must be nonnegative and not all zero".into()));
    }
    warn_duplicates(x);
    let weight_tol = fit::WEIGHT_RTOL * v.amax();
    let e: Vec<usize> = (0..v.len()).filter(|&i| v[i] > weight_tol).collect();
    let de = cov.d.select_rows(&e);
    let ze = cov.z.select_rows(&e);
    let ve = v.select_rows(&e);

    // inner: min ‖Z_E − D_E β‖²_V over the simplex
    let dv = DMatrix::from_fn(de.nrows(), p, |i, j| de[(i, j)] * ve[i]);
    let h_in = de.transpose() * &dv;
    let c_in = -(dv.transpose() * &ze);
    let eq1 = ones_row(p);
    let one = DVector::from_element(1, 1.0);
    let inner_pb = Problem { h: &h_in, c: &c_in, eq: &eq1, rhs: &one };
    let inner = engine::solve(&inner_pb, best_vertex(&h_in, &c_in), opts.engine(p, 1))?;
    let target = &de * &inner.x;

    // outer: best outcome fit among the inner minimizers
    let mut stacked = DMatrix::zeros(1 + e.len(), p);
    stacked.row_mut(0).fill(1.0);
    stacked.view_mut((1, 0), (e.len(), p)).copy_from(&de);
    let mut rhs_all = DVector::zeros(1 + e.len());
    rhs_all[0] = 1.0;
    rhs_all.rows_mut(1, e.len()).copy_from(&target);
    let keep = independent_rows(&stacked);
    let eq = stacked.select_rows(&keep);
    let rhs = rhs_all.select_rows(&keep);
    let h = x.transpose() * x;
    let mut c = -(x.transpose() * y);
    if lambda > 0.0 {
        c += donor_distances(y, x) * (0.5 * lambda);
    }
    let pb = Problem { h: &h, c: &c, eq: &eq, rhs: &rhs };
    let outer = engine::solve(&pb, inner.x.clone(), opts.engine(p, eq.nrows()))?;

    let lam = if lambda > 0.0 { Some(lambda) } else { None };
    let mut out = ScFit::from_solution(kind, y, x, &outer, lam);
    let resid = &cov.d * &out.weights.beta - &cov.z;
    out.covariate_scale = 1.0 + cov.z.amax().max(cov.d.amax());
    out.covariate_residuals = Some(resid);
    out.v = Some(v.clone());
    out.kkt.attach_covariate_multipliers(&outer, &keep, &inner);
    out.sets = fit::compute_sets(&out, &ActiveTolerances::default());
    out.degenerate = weights_not_unique(x, &out.sets.a);
    Ok(out)
}

/// Covariate synthetic control with `V` chosen from a grid by `criterion`.
///
/// Ties go to the lexicographically smallest `V`. Grid points whose solve
/// fails are skipped; if all fail the first error is reported.
pub fn solve_sc_cov<F>(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    cov: &Covariates,
    v_grid: &[DVector<f64>],
    criterion: F,
    opts: &SolveOptions,
    mode: ExecMode,
) -> Result<ScFit>
where
    F: Fn(&ScFit) -> f64 + Sync + Send,
{
    if v_grid.is_empty() {
        return Err(Error::Config("empty V grid".into()));
    }
    let results = map_indexed(mode, v_grid.len(), |i| {
        solve_sc_cov_inner(y, x, cov, &v_grid[i], opts).map(|f| {
            let s = criterion(&f);
            (f, s)
        })
    });
    let mut best: Option<(usize, f64)> = None;
    let mut first_err = None;
    for (i, r) in results.iter().enumerate() {
        match r {
            Ok((_, s)) => {
                let better = match best {
                    None => true,
                    Some((b, bs)) => {
                        *s < bs - 1e-12 * (1.0 + bs.abs())
                            || ((*s - bs).abs() <= 1e-12 * (1.0 + bs.abs()) && lex_less(&v_grid[i], &v_grid[b]))
                    }
                };
                if better {
                    best = Some((i, *s));
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e.to_string());
                }
            }
        }
    }
    match best {
        Some((i, _)) => Ok(results.into_iter().nth(i).unwrap().unwrap().0),
        None => Err(Error::AllFitsFailed {
            count: v_grid.len(),
            first: first_err.unwrap_or_default(),
        }),
    }
}

/// Lexicographic comparison of two weight vectors.
pub fn lex_less(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    a.len() < b.len()
}

/// Default V grid: simplex vertices, the barycenter and the step-1/4 lattice.
pub fn default_v_grid(n_cov: usize) -> Vec<DVector<f64>> {
    if n_cov == 0 {
        return vec![DVector::zeros(0)];
    }
    let mut out: Vec<DVector<f64>> = Vec::new();
    let mut push = |v: DVector<f64>| {
        if !out.iter().any(|w| (w - &v).amax() < 1e-12) {
            out.push(v);
        }
    };
    for i in 0..n_cov {
        let mut v = DVector::zeros(n_cov);
        v[i] = 1.0;
        push(v);
    }
    push(DVector::from_element(n_cov, 1.0 / n_cov as f64));
    // compositions of 4 quarters into n_cov parts
    let mut parts = vec![0usize; n_cov];
    fn rec(i: usize, left: usize, parts: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
        if i + 1 == parts.len() {
            parts[i] = left;
            out(parts);
            return;
        }
        for k in 0..=left {
            parts[i] = k;
            rec(i + 1, left - k, parts, out);
        }
    }
    let mut lattice = Vec::new();
    rec(0, 4, &mut parts, &mut |c| {
        lattice.push(DVector::from_iterator(c.len(), c.iter().map(|&k| k as f64 / 4.0)))
    });
    for v in lattice {
        push(v);
    }
    out.sort_by(|a, b| {
        if lex_less(a, b) {
            std::cmp::Ordering::Less
        } else if lex_less(b, a) {
            std::cmp::Ordering::Greater
        } else {
            std::cmp::Ordering::Equal
        }
    });
    out
}

/// Thresholded active sets of a fit.
pub fn active_sets(fit: &ScFit, tols: &ActiveTolerances) -> ActiveSets {
    fit::compute_sets(fit, tols)
}
