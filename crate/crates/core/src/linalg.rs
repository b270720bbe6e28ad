//! Small dense linear-algebra helpers shared by the solvers and the
//! divergence formulas.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative tolerance for numerical rank decisions.
pub const RANK_RTOL: f64 = 1e-10;

/// Numerical rank from a column-pivoted QR factorization.
pub fn rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let r = m.clone().col_piv_qr().r();
    let k = r.nrows().min(r.ncols());
    let diag: Vec<f64> = (0..k).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().cloned().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    diag.iter().filter(|&&d| d > RANK_RTOL * largest).count()
}

/// Greedy order-preserving selection of linearly independent rows.
///
/// Earlier rows win, so a leading row of ones is always kept.
pub fn independent_rows(m: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for i in 0..m.nrows() {
        let mut v: DVector<f64> = m.row(i).transpose();
        let norm0 = v.norm();
        if norm0 <= RANK_RTOL * scale {
            continue;
        }
        // two passes of Gram-Schmidt for stability
        for _ in 0..2 {
            for q in &basis {
                let c = q.dot(&v);
                v.axpy(-c, q, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-9 * norm0 {
            basis.push(v / norm);
            keep.push(i);
        }
    }
    keep
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse(m: &DMatrix<f64>, block: &'static str) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let chol = m.clone().cholesky().ok_or(Error::Singular { block })?;
    let inv = chol.inverse();
    // Cholesky succeeds on some numerically singular matrices; reject those.
    let diag_max = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max);
    let l = chol.l();
    let lmin = (0..m.nrows()).map(|i| l[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if lmin * lmin <= 1e-13 * diag_max {
        return Err(Error::Singular { block });
    }
    Ok(inv)
}

/// Outcome of a KKT system solve.
pub(crate) enum Kkt {
    Solved { x: DVector<f64> },
    Inconsistent,
}

fn assemble_kkt(h: &DMatrix<f64>, c: &DMatrix<f64>) -> DMatrix<f64> {
    let k = h.nrows();
    let m = c.nrows();
    let mut kk = DMatrix::zeros(k + m, k + m);
    kk.view_mut((0, 0), (k, k)).copy_from(h);
    if m > 0 {
        kk.view_mut((k, 0), (m, k)).copy_from(c);
        kk.view_mut((0, k), (k, m)).copy_from(&c.transpose());
    }
    kk
}

/// Solves `[H C'; C 0] [x; nu] = [r1; r2]`.
///
/// LU first; if the pivots look singular fall back to an SVD least-squares
/// solve and report inconsistency when the residual does not vanish.
pub(crate) fn solve_kkt(
    h: &DMatrix<f64>,
    c: &DMatrix<f64>,
    r1: &DVector<f64>,
    r2: &DVector<f64>,
) -> Kkt {
    let k = h.nrows();
    let m = c.nrows();
    let kk = assemble_kkt(h, c);
    let mut rhs = DVector::zeros(k + m);
    rhs.rows_mut(0, k).copy_from(r1);
    rhs.rows_mut(k, m).copy_from(r2);
    let split = |s: DVector<f64>| Kkt::Solved {
        x: s.rows(0, k).into_owned(),
    };

    let lu = kk.clone().lu();
    let u = lu.u();
    let n = k + m;
    let umax = (0..n).map(|i| u[(i, i)].abs()).fold(0.0, f64::max);
    let umin = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if umax > 0.0 && umin > 1e-11 * umax {
        if let Some(s) = lu.solve(&rhs) {
            return split(s);
        }
    }

    let svd = kk.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let eps = (1e-11 * smax).max(f64::MIN_POSITIVE);
    let s = match svd.solve(&rhs, eps) {
        Ok(s) => s,
        Err(_) => return Kkt::Inconsistent,
    };
    let resid = (&kk * &s - &rhs).amax();
    let scale = kk.amax() * s.amax() + rhs.amax() + f64::MIN_POSITIVE;
    if resid <= 1e-9 * scale {
        split(s)
    } else {
        Kkt::Inconsistent
    }
}

/// Orthogonal projector onto `null(H) ∩ null(C)`, applied to `g` and negated.
///
/// Used as a zero-curvature descent direction when the working-set KKT
/// system has no solution.
pub(crate) fn null_space_descent(
    h: &DMatrix<f64>,
    c: &DMatrix<f64>,
    g: &DVector<f64>,
) -> DVector<f64> {
    let k = h.ncols();
    let m = c.nrows();
    let mut stacked = DMatrix::zeros(k + m, k);
    stacked.view_mut((0, 0), (k, k)).copy_from(h);
    if m > 0 {
        stacked.view_mut((k, 0), (m, k)).copy_from(c);
    }
    let svd = stacked.svd(false, true);
    let vt = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.max();
    let mut d = DVector::zeros(k);
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s <= 1e-10 * smax.max(f64::MIN_POSITIVE) {
            let v = vt.row(i).transpose();
            let coef = v.dot(g);
            d.axpy(-coef, &v, 1.0);
        }
    }
    d
}

/// Minimum-norm least-squares solution of `a x ≈ b`.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    if a.nrows() == 0 {
        return DVector::zeros(a.ncols());
    }
    let svd = a.clone().svd(true, true);
    let eps = (1e-12 * svd.singular_values.max()).max(f64::MIN_POSITIVE);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Moore-Penrose pseudo-inverse with a relative singular-value cutoff.
pub fn pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    if a.nrows() == 0 || a.ncols() == 0 {
        return DMatrix::zeros(a.ncols(), a.nrows());
    }
    let svd = a.clone().svd(true, true);
    let eps = (RANK_RTOL * svd.singular_values.max()).max(f64::MIN_POSITIVE);
    svd.pseudo_inverse(eps).expect("eps is nonnegative")
}

/// Map `S` with `∂β/∂(X'Y) = S` for `min ½‖Y−Xβ‖² s.t. Cβ = b`.
///
/// Closed form `G⁻¹ − G⁻¹C'(CG⁻¹C')⁻¹CG⁻¹` when `G = X'X` is invertible,
/// otherwise the top-left block of the (pseudo-)inverse KKT matrix.
pub fn constrained_sensitivity(x: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let g = x.transpose() * x;
    let k = g.nrows();
    if rank(x) == k {
        let gi = spd_inverse(&g, "X_A'X_A")?;
        if c.nrows() == 0 {
            return Ok(gi);
        }
        let cg = c * &gi;
        let schur = &cg * c.transpose();
        let schur_inv = spd_inverse(&schur, "D* G_A^-1 D*'")?;
        return Ok(&gi - cg.transpose() * schur_inv * cg);
    }
    let kk = assemble_kkt(&g, c);
    if rank(&kk) < kk.nrows() {
        return Err(Error::Singular { block: "KKT[X_A'X_A, D*']" });
    }
    let inv = kk.try_inverse().ok_or(Error::Singular { block: "KKT[X_A'X_A, D*']" })?;
    Ok(inv.view((0, 0), (k, k)).into_owned())
}

/// Sorted set difference helper.
pub fn sorted_minus(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().filter(|i| !b.contains(i)).copied().collect()
}

/// Sorted set intersection helper.
pub fn sorted_intersect(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().filter(|i| b.contains(i)).copied().collect()
}
