mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use synthsel::divergence::*;
use synthsel::linalg::rank;
use synthsel::qp::*;
use synthsel::{ExecMode, Result};

fn opts() -> SolveOptions {
    SolveOptions::default()
}

fn plain_solver(x: DMatrix<f64>) -> impl Fn(&DVector<f64>) -> Result<(DVector<f64>, ActiveSets)> + Sync + Send {
    move |y| solve_sc(y, &x, &opts()).map(fd_output)
}

#[test]
fn single_active_donor_has_zero_divergence() {
    let mut r = rng(20);
    let x = gaussian_mat(&mut r, 8, 4);
    let y = x.column(2) + gaussian_vec(&mut r, 8) * 1e-3;
    let f = solve_penalized_sc(&y, &x, 50.0, &opts()).unwrap();
    assert_eq!(f.sets.a, vec![2]);
    let sc = solve_sc(&x.column(2).into_owned(), &x, &opts()).unwrap();
    assert_eq!(sc.sets.a.len(), 1);
    let d = divergence_sc(&sc, &x, None).unwrap();
    assert!(d.matrix.amax() < 1e-12);
}

#[test]
fn plain_trace_is_active_count_minus_one() {
    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let x = gaussian_mat(&mut r, 25, 12);
        let y = gaussian_vec(&mut r, 25);
        let f = solve_sc(&y, &x, &opts()).unwrap();
        let d = divergence_sc(&f, &x, None).unwrap();
        assert!((d.trace - (f.sets.a.len() as f64 - 1.0)).abs() < 1e-10);
        assert!((&d.matrix - d.matrix.transpose()).amax() < 1e-10);
    }
}

#[test]
fn penalized_divergence_examples() {
    let mut r = rng(21);
    let x = gaussian_mat(&mut r, 30, 10);
    let y = gaussian_vec(&mut r, 30);
    let f0 = solve_penalized_sc(&y, &x, 0.0, &opts()).unwrap();
    let sc = solve_sc(&y, &x, &opts()).unwrap();
    let a = divergence_pen(&f0, &x, &y, 0.0, None).unwrap();
    let b = divergence_sc(&sc, &x, None).unwrap();
    assert!((a.matrix - b.matrix).amax() < 1e-12);

    // find an instance whose penalized fit at 0.5 has five active donors
    let mut found = false;
    for seed in 0..200 {
        let mut r = rng(1000 + seed);
        let x = gaussian_mat(&mut r, 30, 10);
        let y = gaussian_vec(&mut r, 30);
        let f = solve_penalized_sc(&y, &x, 0.5, &opts()).unwrap();
        if f.sets.a.len() == 5 {
            let d = divergence_pen(&f, &x, &y, 0.5, None).unwrap();
            assert!((d.trace - 6.0).abs() < 1e-10);
            found = true;
            break;
        }
    }
    assert!(found);
}

#[test]
fn masc_divergence_examples() {
    let mut found = false;
    for seed in 0..200 {
        let mut r = rng(2000 + seed);
        let x = gaussian_mat(&mut r, 30, 10);
        let y = gaussian_vec(&mut r, 30);
        let sc = solve_sc(&y, &x, &opts()).unwrap();
        let one = divergence_masc(&sc, 1.0, &x).unwrap();
        assert!(one.matrix.amax() == 0.0);
        let zero = divergence_masc(&sc, 0.0, &x).unwrap();
        assert!((zero.matrix - divergence_sc(&sc, &x, None).unwrap().matrix).amax() == 0.0);
        if sc.sets.a.len() == 5 {
            assert!((divergence_masc(&sc, 0.25, &x).unwrap().trace - 3.0).abs() < 1e-10);
            found = true;
            break;
        }
    }
    assert!(found);
}

#[test]
fn df_hat_examples() {
    // plain fit with four affinely independent active donors
    let mut r = rng(22);
    let x = gaussian_mat(&mut r, 20, 4);
    let y = &x * DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]) + gaussian_vec(&mut r, 20) * 0.01;
    let f = solve_sc(&y, &x, &opts()).unwrap();
    let rep = df_hat(&f, &x, None).unwrap();
    assert_eq!(rep.rank_xa, 4);
    assert_eq!(rep.df_hat, 3.0);
    assert_eq!(rep.case, DofCase::Plain);

    // covariate fit: six active donors, two exactly matched weighted rows
    let (y, x, cov) = exact_covariate_instance(23, 20, 6, 6, 2, 0.01);
    let v = DVector::from_vec(vec![0.5, 0.5]);
    let f = solve_sc_cov_inner(&y, &x, &cov, &v, &opts()).unwrap();
    let rep = df_hat(&f, &x, Some(&cov)).unwrap();
    assert_eq!((rep.rank_xa, rep.size_e_minus_m, rep.size_m_cap_e), (6, 2, 0));
    assert_eq!(rep.df_hat, 3.0);
    assert_eq!(rep.case, DofCase::CovFew);

    // masc at lambda = 1
    let f = solve_masc(&y, &x, 1.0, 3, &opts()).unwrap();
    let rep = df_hat(&f, &x, None).unwrap();
    assert_eq!(rep.df_hat, 0.0);
    assert_eq!(rep.case, DofCase::Masc);
}

#[test]
fn interpolating_fit_has_full_divergence() {
    // n + 1 active donors reproduce Y exactly: df = n, not rank(X_A) - 1
    let x = DMatrix::from_row_slice(2, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    let y = DVector::from_vec(vec![0.3, 0.3]);
    let f = solve_sc(&y, &x, &opts()).unwrap();
    assert_eq!(f.sets.a.len(), 3);
    let d = divergence_sc(&f, &x, None).unwrap();
    assert!((d.trace - 2.0).abs() < 1e-10);
    assert_eq!(df_hat(&f, &x, None).unwrap().df_hat, 2.0);
}

#[test]
fn fd_oracle_recovers_affine_and_constant_maps() {
    let mut r = rng(24);
    let h = gaussian_mat(&mut r, 6, 6);
    let c = gaussian_vec(&mut r, 6);
    let y = gaussian_vec(&mut r, 6);
    let (hh, cc) = (h.clone(), c.clone());
    let res = divergence_fd_oracle(move |y| Ok((&hh * y + &cc, ActiveSets::default())), &y, FD_STEP, ExecMode::Parallel).unwrap();
    assert!((res.divergence.matrix - h).amax() < 1e-9);
    assert!(!res.active_set_changed);
    let res = divergence_fd_oracle(move |_| Ok((c.clone(), ActiveSets::default())), &y, FD_STEP, ExecMode::Sequential).unwrap();
    assert!(res.divergence.matrix.amax() == 0.0);
}

#[test]
fn fd_oracle_agrees_with_plain_formula() {
    let mut r = rng(25);
    let x = gaussian_mat(&mut r, 15, 8);
    let y = gaussian_vec(&mut r, 15);
    let f = solve_sc(&y, &x, &opts()).unwrap();
    let analytic = divergence_sc(&f, &x, None).unwrap();
    let fd = divergence_fd_oracle(plain_solver(x.clone()), &y, FD_STEP, ExecMode::Parallel).unwrap();
    assert!(!fd.active_set_changed);
    assert!((analytic.matrix - fd.divergence.matrix).amax() <= 1e-5);
}

#[test]
fn fd_oracle_agrees_with_penalized_formula() {
    let mut r = rng(26);
    let x = gaussian_mat(&mut r, 15, 8);
    let y = gaussian_vec(&mut r, 15);
    let f = solve_penalized_sc(&y, &x, 0.3, &opts()).unwrap();
    let analytic = divergence_pen(&f, &x, &y, 0.3, None).unwrap();
    let xx = x.clone();
    let fd = divergence_fd_oracle(move |y| solve_penalized_sc(y, &xx, 0.3, &opts()).map(fd_output), &y, FD_STEP, ExecMode::Parallel).unwrap();
    assert!(!fd.active_set_changed);
    assert!((analytic.matrix - fd.divergence.matrix).amax() <= 1e-5);
}

#[test]
fn fd_oracle_agrees_with_covariate_formulas() {
    let v2 = DVector::from_vec(vec![0.5, 0.5]);
    let (y, x, cov) = exact_covariate_instance(27, 12, 5, 5, 2, 0.05);
    let f = solve_sc_cov_inner(&y, &x, &cov, &v2, &opts()).unwrap();
    assert_eq!(df_hat(&f, &x, Some(&cov)).unwrap().case, DofCase::CovFew);
    let analytic = divergence_sc(&f, &x, Some(&cov)).unwrap();
    let (xx, cc, vv) = (x.clone(), cov.clone(), v2.clone());
    let fd = divergence_fd_oracle(move |y| solve_sc_cov_inner(y, &xx, &cc, &vv, &opts()).map(fd_output), &y, FD_STEP, ExecMode::Parallel).unwrap();
    assert!(!fd.active_set_changed);
    assert!((analytic.matrix - fd.divergence.matrix).amax() <= 1e-5);
    assert!((analytic.trace - 2.0).abs() < 1e-9);

    let v3 = DVector::from_vec(vec![0.4, 0.3, 0.3]);
    let (y, x, cov) = clustered_covariate_instance(28, 12, 4, 3, 0.05);
    let f = solve_sc_cov_inner(&y, &x, &cov, &v3, &opts()).unwrap();
    let rep = df_hat(&f, &x, Some(&cov)).unwrap();
    assert_eq!(rep.case, DofCase::CovMany);
    assert_eq!(rep.df_hat, rep.rank_xa as f64 - 1.0);
    let analytic = divergence_sc(&f, &x, Some(&cov)).unwrap();
    let (xx, cc) = (x.clone(), cov.clone());
    let fd = divergence_fd_oracle(move |y| solve_sc_cov_inner(y, &xx, &cc, &v3, &opts()).map(fd_output), &y, FD_STEP, ExecMode::Parallel).unwrap();
    assert!(!fd.active_set_changed);
    assert!((analytic.matrix - fd.divergence.matrix).amax() <= 1e-5);
}

#[test]
fn ols_and_constrained_ls_traces() {
    let mut r = rng(29);
    let x = gaussian_mat(&mut r, 30, 6);
    assert!((ols_divergence(&x).unwrap().trace - 6.0).abs() < 1e-10);
    let d = gaussian_mat(&mut r, 2, 6);
    let t = constrained_ls_divergence(&x, &d).unwrap().trace;
    assert!((t - (rank(&x) as f64 - 2.0)).abs() < 1e-10);
}

#[test]
fn wrong_kind_is_rejected() {
    let mut r = rng(30);
    let x = gaussian_mat(&mut r, 10, 4);
    let y = gaussian_vec(&mut r, 10);
    let f = solve_masc(&y, &x, 0.5, 2, &opts()).unwrap();
    assert!(divergence_sc(&f, &x, None).is_err());
    assert!(divergence_masc(&f, 2.0, &x).is_err());
    assert!(divergence_fd_oracle(plain_solver(x.clone()), &y, 0.0, ExecMode::Sequential).is_err());
}
