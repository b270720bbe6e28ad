mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use synthsel::diagnostics::*;
use synthsel::qp::{solve_penalized_sc, solve_sc, ScFit, SolveOptions};
use synthsel::selection::default_penalized_lambdas;
use synthsel::PanelDataset;

fn opts() -> SolveOptions {
    SolveOptions::default()
}

/// Treated unit = mix of three donors plus noise with the given sd profile.
fn hetero_instance(seed: u64, n: usize, sd: impl Fn(usize) -> f64) -> (DVector<f64>, DMatrix<f64>) {
    let mut r = rng(seed);
    let x = gaussian_mat(&mut r, n, 4);
    let e = gaussian_vec(&mut r, n);
    let y = DVector::from_fn(n, |t, _| 0.5 * x[(t, 0)] + 0.3 * x[(t, 1)] + 0.2 * x[(t, 2)] + sd(t) * e[t]);
    (y, x)
}

pub fn white_rejection_rate(sims: usize, n: usize, hetero: bool) -> f64 {
    let mut rejections = 0;
    for s in 0..sims {
        let (y, x) = hetero_instance(1000 + s as u64, n, |t| if hetero { (t + 1) as f64 / n as f64 } else { 1.0 });
        let fit = solve_sc(&y, &x, &opts()).unwrap();
        let rep = white_test(&fit, &x).unwrap();
        if rep.p_value < 0.05 {
            rejections += 1;
        }
    }
    rejections as f64 / sims as f64
}

fn fit_with_residuals(x: &DMatrix<f64>, beta: DVector<f64>, residuals: DVector<f64>) -> ScFit {
    let fitted = x * &beta;
    let y = &fitted + &residuals;
    let mut fit = solve_sc(&y, x, &opts()).unwrap();
    fit.weights.beta = beta;
    fit.fitted = fitted;
    fit.residuals = residuals;
    fit
}

#[test]
fn white_constant_squared_residuals_give_zero_statistic() {
    let mut r = rng(1);
    let x = gaussian_mat(&mut r, 30, 3);
    let resid = DVector::from_fn(30, |t, _| if t % 2 == 0 { 0.7 } else { -0.7 });
    let fit = fit_with_residuals(&x, DVector::from_vec(vec![1.0, 0.0, 0.0]), resid);
    let rep = white_test(&fit, &x).unwrap();
    assert_eq!(rep.r_squared, 0.0);
    assert_eq!(rep.statistic, 0.0);
    assert_eq!(rep.p_value, 1.0);
}

#[test]
fn white_statistic_is_n_r_squared() {
    let (y, x) = hetero_instance(2, 50, |t| 1.0 + t as f64 / 10.0);
    let fit = solve_sc(&y, &x, &opts()).unwrap();
    let rep = white_test(&fit, &x).unwrap();
    assert_eq!(rep.statistic, 50.0 * rep.r_squared);
    assert!((0.0..=1.0).contains(&rep.r_squared) && (0.0..=1.0).contains(&rep.p_value));
    assert_eq!(rep.regressor_count, 2 + 2 * fit.sets.a.len() - rep.dropped.len());
}

#[test]
fn white_drops_collinear_regressors() {
    let n = 30;
    // donor 0 is the time index, donor 1 its square: both duplicate time terms
    let x = DMatrix::from_fn(n, 2, |t, j| {
        let s = (t + 1) as f64 / n as f64;
        if j == 0 { s } else { s * s }
    });
    let mut r = rng(3);
    let resid = gaussian_vec(&mut r, n);
    let fit = fit_with_residuals(&x, DVector::from_vec(vec![0.5, 0.5]), resid);
    let mut fit = fit;
    fit.sets.a = vec![0, 1];
    let rep = white_test(&fit, &x).unwrap();
    assert!(rep.dropped.contains(&"donor0".to_string()));
    assert!(rep.dropped.contains(&"donor1".to_string()));
    assert!(rep.dropped.contains(&"donor0^2".to_string()));
    assert_eq!(rep.regressor_count, 3);
}

#[test]
fn white_rejects_too_short_series() {
    let mut r = rng(4);
    let x = gaussian_mat(&mut r, 4, 3);
    let fit = fit_with_residuals(&x, DVector::from_vec(vec![0.4, 0.3, 0.3]), gaussian_vec(&mut r, 4));
    let mut fit = fit;
    fit.sets.a = vec![0, 1, 2];
    assert!(white_test(&fit, &x).is_err());
}

#[test]
fn white_p_value_decreases_with_r_squared() {
    let (y, x) = hetero_instance(5, 80, |_| 1.0);
    let fit = solve_sc(&y, &x, &opts()).unwrap();
    let base = white_test(&fit, &x).unwrap();
    let hetero = fit_with_residuals(
        &x,
        fit.weights.beta.clone(),
        fit.residuals.map_with_location(|t, _, e| e * (1.0 + t as f64 / 8.0)),
    );
    let strong = white_test(&hetero, &x).unwrap();
    assert!(strong.r_squared > base.r_squared);
    assert!(strong.p_value < base.p_value);
}

#[test]
fn white_test_calibration_small() {
    let size = white_rejection_rate(200, 200, false);
    let power = white_rejection_rate(100, 200, true);
    assert!((0.01..=0.10).contains(&size), "size {size}");
    assert!(power >= 0.9, "power {power}");
}

fn three_donor_fit() -> (ScFit, DMatrix<f64>) {
    let x = DMatrix::from_row_slice(4, 3, &[1.0, 2.0, 0.0, 2.0, 1.0, 1.0, 3.0, 0.0, 2.0, 4.0, 1.0, 1.0]);
    let beta = DVector::from_vec(vec![0.5, 0.5, 0.0]);
    let fit = fit_with_residuals(&x, beta, DVector::zeros(4));
    (fit, x)
}

#[test]
fn effect_path_zero_and_shift() {
    let (fit, _) = three_donor_fit();
    let post_x = DMatrix::from_row_slice(2, 3, &[2.0, 4.0, 1.0, 0.0, 6.0, 3.0]);
    let forecast = &post_x * &fit.weights.beta;
    let zero = effect_path(&fit, &forecast, &post_x).unwrap();
    assert!(zero.tau.iter().all(|&t| t == 0.0));
    let shifted = effect_path(&fit, &forecast.add_scalar(1.0), &post_x).unwrap();
    assert!(shifted.tau.iter().all(|&t| (t - 1.0).abs() < 1e-15));
    assert_eq!(shifted.average(1), Some(1.0));
    assert_eq!(shifted.tau_avg[1].periods, 2);
}

#[test]
fn effect_path_hand_example() {
    let (fit, _) = three_donor_fit();
    // forecasts 0.5·(2+4)=3, 0.5·(0+6)=3, 0.5·(4+−2)=1
    let post_x = DMatrix::from_row_slice(3, 3, &[2.0, 4.0, 9.0, 0.0, 6.0, 9.0, 4.0, -2.0, 9.0]);
    let post_y = DVector::from_vec(vec![4.0, 2.5, 1.5]);
    let path = effect_path(&fit, &post_y, &post_x).unwrap();
    assert_eq!(path.forecast, vec![3.0, 3.0, 1.0]);
    assert_eq!(path.tau, vec![1.0, -0.5, 0.5]);
    assert_eq!(path.average(1), Some(1.0));
    assert!((path.average(12).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(path.relative, vec![Some(1.0 / 3.0), Some(-0.5 / 3.0), Some(0.5)]);
}

#[test]
fn effect_path_guards_zero_forecasts_and_bad_inputs() {
    let (fit, _) = three_donor_fit();
    let post_x = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 0.0]);
    let path = effect_path(&fit, &DVector::from_vec(vec![2.0]), &post_x).unwrap();
    assert_eq!(path.relative, vec![None]);
    assert!(effect_path(&fit, &DVector::zeros(0), &DMatrix::zeros(0, 3)).is_err());
    assert!(effect_path(&fit, &DVector::zeros(2), &DMatrix::zeros(2, 2)).is_err());
}

#[test]
fn effect_path_is_affine_in_post_outcome() {
    let mut r = rng(6);
    let x = gaussian_mat(&mut r, 12, 4);
    let y = gaussian_vec(&mut r, 12);
    let fit = solve_sc(&y, &x, &opts()).unwrap();
    let post_x = gaussian_mat(&mut r, 5, 4);
    let (y1, y2) = (gaussian_vec(&mut r, 5), gaussian_vec(&mut r, 5));
    let (a, b) = (1.7, -0.7);
    let combo = effect_path(&fit, &(&y1 * a + &y2 * b), &post_x).unwrap();
    let p1 = effect_path(&fit, &y1, &post_x).unwrap();
    let p2 = effect_path(&fit, &y2, &post_x).unwrap();
    for t in 0..5 {
        assert!((combo.tau[t] - (a * p1.tau[t] + b * p2.tau[t])).abs() < 1e-12);
    }
}

#[test]
fn placebo_on_exact_donor_copy_has_zero_error() {
    let mut r = rng(7);
    let x = gaussian_mat(&mut r, 15, 5);
    let post_x = gaussian_mat(&mut r, 6, 5);
    let panel = PanelDataset::new(x.column(2).into_owned(), x.clone())
        .unwrap()
        .with_post(post_x.column(2).into_owned(), post_x.clone())
        .unwrap();
    let fit = solve_sc(&panel.y, &panel.x, &opts()).unwrap();
    let rep = placebo_forecast(&fit, panel.post_y.as_ref().unwrap(), &post_x, 12).unwrap();
    assert!(rep.mean_squared_error < 1e-18, "{}", rep.mean_squared_error);
    assert_eq!(rep.horizon, 6);
}

#[test]
fn placebo_on_representable_target_is_exact_for_every_lambda() {
    let mut r = rng(8);
    let x = gaussian_mat(&mut r, 15, 4);
    let post_x = gaussian_mat(&mut r, 4, 4);
    // donor 0 is the exact target; the penalty also favours it
    for &lambda in &[0.0, 0.1, 1.0, 10.0] {
        let fit = solve_penalized_sc(&x.column(0).into_owned(), &x, lambda, &opts()).unwrap();
        let rep = placebo_forecast(&fit, &post_x.column(0).into_owned(), &post_x, 4).unwrap();
        assert!(rep.mean_squared_error < 1e-16, "λ={lambda}: {}", rep.mean_squared_error);
    }
}

#[test]
fn placebo_panel_swaps_target() {
    let mut r = rng(9);
    let x = gaussian_mat(&mut r, 10, 4);
    let post_x = gaussian_mat(&mut r, 3, 4);
    let panel = PanelDataset::new(gaussian_vec(&mut r, 10), x.clone())
        .unwrap()
        .with_post(gaussian_vec(&mut r, 3), post_x.clone())
        .unwrap();
    let pl = placebo_panel(&panel, 1).unwrap();
    assert_eq!(pl.y, x.column(1).into_owned());
    assert_eq!(pl.p(), 3);
    assert_eq!(pl.x.column(1), x.column(2));
    assert_eq!(pl.post_y.unwrap(), post_x.column(1).into_owned());
    assert!(placebo_panel(&panel, 4).is_err());
}

#[test]
fn penalty_distance_examples() {
    let mut r = rng(10);
    let x = gaussian_mat(&mut r, 8, 3);
    let exact = fit_with_residuals(&x, DVector::from_vec(vec![0.0, 1.0, 0.0]), DVector::zeros(8));
    assert_eq!(penalty_distance(&exact, &x), 0.0);

    // Y = 0, donors at squared distances 2 and 4
    let x2 = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 1.0, 0.0]);
    let half = DVector::from_vec(vec![0.5, 0.5]);
    let fitted = &x2 * &half;
    let fit = fit_with_residuals(&x2, half, -fitted);
    assert!((penalty_distance(&fit, &x2) - 3.0).abs() < 1e-15);
}

#[test]
fn penalty_distance_is_non_increasing_along_lambda_path() {
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let x = gaussian_mat(&mut r, 12, 8);
        let y = gaussian_vec(&mut r, 12);
        let mut prev = f64::INFINITY;
        for &lambda in &default_penalized_lambdas() {
            let fit = solve_penalized_sc(&y, &x, lambda, &opts()).unwrap();
            let d = penalty_distance(&fit, &x);
            assert!(d <= prev + 1e-9 * (1.0 + prev.abs().min(1e12)), "seed {seed} λ={lambda}: {d} > {prev}");
            prev = d;
        }
    }
}
