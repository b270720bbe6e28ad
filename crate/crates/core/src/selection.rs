//! Tuning-parameter selection by the Stein-type information criterion and by
//! three cross-validation baselines.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::divergence::df_hat;
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::panel::{Covariates, PanelDataset};
use crate::qp::{
    lex_less, matching_fit, solve_penalized_sc, solve_penalized_sc_cov_inner, solve_sc, solve_sc_cov_inner, ScFit,
    SolveOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    Sure,
    CvHoldout,
    CvLooUntreated,
    CvRolling,
}

impl std::str::FromStr for SelectionMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sure" | "ic" => Ok(Self::Sure),
            "holdout" | "cv_holdout" => Ok(Self::CvHoldout),
            "loo" | "cv_loo_untreated" => Ok(Self::CvLooUntreated),
            "rolling" | "cv_rolling" => Ok(Self::CvRolling),
            other => Err(format!("unknown selection method '{other}'")),
        }
    }
}

/// Family of estimators indexed by the tuning grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuned {
    Penalized,
    Masc,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub lambda: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
}

impl GridPoint {
    pub fn lambda(lambda: f64) -> Self {
        Self { lambda, m: None, v: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectionResult {
    pub method: SelectionMethod,
    pub estimator: Tuned,
    pub grid: Vec<GridPoint>,
    /// `None` where the fit at that point failed.
    pub scores: Vec<Option<f64>>,
    /// Degrees of freedom per point (information criterion only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<Vec<Option<f64>>>,
    pub sigma2_hat: f64,
    pub chosen: usize,
    /// Grid indices whose score tied with the minimum.
    pub tied: Vec<usize>,
}

impl SelectionResult {
    pub fn chosen_point(&self) -> &GridPoint {
        &self.grid[self.chosen]
    }

    pub fn chosen_score(&self) -> f64 {
        self.scores[self.chosen].expect("chosen point has a score")
    }
}

/// Settings shared by all selection routines.
#[derive(Debug, Clone, Copy, Default)]
pub struct SelectOptions {
    pub solve: SolveOptions,
    pub mode: ExecMode,
    /// Replaces the plug-in noise variance (e.g. with a known value).
    pub sigma2: Option<f64>,
}

/// Default penalized grid: zero followed by 39 log-spaced points on [0.0125, 10].
pub fn default_penalized_lambdas() -> Vec<f64> {
    let (lo, hi) = (0.0125f64.ln(), 10f64.ln());
    let mut out = vec![0.0];
    out.extend((0..39).map(|i| (lo + (hi - lo) * i as f64 / 38.0).exp()));
    out
}

/// Default MASC grid: 21 uniform points on [0, 1].
pub fn default_masc_lambdas() -> Vec<f64> {
    (0..21).map(|i| i as f64 / 20.0).collect()
}

pub fn penalized_grid(lambdas: &[f64]) -> Vec<GridPoint> {
    lambdas.iter().map(|&l| GridPoint::lambda(l)).collect()
}

/// Joint `(λ, m)` grid; by default `m ∈ 1..=min(10, p)`.
pub fn masc_grid(lambdas: &[f64], ms: &[usize]) -> Vec<GridPoint> {
    ms.iter()
        .flat_map(|&m| lambdas.iter().map(move |&l| GridPoint { lambda: l, m: Some(m), v: None }))
        .collect()
}

pub fn default_masc_ms(p: usize) -> Vec<usize> {
    (1..=p.min(10)).collect()
}

/// Plug-in noise variance: mean squared residual of the plain fit.
pub fn sigma2_hat(y: &DVector<f64>, x: &DMatrix<f64>, opts: &SolveOptions) -> Result<f64> {
    let f = solve_sc(y, x, opts)?;
    Ok(f.rss() / y.len() as f64)
}

/// `RSS + 2σ²·df`.
pub fn ic_value(rss: f64, sigma2: f64, df: f64) -> f64 {
    rss + 2.0 * sigma2 * df
}

/// Fits every grid point on one training sample.
///
/// MASC points share a single synthetic-control solve.
pub fn fit_grid(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    est: Tuned,
    grid: &[GridPoint],
    opts: &SelectOptions,
) -> Vec<Result<ScFit>> {
    match est {
        Tuned::Penalized => map_indexed(opts.mode, grid.len(), |i| solve_penalized_sc(y, x, grid[i].lambda, &opts.solve)),
        Tuned::Masc => {
            let sc = solve_sc(y, x, &opts.solve);
            map_indexed(opts.mode, grid.len(), |i| {
                let pt = &grid[i];
                let sc = sc.as_ref().map_err(|e| Error::InvalidInput(e.to_string()))?;
                if !(0.0..=1.0).contains(&pt.lambda) {
                    return Err(Error::InvalidInput(format!("MASC weight must lie in [0, 1], got {}", pt.lambda)));
                }
                let m = pt.m.unwrap_or(1);
                let ma = matching_fit(y, x, m)?;
                Ok(ScFit::masc(pt.lambda, m, y, sc.clone(), &ma))
            })
        }
    }
}

fn tie_tol(v: f64) -> f64 {
    1e-12 * (1.0 + v.abs())
}

/// Ordering of grid points among ties: larger λ, then smaller m, then the
/// lexicographically smaller V.
fn preferred(a: &GridPoint, b: &GridPoint) -> bool {
    if a.lambda != b.lambda {
        return a.lambda > b.lambda;
    }
    if a.m != b.m {
        return a.m.unwrap_or(0) < b.m.unwrap_or(0);
    }
    match (&a.v, &b.v) {
        (Some(va), Some(vb)) => lex_less(&DVector::from_column_slice(va), &DVector::from_column_slice(vb)),
        _ => false,
    }
}

/// Index of the minimal score under the tie-break rule, with the tied set.
pub fn choose(grid: &[GridPoint], scores: &[Option<f64>]) -> Option<(usize, Vec<usize>)> {
    let min = scores.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return None;
    }
    let tied: Vec<usize> = (0..scores.len())
        .filter(|&i| matches!(scores[i], Some(s) if s - min <= tie_tol(min)))
        .collect();
    let mut best = tied[0];
    for &i in &tied[1..] {
        if preferred(&grid[i], &grid[best]) {
            best = i;
        }
    }
    Some((best, tied))
}

fn finish(
    method: SelectionMethod,
    est: Tuned,
    grid: &[GridPoint],
    scores: Vec<Option<f64>>,
    df: Option<Vec<Option<f64>>>,
    sigma2_hat: f64,
    first_err: Option<String>,
) -> Result<SelectionResult> {
    let (chosen, tied) = choose(grid, &scores).ok_or_else(|| Error::AllFitsFailed {
        count: grid.len(),
        first: first_err.unwrap_or_else(|| "no finite score".into()),
    })?;
    Ok(SelectionResult {
        method,
        estimator: est,
        grid: grid.to_vec(),
        scores,
        df,
        sigma2_hat,
        chosen,
        tied,
    })
}

fn check_grid(grid: &[GridPoint]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("empty tuning grid".into()));
    }
    Ok(())
}

fn resolve_sigma2(panel: &PanelDataset, opts: &SelectOptions) -> Result<f64> {
    match opts.sigma2 {
        Some(s) if s >= 0.0 && s.is_finite() => Ok(s),
        Some(s) => Err(Error::Config(format!("noise variance must be finite and nonnegative, got {s}"))),
        None => sigma2_hat(&panel.y, &panel.x, &opts.solve),
    }
}

/// Information-criterion values and degrees of freedom for fitted points.
pub fn ic_scores(
    fits: &[Result<ScFit>],
    x: &DMatrix<f64>,
    cov: Option<&Covariates>,
    sigma2: f64,
) -> (Vec<Option<f64>>, Vec<Option<f64>>, Option<String>) {
    let mut scores = Vec::with_capacity(fits.len());
    let mut dfs = Vec::with_capacity(fits.len());
    let mut first_err = None;
    for f in fits {
        let r = f
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|f| df_hat(f, x, cov).map(|d| (f.rss(), d.df_hat)).map_err(|e| e.to_string()));
        match r {
            Ok((rss, df)) => {
                scores.push(Some(ic_value(rss, sigma2, df)));
                dfs.push(Some(df));
            }
            Err(e) => {
                first_err.get_or_insert(e);
                scores.push(None);
                dfs.push(None);
            }
        }
    }
    (scores, dfs, first_err)
}

/// Chooses λ (and m for MASC) by minimizing `RSS + 2σ̂²·df̂`.
pub fn select_lambda_ic(
    panel: &PanelDataset,
    est: Tuned,
    grid: &[GridPoint],
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    check_grid(grid)?;
    let s2 = resolve_sigma2(panel, opts)?;
    let fits = fit_grid(&panel.y, &panel.x, est, grid, opts);
    let (scores, dfs, err) = ic_scores(&fits, &panel.x, None, s2);
    finish(SelectionMethod::Sure, est, grid, scores, Some(dfs), s2, err)
}

/// Joint choice of `V` and λ for the penalized covariate estimator.
pub fn select_v_ic(
    panel: &PanelDataset,
    v_grid: &[DVector<f64>],
    lambdas: &[f64],
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    let cov = panel
        .covariates
        .as_ref()
        .ok_or_else(|| Error::Config("V selection needs covariates".into()))?;
    if v_grid.is_empty() || lambdas.is_empty() {
        return Err(Error::Config("empty V or λ grid".into()));
    }
    let s2 = resolve_sigma2(panel, opts)?;
    let grid: Vec<GridPoint> = v_grid
        .iter()
        .flat_map(|v| {
            lambdas.iter().map(move |&l| GridPoint {
                lambda: l,
                m: None,
                v: Some(v.iter().copied().collect()),
            })
        })
        .collect();
    let fits = map_indexed(opts.mode, grid.len(), |i| {
        let v = DVector::from_column_slice(grid[i].v.as_ref().expect("grid has V"));
        if grid[i].lambda > 0.0 {
            solve_penalized_sc_cov_inner(&panel.y, &panel.x, cov, &v, grid[i].lambda, &opts.solve)
        } else {
            solve_sc_cov_inner(&panel.y, &panel.x, cov, &v, &opts.solve)
        }
    });
    let (scores, dfs, err) = ic_scores(&fits, &panel.x, Some(cov), s2);
    finish(SelectionMethod::Sure, Tuned::Penalized, &grid, scores, Some(dfs), s2, err)
}

/// Mean squared forecast error of each grid point trained on `train` rows
/// of `(y, x)` and scored on `(y_test, x_test)`.
fn forecast_scores(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    y_test: &DVector<f64>,
    x_test: &DMatrix<f64>,
    est: Tuned,
    grid: &[GridPoint],
    opts: &SelectOptions,
) -> Vec<Result<f64>> {
    let inner = SelectOptions { mode: ExecMode::Sequential, ..*opts };
    fit_grid(y, x, est, grid, &inner)
        .into_iter()
        .map(|f| f.map(|f| (y_test - f.forecast(x_test)).norm_squared() / y_test.len() as f64))
        .collect()
}

/// Averages per-fold score vectors; a grid point fails if any fold fails.
fn average_folds(folds: Vec<Vec<Result<f64>>>, k: usize) -> (Vec<Option<f64>>, Option<String>) {
    let mut sums = vec![Some(0.0); k];
    let mut first_err = None;
    let count = folds.len() as f64;
    for fold in folds {
        for (i, s) in fold.into_iter().enumerate() {
            match s {
                Ok(v) => {
                    if let Some(acc) = sums[i].as_mut() {
                        *acc += v;
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e.to_string());
                    sums[i] = None;
                }
            }
        }
    }
    (sums.into_iter().map(|s| s.map(|v| v / count)).collect(), first_err)
}

fn plug_in_sigma2(panel: &PanelDataset, opts: &SelectOptions) -> f64 {
    resolve_sigma2(panel, opts).unwrap_or(f64::NAN)
}

/// Number of training periods for a holdout split.
pub fn holdout_train_len(n: usize, split_fraction: f64) -> Result<usize> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::Config(format!("split fraction must lie in (0, 1), got {split_fraction}")));
    }
    let train = ((split_fraction * n as f64) - 1e-9).ceil() as usize;
    if train < 2 || train >= n {
        return Err(Error::Config(format!(
            "split {split_fraction} of {n} periods leaves {train} training and {} test periods",
            n.saturating_sub(train)
        )));
    }
    Ok(train)
}

/// Trains on the first `⌈s·n⌉` pre-periods and scores the rest.
pub fn cv_holdout(
    panel: &PanelDataset,
    est: Tuned,
    grid: &[GridPoint],
    split_fraction: f64,
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    check_grid(grid)?;
    let n = panel.n();
    let train = holdout_train_len(n, split_fraction)?;
    let y_tr = panel.y.rows(0, train).into_owned();
    let x_tr = panel.x.rows(0, train).into_owned();
    let y_te = panel.y.rows(train, n - train).into_owned();
    let x_te = panel.x.rows(train, n - train).into_owned();
    let fits = fit_grid(&y_tr, &x_tr, est, grid, opts);
    let mut first_err = None;
    let scores = fits
        .into_iter()
        .map(|f| match f {
            Ok(f) => Some((&y_te - f.forecast(&x_te)).norm_squared() / (n - train) as f64),
            Err(e) => {
                first_err.get_or_insert(e.to_string());
                None
            }
        })
        .collect();
    finish(SelectionMethod::CvHoldout, est, grid, scores, None, plug_in_sigma2(panel, opts), first_err)
}

/// Each donor in turn plays the treated unit; scores are post-period
/// forecast errors averaged over donors.
pub fn cv_loo_untreated(
    panel: &PanelDataset,
    est: Tuned,
    grid: &[GridPoint],
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    check_grid(grid)?;
    let post_x = panel
        .post_x
        .as_ref()
        .filter(|m| m.nrows() > 0)
        .ok_or_else(|| Error::Config("leave-one-out validation needs post-period donor data".into()))?;
    let p = panel.p();
    if p < 2 {
        return Err(Error::Config("leave-one-out validation needs at least two donors".into()));
    }
    let folds = map_indexed(opts.mode, p, |j| {
        let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
        let y = panel.x.column(j).into_owned();
        let x = panel.x.select_columns(&others);
        let y_te = post_x.column(j).into_owned();
        let x_te = post_x.select_columns(&others);
        forecast_scores(&y, &x, &y_te, &x_te, est, grid, opts)
    });
    let (scores, err) = average_folds(folds, grid.len());
    finish(SelectionMethod::CvLooUntreated, est, grid, scores, None, plug_in_sigma2(panel, opts), err)
}

/// Default rolling window `⌈n/2⌉`.
pub fn default_rolling_window(n: usize) -> usize {
    n.div_ceil(2)
}

/// Rolling-origin validation: for each origin `t` in `window..=n−horizon`
/// train on the first `t` periods and score the next `horizon` periods.
pub fn cv_rolling(
    panel: &PanelDataset,
    est: Tuned,
    grid: &[GridPoint],
    window: usize,
    horizon: usize,
    opts: &SelectOptions,
) -> Result<SelectionResult> {
    check_grid(grid)?;
    let n = panel.n();
    if window < 2 || horizon < 1 || window + horizon > n {
        return Err(Error::Config(format!(
            "rolling window {window} with horizon {horizon} does not fit {n} periods"
        )));
    }
    let origins: Vec<usize> = (window..=n - horizon).collect();
    let folds = map_indexed(opts.mode, origins.len(), |k| {
        let t = origins[k];
        let y = panel.y.rows(0, t).into_owned();
        let x = panel.x.rows(0, t).into_owned();
        let y_te = panel.y.rows(t, horizon).into_owned();
        let x_te = panel.x.rows(t, horizon).into_owned();
        forecast_scores(&y, &x, &y_te, &x_te, est, grid, opts)
    });
    let (scores, err) = average_folds(folds, grid.len());
    finish(SelectionMethod::CvRolling, est, grid, scores, None, plug_in_sigma2(panel, opts), err)
}
