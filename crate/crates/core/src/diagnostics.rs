//! Post-fit diagnostics: heteroskedasticity test, effect paths, placebos.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::{independent_rows, lstsq};
use crate::panel::{Covariates, PanelDataset, PanelLabels};
use crate::qp::ScFit;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhiteTestReport {
    pub r_squared: f64,
    /// `n · R²`.
    pub statistic: f64,
    pub p_value: f64,
    /// Non-intercept regressors kept; also the chi-square df.
    pub regressor_count: usize,
    pub n: usize,
    /// Names of regressors removed as collinear.
    pub dropped: Vec<String>,
}

/// White-type test: regresses squared residuals on an intercept, the time
/// index `t/n` and its square, and the active donors and their squares.
pub fn white_test(fit: &ScFit, x: &DMatrix<f64>) -> Result<WhiteTestReport> {
    let n = fit.residuals.len();
    if x.nrows() != n {
        return Err(Error::InvalidInput(format!("donor matrix has {} rows, fit has {n}", x.nrows())));
    }
    let mut cols: Vec<(String, DVector<f64>)> = vec![
        ("intercept".into(), DVector::from_element(n, 1.0)),
        ("time".into(), DVector::from_fn(n, |t, _| (t + 1) as f64 / n as f64)),
        ("time^2".into(), DVector::from_fn(n, |t, _| ((t + 1) as f64 / n as f64).powi(2))),
    ];
    for &j in &fit.sets.a {
        let c = x.column(j).into_owned();
        cols.push((format!("donor{j}^2"), c.map(|v| v * v)));
        cols.push((format!("donor{j}"), c));
    }
    // unit-norm rows so the rank test sees directions only
    let normed = DMatrix::from_fn(cols.len(), n, |i, t| {
        let nrm = cols[i].1.norm();
        if nrm > 0.0 {
            cols[i].1[t] / nrm
        } else {
            0.0
        }
    });
    let keep = independent_rows(&normed);
    let dropped = (0..cols.len())
        .filter(|i| !keep.contains(i))
        .map(|i| cols[i].0.clone())
        .collect();
    let k = keep.len();
    if n <= k {
        return Err(Error::InvalidInput(format!("White test needs more than {k} periods, got {n}")));
    }
    let design = DMatrix::from_fn(n, k, |t, c| cols[keep[c]].1[t]);
    let e2 = fit.residuals.map(|e| e * e);
    let mean = e2.mean();
    let tss = e2.map(|v| v - mean).norm_squared();
    let has_intercept = keep.contains(&0);
    let regressor_count = k - has_intercept as usize;
    let r_squared = if tss <= f64::EPSILON * (1.0 + mean * mean) * n as f64 || regressor_count == 0 {
        0.0
    } else {
        let coef = lstsq(&design, &e2);
        let rss = (&e2 - &design * coef).norm_squared();
        (1.0 - rss / tss).clamp(0.0, 1.0)
    };
    let statistic = n as f64 * r_squared;
    let p_value = if regressor_count == 0 || statistic == 0.0 {
        1.0
    } else {
        let chi = ChiSquared::new(regressor_count as f64).map_err(|e| Error::Config(e.to_string()))?;
        chi.sf(statistic).clamp(0.0, 1.0)
    };
    Ok(WhiteTestReport {
        r_squared,
        statistic,
        p_value,
        regressor_count,
        n,
        dropped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonAverage {
    pub horizon: usize,
    /// Periods actually averaged (`min(horizon, post length)`).
    pub periods: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectPath {
    pub forecast: Vec<f64>,
    pub tau: Vec<f64>,
    pub tau_avg: Vec<HorizonAverage>,
    /// `τ_t / Ŷ_t`; `None` where the forecast is numerically zero.
    pub relative: Vec<Option<f64>>,
}

impl EffectPath {
    pub fn average(&self, horizon: usize) -> Option<f64> {
        self.tau_avg.iter().find(|h| h.horizon == horizon).map(|h| h.mean)
    }
}

pub const EFFECT_HORIZONS: [usize; 2] = [1, 12];

/// Treatment-effect path `τ_t = Y_t − X_tβ̂` over the post period.
pub fn effect_path(fit: &ScFit, post_y: &DVector<f64>, post_x: &DMatrix<f64>) -> Result<EffectPath> {
    if post_y.is_empty() {
        return Err(Error::Config("effect path needs post-period data".into()));
    }
    if post_x.nrows() != post_y.len() || post_x.ncols() != fit.weights.beta.len() {
        return Err(Error::InvalidInput(format!(
            "post-period shapes disagree: {} outcomes, {}x{} donors, {} weights",
            post_y.len(),
            post_x.nrows(),
            post_x.ncols(),
            fit.weights.beta.len()
        )));
    }
    let yhat = fit.forecast(post_x);
    let tau = post_y - &yhat;
    let guard = 1e-12 * (1.0 + yhat.amax());
    let tau_avg = EFFECT_HORIZONS
        .iter()
        .map(|&h| {
            let periods = h.min(tau.len());
            HorizonAverage {
                horizon: h,
                periods,
                mean: tau.rows(0, periods).mean(),
            }
        })
        .collect();
    Ok(EffectPath {
        relative: tau
            .iter()
            .zip(yhat.iter())
            .map(|(t, f)| (f.abs() >= guard).then(|| t / f))
            .collect(),
        forecast: yhat.iter().copied().collect(),
        tau: tau.iter().copied().collect(),
        tau_avg,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboReport {
    pub path: EffectPath,
    pub horizon: usize,
    /// Mean squared forecast error over the first `horizon` post periods.
    pub mean_squared_error: f64,
}

/// Forecast of a known-untreated target; its error measures risk directly.
pub fn placebo_forecast(fit: &ScFit, post_y: &DVector<f64>, post_x: &DMatrix<f64>, horizon: usize) -> Result<PlaceboReport> {
    if horizon == 0 {
        return Err(Error::Config("placebo horizon must be positive".into()));
    }
    let path = effect_path(fit, post_y, post_x)?;
    let h = horizon.min(path.tau.len());
    let mean_squared_error = path.tau[..h].iter().map(|t| t * t).sum::<f64>() / h as f64;
    Ok(PlaceboReport {
        path,
        horizon: h,
        mean_squared_error,
    })
}

/// Panel with donor `j` as the (untreated) target and the others as donors.
pub fn placebo_panel(panel: &PanelDataset, j: usize) -> Result<PanelDataset> {
    let p = panel.p();
    if j >= p || p < 2 {
        return Err(Error::Config(format!("placebo donor {j} out of range for {p} donors")));
    }
    let others: Vec<usize> = (0..p).filter(|&k| k != j).collect();
    let mut out = PanelDataset::new(panel.x.column(j).into_owned(), panel.x.select_columns(&others))?;
    if let Some(cov) = &panel.covariates {
        out = out.with_covariates(Covariates::new(cov.d.column(j).into_owned(), cov.d.select_columns(&others))?)?;
    }
    if let Some(px) = &panel.post_x {
        out = out.with_post(px.column(j).into_owned(), px.select_columns(&others))?;
    }
    out.labels = panel.labels.as_ref().map(|l| PanelLabels {
        treated: l.donors[j].clone(),
        donors: others.iter().map(|&k| l.donors[k].clone()).collect(),
        ..l.clone()
    });
    Ok(out)
}

/// `Σ_j β_j ‖Y − X_j‖²` at the fitted weights.
pub fn penalty_distance(fit: &ScFit, x: &DMatrix<f64>) -> f64 {
    let y = &fit.fitted + &fit.residuals;
    fit.weights
        .beta
        .iter()
        .enumerate()
        .filter(|(_, &b)| b != 0.0)
        .map(|(j, &b)| b * (&y - x.column(j)).norm_squared())
        .sum()
}
