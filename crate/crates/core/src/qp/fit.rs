use nalgebra::{DMatrix, DVector};

use super::engine::Solution;

pub(crate) const WEIGHT_RTOL: f64 = 1e-8;
pub(crate) const RESIDUAL_RTOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Plain,
    Covariate,
    Penalized,
    Masc,
    Matching,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Plain => "plain",
            EstimatorKind::Covariate => "covariate",
            EstimatorKind::Penalized => "penalized",
            EstimatorKind::Masc => "masc",
            EstimatorKind::Matching => "matching",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "plain" | "sc" => Ok(EstimatorKind::Plain),
            "covariate" => Ok(EstimatorKind::Covariate),
            "penalized" => Ok(EstimatorKind::Penalized),
            "masc" => Ok(EstimatorKind::Masc),
            "matching" => Ok(EstimatorKind::Matching),
            other => Err(format!("unknown estimator '{other}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub beta: DVector<f64>,
    pub active_tol: f64,
}

impl Weights {
    pub fn new(beta: DVector<f64>) -> Self {
        let active_tol = default_active_tol(&beta);
        Self { beta, active_tol }
    }
}

fn default_active_tol(beta: &DVector<f64>) -> f64 {
    1e-8 * (1.0 + beta.amax())
}

/// Index sets of a fit. Indices are zero-based and sorted.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize)]
pub struct ActiveSets {
    /// Donors with positive weight.
    pub a: Vec<usize>,
    /// Covariate rows the weights do not match exactly.
    pub m: Vec<usize>,
    /// Covariate rows with positive weight in `V`.
    pub e: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveTolerances {
    /// Absolute weight threshold; `1e-8·(1 + ‖β‖∞)` when unset.
    pub active: Option<f64>,
    /// Relative threshold for nonzero covariate residuals.
    pub residual_rel: f64,
    /// Relative threshold for positive `V` entries.
    pub weight_rel: f64,
}

impl Default for ActiveTolerances {
    fn default() -> Self {
        Self {
            active: None,
            residual_rel: RESIDUAL_RTOL,
            weight_rel: WEIGHT_RTOL,
        }
    }
}

/// Stationarity and complementarity residuals with the multipliers.
///
/// Bound multipliers follow the `μ ≤ 0` convention for `β ≥ 0`: the
/// Lagrangian gradient is `∇f − λ′·1 − Dᵀξ + μ = 0` on the simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct KktCertificate {
    pub stationarity_residual: f64,
    pub complementarity_gap: f64,
    pub sum_multiplier: f64,
    pub bound_multipliers: DVector<f64>,
    /// Multipliers of the binding covariate rows (`ξ`), by covariate row.
    pub covariate_multipliers: Option<Vec<(usize, f64)>>,
    /// Sum-to-one multiplier of the inner covariate problem (`φ`).
    pub inner_sum_multiplier: Option<f64>,
    pub inner_stationarity: Option<f64>,
    pub iterations: usize,
}

impl KktCertificate {
    pub(crate) fn from_solution(sol: &Solution) -> Self {
        Self {
            stationarity_residual: sol.stationarity,
            complementarity_gap: sol.complementarity,
            sum_multiplier: sol.nu.get(0).copied().unwrap_or(0.0),
            bound_multipliers: -&sol.mu,
            covariate_multipliers: None,
            inner_sum_multiplier: None,
            inner_stationarity: None,
            iterations: sol.iterations,
        }
    }

    /// Certificate for fits that are not the output of an optimization.
    pub(crate) fn trivial(p: usize) -> Self {
        Self {
            stationarity_residual: 0.0,
            complementarity_gap: 0.0,
            sum_multiplier: 0.0,
            bound_multipliers: DVector::zeros(p),
            covariate_multipliers: None,
            inner_sum_multiplier: None,
            inner_stationarity: None,
            iterations: 0,
        }
    }

    /// `rows[k]` is the stacked-constraint index kept by the outer problem;
    /// stacked row `r ≥ 1` corresponds to the `(r−1)`-th positive-`V` row.
    pub(crate) fn attach_covariate_multipliers(&mut self, outer: &Solution, rows: &[usize], inner: &Solution) {
        let xi = rows
            .iter()
            .enumerate()
            .filter(|(_, &r)| r > 0)
            .map(|(k, &r)| (r - 1, outer.nu[k]))
            .collect();
        self.covariate_multipliers = Some(xi);
        self.inner_sum_multiplier = inner.nu.get(0).copied();
        self.inner_stationarity = Some(inner.stationarity);
        self.stationarity_residual = self.stationarity_residual.max(inner.stationarity);
        self.complementarity_gap = self.complementarity_gap.max(inner.complementarity);
    }

    pub fn satisfies(&self, tol: f64) -> bool {
        self.stationarity_residual <= tol
            && self.complementarity_gap <= tol
            && self.bound_multipliers.iter().all(|&m| m <= tol)
    }
}

/// A fitted synthetic control.
#[derive(Debug, Clone)]
pub struct ScFit {
    pub kind: EstimatorKind,
    pub weights: Weights,
    pub fitted: DVector<f64>,
    pub residuals: DVector<f64>,
    pub sets: ActiveSets,
    pub kkt: KktCertificate,
    pub lambda: Option<f64>,
    pub m: Option<usize>,
    pub v: Option<DVector<f64>>,
    /// `Dβ − Z` for covariate fits.
    pub covariate_residuals: Option<DVector<f64>>,
    pub(crate) covariate_scale: f64,
    /// Synthetic-control part of a MASC fit.
    pub sc_component: Option<Box<ScFit>>,
    /// Weights are not unique (rank-deficient active donors).
    pub degenerate: bool,
}

pub(crate) fn threshold_active(beta: &DVector<f64>, tol: Option<f64>) -> Vec<usize> {
    let tol = tol.unwrap_or_else(|| default_active_tol(beta));
    (0..beta.len()).filter(|&j| beta[j] > tol).collect()
}

pub(crate) fn compute_sets(fit: &ScFit, tols: &ActiveTolerances) -> ActiveSets {
    let a = threshold_active(&fit.weights.beta, tols.active);
    let (m, e) = match (&fit.covariate_residuals, &fit.v) {
        (Some(r), Some(v)) if !r.is_empty() => {
            let rtol = tols.residual_rel * fit.covariate_scale;
            let wtol = tols.weight_rel * v.amax();
            (
                (0..r.len()).filter(|&i| r[i].abs() > rtol).collect(),
                (0..v.len()).filter(|&i| v[i] > wtol).collect(),
            )
        }
        _ => (Vec::new(), Vec::new()),
    };
    ActiveSets { a, m, e }
}

impl ScFit {
    pub(crate) fn from_weights(kind: EstimatorKind, y: &DVector<f64>, x: &DMatrix<f64>, beta: DVector<f64>) -> Self {
        let fitted = x * &beta;
        let residuals = y - &fitted;
        let p = beta.len();
        let mut f = Self {
            kind,
            weights: Weights::new(beta),
            fitted,
            residuals,
            sets: ActiveSets::default(),
            kkt: KktCertificate::trivial(p),
            lambda: None,
            m: None,
            v: None,
            covariate_residuals: None,
            covariate_scale: 1.0,
            sc_component: None,
            degenerate: false,
        };
        f.sets = compute_sets(&f, &ActiveTolerances::default());
        f
    }

    pub(crate) fn from_solution(
        kind: EstimatorKind,
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        sol: &Solution,
        lambda: Option<f64>,
    ) -> Self {
        let mut f = Self::from_weights(kind, y, x, sol.x.clone());
        f.kkt = KktCertificate::from_solution(sol);
        f.lambda = lambda;
        f
    }

    /// `λ·ma + (1 − λ)·sc` from already fitted components.
    pub fn masc(lambda: f64, m: usize, y: &DVector<f64>, sc: ScFit, ma: &ScFit) -> Self {
        let beta = &ma.weights.beta * lambda + &sc.weights.beta * (1.0 - lambda);
        let fitted = &ma.fitted * lambda + &sc.fitted * (1.0 - lambda);
        let residuals = y - &fitted;
        let mut f = Self {
            kind: EstimatorKind::Masc,
            weights: Weights::new(beta),
            fitted,
            residuals,
            sets: ActiveSets::default(),
            kkt: sc.kkt.clone(),
            lambda: Some(lambda),
            m: Some(m),
            v: None,
            covariate_residuals: None,
            covariate_scale: 1.0,
            degenerate: sc.degenerate,
            sc_component: Some(Box::new(sc)),
        };
        f.sets = compute_sets(&f, &ActiveTolerances::default());
        f
    }

    pub fn rss(&self) -> f64 {
        self.residuals.norm_squared()
    }

    pub fn n(&self) -> usize {
        self.fitted.len()
    }

    /// Forecast for new donor rows.
    pub fn forecast(&self, x_new: &DMatrix<f64>) -> DVector<f64> {
        x_new * &self.weights.beta
    }
}
