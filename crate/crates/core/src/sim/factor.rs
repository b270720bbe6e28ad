//! Linear factor model `Y_t = δ_t + ψ_tᵀL_1 + U_1t`, `X_jt = δ_t + ψ_tᵀL_j + U_jt`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::bootstrap::stationary_indices;
use super::stream_rng;
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::panel::PanelDataset;
use crate::qp::{solve_sc, SolveOptions};

#[derive(Debug, Clone, PartialEq)]
pub struct FactorModelSpec {
    /// `(p+1) × r`; row 0 is the treated unit.
    pub loadings: DMatrix<f64>,
    /// Time effects, one per period.
    pub delta: DVector<f64>,
    /// Marginal variance of each idiosyncratic series (treated first).
    pub sigma: DVector<f64>,
    /// AR coefficients of each idiosyncratic series (treated first).
    pub ar: Vec<Vec<f64>>,
    /// Best-linear-predictor weights of the treated loading on the donors.
    pub omega_star: DVector<f64>,
}

impl FactorModelSpec {
    /// Builds a spec with `L_1 = L_{-1}ᵀω*`.
    pub fn new(
        donor_loadings: DMatrix<f64>,
        omega_star: DVector<f64>,
        delta: DVector<f64>,
        sigma: DVector<f64>,
        ar: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let p = donor_loadings.nrows();
        let r = donor_loadings.ncols();
        if omega_star.len() != p || sigma.len() != p + 1 || ar.len() != p + 1 {
            return Err(Error::Config("factor model dimensions disagree".into()));
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Config("innovation variances must be positive".into()));
        }
        let l1 = donor_loadings.transpose() * &omega_star;
        let mut loadings = DMatrix::zeros(p + 1, r);
        loadings.row_mut(0).copy_from(&l1.transpose());
        loadings.view_mut((1, 0), (p, r)).copy_from(&donor_loadings);
        for coefs in &ar {
            ar_gain(coefs)?;
        }
        Ok(Self {
            loadings,
            delta,
            sigma,
            ar,
            omega_star,
        })
    }

    pub fn donors(&self) -> usize {
        self.loadings.nrows() - 1
    }

    pub fn factors(&self) -> usize {
        self.loadings.ncols()
    }

    /// `(p_ar, q_ma)` per series; moving-average parts are always zero.
    pub fn innovation_orders(&self) -> Vec<(usize, usize)> {
        self.ar.iter().map(|c| (c.len(), 0)).collect()
    }

    /// Contemporaneous covariance `LLᵀ + Σ` of the de-meaned units.
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.loadings * self.loadings.transpose() + DMatrix::from_diagonal(&self.sigma)
    }

    /// `‖L_1 − L_{-1}ᵀω*‖∞`.
    pub fn loading_identity_error(&self) -> f64 {
        let p = self.donors();
        let ld = self.loadings.rows(1, p);
        (self.loadings.row(0).transpose() - ld.transpose() * &self.omega_star).amax()
    }

    fn delta_at(&self, t: usize) -> f64 {
        if self.delta.is_empty() {
            0.0
        } else {
            self.delta[t % self.delta.len()]
        }
    }
}

/// Variance of an AR process per unit innovation variance.
fn ar_gain(coefs: &[f64]) -> Result<f64> {
    if coefs.is_empty() {
        return Ok(1.0);
    }
    let mut psi = vec![1.0];
    let mut total = 1.0;
    for j in 1..20_000 {
        let v: f64 = coefs
            .iter()
            .enumerate()
            .filter(|(i, _)| j > *i)
            .map(|(i, c)| c * psi[j - 1 - i])
            .sum();
        psi.push(v);
        total += v * v;
        if !total.is_finite() || total > 1e12 {
            return Err(Error::Config(format!("AR coefficients {coefs:?} are not stationary")));
        }
        if j > coefs.len() * 10 && psi[j - coefs.len().min(j)..].iter().all(|x| x.abs() < 1e-14) {
            break;
        }
    }
    Ok(total)
}

const BURN_IN: usize = 200;

/// Gaussian AR path of length `t` with marginal variance `var`.
fn ar_path<R: Rng>(coefs: &[f64], var: f64, t: usize, rng: &mut R) -> Vec<f64> {
    let scale = (var / ar_gain(coefs).expect("validated at construction")).sqrt();
    let burn = if coefs.is_empty() { 0 } else { BURN_IN };
    let mut path: Vec<f64> = Vec::with_capacity(t + burn);
    for s in 0..(t + burn) {
        let mut v = scale * rng.sample::<f64, _>(StandardNormal);
        for (i, c) in coefs.iter().enumerate() {
            if s > i {
                v += c * path[s - 1 - i];
            }
        }
        path.push(v);
    }
    path.split_off(burn)
}

/// One simulated panel with its systematic parts.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorDraw {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// `δ_t + ψ_tᵀL_1` (Gaussian draws) or `E[Y_t | X_t]` (empirical draws).
    pub systematic_y: DVector<f64>,
    pub systematic_x: DMatrix<f64>,
    pub factors: DMatrix<f64>,
}

impl FactorDraw {
    /// Splits into a panel with the first `n_pre` periods as pre-treatment.
    pub fn panel(&self, n_pre: usize) -> Result<PanelDataset> {
        let t = self.y.len();
        if n_pre < 2 || n_pre > t {
            return Err(Error::Config(format!("cannot split {t} periods at {n_pre}")));
        }
        let base = PanelDataset::new(self.y.rows(0, n_pre).into_owned(), self.x.rows(0, n_pre).into_owned())?;
        if n_pre == t {
            return Ok(base);
        }
        base.with_post(
            self.y.rows(n_pre, t - n_pre).into_owned(),
            self.x.rows(n_pre, t - n_pre).into_owned(),
        )
    }
}

fn draw_with_rng<R: Rng>(spec: &FactorModelSpec, t: usize, rng: &mut R) -> FactorDraw {
    let p = spec.donors();
    let r = spec.factors();
    let factors = DMatrix::from_fn(t, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let systematic = {
        let mut s = &factors * spec.loadings.transpose();
        for i in 0..t {
            let d = spec.delta_at(i);
            s.row_mut(i).add_scalar_mut(d);
        }
        s
    };
    let mut data = systematic.clone();
    for u in 0..=p {
        let path = ar_path(&spec.ar[u], spec.sigma[u], t, rng);
        for i in 0..t {
            data[(i, u)] += path[i];
        }
    }
    FactorDraw {
        y: data.column(0).into_owned(),
        x: data.columns(1, p).into_owned(),
        systematic_y: systematic.column(0).into_owned(),
        systematic_x: systematic.columns(1, p).into_owned(),
        factors,
    }
}

/// Gaussian draw of `t` periods with ChaCha stream 0 of `seed`.
pub fn draw_factor_gaussian(spec: &FactorModelSpec, t: usize, seed: u64) -> FactorDraw {
    draw_with_rng(spec, t, &mut stream_rng(seed, 0))
}

pub(crate) fn draw_factor_gaussian_stream(spec: &FactorModelSpec, t: usize, seed: u64, stream: u64) -> FactorDraw {
    draw_with_rng(spec, t, &mut stream_rng(seed, stream))
}

/// Precomputed Gaussian conditioning of the treated unit on the donors.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalModel {
    /// `Σ_X⁻¹Σ_XY`.
    pub coefficients: DVector<f64>,
    /// `Var(Y_t | X_t)`.
    pub residual_variance: f64,
}

impl ConditionalModel {
    pub fn new(spec: &FactorModelSpec) -> Result<Self> {
        let cov = spec.covariance();
        let p = spec.donors();
        let sxx = cov.view((1, 1), (p, p)).into_owned();
        let sxy = cov.view((1, 0), (p, 1)).column(0).into_owned();
        let inv = spd_inverse(&sxx, "donor covariance")?;
        let coefficients = &inv * &sxy;
        let residual_variance = (cov[(0, 0)] - sxy.dot(&coefficients)).max(0.0);
        Ok(Self {
            coefficients,
            residual_variance,
        })
    }
}

/// `E[Y_t | X_t] = δ_t + Σ_YXΣ_X⁻¹(X_t − δ_t)`.
pub fn conditional_mean(spec: &FactorModelSpec, x_t: &DVector<f64>, t: usize) -> Result<f64> {
    let cm = ConditionalModel::new(spec)?;
    Ok(cond_mean_with(&cm, spec, x_t.as_slice(), t))
}

fn cond_mean_with(cm: &ConditionalModel, spec: &FactorModelSpec, x_t: &[f64], t: usize) -> f64 {
    let d = spec.delta_at(t);
    d + x_t.iter().zip(cm.coefficients.iter()).map(|(x, c)| (x - d) * c).sum::<f64>()
}

/// Conditional means for every row of `x` (row `i` is period `i`).
pub fn conditional_means(spec: &FactorModelSpec, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let cm = ConditionalModel::new(spec)?;
    Ok(conditional_means_with(&cm, spec, x))
}

pub(crate) fn conditional_means_with(cm: &ConditionalModel, spec: &FactorModelSpec, x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(x.nrows(), |i, _| {
        let row: Vec<f64> = x.row(i).iter().copied().collect();
        cond_mean_with(cm, spec, &row, i)
    })
}

/// `‖Ŷ − E[Y|X]‖²` over the periods covered by `fitted`.
pub fn true_proportional_risk(spec: &FactorModelSpec, fitted: &DVector<f64>, draw: &FactorDraw) -> Result<f64> {
    let n = fitted.len();
    if n > draw.x.nrows() {
        return Err(Error::InvalidInput("fitted values longer than the draw".into()));
    }
    let m = conditional_means(spec, &draw.x.rows(0, n).into_owned())?;
    Ok((fitted - m).norm_squared())
}

/// Donors drawn from the Gaussian model; the treated outcome is the
/// conditional mean plus stationary-bootstrapped empirical innovations.
pub fn draw_factor_empirical(
    spec: &FactorModelSpec,
    residual_pool: &[f64],
    block_prob: f64,
    t: usize,
    seed: u64,
) -> Result<FactorDraw> {
    draw_factor_empirical_stream(spec, &ConditionalModel::new(spec)?, residual_pool, block_prob, t, seed, 0)
}

pub(crate) fn draw_factor_empirical_stream(
    spec: &FactorModelSpec,
    cm: &ConditionalModel,
    residual_pool: &[f64],
    block_prob: f64,
    t: usize,
    seed: u64,
    stream: u64,
) -> Result<FactorDraw> {
    if residual_pool.is_empty() {
        return Err(Error::InvalidInput("empty residual pool".into()));
    }
    if !(block_prob > 0.0 && block_prob <= 1.0) {
        return Err(Error::Config(format!("block probability must lie in (0, 1], got {block_prob}")));
    }
    let mut rng = stream_rng(seed, stream);
    let mut draw = draw_with_rng(spec, t, &mut rng);
    let mean = conditional_means_with(cm, spec, &draw.x);
    let (idx, _) = stationary_indices(residual_pool.len(), t, block_prob, &mut rng);
    draw.y = DVector::from_fn(t, |i, _| mean[i] + residual_pool[idx[i]]);
    draw.systematic_y = mean;
    Ok(draw)
}

/// Innovation-order search for [`fit_factor_model`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OrderSelection {
    pub max_ar: usize,
}

impl Default for OrderSelection {
    fn default() -> Self {
        Self { max_ar: 3 }
    }
}

fn autocov(u: &[f64], lag: usize) -> f64 {
    let n = u.len();
    let m = u.iter().sum::<f64>() / n as f64;
    (lag..n).map(|i| (u[i] - m) * (u[i - lag] - m)).sum::<f64>() / n as f64
}

/// Yule-Walker AR fit with BIC order choice.
fn fit_ar(u: &[f64], max_ar: usize) -> (Vec<f64>, f64) {
    let n = u.len();
    let g0 = autocov(u, 0);
    if g0 <= 0.0 {
        return (Vec::new(), 0.0);
    }
    let mut best = (Vec::new(), g0, (n as f64) * g0.ln());
    for k in 1..=max_ar.min(n.saturating_sub(2)) {
        let gam: Vec<f64> = (0..=k).map(|l| autocov(u, l)).collect();
        let toeplitz = DMatrix::from_fn(k, k, |i, j| gam[i.abs_diff(j)]);
        let rhs = DVector::from_fn(k, |i, _| gam[i + 1]);
        let Some(phi) = toeplitz.lu().solve(&rhs) else { continue };
        let s2 = g0 - phi.dot(&rhs);
        if !(s2 > 0.0) || ar_gain(phi.as_slice()).is_err() {
            continue;
        }
        let bic = n as f64 * s2.ln() + k as f64 * (n as f64).ln();
        if bic < best.2 {
            best = (phi.iter().copied().collect(), s2, bic);
        }
    }
    (best.0, best.1)
}

/// Fits the factor model to a (pre-processed) panel.
///
/// Time effects are cross-sectional means; donor loadings come from the
/// leading principal components of the de-meaned donors, scaled so that
/// `L Lᵀ` reproduces their covariance; `ω*` is the plain synthetic-control
/// weight vector and `L_1 = L_{-1}ᵀω*`.
pub fn fit_factor_model(panel: &PanelDataset, r: usize, order: OrderSelection) -> Result<FactorModelSpec> {
    let p = panel.p();
    let n = panel.n();
    if r > p {
        return Err(Error::Config(format!("{r} factors exceed the {p} donors")));
    }
    let delta = DVector::from_fn(n, |t, _| (panel.y[t] + panel.x.row(t).sum()) / (p + 1) as f64);
    let mut resid = DMatrix::zeros(n, p + 1);
    for t in 0..n {
        resid[(t, 0)] = panel.y[t] - delta[t];
        for j in 0..p {
            resid[(t, j + 1)] = panel.x[(t, j)] - delta[t];
        }
    }
    let rd = resid.columns(1, p).into_owned();
    let donor_loadings = if r == 0 {
        DMatrix::zeros(p, 0)
    } else {
        let cov = rd.transpose() * &rd / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order_idx: Vec<usize> = (0..p).collect();
        order_idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        DMatrix::from_fn(p, r, |i, k| {
            let e = order_idx[k];
            eig.eigenvectors[(i, e)] * eig.eigenvalues[e].max(0.0).sqrt()
        })
    };
    let omega = solve_sc(&panel.y, &panel.x, &SolveOptions::default())?.weights.beta;
    let l1 = donor_loadings.transpose() * &omega;
    // factor scores by least squares on the donor loadings
    let factors = if r == 0 {
        DMatrix::zeros(n, 0)
    } else {
        let ll = donor_loadings.transpose() * &donor_loadings;
        let inv = spd_inverse(&ll, "L'L").unwrap_or_else(|_| crate::linalg::pinv(&ll));
        &rd * &donor_loadings * inv
    };
    let mut sigma = DVector::zeros(p + 1);
    let mut ar = Vec::with_capacity(p + 1);
    for u in 0..=p {
        let load = if u == 0 { l1.clone() } else { donor_loadings.row(u - 1).transpose() };
        let idio: Vec<f64> = (0..n).map(|t| resid[(t, u)] - factors.row(t).dot(&load.transpose())).collect();
        let (coefs, _) = fit_ar(&idio, order.max_ar);
        let var = autocov(&idio, 0);
        sigma[u] = var.max(1e-12 * (1.0 + resid.column(u).norm_squared() / n as f64));
        ar.push(coefs);
    }
    FactorModelSpec::new(donor_loadings, omega, delta, sigma, ar)
}
