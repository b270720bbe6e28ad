//! Monte-Carlo comparison of tuning-parameter selection methods.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::Serialize;

use super::bootstrap::stationary_indices;
use super::factor::{conditional_means_with, draw_factor_empirical_stream, draw_factor_gaussian_stream};
use super::{stream_rng, ConditionalModel, FactorModelSpec};
use crate::error::{Error, Result};
use crate::exec::{map_indexed, ExecMode};
use crate::panel::PanelDataset;
use crate::selection::{
    choose, cv_holdout, cv_loo_untreated, cv_rolling, default_penalized_lambdas, default_rolling_window, fit_grid,
    ic_scores, penalized_grid, sigma2_hat, GridPoint, SelectOptions, Tuned,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Gaussian,
    Empirical,
    BlockBootstrap,
}

impl std::str::FromStr for Design {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "empirical" => Ok(Self::Empirical),
            "block_bootstrap" | "block-bootstrap" => Ok(Self::BlockBootstrap),
            other => Err(format!("unknown design '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchMethod {
    /// Oracle: minimizes the realized true risk.
    Risk,
    Sure,
    /// Information criterion with the true conditional variance.
    SureStar,
    CvHoldout,
    CvLoo,
    CvRolling,
}

impl BenchMethod {
    pub const ALL: [BenchMethod; 6] = [
        BenchMethod::Risk,
        BenchMethod::Sure,
        BenchMethod::SureStar,
        BenchMethod::CvHoldout,
        BenchMethod::CvLoo,
        BenchMethod::CvRolling,
    ];

    fn needs_truth(self) -> bool {
        matches!(self, BenchMethod::Risk | BenchMethod::SureStar)
    }
}

impl std::str::FromStr for BenchMethod {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "risk" => Ok(Self::Risk),
            "sure" => Ok(Self::Sure),
            "sure_star" | "sure*" => Ok(Self::SureStar),
            "holdout" | "cv_holdout" => Ok(Self::CvHoldout),
            "loo" | "cv_loo" => Ok(Self::CvLoo),
            "rolling" | "cv_rolling" => Ok(Self::CvRolling),
            other => Err(format!("unknown benchmark method '{other}'")),
        }
    }
}

/// Parameters of the synthetic desk-scale factor design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeskDesign {
    pub donors: usize,
    pub factors: usize,
    /// Donors carrying the treated unit's loading (the support of `ω*`).
    pub near: usize,
    /// Spread of the near donors' loadings around their common center.
    pub near_spread: f64,
    /// Scale of the near cluster's center.
    pub center_scale: f64,
    /// Scale of the remaining donors' loadings.
    pub far_scale: f64,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub ar1: f64,
}

impl Default for DeskDesign {
    fn default() -> Self {
        Self {
            donors: 40,
            factors: 5,
            near: 10,
            near_spread: 0.5,
            center_scale: 0.5,
            far_scale: 1.5,
            sigma_x: 0.5,
            sigma_y: 0.5,
            ar1: 0.3,
        }
    }
}

/// Factor model with sparse `ω*` on a cluster of near donors.
pub fn desk_design(d: &DeskDesign, periods: usize, seed: u64) -> Result<FactorModelSpec> {
    if d.near == 0 || d.near > d.donors {
        return Err(Error::Config(format!("near-donor count {} must lie in 1..={}", d.near, d.donors)));
    }
    let mut rng = stream_rng(seed, u64::MAX);
    let r = d.factors;
    let center: Vec<f64> = (0..r).map(|_| d.center_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let loadings = DMatrix::from_fn(d.donors, r, |j, k| {
        let z: f64 = rng.sample(StandardNormal);
        if j < d.near {
            center[k] + d.near_spread * z
        } else {
            d.far_scale * z
        }
    });
    let mut omega = DVector::zeros(d.donors);
    for j in 0..d.near {
        omega[j] = rng.random_range(0.5..1.5);
    }
    omega /= omega.sum();
    let mut sigma = DVector::from_element(d.donors + 1, d.sigma_x * d.sigma_x);
    sigma[0] = d.sigma_y * d.sigma_y;
    let ar = if d.ar1 == 0.0 { vec![Vec::new(); d.donors + 1] } else { vec![vec![d.ar1]; d.donors + 1] };
    FactorModelSpec::new(loadings, omega, DVector::zeros(periods), sigma, ar)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub design: Design,
    pub methods: Vec<BenchMethod>,
    pub replications: usize,
    pub seed: u64,
    pub t_pre: usize,
    pub t_post: usize,
    pub desk: DeskDesign,
    pub lambdas: Vec<f64>,
    pub holdout_split: f64,
    /// Defaults to `⌈t_pre/2⌉`.
    pub rolling_window: Option<usize>,
    pub rolling_horizon: usize,
    pub block_prob: f64,
    pub mode: ExecMode,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            design: Design::Gaussian,
            methods: BenchMethod::ALL.to_vec(),
            replications: 200,
            seed: 7,
            t_pre: 24,
            t_post: 12,
            desk: DeskDesign::default(),
            lambdas: default_penalized_lambdas(),
            holdout_split: 0.5,
            rolling_window: None,
            rolling_horizon: 1,
            block_prob: 0.2,
            mode: ExecMode::Parallel,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub method: BenchMethod,
    pub mse_tau1: f64,
    pub mse_tau12: f64,
    /// Against the true-risk minimizer; absent without a known truth.
    pub mse_lambda: Option<f64>,
    /// Per-period risk estimate against the per-period true risk.
    pub mse_risk: Option<f64>,
    /// Unnormalized score against per-period risk plus noise variance.
    pub mse_risk_raw: Option<f64>,
    pub mean_lambda_hat: f64,
    pub replications_used: usize,
}

/// Grid-wise averages over replications.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskCurves {
    pub lambdas: Vec<f64>,
    pub mean_true_risk: Option<Vec<f64>>,
    pub mean_sure: Vec<f64>,
    /// Spearman correlation of SURE with true risk over the grid, averaged.
    pub mean_rank_correlation: Option<f64>,
    /// Share of replications whose true-risk minimizer is interior.
    pub interior_minimizer_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkReport {
    pub design: Design,
    pub replications: usize,
    pub failed_replications: usize,
    pub seed: u64,
    pub donors: usize,
    pub t_pre: usize,
    pub t_post: usize,
    pub rows: Vec<BenchmarkRow>,
    pub curves: RiskCurves,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

struct MethodOutcome {
    lambda_hat: f64,
    tau1: f64,
    tau12: f64,
    lambda_err: Option<f64>,
    risk_err: Option<f64>,
    risk_raw_err: Option<f64>,
}

struct RepOutcome {
    methods: Vec<Option<MethodOutcome>>,
    true_risk: Option<Vec<f64>>,
    sure: Vec<f64>,
    rank_corr: Option<f64>,
    interior: Option<bool>,
}

/// Heavy-tailed innovation pool with the conditional variance of the model.
fn residual_pool(cm: &ConditionalModel, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, u64::MAX - 1);
    let t4 = StudentT::new(4.0).expect("valid degrees of freedom");
    // t(4) has variance 2
    let scale = (cm.residual_variance / 2.0).sqrt();
    (0..500).map(|_| scale * t4.sample(&mut rng)).collect()
}

struct Setup<'a> {
    cfg: &'a BenchmarkConfig,
    spec: FactorModelSpec,
    cm: ConditionalModel,
    pool: Vec<f64>,
    base: Option<DMatrix<f64>>,
    grid: Vec<GridPoint>,
}

impl Setup<'_> {
    /// Draws replication `rep`: panel plus pre-period conditional means.
    fn draw(&self, rep: usize) -> Result<(PanelDataset, Option<DVector<f64>>)> {
        let cfg = self.cfg;
        let t = cfg.t_pre + cfg.t_post;
        match cfg.design {
            Design::Gaussian | Design::Empirical => {
                let draw = if cfg.design == Design::Gaussian {
                    draw_factor_gaussian_stream(&self.spec, t, cfg.seed, rep as u64)
                } else {
                    draw_factor_empirical_stream(&self.spec, &self.cm, &self.pool, cfg.block_prob, t, cfg.seed, rep as u64)?
                };
                let x_pre = draw.x.rows(0, cfg.t_pre).into_owned();
                let m = conditional_means_with(&self.cm, &self.spec, &x_pre);
                Ok((draw.panel(cfg.t_pre)?, Some(m)))
            }
            Design::BlockBootstrap => {
                let base = self.base.as_ref().expect("base panel drawn");
                let mut rng = stream_rng(cfg.seed, rep as u64);
                let (idx, _) = stationary_indices(base.nrows(), t, cfg.block_prob, &mut rng);
                let rows = base.select_rows(&idx);
                let p = base.ncols() - 1;
                let pre = PanelDataset::new(
                    rows.view((0, 0), (cfg.t_pre, 1)).column(0).into_owned(),
                    rows.view((0, 1), (cfg.t_pre, p)).into_owned(),
                )?;
                let panel = pre.with_post(
                    rows.view((cfg.t_pre, 0), (cfg.t_post, 1)).column(0).into_owned(),
                    rows.view((cfg.t_pre, 1), (cfg.t_post, p)).into_owned(),
                )?;
                Ok((panel, None))
            }
        }
    }

    fn replicate(&self, rep: usize) -> Result<RepOutcome> {
        let cfg = self.cfg;
        let (panel, truth) = self.draw(rep)?;
        let n = panel.n() as f64;
        let sel = SelectOptions {
            mode: ExecMode::Sequential,
            ..Default::default()
        };
        let fits: Vec<_> = fit_grid(&panel.y, &panel.x, Tuned::Penalized, &self.grid, &sel)
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let s2 = sigma2_hat(&panel.y, &panel.x, &sel.solve)?;
        let wrapped: Vec<Result<_>> = fits.iter().cloned().map(Ok).collect();
        let (sure, _, _) = ic_scores(&wrapped, &panel.x, None, s2);
        let sure: Vec<f64> = sure.into_iter().map(|s| s.unwrap_or(f64::NAN)).collect();
        let true_risk: Option<Vec<f64>> = truth
            .as_ref()
            .map(|m| fits.iter().map(|f| (&f.fitted - m).norm_squared()).collect());
        let sigma2_true = self.cm.residual_variance;
        let star: Option<Vec<f64>> = truth.as_ref().map(|_| {
            let (s, _, _) = ic_scores(&wrapped, &panel.x, None, sigma2_true);
            s.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect()
        });
        let lambda_star = true_risk.as_ref().and_then(|r| {
            let scores: Vec<Option<f64>> = r.iter().map(|&v| Some(v)).collect();
            choose(&self.grid, &scores).map(|(k, _)| k)
        });
        let post_y = panel.post_y.clone().expect("benchmark panels have a post period");
        let post_x = panel.post_x.clone().expect("benchmark panels have a post period");
        let h12 = post_y.len().min(12);

        let mut methods = Vec::with_capacity(cfg.methods.len());
        for &method in &cfg.methods {
            if method.needs_truth() && true_risk.is_none() {
                methods.push(None);
                continue;
            }
            // (chosen index, per-period risk estimate, raw score / n)
            let picked: Option<(usize, Option<(f64, f64)>)> = match method {
                BenchMethod::Risk => lambda_star.map(|k| {
                    let r = true_risk.as_ref().unwrap()[k] / n;
                    (k, Some((r, r + sigma2_true)))
                }),
                BenchMethod::Sure => {
                    let scores: Vec<Option<f64>> = sure.iter().map(|&v| Some(v)).collect();
                    choose(&self.grid, &scores).map(|(k, _)| (k, Some(((sure[k] - n * s2) / n, sure[k] / n))))
                }
                BenchMethod::SureStar => {
                    let st = star.as_ref().unwrap();
                    let scores: Vec<Option<f64>> = st.iter().map(|&v| Some(v)).collect();
                    choose(&self.grid, &scores)
                        .map(|(k, _)| (k, Some(((st[k] - n * sigma2_true) / n, st[k] / n))))
                }
                BenchMethod::CvHoldout | BenchMethod::CvLoo | BenchMethod::CvRolling => {
                    let res = match method {
                        BenchMethod::CvHoldout => cv_holdout(&panel, Tuned::Penalized, &self.grid, cfg.holdout_split, &sel),
                        BenchMethod::CvLoo => cv_loo_untreated(&panel, Tuned::Penalized, &self.grid, &sel),
                        _ => cv_rolling(
                            &panel,
                            Tuned::Penalized,
                            &self.grid,
                            cfg.rolling_window.unwrap_or_else(|| default_rolling_window(panel.n())),
                            cfg.rolling_horizon,
                            &sel,
                        ),
                    };
                    res.ok().map(|r| {
                        let score = r.chosen_score();
                        (r.chosen, Some((score - s2, score)))
                    })
                }
            };
            methods.push(picked.map(|(k, est)| {
                let tau = &post_y - fits[k].forecast(&post_x);
                let tau1 = tau[0];
                let tau12 = tau.rows(0, h12).mean();
                let lambda_hat = self.grid[k].lambda;
                let (lambda_err, risk_err, risk_raw_err) = match (&true_risk, lambda_star, est) {
                    (Some(r), Some(ks), Some((rhat, raw))) => {
                        let target = r[k] / n;
                        (
                            Some((lambda_hat - self.grid[ks].lambda).powi(2)),
                            Some((rhat - target).powi(2)),
                            Some((raw - (target + sigma2_true)).powi(2)),
                        )
                    }
                    _ => (None, None, None),
                };
                MethodOutcome {
                    lambda_hat,
                    tau1: tau1 * tau1,
                    tau12: tau12 * tau12,
                    lambda_err,
                    risk_err,
                    risk_raw_err,
                }
            }));
        }
        let rank_corr = true_risk.as_ref().map(|r| spearman(&sure, r));
        let interior = lambda_star.map(|k| k > 0 && k + 1 < self.grid.len());
        Ok(RepOutcome {
            methods,
            true_risk,
            sure,
            rank_corr,
            interior,
        })
    }
}

fn mean(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Runs every replication and aggregates per-method mean squared errors.
///
/// The true treatment effect is zero in all designs.
pub fn run_selection_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if cfg.replications == 0 {
        return Err(Error::Config("need at least one replication".into()));
    }
    if cfg.t_post == 0 || cfg.t_pre < 4 {
        return Err(Error::Config("benchmark needs at least 4 pre and 1 post period".into()));
    }
    if cfg.lambdas.is_empty() {
        return Err(Error::Config("empty λ grid".into()));
    }
    let t = cfg.t_pre + cfg.t_post;
    let spec = super::desk_design(&cfg.desk, t, cfg.seed)?;
    let cm = ConditionalModel::new(&spec)?;
    let pool = residual_pool(&cm, cfg.seed);
    let base = (cfg.design == Design::BlockBootstrap).then(|| {
        let d = draw_factor_gaussian_stream(&spec, 4 * t, cfg.seed, u64::MAX - 2);
        let mut m = DMatrix::zeros(4 * t, spec.donors() + 1);
        m.set_column(0, &d.y);
        m.columns_mut(1, spec.donors()).copy_from(&d.x);
        m
    });
    let setup = Setup {
        cfg,
        spec,
        cm,
        pool,
        base,
        grid: penalized_grid(&cfg.lambdas),
    };
    let outcomes = map_indexed(cfg.mode, cfg.replications, |r| setup.replicate(r));
    let mut ok = Vec::new();
    let mut failed = 0;
    for o in outcomes {
        match o {
            Ok(o) => ok.push(o),
            Err(e) => {
                log::warn!("benchmark replication failed: {e}");
                failed += 1;
            }
        }
    }
    if ok.is_empty() {
        return Err(Error::AllFitsFailed {
            count: cfg.replications,
            first: "every replication failed".into(),
        });
    }

    let mut rows = Vec::new();
    for (mi, &method) in cfg.methods.iter().enumerate() {
        let outs: Vec<&MethodOutcome> = ok.iter().filter_map(|o| o.methods[mi].as_ref()).collect();
        if outs.is_empty() {
            continue;
        }
        let col = |f: &dyn Fn(&MethodOutcome) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = outs.iter().filter_map(|o| f(o)).collect();
            mean(&v)
        };
        rows.push(BenchmarkRow {
            method,
            mse_tau1: col(&|o| Some(o.tau1)).unwrap_or(0.0),
            mse_tau12: col(&|o| Some(o.tau12)).unwrap_or(0.0),
            mse_lambda: col(&|o| o.lambda_err),
            mse_risk: col(&|o| o.risk_err),
            mse_risk_raw: col(&|o| o.risk_raw_err),
            mean_lambda_hat: col(&|o| Some(o.lambda_hat)).unwrap_or(0.0),
            replications_used: outs.len(),
        });
    }

    let k = cfg.lambdas.len();
    let avg_curve = |get: &dyn Fn(&RepOutcome) -> Option<&Vec<f64>>| -> Option<Vec<f64>> {
        let curves: Vec<&Vec<f64>> = ok.iter().filter_map(|o| get(o)).collect();
        if curves.is_empty() {
            return None;
        }
        Some((0..k).map(|i| curves.iter().map(|c| c[i]).sum::<f64>() / curves.len() as f64).collect())
    };
    let corr: Vec<f64> = ok.iter().filter_map(|o| o.rank_corr).collect();
    let interior: Vec<f64> = ok.iter().filter_map(|o| o.interior.map(|b| b as u8 as f64)).collect();
    let curves = RiskCurves {
        lambdas: cfg.lambdas.clone(),
        mean_true_risk: avg_curve(&|o| o.true_risk.as_ref()),
        mean_sure: avg_curve(&|o| Some(&o.sure)).unwrap_or_default(),
        mean_rank_correlation: mean(&corr),
        interior_minimizer_share: mean(&interior),
    };
    Ok(BenchmarkReport {
        design: cfg.design,
        replications: cfg.replications,
        failed_replications: failed,
        seed: cfg.seed,
        donors: cfg.desk.donors,
        t_pre: cfg.t_pre,
        t_post: cfg.t_post,
        rows,
        curves,
    })
}
