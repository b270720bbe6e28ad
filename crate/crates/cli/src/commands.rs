use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use serde_json::{json, Value};

use synthsel::diagnostics::{effect_path, penalty_distance, placebo_forecast, placebo_panel, white_test, EffectPath};
use synthsel::divergence::{analytic_divergence, df_hat, divergence_fd_oracle, fd_output, DofReport};
use synthsel::io::{
    load_covariates, load_panel, parse_grid, report_json, write_panel_csv, write_table, PanelSpec, RunConfig,
};
use synthsel::qp::{
    default_v_grid, matching_fit, solve_masc, solve_penalized_sc, solve_penalized_sc_cov_inner, solve_sc,
    solve_sc_cov_inner, EstimatorKind, ScFit, SolveOptions,
};
use synthsel::selection::{
    cv_holdout, cv_loo_untreated, cv_rolling, default_masc_lambdas, default_masc_ms, default_penalized_lambdas,
    default_rolling_window, ic_value, masc_grid, penalized_grid, select_lambda_ic, select_v_ic, sigma2_hat,
    SelectOptions, SelectionResult, Tuned,
};
use synthsel::sim::{
    desk_design, draw_factor_empirical, draw_factor_gaussian, fit_factor_model, mc_dof_paired, run_selection_benchmark,
    solve_sc_total, BenchMethod, BenchmarkConfig, ConditionalModel, DeskDesign, Design, FactorModelSpec, OrderSelection,
};
use synthsel::{ExecMode, PanelDataset};

use crate::args::*;

/// Failure classes mapped to exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Run(synthsel::Error),
}

impl From<synthsel::Error> for CliError {
    fn from(e: synthsel::Error) -> Self {
        CliError::Run(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn usage_grid(s: &str) -> CliResult<Vec<f64>> {
    parse_grid(s).map_err(|e| CliError::Usage(e.to_string()))
}

fn usage_counts(s: &str) -> CliResult<Vec<usize>> {
    usage_grid(s)?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(CliError::Usage(format!("neighbour count {v} is not a positive integer")))
            }
        })
        .collect()
}

pub struct Ctx {
    pub mode: ExecMode,
}

fn emit<T: Serialize>(command: &str, out: &OutputArgs, result: &T) -> CliResult<()> {
    let text = report_json(command, result)?;
    match &out.output {
        Some(p) => std::fs::write(p, text + "\n")?,
        None => {
            use std::io::Write;
            // a closed pipe (e.g. `| head`) is not an error
            if let Err(e) = writeln!(std::io::stdout().lock(), "{text}") {
                if e.kind() != std::io::ErrorKind::BrokenPipe {
                    return Err(e.into());
                }
            }
        }
    }
    Ok(())
}

fn csv_table(out: &OutputArgs, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    if let Some(dir) = &out.csv_dir {
        std::fs::create_dir_all(dir)?;
        write_table(std::fs::File::create(dir.join(name))?, header, rows)?;
    }
    Ok(())
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn load(args: &PanelArgs) -> CliResult<PanelDataset> {
    if let Some(cfg) = &args.config {
        return Ok(RunConfig::from_json_file(cfg)?.load()?);
    }
    let spec = PanelSpec {
        treated: args.treated.clone().unwrap_or_default(),
        treatment_period: args.treatment_period.clone().unwrap_or_default(),
        donors: args.donors.clone(),
    };
    let input = args.input.as_deref().ok_or_else(|| CliError::Usage("--input is required".into()))?;
    let mut panel = load_panel(input, &spec)?;
    if let Some(c) = &args.covariates {
        panel = load_covariates(c, panel)?;
    }
    if args.ma_window == 0 {
        return Err(CliError::Usage("--ma-window must be at least 1".into()));
    }
    if args.ma_window > 1 || args.demean {
        panel = synthsel::io::preprocess(&panel, args.ma_window, args.demean)?;
    }
    Ok(panel)
}

fn donor_names(panel: &PanelDataset) -> Vec<String> {
    panel
        .labels
        .as_ref()
        .map(|l| l.donors.clone())
        .unwrap_or_else(|| (0..panel.p()).map(|j| format!("donor{j}")).collect())
}

/// Fits the configured estimator to `y` on donors `x`.
fn fit_one(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    panel: &PanelDataset,
    est: &EstimatorArgs,
    v: Option<&DVector<f64>>,
) -> synthsel::Result<ScFit> {
    let opts = SolveOptions::default();
    match est.estimator {
        EstimatorArg::Plain => solve_sc(y, x, &opts),
        EstimatorArg::Penalized => solve_penalized_sc(y, x, est.lambda, &opts),
        EstimatorArg::Masc => solve_masc(y, x, est.lambda, est.m, &opts),
        EstimatorArg::Matching => matching_fit(y, x, est.m),
        EstimatorArg::Covariate => {
            let cov = panel
                .covariates
                .as_ref()
                .ok_or_else(|| synthsel::Error::Config("covariate estimator needs --covariates".into()))?;
            let v = v.expect("V resolved before fitting");
            if est.lambda > 0.0 {
                solve_penalized_sc_cov_inner(y, x, cov, v, est.lambda, &opts)
            } else {
                solve_sc_cov_inner(y, x, cov, v, &opts)
            }
        }
    }
}

/// Explicit `--v`, or the IC-minimizing point of the default V grid.
fn resolve_v(panel: &PanelDataset, est: &EstimatorArgs, ctx: &Ctx) -> CliResult<Option<DVector<f64>>> {
    if est.estimator != EstimatorArg::Covariate {
        return Ok(None);
    }
    let cov = panel
        .covariates
        .as_ref()
        .ok_or_else(|| CliError::Usage("--estimator covariate needs --covariates".into()))?;
    if let Some(v) = &est.v {
        if v.len() != cov.len() {
            return Err(CliError::Usage(format!("--v has {} entries for {} covariates", v.len(), cov.len())));
        }
        return Ok(Some(DVector::from_vec(v.clone())));
    }
    let sel = select_v_ic(
        panel,
        &default_v_grid(cov.len()),
        &[est.lambda],
        &SelectOptions {
            mode: ctx.mode,
            sigma2: est.sigma2,
            ..Default::default()
        },
    )?;
    Ok(Some(DVector::from_vec(sel.chosen_point().v.clone().expect("V grid point"))))
}

#[derive(Serialize)]
struct DonorWeight {
    donor: String,
    weight: f64,
}

#[derive(Serialize)]
struct FitSummary {
    estimator: EstimatorKind,
    treated: Option<String>,
    lambda: Option<f64>,
    m: Option<usize>,
    v: Option<Vec<f64>>,
    weights: Vec<DonorWeight>,
    active_set: Vec<String>,
    sets: synthsel::qp::ActiveSets,
    df: DofReport,
    sigma2_hat: f64,
    rss: f64,
    ic: f64,
    penalty_distance: f64,
    kkt_stationarity: f64,
    kkt_complementarity: f64,
    degenerate: bool,
    effect: Option<EffectPath>,
}

fn summarize(panel: &PanelDataset, fit: &ScFit, sigma2: Option<f64>) -> CliResult<FitSummary> {
    let names = donor_names(panel);
    let df = df_hat(fit, &panel.x, panel.covariates.as_ref())?;
    let s2 = match sigma2 {
        Some(s) => s,
        None => sigma2_hat(&panel.y, &panel.x, &SolveOptions::default())?,
    };
    let effect = match (&panel.post_y, &panel.post_x) {
        (Some(py), Some(px)) if !py.is_empty() => Some(effect_path(fit, py, px)?),
        _ => None,
    };
    Ok(FitSummary {
        estimator: fit.kind,
        treated: panel.labels.as_ref().map(|l| l.treated.clone()),
        lambda: fit.lambda,
        m: fit.m,
        v: fit.v.as_ref().map(|v| v.iter().copied().collect()),
        weights: names
            .iter()
            .zip(fit.weights.beta.iter())
            .map(|(d, &w)| DonorWeight {
                donor: d.clone(),
                weight: w,
            })
            .collect(),
        active_set: fit.sets.a.iter().map(|&j| names[j].clone()).collect(),
        sets: fit.sets.clone(),
        sigma2_hat: s2,
        rss: fit.rss(),
        ic: ic_value(fit.rss(), s2, df.df_hat),
        df,
        penalty_distance: penalty_distance(fit, &panel.x),
        kkt_stationarity: fit.kkt.stationarity_residual,
        kkt_complementarity: fit.kkt.complementarity_gap,
        degenerate: fit.degenerate,
        effect,
    })
}

fn time_labels(panel: &PanelDataset) -> (Vec<String>, Vec<String>) {
    let post = panel.post_y.as_ref().map_or(0, |v| v.len());
    match &panel.labels {
        Some(l) if l.pre_times.len() == panel.n() && l.post_times.len() == post => (l.pre_times.clone(), l.post_times.clone()),
        _ => (
            (1..=panel.n()).map(|t| t.to_string()).collect(),
            (panel.n() + 1..=panel.n() + post).map(|t| t.to_string()).collect(),
        ),
    }
}

fn path_rows(panel: &PanelDataset, fit: &ScFit) -> Vec<Vec<String>> {
    let (pre_t, post_t) = time_labels(panel);
    let mut rows: Vec<Vec<String>> = pre_t
        .iter()
        .enumerate()
        .map(|(t, lab)| {
            vec![
                lab.clone(),
                "pre".into(),
                panel.y[t].to_string(),
                fit.fitted[t].to_string(),
                fit.residuals[t].to_string(),
            ]
        })
        .collect();
    if let (Some(py), Some(px)) = (&panel.post_y, &panel.post_x) {
        let f = fit.forecast(px);
        for (t, lab) in post_t.iter().enumerate() {
            rows.push(vec![
                lab.clone(),
                "post".into(),
                py[t].to_string(),
                f[t].to_string(),
                (py[t] - f[t]).to_string(),
            ]);
        }
    }
    rows
}

const PATH_HEADER: [&str; 5] = ["time", "phase", "observed", "synthetic", "gap"];

pub fn fit(args: &FitArgs, ctx: &Ctx) -> CliResult<()> {
    let panel = load(&args.panel)?;
    let v = resolve_v(&panel, &args.est, ctx)?;
    let fit = fit_one(&panel.y, &panel.x, &panel, &args.est, v.as_ref())?;
    let summary = summarize(&panel, &fit, args.est.sigma2)?;
    csv_table(&args.out, "path.csv", &PATH_HEADER, &path_rows(&panel, &fit))?;
    emit("fit", &args.out, &summary)
}

pub fn df(args: &DfArgs, ctx: &Ctx) -> CliResult<()> {
    let panel = load(&args.fit.panel)?;
    let v = resolve_v(&panel, &args.fit.est, ctx)?;
    let fit = fit_one(&panel.y, &panel.x, &panel, &args.fit.est, v.as_ref())?;
    let report = df_hat(&fit, &panel.x, panel.covariates.as_ref())?;
    let div = analytic_divergence(&fit, &panel.x, &panel.y, panel.covariates.as_ref())?;
    let mut out = json!({
        "estimator": fit.kind,
        "df": report,
        "divergence_trace": div.trace,
        "active_set": fit.sets.a,
    });
    if args.fd {
        if !(args.fd_step > 0.0) {
            return Err(CliError::Usage("--fd-step must be positive".into()));
        }
        let x = panel.x.clone();
        let solver = |y: &DVector<f64>| fit_one(y, &x, &panel, &args.fit.est, v.as_ref()).map(fd_output);
        let fd = divergence_fd_oracle(solver, &panel.y, args.fd_step, ctx.mode)?;
        out["fd"] = json!({
            "trace": fd.divergence.trace,
            "max_abs_difference": (&fd.divergence.matrix - &div.matrix).amax(),
            "active_set_changed": fd.active_set_changed,
            "step": args.fd_step,
        });
    }
    emit("df", &args.fit.out, &out)
}

#[derive(Serialize)]
struct SelectReport {
    selection: SelectionResult,
    chosen: FitSummary,
}

fn run_selection(args: &SelectArgs, ctx: &Ctx, command: &str, method: MethodArg) -> CliResult<()> {
    let panel = load(&args.panel)?;
    let opts = SelectOptions {
        mode: ctx.mode,
        sigma2: args.sigma2,
        ..Default::default()
    };
    let tuned = match args.estimator {
        EstimatorArg::Penalized => Tuned::Penalized,
        EstimatorArg::Masc => Tuned::Masc,
        EstimatorArg::Covariate => Tuned::Penalized,
        other => return Err(CliError::Usage(format!("{other:?} has no tuning parameter to select"))),
    };
    let lambdas = match &args.grid {
        Some(g) => usage_grid(g)?,
        None if args.estimator == EstimatorArg::Masc => default_masc_lambdas(),
        None if args.estimator == EstimatorArg::Covariate => vec![0.0],
        None => default_penalized_lambdas(),
    };
    let result = if args.estimator == EstimatorArg::Covariate {
        if method != MethodArg::Sure {
            return Err(CliError::Usage("covariate V selection supports only --method sure".into()));
        }
        let cov = panel
            .covariates
            .as_ref()
            .ok_or_else(|| CliError::Usage("--estimator covariate needs --covariates".into()))?;
        select_v_ic(&panel, &default_v_grid(cov.len()), &lambdas, &opts)?
    } else {
        let grid = match tuned {
            Tuned::Masc => {
                let ms = match &args.m_grid {
                    Some(g) => usage_counts(g)?,
                    None => default_masc_ms(panel.p()),
                };
                masc_grid(&lambdas, &ms)
            }
            Tuned::Penalized => penalized_grid(&lambdas),
        };
        match method {
            MethodArg::Sure => select_lambda_ic(&panel, tuned, &grid, &opts)?,
            MethodArg::Holdout => cv_holdout(&panel, tuned, &grid, args.split, &opts)?,
            MethodArg::Loo => cv_loo_untreated(&panel, tuned, &grid, &opts)?,
            MethodArg::Rolling => cv_rolling(
                &panel,
                tuned,
                &grid,
                args.window.unwrap_or_else(|| default_rolling_window(panel.n())),
                args.horizon,
                &opts,
            )?,
        }
    };
    let point = result.chosen_point().clone();
    let est = EstimatorArgs {
        estimator: args.estimator,
        lambda: point.lambda,
        m: point.m.unwrap_or(1),
        v: point.v.clone(),
        sigma2: args.sigma2,
    };
    let v = point.v.map(DVector::from_vec);
    let fit = fit_one(&panel.y, &panel.x, &panel, &est, v.as_ref())?;
    let chosen = summarize(&panel, &fit, Some(result.sigma2_hat))?;
    let rows: Vec<Vec<String>> = result
        .grid
        .iter()
        .enumerate()
        .map(|(i, g)| {
            vec![
                i.to_string(),
                g.lambda.to_string(),
                g.m.map(|m| m.to_string()).unwrap_or_default(),
                g.v.as_ref()
                    .map(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default(),
                opt_cell(result.scores[i]),
                opt_cell(result.df.as_ref().and_then(|d| d[i])),
                (i == result.chosen).to_string(),
            ]
        })
        .collect();
    csv_table(&args.out, "curve.csv", &["index", "lambda", "m", "v", "score", "df", "chosen"], &rows)?;
    csv_table(&args.out, "path.csv", &PATH_HEADER, &path_rows(&panel, &fit))?;
    emit(command, &args.out, &SelectReport { selection: result, chosen })
}

pub fn select(args: &SelectArgs, ctx: &Ctx) -> CliResult<()> {
    run_selection(args, ctx, "select", args.method.unwrap_or(MethodArg::Sure))
}

pub fn cv(args: &SelectArgs, ctx: &Ctx) -> CliResult<()> {
    let method = args.method.unwrap_or(MethodArg::Holdout);
    if method == MethodArg::Sure {
        return Err(CliError::Usage("cv takes --method holdout, loo or rolling; use select for sure".into()));
    }
    run_selection(args, ctx, "cv", method)
}

fn desk(shape: &DesignShape) -> DeskDesign {
    DeskDesign {
        donors: shape.donors,
        factors: shape.factors,
        near: shape.near.min(shape.donors),
        ..DeskDesign::default()
    }
}

fn design(d: DesignArg) -> Design {
    match d {
        DesignArg::Gaussian => Design::Gaussian,
        DesignArg::Empirical => Design::Empirical,
        DesignArg::BlockBootstrap => Design::BlockBootstrap,
    }
}

fn simulated_spec(args: &SimulateArgs) -> CliResult<FactorModelSpec> {
    match &args.fit_input {
        Some(path) => {
            let (Some(treated), Some(period)) = (&args.treated, &args.treatment_period) else {
                return Err(CliError::Usage("--fit-input needs --treated and --treatment-period".into()));
            };
            let panel = load_panel(
                path,
                &PanelSpec {
                    treated: treated.clone(),
                    treatment_period: period.clone(),
                    donors: None,
                },
            )?;
            Ok(fit_factor_model(&panel, args.shape.factors, OrderSelection::default())?)
        }
        None => Ok(desk_design(&desk(&args.shape), args.periods, args.shape.seed)?),
    }
}

pub fn simulate(args: &SimulateArgs, ctx: &Ctx) -> CliResult<()> {
    match args.experiment {
        ExperimentArg::Draw => {
            if args.pre < 2 || args.pre > args.periods {
                return Err(CliError::Usage(format!("--pre must lie in 2..={}", args.periods)));
            }
            let spec = simulated_spec(args)?;
            let cm = ConditionalModel::new(&spec)?;
            let seed = args.shape.seed;
            let draw = match args.design {
                DesignArg::Gaussian => draw_factor_gaussian(&spec, args.periods, seed),
                DesignArg::Empirical => {
                    // Gaussian pool with the conditional variance; a file-based
                    // pool is available through the library.
                    let pool = draw_factor_gaussian(&spec, 500, seed.wrapping_add(1));
                    let m = synthsel::sim::conditional_means(&spec, &pool.x)?;
                    let resid: Vec<f64> = (&pool.y - m).iter().copied().collect();
                    draw_factor_empirical(&spec, &resid, 0.2, args.periods, seed)?
                }
                DesignArg::BlockBootstrap => {
                    return Err(CliError::Usage("draw supports the gaussian and empirical designs".into()))
                }
            };
            let mut panel = draw.panel(args.pre)?;
            panel.labels = Some(synthsel::PanelLabels {
                treated: "treated".into(),
                donors: (0..spec.donors()).map(|j| format!("donor{j}")).collect(),
                pre_times: (1..=args.pre).map(|t| t.to_string()).collect(),
                post_times: (args.pre + 1..=args.periods).map(|t| t.to_string()).collect(),
                covariate_names: Vec::new(),
            });
            if let Some(p) = &args.panel_out {
                write_panel_csv(&panel, std::fs::File::create(p)?)?;
            }
            let cond = synthsel::sim::conditional_means(&spec, &draw.x)?;
            emit(
                "simulate",
                &args.out,
                &json!({
                    "experiment": "draw",
                    "seed": seed,
                    "periods": args.periods,
                    "pre": args.pre,
                    "donors": spec.donors(),
                    "factors": spec.factors(),
                    "omega_star": spec.omega_star.as_slice(),
                    "innovation_variance": spec.sigma.as_slice(),
                    "innovation_orders": spec.innovation_orders(),
                    "conditional_variance": cm.residual_variance,
                    "conditional_mean": cond.as_slice(),
                    "treatment_period": (args.pre + 1).to_string(),
                }),
            )
        }
        ExperimentArg::Dof => {
            let totals = usage_grid(&args.totals)?;
            let (t, p) = (args.periods, args.shape.donors);
            let mut g = synthsel::sim::stream_rng(args.shape.seed, u64::MAX);
            let x = DMatrix::from_fn(t, p, |_, _| rand_normal(&mut g));
            let opts = SolveOptions::default();
            let mut rows = Vec::new();
            for &a in &totals {
                let mc = mc_dof_paired(
                    |r| DVector::from_fn(t, |_, _| rand_normal(r)),
                    |y| {
                        let f = solve_sc_total(y, &x, a, &opts)?;
                        Ok((f.fitted.clone(), f.sets.a.len() as f64 - 1.0))
                    },
                    args.reps,
                    args.shape.seed,
                    1.0,
                    ctx.mode,
                )?;
                rows.push(json!({
                    "total": a,
                    "mc_df": mc.df,
                    "mc_se": mc.se,
                    "expected_active_minus_one": mc.reference_mean,
                    "difference_se": mc.difference_se,
                }));
            }
            let table: Vec<Vec<String>> = rows
                .iter()
                .map(|r| {
                    ["total", "mc_df", "mc_se", "expected_active_minus_one"]
                        .iter()
                        .map(|k| r[*k].to_string())
                        .collect()
                })
                .collect();
            csv_table(&args.out, "dof.csv", &["total", "mc_df", "mc_se", "expected_active_minus_one"], &table)?;
            emit(
                "simulate",
                &args.out,
                &json!({"experiment": "dof", "periods": t, "donors": p, "replications": args.reps, "points": rows}),
            )
        }
    }
}

fn rand_normal(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    use rand::Rng;
    r.sample(rand_distr::StandardNormal)
}

pub fn benchmark(args: &BenchmarkArgs, ctx: &Ctx) -> CliResult<()> {
    let methods = match &args.methods {
        Some(ms) => ms
            .iter()
            .map(|m| m.parse::<BenchMethod>().map_err(CliError::Usage))
            .collect::<CliResult<Vec<_>>>()?,
        None => BenchMethod::ALL.to_vec(),
    };
    let cfg = BenchmarkConfig {
        design: design(args.design),
        methods,
        replications: args.reps,
        seed: args.shape.seed,
        t_pre: args.pre,
        t_post: args.post,
        desk: desk(&args.shape),
        lambdas: match &args.grid {
            Some(g) => usage_grid(g)?,
            None => default_penalized_lambdas(),
        },
        holdout_split: args.split,
        rolling_window: args.window,
        rolling_horizon: args.horizon,
        block_prob: args.block_prob,
        mode: ctx.mode,
    };
    let report = run_selection_benchmark(&cfg)?;
    let rows: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                serde_json::to_value(r.method).unwrap().as_str().unwrap_or_default().to_string(),
                r.mse_tau1.to_string(),
                r.mse_tau12.to_string(),
                opt_cell(r.mse_lambda),
                opt_cell(r.mse_risk),
                opt_cell(r.mse_risk_raw),
                r.mean_lambda_hat.to_string(),
            ]
        })
        .collect();
    csv_table(
        &args.out,
        "benchmark.csv",
        &["method", "mse_tau1", "mse_tau12", "mse_lambda", "mse_risk", "mse_risk_raw", "mean_lambda_hat"],
        &rows,
    )?;
    let c = &report.curves;
    let curve_rows: Vec<Vec<String>> = c
        .lambdas
        .iter()
        .enumerate()
        .map(|(i, l)| {
            vec![
                l.to_string(),
                opt_cell(c.mean_true_risk.as_ref().map(|v| v[i])),
                c.mean_sure[i].to_string(),
            ]
        })
        .collect();
    csv_table(&args.out, "risk_curves.csv", &["lambda", "mean_true_risk", "mean_sure"], &curve_rows)?;
    emit("benchmark", &args.out, &report)
}

pub fn placebo(args: &PlaceboArgs, ctx: &Ctx) -> CliResult<()> {
    let base = load(&args.fit.panel)?;
    let panel = match &args.unit {
        Some(u) => {
            let names = donor_names(&base);
            let j = names
                .iter()
                .position(|n| n == u)
                .ok_or_else(|| CliError::Usage(format!("placebo unit '{u}' is not a donor")))?;
            placebo_panel(&base, j)?
        }
        None => base,
    };
    let (Some(py), Some(px)) = (panel.post_y.clone(), panel.post_x.clone()) else {
        return Err(CliError::Run(synthsel::Error::Config("placebo needs post-period data".into())));
    };
    if let Some(g) = &args.grid {
        if args.fit.est.estimator != EstimatorArg::Penalized {
            return Err(CliError::Usage("--grid placebo curves use --estimator penalized".into()));
        }
        let mut curve = Vec::new();
        for l in usage_grid(g)? {
            let fit = solve_penalized_sc(&panel.y, &panel.x, l, &SolveOptions::default())?;
            let rep = placebo_forecast(&fit, &py, &px, args.horizon)?;
            curve.push(json!({"lambda": l, "mean_squared_error": rep.mean_squared_error}));
        }
        let rows: Vec<Vec<String>> =
            curve.iter().map(|r| vec![r["lambda"].to_string(), r["mean_squared_error"].to_string()]).collect();
        csv_table(&args.fit.out, "placebo_curve.csv", &["lambda", "mean_squared_error"], &rows)?;
        return emit("placebo", &args.fit.out, &json!({"target": target_name(&panel), "curve": curve}));
    }
    let v = resolve_v(&panel, &args.fit.est, ctx)?;
    let fit = fit_one(&panel.y, &panel.x, &panel, &args.fit.est, v.as_ref())?;
    let rep = placebo_forecast(&fit, &py, &px, args.horizon)?;
    csv_table(&args.fit.out, "path.csv", &PATH_HEADER, &path_rows(&panel, &fit))?;
    emit("placebo", &args.fit.out, &json!({"target": target_name(&panel), "report": rep}))
}

fn target_name(panel: &PanelDataset) -> Value {
    panel.labels.as_ref().map_or(Value::Null, |l| Value::String(l.treated.clone()))
}

pub fn whitetest(args: &FitArgs, ctx: &Ctx) -> CliResult<()> {
    let panel = load(&args.panel)?;
    let v = resolve_v(&panel, &args.est, ctx)?;
    let fit = fit_one(&panel.y, &panel.x, &panel, &args.est, v.as_ref())?;
    let rep = white_test(&fit, &panel.x)?;
    emit("whitetest", &args.out, &rep)
}
