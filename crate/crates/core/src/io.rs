//! CSV panel ingestion, preprocessing, run configuration and JSON reports.
//!
//! Panel files have a header row whose first column is `time`; every other
//! column is one unit's series. Covariate files have a first column
//! `covariate` and one column per unit, one row per covariate.

use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Covariates, PanelDataset, PanelLabels};
use crate::qp::EstimatorKind;
use crate::selection::SelectionMethod;

pub const SCHEMA_VERSION: u32 = 1;

/// Which columns form the panel and where treatment starts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub treated: String,
    /// Time label of the first post-treatment period.
    pub treatment_period: String,
    /// Donor columns to keep; all non-treated columns when absent.
    #[serde(default)]
    pub donors: Option<Vec<String>>,
}

struct Table {
    header: Vec<String>,
    times: Vec<String>,
    values: DMatrix<f64>,
}

fn read_table<R: Read>(reader: R, first: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    if header.first().map(|h| h.as_str()) != Some(first) {
        return Err(Error::Parse {
            row: 1,
            column: 1,
            message: format!("first header must be '{first}', found '{}'", header.first().map_or("", |h| h.as_str())),
        });
    }
    if header.len() < 2 {
        return Err(Error::Parse {
            row: 1,
            column: 2,
            message: "no unit columns".into(),
        });
    }
    let width = header.len();
    let mut times = Vec::new();
    let mut cells = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec.position().map_or(times.len() + 2, |p| p.line() as usize);
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(Error::Parse {
                row,
                column: rec.len().min(width) + 1,
                message: format!("expected {width} fields, found {}", rec.len()),
            });
        }
        times.push(rec[0].to_string());
        for (c, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                row,
                column: c + 1,
                message: format!("non-numeric cell '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c + 1,
                    message: format!("non-finite cell '{field}'"),
                });
            }
            cells.push(v);
        }
    }
    let values = DMatrix::from_row_slice(times.len(), width - 1, &cells);
    Ok(Table { header, times, values })
}

fn column_index(header: &[String], name: &str) -> Result<usize> {
    header.iter().skip(1).position(|h| h == name).ok_or_else(|| Error::Parse {
        row: 1,
        column: header.len() + 1,
        message: format!("missing unit column '{name}'"),
    })
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

/// Parses a panel from any reader; see [`load_panel`].
pub fn parse_panel<R: Read>(reader: R, spec: &PanelSpec) -> Result<PanelDataset> {
    let table = read_table(reader, "time")?;
    let ti = column_index(&table.header, &spec.treated)?;
    let donors: Vec<String> = match &spec.donors {
        Some(d) => d.clone(),
        None => table.header[1..].iter().filter(|h| **h != spec.treated).cloned().collect(),
    };
    let di = donors
        .iter()
        .map(|d| column_index(&table.header, d))
        .collect::<Result<Vec<_>>>()?;
    if di.contains(&ti) {
        return Err(Error::Config(format!("treated unit '{}' listed as a donor", spec.treated)));
    }
    let split = table
        .times
        .iter()
        .position(|t| *t == spec.treatment_period)
        .ok_or_else(|| Error::Config(format!("treatment period '{}' not found in the time column", spec.treatment_period)))?;
    let total = table.times.len();
    let y = table.values.column(ti).into_owned();
    let x = table.values.select_columns(&di);
    let mut panel = PanelDataset::new(y.rows(0, split).into_owned(), x.rows(0, split).into_owned())?;
    if split < total {
        panel = panel.with_post(y.rows(split, total - split).into_owned(), x.rows(split, total - split).into_owned())?;
    }
    panel.labels = Some(PanelLabels {
        treated: spec.treated.clone(),
        donors,
        pre_times: table.times[..split].to_vec(),
        post_times: table.times[split..].to_vec(),
        covariate_names: Vec::new(),
    });
    Ok(panel)
}

/// Loads a panel CSV and splits it at the treatment period.
pub fn load_panel(path: &Path, spec: &PanelSpec) -> Result<PanelDataset> {
    parse_panel(open(path)?, spec)
}

/// Attaches covariates from a reader; units are matched by column name.
pub fn parse_covariates<R: Read>(reader: R, panel: PanelDataset) -> Result<PanelDataset> {
    let table = read_table(reader, "covariate")?;
    let labels = panel
        .labels
        .clone()
        .ok_or_else(|| Error::Config("covariates need a labelled panel".into()))?;
    let ti = column_index(&table.header, &labels.treated)?;
    let di = labels
        .donors
        .iter()
        .map(|d| column_index(&table.header, d))
        .collect::<Result<Vec<_>>>()?;
    let cov = Covariates::new(table.values.column(ti).into_owned(), table.values.select_columns(&di))?;
    let mut panel = panel.with_covariates(cov)?;
    if let Some(l) = panel.labels.as_mut() {
        l.covariate_names = table.times;
    }
    Ok(panel)
}

pub fn load_covariates(path: &Path, panel: PanelDataset) -> Result<PanelDataset> {
    parse_covariates(open(path)?, panel)
}

fn unit_names(panel: &PanelDataset) -> (String, Vec<String>) {
    match &panel.labels {
        Some(l) => (l.treated.clone(), l.donors.clone()),
        None => ("treated".into(), (0..panel.p()).map(|j| format!("donor{j}")).collect()),
    }
}

fn time_names(panel: &PanelDataset) -> Vec<String> {
    let post = panel.post_y.as_ref().map_or(0, |v| v.len());
    match &panel.labels {
        Some(l) if l.pre_times.len() == panel.n() && l.post_times.len() == post => {
            l.pre_times.iter().chain(&l.post_times).cloned().collect()
        }
        _ => (1..=panel.n() + post).map(|t| t.to_string()).collect(),
    }
}

/// Writes the panel in the format read by [`parse_panel`].
pub fn write_panel_csv<W: std::io::Write>(panel: &PanelDataset, out: W) -> Result<()> {
    let (treated, donors) = unit_names(panel);
    let times = time_names(panel);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["time".to_string(), treated];
    header.extend(donors);
    w.write_record(&header)?;
    let n = panel.n();
    for (t, label) in times.iter().enumerate() {
        let (y, x) = if t < n {
            (panel.y[t], panel.x.row(t).into_owned())
        } else {
            (panel.post_y.as_ref().unwrap()[t - n], panel.post_x.as_ref().unwrap().row(t - n).into_owned())
        };
        let mut rec = vec![label.clone(), y.to_string()];
        rec.extend(x.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes covariates in the format read by [`parse_covariates`].
pub fn write_covariates_csv<W: std::io::Write>(panel: &PanelDataset, out: W) -> Result<()> {
    let cov = panel
        .covariates
        .as_ref()
        .ok_or_else(|| Error::Config("panel has no covariates".into()))?;
    let (treated, donors) = unit_names(panel);
    let names: Vec<String> = match &panel.labels {
        Some(l) if l.covariate_names.len() == cov.len() => l.covariate_names.clone(),
        _ => (0..cov.len()).map(|k| format!("cov{k}")).collect(),
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["covariate".to_string(), treated];
    header.extend(donors);
    w.write_record(&header)?;
    for (k, name) in names.iter().enumerate() {
        let mut rec = vec![name.clone(), cov.z[k].to_string()];
        rec.extend(cov.d.row(k).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub ma_window: usize,
    pub demean: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            ma_window: 1,
            demean: false,
        }
    }
}

fn trailing_ma(series: &[f64], w: usize) -> Vec<f64> {
    series.windows(w).map(|s| s.iter().sum::<f64>() / w as f64).collect()
}

/// Trailing moving average of width `ma_window` on every series (the first
/// `ma_window − 1` periods are dropped), then optional removal of each
/// series' pre-treatment mean. Covariates are left unchanged.
pub fn preprocess(panel: &PanelDataset, ma_window: usize, demean: bool) -> Result<PanelDataset> {
    let n = panel.n();
    if ma_window == 0 {
        return Err(Error::Config("moving-average window must be at least 1".into()));
    }
    if ma_window > n {
        return Err(Error::Config(format!("moving-average window {ma_window} exceeds the {n} pre-treatment periods")));
    }
    let drop = ma_window - 1;
    if n - drop < 2 {
        return Err(Error::Config(format!("moving-average window {ma_window} leaves fewer than 2 pre-treatment periods")));
    }
    let post = panel.post_y.as_ref().map_or(0, |v| v.len());
    let filter = |pre: Vec<f64>, post_vals: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
        let full: Vec<f64> = pre.into_iter().chain(post_vals).collect();
        let mut f = trailing_ma(&full, ma_window);
        let post_part = f.split_off(n - drop);
        if demean {
            let m = f.iter().sum::<f64>() / f.len() as f64;
            (f.iter().map(|v| v - m).collect(), post_part.iter().map(|v| v - m).collect())
        } else {
            (f, post_part)
        }
    };
    let post_y = panel.post_y.as_ref().map_or(Vec::new(), |v| v.iter().copied().collect());
    let (y, py) = filter(panel.y.iter().copied().collect(), post_y);
    let n_out = n - drop;
    let p = panel.p();
    let mut x = DMatrix::zeros(n_out, p);
    let mut px = DMatrix::zeros(post, p);
    for j in 0..p {
        let post_col = panel.post_x.as_ref().map_or(Vec::new(), |m| m.column(j).iter().copied().collect());
        let (a, b) = filter(panel.x.column(j).iter().copied().collect(), post_col);
        x.set_column(j, &DVector::from_vec(a));
        if post > 0 {
            px.set_column(j, &DVector::from_vec(b));
        }
    }
    let mut out = PanelDataset::new(DVector::from_vec(y), x)?;
    if panel.post_y.is_some() {
        out = out.with_post(DVector::from_vec(py), px)?;
    }
    if let Some(cov) = &panel.covariates {
        out = out.with_covariates(cov.clone())?;
    }
    out.labels = panel.labels.as_ref().map(|l| PanelLabels {
        pre_times: l.pre_times.iter().skip(drop).cloned().collect(),
        ..l.clone()
    });
    Ok(out)
}

/// Parses a grid: `start:end:count` (evenly spaced, inclusive) or a
/// comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let bad = |m: String| Error::Config(format!("bad grid '{s}': {m}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
    let grid = if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected start:end:count".into()));
        }
        let (a, b) = (num(parts[0])?, num(parts[1])?);
        let k: usize = parts[2].trim().parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
        match k {
            0 => return Err(bad("count must be positive".into())),
            1 => vec![a],
            _ => (0..k).map(|i| a + (b - a) * i as f64 / (k - 1) as f64).collect(),
        }
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Json,
    /// JSON report plus CSV tables next to it.
    JsonCsv,
}

/// Everything needed to reproduce a command run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub input: PathBuf,
    pub panel: PanelSpec,
    #[serde(default)]
    pub covariates: Option<PathBuf>,
    pub estimator: EstimatorKind,
    /// Grid string as accepted by [`parse_grid`].
    #[serde(default)]
    pub lambda_grid: Option<String>,
    #[serde(default)]
    pub m_grid: Option<Vec<usize>>,
    #[serde(default)]
    pub v_grid: Option<Vec<Vec<f64>>>,
    pub selection: SelectionMethod,
    #[serde(default)]
    pub preprocessing: Preprocessing,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_reader(open(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.preprocessing.ma_window == 0 {
            return Err(Error::Config("ma_window must be at least 1".into()));
        }
        if let Some(g) = &self.lambda_grid {
            parse_grid(g)?;
        }
        Ok(())
    }

    /// Loads, attaches covariates and preprocesses the configured panel.
    pub fn load(&self) -> Result<PanelDataset> {
        self.validate()?;
        let mut panel = load_panel(&self.input, &self.panel)?;
        if let Some(c) = &self.covariates {
            panel = load_covariates(c, panel)?;
        }
        let pp = self.preprocessing;
        if pp.ma_window > 1 || pp.demean {
            panel = preprocess(&panel, pp.ma_window, pp.demean)?;
        }
        Ok(panel)
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema_version: u32,
    command: &'a str,
    result: &'a T,
}

/// Versioned JSON report `{schema_version, command, result}`.
pub fn report_json<T: Serialize>(command: &str, result: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(&Envelope {
        schema_version: SCHEMA_VERSION,
        command,
        result,
    })?)
}

/// Writes a header plus rows of already formatted cells.
pub fn write_table<W: std::io::Write>(out: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}
