//! The panel of a treated unit and its donors.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Treated-unit covariates `Z` with the matching donor covariates `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Covariates {
    pub z: DVector<f64>,
    pub d: DMatrix<f64>,
}

impl Covariates {
    pub fn new(z: DVector<f64>, d: DMatrix<f64>) -> Result<Self> {
        if z.len() != d.nrows() {
            return Err(Error::InvalidInput(format!(
                "covariate vector has {} rows but donor covariates have {}",
                z.len(),
                d.nrows()
            )));
        }
        Ok(Self { z, d })
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Labels carried along for IO; none of the estimators look at them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PanelLabels {
    pub treated: String,
    pub donors: Vec<String>,
    pub pre_times: Vec<String>,
    pub post_times: Vec<String>,
    pub covariate_names: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelDataset {
    /// Pre-treatment outcome of the treated unit (length n).
    pub y: DVector<f64>,
    /// Pre-treatment donor series (n × p).
    pub x: DMatrix<f64>,
    pub covariates: Option<Covariates>,
    pub post_y: Option<DVector<f64>>,
    pub post_x: Option<DMatrix<f64>>,
    pub labels: Option<PanelLabels>,
}

impl PanelDataset {
    /// Pre-period panel without covariates or post-period data.
    pub fn new(y: DVector<f64>, x: DMatrix<f64>) -> Result<Self> {
        let panel = Self {
            y,
            x,
            covariates: None,
            post_y: None,
            post_x: None,
            labels: None,
        };
        panel.validate()?;
        Ok(panel)
    }

    pub fn with_covariates(mut self, cov: Covariates) -> Result<Self> {
        self.covariates = Some(cov);
        self.validate()?;
        Ok(self)
    }

    pub fn with_post(mut self, post_y: DVector<f64>, post_x: DMatrix<f64>) -> Result<Self> {
        self.post_y = Some(post_y);
        self.post_x = Some(post_x);
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.y.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 pre-treatment periods, got {n}")));
        }
        if self.x.ncols() < 1 {
            return Err(Error::InvalidInput("need at least one donor".into()));
        }
        if self.x.nrows() != n {
            return Err(Error::InvalidInput(format!(
                "outcome has {n} periods but donor matrix has {}",
                self.x.nrows()
            )));
        }
        if let Some(cov) = &self.covariates {
            if cov.d.ncols() != self.x.ncols() {
                return Err(Error::InvalidInput(format!(
                    "donor covariates cover {} donors, panel has {}",
                    cov.d.ncols(),
                    self.x.ncols()
                )));
            }
        }
        match (&self.post_y, &self.post_x) {
            (Some(py), Some(px)) => {
                if px.nrows() != py.len() || px.ncols() != self.x.ncols() {
                    return Err(Error::InvalidInput(format!(
                        "post-period donor matrix is {}x{}, expected {}x{}",
                        px.nrows(),
                        px.ncols(),
                        py.len(),
                        self.x.ncols()
                    )));
                }
            }
            (None, None) => {}
            (_, None) => {}
            (None, Some(px)) => {
                if px.ncols() != self.x.ncols() {
                    return Err(Error::InvalidInput("post-period donor width mismatch".into()));
                }
            }
        }
        let finite = self.y.iter().chain(self.x.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("panel contains non-finite values".into()));
        }
        Ok(())
    }

    /// Pairs of donor columns that are identical; these make weights non-unique.
    pub fn duplicate_donors(&self) -> Vec<(usize, usize)> {
        duplicate_columns(&self.x)
    }

    /// The same panel restricted to the given pre-period rows.
    pub fn restrict_rows(&self, rows: &[usize]) -> PanelDataset {
        PanelDataset {
            y: self.y.select_rows(rows),
            x: self.x.select_rows(rows),
            covariates: self.covariates.clone(),
            post_y: None,
            post_x: None,
            labels: None,
        }
    }
}

pub(crate) fn duplicate_columns(x: &DMatrix<f64>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..x.ncols() {
        for j in (i + 1)..x.ncols() {
            if x.column(i) == x.column(j) {
                out.push((i, j));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_short_panels_and_mismatched_covariates() {
        let x = DMatrix::from_element(1, 2, 1.0);
        assert!(PanelDataset::new(DVector::from_element(1, 0.0), x).is_err());
        assert!(Covariates::new(DVector::zeros(2), DMatrix::zeros(3, 2)).is_err());
        let p = PanelDataset::new(DVector::zeros(3), DMatrix::zeros(3, 2)).unwrap();
        let bad = Covariates::new(DVector::zeros(1), DMatrix::zeros(1, 3)).unwrap();
        assert!(p.with_covariates(bad).is_err());
    }

    #[test]
    fn finds_duplicate_donors() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 1.0, 3.0, 4.0, 3.0]);
        let p = PanelDataset::new(DVector::zeros(2), x).unwrap();
        assert_eq!(p.duplicate_donors(), vec![(0, 2)]);
    }
}
