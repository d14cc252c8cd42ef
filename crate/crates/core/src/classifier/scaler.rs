use serde::{Deserialize, Serialize};

/// Column-major feature block: `cols[f][i]` is feature `f` of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Columns {
    pub n_rows: usize,
    pub cols: Vec<Vec<f64>>,
}

impl Columns {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n_features = rows.first().map_or(0, Vec::len);
        let cols = (0..n_features)
            .map(|f| rows.iter().map(|r| r[f]).collect())
            .collect();
        Self {
            n_rows: rows.len(),
            cols,
        }
    }

    pub fn n_features(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.cols.iter().map(|c| c[i]).collect()
    }
}

/// Per-feature z-score parameters, fitted on training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalerParams {
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub fitted_on: usize,
}

/// Fits on `subset` of `rows` (indices into `rows`).
pub fn fit_scaler(rows: &[Vec<f64>], subset: &[usize]) -> ScalerParams {
    assert!(!subset.is_empty(), "scaler needs at least one row");
    let f = rows[subset[0]].len();
    let n = subset.len() as f64;
    let mut mean = vec![0.0; f];
    for &i in subset {
        for (m, x) in mean.iter_mut().zip(&rows[i]) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; f];
    for &i in subset {
        for ((v, x), m) in var.iter_mut().zip(&rows[i]).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    ScalerParams {
        mean,
        std: var.into_iter().map(|v| (v / n).sqrt()).collect(),
        fitted_on: subset.len(),
    }
}

impl ScalerParams {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    #[inline]
    fn scale(&self, f: usize, x: f64) -> f64 {
        if self.std[f] > 0.0 {
            (x - self.mean[f]) / self.std[f]
        } else {
            0.0
        }
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(f, &x)| self.scale(f, x))
            .collect()
    }

    /// Standardizes the selected rows into a column-major block.
    pub fn transform_columns(&self, rows: &[Vec<f64>], subset: &[usize]) -> Columns {
        let cols = (0..self.n_features())
            .map(|f| subset.iter().map(|&i| self.scale(f, rows[i][f])).collect())
            .collect();
        Columns {
            n_rows: subset.len(),
            cols,
        }
    }

    pub fn transform(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter().map(|r| self.transform_row(r)).collect()
    }
}
