//! L1-regularized linear regression by cyclic coordinate descent, with
//! k-fold selection of the penalty and a per-subject feature matrix.

use crate::geometry::ShapeVector;
use crate::seeding::{self, tag};
use crate::trainer::{pearson_r, MetricsError, ShapeTable};
use crate::tract_io::DatasetManifest;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LassoError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("{0} feature rows but {1} targets")]
    ShapeMismatch(usize, usize),
    #[error("lambda must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("subject {0} has no score")]
    MissingScore(String),
    #[error("no shape vector for {subject_id}/{cluster_id}")]
    MissingFeature { subject_id: String, cluster_id: String },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub weights: Array1<f64>,
    pub intercept: f64,
    pub lambda: f64,
    pub sweeps: usize,
    /// False when `max_iter` sweeps ran out before the tolerance was met;
    /// the coefficients are still usable.
    pub converged: bool,
}

impl LassoFit {
    pub fn predict(&self, x: ArrayView2<f64>) -> Array1<f64> {
        x.dot(&self.weights) + self.intercept
    }

    pub fn n_nonzero(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

/// `(1/2n) ||y - Xw - b||^2 + lambda ||w||_1`.
pub fn objective(x: ArrayView2<f64>, y: ArrayView1<f64>, fit: &LassoFit) -> f64 {
    let r = &y - &fit.predict(x);
    r.dot(&r) / (2.0 * y.len() as f64) + fit.lambda * fit.weights.iter().map(|w| w.abs()).sum::<f64>()
}

fn column_means(x: ArrayView2<f64>) -> Array1<f64> {
    x.mean_axis(Axis(0)).expect("at least one row")
}

/// Minimizes [`objective`] with an unpenalized intercept. Stops when the
/// largest coefficient change in a sweep falls below `tol`.
pub fn lasso_fit(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit, LassoError> {
    let (n, p) = x.dim();
    if n != y.len() {
        return Err(LassoError::ShapeMismatch(n, y.len()));
    }
    if n < 2 {
        return Err(LassoError::TooFewRows { needed: 2, got: n });
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(LassoError::InvalidLambda(lambda));
    }
    let x_mean = column_means(x);
    let y_mean = y.mean().unwrap();
    let xc = &x - &x_mean;
    let nf = n as f64;
    let sq_norms: Vec<f64> = xc.axis_iter(Axis(1)).map(|c| c.dot(&c) / nf).collect();
    let mut w = Array1::<f64>::zeros(p);
    let mut residual = y.mapv(|v| v - y_mean);

    let cd_objective = |r: &Array1<f64>, w: &Array1<f64>| {
        r.dot(r) / (2.0 * nf) + lambda * w.iter().map(|v| v.abs()).sum::<f64>()
    };
    let mut previous = cd_objective(&residual, &w);
    let mut sweeps = 0;
    let mut converged = false;
    while sweeps < max_iter {
        sweeps += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..p {
            if sq_norms[j] == 0.0 {
                continue;
            }
            let col = xc.column(j);
            let old = w[j];
            let rho = col.dot(&residual) / nf + sq_norms[j] * old;
            let new = soft_threshold(rho, lambda) / sq_norms[j];
            if new != old {
                residual.scaled_add(old - new, &col);
                w[j] = new;
                max_change = max_change.max((new - old).abs());
            }
        }
        let current = cd_objective(&residual, &w);
        debug_assert!(
            current <= previous + 1e-12 * previous.abs().max(1.0),
            "objective rose from {previous} to {current}"
        );
        previous = current;
        if max_change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lasso did not converge in {max_iter} sweeps (lambda {lambda:e})");
    }
    Ok(LassoFit {
        intercept: y_mean - x_mean.dot(&w),
        weights: w,
        lambda,
        sweeps,
        converged,
    })
}

/// Smallest penalty that zeroes every weight: `max_j |x_j^T (y - mean y)| / n`
/// over centered columns.
pub fn lambda_max(x: ArrayView2<f64>, y: ArrayView1<f64>) -> f64 {
    let xc = &x - &column_means(x);
    let yc = y.mapv(|v| v - y.mean().unwrap());
    xc.t().dot(&yc).iter().fold(0.0f64, |m, v| m.max(v.abs())) / y.len() as f64
}

/// `points` values spaced logarithmically from `max` down `decades` decades.
pub fn lambda_grid(max: f64, points: usize, decades: f64) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![max],
        _ => (0..points)
            .map(|i| max * 10f64.powf(-decades * i as f64 / (points - 1) as f64))
            .collect(),
    }
}

/// Per-column z-scoring; zero-variance columns keep scale 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnScaler {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ColumnScaler {
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let mean = column_means(x);
        let std = x
            .std_axis(Axis(0), 0.0)
            .mapv(|s| if s > 0.0 { s } else { 1.0 });
        Self { mean, std }
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.mean) / &self.std
    }

    /// Re-expresses a fit on scaled columns in the original units.
    pub fn unscale(&self, fit: &LassoFit) -> LassoFit {
        let weights = &fit.weights / &self.std;
        LassoFit {
            intercept: fit.intercept - self.mean.dot(&weights),
            weights,
            ..fit.clone()
        }
    }
}

/// Standardizes on `x`, fits, and returns the model in original units.
pub fn fit_standardized(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<LassoFit, LassoError> {
    let scaler = ColumnScaler::fit(x);
    let fit = lasso_fit(scaler.transform(x).view(), y, lambda, tol, max_iter)?;
    Ok(scaler.unscale(&fit))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LassoConfig {
    pub folds: usize,
    pub grid_points: usize,
    pub decades: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub train_fraction: f64,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_points: 20,
            decades: 3.0,
            tol: 1e-7,
            max_iter: 10_000,
            train_fraction: 0.8,
        }
    }
}

/// Fold index of every row: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng_for(seed, &[tag::FOLDS]));
    let mut fold = vec![0; n];
    for (pos, &row) in order.iter().enumerate() {
        fold[row] = pos % k;
    }
    fold
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub best_lambda: f64,
    /// Mean held-out squared error per grid value.
    pub cv_errors: Vec<f64>,
    pub fit: LassoFit,
}

/// Chooses the grid value with the lowest mean held-out squared error
/// (first on ties), standardizing on each training fold, then refits on
/// all rows.
pub fn lasso_cv(
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    grid: &[f64],
    cfg: &LassoConfig,
    seed: u64,
) -> Result<CvResult, LassoError> {
    let n = x.nrows();
    if n != y.len() {
        return Err(LassoError::ShapeMismatch(n, y.len()));
    }
    if grid.is_empty() {
        return Err(LassoError::EmptyGrid);
    }
    let k = cfg.folds.max(2);
    if n < 2 * k {
        return Err(LassoError::TooFewRows { needed: 2 * k, got: n });
    }
    let folds = fold_assignment(n, k, seed);
    let rows_where = |pred: &dyn Fn(usize) -> bool| -> Vec<usize> { (0..n).filter(|&i| pred(folds[i])).collect() };

    let errors: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train = rows_where(&|g| g != f);
            let test = rows_where(&|g| g == f);
            let (xt, yt) = (x.select(Axis(0), &train), y.select(Axis(0), &train));
            let (xv, yv) = (x.select(Axis(0), &test), y.select(Axis(0), &test));
            grid.iter()
                .map(|&lambda| {
                    let fit = fit_standardized(xt.view(), yt.view(), lambda, cfg.tol, cfg.max_iter)?;
                    let r = &yv - &fit.predict(xv.view());
                    Ok(r.dot(&r))
                })
                .collect::<Result<Vec<f64>, LassoError>>()
        })
        .collect::<Result<_, _>>()?;
    let cv_errors: Vec<f64> = (0..grid.len())
        .map(|g| errors.iter().map(|e| e[g]).sum::<f64>() / n as f64)
        .collect();
    let best = cv_errors
        .iter()
        .enumerate()
        .fold(0, |b, (i, e)| if *e < cv_errors[b] { i } else { b });
    let fit = fit_standardized(x, y, grid[best], cfg.tol, cfg.max_iter)?;
    Ok(CvResult {
        best_lambda: grid[best],
        cv_errors,
        fit,
    })
}

/// Subjects by rows, `cluster:measure` features by columns.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub subject_ids: Vec<String>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
}

impl FeatureMatrix {
    /// Columns follow the first subject's cluster order, five measures per
    /// cluster in canonical order. Every subject must have every cluster.
    pub fn from_shapes(manifest: &DatasetManifest, shapes: &ShapeTable) -> Result<Self, LassoError> {
        let subject_ids = manifest.subject_ids();
        let cluster_ids: Vec<String> = manifest
            .subjects
            .first()
            .map(|s| s.clusters.iter().map(|c| c.cluster_id.clone()).collect())
            .unwrap_or_default();
        let columns = cluster_ids
            .iter()
            .flat_map(|c| ShapeVector::NAMES.iter().map(move |m| format!("{c}:{m}")))
            .collect();
        let mut values = Array2::zeros((subject_ids.len(), cluster_ids.len() * ShapeVector::LEN));
        for (i, s) in subject_ids.iter().enumerate() {
            for (j, c) in cluster_ids.iter().enumerate() {
                let shape = shapes.get(&(s.clone(), c.clone())).ok_or_else(|| LassoError::MissingFeature {
                    subject_id: s.clone(),
                    cluster_id: c.clone(),
                })?;
                for (m, v) in shape.to_array().into_iter().enumerate() {
                    values[[i, j * ShapeVector::LEN + m]] = v;
                }
            }
        }
        Ok(Self {
            subject_ids,
            columns,
            values,
        })
    }
}

/// Scores of every manifest subject, in manifest order.
pub fn subject_scores(manifest: &DatasetManifest) -> Result<Vec<f64>, LassoError> {
    manifest
        .subjects
        .iter()
        .map(|s| s.score.ok_or_else(|| LassoError::MissingScore(s.subject_id.clone())))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamResult {
    pub feature_source: String,
    pub r: f64,
    pub chosen_lambda: f64,
    pub n_nonzero: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub converged: bool,
}

/// Seeded subject split, penalty chosen by [`lasso_cv`] on the training
/// subjects over a grid from their `lambda_max`, then Pearson r between
/// predicted and true held-out scores.
pub fn downstream_eval(
    source: &str,
    features: &FeatureMatrix,
    scores: &[f64],
    cfg: &LassoConfig,
    seed: u64,
) -> Result<DownstreamResult, LassoError> {
    let n = features.values.nrows();
    if n != scores.len() {
        return Err(LassoError::ShapeMismatch(n, scores.len()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng_for(seed, &[tag::SPLIT, 1]));
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).min(n.saturating_sub(2));
    let (mut train, mut test) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    test.sort_unstable();

    let y = Array1::from(scores.to_vec());
    let (xt, yt) = (features.values.select(Axis(0), &train), y.select(Axis(0), &train));
    let (xv, yv) = (features.values.select(Axis(0), &test), y.select(Axis(0), &test));
    let scaled = ColumnScaler::fit(xt.view()).transform(xt.view());
    let grid = lambda_grid(lambda_max(scaled.view(), yt.view()), cfg.grid_points, cfg.decades);
    let cv = lasso_cv(xt.view(), yt.view(), &grid, cfg, seed)?;
    let predicted = cv.fit.predict(xv.view());
    Ok(DownstreamResult {
        feature_source: source.to_string(),
        r: pearson_r(predicted.as_slice().unwrap(), yv.as_slice().unwrap())?,
        chosen_lambda: cv.best_lambda,
        n_nonzero: cv.fit.n_nonzero(),
        n_train: train.len(),
        n_test: test.len(),
        converged: cv.fit.converged,
    })
}

pub const DOWNSTREAM_CSV_HEADER: &str = "feature_source,r,chosen_lambda,n_nonzero";

pub fn downstream_csv(results: &[DownstreamResult], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    writeln!(out, "{DOWNSTREAM_CSV_HEADER}").unwrap();
    for r in results {
        writeln!(out, "{},{:.6},{:.6e},{}", r.feature_source, r.r, r.chosen_lambda, r.n_nonzero).unwrap();
    }
    out
}

pub fn downstream_table(results: &[DownstreamResult]) -> String {
    let mut out = String::new();
    writeln!(out, "{:<16} {:>10} {:>14} {:>10}", "Features", "r", "lambda", "nonzero").unwrap();
    for r in results {
        writeln!(out, "{:<16} {:>10.3} {:>14.4e} {:>10}", r.feature_source, r.r, r.chosen_lambda, r.n_nonzero).unwrap();
    }
    out
}
