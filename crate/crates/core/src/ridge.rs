//! Multivariate ridge screening.
//!
//! The stage-1 model regresses the outcome jointly on the treatment indicator and all
//! biomarkers, `G{E(Y | T, X)} = d0 + dT·T + sum_j dj·X_j`, with an L2 penalty. For the
//! linear family the objective is
//!
//! ```text
//! (1 / 2n) * RSS(d0, d) + lambda * sum_k w_k * d_k^2
//! ```
//!
//! and for the logistic family `(1 / n) * deviance + lambda * sum_k w_k * d_k^2`. The
//! intercept is never penalized; `w_k = 1` for every biomarker and for the treatment
//! coefficient unless [`RidgeConfig::penalize_treatment`] is off.
//!
//! Designs passed to [`ridge_solve`] and [`lambda_grid`] follow the stage-1 layout:
//! column 0 holds the treatment indicator and columns `1..=m` the biomarkers.
//!
//! Fits run by cyclic coordinate descent along a descending lambda path with warm
//! starts. The linear solver works on the centred Gram matrix, so a sweep costs
//! `O(p^2)` regardless of `n`. [`RidgeSolver::Spectral`] reaches the same minimizer
//! through one eigendecomposition per path, which pays off in large simulation runs.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, TrialDataset};

/// Columns whose sample SD is at or below this are zeroed by [`standardize`].
pub const CONSTANT_SD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeConfig {
    pub n_lambdas: usize,
    /// Smallest grid value as a fraction of the largest. `None` picks `1e-3`, or
    /// `1e-2` when there are more biomarkers than observations.
    pub lambda_min_ratio: Option<f64>,
    pub cv_folds: usize,
    pub cv_seed: u64,
    pub penalize_treatment: bool,
    pub family: Family,
    /// Maximum coordinate-descent sweeps per lambda (per IRLS step for logistic).
    pub max_iter: usize,
    /// Convergence threshold on the largest single coordinate update.
    pub tol: f64,
    pub solver: RidgeSolver,
}

/// Solver for the penalized least-squares problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RidgeSolver {
    /// Cyclic coordinate descent with warm starts.
    #[default]
    CoordinateDescent,
    /// Direct solves: one eigendecomposition of the Gram matrix per linear path, and a
    /// Cholesky solve per logistic IRLS step. Same minimizer, much cheaper on long
    /// paths with hundreds of columns.
    Spectral,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self {
            n_lambdas: 100,
            lambda_min_ratio: None,
            cv_folds: 5,
            cv_seed: 0,
            penalize_treatment: true,
            family: Family::Linear,
            max_iter: 100_000,
            tol: 1e-9,
            solver: RidgeSolver::CoordinateDescent,
        }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_lambdas < 2 {
            return Err(Error::InvalidConfig("ridge.n_lambdas must be at least 2".into()));
        }
        if let Some(r) = self.lambda_min_ratio {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::InvalidConfig(
                    "ridge.lambda_min_ratio must lie in (0, 1)".into(),
                ));
            }
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidConfig("ridge.cv_folds must be at least 2".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidConfig("ridge.max_iter must be positive".into()));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidConfig("ridge.tol must be positive".into()));
        }
        Ok(())
    }

    pub fn min_ratio(&self, n: usize, m: usize) -> f64 {
        self.lambda_min_ratio
            .unwrap_or(if m > n { 1e-2 } else { 1e-3 })
    }

    fn penalty_weights(&self, p: usize) -> Vec<f64> {
        let mut w = vec![1.0; p];
        if !self.penalize_treatment && p > 0 {
            w[0] = 0.0;
        }
        w
    }
}

/// Column centring and scaling used by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub means: Vec<f64>,
    /// Sample (n - 1) standard deviations.
    pub sds: Vec<f64>,
    pub constant: Vec<bool>,
}

/// Centres every column and scales it to unit sample SD; constant columns become zero
/// and are flagged.
pub fn standardize(matrix: &DMatrix<f64>) -> Result<(DMatrix<f64>, Scaling)> {
    let (n, p) = matrix.shape();
    if n < 2 {
        return Err(Error::InvalidData("standardize needs at least 2 rows".into()));
    }
    let mut out = matrix.clone();
    let mut means = Vec::with_capacity(p);
    let mut sds = Vec::with_capacity(p);
    let mut constant = Vec::with_capacity(p);
    for mut col in out.column_iter_mut() {
        let mean = col.iter().sum::<f64>() / n as f64;
        let ss: f64 = col.iter().map(|v| (v - mean).powi(2)).sum();
        let sd = (ss / (n - 1) as f64).sqrt();
        let is_const = !(sd > CONSTANT_SD);
        for v in col.iter_mut() {
            *v = if is_const { 0.0 } else { (*v - mean) / sd };
        }
        means.push(mean);
        sds.push(sd);
        constant.push(is_const);
    }
    Ok((out, Scaling { means, sds, constant }))
}

/// Coefficients from a single-lambda ridge fit.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeSolution {
    pub intercept: f64,
    pub coefs: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// Centred sufficient statistics of a linear least-squares problem.
#[derive(Debug, Clone)]
struct GramProblem {
    /// `X_c' X_c / n`
    gram: DMatrix<f64>,
    /// `X_c' y_c / n`
    xty: DVector<f64>,
    x_mean: DVector<f64>,
    y_mean: f64,
}

/// Uncentred cross products of a block of rows.
#[derive(Debug, Clone)]
struct RowSums {
    n: usize,
    xtx: DMatrix<f64>,
    x_sum: DVector<f64>,
    xty: DVector<f64>,
    y_sum: f64,
}

impl RowSums {
    fn of(x: &DMatrix<f64>, y: &[f64]) -> Self {
        let yv = DVector::from_column_slice(y);
        Self {
            n: x.nrows(),
            xtx: x.tr_mul(x),
            x_sum: DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum())),
            xty: x.tr_mul(&yv),
            y_sum: y.iter().sum(),
        }
    }

    fn minus(&self, other: &RowSums) -> Self {
        Self {
            n: self.n - other.n,
            xtx: &self.xtx - &other.xtx,
            x_sum: &self.x_sum - &other.x_sum,
            xty: &self.xty - &other.xty,
            y_sum: self.y_sum - other.y_sum,
        }
    }

    fn centred(&self) -> GramProblem {
        let nf = self.n as f64;
        let x_mean = &self.x_sum / nf;
        let y_mean = self.y_sum / nf;
        let gram = (&self.xtx - &x_mean * self.x_sum.transpose()) / nf;
        let xty = (&self.xty - &x_mean * self.y_sum) / nf;
        GramProblem {
            gram,
            xty,
            x_mean,
            y_mean,
        }
    }
}

impl GramProblem {
    fn new(x: &DMatrix<f64>, y: &[f64]) -> Self {
        RowSums::of(x, y).centred()
    }

    /// Coordinate descent on `(G + 2 lambda W) d = c`, updating `coefs` in place.
    fn solve(
        &self,
        lambda: f64,
        weights: &[f64],
        coefs: &mut [f64],
        max_iter: usize,
        tol: f64,
    ) -> (bool, usize) {
        let p = coefs.len();
        let g = self.gram.as_slice();
        // grad = c - G d
        let mut grad: Vec<f64> = self.xty.iter().copied().collect();
        for (k, &dk) in coefs.iter().enumerate() {
            if dk != 0.0 {
                let col = &g[k * p..(k + 1) * p];
                for (r, gk) in grad.iter_mut().zip(col) {
                    *r -= gk * dk;
                }
            }
        }
        let denom: Vec<f64> = (0..p)
            .map(|j| g[j * p + j] + 2.0 * lambda * weights[j])
            .collect();
        for sweep in 1..=max_iter {
            let mut max_step = 0.0f64;
            for j in 0..p {
                if !(denom[j] > 0.0) {
                    continue;
                }
                let old = coefs[j];
                let new = (grad[j] + g[j * p + j] * old) / denom[j];
                let step = new - old;
                if step != 0.0 {
                    coefs[j] = new;
                    let col = &g[j * p..(j + 1) * p];
                    for (r, gk) in grad.iter_mut().zip(col) {
                        *r -= gk * step;
                    }
                    max_step = max_step.max(step.abs());
                }
            }
            if max_step < tol {
                return (true, sweep);
            }
        }
        (false, max_iter)
    }

    fn spectral(&self, weights: &[f64]) -> SpectralPath {
        SpectralPath::new(self, weights)
    }

    /// Solves at `lambda` with whichever solver `config` asks for.
    fn solve_with(
        &self,
        spectral: Option<&SpectralPath>,
        lambda: f64,
        weights: &[f64],
        coefs: &mut [f64],
        config: &RidgeConfig,
    ) -> (bool, usize) {
        match spectral {
            Some(path) => {
                coefs.copy_from_slice(&path.solve(lambda));
                (true, 1)
            }
            None => self.solve(lambda, weights, coefs, config.max_iter, config.tol),
        }
    }

    fn intercept(&self, coefs: &[f64]) -> f64 {
        self.y_mean
            - self
                .x_mean
                .iter()
                .zip(coefs)
                .map(|(m, d)| m * d)
                .sum::<f64>()
    }
}

/// Eigendecomposition of the penalized block of a Gram problem, with the unpenalized
/// coordinates profiled out, so each lambda costs `O(p^2)`.
struct SpectralPath {
    p: usize,
    pen: Vec<usize>,
    unpen: Vec<usize>,
    vectors: DMatrix<f64>,
    values: DVector<f64>,
    rotated_rhs: DVector<f64>,
    /// `G_UU^+` and `G_UP` for recovering the unpenalized coordinates.
    unpen_inv: DMatrix<f64>,
    cross: DMatrix<f64>,
    unpen_rhs: DVector<f64>,
}

impl SpectralPath {
    fn new(problem: &GramProblem, weights: &[f64]) -> Self {
        let p = weights.len();
        let pen: Vec<usize> = (0..p).filter(|&k| weights[k] > 0.0).collect();
        let unpen: Vec<usize> = (0..p).filter(|&k| weights[k] <= 0.0).collect();
        let g = &problem.gram;
        let c = &problem.xty;
        let block = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| g[(rows[i], cols[j])])
        };
        let sub = |idx: &[usize]| DVector::from_iterator(idx.len(), idx.iter().map(|&k| c[k]));
        let g_pp = block(&pen, &pen);
        let g_up = block(&unpen, &pen);
        let g_uu = block(&unpen, &unpen);
        let c_p = sub(&pen);
        let c_u = sub(&unpen);
        let unpen_inv = if unpen.is_empty() {
            g_uu
        } else {
            g_uu.pseudo_inverse(1e-12).expect("non-negative tolerance")
        };
        let schur = &g_pp - g_up.transpose() * &unpen_inv * &g_up;
        let rhs = &c_p - g_up.transpose() * (&unpen_inv * &c_u);
        let eig = nalgebra::SymmetricEigen::new(schur);
        let rotated_rhs = eig.eigenvectors.tr_mul(&rhs);
        Self {
            p,
            pen,
            unpen,
            vectors: eig.eigenvectors,
            values: eig.eigenvalues,
            rotated_rhs,
            unpen_inv,
            cross: g_up,
            unpen_rhs: c_u,
        }
    }

    fn solve(&self, lambda: f64) -> Vec<f64> {
        let scale = self.values.iter().fold(1.0f64, |a, v| a.max(v.abs()));
        let shrunk = DVector::from_iterator(
            self.values.len(),
            self.values.iter().zip(self.rotated_rhs.iter()).map(|(&v, &r)| {
                let d = v + 2.0 * lambda;
                if d > 1e-12 * scale { r / d } else { 0.0 }
            }),
        );
        let d_pen = &self.vectors * shrunk;
        let mut coefs = vec![0.0; self.p];
        for (&k, v) in self.pen.iter().zip(d_pen.iter()) {
            coefs[k] = *v;
        }
        if !self.unpen.is_empty() {
            let d_unpen = &self.unpen_inv * (&self.unpen_rhs - &self.cross * &d_pen);
            for (&k, v) in self.unpen.iter().zip(d_unpen.iter()) {
                coefs[k] = *v;
            }
        }
        coefs
    }
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Penalized IRLS for the logistic family. Each step solves the weighted
/// least-squares subproblem on its Gram matrix, by coordinate descent or, with
/// [`RidgeSolver::Spectral`], by a direct Cholesky solve.
///
/// Minimizes `-loglik / n + (lambda / 2) * sum w d^2`, which is half the logistic
/// objective stated in the module docs and has the same minimizer.
fn logistic_solve(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    weights: &[f64],
    intercept: &mut f64,
    coefs: &mut [f64],
    config: &RidgeConfig,
) -> (bool, usize) {
    let (n, p) = x.shape();
    let nf = n as f64;
    // [1 X] with the intercept as an unpenalized coordinate
    let xa = DMatrix::from_fn(n, p + 1, |i, k| if k == 0 { 1.0 } else { x[(i, k - 1)] });
    let mut wa = Vec::with_capacity(p + 1);
    wa.push(0.0);
    wa.extend_from_slice(weights);
    let mut beta: Vec<f64> = std::iter::once(*intercept).chain(coefs.iter().copied()).collect();
    let mut total = 0;
    let mut converged = false;
    for _outer in 0..100 {
        let eta = &xa * DVector::from_column_slice(&beta);
        let mut xw = xa.clone();
        let mut zw = DVector::zeros(n);
        for i in 0..n {
            let mu = sigmoid(eta[i]).clamp(1e-10, 1.0 - 1e-10);
            let w = mu * (1.0 - mu);
            let sw = w.sqrt();
            xw.row_mut(i).scale_mut(sw);
            zw[i] = sw * (eta[i] + (y[i] - mu) / w);
        }
        // quadratic model: (1/2) b'Ab - c'b + (lambda/2) sum w b^2
        let step = GramProblem {
            gram: xw.tr_mul(&xw) / nf,
            xty: xw.tr_mul(&zw) / nf,
            x_mean: DVector::zeros(p + 1),
            y_mean: 0.0,
        };
        let old = beta.clone();
        if config.solver == RidgeSolver::Spectral {
            let mut a = step.gram.clone();
            for k in 0..=p {
                a[(k, k)] += lambda * wa[k];
            }
            match a.cholesky() {
                Some(ch) => beta = ch.solve(&step.xty).iter().copied().collect(),
                None => break,
            }
            total += 1;
        } else {
            let (ok, sweeps) = step.solve(lambda / 2.0, &wa, &mut beta, config.max_iter, config.tol);
            total += sweeps;
            if !ok {
                break;
            }
        }
        if beta.iter().any(|b| !b.is_finite()) {
            break;
        }
        let change = beta
            .iter()
            .zip(&old)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if change < config.tol {
            converged = true;
            break;
        }
    }
    if beta.iter().all(|b| b.is_finite()) {
        *intercept = beta[0];
        coefs.copy_from_slice(&beta[1..]);
    }
    (converged, total)
}

fn check_design(design: &DMatrix<f64>, response: &[f64]) -> Result<()> {
    if design.nrows() != response.len() {
        return Err(Error::DimensionMismatch(format!(
            "design has {} rows but response has {}",
            design.nrows(),
            response.len()
        )));
    }
    if design.nrows() < 2 || design.ncols() == 0 {
        return Err(Error::DimensionMismatch(format!(
            "ridge needs at least 2 rows and 1 column, got {:?}",
            design.shape()
        )));
    }
    Ok(())
}

/// Fits the penalized stage-1 model at a single `lambda`.
///
/// `warm_start` seeds the coordinate descent. A run that exhausts `max_iter` is
/// returned with `converged = false` rather than an error.
pub fn ridge_solve(
    design: &DMatrix<f64>,
    response: &[f64],
    lambda: f64,
    warm_start: Option<&[f64]>,
    config: &RidgeConfig,
) -> Result<RidgeSolution> {
    check_design(design, response)?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig("lambda must be non-negative".into()));
    }
    let p = design.ncols();
    let mut coefs = match warm_start {
        Some(w) if w.len() == p => w.to_vec(),
        Some(w) => {
            return Err(Error::DimensionMismatch(format!(
                "warm start has {} entries for {p} columns",
                w.len()
            )))
        }
        None => vec![0.0; p],
    };
    let weights = config.penalty_weights(p);
    match config.family {
        Family::Linear => {
            let problem = GramProblem::new(design, response);
            let spectral = (config.solver == RidgeSolver::Spectral).then(|| problem.spectral(&weights));
            let (converged, iterations) =
                problem.solve_with(spectral.as_ref(), lambda, &weights, &mut coefs, config);
            Ok(RidgeSolution {
                intercept: problem.intercept(&coefs),
                coefs,
                converged,
                iterations,
            })
        }
        Family::Logistic => {
            let ybar = response.iter().sum::<f64>() / response.len() as f64;
            let mut intercept = (ybar.clamp(1e-6, 1.0 - 1e-6) / (1.0 - ybar.clamp(1e-6, 1.0 - 1e-6))).ln();
            let (converged, iterations) = logistic_solve(
                design,
                response,
                lambda,
                &weights,
                &mut intercept,
                &mut coefs,
                config,
            );
            Ok(RidgeSolution {
                intercept,
                coefs,
                converged,
                iterations,
            })
        }
    }
}

/// Value of the penalized objective at `(intercept, coefs)`.
pub fn ridge_objective(
    design: &DMatrix<f64>,
    response: &[f64],
    intercept: f64,
    coefs: &[f64],
    lambda: f64,
    config: &RidgeConfig,
) -> f64 {
    let n = response.len() as f64;
    let eta = design * DVector::from_column_slice(coefs);
    let loss = match config.family {
        Family::Linear => {
            response
                .iter()
                .zip(eta.iter())
                .map(|(y, e)| (y - intercept - e).powi(2))
                .sum::<f64>()
                / (2.0 * n)
        }
        Family::Logistic => {
            response
                .iter()
                .zip(eta.iter())
                .map(|(&y, e)| bernoulli_deviance(y, sigmoid(intercept + e)))
                .sum::<f64>()
                / n
        }
    };
    let w = config.penalty_weights(coefs.len());
    loss + lambda * coefs.iter().zip(&w).map(|(d, wk)| wk * d * d).sum::<f64>()
}

fn bernoulli_deviance(y: f64, mu: f64) -> f64 {
    let mu = mu.clamp(1e-15, 1.0 - 1e-15);
    -2.0 * (y * mu.ln() + (1.0 - y) * (1.0 - mu).ln())
}

/// Descending log-spaced lambda grid.
///
/// The top value is `max_k |x_k' (y - ybar)| / n` over penalized columns, the size of
/// the largest penalized loss gradient at `d = 0`; it scales linearly with `y`. The
/// grid ends at `top * min_ratio`.
pub fn lambda_grid(design: &DMatrix<f64>, response: &[f64], config: &RidgeConfig) -> Result<Vec<f64>> {
    check_design(design, response)?;
    config.validate()?;
    let (n, p) = design.shape();
    let ybar = response.iter().sum::<f64>() / n as f64;
    let weights = config.penalty_weights(p);
    let mut top = 0.0f64;
    for (k, col) in design.column_iter().enumerate() {
        if weights[k] == 0.0 {
            continue;
        }
        let xbar = col.sum() / n as f64;
        let dot: f64 = col
            .iter()
            .zip(response)
            .map(|(x, y)| (x - xbar) * (y - ybar))
            .sum();
        top = top.max(dot.abs() / n as f64);
    }
    if !(top > 0.0) {
        top = 1.0;
    }
    // treatment column excluded from the "biomarker count" used for the default ratio
    let ratio = config.min_ratio(n, p.saturating_sub(1));
    let steps = (config.n_lambdas - 1) as f64;
    Ok((0..config.n_lambdas)
        .map(|k| top * ratio.powf(k as f64 / steps))
        .collect())
}

/// Mean and standard error of held-out loss at one lambda.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvError {
    pub mean: f64,
    pub se: f64,
}

/// Stage-1 ridge fit with a cross-validated lambda.
#[derive(Debug, Clone, PartialEq)]
pub struct RidgeFit {
    pub intercept: f64,
    /// Treatment coefficient on the standardized scale.
    pub treatment_coef: f64,
    /// Biomarker coefficients on the standardized scale.
    pub biomarker_coefs: Vec<f64>,
    pub lambda_opt: f64,
    pub lambda_index: usize,
    pub lambda_grid: Vec<f64>,
    pub cv_errors: Vec<CvError>,
    /// Scaling of the `[T, X_1..X_m]` design.
    pub scaling: Scaling,
    /// Constant biomarker columns.
    pub degenerate: Vec<bool>,
    /// False if any fold or the final fit hit the iteration cap.
    pub converged: bool,
}

/// The stage-1 design `[T, X_1, ..., X_m]`.
pub fn stage1_design(data: &TrialDataset) -> DMatrix<f64> {
    let (n, m) = (data.n(), data.m());
    let mut d = DMatrix::zeros(n, m + 1);
    d.column_mut(0).copy_from_slice(data.treatment());
    d.columns_mut(1, m).copy_from(data.biomarkers());
    d
}

/// Random, balanced assignment of `n` rows to `k` folds.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}

struct PathResult {
    losses: Vec<f64>,
    converged: bool,
}

fn linear_fold_path(
    train: &GramProblem,
    held_x: &DMatrix<f64>,
    held_y: &[f64],
    grid: &[f64],
    weights: &[f64],
    config: &RidgeConfig,
) -> PathResult {
    let p = held_x.ncols();
    let mut coefs = vec![0.0; p];
    let mut losses = Vec::with_capacity(grid.len());
    let mut converged = true;
    let spectral = (config.solver == RidgeSolver::Spectral).then(|| train.spectral(weights));
    for &lambda in grid {
        let (ok, _) = train.solve_with(spectral.as_ref(), lambda, weights, &mut coefs, config);
        converged &= ok;
        let a = train.intercept(&coefs);
        let pred = held_x * DVector::from_column_slice(&coefs);
        let mse = held_y
            .iter()
            .zip(pred.iter())
            .map(|(y, f)| (y - a - f).powi(2))
            .sum::<f64>()
            / held_y.len() as f64;
        losses.push(mse);
    }
    PathResult { losses, converged }
}

fn logistic_fold_path(
    train_x: &DMatrix<f64>,
    train_y: &[f64],
    held_x: &DMatrix<f64>,
    held_y: &[f64],
    grid: &[f64],
    weights: &[f64],
    config: &RidgeConfig,
) -> PathResult {
    let p = train_x.ncols();
    let mut coefs = vec![0.0; p];
    let ybar = (train_y.iter().sum::<f64>() / train_y.len() as f64).clamp(1e-6, 1.0 - 1e-6);
    let mut intercept = (ybar / (1.0 - ybar)).ln();
    let mut losses = Vec::with_capacity(grid.len());
    let mut converged = true;
    for &lambda in grid {
        let (ok, _) = logistic_solve(
            train_x,
            train_y,
            lambda,
            weights,
            &mut intercept,
            &mut coefs,
            config,
        );
        converged &= ok;
        let pred = held_x * DVector::from_column_slice(&coefs);
        let dev = held_y
            .iter()
            .zip(pred.iter())
            .map(|(&y, f)| bernoulli_deviance(y, sigmoid(intercept + f)))
            .sum::<f64>()
            / held_y.len() as f64;
        losses.push(dev);
    }
    PathResult { losses, converged }
}

/// Fits the stage-1 ridge model, choosing lambda by k-fold cross-validation.
///
/// Folds come from `cv_seed`. The chosen lambda minimizes mean held-out loss (squared
/// error or deviance); ties go to the larger lambda. The final coefficients are refit
/// on all rows along the warm-started path down to the chosen lambda.
pub fn cross_validate(data: &TrialDataset, config: &RidgeConfig) -> Result<RidgeFit> {
    config.validate()?;
    let n = data.n();
    let k = config.cv_folds;
    if n < 2 * k {
        return Err(Error::InvalidData(format!(
            "cross-validation with {k} folds needs at least {} rows, got {n}",
            2 * k
        )));
    }
    if config.family != data.family() {
        return Err(Error::InvalidConfig(format!(
            "ridge family {} does not match dataset family {}",
            config.family,
            data.family()
        )));
    }
    let (z, scaling) = standardize(&stage1_design(data))?;
    let y = data.outcome();
    let grid = lambda_grid(&z, y, config)?;
    let weights = config.penalty_weights(z.ncols());
    let folds = fold_assignment(n, k, config.cv_seed);
    let fold_rows: Vec<Vec<usize>> = (0..k)
        .map(|f| (0..n).filter(|&i| folds[i] == f).collect())
        .collect();

    let full_sums = match config.family {
        Family::Linear => Some(RowSums::of(&z, y)),
        Family::Logistic => None,
    };
    let paths: Vec<PathResult> = fold_rows
        .par_iter()
        .map(|held| {
            let held_x = select_rows(&z, held);
            let held_y: Vec<f64> = held.iter().map(|&i| y[i]).collect();
            match &full_sums {
                Some(sums) => {
                    let train = sums.minus(&RowSums::of(&held_x, &held_y)).centred();
                    linear_fold_path(&train, &held_x, &held_y, &grid, &weights, config)
                }
                None => {
                    let train_rows: Vec<usize> = (0..n).filter(|i| !held.contains(i)).collect();
                    let train_x = select_rows(&z, &train_rows);
                    let train_y: Vec<f64> = train_rows.iter().map(|&i| y[i]).collect();
                    logistic_fold_path(&train_x, &train_y, &held_x, &held_y, &grid, &weights, config)
                }
            }
        })
        .collect();

    let kf = k as f64;
    let cv_errors: Vec<CvError> = (0..grid.len())
        .map(|l| {
            let vals: Vec<f64> = paths.iter().map(|p| p.losses[l]).collect();
            let mean = vals.iter().sum::<f64>() / kf;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (kf - 1.0);
            CvError {
                mean,
                se: (var / kf).sqrt(),
            }
        })
        .collect();
    let mut best = 0;
    for (l, e) in cv_errors.iter().enumerate() {
        if e.mean < cv_errors[best].mean {
            best = l;
        }
    }

    let mut converged = paths.iter().all(|p| p.converged);
    let p = z.ncols();
    let mut coefs = vec![0.0; p];
    let intercept = match config.family {
        Family::Linear => {
            let problem = full_sums.as_ref().expect("linear sums").centred();
            if config.solver == RidgeSolver::Spectral {
                coefs = problem.spectral(&weights).solve(grid[best]);
            } else {
                for &lambda in &grid[..=best] {
                    let (ok, _) =
                        problem.solve(lambda, &weights, &mut coefs, config.max_iter, config.tol);
                    if lambda == grid[best] {
                        converged &= ok;
                    }
                }
            }
            problem.intercept(&coefs)
        }
        Family::Logistic => {
            let ybar = (y.iter().sum::<f64>() / n as f64).clamp(1e-6, 1.0 - 1e-6);
            let mut intercept = (ybar / (1.0 - ybar)).ln();
            for &lambda in &grid[..=best] {
                let (ok, _) = logistic_solve(
                    &z,
                    y,
                    lambda,
                    &weights,
                    &mut intercept,
                    &mut coefs,
                    config,
                );
                if lambda == grid[best] {
                    converged &= ok;
                }
            }
            intercept
        }
    };

    Ok(RidgeFit {
        intercept,
        treatment_coef: coefs[0],
        biomarker_coefs: coefs[1..].to_vec(),
        lambda_opt: grid[best],
        lambda_index: best,
        lambda_grid: grid,
        cv_errors,
        degenerate: scaling.constant[1..].to_vec(),
        scaling,
        converged,
    })
}

/// Biomarkers ordered for stage 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeRanking {
    /// 0-based biomarker indices, most important first.
    pub order: Vec<usize>,
    /// `|coefficient|` for each entry of `order`.
    pub scores: Vec<f64>,
}

/// Orders biomarkers by descending absolute standardized coefficient.
///
/// Ties keep ascending column order; constant columns go last. The treatment
/// coefficient is not ranked.
pub fn rank_biomarkers(fit: &RidgeFit) -> RidgeRanking {
    rank_coefficients(&fit.biomarker_coefs, &fit.degenerate)
}

pub(crate) fn rank_coefficients(coefs: &[f64], degenerate: &[bool]) -> RidgeRanking {
    let mut order: Vec<usize> = (0..coefs.len()).collect();
    order.sort_by(|&a, &b| {
        let da = degenerate.get(a).copied().unwrap_or(false);
        let db = degenerate.get(b).copied().unwrap_or(false);
        da.cmp(&db)
            .then(coefs[b].abs().total_cmp(&coefs[a].abs()))
            .then(a.cmp(&b))
    });
    let scores = order.iter().map(|&j| coefs[j].abs()).collect();
    RidgeRanking { order, scores }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_problem(seed: u64, n: usize, p: usize) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (z, _) = standardize(&x).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let s: f64 = (0..p).map(|k| z[(i, k)] * (k as f64 - 1.0) * 0.4).sum();
                2.0 + s + rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        (z, y)
    }

    /// Closed form of the linear objective: `(X_c'X_c/n + 2 lambda W) d = X_c'y_c/n`.
    fn closed_form(x: &DMatrix<f64>, y: &[f64], lambda: f64, w: &[f64]) -> Vec<f64> {
        let (n, p) = x.shape();
        let nf = n as f64;
        let means: Vec<f64> = (0..p).map(|k| x.column(k).sum() / nf).collect();
        let ybar = y.iter().sum::<f64>() / nf;
        let xc = DMatrix::from_fn(n, p, |i, k| x[(i, k)] - means[k]);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - ybar));
        let mut a = xc.transpose() * &xc / nf;
        for k in 0..p {
            a[(k, k)] += 2.0 * lambda * w[k];
        }
        let b = xc.transpose() * yc / nf;
        a.lu().solve(&b).unwrap().iter().copied().collect()
    }

    #[test]
    fn standardize_basic_cases() {
        let x = DMatrix::from_column_slice(3, 3, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0, -1.0, 0.0, 1.0]);
        let (z, s) = standardize(&x).unwrap();
        assert_eq!(z.column(0).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, 1.0]);
        assert_eq!(s.constant, vec![false, true, false]);
        assert!(z.column(1).iter().all(|&v| v == 0.0));
        // already standardized column is unchanged
        for i in 0..3 {
            assert!((z[(i, 2)] - x[(i, 2)]).abs() < 1e-12);
        }
        assert!(standardize(&DMatrix::from_element(1, 2, 1.0)).is_err());
    }

    #[test]
    fn small_closed_form_example() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -1.0, 1.0, 0.0, -1.5]);
        let (z, _) = standardize(&x).unwrap();
        let y = [1.0, -2.0, 0.5];
        let cfg = RidgeConfig {
            tol: 1e-13,
            ..RidgeConfig::default()
        };
        let sol = ridge_solve(&z, &y, 0.5, None, &cfg).unwrap();
        let oracle = closed_form(&z, &y, 0.5, &[1.0, 1.0]);
        for k in 0..2 {
            assert!((sol.coefs[k] - oracle[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_lambda_matches_least_squares() {
        let (z, y) = random_problem(3, 60, 5);
        let sol = ridge_solve(&z, &y, 0.0, None, &RidgeConfig::default()).unwrap();
        let mut d = DMatrix::from_element(60, 6, 1.0);
        d.columns_mut(1, 5).copy_from(&z);
        let ols = crate::model::fit_linear(&d, &y).unwrap();
        assert!((sol.intercept - ols.estimates[0]).abs() < 1e-6);
        for k in 0..5 {
            assert!((sol.coefs[k] - ols.estimates[k + 1]).abs() < 1e-6);
        }
    }

    #[test]
    fn huge_lambda_shrinks_everything() {
        let (z, y) = random_problem(4, 50, 4);
        let sol = ridge_solve(&z, &y, 1e6, None, &RidgeConfig::default()).unwrap();
        assert!(sol.coefs.iter().all(|c| c.abs() < 1e-4));
    }

    #[test]
    fn unpenalized_treatment_column() {
        let (z, y) = random_problem(8, 40, 3);
        let cfg = RidgeConfig {
            penalize_treatment: false,
            tol: 1e-12,
            ..RidgeConfig::default()
        };
        let sol = ridge_solve(&z, &y, 2.0, None, &cfg).unwrap();
        let oracle = closed_form(&z, &y, 2.0, &[0.0, 1.0, 1.0]);
        for k in 0..3 {
            assert!((sol.coefs[k] - oracle[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn objective_not_worse_than_closed_form() {
        let cfg = RidgeConfig {
            tol: 1e-11,
            ..RidgeConfig::default()
        };
        for seed in 0..10 {
            let (z, y) = random_problem(100 + seed, 30 + seed as usize, 4);
            for lambda in [0.0, 0.05, 0.7] {
                let sol = ridge_solve(&z, &y, lambda, None, &cfg).unwrap();
                let d = closed_form(&z, &y, lambda, &[1.0; 4]);
                let a = y.iter().sum::<f64>() / y.len() as f64;
                let f_cd = ridge_objective(&z, &y, sol.intercept, &sol.coefs, lambda, &cfg);
                let f_cf = ridge_objective(&z, &y, a, &d, lambda, &cfg);
                assert!(f_cd <= f_cf + 1e-10, "{f_cd} vs {f_cf}");
            }
        }
    }

    #[test]
    fn grid_endpoints_and_scaling() {
        let (z, y) = random_problem(5, 40, 4);
        let cfg = RidgeConfig {
            n_lambdas: 2,
            lambda_min_ratio: Some(0.01),
            ..RidgeConfig::default()
        };
        let g = lambda_grid(&z, &y, &cfg).unwrap();
        assert_eq!(g.len(), 2);
        assert!((g[1] - 0.01 * g[0]).abs() < 1e-15 * g[0]);
        let y3: Vec<f64> = y.iter().map(|v| 3.5 * v).collect();
        let g3 = lambda_grid(&z, &y3, &cfg).unwrap();
        assert!((g3[0] - 3.5 * g[0]).abs() < 1e-12 * g3[0]);
        let full = lambda_grid(&z, &y, &RidgeConfig::default()).unwrap();
        assert_eq!(full.len(), 100);
        assert!(full.windows(2).all(|w| w[0] > w[1] && w[1] > 0.0));
    }

    fn fit_with(coefs: Vec<f64>) -> RidgeFit {
        let m = coefs.len();
        RidgeFit {
            intercept: 0.0,
            treatment_coef: 0.0,
            biomarker_coefs: coefs,
            lambda_opt: 1.0,
            lambda_index: 0,
            lambda_grid: vec![1.0, 0.1],
            cv_errors: vec![],
            scaling: Scaling {
                means: vec![],
                sds: vec![],
                constant: vec![],
            },
            degenerate: vec![false; m],
            converged: true,
        }
    }

    #[test]
    fn ranking_rules() {
        assert_eq!(rank_biomarkers(&fit_with(vec![0.5, -0.9, 0.1])).order, vec![1, 0, 2]);
        assert_eq!(rank_biomarkers(&fit_with(vec![0.3, 0.3])).order, vec![0, 1]);
        assert_eq!(rank_biomarkers(&fit_with(vec![0.0; 5])).order, vec![0, 1, 2, 3, 4]);
        let mut f = fit_with(vec![0.0, 0.2, 0.0]);
        f.degenerate = vec![true, false, false];
        let r = rank_biomarkers(&f);
        assert_eq!(r.order, vec![1, 2, 0]);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn folds_are_balanced_and_seeded() {
        let a = fold_assignment(23, 5, 9);
        assert_eq!(a, fold_assignment(23, 5, 9));
        for f in 0..5 {
            let c = a.iter().filter(|&&v| v == f).count();
            assert!(c == 4 || c == 5);
        }
    }

    #[test]
    fn logistic_ridge_matches_unpenalized_mle_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 300;
        let x = DMatrix::from_fn(n, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let (z, _) = standardize(&x).unwrap();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                let eta = -0.2 + 0.9 * z[(i, 0)] - 0.4 * z[(i, 1)];
                if rng.random::<f64>() < 1.0 / (1.0 + (-eta as f64).exp()) { 1.0 } else { 0.0 }
            })
            .collect();
        let cfg = RidgeConfig {
            family: Family::Logistic,
            tol: 1e-11,
            ..RidgeConfig::default()
        };
        let sol = ridge_solve(&z, &y, 0.0, None, &cfg).unwrap();
        let mut d = DMatrix::from_element(n, 3, 1.0);
        d.columns_mut(1, 2).copy_from(&z);
        let mle = crate::model::fit_logistic(&d, &y, 100, 1e-12).unwrap();
        assert!(sol.converged);
        assert!((sol.intercept - mle.estimates[0]).abs() < 1e-6);
        for k in 0..2 {
            assert!((sol.coefs[k] - mle.estimates[k + 1]).abs() < 1e-6);
        }
        // stronger penalty shrinks
        let shrunk = ridge_solve(&z, &y, 0.5, None, &cfg).unwrap();
        assert!(shrunk.coefs[0].abs() < sol.coefs[0].abs());
    }

    #[test]
    fn spectral_solver_matches_closed_form() {
        for (seed, penalize) in [(11, true), (12, false)] {
            let (z, y) = random_problem(seed, 60, 8);
            let cfg = RidgeConfig {
                solver: RidgeSolver::Spectral,
                penalize_treatment: penalize,
                ..RidgeConfig::default()
            };
            let w = cfg.penalty_weights(8);
            for lambda in [0.0, 0.05, 1.0, 20.0] {
                let got = ridge_solve(&z, &y, lambda, None, &cfg).unwrap();
                let want = closed_form(&z, &y, lambda, &w);
                for (g, e) in got.coefs.iter().zip(&want) {
                    assert!((g - e).abs() < 1e-9 * (1.0 + e.abs()), "{g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn cross_validation_agrees_across_solvers() {
        let (z, y) = random_problem(21, 120, 12);
        let t: Vec<f64> = (0..120).map(|i| (i % 2) as f64).collect();
        let data = TrialDataset::new(
            y,
            t,
            z.columns(1, 11).into_owned(),
            (1..=11).map(|j| format!("X{j}")).collect(),
            Family::Linear,
        )
        .unwrap();
        let cd = cross_validate(&data, &RidgeConfig { tol: 1e-12, ..RidgeConfig::default() }).unwrap();
        let sp = cross_validate(
            &data,
            &RidgeConfig { solver: RidgeSolver::Spectral, ..RidgeConfig::default() },
        )
        .unwrap();
        assert_eq!(cd.lambda_index, sp.lambda_index);
        for (a, b) in cd.biomarker_coefs.iter().zip(&sp.biomarker_coefs) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!((cd.intercept - sp.intercept).abs() < 1e-8);
    }
}
