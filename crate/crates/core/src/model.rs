//! Per-biomarker regression models and Wald tests.
//!
//! Two working models are fitted one biomarker at a time:
//!
//! * the interaction model `G{E(Y | X_j, T)} = b0 + bX·X_j + bT·T + bXT·X_j·T`, whose
//!   `bXT` coefficient is the stage-2 target;
//! * the marginal model `G{E(Y | X_j)} = d0 + dX·X_j`, used for univariate screening.
//!
//! `G` is the identity for [`Family::Linear`] and the logit for [`Family::Logistic`].
//! Wald p-values use the standard normal reference for both families, so small-sample
//! linear p-values are mildly anti-conservative compared with a t reference.
//!
//! The between-stage independence argument behind the two-stage procedures assumes a
//! constant conditional variance of `Y`; this is not checked on real data.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Singular values below this fraction of the largest one are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Default IRLS iteration cap.
pub const LOGISTIC_MAX_ITER: usize = 100;
/// Default IRLS convergence tolerance on the largest coefficient change.
pub const LOGISTIC_TOL: f64 = 1e-8;
/// Coefficient norm above which a logistic fit is declared separated.
pub const SEPARATION_NORM: f64 = 1e3;

/// Printed on every report produced with the logistic family.
pub const LOGISTIC_CAVEAT: &str = "family-wise error rate control of the two-stage procedures is \
only established for linear models; logistic interaction estimates may be biased when a \
biomarker is associated with the outcome, which can inflate stage-2 false positives";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[default]
    Linear,
    Logistic,
}

impl Family {
    pub fn caveat(self) -> Option<&'static str> {
        match self {
            Family::Linear => None,
            Family::Logistic => Some(LOGISTIC_CAVEAT),
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Family::Linear),
            "logistic" => Ok(Family::Logistic),
            other => Err(Error::InvalidConfig(format!(
                "family must be linear or logistic, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Linear => "linear",
            Family::Logistic => "logistic",
        })
    }
}

/// A randomized trial: outcome, 0/1 treatment indicator and an `n x m` biomarker panel.
///
/// Immutable once built; all validation happens in [`TrialDataset::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    outcome: Vec<f64>,
    treatment: Vec<f64>,
    biomarkers: DMatrix<f64>,
    names: Vec<String>,
    family: Family,
}

impl TrialDataset {
    pub fn new(
        outcome: Vec<f64>,
        treatment: Vec<f64>,
        biomarkers: DMatrix<f64>,
        names: Vec<String>,
        family: Family,
    ) -> Result<Self> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no rows".into()));
        }
        if biomarkers.ncols() == 0 {
            return Err(Error::InvalidData("dataset has no biomarkers".into()));
        }
        if treatment.len() != n || biomarkers.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "outcome has {n} rows, treatment {}, biomarkers {}",
                treatment.len(),
                biomarkers.nrows()
            )));
        }
        if names.len() != biomarkers.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} names for {} biomarker columns",
                names.len(),
                biomarkers.ncols()
            )));
        }
        if let Some(i) = treatment.iter().position(|&t| t != 0.0 && t != 1.0) {
            return Err(Error::InvalidData(format!(
                "treatment at row {i} is {}, expected 0 or 1",
                treatment[i]
            )));
        }
        if let Some(i) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(Error::InvalidData(format!("outcome at row {i} is not finite")));
        }
        if family == Family::Logistic {
            if let Some(i) = outcome.iter().position(|&y| y != 0.0 && y != 1.0) {
                return Err(Error::InvalidData(format!(
                    "logistic outcome at row {i} is {}, expected 0 or 1",
                    outcome[i]
                )));
            }
        }
        if biomarkers.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData(
                "biomarker matrix contains missing or non-finite values".into(),
            ));
        }
        Ok(Self {
            outcome,
            treatment,
            biomarkers,
            names,
            family,
        })
    }

    /// Builds a dataset from biomarker columns, naming them `X1..Xm`.
    pub fn from_columns(
        outcome: Vec<f64>,
        treatment: Vec<f64>,
        columns: &[Vec<f64>],
        family: Family,
    ) -> Result<Self> {
        let n = outcome.len();
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "biomarker column of length {} for {n} rows",
                c.len()
            )));
        }
        let m = columns.len();
        let biomarkers = DMatrix::from_fn(n, m, |i, j| columns[j][i]);
        let names = (1..=m).map(|j| format!("X{j}")).collect();
        Self::new(outcome, treatment, biomarkers, names, family)
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn m(&self) -> usize {
        self.biomarkers.ncols()
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn treatment(&self) -> &[f64] {
        &self.treatment
    }

    pub fn biomarkers(&self) -> &DMatrix<f64> {
        &self.biomarkers
    }

    /// Column `j` (0-based) of the biomarker panel.
    pub fn biomarker(&self, j: usize) -> &[f64] {
        let n = self.n();
        &self.biomarkers.as_slice()[j * n..(j + 1) * n]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn has_both_arms(&self) -> bool {
        self.treatment.contains(&0.0) && self.treatment.contains(&1.0)
    }

    /// True when column `j` has no spread.
    pub fn is_degenerate(&self, j: usize) -> bool {
        is_constant(self.biomarker(j))
    }

    /// Same data with a different outcome vector.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self> {
        Self::new(
            outcome,
            self.treatment.clone(),
            self.biomarkers.clone(),
            self.names.clone(),
            self.family,
        )
    }

    /// Same data with a different treatment vector.
    pub fn with_treatment(&self, treatment: Vec<f64>) -> Result<Self> {
        Self::new(
            self.outcome.clone(),
            treatment,
            self.biomarkers.clone(),
            self.names.clone(),
            self.family,
        )
    }

    fn check_index(&self, j: usize) -> Result<()> {
        if j >= self.m() {
            return Err(Error::IndexOutOfRange { index: j, m: self.m() });
        }
        Ok(())
    }
}

pub(crate) fn is_constant(x: &[f64]) -> bool {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo <= 1e-12 * (1.0 + hi.abs().max(lo.abs()))
}

/// Coefficients and their estimated covariance from a regression fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientFit {
    pub estimates: Vec<f64>,
    pub covariance: DMatrix<f64>,
    pub coef_names: Vec<String>,
    pub converged: bool,
    pub iterations: usize,
    pub n_used: usize,
}

impl CoefficientFit {
    pub fn std_error(&self, k: usize) -> f64 {
        self.covariance[(k, k)].max(0.0).sqrt()
    }

    pub fn wald(&self, k: usize) -> WaldResult {
        WaldResult::new(self.estimates[k], self.std_error(k))
    }

    fn with_names(mut self, names: &[&str]) -> Self {
        self.coef_names = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// Wald test of a single coefficient against zero, two-sided, normal reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaldResult {
    pub estimate: f64,
    pub std_error: f64,
    pub statistic: f64,
    pub p_value: f64,
}

impl WaldResult {
    /// A residual-free fit (zero standard error) is reported with the smallest positive
    /// standard error, giving an infinite statistic and a zero p-value.
    pub fn new(estimate: f64, std_error: f64) -> Self {
        let std_error = std_error.max(f64::MIN_POSITIVE);
        let statistic = estimate / std_error;
        Self {
            estimate,
            std_error,
            statistic,
            p_value: normal_two_sided_p(statistic),
        }
    }
}

/// `2 (1 - Phi(|z|))`, evaluated through `erfc` to keep precision in the tail.
pub fn normal_two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return f64::NAN;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0)
}

/// QR factorisation with a singular-value rank check; returns `(Q'y, R)`.
fn qr_solve(design: &DMatrix<f64>, response: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = design.ncols();
    let qr = design.clone().qr();
    let r = qr.r();
    let sv = r.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if !(ratio >= RANK_TOLERANCE) {
        return Err(Error::RankDeficient { ratio });
    }
    let mut qty = response.clone();
    qr.q_tr_mul(&mut qty);
    let beta = r
        .solve_upper_triangular(&qty.rows(0, p).into_owned())
        .ok_or(Error::RankDeficient { ratio })?;
    Ok((beta, r))
}

/// `(R'R)^{-1} = R^{-1} R^{-T}` for an upper-triangular `R`.
fn inverse_gram(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = r.ncols();
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::RankDeficient { ratio: 0.0 })?;
    let mut cov = &r_inv * r_inv.transpose();
    symmetrize(&mut cov);
    Ok(cov)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let p = m.ncols();
    for i in 0..p {
        for j in (i + 1)..p {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Ordinary least squares via Householder QR.
///
/// The covariance is `s^2 (X'X)^{-1}` with `s^2 = RSS / (n - p)`.
pub fn fit_linear(design: &DMatrix<f64>, response: &[f64]) -> Result<CoefficientFit> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows but response has {}",
            response.len()
        )));
    }
    if n < p {
        return Err(Error::DimensionMismatch(format!(
            "need at least as many rows as columns, got {n} x {p}"
        )));
    }
    let y = DVector::from_column_slice(response);
    let (beta, r) = qr_solve(design, &y)?;
    let cov = if n == p {
        // Saturated: no residual degrees of freedom, so the variance is unbounded.
        DMatrix::from_diagonal_element(p, p, f64::INFINITY)
    } else {
        let resid = &y - design * &beta;
        let sigma2 = resid.norm_squared() / (n - p) as f64;
        inverse_gram(&r)? * sigma2
    };
    Ok(CoefficientFit {
        estimates: beta.iter().copied().collect(),
        covariance: cov,
        coef_names: (0..p).map(|k| format!("b{k}")).collect(),
        converged: true,
        iterations: 1,
        n_used: n,
    })
}

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Logistic regression by iteratively reweighted least squares.
///
/// Each step solves a weighted least-squares problem through QR. The fit stops early
/// with `converged = false` once the coefficient norm exceeds [`SEPARATION_NORM`].
/// The covariance is the inverse information `(X'WX)^{-1}` at the final estimate.
pub fn fit_logistic(
    design: &DMatrix<f64>,
    response: &[f64],
    max_iter: usize,
    tol: f64,
) -> Result<CoefficientFit> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "design has {n} rows but response has {}",
            response.len()
        )));
    }
    if n <= p {
        return Err(Error::DimensionMismatch(format!(
            "need more rows than columns, got {n} x {p}"
        )));
    }
    if response.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidData("logistic response must be 0/1".into()));
    }

    let mut beta = DVector::zeros(p);
    let mut converged = false;
    let mut iterations = 0;
    let mut wx = design.clone();
    let mut wz = DVector::zeros(n);
    while iterations < max_iter {
        iterations += 1;
        let eta = design * &beta;
        for i in 0..n {
            let mu = sigmoid(eta[i]).clamp(1e-12, 1.0 - 1e-12);
            let w = mu * (1.0 - mu);
            let sw = w.sqrt();
            wz[i] = sw * (eta[i] + (response[i] - mu) / w);
            for k in 0..p {
                wx[(i, k)] = sw * design[(i, k)];
            }
        }
        let (next, _) = qr_solve(&wx, &wz)?;
        let change = (&next - &beta).amax();
        beta = next;
        if beta.norm() > SEPARATION_NORM {
            break;
        }
        if change < tol {
            converged = true;
            break;
        }
    }

    let eta = design * &beta;
    for i in 0..n {
        let mu = sigmoid(eta[i]);
        let sw = (mu * (1.0 - mu)).sqrt();
        for k in 0..p {
            wx[(i, k)] = sw * design[(i, k)];
        }
    }
    // Separated fits can leave the weights numerically zero.
    let cov = match qr_solve(&wx, &DVector::zeros(n)) {
        Ok((_, r)) => inverse_gram(&r)?,
        Err(_) if !converged => DMatrix::from_diagonal_element(p, p, f64::INFINITY),
        Err(e) => return Err(e),
    };
    Ok(CoefficientFit {
        estimates: beta.iter().copied().collect(),
        covariance: cov,
        coef_names: (0..p).map(|k| format!("b{k}")).collect(),
        converged,
        iterations,
        n_used: n,
    })
}

fn fit_family(family: Family, design: &DMatrix<f64>, response: &[f64]) -> Result<CoefficientFit> {
    match family {
        Family::Linear => fit_linear(design, response),
        Family::Logistic => {
            let fit = fit_logistic(design, response, LOGISTIC_MAX_ITER, LOGISTIC_TOL)?;
            if !fit.converged {
                let norm = fit.estimates.iter().map(|b| b * b).sum::<f64>().sqrt();
                return Err(Error::NotConverged { norm });
            }
            Ok(fit)
        }
    }
}

/// Design `[1, X_j, T, X_j * T]` for biomarker `j`.
pub fn interaction_design(data: &TrialDataset, j: usize) -> DMatrix<f64> {
    let x = data.biomarker(j);
    let t = data.treatment();
    let n = data.n();
    let mut d = DMatrix::from_element(n, 4, 1.0);
    for i in 0..n {
        d[(i, 1)] = x[i];
        d[(i, 2)] = t[i];
        d[(i, 3)] = x[i] * t[i];
    }
    d
}

/// Fits the full interaction model for biomarker `j` (0-based).
pub fn fit_interaction_model(data: &TrialDataset, j: usize) -> Result<CoefficientFit> {
    data.check_index(j)?;
    if !data.has_both_arms() {
        return Err(Error::SingleTreatmentArm);
    }
    if data.is_degenerate(j) {
        return Err(Error::DegenerateBiomarker { index: j });
    }
    let design = interaction_design(data, j);
    let fit = fit_family(data.family(), &design, data.outcome())?;
    Ok(fit.with_names(&["intercept", "biomarker", "treatment", "biomarker:treatment"]))
}

/// Wald test of the biomarker-by-treatment interaction for biomarker `j` (0-based).
pub fn interaction_test(data: &TrialDataset, j: usize) -> Result<WaldResult> {
    Ok(fit_interaction_model(data, j)?.wald(3))
}

/// Wald test of the marginal biomarker effect for biomarker `j` (0-based).
pub fn marginal_test(data: &TrialDataset, j: usize) -> Result<WaldResult> {
    data.check_index(j)?;
    if data.is_degenerate(j) {
        return Err(Error::DegenerateBiomarker { index: j });
    }
    let x = data.biomarker(j);
    let n = data.n();
    let design = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { x[i] });
    let fit = fit_family(data.family(), &design, data.outcome())?;
    Ok(fit.wald(1))
}
