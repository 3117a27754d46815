//! Empirical checks that stage-1 ridge screening and stage-2 interaction tests are
//! uncorrelated.
//!
//! Two readings are offered. [`independence_across_biomarkers`] pairs, within one
//! dataset, each biomarker's standardized ridge coefficient with its interaction Wald
//! statistic. [`independence_across_replicates`] fixes one null biomarker and pairs its
//! ridge coefficient with its interaction estimate over simulated replicates.
//!
//! Both report a Pearson correlation with a two-sided t test on `n - 2` degrees of
//! freedom and a Fisher-z 95% interval.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};
use crate::model::{interaction_test, TrialDataset};
use crate::ridge::{cross_validate, RidgeConfig};
use crate::simulate::{derived_cv_seed, generate, ScenarioConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndependenceMode {
    AcrossBiomarkers,
    AcrossReplicates,
}

impl std::fmt::Display for IndependenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IndependenceMode::AcrossBiomarkers => "across_biomarkers",
            IndependenceMode::AcrossReplicates => "across_replicates",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndependenceReport {
    pub mode: IndependenceMode,
    pub estimate: f64,
    pub p_value: f64,
    pub ci95: (f64, f64),
    pub n_pairs: usize,
}

impl IndependenceReport {
    pub fn ci_contains_zero(&self) -> bool {
        self.ci95.0 <= 0.0 && 0.0 <= self.ci95.1
    }
}

/// Pearson correlation test on the pairs where both values are finite.
pub fn correlation_report(
    mode: IndependenceMode,
    stage1: &[f64],
    stage2: &[f64],
) -> Result<IndependenceReport> {
    if stage1.len() != stage2.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} stage-1 values against {} stage-2 values",
            stage1.len(),
            stage2.len()
        )));
    }
    let (a, b): (Vec<f64>, Vec<f64>) = stage1
        .iter()
        .zip(stage2)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| (*x, *y))
        .unzip();
    let n = a.len();
    if n < 3 {
        return Err(Error::InsufficientPairs { got: n });
    }
    let nf = n as f64;
    let ma = a.iter().sum::<f64>() / nf;
    let mb = b.iter().sum::<f64>() / nf;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(&b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::InvalidData(
            "correlation undefined: one of the statistics is constant".into(),
        ));
    }
    let r = (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0);

    let df = nf - 2.0;
    let p_value = if r.abs() == 1.0 {
        0.0
    } else {
        let t = r * (df / (1.0 - r * r)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * dist.cdf(-t.abs())
    };

    let se = 1.0 / (nf - 3.0).sqrt();
    let ci95 = if !se.is_finite() {
        (-1.0, 1.0)
    } else if r.abs() == 1.0 {
        (r, r)
    } else {
        let q = Normal::standard().inverse_cdf(0.975);
        let z = r.atanh();
        ((z - q * se).tanh(), (z + q * se).tanh())
    };
    Ok(IndependenceReport {
        mode,
        estimate: r,
        p_value,
        ci95,
        n_pairs: n,
    })
}

/// Correlates each biomarker's ridge coefficient with its interaction Wald statistic.
///
/// Biomarkers whose interaction model cannot be fitted are skipped.
pub fn independence_across_biomarkers(
    data: &TrialDataset,
    ridge_config: &RidgeConfig,
) -> Result<IndependenceReport> {
    if data.m() < 3 {
        return Err(Error::InsufficientPairs { got: data.m() });
    }
    let fit = cross_validate(data, ridge_config)?;
    let wald: Vec<f64> = (0..data.m())
        .into_par_iter()
        .map(|j| interaction_test(data, j).map_or(f64::NAN, |w| w.statistic))
        .collect();
    correlation_report(IndependenceMode::AcrossBiomarkers, &fit.biomarker_coefs, &wald)
}

/// Stage-1 and stage-2 estimates for biomarker `j` on one simulated replicate.
fn replicate_pair(config: &ScenarioConfig, j: usize, ridge_config: &RidgeConfig) -> Result<(f64, f64)> {
    let data = generate(config)?;
    let cfg = RidgeConfig {
        cv_seed: derived_cv_seed(config.seed),
        ..ridge_config.clone()
    };
    let fit = cross_validate(&data, &cfg)?;
    let wald = interaction_test(&data, j)?;
    Ok((fit.biomarker_coefs[j], wald.estimate))
}

/// Correlates, over replicates, the ridge coefficient of null biomarker `j` (0-based)
/// with its interaction estimate.
///
/// Replicate `r` uses seed `config.seed + r`. Replicates that fail to fit are dropped.
pub fn independence_across_replicates(
    config: &ScenarioConfig,
    j: usize,
    replicates: usize,
    ridge_config: &RidgeConfig,
) -> Result<IndependenceReport> {
    config.validate()?;
    if j >= config.m {
        return Err(Error::IndexOutOfRange { index: j, m: config.m });
    }
    if config.interaction_of(j) != 0.0 {
        return Err(Error::IndexHasInteraction { index: j });
    }
    let pairs: Vec<Option<(f64, f64)>> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let cfg = config.clone().with_seed(config.seed.wrapping_add(r as u64));
            replicate_pair(&cfg, j, ridge_config).ok()
        })
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().flatten().unzip();
    correlation_report(IndependenceMode::AcrossReplicates, &a, &b)
}
