//! Stage-1 screening, stage-2 interaction testing and multiplicity control.
//!
//! Four procedures are available:
//!
//! | procedure       | stage 1                         | stage 2 thresholds            |
//! |-----------------|---------------------------------|-------------------------------|
//! | `single_step`   | none                            | `alpha / m` on all biomarkers |
//! | `uni_threshold` | marginal p-value `< alpha1`     | `alpha / m*` on the selected  |
//! | `uni_rank`      | ascending marginal p-value      | geometric bucket weights      |
//! | `ridge_rank`    | descending `|ridge coefficient|`| geometric bucket weights      |
//!
//! Rank-based procedures test every biomarker at stage 2. Ties in any ranking are
//! broken by ascending column index, and biomarkers that cannot be fitted (constant
//! columns, failed fits) are ranked last, reported with their reason, and never
//! rejected. A hypothesis is rejected exactly when `p < threshold`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{interaction_test, marginal_test, TrialDataset, WaldResult};
use crate::ridge::{cross_validate, rank_biomarkers, RidgeConfig, RidgeFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Procedure {
    SingleStep,
    UniThreshold,
    UniRank,
    RidgeRank,
}

impl Procedure {
    pub const ALL: [Procedure; 4] = [
        Procedure::SingleStep,
        Procedure::UniThreshold,
        Procedure::UniRank,
        Procedure::RidgeRank,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Procedure::SingleStep => "single_step",
            Procedure::UniThreshold => "uni_threshold",
            Procedure::UniRank => "uni_rank",
            Procedure::RidgeRank => "ridge_rank",
        }
    }

    pub fn is_two_stage(self) -> bool {
        self != Procedure::SingleStep
    }
}

impl std::fmt::Display for Procedure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Procedure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Procedure::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "unknown method {s:?}; expected single_step, uni_threshold, uni_rank or ridge_rank"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreeningMethod {
    None,
    UnivariateThreshold,
    UnivariateRank,
    RidgeRank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Biomarkers passing a threshold screen (ascending index).
    Subset(Vec<usize>),
    /// Every biomarker, most promising first.
    Ranking(Vec<usize>),
}

/// Result of a stage-1 screen. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningOutcome {
    pub method: ScreeningMethod,
    pub selection: Selection,
    /// Marginal p-values or `|ridge coefficient|`; NaN where the biomarker could not
    /// be screened.
    pub stage1_stats: Vec<f64>,
    /// Biomarkers excluded from screening, with the reason.
    pub excluded: Vec<(usize, String)>,
}

impl ScreeningOutcome {
    pub fn selected(&self) -> Option<&[usize]> {
        match &self.selection {
            Selection::Subset(s) => Some(s),
            Selection::Ranking(_) => None,
        }
    }

    pub fn ranking(&self) -> Option<&[usize]> {
        match &self.selection {
            Selection::Ranking(r) => Some(r),
            Selection::Subset(_) => None,
        }
    }
}

/// Geometric weighting of stage-2 significance levels over a ranking.
///
/// Bucket `k` (0-based) holds `2^k * B` consecutive ranks, each tested at
/// `(alpha / 2^(k+1)) / (2^k * B)`. A final bucket that is only partly filled keeps the
/// nominal per-test level of the full bucket.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightScheme {
    pub bucket_size: usize,
    pub overall_alpha: f64,
}

impl Default for WeightScheme {
    fn default() -> Self {
        Self {
            bucket_size: 5,
            overall_alpha: 0.05,
        }
    }
}

impl WeightScheme {
    pub fn new(bucket_size: usize, overall_alpha: f64) -> Result<Self> {
        let s = Self {
            bucket_size,
            overall_alpha,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bucket_size == 0 {
            return Err(Error::InvalidConfig("bucket size must be at least 1".into()));
        }
        check_alpha("overall alpha", self.overall_alpha)
    }

    /// Bucket index of a 0-based rank.
    pub fn bucket_of(&self, rank: usize) -> u32 {
        // bucket k covers ranks [B (2^k - 1), B (2^(k+1) - 1))
        let q = rank / self.bucket_size + 1;
        usize::BITS - 1 - q.leading_zeros()
    }

    pub fn bucket_threshold(&self, bucket: u32) -> f64 {
        let scale = 2f64.powi(bucket as i32);
        (self.overall_alpha / (2.0 * scale)) / (scale * self.bucket_size as f64)
    }

    /// Per-test level for a 0-based rank.
    pub fn threshold(&self, rank: usize) -> f64 {
        self.bucket_threshold(self.bucket_of(rank))
    }

    pub fn thresholds(&self, m: usize) -> Vec<f64> {
        (0..m).map(|r| self.threshold(r)).collect()
    }
}

fn check_alpha(what: &str, alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{what} must lie in (0, 1), got {alpha}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum RowStatus {
    Tested,
    NotSelected,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// 0-based biomarker index.
    pub index: usize,
    pub name: String,
    /// 1-based stage-1 rank for rank-based procedures.
    pub rank: Option<usize>,
    pub wald: Option<WaldResult>,
    pub p_value: Option<f64>,
    pub threshold: Option<f64>,
    pub rejected: bool,
    pub status: RowStatus,
}

impl ReportRow {
    fn decide(mut self) -> Self {
        self.rejected = matches!((self.p_value, self.threshold), (Some(p), Some(t)) if p < t);
        self
    }
}

/// Stage-2 outcome: one row per biomarker in column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTwoReport {
    pub method: String,
    pub overall_alpha: f64,
    /// Number of biomarkers carried to stage 2 by a threshold screen.
    pub m_star: Option<usize>,
    pub rows: Vec<ReportRow>,
    pub caveat: Option<String>,
}

impl StageTwoReport {
    pub fn rejected(&self) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.rejected)
            .map(|r| r.index)
            .collect()
    }

    pub fn n_tested(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == RowStatus::Tested)
            .count()
    }
}

/// Stage-2 interaction tests for every biomarker, computed once and shared between
/// procedures.
#[derive(Debug, Clone)]
pub struct InteractionPanel {
    tests: Vec<Result<WaldResult>>,
}

impl InteractionPanel {
    pub fn compute(data: &TrialDataset) -> Result<Self> {
        if !data.has_both_arms() {
            return Err(Error::SingleTreatmentArm);
        }
        let tests = (0..data.m())
            .into_par_iter()
            .map(|j| interaction_test(data, j))
            .collect();
        Ok(Self { tests })
    }

    pub fn get(&self, j: usize) -> &Result<WaldResult> {
        &self.tests[j]
    }

    pub fn len(&self) -> usize {
        self.tests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tests.is_empty()
    }

    fn row(&self, data: &TrialDataset, j: usize) -> ReportRow {
        let (wald, status) = match &self.tests[j] {
            Ok(w) => (Some(*w), RowStatus::Tested),
            Err(e) => (None, RowStatus::Failed(e.to_string())),
        };
        ReportRow {
            index: j,
            name: data.names()[j].clone(),
            rank: None,
            p_value: wald.map(|w| w.p_value),
            wald,
            threshold: None,
            rejected: false,
            status,
        }
    }
}

/// Marginal screening p-values; failures are kept as errors.
fn marginal_panel(data: &TrialDataset) -> Vec<Result<WaldResult>> {
    (0..data.m())
        .into_par_iter()
        .map(|j| marginal_test(data, j))
        .collect()
}

fn report(data: &TrialDataset, method: &str, alpha: f64, rows: Vec<ReportRow>) -> StageTwoReport {
    StageTwoReport {
        method: method.to_string(),
        overall_alpha: alpha,
        m_star: None,
        rows,
        caveat: data.family().caveat().map(str::to_string),
    }
}

fn single_step_with(data: &TrialDataset, panel: &InteractionPanel, alpha: f64) -> StageTwoReport {
    let threshold = alpha / data.m() as f64;
    let rows = (0..data.m())
        .map(|j| {
            let mut row = panel.row(data, j);
            if row.status == RowStatus::Tested {
                row.threshold = Some(threshold);
            }
            row.decide()
        })
        .collect();
    report(data, Procedure::SingleStep.as_str(), alpha, rows)
}

/// All `m` interaction tests at the Bonferroni level `alpha / m`.
pub fn single_step(data: &TrialDataset, overall_alpha: f64) -> Result<StageTwoReport> {
    check_alpha("overall alpha", overall_alpha)?;
    let panel = InteractionPanel::compute(data)?;
    Ok(single_step_with(data, &panel, overall_alpha))
}

fn threshold_screen_from(marginal: &[Result<WaldResult>], alpha1: f64) -> ScreeningOutcome {
    let mut selected = Vec::new();
    let mut excluded = Vec::new();
    let mut stats = Vec::with_capacity(marginal.len());
    for (j, r) in marginal.iter().enumerate() {
        match r {
            Ok(w) => {
                stats.push(w.p_value);
                if w.p_value < alpha1 {
                    selected.push(j);
                }
            }
            Err(e) => {
                stats.push(f64::NAN);
                excluded.push((j, e.to_string()));
            }
        }
    }
    ScreeningOutcome {
        method: ScreeningMethod::UnivariateThreshold,
        selection: Selection::Subset(selected),
        stage1_stats: stats,
        excluded,
    }
}

/// Selects biomarkers whose marginal association p-value is below `alpha1`.
pub fn univariate_threshold_screen(data: &TrialDataset, alpha1: f64) -> Result<ScreeningOutcome> {
    check_alpha("alpha1", alpha1)?;
    Ok(threshold_screen_from(&marginal_panel(data), alpha1))
}

/// Orders `keys` (NaN = unusable, ranked last), ascending or descending, ties by index.
fn order_by(keys: &[f64], ascending: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (keys[a], keys[b]);
        ka.is_nan()
            .cmp(&kb.is_nan())
            .then_with(|| {
                if ka.is_nan() {
                    std::cmp::Ordering::Equal
                } else if ascending {
                    ka.total_cmp(&kb)
                } else {
                    kb.total_cmp(&ka)
                }
            })
            .then(a.cmp(&b))
    });
    order
}

fn rank_screen_from(marginal: &[Result<WaldResult>]) -> ScreeningOutcome {
    let mut excluded = Vec::new();
    let stats: Vec<f64> = marginal
        .iter()
        .enumerate()
        .map(|(j, r)| match r {
            Ok(w) => w.p_value,
            Err(e) => {
                excluded.push((j, e.to_string()));
                f64::NAN
            }
        })
        .collect();
    ScreeningOutcome {
        method: ScreeningMethod::UnivariateRank,
        selection: Selection::Ranking(order_by(&stats, true)),
        stage1_stats: stats,
        excluded,
    }
}

/// Ranks biomarkers by ascending marginal association p-value.
pub fn univariate_rank_screen(data: &TrialDataset) -> Result<ScreeningOutcome> {
    Ok(rank_screen_from(&marginal_panel(data)))
}

/// Ranks biomarkers by the magnitude of their cross-validated ridge coefficient.
pub fn ridge_rank_screen(
    data: &TrialDataset,
    config: &RidgeConfig,
) -> Result<(ScreeningOutcome, RidgeFit)> {
    let fit = cross_validate(data, config)?;
    let ranking = rank_biomarkers(&fit);
    let stats = fit
        .biomarker_coefs
        .iter()
        .zip(&fit.degenerate)
        .map(|(c, &d)| if d { f64::NAN } else { c.abs() })
        .collect();
    let excluded = fit
        .degenerate
        .iter()
        .enumerate()
        .filter(|(_, &d)| d)
        .map(|(j, _)| (j, Error::DegenerateBiomarker { index: j }.to_string()))
        .collect();
    Ok((
        ScreeningOutcome {
            method: ScreeningMethod::RidgeRank,
            selection: Selection::Ranking(ranking.order),
            stage1_stats: stats,
            excluded,
        },
        fit,
    ))
}

fn bonferroni_with(
    data: &TrialDataset,
    panel: &InteractionPanel,
    selected: &[usize],
    alpha: f64,
) -> StageTwoReport {
    let m_star = selected.len();
    let threshold = alpha / m_star.max(1) as f64;
    let mut is_selected = vec![false; data.m()];
    for &j in selected {
        is_selected[j] = true;
    }
    let rows = (0..data.m())
        .map(|j| {
            if !is_selected[j] {
                return ReportRow {
                    index: j,
                    name: data.names()[j].clone(),
                    rank: None,
                    wald: None,
                    p_value: None,
                    threshold: None,
                    rejected: false,
                    status: RowStatus::NotSelected,
                };
            }
            let mut row = panel.row(data, j);
            if row.status == RowStatus::Tested {
                row.threshold = Some(threshold);
            }
            row.decide()
        })
        .collect();
    let mut r = report(data, Procedure::UniThreshold.as_str(), alpha, rows);
    r.m_star = Some(m_star);
    r
}

/// Tests the biomarkers kept by a threshold screen at `alpha / m*`.
///
/// With `m* = 0` nothing is tested and nothing is rejected.
pub fn stage2_bonferroni(
    data: &TrialDataset,
    screening: &ScreeningOutcome,
    overall_alpha: f64,
) -> Result<StageTwoReport> {
    check_alpha("overall alpha", overall_alpha)?;
    let selected = screening.selected().ok_or_else(|| {
        Error::InvalidConfig("stage-2 Bonferroni needs a threshold screening outcome".into())
    })?;
    if let Some(&j) = selected.iter().find(|&&j| j >= data.m()) {
        return Err(Error::IndexOutOfRange { index: j, m: data.m() });
    }
    if selected.is_empty() {
        let rows = (0..data.m())
            .map(|j| ReportRow {
                index: j,
                name: data.names()[j].clone(),
                rank: None,
                wald: None,
                p_value: None,
                threshold: None,
                rejected: false,
                status: RowStatus::NotSelected,
            })
            .collect();
        let mut r = report(data, Procedure::UniThreshold.as_str(), overall_alpha, rows);
        r.m_star = Some(0);
        return Ok(r);
    }
    let panel = InteractionPanel::compute(data)?;
    Ok(bonferroni_with(data, &panel, selected, overall_alpha))
}

fn check_permutation(ranking: &[usize], m: usize) -> Result<()> {
    if ranking.len() != m {
        return Err(Error::InvalidRanking { m });
    }
    let mut seen = vec![false; m];
    for &j in ranking {
        if j >= m || seen[j] {
            return Err(Error::InvalidRanking { m });
        }
        seen[j] = true;
    }
    Ok(())
}

/// Applies the bucket thresholds of `scheme` along `ranking` to prepared rows.
fn weighted_rows(ranking: &[usize], mut rows: Vec<ReportRow>, scheme: &WeightScheme) -> Vec<ReportRow> {
    for (rank, &j) in ranking.iter().enumerate() {
        let row = &mut rows[j];
        row.rank = Some(rank + 1);
        if row.status == RowStatus::Tested {
            row.threshold = Some(scheme.threshold(rank));
        }
    }
    rows.into_iter().map(ReportRow::decide).collect()
}

/// Weighted stage-2 test of all `m` biomarkers given a ranking and p-values.
///
/// `ranking[r]` is the 0-based biomarker at rank `r`; `pvalues[j]` belongs to biomarker
/// `j`. A NaN p-value marks a biomarker that could not be tested.
pub fn weighted_hypothesis_test(
    ranking: &[usize],
    pvalues: &[f64],
    scheme: &WeightScheme,
) -> Result<StageTwoReport> {
    scheme.validate()?;
    check_permutation(ranking, pvalues.len())?;
    let rows = pvalues
        .iter()
        .enumerate()
        .map(|(j, &p)| {
            let ok = (0.0..=1.0).contains(&p);
            ReportRow {
                index: j,
                name: format!("X{}", j + 1),
                rank: None,
                wald: None,
                p_value: ok.then_some(p),
                threshold: None,
                rejected: false,
                status: if ok {
                    RowStatus::Tested
                } else {
                    RowStatus::Failed(format!("p-value {p} outside [0, 1]"))
                },
            }
        })
        .collect();
    Ok(StageTwoReport {
        method: "weighted".to_string(),
        overall_alpha: scheme.overall_alpha,
        m_star: None,
        rows: weighted_rows(ranking, rows, scheme),
        caveat: None,
    })
}

fn weighted_with(
    data: &TrialDataset,
    panel: &InteractionPanel,
    ranking: &[usize],
    scheme: &WeightScheme,
    method: Procedure,
) -> Result<StageTwoReport> {
    check_permutation(ranking, data.m())?;
    let rows = (0..data.m()).map(|j| panel.row(data, j)).collect();
    Ok(report(
        data,
        method.as_str(),
        scheme.overall_alpha,
        weighted_rows(ranking, rows, scheme),
    ))
}

/// Univariate rank screening followed by the weighted stage-2 test.
pub fn univariate_rank_procedure(data: &TrialDataset, scheme: &WeightScheme) -> Result<StageTwoReport> {
    scheme.validate()?;
    let panel = InteractionPanel::compute(data)?;
    let screen = rank_screen_from(&marginal_panel(data));
    weighted_with(data, &panel, screen.ranking().expect("ranking"), scheme, Procedure::UniRank)
}

/// Ridge rank screening followed by the weighted stage-2 test.
pub fn ridge_rank_procedure(
    data: &TrialDataset,
    ridge_config: &RidgeConfig,
    scheme: &WeightScheme,
) -> Result<StageTwoReport> {
    scheme.validate()?;
    let panel = InteractionPanel::compute(data)?;
    let (screen, _) = ridge_rank_screen(data, ridge_config)?;
    weighted_with(data, &panel, screen.ranking().expect("ranking"), scheme, Procedure::RidgeRank)
}

/// Settings shared by all procedures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcedureConfig {
    pub overall_alpha: f64,
    pub alpha1: f64,
    pub bucket_size: usize,
    pub ridge: RidgeConfig,
}

impl Default for ProcedureConfig {
    fn default() -> Self {
        Self {
            overall_alpha: 0.05,
            alpha1: 0.05,
            bucket_size: 5,
            ridge: RidgeConfig::default(),
        }
    }
}

impl ProcedureConfig {
    pub fn scheme(&self) -> WeightScheme {
        WeightScheme {
            bucket_size: self.bucket_size,
            overall_alpha: self.overall_alpha,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha("overall alpha", self.overall_alpha)?;
        check_alpha("alpha1", self.alpha1)?;
        self.scheme().validate()?;
        self.ridge.validate()
    }
}

/// Runs one procedure end to end.
pub fn run_procedure(
    data: &TrialDataset,
    procedure: Procedure,
    config: &ProcedureConfig,
) -> Result<StageTwoReport> {
    run_procedures(data, &[procedure], config)
        .pop()
        .expect("one report per procedure")
}

/// Runs several procedures on one dataset, sharing the stage-2 tests and the marginal
/// screen between them. Reports come back in the order of `procedures`.
pub fn run_procedures(
    data: &TrialDataset,
    procedures: &[Procedure],
    config: &ProcedureConfig,
) -> Vec<Result<StageTwoReport>> {
    if let Err(e) = config.validate() {
        return procedures.iter().map(|_| Err(e.clone())).collect();
    }
    let panel = match InteractionPanel::compute(data) {
        Ok(p) => p,
        Err(e) => return procedures.iter().map(|_| Err(e.clone())).collect(),
    };
    let needs_marginal = procedures
        .iter()
        .any(|p| matches!(p, Procedure::UniThreshold | Procedure::UniRank));
    let marginal = if needs_marginal {
        marginal_panel(data)
    } else {
        Vec::new()
    };
    let scheme = config.scheme();
    procedures
        .iter()
        .map(|&p| match p {
            Procedure::SingleStep => Ok(single_step_with(data, &panel, config.overall_alpha)),
            Procedure::UniThreshold => {
                let screen = threshold_screen_from(&marginal, config.alpha1);
                Ok(bonferroni_with(
                    data,
                    &panel,
                    screen.selected().expect("subset"),
                    config.overall_alpha,
                ))
            }
            Procedure::UniRank => {
                let screen = rank_screen_from(&marginal);
                weighted_with(data, &panel, screen.ranking().expect("ranking"), &scheme, p)
            }
            Procedure::RidgeRank => {
                let (screen, _) = ridge_rank_screen(data, &config.ridge)?;
                weighted_with(data, &panel, screen.ranking().expect("ranking"), &scheme, p)
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdjustMethod {
    Bonferroni,
    Sidak,
    Holm,
    Hochberg,
}

impl std::str::FromStr for AdjustMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bonferroni" => Ok(AdjustMethod::Bonferroni),
            "sidak" => Ok(AdjustMethod::Sidak),
            "holm" => Ok(AdjustMethod::Holm),
            "hochberg" => Ok(AdjustMethod::Hochberg),
            other => Err(Error::InvalidConfig(format!(
                "unknown adjustment {other:?}; expected bonferroni, sidak, holm or hochberg"
            ))),
        }
    }
}

impl std::fmt::Display for AdjustMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AdjustMethod::Bonferroni => "bonferroni",
            AdjustMethod::Sidak => "sidak",
            AdjustMethod::Holm => "holm",
            AdjustMethod::Hochberg => "hochberg",
        })
    }
}

/// Per-hypothesis critical values and decisions from [`adjust`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adjustment {
    pub method: AdjustMethod,
    pub alpha: f64,
    /// Critical value attached to each hypothesis (by its sorted position for the
    /// step-wise methods).
    pub thresholds: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// `1 - (1 - alpha)^(1/m)`, computed without cancellation.
pub fn sidak_threshold(alpha: f64, m: usize) -> f64 {
    -((1.0 - alpha).ln() / m as f64).exp_m1()
}

/// Classical FWER adjustments of a p-value vector.
///
/// Holm steps down through the sorted p-values with critical values
/// `alpha / (m - r)` (0-based sorted position `r`) and stops at the first
/// non-rejection; Hochberg steps up with the same critical values and rejects
/// everything at or below the largest passing position. Ties sort by index.
pub fn adjust(pvalues: &[f64], method: AdjustMethod, alpha: f64) -> Result<Adjustment> {
    check_alpha("alpha", alpha)?;
    if let Some(p) = pvalues.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidData(format!("p-value {p} outside [0, 1]")));
    }
    let m = pvalues.len();
    let mut thresholds = vec![0.0; m];
    let mut rejected = vec![false; m];
    match method {
        AdjustMethod::Bonferroni | AdjustMethod::Sidak => {
            let t = if method == AdjustMethod::Bonferroni {
                alpha / m.max(1) as f64
            } else {
                sidak_threshold(alpha, m.max(1))
            };
            for j in 0..m {
                thresholds[j] = t;
                rejected[j] = pvalues[j] < t;
            }
        }
        AdjustMethod::Holm | AdjustMethod::Hochberg => {
            let order = order_by(pvalues, true);
            for (r, &j) in order.iter().enumerate() {
                thresholds[j] = alpha / (m - r) as f64;
            }
            let passes = |r: usize| pvalues[order[r]] < thresholds[order[r]];
            let cutoff = if method == AdjustMethod::Holm {
                (0..m).take_while(|&r| passes(r)).count()
            } else {
                (0..m).rev().find(|&r| passes(r)).map_or(0, |r| r + 1)
            };
            for &j in &order[..cutoff] {
                rejected[j] = true;
            }
        }
    }
    Ok(Adjustment {
        method,
        alpha,
        thresholds,
        rejected,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Family;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn toy(seed: u64, n: usize, m: usize) -> TrialDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let t: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let y = (0..n)
            .map(|i| 0.5 * t[i] + 2.0 * x[(i, 0)] + x[(i, 0)] * t[i] + rng.sample::<f64, _>(StandardNormal))
            .collect();
        let names = (1..=m).map(|j| format!("X{j}")).collect();
        TrialDataset::new(y, t, x, names, Family::Linear).unwrap()
    }

    #[test]
    fn bucket_thresholds_match_hand_values() {
        let s = WeightScheme::new(5, 0.05).unwrap();
        let t = s.thresholds(40);
        for r in 0..5 {
            assert_eq!(t[r], 0.005);
        }
        for r in 5..15 {
            assert_eq!(t[r], 1.25e-3);
        }
        for r in 15..35 {
            assert_eq!(t[r], 3.125e-4);
        }
        assert_eq!(t[35], 0.05 / 16.0 / 40.0);
        let small = s.thresholds(3);
        assert!(small.iter().all(|&v| v == 0.005));
    }

    #[test]
    fn threshold_mass_below_alpha() {
        for b in 1..8 {
            let s = WeightScheme::new(b, 0.05).unwrap();
            for m in [1, 2, 7, 30, 200, 1000, 5000] {
                let mass: f64 = s.thresholds(m).iter().sum();
                assert!(mass < 0.05, "B={b} m={m} mass={mass}");
            }
        }
        // the full geometric series approaches alpha
        let s = WeightScheme::new(5, 0.05).unwrap();
        let full: f64 = (0..30).map(|k| s.bucket_threshold(k) * 5.0 * 2f64.powi(k as i32)).sum();
        assert!((full - 0.05).abs() < 1e-9);
    }

    #[test]
    fn invalid_ranking_rejected() {
        let s = WeightScheme::default();
        assert_eq!(
            weighted_hypothesis_test(&[0, 0, 1], &[0.1, 0.2, 0.3], &s),
            Err(Error::InvalidRanking { m: 3 })
        );
        assert!(weighted_hypothesis_test(&[0, 1], &[0.1, 0.2, 0.3], &s).is_err());
    }

    #[test]
    fn weighted_test_decisions() {
        let s = WeightScheme::new(1, 0.05).unwrap();
        // rank thresholds: 0.025, 0.00625, 0.00625
        let r = weighted_hypothesis_test(&[2, 0, 1], &[0.001, 0.01, 0.02], &s).unwrap();
        assert_eq!(r.rows[2].threshold, Some(0.025));
        assert_eq!(r.rows[2].rank, Some(1));
        assert!(r.rows[2].rejected);
        assert!(r.rows[0].rejected);
        assert!(!r.rows[1].rejected);
    }

    #[test]
    fn single_step_thresholds() {
        let d = toy(1, 80, 3);
        let r = single_step(&d, 0.05).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows.iter().all(|row| row.threshold == Some(0.05 / 3.0)));
        let d1 = toy(2, 50, 1);
        let r1 = single_step(&d1, 0.05).unwrap();
        assert_eq!(r1.rows[0].threshold, Some(0.05));
    }

    #[test]
    fn single_step_reports_degenerate_rows() {
        let d = toy(3, 60, 3);
        let mut x = d.biomarkers().clone();
        x.column_mut(1).fill(2.0);
        let d2 = TrialDataset::new(d.outcome().to_vec(), d.treatment().to_vec(), x, d.names().to_vec(), Family::Linear).unwrap();
        let r = single_step(&d2, 0.05).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(matches!(r.rows[1].status, RowStatus::Failed(_)));
        assert!(!r.rows[1].rejected);
        let screen = univariate_threshold_screen(&d2, 1.0 - 1e-12).unwrap();
        assert_eq!(screen.selected().unwrap(), &[0, 2]);
        assert_eq!(screen.excluded.len(), 1);
        let uni = univariate_rank_procedure(&d2, &WeightScheme::default()).unwrap();
        assert_eq!(uni.rows[1].rank, Some(3));
    }

    #[test]
    fn perfect_marginal_is_selected_and_ranked_first() {
        let d = toy(4, 100, 4);
        let y = d.biomarker(2).to_vec();
        let d2 = d.with_outcome(y).unwrap();
        let screen = univariate_threshold_screen(&d2, 0.05).unwrap();
        assert!(screen.selected().unwrap().contains(&2));
        let rank = univariate_rank_screen(&d2).unwrap();
        assert_eq!(rank.ranking().unwrap()[0], 2);
    }

    #[test]
    fn bonferroni_on_selected() {
        let d = toy(5, 120, 40);
        let screening = ScreeningOutcome {
            method: ScreeningMethod::UnivariateThreshold,
            selection: Selection::Subset((0..37).collect()),
            stage1_stats: vec![0.0; 40],
            excluded: vec![],
        };
        let r = stage2_bonferroni(&d, &screening, 0.05).unwrap();
        assert_eq!(r.m_star, Some(37));
        assert!((r.rows[0].threshold.unwrap() - 1.3514e-3).abs() < 1e-7);
        assert_eq!(r.rows[39].status, RowStatus::NotSelected);
        let empty = ScreeningOutcome {
            selection: Selection::Subset(vec![]),
            ..screening.clone()
        };
        let r0 = stage2_bonferroni(&d, &empty, 0.05).unwrap();
        assert_eq!(r0.n_tested(), 0);
        assert!(r0.rejected().is_empty());
        let ranked = ScreeningOutcome {
            selection: Selection::Ranking((0..40).collect()),
            ..screening
        };
        assert!(stage2_bonferroni(&d, &ranked, 0.05).is_err());
    }

    #[test]
    fn procedures_are_deterministic() {
        let d = toy(6, 150, 12);
        let cfg = ProcedureConfig::default();
        let a = run_procedures(&d, &Procedure::ALL, &cfg);
        let b = run_procedures(&d, &Procedure::ALL, &cfg);
        assert_eq!(a, b);
        let uni = univariate_rank_procedure(&d, &cfg.scheme()).unwrap();
        assert_eq!(&uni, a[2].as_ref().unwrap());
        let ridge = ridge_rank_procedure(&d, &cfg.ridge, &cfg.scheme()).unwrap();
        assert_eq!(&ridge, a[3].as_ref().unwrap());
    }

    #[test]
    fn ridge_rank_single_biomarker() {
        let d = toy(7, 60, 1);
        let r = ridge_rank_procedure(&d, &RidgeConfig::default(), &WeightScheme::default()).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].rank, Some(1));
        assert_eq!(r.rows[0].threshold, Some(0.005));
    }

    #[test]
    fn adjust_closed_forms() {
        let p = vec![0.5; 1000];
        let a = adjust(&p, AdjustMethod::Sidak, 0.05).unwrap();
        assert!((a.thresholds[0] - 5.1292e-5).abs() < 1e-8);
        assert!((a.thresholds[0] - (1.0 - 0.95f64.powf(0.001))).abs() < 1e-15);
        let h = adjust(&[0.001, 0.04], AdjustMethod::Holm, 0.05).unwrap();
        assert_eq!(h.rejected, vec![true, true]);
        assert_eq!(h.thresholds, vec![0.025, 0.05]);
        let h2 = adjust(&[0.04, 0.03], AdjustMethod::Holm, 0.05).unwrap();
        assert_eq!(h2.rejected, vec![false, false]);
        let g2 = adjust(&[0.04, 0.03], AdjustMethod::Hochberg, 0.05).unwrap();
        assert_eq!(g2.rejected, vec![true, true]);
        assert!(adjust(&[1.5], AdjustMethod::Holm, 0.05).is_err());
    }

    proptest! {
        #[test]
        fn lowering_a_pvalue_never_unrejects(
            p in prop::collection::vec(0.0f64..0.1, 1..30),
            idx in 0usize..30,
            factor in 0.0f64..1.0,
        ) {
            let idx = idx % p.len();
            for method in [AdjustMethod::Holm, AdjustMethod::Hochberg] {
                let before = adjust(&p, method, 0.05).unwrap();
                let mut q = p.clone();
                q[idx] *= factor;
                let after = adjust(&q, method, 0.05).unwrap();
                for j in 0..p.len() {
                    prop_assert!(!before.rejected[j] || after.rejected[j]);
                }
            }
        }

        #[test]
        fn bucket_thresholds_monotone(b in 1usize..20, m in 1usize..3000) {
            let s = WeightScheme::new(b, 0.05).unwrap();
            let t = s.thresholds(m);
            for r in 1..m {
                let (k0, k1) = (s.bucket_of(r - 1), s.bucket_of(r));
                if k0 == k1 {
                    prop_assert_eq!(t[r - 1], t[r]);
                } else {
                    prop_assert_eq!(k1, k0 + 1);
                    prop_assert!(t[r] < t[r - 1]);
                }
            }
            prop_assert!(t.iter().sum::<f64>() <= 0.05);
        }
    }
}
