//! Clustered trial simulator and Monte Carlo power studies.
//!
//! Biomarkers come in equal-size clusters. Within cluster `c`,
//! `X_j = sqrt(rho) * Z_c + sqrt(1 - rho) * E_j` with independent standard normal
//! `Z_c` and `E_j`, so every biomarker is standard normal, pairs inside a cluster have
//! correlation `rho`, and clusters are independent. The outcome is
//!
//! ```text
//! Y = b0 + bT * T + sum_j (bXj * X_j + bXTj * X_j * T) + eps,   eps ~ N(0, noise_sd^2)
//! ```
//!
//! with `T ~ Bernoulli(treatment_prob)` drawn independently of the biomarkers.
//!
//! Power is measured by cluster discoveries: a replicate discovers an interacting
//! cluster when any of its biomarkers is rejected. A family-wise error is, by default,
//! a rejection inside a cluster with no interacting biomarker.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, TrialDataset};
use crate::ridge::RidgeSolver;
use crate::two_stage::{run_procedures, Procedure, ProcedureConfig, StageTwoReport};

/// Main and interaction effect of one biomarker (0-based index).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Effect {
    pub index: usize,
    #[serde(default)]
    pub main: f64,
    #[serde(default)]
    pub interaction: f64,
}

/// How the treatment indicator is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TreatmentAssignment {
    /// Independent `Bernoulli(treatment_prob)`, as in a randomized trial.
    #[default]
    Randomized,
    /// `T = 1{X_a * X_b > 0}`: treatment depends on the biomarkers. Breaks
    /// randomization; used as a negative control for the independence diagnostics.
    ProductSign { a: usize, b: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub n: usize,
    pub m: usize,
    pub cluster_size: usize,
    pub rho: f64,
    pub effects: Vec<Effect>,
    pub treatment_effect: f64,
    pub intercept: f64,
    pub noise_sd: f64,
    pub treatment_prob: f64,
    pub assignment: TreatmentAssignment,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self::paper(1500, 0.6)
    }
}

impl ScenarioConfig {
    /// The published simulation design: 1000 biomarkers in clusters of 20, `X1` with
    /// main effect 0.5 and interaction 1, `X21, X41, X61, X81` with main effect 1.5,
    /// treatment effect 0.5, noise SD 5.
    pub fn paper(n: usize, rho: f64) -> Self {
        Self {
            n,
            m: 1000,
            cluster_size: 20,
            rho,
            effects: vec![
                Effect { index: 0, main: 0.5, interaction: 1.0 },
                Effect { index: 20, main: 1.5, interaction: 0.0 },
                Effect { index: 40, main: 1.5, interaction: 0.0 },
                Effect { index: 60, main: 1.5, interaction: 0.0 },
                Effect { index: 80, main: 1.5, interaction: 0.0 },
            ],
            treatment_effect: 0.5,
            intercept: 0.0,
            noise_sd: 5.0,
            treatment_prob: 0.5,
            assignment: TreatmentAssignment::Randomized,
            seed: 0,
        }
    }

    /// Same effects as [`ScenarioConfig::paper`] with 200 biomarkers (10 clusters).
    pub fn desk(n: usize, rho: f64) -> Self {
        Self {
            m: 200,
            ..Self::paper(n, rho)
        }
    }

    /// Removes every interaction effect, keeping main effects.
    pub fn without_interactions(mut self) -> Self {
        for e in &mut self.effects {
            e.interaction = 0.0;
        }
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 2 {
            return bad(format!("scenario.n must be at least 2, got {}", self.n));
        }
        if self.m == 0 || self.cluster_size == 0 || self.m % self.cluster_size != 0 {
            return bad(format!(
                "scenario.m ({}) must be a positive multiple of scenario.cluster_size ({})",
                self.m, self.cluster_size
            ));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("scenario.rho must lie in [0, 1), got {}", self.rho));
        }
        if !(self.noise_sd > 0.0) {
            return bad(format!("scenario.noise_sd must be positive, got {}", self.noise_sd));
        }
        if !(self.treatment_prob > 0.0 && self.treatment_prob < 1.0) {
            return bad(format!(
                "scenario.treatment_prob must lie in (0, 1), got {}",
                self.treatment_prob
            ));
        }
        let mut seen = vec![false; self.m];
        for e in &self.effects {
            if e.index >= self.m {
                return bad(format!("scenario.effects: index {} >= m = {}", e.index, self.m));
            }
            if seen[e.index] {
                return bad(format!("scenario.effects: duplicate index {}", e.index));
            }
            seen[e.index] = true;
        }
        if let TreatmentAssignment::ProductSign { a, b } = self.assignment {
            if a >= self.m || b >= self.m {
                return bad("scenario.assignment indices out of range".into());
            }
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        self.m / self.cluster_size
    }

    pub fn cluster_of(&self, j: usize) -> usize {
        j / self.cluster_size
    }

    pub fn interaction_of(&self, j: usize) -> f64 {
        self.effects
            .iter()
            .find(|e| e.index == j)
            .map_or(0.0, |e| e.interaction)
    }

    /// Flags the clusters that contain at least one interacting biomarker.
    pub fn interacting_clusters(&self) -> Vec<bool> {
        let mut flags = vec![false; self.n_clusters()];
        for e in &self.effects {
            if e.interaction != 0.0 {
                flags[self.cluster_of(e.index)] = true;
            }
        }
        flags
    }
}

/// Draws one dataset; identical configs (including `seed`) give identical data.
pub fn generate(config: &ScenarioConfig) -> Result<TrialDataset> {
    config.validate()?;
    let (n, m) = (config.n, config.m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let shared = config.rho.sqrt();
    let own = (1.0 - config.rho).sqrt();
    let mut x = DMatrix::zeros(n, m);
    let mut z = vec![0.0; n];
    for c in 0..config.n_clusters() {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for j in c * config.cluster_size..(c + 1) * config.cluster_size {
            for (i, zi) in z.iter().enumerate() {
                let e: f64 = rng.sample(StandardNormal);
                x[(i, j)] = shared * zi + own * e;
            }
        }
    }
    let t: Vec<f64> = match config.assignment {
        TreatmentAssignment::Randomized => (0..n)
            .map(|_| if rng.random::<f64>() < config.treatment_prob { 1.0 } else { 0.0 })
            .collect(),
        TreatmentAssignment::ProductSign { a, b } => (0..n)
            .map(|i| if x[(i, a)] * x[(i, b)] > 0.0 { 1.0 } else { 0.0 })
            .collect(),
    };
    let mut y: Vec<f64> = t
        .iter()
        .map(|ti| config.intercept + config.treatment_effect * ti)
        .collect();
    for e in &config.effects {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += x[(i, e.index)] * (e.main + e.interaction * t[i]);
        }
    }
    for yi in y.iter_mut() {
        *yi += config.noise_sd * rng.sample::<f64, _>(StandardNormal);
    }
    let names = (1..=m).map(|j| format!("X{j}")).collect();
    TrialDataset::new(y, t, x, names, Family::Linear)
}

/// What counts as a family-wise error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FwerGranularity {
    /// Any rejection inside a cluster without interacting biomarkers.
    #[default]
    Cluster,
    /// Any rejection of a biomarker whose own interaction effect is zero.
    Biomarker,
}

/// Discoveries and errors of one replicate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ReplicateOutcome {
    /// Interacting clusters with at least one rejection.
    pub discovered: usize,
    pub interacting: usize,
    pub family_wise_error: bool,
}

pub fn replicate_outcome(
    report: &StageTwoReport,
    config: &ScenarioConfig,
    granularity: FwerGranularity,
) -> ReplicateOutcome {
    let interacting = config.interacting_clusters();
    let mut hit = vec![false; interacting.len()];
    let mut error = false;
    for j in report.rejected() {
        let c = config.cluster_of(j);
        if interacting[c] {
            hit[c] = true;
        }
        error |= match granularity {
            FwerGranularity::Cluster => !interacting[c],
            FwerGranularity::Biomarker => config.interaction_of(j) == 0.0,
        };
    }
    ReplicateOutcome {
        discovered: hit.iter().filter(|&&h| h).count(),
        interacting: interacting.iter().filter(|&&f| f).count(),
        family_wise_error: error,
    }
}

/// Share of replicates (per interacting cluster) with at least one rejection in that
/// cluster.
pub fn cluster_discovery_power(reports: &[StageTwoReport], config: &ScenarioConfig) -> Result<f64> {
    if !config.interacting_clusters().contains(&true) {
        return Err(Error::NoInteractionCluster);
    }
    if reports.is_empty() {
        return Err(Error::InvalidData("no replicate reports".into()));
    }
    let (hits, total) = reports
        .iter()
        .map(|r| replicate_outcome(r, config, FwerGranularity::Cluster))
        .fold((0, 0), |(h, t), o| (h + o.discovered, t + o.interacting));
    Ok(hits as f64 / total as f64)
}

/// Share of replicates with at least one false rejection.
pub fn fwer_estimate(
    reports: &[StageTwoReport],
    config: &ScenarioConfig,
    granularity: FwerGranularity,
) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::InvalidData("no replicate reports".into()));
    }
    let errors = reports
        .iter()
        .filter(|r| replicate_outcome(r, config, granularity).family_wise_error)
        .count();
    Ok(errors as f64 / reports.len() as f64)
}

/// Binomial Monte Carlo standard error `sqrt(p (1 - p) / reps)`.
pub fn mc_se(p: f64, reps: usize) -> f64 {
    (p * (1.0 - p) / reps as f64).sqrt()
}

/// One point of a parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioPoint {
    pub label: String,
    /// Value of the swept parameter.
    pub value: f64,
    pub config: ScenarioConfig,
}

/// A named parameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub name: String,
    pub parameter: String,
    pub points: Vec<ScenarioPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// 200 biomarkers in 10 clusters of 20.
    #[default]
    Desk,
    /// 1000 biomarkers in 50 clusters of 20.
    Paper,
}

impl std::str::FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::InvalidConfig(format!(
                "scale must be desk or paper, got {other:?}"
            ))),
        }
    }
}

pub const PRESETS: [&str; 5] = ["fig1a", "fig1b", "fig1c", "fig1d", "global_null"];

fn base(scale: Scale, n: usize, rho: f64) -> ScenarioConfig {
    match scale {
        Scale::Desk => ScenarioConfig::desk(n, rho),
        Scale::Paper => ScenarioConfig::paper(n, rho),
    }
}

fn sweep_over<F>(name: &str, parameter: &str, values: &[f64], mut make: F) -> Sweep
where
    F: FnMut(f64) -> ScenarioConfig,
{
    Sweep {
        name: name.to_string(),
        parameter: parameter.to_string(),
        points: values
            .iter()
            .map(|&v| ScenarioPoint {
                label: format!("{parameter}={v}"),
                value: v,
                config: make(v),
            })
            .collect(),
    }
}

/// Named scenario sweeps.
///
/// * `fig1a`: n = 500..3000 step 500, rho = 0.6
/// * `fig1b`: n = 500..3000 step 500, rho = 0
/// * `fig1c`: main effect of `X1` from -2 to 2 step 0.5, n = 1500, rho = 0
/// * `fig1d`: noise SD 1..15 step 2, n = 1500, rho = 0.6
/// * `global_null`: rho in {0, 0.6}, n = 500, no interaction effects
pub fn preset(name: &str, scale: Scale) -> Result<Sweep> {
    let ns = [500.0, 1000.0, 1500.0, 2000.0, 2500.0, 3000.0];
    Ok(match name {
        "fig1a" => sweep_over(name, "n", &ns, |v| base(scale, v as usize, 0.6)),
        "fig1b" => sweep_over(name, "n", &ns, |v| base(scale, v as usize, 0.0)),
        "fig1c" => {
            let betas: Vec<f64> = (0..9).map(|k| -2.0 + 0.5 * k as f64).collect();
            sweep_over(name, "beta_x1", &betas, |v| {
                let mut c = base(scale, 1500, 0.0);
                c.effects[0].main = v;
                c
            })
        }
        "fig1d" => {
            let sds: Vec<f64> = (0..8).map(|k| 1.0 + 2.0 * k as f64).collect();
            sweep_over(name, "noise_sd", &sds, |v| ScenarioConfig {
                noise_sd: v,
                ..base(scale, 1500, 0.6)
            })
        }
        "global_null" => sweep_over(name, "rho", &[0.0, 0.6], |v| {
            base(scale, 500, v).without_interactions()
        }),
        other => return Err(Error::PresetNotFound(other.to_string())),
    })
}

/// Per-replicate seed for the cross-validation folds, decorrelated from the data seed.
pub fn derived_cv_seed(data_seed: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = data_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerRow {
    pub point: String,
    pub value: f64,
    pub method: Procedure,
    /// `None` when the scenario has no interacting biomarker.
    pub power: Option<f64>,
    pub power_se: Option<f64>,
    pub fwer: f64,
    pub fwer_se: f64,
    /// Replicates that completed.
    pub replicates: usize,
    /// Replicates whose procedure failed; excluded from the estimates.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerTable {
    pub rows: Vec<PowerRow>,
}

impl PowerTable {
    pub fn get(&self, point: &str, method: Procedure) -> Option<&PowerRow> {
        self.rows
            .iter()
            .find(|r| r.point == point && r.method == method)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub procedure: ProcedureConfig,
    pub granularity: FwerGranularity,
}

impl Default for StudyOptions {
    fn default() -> Self {
        let mut procedure = ProcedureConfig::default();
        procedure.ridge.solver = RidgeSolver::Spectral;
        Self {
            procedure,
            granularity: FwerGranularity::Cluster,
        }
    }
}

/// Runs every method on `replicates` datasets per scenario point.
///
/// Replicate `r` is generated with seed `base_seed + r` at every point, and its
/// cross-validation folds use [`derived_cv_seed`] of that seed, so all methods see the
/// same data. Failed replicates are counted, not fatal.
pub fn run_study(
    grid: &[ScenarioPoint],
    methods: &[Procedure],
    replicates: usize,
    base_seed: u64,
    options: &StudyOptions,
) -> Result<PowerTable> {
    if grid.is_empty() || methods.is_empty() {
        return Err(Error::InvalidConfig(
            "a study needs at least one scenario point and one method".into(),
        ));
    }
    if replicates == 0 {
        return Err(Error::InvalidConfig("replicates must be positive".into()));
    }
    options.procedure.validate()?;
    for point in grid {
        point.config.validate()?;
    }

    let mut rows = Vec::with_capacity(grid.len() * methods.len());
    for point in grid {
        let outcomes: Vec<Vec<Option<ReplicateOutcome>>> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let seed = base_seed.wrapping_add(r as u64);
                let config = point.config.clone().with_seed(seed);
                let Ok(data) = generate(&config) else {
                    return vec![None; methods.len()];
                };
                let mut proc_cfg = options.procedure.clone();
                proc_cfg.ridge.cv_seed = derived_cv_seed(seed);
                run_procedures(&data, methods, &proc_cfg)
                    .into_iter()
                    .map(|rep| {
                        rep.ok()
                            .map(|rep| replicate_outcome(&rep, &config, options.granularity))
                    })
                    .collect()
            })
            .collect();

        let has_interaction = point.config.interacting_clusters().contains(&true);
        for (k, &method) in methods.iter().enumerate() {
            let ok: Vec<ReplicateOutcome> = outcomes.iter().filter_map(|o| o[k]).collect();
            let done = ok.len();
            let failures = replicates - done;
            let (power, power_se) = if has_interaction && done > 0 {
                let hits: usize = ok.iter().map(|o| o.discovered).sum();
                let total: usize = ok.iter().map(|o| o.interacting).sum();
                let p = hits as f64 / total as f64;
                (Some(p), Some(mc_se(p, done)))
            } else {
                (None, None)
            };
            let (fwer, fwer_se) = if done > 0 {
                let f = ok.iter().filter(|o| o.family_wise_error).count() as f64 / done as f64;
                (f, mc_se(f, done))
            } else {
                (f64::NAN, f64::NAN)
            };
            rows.push(PowerRow {
                point: point.label.clone(),
                value: point.value,
                method,
                power,
                power_se,
                fwer,
                fwer_se,
                replicates: done,
                failures,
            });
        }
    }
    Ok(PowerTable { rows })
}

/// Synthetic stand-ins for the two trial datasets used to illustrate the method.
/// Both are randomized with no interaction effects.
pub mod fixtures {
    use super::*;

    fn cluster_panel(rng: &mut ChaCha8Rng, n: usize, clusters: &[(usize, f64)]) -> DMatrix<f64> {
        let m: usize = clusters.iter().map(|c| c.0).sum();
        let mut x = DMatrix::zeros(n, m);
        let mut col = 0;
        for &(size, rho) in clusters {
            let z: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for _ in 0..size {
                for i in 0..n {
                    let e: f64 = rng.sample(StandardNormal);
                    x[(i, col)] = rho.sqrt() * z[i] + (1.0 - rho).sqrt() * e;
                }
                col += 1;
            }
        }
        x
    }

    fn names(prefix: &str, m: usize) -> Vec<String> {
        (1..=m).map(|j| format!("{prefix}{j:02}")).collect()
    }

    /// 684 participants, 75 weakly correlated covariates (clusters of 5 at rho = 0.1),
    /// continuous outcome driven by 12 covariates with distinct effect sizes.
    pub fn start_like(seed: u64) -> TrialDataset {
        let n = 684;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = cluster_panel(&mut rng, n, &[(5, 0.1); 15]);
        let t: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        // spread the signals over different clusters
        let signal: Vec<(usize, f64)> = (0..12).map(|k| (k * 6, 1.2 - 0.08 * k as f64)).collect();
        let y = (0..n)
            .map(|i| {
                let s: f64 = signal.iter().map(|&(j, b)| b * x[(i, j)]).sum();
                10.0 + 0.3 * t[i] + s + 3.0 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        TrialDataset::new(y, t, x, names("cov", 75), Family::Linear).expect("valid fixture")
    }

    /// 1068 patients, 40 strongly correlated biomarkers (five clusters of 8 at
    /// rho = 0.85), binary outcome. One member of each cluster drives the outcome.
    pub fn stopah_like(seed: u64) -> TrialDataset {
        let n = 1068;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = cluster_panel(&mut rng, n, &[(8, 0.85); 5]);
        let t: Vec<f64> = (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        let signal = [(0, 0.9), (8, -0.7), (16, 0.6), (24, 0.5), (32, -0.45)];
        let y = (0..n)
            .map(|i| {
                let eta: f64 = -1.2 + 0.1 * t[i]
                    + signal.iter().map(|&(j, b)| b * x[(i, j)]).sum::<f64>();
                let p = 1.0 / (1.0 + (-eta).exp());
                if rng.random::<f64>() < p { 1.0 } else { 0.0 }
            })
            .collect();
        TrialDataset::new(y, t, x, names("bm", 40), Family::Logistic).expect("valid fixture")
    }
}
