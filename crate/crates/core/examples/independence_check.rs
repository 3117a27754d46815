//! Correlation between the stage-1 ridge statistic and the stage-2 interaction
//! statistic, on one dataset and across simulated replicates, with a negative control
//! in which treatment depends on the biomarkers.
//!
//! ```text
//! cargo run --release --example independence_check
//! ```

use twostage::diagnostics::{independence_across_biomarkers, independence_across_replicates};
use twostage::ridge::{RidgeConfig, RidgeSolver};
use twostage::simulate::{fixtures, Effect, ScenarioConfig, TreatmentAssignment};
use twostage::Family;

fn main() -> twostage::Result<()> {
    let ridge = RidgeConfig {
        solver: RidgeSolver::Spectral,
        ..RidgeConfig::default()
    };

    let start = fixtures::start_like(0);
    let rep = independence_across_biomarkers(&start, &ridge)?;
    println!(
        "START-shaped data, across {} biomarkers: r = {:.3}, 95% CI ({:.3}, {:.3}), p = {:.3}",
        rep.n_pairs, rep.estimate, rep.ci95.0, rep.ci95.1, rep.p_value
    );
    let stopah = fixtures::stopah_like(0);
    let logistic = RidgeConfig { family: Family::Logistic, ..ridge.clone() };
    let rep = independence_across_biomarkers(&stopah, &logistic)?;
    println!(
        "STOPAH-shaped data, across {} biomarkers: r = {:.3}, 95% CI ({:.3}, {:.3}), p = {:.3}",
        rep.n_pairs, rep.estimate, rep.ci95.0, rep.ci95.1, rep.p_value
    );

    let scenario = ScenarioConfig {
        m: 40,
        cluster_size: 20,
        effects: vec![
            Effect { index: 0, main: 0.5, interaction: 1.0 },
            Effect { index: 20, main: 1.5, interaction: 0.0 },
        ],
        ..ScenarioConfig::paper(500, 0.6)
    };
    let randomized = independence_across_replicates(&scenario, 1, 500, &ridge)?;
    println!(
        "X2 over 500 randomized replicates: r = {:.3}, 95% CI ({:.3}, {:.3})",
        randomized.estimate, randomized.ci95.0, randomized.ci95.1
    );
    let confounded = ScenarioConfig {
        assignment: TreatmentAssignment::ProductSign { a: 0, b: 1 },
        ..scenario
    };
    let control = independence_across_replicates(&confounded, 1, 500, &ridge)?;
    println!(
        "X2 with T = 1{{X1 * X2 > 0}}: r = {:.3}, 95% CI ({:.3}, {:.3})",
        control.estimate, control.ci95.0, control.ci95.1
    );
    Ok(())
}
