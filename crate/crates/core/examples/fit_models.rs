//! Per-biomarker interaction and marginal tests on a simulated trial.
//!
//! ```text
//! cargo run --example fit_models
//! ```

use twostage::model::{fit_interaction_model, interaction_test, marginal_test};
use twostage::simulate::{generate, Effect, ScenarioConfig};

fn main() -> twostage::Result<()> {
    let scenario = ScenarioConfig {
        m: 10,
        cluster_size: 5,
        effects: vec![
            Effect { index: 0, main: 0.5, interaction: 1.0 },
            Effect { index: 5, main: 1.5, interaction: 0.0 },
        ],
        ..ScenarioConfig::paper(800, 0.6)
    }
    .with_seed(7);
    let data = generate(&scenario)?;

    let fit = fit_interaction_model(&data, 0)?;
    println!("full model for {}:", data.names()[0]);
    for (k, name) in fit.coef_names.iter().enumerate() {
        let w = fit.wald(k);
        println!("  {name:<20} {:>9.4} (se {:.4}, p {:.3e})", w.estimate, w.std_error, w.p_value);
    }

    println!("\n{:<5} {:>12} {:>12} {:>12}", "name", "interaction", "p", "marginal p");
    for j in 0..data.m() {
        let inter = interaction_test(&data, j)?;
        let marg = marginal_test(&data, j)?;
        println!(
            "{:<5} {:>12.4} {:>12.3e} {:>12.3e}",
            data.names()[j],
            inter.estimate,
            inter.p_value,
            marg.p_value
        );
    }
    Ok(())
}
