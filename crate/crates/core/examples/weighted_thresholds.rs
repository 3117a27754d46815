//! Stage-2 significance levels: the bucketed weighting over a ranking and the
//! classical multiplicity rules on a list of p-values.
//!
//! ```text
//! cargo run --example weighted_thresholds
//! ```

use twostage::two_stage::{adjust, sidak_threshold, AdjustMethod};
use twostage::WeightScheme;

fn main() -> twostage::Result<()> {
    let scheme = WeightScheme::new(5, 0.05)?;
    let thresholds = scheme.thresholds(200);
    println!("bucket  ranks        level per test");
    let mut start = 0;
    while start < thresholds.len() {
        let bucket = scheme.bucket_of(start);
        let end = (start..thresholds.len())
            .find(|&r| scheme.bucket_of(r) != bucket)
            .unwrap_or(thresholds.len());
        println!("{bucket:>6}  {:>4}-{:<4}    {:.4e}", start + 1, end, thresholds[start]);
        start = end;
    }
    let mass: f64 = thresholds.iter().sum();
    println!("total level spent over 200 ranks: {mass:.5} (single step: 0.05 / 200 = {:.2e})", 0.05 / 200.0);

    let pvalues = [0.0004, 0.0021, 0.0093, 0.012, 0.03, 0.2, 0.41, 0.77];
    println!("\nSidak level for m = {}: {:.6e}", pvalues.len(), sidak_threshold(0.05, pvalues.len()));
    for method in [
        AdjustMethod::Bonferroni,
        AdjustMethod::Sidak,
        AdjustMethod::Holm,
        AdjustMethod::Hochberg,
    ] {
        let adj = adjust(&pvalues, method, 0.05)?;
        let rejected: Vec<String> = adj
            .rejected
            .iter()
            .enumerate()
            .filter(|(_, &r)| r)
            .map(|(i, _)| format!("H{}", i + 1))
            .collect();
        println!("{method:<10} rejects {}", rejected.join(" "));
    }
    Ok(())
}
