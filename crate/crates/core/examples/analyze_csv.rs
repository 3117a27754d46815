//! Full pipeline on a delimited file: ingestion with the missing-data policy, one
//! testing procedure, and the univariate versus ridge top-10 listing.
//!
//! ```text
//! cargo run --release --example analyze_csv -- [file outcome treatment family]
//! ```
//!
//! Without arguments the shipped START-shaped fixture is analyzed. Outputs go to
//! `target/analyze_csv/`.

use std::path::PathBuf;

use twostage::cli::{run_analysis, RunConfig};
use twostage::Family;

fn main() -> twostage::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let fixture = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/start_like.csv");
    let mut config = RunConfig::default();
    config.input.path = Some(args.first().map_or(fixture, PathBuf::from));
    config.input.outcome = Some(args.get(1).cloned().unwrap_or_else(|| "icu_18m".into()));
    config.input.treatment = Some(args.get(2).cloned().unwrap_or_else(|| "arm".into()));
    config.input.family = args.get(3).map_or(Ok(Family::Linear), |f| f.parse())?;
    config.input.id_column = args.is_empty();
    config.out_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../target/analyze_csv");

    let out = run_analysis(&config)?;
    for line in out.log.lines() {
        println!("{line}");
    }
    println!("\n{}: {} rejected out of {}", out.report.method, out.report.rejected().len(), out.m);
    println!("\n{:>4}  {:<10} {:<10}", "rank", "univariate", "ridge");
    for row in &out.top_k {
        println!("{:>4}  {:<10} {:<10}", row.rank, row.univariate, row.ridge);
    }
    let shared = out.univariate_top().iter().filter(|n| out.ridge_top().contains(n)).count();
    println!("{shared} names appear in both lists");
    out.write(&config.out_dir, &config)?;
    println!("tables written to {}", config.out_dir.display());
    Ok(())
}
