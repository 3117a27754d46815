//! Monte Carlo power and family-wise error of the four procedures along a preset sweep.
//!
//! ```text
//! cargo run --release --example power_study -- [preset] [replicates] [desk|paper]
//! ```
//!
//! Presets: fig1a, fig1b, fig1c, fig1d, global_null. Defaults: fig1a, 50, desk.

use twostage::simulate::{preset, run_study, Scale, StudyOptions};
use twostage::Procedure;

fn main() -> twostage::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let name = args.first().map_or("fig1a", String::as_str);
    let replicates = args.get(1).map_or(Ok(50), |s| s.parse()).expect("replicate count");
    let scale: Scale = args.get(2).map_or(Ok(Scale::Desk), |s| s.parse())?;

    let sweep = preset(name, scale)?;
    let table = run_study(&sweep.points, &Procedure::ALL, replicates, 1, &StudyOptions::default())?;
    println!("{} over {} with {replicates} replicates per point", sweep.name, sweep.parameter);
    println!("{:<16} {:<14} {:>14} {:>14}", "point", "method", "power", "fwer");
    for row in &table.rows {
        let power = match (row.power, row.power_se) {
            (Some(p), Some(se)) => format!("{p:.3} ({se:.3})"),
            _ => "NA".into(),
        };
        println!(
            "{:<16} {:<14} {:>14} {:>14}",
            row.point,
            row.method.as_str(),
            power,
            format!("{:.3} ({:.3})", row.fwer, row.fwer_se)
        );
    }
    Ok(())
}
