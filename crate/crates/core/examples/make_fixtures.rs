//! Writes the synthetic trial tables used by the integration tests.
//!
//! ```text
//! cargo run --example make_fixtures -- [output-dir]
//! ```
//!
//! Each table has an id column, string treatment labels, a few rows with a missing
//! outcome, sporadic missing biomarker values and some auxiliary columns that are
//! mostly empty and get excluded on ingestion.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use twostage::cli::fmt6;
use twostage::simulate::fixtures::{start_like, stopah_like};
use twostage::TrialDataset;

struct Layout<'a> {
    outcome: &'a str,
    treatment: &'a str,
    arms: [&'a str; 2],
    /// Biomarker columns that get a few missing cells, and how many.
    sparse: &'a [(usize, usize)],
    /// Auxiliary columns and their missing share.
    aux: &'a [f64],
    rows_without_outcome: usize,
}

fn write_table(path: &Path, data: &TrialDataset, layout: &Layout, seed: u64) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.n();
    let mut blank = vec![vec![false; data.m()]; n];
    for &(j, count) in layout.sparse {
        let mut placed = 0;
        while placed < count {
            let i = rng.random_range(0..n);
            if !blank[i][j] {
                blank[i][j] = true;
                placed += 1;
            }
        }
    }
    let mut out = String::from("id,");
    out += &format!("{},{}", layout.outcome, layout.treatment);
    for name in data.names() {
        out += &format!(",{name}");
    }
    for k in 0..layout.aux.len() {
        out += &format!(",aux{}", k + 1);
    }
    out.push('\n');
    let total = n + layout.rows_without_outcome;
    for r in 0..total {
        let i = r % n;
        let outcome = if r < n { fmt6(data.outcome()[i]) } else { "NA".into() };
        let arm = layout.arms[data.treatment()[i] as usize];
        out += &format!("P{:04},{outcome},{arm}", r + 1);
        for j in 0..data.m() {
            if blank[i][j] {
                out.push(',');
            } else {
                out += &format!(",{}", fmt6(data.biomarkers()[(i, j)]));
            }
        }
        for &share in layout.aux {
            if rng.random::<f64>() < share {
                out += ",NA";
            } else {
                out += &format!(",{}", fmt6(rng.random_range(0.0..10.0)));
            }
        }
        out.push('\n');
    }
    fs::write(path, out)
}

fn main() -> std::io::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures"));
    fs::create_dir_all(&dir)?;

    let start = start_like(0);
    write_table(
        &dir.join("start_like.csv"),
        &start,
        &Layout {
            outcome: "icu_18m",
            treatment: "arm",
            arms: ["MAU", "MST"],
            sparse: &[(2, 20), (9, 35), (17, 68), (40, 5), (66, 50)],
            aux: &[0.15, 0.3, 0.6],
            rows_without_outcome: 12,
        },
        1,
    )?;

    let stopah = stopah_like(0);
    write_table(
        &dir.join("stopah_like.csv"),
        &stopah,
        &Layout {
            outcome: "death_28d",
            treatment: "prednisolone",
            arms: ["no", "yes"],
            sparse: &[(4, 60), (12, 106), (30, 20)],
            aux: &[0.12, 0.45],
            rows_without_outcome: 9,
        },
        2,
    )?;
    println!("fixtures written to {}", dir.display());
    Ok(())
}
