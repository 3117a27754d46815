//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any
//! criterion fails.
//!
//! Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tempfile::TempDir;
use clap::Parser;
use twostage::cli::{execute, ingest, Cli, RawTable};
use twostage::diagnostics::independence_across_replicates;
use twostage::ridge::{ridge_solve, standardize};
use twostage::simulate::{
    preset, run_study, Effect, PowerRow, PowerTable, Scale, ScenarioConfig, ScenarioPoint,
    StudyOptions, TreatmentAssignment,
};
use twostage::two_stage::{adjust, sidak_threshold, AdjustMethod};
use twostage::{Family, Procedure, RidgeConfig, RidgeSolver, WeightScheme};

const TWO_STAGE: [Procedure; 3] = [Procedure::UniThreshold, Procedure::UniRank, Procedure::RidgeRank];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------------------
// Independent oracles
// ---------------------------------------------------------------------------

/// Solves `a x = b` by Gauss-Jordan elimination with partial pivoting.
fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let p = b.len();
    for col in 0..p {
        let piv = (col..p)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..p {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..p {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    (0..p).map(|r| b[r] / a[r][r]).collect()
}

/// Minimizer of `(1/2n) RSS + lambda |d|^2` with a free intercept, via the centred
/// normal equations `(Xc'Xc + 2 n lambda I) d = Xc'yc`.
fn ridge_oracle(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Vec<f64> {
    let (n, p) = x.shape();
    let means: Vec<f64> = (0..p).map(|k| x.column(k).sum() / n as f64).collect();
    let ybar = y.iter().sum::<f64>() / n as f64;
    let mut a = vec![vec![0.0; p]; p];
    let mut b = vec![0.0; p];
    for r in 0..p {
        for c in 0..p {
            a[r][c] = (0..n)
                .map(|i| (x[(i, r)] - means[r]) * (x[(i, c)] - means[c]))
                .sum::<f64>();
        }
        a[r][r] += 2.0 * n as f64 * lambda;
        b[r] = (0..n).map(|i| (x[(i, r)] - means[r]) * (y[i] - ybar)).sum();
    }
    gauss_solve(a, b)
}

/// Ordinary least squares on `[1 X]` through the uncentred normal equations; returns
/// the slopes.
fn ols_oracle(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let (n, p) = x.shape();
    let col = |k: usize, i: usize| if k == 0 { 1.0 } else { x[(i, k - 1)] };
    let a = (0..=p)
        .map(|r| (0..=p).map(|c| (0..n).map(|i| col(r, i) * col(c, i)).sum()).collect())
        .collect();
    let b = (0..=p).map(|r| (0..n).map(|i| col(r, i) * y[i]).sum()).collect();
    gauss_solve(a, b)[1..].to_vec()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(1e-12)
}

fn sorted_positions(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].partial_cmp(&p[b]).unwrap().then(a.cmp(&b)));
    idx
}

fn holm_oracle(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let mut out = vec![false; m];
    for (r, j) in sorted_positions(p).into_iter().enumerate() {
        if p[j] >= alpha / (m - r) as f64 {
            break;
        }
        out[j] = true;
    }
    out
}

fn hochberg_oracle(p: &[f64], alpha: f64) -> Vec<bool> {
    let m = p.len();
    let idx = sorted_positions(p);
    let mut out = vec![false; m];
    let mut r = m;
    while r > 0 {
        r -= 1;
        if p[idx[r]] < alpha / (m - r) as f64 {
            for &j in &idx[..=r] {
                out[j] = true;
            }
            break;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let config = RidgeConfig::default();
    let mut worst: f64 = 0.0;
    let mut worst_ols: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.random_range(20..=100);
        let p = rng.random_range(2..=10);
        let raw = DMatrix::from_fn(n, p, |_, _| normal(&mut rng));
        let (x, _) = standardize(&raw).unwrap();
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| {
                (0..p).map(|k| x[(i, k)] * beta[k]).sum::<f64>()
                    + normal(&mut rng)
            })
            .collect();
        for lambda in [0.0, 0.1, 1.0, 10.0] {
            let sol = ridge_solve(&x, &y, lambda, None, &config).unwrap();
            worst = worst.max(rel_err(&sol.coefs, &ridge_oracle(&x, &y, lambda)));
            if lambda == 0.0 {
                worst_ols = worst_ols.max(rel_err(&sol.coefs, &ols_oracle(&x, &y)));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-6 && worst_ols <= 1e-6 && secs < 10.0,
        format!("max rel err {worst:.2e} (closed form), {worst_ols:.2e} (OLS), {secs:.2} s"),
    )
}

fn study(points: Vec<ScenarioPoint>, replicates: usize) -> PowerTable {
    run_study(&points, &Procedure::ALL, replicates, 1, &StudyOptions::default()).unwrap()
}

fn point(name: &str, label: &str) -> ScenarioPoint {
    preset(name, Scale::Desk)
        .unwrap()
        .points
        .into_iter()
        .find(|p| p.label == label)
        .unwrap()
}

fn power(row: &PowerRow) -> (f64, f64) {
    (row.power.unwrap(), row.power_se.unwrap())
}

/// Gap `a - b` and its combined MC standard error.
fn gap(table: &PowerTable, label: &str, a: Procedure, b: Procedure) -> (f64, f64) {
    let (pa, sa) = power(table.get(label, a).unwrap());
    let (pb, sb) = power(table.get(label, b).unwrap());
    (pa - pb, (sa * sa + sb * sb).sqrt())
}

fn powers_line(table: &PowerTable, label: &str) -> String {
    Procedure::ALL
        .iter()
        .map(|&m| format!("{m} {:.3}", table.get(label, m).unwrap().power.unwrap()))
        .collect::<Vec<_>>()
        .join(", ")
}

fn criterion_2(table: &PowerTable) -> Outcome {
    let tol = 3.0 * (0.05f64 * 0.95 / 1000.0).sqrt();
    let mut pass = true;
    let mut parts = Vec::new();
    for row in &table.rows {
        let ok = (row.fwer - 0.05).abs() <= tol && row.replicates == 1000;
        pass &= ok;
        parts.push(format!("{} {} {:.3}{}", row.point, row.method, row.fwer, if ok { "" } else { "*" }));
    }
    outcome(pass, format!("tolerance 0.05 +/- {tol:.4}: {}", parts.join("; ")))
}

fn criterion_3(table: &PowerTable) -> Outcome {
    let label = "n=1500";
    let mut pass = true;
    let mut gaps = Vec::new();
    let (d, se) = gap(table, label, Procedure::RidgeRank, Procedure::UniRank);
    pass &= d > 2.0 * se;
    gaps.push(format!("ridge_rank-uni_rank {d:.3} (2SE {:.3})", 2.0 * se));
    for m in TWO_STAGE {
        let (d, se) = gap(table, label, m, Procedure::SingleStep);
        pass &= d > 2.0 * se;
        gaps.push(format!("{m}-single_step {d:.3} (2SE {:.3})", 2.0 * se));
    }
    outcome(pass, format!("{}; {}", powers_line(table, label), gaps.join(", ")))
}

fn criterion_4(table: &PowerTable) -> Outcome {
    let label = "n=1500";
    let (d, se) = gap(table, label, Procedure::RidgeRank, Procedure::UniRank);
    let parity = d.abs() <= 3.0 * se;
    let (d1, _) = gap(table, label, Procedure::RidgeRank, Procedure::SingleStep);
    let (d2, _) = gap(table, label, Procedure::UniRank, Procedure::SingleStep);
    outcome(
        parity && d1 > 0.0 && d2 > 0.0,
        format!(
            "{}; |ridge_rank-uni_rank| {:.3} (3SE {:.3})",
            powers_line(table, label),
            d.abs(),
            3.0 * se
        ),
    )
}

fn criterion_5(table: &PowerTable, label: &str) -> Outcome {
    let mut pass = true;
    let mut gaps = Vec::new();
    for m in TWO_STAGE {
        let (d, se) = gap(table, label, Procedure::SingleStep, m);
        pass &= d > 2.0 * se;
        gaps.push(format!("single_step-{m} {d:.3} (2SE {:.3})", 2.0 * se));
    }
    outcome(pass, format!("{label}: {}; {}", powers_line(table, label), gaps.join(", ")))
}

/// Two clusters of 20 with `X1` interacting; used for the 100-seed coverage run.
fn small_scenario() -> ScenarioConfig {
    ScenarioConfig {
        n: 500,
        m: 40,
        effects: vec![
            Effect { index: 0, main: 0.5, interaction: 1.0 },
            Effect { index: 20, main: 1.5, interaction: 0.0 },
        ],
        ..ScenarioConfig::desk(500, 0.6)
    }
}

fn criterion_6() -> Outcome {
    let ridge = RidgeConfig {
        solver: RidgeSolver::Spectral,
        ..RidgeConfig::default()
    };
    let main = independence_across_replicates(&ScenarioConfig::desk(1500, 0.6), 1, 500, &ridge).unwrap();
    let bound = 3.0 / 500f64.sqrt();
    let main_ok = main.ci_contains_zero() && main.estimate.abs() < bound;

    let covered = (0..100u64)
        .filter(|&k| {
            let cfg = small_scenario().with_seed(1_000_000 * (k + 1));
            independence_across_replicates(&cfg, 1, 500, &ridge)
                .unwrap()
                .ci_contains_zero()
        })
        .count();

    let control_cfg = ScenarioConfig {
        assignment: TreatmentAssignment::ProductSign { a: 0, b: 1 },
        ..small_scenario()
    };
    let control = independence_across_replicates(&control_cfg, 1, 500, &ridge).unwrap();

    outcome(
        main_ok && covered >= 90 && !control.ci_contains_zero(),
        format!(
            "X2 over 500 replicates r = {:.4} CI ({:.4}, {:.4}); meta-run coverage {covered}/100; \
             dependent-treatment control r = {:.4} CI ({:.4}, {:.4})",
            main.estimate, main.ci95.0, main.ci95.1, control.estimate, control.ci95.0, control.ci95.1
        ),
    )
}

fn criterion_7() -> Outcome {
    let scheme = WeightScheme::new(5, 0.05).unwrap();
    let t = scheme.thresholds(35);
    let buckets_ok = t[..5].iter().all(|&v| v == 0.005)
        && t[5..15].iter().all(|&v| v == 1.25e-3)
        && t[15..35].iter().all(|&v| v == 3.125e-4);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let m = rng.random_range(1..=50);
        let alpha = [0.01, 0.05, 0.1][rng.random_range(0..3)];
        let p: Vec<f64> = (0..m).map(|_| rng.random::<f64>().powi(4)).collect();
        let bonf = alpha / m as f64;
        let sidak = 1.0 - (1.0 - alpha).powf(1.0 / m as f64);
        let expected = [
            (AdjustMethod::Bonferroni, p.iter().map(|&v| v < bonf).collect::<Vec<_>>()),
            (AdjustMethod::Sidak, p.iter().map(|&v| v < sidak).collect()),
            (AdjustMethod::Holm, holm_oracle(&p, alpha)),
            (AdjustMethod::Hochberg, hochberg_oracle(&p, alpha)),
        ];
        for (method, want) in expected {
            let got = adjust(&p, method, alpha).unwrap();
            let thresholds_ok = match method {
                AdjustMethod::Bonferroni => got.thresholds.iter().all(|&v| v == bonf),
                AdjustMethod::Sidak => got.thresholds.iter().all(|&v| (v - sidak).abs() <= 1e-15),
                _ => true,
            };
            if got.rejected != want || !thresholds_ok {
                mismatches += 1;
            }
        }
    }
    let sidak_ok = (sidak_threshold(0.05, 1000) - 5.1292e-5).abs() < 1e-9;
    outcome(
        buckets_ok && mismatches == 0 && sidak_ok,
        format!("bucket thresholds exact: {buckets_ok}; adjustment mismatches {mismatches} of 4000"),
    )
}

fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let tmp = TempDir::new().unwrap();
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let pfile = tmp.path().join("p.csv");
    fs::write(&pfile, "p\n0.001\n0.2\n0.013\n0.04\n0.0004\n").unwrap();
    let stopah = fixtures.join("stopah_like.csv");
    let start = fixtures.join("start_like.csv");
    let (stopah, start, pfile) = (
        stopah.to_str().unwrap().to_string(),
        start.to_str().unwrap().to_string(),
        pfile.to_str().unwrap().to_string(),
    );
    let commands: Vec<(&str, Vec<&str>)> = vec![
        ("analyze", vec![
            "analyze", "--input", &stopah, "--outcome", "death_28d", "--treatment", "prednisolone",
            "--family", "logistic", "--id-column", "--seed", "3",
        ]),
        ("simulate", vec!["simulate", "--preset", "global_null", "--replicates", "4", "--seed", "9"]),
        ("independence", vec![
            "independence", "--mode", "across_biomarkers", "--input", &start, "--outcome", "icu_18m",
            "--treatment", "arm", "--id-column", "--seed", "5",
        ]),
        ("independence", vec!["independence", "--mode", "across_replicates", "--replicates", "6", "--seed", "5"]),
        ("adjust", vec!["adjust", "--input", &pfile, "--method", "hochberg"]),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, args)) in commands.iter().enumerate() {
        let mut runs = Vec::new();
        for rep in 0..2 {
            let out = tmp.path().join(format!("{k}-{rep}"));
            let mut full = vec!["twostage"];
            full.extend(args.iter().copied());
            full.extend(["--out-dir", out.to_str().unwrap()]);
            let ok = Cli::try_parse_from(full).is_ok_and(|cli| execute(&cli.command).is_ok());
            runs.push((ok, read_dir_files(&out)));
        }
        let same = runs[0].0 && runs[1].0 && runs[0].1 == runs[1].1 && !runs[0].1.is_empty();
        pass &= same;
        parts.push(format!(
            "{name} ({} files) {}",
            runs[0].1.len(),
            if same { "identical" } else { "DIFFER" }
        ));
    }
    outcome(pass, parts.join(", "))
}

fn criterion_9() -> Outcome {
    let n = 200;
    let counts = [("m09", 18), ("m10", 20), ("m11", 22)];
    let mut header = vec!["y".to_string(), "arm".to_string(), "full".to_string()];
    header.extend(counts.iter().map(|(c, _)| c.to_string()));
    let rows: Vec<Vec<Option<String>>> = (0..n)
        .map(|i| {
            let mut row = vec![
                Some(format!("{}", (i * 7 % 13) as f64 / 3.0)),
                Some(if i % 3 == 0 { "placebo" } else { "active" }.to_string()),
                Some(format!("{}", i % 10)),
            ];
            row.extend(counts.iter().map(|&(_, miss)| (i >= miss).then(|| format!("{}", i % 4))));
            row
        })
        .collect();
    let table = RawTable::new(header, rows).unwrap();
    let (data, log) = ingest(&table, "y", "arm", Family::Linear).unwrap();

    let observed_mean = |miss: usize| (miss..n).map(|i| (i % 4) as f64).sum::<f64>() / (n - miss) as f64;
    let imputed_ok = |name: &str, miss: usize| {
        let j = data.names().iter().position(|c| c == name);
        j.is_some_and(|j| {
            let col = data.biomarker(j);
            (0..miss).all(|i| (col[i] - observed_mean(miss)).abs() < 1e-12)
                && (miss..n).all(|i| col[i] == (i % 4) as f64)
        })
    };
    let kept = imputed_ok("m09", 18) && imputed_ok("m10", 20);
    let dropped = !data.names().iter().any(|c| c == "m11")
        && log.excluded.iter().map(|c| c.name.as_str()).eq(["m11"]);
    let accounted = log.retained.len() + log.excluded.len() == 4
        && log.lines().iter().any(|l| l.contains("4 total, 3 retained, 1 excluded"));
    outcome(
        kept && dropped && accounted,
        format!(
            "9% and 10% imputed: {kept}; 11% excluded: {dropped}; log accounts for 4 columns: {accounted}"
        ),
    )
}

// ---------------------------------------------------------------------------
// Runner
// ---------------------------------------------------------------------------

fn report(results: &mut Vec<bool>, name: &str, start: Instant, o: Outcome) {
    println!(
        "{} {name}: {} [{:.0} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    results.push(o.pass);
}

fn main() {
    let mut results = Vec::new();
    let t = Instant::now();
    report(&mut results, "criterion 1 (ridge oracle)", t, criterion_1());

    let t = Instant::now();
    let null = study(preset("global_null", Scale::Desk).unwrap().points, 1000);
    report(&mut results, "criterion 2 (global-null FWER)", t, criterion_2(&null));

    let t = Instant::now();
    let fig1a = study(vec![point("fig1a", "n=1500")], 500);
    report(&mut results, "criterion 3 (ordering at rho 0.6)", t, criterion_3(&fig1a));

    let t = Instant::now();
    let fig1b = study(vec![point("fig1b", "n=1500")], 500);
    report(&mut results, "criterion 4 (parity at rho 0)", t, criterion_4(&fig1b));

    let t = Instant::now();
    let fig1c = study(vec![point("fig1c", "beta_x1=-0.5")], 500);
    report(&mut results, "criterion 5 (main-effect cancellation)", t, criterion_5(&fig1c, "beta_x1=-0.5"));

    let t = Instant::now();
    report(&mut results, "criterion 6 (stage independence)", t, criterion_6());
    let t = Instant::now();
    report(&mut results, "criterion 7 (threshold arithmetic)", t, criterion_7());
    let t = Instant::now();
    report(&mut results, "criterion 8 (determinism)", t, criterion_8());
    let t = Instant::now();
    report(&mut results, "criterion 9 (ingestion policy)", t, criterion_9());

    let passed = results.iter().filter(|&&p| p).count();
    println!("{passed} of {} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
