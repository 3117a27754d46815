//! Command-line front end: table ingestion, run configuration and file outputs.
//!
//! Four subcommands are available: `analyze`, `simulate`, `independence` and
//! `adjust`. Every setting can come from flags or from a TOML document passed with
//! `--config`; values in the document win over flags. All tables are comma-separated
//! with a header row and numbers printed to 6 significant digits, so reruns with the
//! same settings produce byte-identical files.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime failure.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::diagnostics::{
    independence_across_biomarkers, independence_across_replicates, IndependenceMode,
    IndependenceReport,
};
use crate::error::{Error, Result};
use crate::model::{Family, TrialDataset};
use crate::ridge::{RidgeConfig, RidgeSolver};
use crate::simulate::{
    preset, run_study, FwerGranularity, PowerTable, Scale, ScenarioConfig, ScenarioPoint,
    StudyOptions, Sweep,
};
use crate::two_stage::{
    adjust, ridge_rank_screen, run_procedure, univariate_rank_screen, AdjustMethod,
    Adjustment, Procedure, ProcedureConfig, RowStatus, StageTwoReport,
};

/// Share of missing cells above which a biomarker column is dropped.
pub const MAX_MISSING_FRACTION: f64 = 0.10;

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// A delimited text table: unique header names and a rectangular grid of raw cells.
/// Empty cells and the token `NA` are stored as missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    header: Vec<String>,
    rows: Vec<Vec<Option<String>>>,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "NA"
}

impl RawTable {
    pub fn new(header: Vec<String>, rows: Vec<Vec<Option<String>>>) -> Result<Self> {
        let mut seen = HashSet::new();
        for h in &header {
            if !seen.insert(h.as_str()) {
                return Err(Error::InvalidData(format!("duplicate column name {h:?}")));
            }
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != header.len() {
                return Err(Error::InvalidData(format!(
                    "row {} has {} cells, header has {}",
                    i + 1,
                    row.len(),
                    header.len()
                )));
            }
        }
        Ok(Self { header, rows })
    }

    /// Parses delimited text. With `id_column` the first column is discarded.
    pub fn parse<R: Read>(reader: R, delimiter: u8, id_column: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(delimiter)
            .has_headers(true)
            .from_reader(reader);
        let skip = usize::from(id_column);
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::InvalidData(e.to_string()))?
            .iter()
            .skip(skip)
            .map(|h| h.trim().to_string())
            .collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| Error::InvalidData(e.to_string()))?;
            rows.push(
                record
                    .iter()
                    .skip(skip)
                    .map(|c| (!is_missing(c)).then(|| c.trim().to_string()))
                    .collect(),
            );
        }
        Self::new(header, rows)
    }

    pub fn read(path: &Path, delimiter: u8, id_column: bool) -> Result<Self> {
        let file = fs::File::open(path)
            .map_err(|e| Error::InvalidData(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(file, delimiter, id_column)
    }

    pub fn header(&self) -> &[String] {
        &self.header
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.header.len()
    }

    pub fn cell(&self, row: usize, col: usize) -> Option<&str> {
        self.rows[row][col].as_deref()
    }

    fn column_index(&self, name: &str, field: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidConfig(format!("{field}: column {name:?} not found")))
    }
}

/// Missingness of one biomarker column after row filtering.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnLog {
    pub name: String,
    pub missing: usize,
    /// Mean used for imputation; absent for excluded columns.
    pub mean: Option<f64>,
}

/// What [`ingest`] did to the table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreprocessLog {
    pub rows_read: usize,
    pub rows_dropped: usize,
    /// Raw treatment labels mapped to 0 and (if present) 1.
    pub treatment_mapping: Vec<(String, u8)>,
    pub retained: Vec<ColumnLog>,
    pub excluded: Vec<ColumnLog>,
}

impl PreprocessLog {
    pub fn lines(&self) -> Vec<String> {
        let kept = self.rows_read - self.rows_dropped;
        let mut out = vec![
            format!("rows read: {}", self.rows_read),
            format!("rows dropped for missing outcome or treatment: {}", self.rows_dropped),
            format!(
                "treatment mapping: {}",
                self.treatment_mapping
                    .iter()
                    .map(|(k, v)| format!("{k:?} -> {v}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            ),
            format!(
                "biomarker columns: {} total, {} retained, {} excluded",
                self.retained.len() + self.excluded.len(),
                self.retained.len(),
                self.excluded.len()
            ),
        ];
        for c in &self.excluded {
            out.push(format!(
                "excluded {}: {} of {kept} missing ({}%)",
                c.name,
                c.missing,
                fmt6(100.0 * c.missing as f64 / kept as f64)
            ));
        }
        for c in self.retained.iter().filter(|c| c.missing > 0) {
            out.push(format!(
                "imputed {}: {} of {kept} missing, mean {}",
                c.name,
                c.missing,
                fmt6(c.mean.unwrap_or(f64::NAN))
            ));
        }
        out
    }
}

fn parse_number(value: &str, row: usize, column: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::NonNumericCell {
            row,
            column: column.to_string(),
            value: value.to_string(),
        })
}

/// Turns a raw table into a dataset.
///
/// Rows missing the outcome or treatment are dropped. Every other column is a
/// biomarker; columns with more than 10% missing cells (after the row drop) are
/// excluded and the rest are mean-imputed. The two treatment labels are recoded so
/// that the lexicographically smaller one becomes 0.
pub fn ingest(
    table: &RawTable,
    outcome_col: &str,
    treatment_col: &str,
    family: Family,
) -> Result<(TrialDataset, PreprocessLog)> {
    let yi = table.column_index(outcome_col, "input.outcome")?;
    let ti = table.column_index(treatment_col, "input.treatment")?;
    if yi == ti {
        return Err(Error::InvalidConfig(
            "input.treatment: must differ from input.outcome".into(),
        ));
    }
    let rows: Vec<usize> = (0..table.n_rows())
        .filter(|&i| table.cell(i, yi).is_some() && table.cell(i, ti).is_some())
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptyAfterFiltering(
            "every row is missing the outcome or the treatment".into(),
        ));
    }
    let n = rows.len();

    let mut labels: Vec<&str> = rows.iter().map(|&i| table.cell(i, ti).unwrap()).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() > 2 {
        return Err(Error::NonBinaryTreatment { found: labels.len() });
    }
    let treatment: Vec<f64> = rows
        .iter()
        .map(|&i| if table.cell(i, ti).unwrap() == labels[0] { 0.0 } else { 1.0 })
        .collect();
    let outcome = rows
        .iter()
        .map(|&i| parse_number(table.cell(i, yi).unwrap(), i + 1, outcome_col))
        .collect::<Result<Vec<f64>>>()?;

    let mut retained = Vec::new();
    let mut excluded = Vec::new();
    let mut columns = Vec::new();
    let mut names = Vec::new();
    for (j, name) in table.header().iter().enumerate() {
        if j == yi || j == ti {
            continue;
        }
        let missing = rows.iter().filter(|&&i| table.cell(i, j).is_none()).count();
        if missing * 10 > n {
            excluded.push(ColumnLog {
                name: name.clone(),
                missing,
                mean: None,
            });
            continue;
        }
        let values = rows
            .iter()
            .map(|&i| table.cell(i, j).map(|v| parse_number(v, i + 1, name)).transpose())
            .collect::<Result<Vec<Option<f64>>>>()?;
        let observed: Vec<f64> = values.iter().flatten().copied().collect();
        let mean = observed.iter().sum::<f64>() / observed.len() as f64;
        columns.push(values.into_iter().map(|v| v.unwrap_or(mean)).collect::<Vec<f64>>());
        names.push(name.clone());
        retained.push(ColumnLog {
            name: name.clone(),
            missing,
            mean: Some(mean),
        });
    }
    if columns.is_empty() {
        return Err(Error::EmptyAfterFiltering(
            "no biomarker column survived the missing-data filter".into(),
        ));
    }
    let x = nalgebra::DMatrix::from_fn(n, columns.len(), |i, j| columns[j][i]);
    let data = TrialDataset::new(outcome, treatment, x, names, family)?;
    let log = PreprocessLog {
        rows_read: table.n_rows(),
        rows_dropped: table.n_rows() - n,
        treatment_mapping: labels
            .iter()
            .enumerate()
            .map(|(k, l)| (l.to_string(), k as u8))
            .collect(),
        retained,
        excluded,
    };
    Ok((data, log))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputConfig {
    pub path: Option<PathBuf>,
    pub outcome: Option<String>,
    pub treatment: Option<String>,
    pub family: Family,
    pub delimiter: String,
    /// Ignore the first column (row identifiers).
    pub id_column: bool,
}

impl Default for InputConfig {
    fn default() -> Self {
        Self {
            path: None,
            outcome: None,
            treatment: None,
            family: Family::Linear,
            delimiter: ",".into(),
            id_column: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub method: Procedure,
    pub alpha: f64,
    pub alpha1: f64,
    pub bucket_size: usize,
    pub top_k: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            method: Procedure::RidgeRank,
            alpha: 0.05,
            alpha1: 0.05,
            bucket_size: 5,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub preset: Option<String>,
    pub scale: Scale,
    pub replicates: usize,
    pub methods: Vec<Procedure>,
    pub granularity: FwerGranularity,
    /// Ridge solver used inside simulation loops.
    pub ridge_solver: RidgeSolver,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            preset: None,
            scale: Scale::Desk,
            replicates: 100,
            methods: Procedure::ALL.to_vec(),
            granularity: FwerGranularity::Cluster,
            ridge_solver: RidgeSolver::Spectral,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndependenceConfig {
    pub mode: IndependenceMode,
    /// 1-based biomarker number for `across_replicates`.
    pub biomarker: usize,
    pub replicates: usize,
}

impl Default for IndependenceConfig {
    fn default() -> Self {
        Self {
            mode: IndependenceMode::AcrossBiomarkers,
            biomarker: 2,
            replicates: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdjustConfig {
    pub method: AdjustMethod,
    pub alpha: f64,
}

impl Default for AdjustConfig {
    fn default() -> Self {
        Self {
            method: AdjustMethod::Bonferroni,
            alpha: 0.05,
        }
    }
}

/// Every setting of a run. The TOML layout mirrors the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub input: InputConfig,
    pub analysis: AnalysisConfig,
    pub ridge: RidgeConfig,
    pub simulation: SimulationConfig,
    /// Inline scenario used by `simulate` without a preset and by `independence`
    /// in `across_replicates` mode.
    pub scenario: Option<ScenarioConfig>,
    pub independence: IndependenceConfig,
    pub adjust: AdjustConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            input: InputConfig::default(),
            analysis: AnalysisConfig::default(),
            ridge: RidgeConfig::default(),
            simulation: SimulationConfig::default(),
            scenario: None,
            independence: IndependenceConfig::default(),
            adjust: AdjustConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn check_unit(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{field}: must lie in (0, 1), got {v}")))
    }
}

impl RunConfig {
    /// Applies a TOML document on top of `self`; keys in the document take precedence.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        let over: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("config: {e}")))?;
        let mut base = toml::Table::try_from(self)
            .map_err(|e| Error::InvalidConfig(format!("config: {e}")))?;
        merge(&mut base, over);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("config: {}", e.message())))
    }

    pub fn delimiter(&self) -> Result<u8> {
        match self.input.delimiter.as_bytes() {
            [b] => Ok(*b),
            _ if self.input.delimiter == "\\t" => Ok(b'\t'),
            _ => Err(Error::InvalidConfig(format!(
                "input.delimiter: expected a single byte, got {:?}",
                self.input.delimiter
            ))),
        }
    }

    pub fn procedure_config(&self, family: Family) -> ProcedureConfig {
        ProcedureConfig {
            overall_alpha: self.analysis.alpha,
            alpha1: self.analysis.alpha1,
            bucket_size: self.analysis.bucket_size,
            ridge: RidgeConfig {
                family,
                ..self.ridge.clone()
            },
        }
    }

    /// Range checks with the offending field in each message.
    pub fn validate(&self) -> Result<()> {
        check_unit("analysis.alpha", self.analysis.alpha)?;
        check_unit("analysis.alpha1", self.analysis.alpha1)?;
        check_unit("adjust.alpha", self.adjust.alpha)?;
        if self.analysis.bucket_size == 0 {
            return Err(Error::InvalidConfig("analysis.bucket_size: must be positive".into()));
        }
        if self.analysis.top_k == 0 {
            return Err(Error::InvalidConfig("analysis.top_k: must be positive".into()));
        }
        if self.simulation.replicates == 0 {
            return Err(Error::InvalidConfig("simulation.replicates: must be positive".into()));
        }
        if self.simulation.methods.is_empty() {
            return Err(Error::InvalidConfig("simulation.methods: must not be empty".into()));
        }
        if self.independence.replicates == 0 {
            return Err(Error::InvalidConfig("independence.replicates: must be positive".into()));
        }
        if self.independence.biomarker == 0 {
            return Err(Error::InvalidConfig(
                "independence.biomarker: numbering starts at 1".into(),
            ));
        }
        self.delimiter()?;
        self.ridge
            .validate()
            .map_err(|e| Error::InvalidConfig(format!("ridge: {e}")))?;
        if let Some(s) = &self.scenario {
            s.validate()?;
        }
        Ok(())
    }

    fn load_dataset(&self) -> Result<(TrialDataset, PreprocessLog)> {
        let path = self
            .input
            .path
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("input.path: required".into()))?;
        let outcome = self
            .input
            .outcome
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("input.outcome: required".into()))?;
        let treatment = self
            .input
            .treatment
            .as_deref()
            .ok_or_else(|| Error::InvalidConfig("input.treatment: required".into()))?;
        let table = RawTable::read(path, self.delimiter()?, self.input.id_column)?;
        ingest(&table, outcome, treatment, self.input.family)
    }
}

// ---------------------------------------------------------------------------
// Formatting
// ---------------------------------------------------------------------------

/// Formats to 6 significant digits, trimming trailing zeros. Non-finite values print
/// as `NA`, `Inf` or `-Inf`.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "NA".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "Inf".into() } else { "-Inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let m = mantissa.trim_end_matches('0').trim_end_matches('.');
        format!("{m}e{exp}")
    }
}

fn opt6(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), fmt6)
}

/// A float rounded to 6 significant digits as a JSON value (`null` if not finite).
fn json6(x: f64) -> Value {
    if x.is_finite() {
        json!(fmt6(x).parse::<f64>().expect("formatted float"))
    } else {
        Value::Null
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn status_fields(status: &RowStatus) -> (&'static str, String) {
    match status {
        RowStatus::Tested => ("tested", String::new()),
        RowStatus::NotSelected => ("not_selected", String::new()),
        RowStatus::Failed(reason) => ("failed", reason.clone()),
    }
}

/// Writes one row per biomarker; `index` is 1-based.
pub fn write_report(path: &Path, report: &StageTwoReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "index", "name", "rank", "estimate", "std_error", "statistic", "p_value", "threshold",
        "rejected", "status", "reason",
    ])?;
    for row in &report.rows {
        let (status, reason) = status_fields(&row.status);
        w.write_record([
            (row.index + 1).to_string(),
            row.name.clone(),
            row.rank.map_or_else(|| "NA".into(), |r| r.to_string()),
            opt6(row.wald.as_ref().map(|x| x.estimate)),
            opt6(row.wald.as_ref().map(|x| x.std_error)),
            opt6(row.wald.as_ref().map(|x| x.statistic)),
            opt6(row.p_value),
            opt6(row.threshold),
            row.rejected.to_string(),
            status.to_string(),
            reason,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `(name, rejected)` pairs from a file written by [`write_report`].
pub fn read_report_decisions(path: &Path) -> Result<Vec<(String, bool)>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidData(format!("report has no {name:?} column")))
    };
    let (ni, ri) = (col("name")?, col("rejected")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let rejected = match &rec[ri] {
            "true" => true,
            "false" => false,
            other => return Err(Error::InvalidData(format!("bad rejected flag {other:?}"))),
        };
        out.push((rec[ni].to_string(), rejected));
    }
    Ok(out)
}

/// Writes a dataset as a table with columns `y`, `treatment` and the biomarker names.
pub fn write_dataset(path: &Path, data: &TrialDataset) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["y".to_string(), "treatment".to_string()];
    header.extend(data.names().iter().cloned());
    w.write_record(&header)?;
    for i in 0..data.n() {
        let mut rec = vec![fmt6(data.outcome()[i]), fmt6(data.treatment()[i])];
        rec.extend((0..data.m()).map(|j| fmt6(data.biomarkers()[(i, j)])));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// One line of the side-by-side stage-1 listing.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopKRow {
    pub rank: usize,
    pub univariate: String,
    /// Marginal association p-value.
    pub univariate_p: f64,
    pub ridge: String,
    /// Absolute standardized ridge coefficient.
    pub ridge_abs_coef: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub report: StageTwoReport,
    pub top_k: Vec<TopKRow>,
    pub lambda_opt: f64,
    pub log: PreprocessLog,
    pub n: usize,
    pub m: usize,
    pub family: Family,
}

impl AnalysisOutput {
    pub fn univariate_top(&self) -> Vec<&str> {
        self.top_k.iter().map(|r| r.univariate.as_str()).collect()
    }

    pub fn ridge_top(&self) -> Vec<&str> {
        self.top_k.iter().map(|r| r.ridge.as_str()).collect()
    }

    /// Writes `report.csv`, `top_k.csv`, `preprocess.log` and `summary.json`.
    pub fn write(&self, dir: &Path, config: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_report(&dir.join("report.csv"), &self.report)?;
        let mut w = csv_writer(&dir.join("top_k.csv"))?;
        w.write_record(["rank", "univariate", "univariate_p", "ridge", "ridge_abs_coef"])?;
        for r in &self.top_k {
            w.write_record([
                r.rank.to_string(),
                r.univariate.clone(),
                fmt6(r.univariate_p),
                r.ridge.clone(),
                fmt6(r.ridge_abs_coef),
            ])?;
        }
        w.flush()?;
        let mut log = self.log.lines().join("\n");
        log.push('\n');
        fs::write(dir.join("preprocess.log"), log)?;

        let names: Vec<&str> = self
            .report
            .rejected()
            .into_iter()
            .map(|j| self.report.rows[j].name.as_str())
            .collect();
        let summary = json!({
            "command": "analyze",
            "method": self.report.method,
            "family": self.family.to_string(),
            "n": self.n,
            "m": self.m,
            "overall_alpha": json6(config.analysis.alpha),
            "alpha1": json6(config.analysis.alpha1),
            "bucket_size": config.analysis.bucket_size,
            "m_star": self.report.m_star,
            "n_tested": self.report.n_tested(),
            "rejected": names,
            "lambda_opt": json6(self.lambda_opt),
            "seed": config.seed,
            "caveat": self.report.caveat,
            "preprocessing": {
                "rows_read": self.log.rows_read,
                "rows_dropped": self.log.rows_dropped,
                "treatment_mapping": self.log.treatment_mapping
                    .iter()
                    .map(|(k, v)| (k.clone(), json!(v)))
                    .collect::<BTreeMap<String, Value>>(),
                "columns_retained": self.log.retained.len(),
                "columns_excluded": self.log.excluded.iter().map(|c| &c.name).collect::<Vec<_>>(),
            },
        });
        write_json(&dir.join("summary.json"), &summary)
    }
}

/// Runs the configured procedure plus the univariate and ridge top-k listings.
pub fn analyze_dataset(
    data: &TrialDataset,
    log: PreprocessLog,
    config: &RunConfig,
) -> Result<AnalysisOutput> {
    config.validate()?;
    let proc_cfg = config.procedure_config(data.family());
    let report = run_procedure(data, config.analysis.method, &proc_cfg)?;
    let uni = univariate_rank_screen(data)?;
    let (ridge, fit) = ridge_rank_screen(data, &proc_cfg.ridge)?;
    let k = config.analysis.top_k.min(data.m());
    let uni_order = uni.ranking().expect("ranking");
    let ridge_order = ridge.ranking().expect("ranking");
    let top_k = (0..k)
        .map(|r| TopKRow {
            rank: r + 1,
            univariate: data.names()[uni_order[r]].clone(),
            univariate_p: uni.stage1_stats[uni_order[r]],
            ridge: data.names()[ridge_order[r]].clone(),
            ridge_abs_coef: ridge.stage1_stats[ridge_order[r]],
        })
        .collect();
    Ok(AnalysisOutput {
        report,
        top_k,
        lambda_opt: fit.lambda_opt,
        log,
        n: data.n(),
        m: data.m(),
        family: data.family(),
    })
}

/// Reads the input table and runs [`analyze_dataset`].
pub fn run_analysis(config: &RunConfig) -> Result<AnalysisOutput> {
    config.validate()?;
    let (data, log) = config.load_dataset()?;
    analyze_dataset(&data, log, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub sweep: Sweep,
    pub table: PowerTable,
}

impl SimulationOutput {
    /// Writes `power_table.csv` and `summary.json`.
    pub fn write(&self, dir: &Path, config: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv_writer(&dir.join("power_table.csv"))?;
        w.write_record([
            "sweep", "parameter", "point", "value", "method", "power", "power_se", "fwer",
            "fwer_se", "replicates", "failures",
        ])?;
        for r in &self.table.rows {
            w.write_record([
                self.sweep.name.clone(),
                self.sweep.parameter.clone(),
                r.point.clone(),
                fmt6(r.value),
                r.method.to_string(),
                opt6(r.power),
                opt6(r.power_se),
                fmt6(r.fwer),
                fmt6(r.fwer_se),
                r.replicates.to_string(),
                r.failures.to_string(),
            ])?;
        }
        w.flush()?;
        let summary = json!({
            "command": "simulate",
            "sweep": self.sweep.name,
            "parameter": self.sweep.parameter,
            "points": self.sweep.points.len(),
            "methods": config.simulation.methods.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
            "replicates": config.simulation.replicates,
            "seed": config.seed,
            "granularity": match config.simulation.granularity {
                FwerGranularity::Cluster => "cluster",
                FwerGranularity::Biomarker => "biomarker",
            },
            "overall_alpha": json6(config.analysis.alpha),
            "alpha1": json6(config.analysis.alpha1),
            "bucket_size": config.analysis.bucket_size,
        });
        write_json(&dir.join("summary.json"), &summary)
    }
}

/// Runs a preset sweep, or the inline scenario as a single point.
pub fn run_simulation(config: &RunConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let sweep = match (&config.simulation.preset, &config.scenario) {
        (Some(name), _) => preset(name, config.simulation.scale)?,
        (None, Some(s)) => Sweep {
            name: "custom".into(),
            parameter: "scenario".into(),
            points: vec![ScenarioPoint {
                label: "custom".into(),
                value: 0.0,
                config: s.clone(),
            }],
        },
        (None, None) => {
            return Err(Error::InvalidConfig(
                "simulation.preset: required unless a [scenario] table is given".into(),
            ))
        }
    };
    let mut procedure = config.procedure_config(Family::Linear);
    procedure.ridge.solver = config.simulation.ridge_solver;
    let options = StudyOptions {
        procedure,
        granularity: config.simulation.granularity,
    };
    let table = run_study(
        &sweep.points,
        &config.simulation.methods,
        config.simulation.replicates,
        config.seed,
        &options,
    )?;
    Ok(SimulationOutput { sweep, table })
}

/// Writes `independence.csv` with one row per report.
pub fn write_independence(dir: &Path, report: &IndependenceReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv_writer(&dir.join("independence.csv"))?;
    w.write_record(["mode", "estimate", "p_value", "ci_low", "ci_high", "n_pairs"])?;
    w.write_record([
        report.mode.to_string(),
        fmt6(report.estimate),
        fmt6(report.p_value),
        fmt6(report.ci95.0),
        fmt6(report.ci95.1),
        report.n_pairs.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Across biomarkers on the input table, or across replicates of the scenario.
pub fn run_independence(config: &RunConfig) -> Result<IndependenceReport> {
    config.validate()?;
    match config.independence.mode {
        IndependenceMode::AcrossBiomarkers => {
            let (data, _) = config.load_dataset()?;
            let ridge = RidgeConfig {
                family: data.family(),
                ..config.ridge.clone()
            };
            independence_across_biomarkers(&data, &ridge)
        }
        IndependenceMode::AcrossReplicates => {
            let scenario = config
                .scenario
                .clone()
                .unwrap_or_else(|| ScenarioConfig::desk(1500, 0.6))
                .with_seed(config.seed);
            let ridge = RidgeConfig {
                family: Family::Linear,
                solver: config.simulation.ridge_solver,
                ..config.ridge.clone()
            };
            independence_across_replicates(
                &scenario,
                config.independence.biomarker - 1,
                config.independence.replicates,
                &ridge,
            )
            .map_err(|e| {
                let b = config.independence.biomarker;
                match e {
                    Error::IndexHasInteraction { .. } => Error::InvalidConfig(format!(
                        "independence.biomarker: X{b} carries an interaction effect in the scenario"
                    )),
                    Error::IndexOutOfRange { m, .. } => Error::InvalidConfig(format!(
                        "independence.biomarker: {b} exceeds the {m} biomarkers of the scenario"
                    )),
                    other => other,
                }
            })
        }
    }
}

/// Reads a one-column list of p-values; a non-numeric first line is taken as a header.
pub fn read_pvalues(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidData(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        match cell.parse::<f64>() {
            Ok(p) if (0.0..=1.0).contains(&p) => out.push(p),
            Ok(p) => {
                return Err(Error::InvalidData(format!(
                    "line {}: p-value {p} outside [0, 1]",
                    i + 1
                )))
            }
            Err(_) if i == 0 => {}
            Err(_) => {
                return Err(Error::NonNumericCell {
                    row: i + 1,
                    column: "p_value".into(),
                    value: cell.to_string(),
                })
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyAfterFiltering("no p-values in input".into()));
    }
    Ok(out)
}

pub fn write_adjustment(dir: &Path, pvalues: &[f64], adj: &Adjustment) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = csv_writer(&dir.join("adjusted.csv"))?;
    w.write_record(["index", "p_value", "threshold", "rejected"])?;
    for (i, p) in pvalues.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            fmt6(*p),
            fmt6(adj.thresholds[i]),
            adj.rejected[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Argument parsing and dispatch
// ---------------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(name = "twostage", version, about = "Two-stage tests for biomarker-by-treatment interactions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a testing procedure on a trial dataset.
    Analyze(AnalyzeArgs),
    /// Monte Carlo power and FWER study.
    Simulate(SimulateArgs),
    /// Correlation between stage-1 and stage-2 statistics.
    Independence(IndependenceArgs),
    /// Multiplicity adjustment of a one-column list of p-values.
    Adjust(AdjustArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// TOML document whose values override the flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub outcome: Option<String>,
    #[arg(long)]
    pub treatment: Option<String>,
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long)]
    pub delimiter: Option<String>,
    /// Treat the first column as a row identifier.
    #[arg(long)]
    pub id_column: bool,
}

#[derive(Debug, Args)]
pub struct ProcedureArgs {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub alpha1: Option<f64>,
    #[arg(long)]
    pub bucket_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub method: Option<Procedure>,
    #[command(flatten)]
    pub procedure: ProcedureArgs,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub preset: Option<String>,
    /// desk (m = 200) or paper (m = 1000).
    #[arg(long)]
    pub scale: Option<Scale>,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Restrict the study to one method.
    #[arg(long)]
    pub method: Option<Procedure>,
    #[command(flatten)]
    pub procedure: ProcedureArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct IndependenceArgs {
    /// across_biomarkers or across_replicates.
    #[arg(long)]
    pub mode: Option<IndependenceMode>,
    #[command(flatten)]
    pub data: DataArgs,
    /// 1-based null biomarker for across_replicates.
    #[arg(long)]
    pub biomarker: Option<usize>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Args)]
pub struct AdjustArgs {
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// bonferroni, sidak, holm or hochberg.
    #[arg(long)]
    pub method: Option<AdjustMethod>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[command(flatten)]
    pub common: CommonArgs,
}

impl std::str::FromStr for IndependenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "across_biomarkers" => Ok(IndependenceMode::AcrossBiomarkers),
            "across_replicates" => Ok(IndependenceMode::AcrossReplicates),
            other => Err(Error::InvalidConfig(format!(
                "mode must be across_biomarkers or across_replicates, got {other:?}"
            ))),
        }
    }
}

fn apply_common(cfg: &mut RunConfig, a: &CommonArgs) {
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.ridge.cv_seed = s;
    }
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(p) = &a.input {
        cfg.input.path = Some(p.clone());
    }
    if let Some(o) = &a.outcome {
        cfg.input.outcome = Some(o.clone());
    }
    if let Some(t) = &a.treatment {
        cfg.input.treatment = Some(t.clone());
    }
    if let Some(f) = a.family {
        cfg.input.family = f;
    }
    if let Some(d) = &a.delimiter {
        cfg.input.delimiter = d.clone();
    }
    cfg.input.id_column |= a.id_column;
}

fn apply_procedure(cfg: &mut RunConfig, a: &ProcedureArgs) {
    if let Some(v) = a.alpha {
        cfg.analysis.alpha = v;
    }
    if let Some(v) = a.alpha1 {
        cfg.analysis.alpha1 = v;
    }
    if let Some(v) = a.bucket_size {
        cfg.analysis.bucket_size = v;
    }
}

impl Command {
    fn common(&self) -> &CommonArgs {
        match self {
            Command::Analyze(a) => &a.common,
            Command::Simulate(a) => &a.common,
            Command::Independence(a) => &a.common,
            Command::Adjust(a) => &a.common,
        }
    }

    /// Flags first, then the `--config` document on top.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        apply_common(&mut cfg, self.common());
        match self {
            Command::Analyze(a) => {
                apply_data(&mut cfg, &a.data);
                apply_procedure(&mut cfg, &a.procedure);
                if let Some(m) = a.method {
                    cfg.analysis.method = m;
                }
                if let Some(k) = a.top_k {
                    cfg.analysis.top_k = k;
                }
            }
            Command::Simulate(a) => {
                apply_procedure(&mut cfg, &a.procedure);
                if let Some(p) = &a.preset {
                    cfg.simulation.preset = Some(p.clone());
                }
                if let Some(s) = a.scale {
                    cfg.simulation.scale = s;
                }
                if let Some(r) = a.replicates {
                    cfg.simulation.replicates = r;
                }
                if let Some(m) = a.method {
                    cfg.simulation.methods = vec![m];
                }
            }
            Command::Independence(a) => {
                apply_data(&mut cfg, &a.data);
                if let Some(m) = a.mode {
                    cfg.independence.mode = m;
                }
                if let Some(b) = a.biomarker {
                    cfg.independence.biomarker = b;
                }
                if let Some(r) = a.replicates {
                    cfg.independence.replicates = r;
                }
            }
            Command::Adjust(a) => {
                if let Some(p) = &a.input {
                    cfg.input.path = Some(p.clone());
                }
                if let Some(m) = a.method {
                    cfg.adjust.method = m;
                }
                if let Some(v) = a.alpha {
                    cfg.adjust.alpha = v;
                }
            }
        }
        if let Some(path) = &self.common().config {
            let text = fs::read_to_string(path).map_err(|e| {
                Error::InvalidConfig(format!("config: cannot read {}: {e}", path.display()))
            })?;
            cfg = cfg.overlay_toml(&text)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Process exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_)
        | Error::PresetNotFound(_)
        | Error::IndexHasInteraction { .. }
        | Error::IndexOutOfRange { .. } => 2,
        Error::InvalidData(_)
        | Error::NonNumericCell { .. }
        | Error::NonBinaryTreatment { .. }
        | Error::EmptyAfterFiltering(_)
        | Error::DimensionMismatch(_)
        | Error::SingleTreatmentArm
        | Error::DegenerateBiomarker { .. }
        | Error::InsufficientPairs { .. } => 3,
        Error::RankDeficient { .. }
        | Error::NotConverged { .. }
        | Error::NoInteractionCluster
        | Error::InvalidRanking { .. }
        | Error::Io(_) => 4,
    }
}

/// Executes a parsed command, returning the lines to print on success.
pub fn execute(command: &Command) -> Result<Vec<String>> {
    let cfg = command.run_config()?;
    let dir = cfg.out_dir.clone();
    match command {
        Command::Analyze(_) => {
            let out = run_analysis(&cfg)?;
            out.write(&dir, &cfg)?;
            let mut lines = vec![format!(
                "{}: {} of {} biomarkers rejected",
                out.report.method,
                out.report.rejected().len(),
                out.m
            )];
            lines.extend(out.report.caveat.clone());
            Ok(lines)
        }
        Command::Simulate(_) => {
            let out = run_simulation(&cfg)?;
            out.write(&dir, &cfg)?;
            Ok(vec![format!(
                "{} rows written to {}",
                out.table.rows.len(),
                dir.join("power_table.csv").display()
            )])
        }
        Command::Independence(_) => {
            let report = run_independence(&cfg)?;
            write_independence(&dir, &report)?;
            Ok(vec![format!(
                "{}: r = {} (95% CI {} to {}), n = {}",
                report.mode,
                fmt6(report.estimate),
                fmt6(report.ci95.0),
                fmt6(report.ci95.1),
                report.n_pairs
            )])
        }
        Command::Adjust(_) => {
            let path = cfg
                .input
                .path
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("input.path: required".into()))?;
            let pvalues = read_pvalues(path)?;
            let adj = adjust(&pvalues, cfg.adjust.method, cfg.adjust.alpha)?;
            write_adjustment(&dir, &pvalues, &adj)?;
            Ok(vec![format!(
                "{}: {} of {} rejected",
                adj.method,
                adj.rejected.iter().filter(|&&r| r).count(),
                pvalues.len()
            )])
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
