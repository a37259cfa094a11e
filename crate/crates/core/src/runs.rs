//! Training-run records: ingestion, validation, smoothing and splitting.
//!
//! Token counts and model sizes are raw counts (not billions). The fitted
//! constants shipped in [`crate::laws::SubOptimalParams::reference`] produce
//! plausible losses only under that convention.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laws::LawParams;

/// Largest integer exactly representable in an `f64`.
pub const MAX_COUNT: u64 = 1 << 53;

/// Column order used when writing CSV.
pub const CSV_COLUMNS: [&str; 8] = [
    "run_id",
    "model_size",
    "tokens",
    "loss",
    "step",
    "batch_size",
    "learning_rate",
    "dataset_tag",
];

const REQUIRED_COLUMNS: [&str; 4] = ["run_id", "model_size", "tokens", "loss"];

#[derive(Debug, Error)]
pub enum RunsError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: malformed JSON record: {message}")]
    Json { row: usize, message: String },
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: invalid value {value:?} for `{field}`")]
    InvalidValue {
        row: usize,
        field: &'static str,
        value: String,
    },
    #[error("row {row}: `{field}` must be positive, got {value}")]
    NonPositiveValue {
        row: usize,
        field: &'static str,
        value: f64,
    },
    #[error("row {row}: tokens of run `{run_id}` do not strictly increase")]
    NonMonotoneTokens { run_id: String, row: usize },
    #[error("run series is empty")]
    EmptySeries,
    #[error("run `{run_id}` has {len} records, fewer than the smoothing window {window}")]
    WindowLargerThanRun { run_id: String, len: usize, window: usize },
    #[error("run `{run_id}` has {len} records, too few to split at fraction {fraction}")]
    TooFewRecords { run_id: String, len: usize, fraction: f64 },
    #[error("row {row}: required field `{field}` is missing")]
    MissingField { row: usize, field: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = RunsError> = std::result::Result<T, E>;

/// One logged checkpoint of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub run_id: String,
    /// Non-embedding parameter count (N).
    pub model_size: u64,
    /// Cumulative training tokens at this record (D).
    pub tokens: u64,
    /// Cross-entropy loss in nats.
    pub loss: f64,
    #[serde(default)]
    pub step: Option<u64>,
    #[serde(default)]
    pub batch_size: Option<u64>,
    #[serde(default)]
    pub learning_rate: Option<f64>,
    #[serde(default)]
    pub dataset_tag: Option<String>,
}

impl TrainingRun {
    pub fn new(run_id: impl Into<String>, model_size: u64, tokens: u64, loss: f64) -> Self {
        Self {
            run_id: run_id.into(),
            model_size,
            tokens,
            loss,
            step: None,
            batch_size: None,
            learning_rate: None,
            dataset_tag: None,
        }
    }

    pub fn with_step(mut self, step: u64) -> Self {
        self.step = Some(step);
        self
    }

    pub fn compute(&self) -> f64 {
        compute_flops(self.model_size as f64, self.tokens as f64)
    }

    pub fn otr(&self) -> f64 {
        otr(self.model_size as f64, self.tokens as f64)
    }

    fn validate(&self, row: usize) -> Result<()> {
        if self.model_size == 0 {
            return Err(RunsError::NonPositiveValue {
                row,
                field: "model_size",
                value: 0.0,
            });
        }
        if self.tokens == 0 {
            return Err(RunsError::NonPositiveValue {
                row,
                field: "tokens",
                value: 0.0,
            });
        }
        if !(self.loss.is_finite() && self.loss > 0.0) {
            return Err(RunsError::NonPositiveValue {
                row,
                field: "loss",
                value: self.loss,
            });
        }
        if self.model_size > MAX_COUNT || self.tokens > MAX_COUNT {
            return Err(RunsError::InvalidValue {
                row,
                field: "tokens",
                value: format!("{} exceeds 2^53", self.model_size.max(self.tokens)),
            });
        }
        if self.batch_size == Some(0) {
            return Err(RunsError::NonPositiveValue {
                row,
                field: "batch_size",
                value: 0.0,
            });
        }
        if let Some(lr) = self.learning_rate {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(RunsError::NonPositiveValue {
                    row,
                    field: "learning_rate",
                    value: lr,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetadata {
    pub source: Option<String>,
    /// Seconds since the Unix epoch.
    pub ingested_at: Option<u64>,
    /// Law that generated the records, for synthetic fixtures.
    pub ground_truth: Option<LawParams>,
}

/// A validated, non-empty, ordered collection of records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSeries {
    records: Vec<TrainingRun>,
    pub metadata: SeriesMetadata,
}

impl RunSeries {
    /// Validates `records`. Row numbers in errors are 1-based positions.
    pub fn new(records: Vec<TrainingRun>) -> Result<Self> {
        let rows: Vec<usize> = (1..=records.len()).collect();
        Self::with_rows(records, &rows)
    }

    fn with_rows(records: Vec<TrainingRun>, rows: &[usize]) -> Result<Self> {
        if records.is_empty() {
            return Err(RunsError::EmptySeries);
        }
        let mut last: HashMap<&str, (u64, Option<u64>)> = HashMap::new();
        for (rec, &row) in records.iter().zip(rows) {
            rec.validate(row)?;
            if let Some(&(prev_tokens, prev_step)) = last.get(rec.run_id.as_str()) {
                let step_ok = match (prev_step, rec.step) {
                    (Some(a), Some(b)) => b > a,
                    _ => true,
                };
                if rec.tokens <= prev_tokens || !step_ok {
                    return Err(RunsError::NonMonotoneTokens {
                        run_id: rec.run_id.clone(),
                        row,
                    });
                }
            }
            last.insert(&rec.run_id, (rec.tokens, rec.step));
        }
        Ok(Self {
            records,
            metadata: SeriesMetadata::default(),
        })
    }

    pub fn records(&self) -> &[TrainingRun] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn min_loss(&self) -> f64 {
        self.records.iter().map(|r| r.loss).fold(f64::INFINITY, f64::min)
    }

    pub fn into_records(self) -> Vec<TrainingRun> {
        self.records
    }

    /// Record indices grouped by run id, in order of first appearance.
    pub fn run_groups(&self) -> Vec<(String, Vec<usize>)> {
        let mut order: Vec<(String, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<&str, usize> = HashMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            match slot.get(rec.run_id.as_str()) {
                Some(&s) => order[s].1.push(i),
                None => {
                    slot.insert(&rec.run_id, order.len());
                    order.push((rec.run_id.clone(), vec![i]));
                }
            }
        }
        order
    }

    /// Keeps records matching `pred`; `None` when nothing is left.
    pub fn filter(&self, mut pred: impl FnMut(&TrainingRun) -> bool) -> Option<Self> {
        let records: Vec<_> = self.records.iter().filter(|r| pred(r)).cloned().collect();
        if records.is_empty() {
            return None;
        }
        Some(Self {
            records,
            metadata: self.metadata.clone(),
        })
    }

    /// Concatenates two series (e.g. fit and holdout) without revalidating
    /// cross-series token order.
    pub fn concat(&self, other: &RunSeries) -> Self {
        let mut records = self.records.clone();
        records.extend(other.records.iter().cloned());
        Self {
            records,
            metadata: self.metadata.clone(),
        }
    }
}

/// Training compute, `6 * N * D` FLOPs.
pub fn compute_flops(model_size: f64, tokens: f64) -> f64 {
    debug_assert!(model_size > 0.0 && tokens > 0.0);
    6.0 * model_size * tokens
}

/// Over-training ratio `D / N`.
pub fn otr(model_size: f64, tokens: f64) -> f64 {
    debug_assert!(model_size > 0.0 && tokens > 0.0);
    tokens / model_size
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunFormat {
    Csv,
    Jsonl,
}

impl RunFormat {
    /// Guesses from the file extension; anything but `.jsonl`/`.json` is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") | Some("ndjson") => RunFormat::Jsonl,
            _ => RunFormat::Csv,
        }
    }
}

/// Reads and validates a run file. Row numbers in errors are file line numbers.
pub fn ingest(path: &Path, format: RunFormat) -> Result<RunSeries> {
    let file = File::open(path).map_err(|source| RunsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut series = match format {
        RunFormat::Csv => read_csv(file)?,
        RunFormat::Jsonl => read_jsonl(BufReader::new(file))?,
    };
    series.metadata.source = Some(path.display().to_string());
    series.metadata.ingested_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs());
    Ok(series)
}

fn parse_count(raw: &str, row: usize, field: &'static str) -> Result<u64> {
    let invalid = || RunsError::InvalidValue {
        row,
        field,
        value: raw.to_string(),
    };
    let value: f64 = raw.trim().parse().map_err(|_| invalid())?;
    if !value.is_finite() {
        return Err(invalid());
    }
    if value <= 0.0 {
        return Err(RunsError::NonPositiveValue { row, field, value });
    }
    if value.fract() != 0.0 || value > MAX_COUNT as f64 {
        return Err(invalid());
    }
    Ok(value as u64)
}

fn parse_real(raw: &str, row: usize, field: &'static str) -> Result<f64> {
    let value: f64 = raw.trim().parse().map_err(|_| RunsError::InvalidValue {
        row,
        field,
        value: raw.to_string(),
    })?;
    if value.is_nan() {
        return Err(RunsError::InvalidValue {
            row,
            field,
            value: raw.to_string(),
        });
    }
    if value <= 0.0 || value.is_infinite() {
        return Err(RunsError::NonPositiveValue { row, field, value });
    }
    Ok(value)
}

fn optional(raw: Option<&str>) -> Option<&str> {
    raw.map(str::trim).filter(|s| !s.is_empty())
}

pub fn read_csv(reader: impl Read) -> Result<RunSeries> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for name in REQUIRED_COLUMNS {
        if col(name).is_none() {
            return Err(RunsError::MissingColumn(name.to_string()));
        }
    }
    let idx: Vec<Option<usize>> = CSV_COLUMNS.iter().map(|c| col(c)).collect();

    let mut records = Vec::new();
    let mut rows = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let rec = result?;
        let row = rec.position().map(|p| p.line() as usize).unwrap_or(i + 2);
        let field = |k: usize| idx[k].and_then(|c| rec.get(c));
        let required = |k: usize| -> Result<&str> {
            optional(field(k)).ok_or(RunsError::MissingField {
                row,
                field: CSV_COLUMNS[k],
            })
        };
        let run = TrainingRun {
            run_id: required(0)?.to_string(),
            model_size: parse_count(required(1)?, row, "model_size")?,
            tokens: parse_count(required(2)?, row, "tokens")?,
            loss: parse_real(required(3)?, row, "loss")?,
            step: optional(field(4))
                .map(|s| {
                    s.parse::<u64>().map_err(|_| RunsError::InvalidValue {
                        row,
                        field: "step",
                        value: s.to_string(),
                    })
                })
                .transpose()?,
            batch_size: optional(field(5))
                .map(|s| parse_count(s, row, "batch_size"))
                .transpose()?,
            learning_rate: optional(field(6))
                .map(|s| parse_real(s, row, "learning_rate"))
                .transpose()?,
            dataset_tag: optional(field(7)).map(str::to_string),
        };
        records.push(run);
        rows.push(row);
    }
    RunSeries::with_rows(records, &rows)
}

pub fn read_jsonl(reader: impl BufRead) -> Result<RunSeries> {
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let row = i + 1;
        let line = line.map_err(|source| RunsError::Io {
            path: "<jsonl>".into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| RunsError::Json {
            row,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| RunsError::Json {
            row,
            message: "expected an object".into(),
        })?;
        for name in REQUIRED_COLUMNS {
            if !obj.contains_key(name) {
                return Err(RunsError::MissingColumn(name.to_string()));
            }
        }
        let text = |key: &'static str| -> Option<String> {
            match obj.get(key) {
                None | Some(serde_json::Value::Null) => None,
                Some(serde_json::Value::String(s)) => optional(Some(s)).map(str::to_string),
                Some(other) => Some(other.to_string()),
            }
        };
        let required =
            |key: &'static str| -> Result<String> { text(key).ok_or(RunsError::MissingField { row, field: key }) };
        let run = TrainingRun {
            run_id: required("run_id")?,
            model_size: parse_count(&required("model_size")?, row, "model_size")?,
            tokens: parse_count(&required("tokens")?, row, "tokens")?,
            loss: parse_real(&required("loss")?, row, "loss")?,
            step: text("step")
                .map(|s| {
                    s.parse::<u64>().map_err(|_| RunsError::InvalidValue {
                        row,
                        field: "step",
                        value: s,
                    })
                })
                .transpose()?,
            batch_size: text("batch_size")
                .map(|s| parse_count(&s, row, "batch_size"))
                .transpose()?,
            learning_rate: text("learning_rate")
                .map(|s| parse_real(&s, row, "learning_rate"))
                .transpose()?,
            dataset_tag: text("dataset_tag"),
        };
        records.push(run);
        rows.push(row);
    }
    RunSeries::with_rows(records, &rows)
}

fn opt_to_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(ToString::to_string).unwrap_or_default()
}

pub fn write_csv(series: &RunSeries, writer: impl Write) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(CSV_COLUMNS)?;
    for r in series.records() {
        wtr.write_record([
            r.run_id.clone(),
            r.model_size.to_string(),
            r.tokens.to_string(),
            r.loss.to_string(),
            opt_to_string(&r.step),
            opt_to_string(&r.batch_size),
            opt_to_string(&r.learning_rate),
            r.dataset_tag.clone().unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|source| RunsError::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}

pub fn write_jsonl(series: &RunSeries, mut writer: impl Write) -> Result<()> {
    for r in series.records() {
        let line = serde_json::to_string(r).expect("records always serialize");
        writeln!(writer, "{line}").map_err(|source| RunsError::Io {
            path: "<jsonl>".into(),
            source,
        })?;
    }
    Ok(())
}

/// Writes `series` to `path` in `format`.
pub fn save(series: &RunSeries, path: &Path, format: RunFormat) -> Result<()> {
    let file = File::create(path).map_err(|source| RunsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let writer = std::io::BufWriter::new(file);
    match format {
        RunFormat::Csv => write_csv(series, writer),
        RunFormat::Jsonl => write_jsonl(series, writer),
    }
}

/// Record order within each run: by step when every record has one, else by tokens.
fn ordered_group(series: &RunSeries, group: &[usize]) -> Vec<usize> {
    let recs = series.records();
    let mut idx = group.to_vec();
    if idx.iter().all(|&i| recs[i].step.is_some()) {
        idx.sort_by_key(|&i| recs[i].step);
    } else {
        idx.sort_by_key(|&i| recs[i].tokens);
    }
    idx
}

/// Offsets `-left..=right` covered by a centered window of `window` steps.
pub fn window_offsets(window: usize) -> (usize, usize) {
    let left = (window - 1) / 2;
    (left, window - 1 - left)
}

/// Smooths losses per run with a truncated Gaussian kernel over a centered
/// window, renormalizing the weights where the window hits a run boundary.
/// `sigma` defaults to `window / 4`.
pub fn gaussian_smooth(series: &RunSeries, window: usize, sigma: Option<f64>) -> Result<RunSeries> {
    if window == 0 {
        return Err(RunsError::InvalidArgument("window must be at least 1".into()));
    }
    let sigma = sigma.unwrap_or(window as f64 / 4.0);
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(RunsError::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let (left, right) = window_offsets(window);
    let mut out = series.clone();
    for (run_id, group) in series.run_groups() {
        if group.len() < window {
            return Err(RunsError::WindowLargerThanRun {
                run_id,
                len: group.len(),
                window,
            });
        }
        let order = ordered_group(series, &group);
        let losses: Vec<f64> = order.iter().map(|&i| series.records[i].loss).collect();
        for (pos, &rec_idx) in order.iter().enumerate() {
            let lo = pos.saturating_sub(left);
            let hi = (pos + right).min(losses.len() - 1);
            let center = losses[pos];
            let mut weight_sum = 0.0;
            let mut acc = 0.0;
            for (j, &value) in losses.iter().enumerate().take(hi + 1).skip(lo) {
                let offset = j as f64 - pos as f64;
                let w = (-offset * offset / (2.0 * sigma * sigma)).exp();
                weight_sum += w;
                acc += w * (value - center);
            }
            out.records[rec_idx].loss = center + acc / weight_sum;
        }
    }
    Ok(out)
}

/// Per run, the first `ceil(fraction * len)` records by token order go to the
/// fit split and the rest to holdout. Runs keep their first-appearance order.
pub fn split_fit_holdout(series: &RunSeries, fraction: f64) -> Result<(RunSeries, RunSeries)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(RunsError::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut fit = Vec::new();
    let mut holdout = Vec::new();
    for (run_id, group) in series.run_groups() {
        let len = group.len();
        let exact = fraction * len as f64;
        // Absorb representation error such as 0.1 * 30 = 3.0000000000000004.
        let n_fit = (exact - 1e-9).ceil() as usize;
        if exact < 1.0 - 1e-9 || n_fit >= len {
            return Err(RunsError::TooFewRecords { run_id, len, fraction });
        }
        let mut idx = group.clone();
        idx.sort_by_key(|&i| series.records[i].tokens);
        fit.extend(idx[..n_fit].iter().map(|&i| series.records[i].clone()));
        holdout.extend(idx[n_fit..].iter().map(|&i| series.records[i].clone()));
    }
    let wrap = |records| RunSeries {
        records,
        metadata: series.metadata.clone(),
    };
    Ok((wrap(fit), wrap(holdout)))
}
