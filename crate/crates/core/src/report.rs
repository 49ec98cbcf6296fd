//! Comparison tables: per-pair percent changes, cross-pair mean and
//! population std, and deterministic exports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// Metric names a table may hold, in display order. Rates are percentages.
pub const METRIC_REGISTRY: &[&str] = &[
    "replication_tc",
    "replication_tt",
    "exmem_tc",
    "exmem_tt",
    "exmem_primary",
    "exmem_secondary",
    "nathal",
    "oschal",
    "bleu",
    "chrf",
    "exact_match",
    "comet22",
    "comet_qe22",
    "msttr",
];

fn metric_rank(metric: &str) -> Result<usize> {
    METRIC_REGISTRY
        .iter()
        .position(|m| *m == metric)
        .ok_or_else(|| Error::UnknownMetric(metric.to_string()))
}

fn role_rank(role: &str) -> (usize, &str) {
    let rank = match role {
        "teacher" => 0,
        "student" => 1,
        "baseline" => 2,
        "corpus" => 4,
        _ => 3,
    };
    (rank, role)
}

/// Cells keyed by `(language_pair, role, metric)`. Pairs keep insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTable {
    pairs: Vec<String>,
    cells: BTreeMap<(String, String, String), f64>,
}

impl MetricTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: &str, role: &str, metric: &str, value: f64) -> Result<()> {
        metric_rank(metric)?;
        let key = (pair.to_string(), role.to_string(), metric.to_string());
        if self.cells.contains_key(&key) {
            return Err(Error::DuplicateKey(format!("({pair}, {role}, {metric})")));
        }
        if !self.pairs.iter().any(|p| p == pair) {
            self.pairs.push(pair.to_string());
        }
        self.cells.insert(key, value);
        Ok(())
    }

    pub fn get(&self, pair: &str, role: &str, metric: &str) -> Option<f64> {
        self.cells
            .get(&(pair.to_string(), role.to_string(), metric.to_string()))
            .copied()
    }

    pub fn cell(&self, pair: &str, role: &str, metric: &str) -> Result<f64> {
        self.get(pair, role, metric).ok_or_else(|| Error::MissingCell {
            pair: pair.to_string(),
            role: role.to_string(),
            metric: metric.to_string(),
        })
    }

    pub fn pairs(&self) -> &[String] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Add every cell of `other`; overlapping cells are an error.
    pub fn merge(&mut self, other: &MetricTable) -> Result<()> {
        for pair in &other.pairs {
            for ((p, role, metric), v) in other.cells.iter().filter(|((p, _, _), _)| p == pair) {
                self.insert(p, role, metric, *v)?;
            }
        }
        Ok(())
    }

    fn roles_of(&self, pair: &str) -> Vec<&str> {
        let mut roles: Vec<&str> = self
            .cells
            .keys()
            .filter(|(p, _, _)| p == pair)
            .map(|(_, r, _)| r.as_str())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        roles.sort_by_key(|r| role_rank(r));
        roles
    }

    fn metrics(&self) -> Vec<&str> {
        let present: BTreeSet<&str> = self.cells.keys().map(|(_, _, m)| m.as_str()).collect();
        METRIC_REGISTRY
            .iter()
            .copied()
            .filter(|m| present.contains(m))
            .collect()
    }

    /// Cells in display order: pair insertion order, role rank, registry order.
    pub fn rows(&self) -> Vec<(&str, &str, &str, f64)> {
        let metrics = self.metrics();
        let mut out = Vec::with_capacity(self.cells.len());
        for pair in &self.pairs {
            for role in self.roles_of(pair) {
                for m in &metrics {
                    if let Some(v) = self.get(pair, role, m) {
                        out.push((pair.as_str(), role, *m, v));
                    }
                }
            }
        }
        out
    }

    /// Inverse of the JSON export (the `summaries` key is ignored).
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("report JSON must be an object".into()))?;
        let mut t = MetricTable::new();
        for (pair, roles) in obj.iter().filter(|(k, _)| *k != "summaries") {
            let roles = roles
                .as_object()
                .ok_or_else(|| Error::InvalidConfig(format!("pair {pair}: expected an object of roles")))?;
            for (role, metrics) in roles {
                let metrics = metrics
                    .as_object()
                    .ok_or_else(|| Error::InvalidConfig(format!("{pair}/{role}: expected an object of metrics")))?;
                for (metric, v) in metrics {
                    let v = match v {
                        Value::Null => f64::NAN,
                        v => v
                            .as_f64()
                            .ok_or_else(|| Error::InvalidConfig(format!("{pair}/{role}/{metric}: not a number")))?,
                    };
                    t.insert(pair, role, metric, v)?;
                }
            }
        }
        Ok(t)
    }

    /// Inverse of the plot CSV export.
    pub fn from_plot_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(PLOT_CSV_HEADER) {
            return Err(Error::InvalidConfig(format!(
                "plot CSV must start with {PLOT_CSV_HEADER:?}"
            )));
        }
        let mut t = MetricTable::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidConfig(format!("plot CSV line {}: {line:?}", n + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            let v = if f[3] == "NA" {
                f64::NAN
            } else {
                f[3].parse().map_err(|_| bad())?
            };
            t.insert(f[0], f[1], f[2], v)?;
        }
        Ok(t)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "csv") {
            Self::from_plot_csv(&text)
        } else {
            let value: Value =
                serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            Self::from_json(&value)
        }
    }
}

/// `100 * (new - old) / old`.
pub fn percent_change(new: f64, old: f64) -> Result<f64> {
    if old == 0.0 {
        return Err(Error::Degenerate(format!("percent change from zero (new value {new})")));
    }
    Ok(100.0 * (new - old) / old)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Degenerate("cannot summarize an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    /// Per-pair percent change of subject over reference.
    PercentChange,
    /// Per-pair raw values of the subject.
    RawMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairValue {
    pub pair: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaSummary {
    pub metric: String,
    pub subject: String,
    /// Absent in raw-mean mode.
    pub reference: Option<String>,
    pub mode: SummaryMode,
    pub per_pair: Vec<PairValue>,
    pub mean: f64,
    pub std: f64,
}

/// Summary of per-pair values already computed by the caller.
pub fn summarize_deltas(
    metric: &str,
    subject: &str,
    reference: Option<&str>,
    per_pair: Vec<PairValue>,
) -> Result<DeltaSummary> {
    let values: Vec<f64> = per_pair.iter().map(|p| p.value).collect();
    let (mean, std) = mean_std(&values)?;
    Ok(DeltaSummary {
        metric: metric.to_string(),
        subject: subject.to_string(),
        mode: if reference.is_some() {
            SummaryMode::PercentChange
        } else {
            SummaryMode::RawMean
        },
        reference: reference.map(str::to_string),
        per_pair,
        mean,
        std,
    })
}

/// One summary per metric: percent change of `subject` over `reference`,
/// computed per pair first and then averaged over every pair in the table.
pub fn compare_models(
    table: &MetricTable,
    subject: &str,
    reference: &str,
    metrics: &[&str],
) -> Result<Vec<DeltaSummary>> {
    metrics
        .iter()
        .map(|m| {
            metric_rank(m)?;
            let per_pair = table
                .pairs()
                .iter()
                .map(|p| {
                    let value = percent_change(table.cell(p, subject, m)?, table.cell(p, reference, m)?)?;
                    Ok(PairValue { pair: p.clone(), value })
                })
                .collect::<Result<Vec<_>>>()?;
            summarize_deltas(m, subject, Some(reference), per_pair)
        })
        .collect()
}

/// Mean and population std of the raw values of `role` for each metric.
pub fn summarize_raw(table: &MetricTable, role: &str, metrics: &[&str]) -> Result<Vec<DeltaSummary>> {
    metrics
        .iter()
        .map(|m| {
            metric_rank(m)?;
            let per_pair = table
                .pairs()
                .iter()
                .map(|p| {
                    Ok(PairValue {
                        pair: p.clone(),
                        value: table.cell(p, role, m)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            summarize_deltas(m, role, None, per_pair)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Tsv,
    Json,
    Markdown,
    PlotCsv,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 4] = [
        ReportFormat::Tsv,
        ReportFormat::Json,
        ReportFormat::Markdown,
        ReportFormat::PlotCsv,
    ];

    pub fn file_name(&self, stem: &str) -> String {
        match self {
            ReportFormat::Tsv => format!("{stem}.tsv"),
            ReportFormat::Json => format!("{stem}.json"),
            ReportFormat::Markdown => format!("{stem}.md"),
            ReportFormat::PlotCsv => format!("{stem}.plot.csv"),
        }
    }
}

pub const TABLE_TSV_HEADER: &str = "pair\trole\tmetric\tvalue";
pub const SUMMARY_TSV_HEADER: &str = "metric\tsubject\treference\tmode\tmean\tstd\tper_pair";
pub const PLOT_CSV_HEADER: &str = "pair,role,metric,value";

fn value3(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v:.3}")
    }
}

fn pct1(v: f64) -> String {
    format!("{v:+.1}")
}

fn json_number(v: f64) -> Value {
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn summary_line(s: &DeltaSummary) -> String {
    let per_pair: Vec<String> = s
        .per_pair
        .iter()
        .map(|p| format!("{}={}", p.pair, pct1(p.value)))
        .collect();
    let (mean, std) = match s.mode {
        SummaryMode::PercentChange => (pct1(s.mean), format!("{:.1}", s.std)),
        SummaryMode::RawMean => (format!("{:.1}", s.mean), format!("{:.1}", s.std)),
    };
    format!(
        "{}\t{}\t{}\t{}\t{mean}\t{std}\t{}",
        s.metric,
        s.subject,
        s.reference.as_deref().unwrap_or("-"),
        match s.mode {
            SummaryMode::PercentChange => "percent_change",
            SummaryMode::RawMean => "raw_mean",
        },
        per_pair.join(";")
    )
}

/// Render a table and its summaries. Output is a pure function of the input.
pub fn emit(table: &MetricTable, summaries: &[DeltaSummary], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Tsv => {
            writeln!(out, "{TABLE_TSV_HEADER}").unwrap();
            for (p, r, m, v) in table.rows() {
                writeln!(out, "{p}\t{r}\t{m}\t{}", value3(v)).unwrap();
            }
            writeln!(out).unwrap();
            writeln!(out, "{SUMMARY_TSV_HEADER}").unwrap();
            for s in summaries {
                writeln!(out, "{}", summary_line(s)).unwrap();
            }
        }
        ReportFormat::PlotCsv => {
            writeln!(out, "{PLOT_CSV_HEADER}").unwrap();
            for (p, r, m, v) in table.rows() {
                writeln!(out, "{p},{r},{m},{}", value3(v)).unwrap();
            }
        }
        ReportFormat::Json => {
            let mut root = Map::new();
            for (p, r, m, v) in table.rows() {
                root.entry(p)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .unwrap()
                    .entry(r)
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .unwrap()
                    .insert(m.to_string(), json_number(v));
            }
            let summaries: Vec<Value> = summaries
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "metric": s.metric,
                        "subject": s.subject,
                        "reference": s.reference,
                        "mode": s.mode,
                        "per_pair": s.per_pair.iter().map(|p| serde_json::json!({"pair": p.pair, "value": json_number(p.value)})).collect::<Vec<_>>(),
                        "mean": json_number(s.mean),
                        "std": json_number(s.std),
                    })
                })
                .collect();
            root.insert("summaries".into(), Value::Array(summaries));
            out = serde_json::to_string_pretty(&Value::Object(root)).unwrap();
            out.push('\n');
        }
        ReportFormat::Markdown => {
            let metrics = table.metrics();
            write!(out, "| Pair | Model |").unwrap();
            for m in &metrics {
                write!(out, " {m} |").unwrap();
            }
            writeln!(out).unwrap();
            write!(out, "|---|---|").unwrap();
            for _ in &metrics {
                write!(out, "---:|").unwrap();
            }
            writeln!(out).unwrap();
            for pair in table.pairs() {
                for (k, role) in table.roles_of(pair).into_iter().enumerate() {
                    write!(out, "| {} | {role} |", if k == 0 { pair.as_str() } else { "" }).unwrap();
                    for m in &metrics {
                        let cell = table.get(pair, role, m).map_or_else(|| "n/a".to_string(), value3);
                        write!(out, " {cell} |").unwrap();
                    }
                    writeln!(out).unwrap();
                }
            }
            if !summaries.is_empty() {
                writeln!(out).unwrap();
                writeln!(out, "| Metric | Subject | Reference | Mean | Std |").unwrap();
                writeln!(out, "|---|---|---|---:|---:|").unwrap();
                for s in summaries {
                    let mean = match s.mode {
                        SummaryMode::PercentChange => format!("{}%", pct1(s.mean)),
                        SummaryMode::RawMean => format!("{:.1}", s.mean),
                    };
                    writeln!(
                        out,
                        "| {} | {} | {} | {mean} | {:.1} |",
                        s.metric,
                        s.subject,
                        s.reference.as_deref().unwrap_or("(raw mean)"),
                        s.std
                    )
                    .unwrap();
                }
            }
        }
    }
    out
}

/// Write all four formats as `<stem>.{tsv,json,md,plot.csv}` under `dir`.
pub fn write_all(dir: &Path, stem: &str, table: &MetricTable, summaries: &[DeltaSummary]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for f in ReportFormat::ALL {
        let path = dir.join(f.file_name(stem));
        std::fs::write(&path, emit(table, summaries, f)).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
