//! Data subgroups: random, quality buckets, counterfactual-memorization (CM)
//! buckets, and teacher-confidence extremes, plus per-group evaluation.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{role_score_key, sample_indices, CorpusSet, LineStore, ModelRole, ScoreStore};
use crate::error::{Error, Result};
use crate::memorization::Reference;
use crate::metrics::{chrf, exact_match, msttr, ChrfParams, DEFAULT_MSTTR_WINDOW};
use crate::rng;

pub const QUALITY_BOUNDARIES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const CM_BOUNDARIES: [f64; 3] = [0.2, 0.3, 0.4];
pub const DEFAULT_CAP: usize = 10_000;
pub const DEFAULT_RANDOM_SIZE: usize = 50_000;
/// Both IN and OUT at or below this: the low-low group.
pub const LOW_LOW_MAX: f64 = 0.2;
/// Both IN and OUT at or above this: the high-high group.
pub const HIGH_HIGH_MIN: f64 = 0.8;

/// Counterfactual memorization of one record: IN minus OUT.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CmScore {
    pub index: usize,
    pub in_score: f64,
    pub out_score: f64,
    pub cm: f64,
}

/// Scores of one model trained on a known subset of the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelEvidence {
    pub model_id: String,
    /// `true` when the record was in this model's training data.
    pub membership: Vec<bool>,
    /// Geometric-mean target-token probability per record; NaN when not scored.
    pub scores: Vec<f64>,
}

impl ModelEvidence {
    pub fn new(model_id: impl Into<String>, membership: Vec<bool>, scores: Vec<f64>) -> Result<Self> {
        let model_id = model_id.into();
        if membership.len() != scores.len() {
            return Err(Error::InvalidConfig(format!(
                "evidence {model_id}: {} membership bits but {} scores",
                membership.len(),
                scores.len()
            )));
        }
        if let Some((i, s)) = scores
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_nan() && !(0.0..=1.0).contains(*s))
        {
            return Err(Error::Record {
                index: i,
                message: format!("evidence {model_id}: probability {s} outside [0, 1]"),
            });
        }
        Ok(ModelEvidence {
            model_id,
            membership,
            scores,
        })
    }

    /// Load a `0`/`1` membership mask and a probability sidecar.
    pub fn load(model_id: impl Into<String>, mask: &Path, scores: &Path) -> Result<Self> {
        let lines = LineStore::open(mask)?;
        let membership = lines
            .iter()
            .enumerate()
            .map(|(i, l)| match l.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::MalformedValue {
                    path: mask.to_path_buf(),
                    line: i + 1,
                    value: other.to_string(),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<f64> = ScoreStore::open(scores)?.iter().collect();
        Self::new(model_id, membership, scores)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn cm_for(evidence: &[ModelEvidence], index: usize) -> Option<CmScore> {
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for m in evidence {
        let (Some(&member), Some(&score)) = (m.membership.get(index), m.scores.get(index)) else {
            continue;
        };
        if score.is_nan() {
            continue;
        }
        if member {
            in_sum += score;
            in_n += 1;
        } else {
            out_sum += score;
            out_n += 1;
        }
    }
    if in_n == 0 || out_n == 0 {
        return None;
    }
    let in_score = in_sum / in_n as f64;
    let out_score = out_sum / out_n as f64;
    Some(CmScore {
        index,
        in_score,
        out_score,
        cm: in_score - out_score,
    })
}

/// IN is the mean over models that trained on the record, OUT the mean over
/// models that did not. With a single model on each side this is the coarse
/// one-teacher/one-held-out estimate.
pub fn compute_cm(evidence: &[ModelEvidence], index: usize) -> Result<CmScore> {
    cm_for(evidence, index).ok_or_else(|| Error::Record {
        index,
        message: "needs at least one scored IN model and one scored OUT model".into(),
    })
}

/// CM for every record that has both IN and OUT evidence, in index order.
pub fn compute_all_cm(evidence: &[ModelEvidence], n_records: usize) -> Vec<CmScore> {
    (0..n_records).filter_map(|i| cm_for(evidence, i)).collect()
}

/// Bucket index for `value`: half-open `[b_i, b_{i+1})` buckets, values below
/// the first boundary in bucket 0, the top bucket closed. `None` for NaN.
pub fn assign_bucket(value: f64, boundaries: &[f64]) -> Option<usize> {
    if value.is_nan() {
        return None;
    }
    Some(boundaries.iter().take_while(|b| **b <= value).count())
}

fn check_boundaries(boundaries: &[f64]) -> Result<()> {
    if boundaries.windows(2).any(|w| !(w[0] < w[1])) || boundaries.iter().any(|b| b.is_nan()) {
        return Err(Error::InvalidConfig(format!(
            "bucket boundaries {boundaries:?} are not strictly increasing"
        )));
    }
    Ok(())
}

pub fn bucket_quality(scores: &[f64], boundaries: &[f64]) -> Result<Vec<Option<usize>>> {
    check_boundaries(boundaries)?;
    Ok(scores.iter().map(|&s| assign_bucket(s, boundaries)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CmAssignment {
    pub index: usize,
    pub bucket: usize,
    pub low_low: bool,
    pub high_high: bool,
}

/// CM bucket per record, plus the (possibly overlapping) low-low and high-high flags.
pub fn bucket_cm(cm_scores: &[CmScore], boundaries: &[f64]) -> Result<Vec<CmAssignment>> {
    check_boundaries(boundaries)?;
    Ok(cm_scores
        .iter()
        .map(|c| CmAssignment {
            index: c.index,
            bucket: assign_bucket(c.cm, boundaries).expect("CM is never NaN"),
            low_low: c.in_score <= LOW_LOW_MAX && c.out_score <= LOW_LOW_MAX,
            high_high: c.in_score >= HIGH_HIGH_MIN && c.out_score >= HIGH_HIGH_MIN,
        })
        .collect())
}

/// Bottom-`k` and top-`k` records by score; NaN scores are skipped.
///
/// Records are ordered by `(score, index)`; the bottom set is the first `k`,
/// the top set the last `k`, so equal scores never land in both.
pub fn confidence_extremes(scores: &[f64], k: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut scored: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| !s.is_nan())
        .map(|(i, &s)| (s, i))
        .collect();
    if k == 0 || scored.len() < 2 * k {
        return Err(Error::Degenerate(format!(
            "confidence extremes of size {k} need at least {} scored records, found {}",
            2 * k,
            scored.len()
        )));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut bottom: Vec<usize> = scored[..k].iter().map(|x| x.1).collect();
    let mut top: Vec<usize> = scored[scored.len() - k..].iter().map(|x| x.1).collect();
    bottom.sort_unstable();
    top.sort_unstable();
    Ok((bottom, top))
}

/// Uniform seeded subsample of at most `cap` indices, sorted. Groups at or
/// under the cap are returned unchanged.
pub fn cap_group(indices: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    if indices.len() <= cap {
        return indices.to_vec();
    }
    let mut out: Vec<usize> = rng::sample_sorted(indices.len(), cap, seed)
        .into_iter()
        .map(|p| indices[p])
        .collect();
    out.sort_unstable();
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubgroupKind {
    Random,
    Quality,
    Cm,
    CmLowlow,
    CmHighhigh,
    ConfidenceLow,
    ConfidenceHigh,
}

impl fmt::Display for SubgroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubgroupKind::Random => "random",
            SubgroupKind::Quality => "quality",
            SubgroupKind::Cm => "cm",
            SubgroupKind::CmLowlow => "cm_lowlow",
            SubgroupKind::CmHighhigh => "cm_highhigh",
            SubgroupKind::ConfidenceLow => "confidence_low",
            SubgroupKind::ConfidenceHigh => "confidence_high",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupSpec {
    pub kind: SubgroupKind,
    /// Bucket boundaries for quality and CM groups; defaults apply when empty.
    #[serde(default)]
    pub boundaries: Vec<f64>,
    #[serde(default = "default_cap")]
    pub cap: usize,
    /// Size of the random group.
    #[serde(default = "default_random_size")]
    pub size: usize,
    /// Explicit seed; otherwise derived from the run seed and the group name.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Sidecar holding the per-record score (quality: QE of the corpus
    /// targets; confidence: teacher mean token log-probability).
    #[serde(default)]
    pub score_name: Option<String>,
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

fn default_random_size() -> usize {
    DEFAULT_RANDOM_SIZE
}

pub const DEFAULT_QUALITY_SCORE: &str = "comet-qe-22@corpus";
pub const DEFAULT_CONFIDENCE_SCORE: &str = "teacher-mean-logprob";

impl SubgroupSpec {
    pub fn new(kind: SubgroupKind) -> Self {
        SubgroupSpec {
            kind,
            boundaries: Vec::new(),
            cap: DEFAULT_CAP,
            size: DEFAULT_RANDOM_SIZE,
            seed: None,
            score_name: None,
        }
    }

    /// The full set: random, five quality buckets, four CM buckets with the
    /// low-low and high-high groups, and both confidence extremes.
    pub fn standard_set() -> Vec<SubgroupSpec> {
        use SubgroupKind::*;
        [Random, Quality, Cm, CmLowlow, CmHighhigh, ConfidenceLow, ConfidenceHigh]
            .into_iter()
            .map(SubgroupSpec::new)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        check_boundaries(&self.boundaries)?;
        if self.cap < 1 {
            return Err(Error::InvalidConfig("subgroup cap must be at least 1".into()));
        }
        Ok(())
    }

    fn boundaries_or(&self, default: &[f64]) -> Vec<f64> {
        if self.boundaries.is_empty() {
            default.to_vec()
        } else {
            self.boundaries.clone()
        }
    }

    fn seed_for(&self, run_seed: u64, name: &str) -> u64 {
        self.seed
            .unwrap_or_else(|| rng::substream(run_seed, &format!("subgroup:{name}")))
    }
}

fn fmt_bound(x: f64) -> String {
    let s = format!("{x}");
    if s.contains('.') || s.contains("inf") {
        s
    } else {
        format!("{s}.0")
    }
}

/// Labels like `[0.2,0.4)`; the last bucket is closed at `top`.
pub fn bucket_labels(boundaries: &[f64], bottom: f64, top: f64) -> Vec<String> {
    let mut edges = vec![bottom];
    edges.extend_from_slice(boundaries);
    edges.push(top);
    let last = edges.len() - 2;
    (0..=last)
        .map(|i| {
            let close = if i == last { ']' } else { ')' };
            format!("[{},{}{close}", fmt_bound(edges[i]), fmt_bound(edges[i + 1]))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub name: String,
    pub kind: SubgroupKind,
    pub indices: Vec<usize>,
}

/// Build every group named by `specs`. `evidence` is only needed by CM kinds.
pub fn build_subgroups(
    corpus: &CorpusSet,
    specs: &[SubgroupSpec],
    evidence: &[ModelEvidence],
    run_seed: u64,
) -> Result<Vec<Subgroup>> {
    let n = corpus.n_records();
    let mut cm: Option<Vec<CmScore>> = None;
    let mut cm_scores = |evidence: &[ModelEvidence]| -> Result<Vec<CmScore>> {
        if let Some(c) = &cm {
            return Ok(c.clone());
        }
        if evidence.is_empty() {
            return Err(Error::InvalidConfig("CM subgroups need model evidence".into()));
        }
        if let Some(m) = evidence.iter().find(|m| m.len() != n) {
            return Err(Error::InvalidConfig(format!(
                "evidence {} has {} records, corpus has {n}",
                m.model_id,
                m.len()
            )));
        }
        let scores = compute_all_cm(evidence, n);
        cm = Some(scores.clone());
        Ok(scores)
    };

    let mut groups = Vec::new();
    for spec in specs {
        spec.validate()?;
        let capped = |name: String, indices: Vec<usize>| Subgroup {
            indices: cap_group(&indices, spec.cap, spec.seed_for(run_seed, &format!("cap:{name}"))),
            kind: spec.kind,
            name,
        };
        match spec.kind {
            SubgroupKind::Random => {
                let size = spec.size.min(n);
                if size < spec.size {
                    log::warn!("random group shrunk to the corpus size {n}");
                }
                groups.push(Subgroup {
                    name: "random".into(),
                    kind: spec.kind,
                    indices: sample_indices(n, size, spec.seed_for(run_seed, "random"))?,
                });
            }
            SubgroupKind::Quality => {
                let boundaries = spec.boundaries_or(&QUALITY_BOUNDARIES);
                let store = corpus.scores(spec.score_name.as_deref().unwrap_or(DEFAULT_QUALITY_SCORE))?;
                let labels = bucket_labels(&boundaries, 0.0, 1.0);
                let mut members = vec![Vec::new(); labels.len()];
                for (i, s) in store.iter().enumerate() {
                    if let Some(b) = assign_bucket(s, &boundaries) {
                        members[b].push(i);
                    }
                }
                for (label, idx) in labels.into_iter().zip(members) {
                    groups.push(capped(format!("quality{label}"), idx));
                }
            }
            SubgroupKind::Cm => {
                let boundaries = spec.boundaries_or(&CM_BOUNDARIES);
                let scores = cm_scores(evidence)?;
                let labels = bucket_labels(&boundaries, 0.0, 1.0);
                let mut members = vec![Vec::new(); labels.len()];
                for a in bucket_cm(&scores, &boundaries)? {
                    members[a.bucket].push(a.index);
                }
                for (label, idx) in labels.into_iter().zip(members) {
                    groups.push(capped(format!("cm{label}"), idx));
                }
            }
            SubgroupKind::CmLowlow | SubgroupKind::CmHighhigh => {
                let scores = cm_scores(evidence)?;
                let low = spec.kind == SubgroupKind::CmLowlow;
                let idx = bucket_cm(&scores, &CM_BOUNDARIES)?
                    .into_iter()
                    .filter(|a| if low { a.low_low } else { a.high_high })
                    .map(|a| a.index)
                    .collect();
                groups.push(capped(spec.kind.to_string(), idx));
            }
            SubgroupKind::ConfidenceLow | SubgroupKind::ConfidenceHigh => {
                let store = corpus.scores(spec.score_name.as_deref().unwrap_or(DEFAULT_CONFIDENCE_SCORE))?;
                let values: Vec<f64> = store.iter().collect();
                let (bottom, top) = confidence_extremes(&values, spec.cap)?;
                let idx = if spec.kind == SubgroupKind::ConfidenceLow {
                    bottom
                } else {
                    top
                };
                groups.push(Subgroup {
                    name: spec.kind.to_string(),
                    kind: spec.kind,
                    indices: idx,
                });
            }
        }
    }
    Ok(groups)
}

pub fn write_group_dump<W: Write>(mut out: W, groups: &[Subgroup]) -> std::io::Result<()> {
    for g in groups {
        for i in &g.indices {
            writeln!(out, "{}\t{i}", g.name)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub reference: Reference,
    pub msttr_window: usize,
    pub chrf: ChrfParams,
    /// Base sidecar names; the per-column key is `<name>@<role>` (`@corpus` for the targets).
    pub comet22_name: String,
    pub comet_qe22_name: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            reference: Reference::CorpusTargets,
            msttr_window: DEFAULT_MSTTR_WINDOW,
            chrf: ChrfParams::default(),
            comet22_name: "comet-22".into(),
            comet_qe22_name: "comet-qe-22".into(),
        }
    }
}

/// Column label of the corpus targets in subgroup tables.
pub const CORPUS_COLUMN: &str = "corpus";

/// One row of a subgroup table. Absent values are `None`, never zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupRow {
    pub group: String,
    pub role: String,
    pub n: usize,
    pub exact_match: Option<f64>,
    pub chrf: Option<f64>,
    pub comet22: Option<f64>,
    pub comet_qe22: Option<f64>,
    pub msttr: Option<f64>,
}

pub const SUBGROUP_TSV_HEADER: &str = "group\trole\tn\texact_match\tchrf\tcomet22\tcomet_qe22\tmsttr";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"))
}

impl SubgroupRow {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.group,
            self.role,
            self.n,
            fmt_opt(self.exact_match),
            fmt_opt(self.chrf),
            fmt_opt(self.comet22),
            fmt_opt(self.comet_qe22),
            fmt_opt(self.msttr)
        )
    }
}

pub fn write_subgroup_tsv<W: Write>(mut out: W, rows: &[SubgroupRow]) -> std::io::Result<()> {
    writeln!(out, "{SUBGROUP_TSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.tsv_row())?;
    }
    Ok(())
}

/// Long-format CSV `group,role,metric,value`, skipping absent values.
pub fn write_subgroup_plot_csv<W: Write>(mut out: W, rows: &[SubgroupRow]) -> std::io::Result<()> {
    writeln!(out, "group,role,metric,value")?;
    for r in rows {
        let cols = [
            ("exact_match", r.exact_match),
            ("chrf", r.chrf),
            ("comet22", r.comet22),
            ("comet_qe22", r.comet_qe22),
            ("msttr", r.msttr),
        ];
        for (metric, v) in cols {
            if let Some(v) = v {
                writeln!(out, "{},{},{metric},{v:.6}", r.group, r.role)?;
            }
        }
    }
    Ok(())
}

fn mean_score(corpus: &CorpusSet, key: &str, group: &[usize]) -> Option<f64> {
    let store = corpus.scores(key).ok()?;
    let (sum, n) = group
        .iter()
        .map(|&i| store.get(i))
        .filter(|v| !v.is_nan())
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn group_msttr(store: &LineStore, group: &[usize], window: usize) -> Option<f64> {
    msttr(group.iter().map(|&i| store.get(i)), window).ok()
}

/// Metric rows for one group: one per role, then one for the corpus targets.
pub fn evaluate_subgroup(
    corpus: &CorpusSet,
    name: &str,
    group: &[usize],
    roles: &[ModelRole],
    cfg: &EvalConfig,
) -> Result<Vec<SubgroupRow>> {
    if group.is_empty() {
        return Err(Error::Degenerate(format!("subgroup {name} is empty")));
    }
    if let Some(&bad) = group.iter().find(|&&i| i >= corpus.n_records()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            n_records: corpus.n_records(),
        });
    }
    let refs = cfg.reference.store(corpus)?;
    let mut rows = Vec::with_capacity(roles.len() + 1);
    for role in roles {
        let hyps = corpus.translations(role)?;
        let per_record: Vec<(bool, f64)> = group
            .par_iter()
            .map(|&i| {
                let (h, r) = (hyps.get(i), refs.get(i));
                (exact_match(h, r), chrf(h, r, &cfg.chrf))
            })
            .collect();
        let matches = per_record.iter().filter(|x| x.0).count();
        let chrf_sum: f64 = per_record.iter().map(|x| x.1).sum();
        rows.push(SubgroupRow {
            group: name.to_string(),
            role: role.to_string(),
            n: group.len(),
            exact_match: Some(100.0 * matches as f64 / group.len() as f64),
            chrf: Some(chrf_sum / group.len() as f64),
            comet22: mean_score(corpus, &role_score_key(&cfg.comet22_name, role.as_str()), group),
            comet_qe22: mean_score(corpus, &role_score_key(&cfg.comet_qe22_name, role.as_str()), group),
            msttr: group_msttr(hyps, group, cfg.msttr_window),
        });
    }
    rows.push(SubgroupRow {
        group: name.to_string(),
        role: CORPUS_COLUMN.to_string(),
        n: group.len(),
        exact_match: None,
        chrf: None,
        comet22: mean_score(corpus, &role_score_key(&cfg.comet22_name, CORPUS_COLUMN), group),
        comet_qe22: mean_score(corpus, &role_score_key(&cfg.comet_qe22_name, CORPUS_COLUMN), group),
        msttr: group_msttr(corpus.targets(), group, cfg.msttr_window),
    });
    Ok(rows)
}
