//! Replication and extractive memorization (ExMem).
//!
//! A record is replicated when the model's translation of the full source
//! equals the reference target. It is extractively memorized when, in
//! addition, the model already emits the reference after seeing only a
//! truncated prefix of the source. Records where an early emission is
//! plausibly legitimate (short sources, wrong languages, skewed lengths,
//! copies) are excluded before the prefix check.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{trim_segment, CorpusSet, LineStore, ModelRole, RecordView};
use crate::error::{Error, Result};
use crate::metrics::{exact_match, length_ratio, word_count};

/// Largest truncation fraction that still counts as a prefix.
pub const MAX_PREFIX_FRACTION: f64 = 0.75;

const SCAN_CHUNK: usize = 16 * 1024;

/// Which target a translation is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The original corpus targets.
    CorpusTargets,
    /// The teacher's translations, i.e. the student's training targets.
    TeacherTargets,
}

impl Reference {
    pub fn as_str(&self) -> &'static str {
        match self {
            Reference::CorpusTargets => "corpus_targets",
            Reference::TeacherTargets => "teacher_targets",
        }
    }

    pub fn store<'a>(&self, corpus: &'a CorpusSet) -> Result<&'a LineStore> {
        match self {
            Reference::CorpusTargets => Ok(corpus.targets()),
            Reference::TeacherTargets => corpus.translations(&ModelRole::Teacher),
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExmemConfig {
    pub prefix_fractions: Vec<f64>,
    pub min_source_words: usize,
    pub max_length_ratio: f64,
    /// Only takes effect when the corpus carries a language-ID sidecar.
    pub use_lang_check: bool,
}

impl Default for ExmemConfig {
    fn default() -> Self {
        ExmemConfig {
            prefix_fractions: vec![0.25, 0.5, 0.75],
            min_source_words: 4,
            max_length_ratio: 1.3,
            use_lang_check: true,
        }
    }
}

impl ExmemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.prefix_fractions.is_empty() {
            return Err(Error::InvalidConfig("at least one prefix fraction is required".into()));
        }
        if let Some(f) = self
            .prefix_fractions
            .iter()
            .find(|f| !(**f > 0.0 && **f <= MAX_PREFIX_FRACTION))
        {
            return Err(Error::InvalidConfig(format!(
                "prefix fraction {f} is outside (0, {MAX_PREFIX_FRACTION}]"
            )));
        }
        if self.min_source_words < 1 {
            return Err(Error::InvalidConfig("min_source_words must be at least 1".into()));
        }
        if !(self.max_length_ratio > 1.0) {
            return Err(Error::InvalidConfig("max_length_ratio must exceed 1".into()));
        }
        Ok(())
    }

    fn sorted_fractions(&self) -> Vec<f64> {
        let mut f = self.prefix_fractions.clone();
        f.sort_by(f64::total_cmp);
        f.dedup();
        f
    }

    /// Whether the wrong-language rule applies to `corpus`.
    pub fn lang_check_active(&self, corpus: &CorpusSet) -> bool {
        self.use_lang_check && corpus.lang_ids().is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExclusionReason {
    TooShort,
    WrongLanguage,
    LengthRatio,
    SourceEqualsTarget,
    MissingData,
}

impl ExclusionReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExclusionReason::TooShort => "too_short",
            ExclusionReason::WrongLanguage => "wrong_language",
            ExclusionReason::LengthRatio => "length_ratio",
            ExclusionReason::SourceEqualsTarget => "source_equals_target",
            ExclusionReason::MissingData => "missing_data",
        }
    }
}

impl fmt::Display for ExclusionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExmemResult {
    pub index: usize,
    pub replicated: bool,
    pub eligible: bool,
    pub exclusion_reason: Option<ExclusionReason>,
    pub exmem: bool,
    /// Smallest truncation fraction whose decode reproduced the reference.
    pub witness_fraction: Option<f64>,
}

impl ExmemResult {
    /// `index  replicated  eligible  reason  exmem  witness_fraction`
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.index,
            self.replicated as u8,
            self.eligible as u8,
            self.exclusion_reason.map_or("-", |r| r.as_str()),
            self.exmem as u8,
            self.witness_fraction.map_or_else(|| "-".to_string(), |f| f.to_string()),
        )
    }
}

pub const EXMEM_TSV_HEADER: &str = "index\treplicated\teligible\treason\texmem\twitness_fraction";

pub fn write_exmem_tsv<W: Write>(mut out: W, results: &[ExmemResult]) -> std::io::Result<()> {
    writeln!(out, "{EXMEM_TSV_HEADER}")?;
    for r in results {
        writeln!(out, "{}", r.tsv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExmemProvenance {
    /// ExMem with respect to the corpus targets.
    Primary,
    /// ExMem with respect to the teacher's targets only.
    Secondary,
}

/// First `max(1, floor(fraction * words))` whitespace words of `source`, single-space joined.
pub fn truncate_source(source: &str, fraction: f64) -> Result<String> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "truncation fraction {fraction} is outside (0, 1]"
        )));
    }
    let words: Vec<&str> = source.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Degenerate("cannot truncate an empty source".into()));
    }
    let keep = ((fraction * words.len() as f64).floor() as usize).max(1);
    Ok(words[..keep].join(" "))
}

/// Percentage of records whose `role` translation equals the reference.
pub fn replication_rate(corpus: &CorpusSet, role: &ModelRole, reference: Reference) -> Result<f64> {
    let hyps = corpus.translations(role)?;
    let refs = reference.store(corpus)?;
    if corpus.n_records() == 0 {
        return Err(Error::Degenerate("replication rate of an empty corpus".into()));
    }
    let hits = hyps.iter().zip(refs.iter()).filter(|(h, r)| exact_match(h, r)).count();
    Ok(100.0 * hits as f64 / corpus.n_records() as f64)
}

/// Declared language codes plus per-record identified codes, when the check is active.
type LangEvidence<'a> = Option<(Option<(&'a str, &'a str)>, (&'a str, &'a str))>;

/// The exclusion rules in order; the first rule that fires is reported.
fn exclusion(source: &str, target: &str, lang: LangEvidence<'_>, cfg: &ExmemConfig) -> Option<ExclusionReason> {
    if word_count(source) < cfg.min_source_words {
        return Some(ExclusionReason::TooShort);
    }
    if let Some((found, (want_src, want_tgt))) = lang {
        match found {
            None => return Some(ExclusionReason::MissingData),
            Some((src, tgt)) => {
                if !src.eq_ignore_ascii_case(want_src) || !tgt.eq_ignore_ascii_case(want_tgt) {
                    return Some(ExclusionReason::WrongLanguage);
                }
            }
        }
    }
    if length_ratio(source, target) > cfg.max_length_ratio {
        return Some(ExclusionReason::LengthRatio);
    }
    if trim_segment(source) == trim_segment(target) {
        return Some(ExclusionReason::SourceEqualsTarget);
    }
    None
}

fn declared_pair(corpus: &CorpusSet) -> Result<(&str, &str)> {
    corpus.declared_languages().ok_or_else(|| {
        Error::InvalidConfig(format!(
            "language check needs a pair like \"en-de\", got {:?}",
            corpus.language_pair()
        ))
    })
}

/// Exclusion verdict for one record against `reference`; `None` means eligible.
pub fn exmem_eligibility(
    record: &RecordView<'_>,
    reference: Reference,
    cfg: &ExmemConfig,
) -> Result<Option<ExclusionReason>> {
    let corpus = record.corpus();
    let target = reference.store(corpus)?.get(record.index());
    let lang = if cfg.lang_check_active(corpus) {
        Some((record.lang_ids().flatten(), declared_pair(corpus)?))
    } else {
        None
    };
    Ok(exclusion(record.source(), target, lang, cfg))
}

fn evaluate(
    index: usize,
    source: &str,
    reference: &str,
    translation: &str,
    prefixes: &[(f64, &str)],
    lang: LangEvidence<'_>,
    cfg: &ExmemConfig,
) -> ExmemResult {
    let replicated = exact_match(translation, reference);
    let reason = exclusion(source, reference, lang, cfg);
    let eligible = reason.is_none();
    let witness_fraction = if replicated && eligible {
        prefixes
            .iter()
            .find(|(_, decoded)| exact_match(decoded, reference))
            .map(|(f, _)| *f)
    } else {
        None
    };
    ExmemResult {
        index,
        replicated,
        eligible,
        exclusion_reason: reason,
        exmem: witness_fraction.is_some(),
        witness_fraction,
    }
}

fn prefix_stores<'a>(corpus: &'a CorpusSet, role: &ModelRole, cfg: &ExmemConfig) -> Result<Vec<(f64, &'a LineStore)>> {
    cfg.sorted_fractions()
        .into_iter()
        .map(|f| Ok((f, corpus.prefix_translations(role, f)?)))
        .collect()
}

/// ExMem verdict for a single record.
pub fn detect_exmem(
    record: &RecordView<'_>,
    role: &ModelRole,
    reference: Reference,
    cfg: &ExmemConfig,
) -> Result<ExmemResult> {
    let corpus = record.corpus();
    let i = record.index();
    let stores = prefix_stores(corpus, role, cfg)?;
    let prefixes: Vec<(f64, &str)> = stores.iter().map(|(f, s)| (*f, s.get(i))).collect();
    let lang = if cfg.lang_check_active(corpus) {
        Some((record.lang_ids().flatten(), declared_pair(corpus)?))
    } else {
        None
    };
    Ok(evaluate(
        i,
        record.source(),
        reference.store(corpus)?.get(i),
        record.translation(role)?,
        &prefixes,
        lang,
        cfg,
    ))
}

/// Evaluate a contiguous range of records, streaming through every store once.
pub fn scan_exmem(
    corpus: &CorpusSet,
    role: &ModelRole,
    reference: Reference,
    cfg: &ExmemConfig,
    range: Range<usize>,
) -> Result<Vec<ExmemResult>> {
    cfg.validate()?;
    let range = range.start.min(corpus.n_records())..range.end.min(corpus.n_records());
    let refs = reference.store(corpus)?;
    let hyps = corpus.translations(role)?;
    let prefix = prefix_stores(corpus, role, cfg)?;
    let declared = if cfg.lang_check_active(corpus) {
        Some(declared_pair(corpus)?)
    } else {
        None
    };

    let mut sources = corpus.sources().iter_range(range.clone());
    let mut targets = refs.iter_range(range.clone());
    let mut translations = hyps.iter_range(range.clone());
    let mut prefix_iters: Vec<_> = prefix.iter().map(|(f, s)| (*f, s.iter_range(range.clone()))).collect();
    let mut decoded: Vec<(f64, &str)> = Vec::with_capacity(prefix_iters.len());

    let mut out = Vec::with_capacity(range.len());
    for index in range {
        let source = sources.next().expect("aligned stores");
        let target = targets.next().expect("aligned stores");
        let translation = translations.next().expect("aligned stores");
        decoded.clear();
        for (f, it) in prefix_iters.iter_mut() {
            decoded.push((*f, it.next().expect("aligned stores")));
        }
        let lang = declared.map(|d| (corpus.lang_ids().and_then(|ids| ids.get(index)), d));
        out.push(evaluate(index, source, target, translation, &decoded, lang, cfg));
    }
    Ok(out)
}

/// Evaluate every record, in parallel chunks, in index order.
pub fn scan_exmem_all(
    corpus: &CorpusSet,
    role: &ModelRole,
    reference: Reference,
    cfg: &ExmemConfig,
) -> Result<Vec<ExmemResult>> {
    let n = corpus.n_records();
    let chunks: Vec<Vec<ExmemResult>> = (0..n.div_ceil(SCAN_CHUNK))
        .into_par_iter()
        .map(|c| {
            scan_exmem(
                corpus,
                role,
                reference,
                cfg,
                c * SCAN_CHUNK..((c + 1) * SCAN_CHUNK).min(n),
            )
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}

/// Percentage of replicated records that are extractively memorized; 0 when nothing replicated.
pub fn exmem_rate(results: &[ExmemResult]) -> f64 {
    let mut counts = ExmemCounts::default();
    for r in results {
        counts.add(r);
    }
    counts.exmem_rate()
}

/// Commutative tallies of ExMem results, for partitioned evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExmemCounts {
    pub records: usize,
    pub replicated: usize,
    pub eligible: usize,
    pub exmem: usize,
    pub excluded: BTreeMap<ExclusionReason, usize>,
}

impl ExmemCounts {
    pub fn add(&mut self, r: &ExmemResult) {
        self.records += 1;
        self.replicated += r.replicated as usize;
        self.eligible += r.eligible as usize;
        self.exmem += r.exmem as usize;
        if let Some(reason) = r.exclusion_reason {
            *self.excluded.entry(reason).or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &ExmemCounts) {
        self.records += other.records;
        self.replicated += other.replicated;
        self.eligible += other.eligible;
        self.exmem += other.exmem;
        for (k, v) in &other.excluded {
            *self.excluded.entry(*k).or_insert(0) += v;
        }
    }

    pub fn replication_rate(&self) -> Option<f64> {
        (self.records > 0).then(|| 100.0 * self.replicated as f64 / self.records as f64)
    }

    pub fn exmem_rate(&self) -> f64 {
        if self.replicated == 0 {
            log::warn!("ExMem rate requested with no replicated records; reporting 0");
            return 0.0;
        }
        100.0 * self.exmem as f64 / self.replicated as f64
    }
}

/// Primary when memorized w.r.t. the corpus targets, secondary when only w.r.t. the teacher's.
pub fn classify_provenance(wrt_corpus: &ExmemResult, wrt_teacher: &ExmemResult) -> Result<Option<ExmemProvenance>> {
    if wrt_corpus.index != wrt_teacher.index {
        return Err(Error::Record {
            index: wrt_corpus.index,
            message: format!(
                "provenance compares record {} with record {}",
                wrt_corpus.index, wrt_teacher.index
            ),
        });
    }
    Ok(if wrt_corpus.exmem {
        Some(ExmemProvenance::Primary)
    } else if wrt_teacher.exmem {
        Some(ExmemProvenance::Secondary)
    } else {
        None
    })
}
