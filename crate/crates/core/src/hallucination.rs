//! Oscillatory and natural hallucination detection.
//!
//! Oscillatory hallucinations are judged per record from the most frequent
//! token bigram of the translation. Natural hallucinations need a corpus-wide
//! view: a translation emitted identically for many different sources. The
//! scan counts distinct translations in parallel partitions, merges the
//! counts, then flags records in a second sequential pass.

use std::collections::HashMap;
use std::io::Write;
use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{role_score_key, trim_segment, CorpusSet, ModelRole, ScoreStore};
use crate::error::{Error, Result};

const SCAN_CHUNK: usize = 16 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OschalConfig {
    /// The top bigram must occur strictly more often than this.
    pub min_bigram_count: usize,
    pub source_ratio: f64,
    /// Sources with at least this many tokens are excluded.
    pub max_source_tokens: usize,
}

impl Default for OschalConfig {
    fn default() -> Self {
        OschalConfig {
            min_bigram_count: 10,
            source_ratio: 4.0,
            max_source_tokens: 50,
        }
    }
}

impl OschalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_bigram_count < 1 {
            return Err(Error::InvalidConfig("min_bigram_count must be at least 1".into()));
        }
        if !(self.source_ratio >= 1.0) {
            return Err(Error::InvalidConfig("source_ratio must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NathalConfig {
    pub min_repeats: usize,
    /// Records whose QE score exceeds this are left out of the scan.
    pub qe_exclusion_threshold: f64,
    /// Base name of the per-role QE sidecar; the sidecar key is `<name>@<role>`.
    pub qe_score_name: String,
}

impl Default for NathalConfig {
    fn default() -> Self {
        NathalConfig {
            min_repeats: 5,
            qe_exclusion_threshold: 0.85,
            qe_score_name: "comet-qe-22".into(),
        }
    }
}

impl NathalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_repeats < 2 {
            return Err(Error::InvalidConfig("min_repeats must be at least 2".into()));
        }
        if !(self.qe_exclusion_threshold > 0.0 && self.qe_exclusion_threshold < 1.0) {
            return Err(Error::InvalidConfig("qe_exclusion_threshold must be in (0, 1)".into()));
        }
        if self.qe_score_name.is_empty() {
            return Err(Error::InvalidConfig("qe_score_name must be non-empty".into()));
        }
        Ok(())
    }

    pub fn score_key(&self, role: &ModelRole) -> String {
        role_score_key(&self.qe_score_name, role.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalFlags {
    pub index: usize,
    pub oschal: bool,
    pub nathal: bool,
    pub excluded_oschal: bool,
    pub excluded_nathal: bool,
}

pub const HAL_TSV_HEADER: &str = "index\toschal\tnathal\texcl_osc\texcl_nat";

impl HalFlags {
    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.index, self.oschal as u8, self.nathal as u8, self.excluded_oschal as u8, self.excluded_nathal as u8
        )
    }
}

pub fn write_hal_tsv<W: Write>(mut out: W, flags: &[HalFlags]) -> std::io::Result<()> {
    writeln!(out, "{HAL_TSV_HEADER}")?;
    for f in flags {
        writeln!(out, "{}", f.tsv_row())?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Verdict {
    pub flag: bool,
    pub excluded: bool,
}

/// The most frequent overlapping token bigram and its count; ties go to the
/// bigram that occurs first.
pub fn top_bigram<'a>(tokens: &[&'a str]) -> Option<((&'a str, &'a str), usize)> {
    let mut counts: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
    for (pos, w) in tokens.windows(2).enumerate() {
        counts.entry((w[0], w[1])).or_insert((0, pos)).0 += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(bigram, (count, _))| (bigram, count))
}

fn count_bigram(tokens: &[&str], bigram: (&str, &str)) -> usize {
    tokens
        .windows(2)
        .filter(|w| w[0] == bigram.0 && w[1] == bigram.1)
        .count()
}

pub fn detect_oschal(source: &str, translation: &str, cfg: &OschalConfig) -> Verdict {
    let src: Vec<&str> = source.split_whitespace().collect();
    if src.len() >= cfg.max_source_tokens {
        return Verdict {
            flag: false,
            excluded: true,
        };
    }
    let hyp: Vec<&str> = translation.split_whitespace().collect();
    let flag = match top_bigram(&hyp) {
        Some((bigram, in_translation)) => {
            let in_source = count_bigram(&src, bigram);
            in_translation > cfg.min_bigram_count && in_translation as f64 >= cfg.source_ratio * in_source as f64
        }
        None => false,
    };
    Verdict { flag, excluded: false }
}

/// Occurrence counts of every distinct (trimmed) translation that survived QE exclusion.
///
/// Keys borrow from the corpus stores, so memory grows with the number of
/// distinct translations only.
#[derive(Debug, Clone, Default)]
pub struct TranslationCounts<'a> {
    counts: HashMap<&'a str, u32>,
    qe: Option<&'a ScoreStore>,
    threshold: f64,
    min_repeats: usize,
}

impl<'a> TranslationCounts<'a> {
    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, translation: &str) -> u32 {
        self.counts.get(trim_segment(translation)).copied().unwrap_or(0)
    }

    fn excluded(&self, index: usize) -> bool {
        match self.qe {
            None => true,
            Some(store) => {
                let v = store.get(index);
                v.is_nan() || v > self.threshold
            }
        }
    }

    /// Verdict for record `index` whose translation is `translation`.
    pub fn verdict(&self, index: usize, translation: &str) -> Verdict {
        if self.excluded(index) {
            return Verdict {
                flag: false,
                excluded: true,
            };
        }
        Verdict {
            flag: self.count(translation) as usize >= self.min_repeats,
            excluded: false,
        }
    }

    /// Flagged groups as `(size, translation)`, largest first, then lexicographic.
    pub fn groups(&self) -> Vec<(usize, String)> {
        let mut groups: Vec<(usize, String)> = self
            .counts
            .iter()
            .filter(|(_, &c)| c as usize >= self.min_repeats)
            .map(|(t, &c)| (c as usize, t.to_string()))
            .collect();
        groups.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        groups
    }
}

fn merge_counts<'a>(mut a: HashMap<&'a str, u32>, mut b: HashMap<&'a str, u32>) -> HashMap<&'a str, u32> {
    if a.len() < b.len() {
        std::mem::swap(&mut a, &mut b);
    }
    for (k, v) in b {
        *a.entry(k).or_insert(0) += v;
    }
    a
}

/// First phase of the natural-hallucination scan: count surviving translations.
///
/// A missing QE sidecar leaves every record excluded.
pub fn count_translations<'a>(
    corpus: &'a CorpusSet,
    role: &ModelRole,
    cfg: &NathalConfig,
) -> Result<TranslationCounts<'a>> {
    cfg.validate()?;
    let hyps = corpus.translations(role)?;
    let qe = corpus.scores(&cfg.score_key(role)).ok();
    let mut out = TranslationCounts {
        counts: HashMap::new(),
        qe,
        threshold: cfg.qe_exclusion_threshold,
        min_repeats: cfg.min_repeats,
    };
    let Some(qe) = qe else {
        log::warn!("no {} sidecar; NatHal excludes every record", cfg.score_key(role));
        return Ok(out);
    };
    let n = corpus.n_records();
    out.counts = (0..n.div_ceil(SCAN_CHUNK))
        .into_par_iter()
        .map(|c| {
            let range = c * SCAN_CHUNK..((c + 1) * SCAN_CHUNK).min(n);
            let mut local: HashMap<&'a str, u32> = HashMap::new();
            for (t, score) in hyps.iter_range(range.clone()).zip(qe.iter_range(range)) {
                if score.is_nan() || score > cfg.qe_exclusion_threshold {
                    continue;
                }
                *local.entry(trim_segment(t)).or_insert(0) += 1;
            }
            local
        })
        .reduce(HashMap::new, merge_counts);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct NathalScan {
    pub verdicts: Vec<Verdict>,
    pub groups: Vec<(usize, String)>,
}

/// Flag every record whose translation is repeated at least `min_repeats`
/// times among the records that survive QE exclusion.
pub fn nathal_scan(corpus: &CorpusSet, role: &ModelRole, cfg: &NathalConfig) -> Result<NathalScan> {
    let counts = count_translations(corpus, role, cfg)?;
    let hyps = corpus.translations(role)?;
    let verdicts = hyps.iter().enumerate().map(|(i, t)| counts.verdict(i, t)).collect();
    Ok(NathalScan {
        verdicts,
        groups: counts.groups(),
    })
}

pub const GROUP_TSV_HEADER: &str = "count\ttranslation";

pub fn write_group_tsv<W: Write>(mut out: W, groups: &[(usize, String)]) -> std::io::Result<()> {
    writeln!(out, "{GROUP_TSV_HEADER}")?;
    for (count, translation) in groups {
        writeln!(out, "{count}\t{translation}")?;
    }
    Ok(())
}

/// Second phase over a contiguous range: both hallucination verdicts per record.
pub fn scan_hallucinations(
    corpus: &CorpusSet,
    role: &ModelRole,
    oschal: &OschalConfig,
    counts: &TranslationCounts<'_>,
    range: Range<usize>,
) -> Result<Vec<HalFlags>> {
    let hyps = corpus.translations(role)?;
    let range = range.start.min(corpus.n_records())..range.end.min(corpus.n_records());
    let sources = corpus.sources().iter_range(range.clone());
    let translations = hyps.iter_range(range.clone());
    Ok(range
        .zip(sources.zip(translations))
        .map(|(index, (s, t))| {
            let osc = detect_oschal(s, t, oschal);
            let nat = counts.verdict(index, t);
            HalFlags {
                index,
                oschal: osc.flag,
                nathal: nat.flag,
                excluded_oschal: osc.excluded,
                excluded_nathal: nat.excluded,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalCounts {
    pub records: usize,
    pub oschal: usize,
    pub oschal_excluded: usize,
    pub nathal: usize,
    pub nathal_excluded: usize,
}

impl HalCounts {
    pub fn add(&mut self, f: &HalFlags) {
        self.records += 1;
        self.oschal += f.oschal as usize;
        self.oschal_excluded += f.excluded_oschal as usize;
        self.nathal += f.nathal as usize;
        self.nathal_excluded += f.excluded_nathal as usize;
    }

    pub fn merge(&mut self, o: &HalCounts) {
        self.records += o.records;
        self.oschal += o.oschal;
        self.oschal_excluded += o.oschal_excluded;
        self.nathal += o.nathal;
        self.nathal_excluded += o.nathal_excluded;
    }

    pub fn oschal_rate(&self) -> Result<f64> {
        rate(self.oschal, self.records - self.oschal_excluded, "OscHal")
    }

    pub fn nathal_rate(&self) -> Result<f64> {
        rate(self.nathal, self.records - self.nathal_excluded, "NatHal")
    }
}

fn rate(flagged: usize, scanned: usize, what: &str) -> Result<f64> {
    if scanned == 0 {
        return Err(Error::Degenerate(format!(
            "{what} rate undefined: every record is excluded"
        )));
    }
    Ok(100.0 * flagged as f64 / scanned as f64)
}

/// `(oschal_rate, nathal_rate)` as percentages of the non-excluded records.
pub fn hallucination_rates(flags: &[HalFlags]) -> Result<(f64, f64)> {
    let mut c = HalCounts::default();
    for f in flags {
        c.add(f);
    }
    Ok((c.oschal_rate()?, c.nathal_rate()?))
}
