//! High-quality subset selection for fine-tuning a student.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSet, LineStore, ModelRole};
use crate::error::{Error, Result};
use crate::metrics::{chrf, mean_logprob_to_prob, word_count, ChrfParams};
use crate::rng;

/// Sidecar with the teacher's mean token log-probability per record.
pub const DEFAULT_CONFIDENCE_SCORE: &str = "teacher-mean-logprob";

/// All bounds are strict: a record qualifies only when it exceeds each one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionCriteria {
    pub chrf_min: f64,
    pub conf_min: f64,
    pub min_source_tokens: usize,
    pub n: usize,
    pub seed: u64,
    pub chrf: ChrfParams,
}

impl Default for SelectionCriteria {
    fn default() -> Self {
        SelectionCriteria {
            chrf_min: 90.0,
            conf_min: 0.9,
            min_source_tokens: 5,
            n: 500_000,
            seed: 0,
            chrf: ChrfParams::default(),
        }
    }
}

impl SelectionCriteria {
    pub fn validate(&self) -> Result<()> {
        self.chrf.validate()?;
        if !(0.0..=100.0).contains(&self.chrf_min) {
            return Err(Error::InvalidConfig(format!(
                "chrf_min {} outside [0, 100]",
                self.chrf_min
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_min) {
            return Err(Error::InvalidConfig(format!(
                "conf_min {} outside [0, 1]",
                self.conf_min
            )));
        }
        if self.n == 0 {
            return Err(Error::InvalidConfig("selection size n must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Sorted record indices.
    pub indices: Vec<usize>,
    pub n_qualifying: usize,
    pub n_selected: usize,
    pub criteria: SelectionCriteria,
    pub seed: u64,
}

impl Selection {
    /// Summary without the index list.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "n_qualifying": self.n_qualifying,
            "n_selected": self.n_selected,
            "criteria": self.criteria,
            "seed": self.seed,
        })
    }

    pub fn is_short(&self) -> bool {
        self.n_selected < self.criteria.n
    }
}

fn subsample(qualifying: Vec<usize>, criteria: &SelectionCriteria, what: &str) -> Selection {
    let n_qualifying = qualifying.len();
    let indices = if n_qualifying > criteria.n {
        rng::sample_sorted(n_qualifying, criteria.n, criteria.seed)
            .into_iter()
            .map(|p| qualifying[p])
            .collect()
    } else {
        if n_qualifying < criteria.n {
            log::warn!(
                "only {n_qualifying} records qualify for the {what} selection, fewer than the requested {}",
                criteria.n
            );
        }
        qualifying
    };
    Selection {
        n_selected: indices.len(),
        indices,
        n_qualifying,
        criteria: criteria.clone(),
        seed: criteria.seed,
    }
}

fn long_enough(sources: &LineStore, i: usize, min_tokens: usize) -> bool {
    word_count(sources.get(i)) > min_tokens
}

/// Teacher translations with chrF against the corpus target above
/// `chrf_min`, teacher confidence above `conf_min` and a long enough
/// source. Confidence is `exp` of the mean token log-probability sidecar;
/// NaN confidence never qualifies.
pub fn select_high_quality(
    corpus: &CorpusSet,
    teacher: &ModelRole,
    criteria: &SelectionCriteria,
    confidence_score: &str,
) -> Result<Selection> {
    criteria.validate()?;
    let hyps = corpus.translations(teacher)?;
    let conf = corpus.scores(confidence_score)?;
    let (sources, targets) = (corpus.sources(), corpus.targets());
    let qualifying: Vec<usize> = (0..corpus.n_records())
        .into_par_iter()
        .filter(|&i| {
            long_enough(sources, i, criteria.min_source_tokens)
                && mean_logprob_to_prob(conf.get(i)) > criteria.conf_min
                && chrf(hyps.get(i), targets.get(i), &criteria.chrf) > criteria.chrf_min
        })
        .collect();
    if qualifying.is_empty() {
        return Err(Error::Degenerate("no record meets the selection criteria".into()));
    }
    Ok(subsample(qualifying, criteria, "high-quality"))
}

/// Comparison baseline: the same length filter, no quality or confidence filter.
pub fn select_random_baseline(corpus: &CorpusSet, criteria: &SelectionCriteria) -> Result<Selection> {
    criteria.validate()?;
    let sources = corpus.sources();
    let qualifying: Vec<usize> = (0..corpus.n_records())
        .into_par_iter()
        .filter(|&i| long_enough(sources, i, criteria.min_source_tokens))
        .collect();
    if qualifying.is_empty() {
        return Err(Error::Degenerate("no record meets the length filter".into()));
    }
    Ok(subsample(qualifying, criteria, "random baseline"))
}

/// Target side written next to the selected sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneTarget {
    #[default]
    CorpusTargets,
    TeacherTranslations,
}

/// Write `selected.src` and `selected.tgt` under `out_dir`, aligned by line.
pub fn emit_finetune_set(
    corpus: &CorpusSet,
    selection: &Selection,
    target: FinetuneTarget,
    out_dir: &Path,
) -> Result<()> {
    if selection.indices.is_empty() {
        return Err(Error::Degenerate("selection is empty".into()));
    }
    let tgt_store = match target {
        FinetuneTarget::CorpusTargets => corpus.targets(),
        FinetuneTarget::TeacherTranslations => corpus.translations(&ModelRole::Teacher)?,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (name, store) in [("selected.src", corpus.sources()), ("selected.tgt", tgt_store)] {
        let path = out_dir.join(name);
        let mut w = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
        for &i in &selection.indices {
            writeln!(w, "{}", store.get(i)).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
