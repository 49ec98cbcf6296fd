//! Pure text metrics shared by every analysis.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::trim_segment;
use crate::error::{Error, Result};

/// Parameters of the character n-gram F-score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChrfParams {
    pub max_n: usize,
    pub beta: f64,
}

impl Default for ChrfParams {
    fn default() -> Self {
        ChrfParams { max_n: 6, beta: 2.0 }
    }
}

impl ChrfParams {
    pub fn new(max_n: usize, beta: f64) -> Result<Self> {
        let p = ChrfParams { max_n, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_n < 1 {
            return Err(Error::InvalidConfig("chrF max_n must be at least 1".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidConfig("chrF beta must be positive".into()));
        }
        Ok(())
    }
}

/// Character n-gram F-score in `[0, 100]`.
///
/// Whitespace is removed before n-grams are extracted. The per-order F-scores
/// are averaged over the orders for which both strings have at least one
/// n-gram, so identical strings always score exactly 100.
pub fn chrf(hypothesis: &str, reference: &str, params: &ChrfParams) -> f64 {
    let hyp: Vec<char> = hypothesis.chars().filter(|c| !c.is_whitespace()).collect();
    let refr: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    match (hyp.is_empty(), refr.is_empty()) {
        (true, true) => return 100.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }

    let beta2 = params.beta * params.beta;
    let mut total = 0.0;
    let mut orders = 0usize;
    let mut counts: HashMap<&[char], u32> = HashMap::new();
    for n in 1..=params.max_n {
        if hyp.len() < n || refr.len() < n {
            break;
        }
        counts.clear();
        for gram in refr.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
        let mut matches = 0u32;
        for gram in hyp.windows(n) {
            if let Some(c) = counts.get_mut(gram) {
                if *c > 0 {
                    *c -= 1;
                    matches += 1;
                }
            }
        }
        let precision = matches as f64 / (hyp.len() - n + 1) as f64;
        let recall = matches as f64 / (refr.len() - n + 1) as f64;
        let denom = beta2 * precision + recall;
        if denom > 0.0 {
            total += (1.0 + beta2) * precision * recall / denom;
        }
        orders += 1;
    }
    100.0 * total / orders as f64
}

/// Byte equality after trimming trailing whitespace. Case-sensitive; no normalization.
pub fn exact_match(a: &str, b: &str) -> bool {
    trim_segment(a) == trim_segment(b)
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Ratio of the longer to the shorter side in whitespace tokens.
///
/// Infinite when exactly one side is empty, 1 when both are.
pub fn length_ratio(source: &str, target: &str) -> f64 {
    let (s, t) = (word_count(source), word_count(target));
    match (s, t) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => f64::INFINITY,
        _ => s.max(t) as f64 / s.min(t) as f64,
    }
}

pub const DEFAULT_MSTTR_WINDOW: usize = 100;

/// Mean segmental type-token ratio over consecutive, non-overlapping windows
/// of `window` whitespace tokens. The trailing partial window is dropped
/// unless the stream never fills one window.
pub fn msttr<'a, I>(texts: I, window: usize) -> Result<f64>
where
    I: IntoIterator<Item = &'a str>,
{
    if window == 0 {
        return Err(Error::InvalidConfig("MSTTR window must be at least 1".into()));
    }
    let mut types: HashSet<&str> = HashSet::new();
    let mut in_window = 0usize;
    let mut ratio_sum = 0.0;
    let mut windows = 0usize;
    for text in texts {
        for token in text.split_whitespace() {
            types.insert(token);
            in_window += 1;
            if in_window == window {
                ratio_sum += types.len() as f64 / window as f64;
                windows += 1;
                types.clear();
                in_window = 0;
            }
        }
    }
    if windows > 0 {
        Ok(ratio_sum / windows as f64)
    } else if in_window > 0 {
        Ok(types.len() as f64 / in_window as f64)
    } else {
        Err(Error::Degenerate("MSTTR of an empty token stream".into()))
    }
}

/// Per-token natural-log probabilities of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenLogProbs(Vec<f64>);

impl TokenLogProbs {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !(**v <= 0.0) || v.is_infinite()) {
            return Err(Error::InvalidConfig(format!(
                "token log-probability {bad} is not a finite value <= 0"
            )));
        }
        Ok(TokenLogProbs(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// `exp(mean log-probability)`, the length-normalized sequence probability.
pub fn geometric_mean_prob(lp: &TokenLogProbs) -> Result<f64> {
    if lp.0.is_empty() {
        return Err(Error::Degenerate("geometric mean of an empty sequence".into()));
    }
    let mean = lp.0.iter().sum::<f64>() / lp.0.len() as f64;
    Ok(mean.exp())
}

/// Convert an already-averaged token log-probability into the same normalized score.
pub fn mean_logprob_to_prob(mean_logprob: f64) -> f64 {
    mean_logprob.exp()
}
