//! Synthetic corpora with planted memorization and hallucination cases.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub const ROLES: [&str; 3] = ["teacher", "student", "baseline"];
pub const FRACTIONS: [&str; 3] = ["0.25", "0.5", "0.75"];
const SYLLABLES: [&str; 10] = ["ka", "lo", "mi", "zu", "te", "rä", "ße", "no", "di", "jo"];

pub struct Spec {
    pub n: usize,
    pub seed: u64,
    /// Distinct pool translations; NatHal groups come from here.
    pub pool: usize,
    pub max_src_words: usize,
    /// Draw targets and every translation from fixed pools, so the number
    /// of distinct translations does not grow with `n`.
    pub pooled: bool,
}

fn word(k: usize) -> String {
    let mut k = k + 10;
    let mut w = String::new();
    while k > 0 {
        w.push_str(SYLLABLES[k % 10]);
        k /= 10;
    }
    w
}

fn words(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> String {
    (0..n)
        .map(|_| word(rng.random_range(lo..hi)))
        .collect::<Vec<_>>()
        .join(" ")
}

fn pool_sentence(j: usize) -> String {
    format!(
        "{} {} {} {}",
        word(5000 + j % 97),
        word(6000 + j),
        word(7000 + j % 13),
        word(8000 + j / 7)
    )
}

fn target_sentence(j: usize) -> String {
    format!(
        "{} {} {} {} {}",
        word(9000 + j),
        word(3000 + j % 31),
        word(3100 + j % 17),
        word(3200 + j % 7),
        word(3300 + j % 3)
    )
}

/// Repeats of one bigram around the flag threshold; odd variants end on
/// the first token so two bigrams tie and the first occurrence must win.
fn oscillation(rng: &mut ChaCha8Rng) -> String {
    let k = rng.random_range(8..=14);
    let mut s = vec!["xa ya"; k].join(" ");
    if rng.random_bool(0.4) {
        s.push_str(" xa");
    }
    s
}

struct Writers(Vec<(String, BufWriter<File>)>);

impl Writers {
    fn line(&mut self, name: &str, text: &str) {
        let w = &mut self.0.iter_mut().find(|(n, _)| n == name).expect("known file").1;
        w.write_all(text.as_bytes()).unwrap();
        w.write_all(b"\n").unwrap();
    }
}

/// Write the corpus under `dir` and return the manifest path.
pub fn generate(dir: &Path, spec: &Spec) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    let mut names = vec!["train.en".to_string(), "train.de".into(), "lang_ids.tsv".into()];
    for r in ROLES {
        names.push(format!("{r}.de"));
        names.push(format!("qe.{r}.txt"));
        for f in FRACTIONS {
            names.push(format!("{r}.prefix{f}.de"));
        }
    }
    let mut w = Writers(
        names
            .iter()
            .map(|n| {
                (
                    n.clone(),
                    BufWriter::with_capacity(1 << 16, File::create(dir.join(n)).unwrap()),
                )
            })
            .collect(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let skewed = |rng: &mut ChaCha8Rng| (spec.pool as f64 * rng.random::<f64>().powi(3)) as usize;

    for _ in 0..spec.n {
        let len = rng.random_range(1..=spec.max_src_words);
        let mut src = words(&mut rng, len, 0, 2000);
        if rng.random_bool(0.15) {
            // Some sources carry the oscillating bigram, reversed or not.
            let m = rng.random_range(1..=4);
            let b = if rng.random_bool(0.5) { "xa ya" } else { "ya xa" };
            src = format!("{} {src}", vec![b; m].join(" "));
        }
        let tgt = if spec.pooled {
            target_sentence(rng.random_range(0..spec.pool))
        } else {
            let roll: f64 = rng.random();
            if roll < 0.03 {
                src.clone()
            } else if roll < 0.05 {
                String::new()
            } else {
                let ratios = [0.7, 0.77, 1.0, 1.0, 1.0, 1.25, 1.3, 1.35, 1.5];
                let r = ratios[rng.random_range(0..ratios.len())];
                let t = ((len as f64 * r).round() as usize).max(1);
                words(&mut rng, t, 2000, 4000)
            }
        };
        let lang = match rng.random_range(0..100) {
            0..=2 => "",
            3..=5 => "fr\tde",
            6..=7 => "en\ten",
            8..=10 => "EN\tDe",
            11 => "en\tde ",
            _ => "en\tde",
        };

        let mut hyps: Vec<String> = Vec::with_capacity(3);
        for (k, role) in ROLES.iter().enumerate() {
            let (p_copy_teacher, p_tgt, p_osc, p_pool) = match *role {
                "teacher" => (0.0, 0.25, 0.10, 0.20),
                "student" => (0.30, 0.15, 0.08, 0.15),
                _ => (0.0, 0.20, 0.05, 0.12),
            };
            let roll: f64 = rng.random();
            let mut hyp = if roll < p_copy_teacher {
                hyps[0].clone()
            } else if roll < p_copy_teacher + p_tgt {
                tgt.clone()
            } else if roll < p_copy_teacher + p_tgt + p_osc {
                oscillation(&mut rng)
            } else if roll < p_copy_teacher + p_tgt + p_osc + p_pool {
                pool_sentence(skewed(&mut rng))
            } else if spec.pooled {
                pool_sentence(rng.random_range(0..spec.pool))
            } else {
                let t = rng.random_range(1..=spec.max_src_words);
                words(&mut rng, t, 4000, 5000)
            };
            if !spec.pooled && rng.random_bool(0.03) {
                hyp.push(' ');
            }
            for (f, p) in FRACTIONS.iter().zip([0.15, 0.25, 0.35]) {
                let roll: f64 = rng.random();
                let decoded = if roll < p {
                    hyp.clone()
                } else if roll < p + 0.1 {
                    tgt.clone()
                } else if k == 1 && roll < p + 0.2 {
                    hyps[0].clone()
                } else {
                    hyp.split_whitespace().take(2).collect::<Vec<_>>().join(" ")
                };
                w.line(&format!("{role}.prefix{f}.de"), &decoded);
            }
            let qe = match rng.random_range(0..100) {
                0..=3 => "nan".to_string(),
                4..=5 => "0.85".to_string(),
                _ => format!("{:.4}", rng.random::<f64>()),
            };
            w.line(&format!("qe.{role}.txt"), &qe);
            w.line(&format!("{role}.de"), &hyp);
            hyps.push(hyp);
        }
        w.line("train.en", &src);
        w.line("train.de", &tgt);
        w.line("lang_ids.tsv", lang);
    }
    for (_, mut f) in w.0 {
        f.flush().unwrap();
    }

    let mut translations = serde_json::Map::new();
    let mut prefixes = serde_json::Map::new();
    let mut scores = serde_json::Map::new();
    for r in ROLES {
        translations.insert(r.into(), json!(format!("{r}.de")));
        let p: serde_json::Map<_, _> = FRACTIONS
            .iter()
            .map(|f| (f.to_string(), json!(format!("{r}.prefix{f}.de"))))
            .collect();
        prefixes.insert(r.into(), p.into());
        scores.insert(format!("comet-qe-22@{r}"), json!(format!("qe.{r}.txt")));
    }
    let manifest = json!({
        "language_pair": "en-de",
        "sources": "train.en",
        "targets": "train.de",
        "translations": translations,
        "prefix_translations": prefixes,
        "scores": scores,
        "lang_ids": "lang_ids.tsv",
        "provenance": { "generator": "acceptance synth", "seed": spec.seed, "n": spec.n },
    });
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    path
}

/// Number of line stores a generated manifest opens.
pub const STORES: usize = 3 + ROLES.len() * (2 + FRACTIONS.len());

pub fn disk_bytes(dir: &Path, names: &[&str]) -> u64 {
    names
        .iter()
        .map(|n| std::fs::metadata(dir.join(n)).map_or(0, |m| m.len()))
        .sum()
}
