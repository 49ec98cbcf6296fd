//! Acceptance suite. Prints one PASS or FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod synth;

use std::alloc::{GlobalAlloc, Layout, System};
use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering::Relaxed};
use std::time::Instant;

use kdaudit::metrics::chrf;
use kdaudit::report::{compare_models, summarize_raw, MetricTable};
use kdaudit::subgroups::{
    bucket_cm, bucket_quality, compute_all_cm, compute_cm, ModelEvidence, SubgroupKind, SubgroupSpec, CM_BOUNDARIES,
    DEFAULT_CAP, QUALITY_BOUNDARIES,
};
use kdaudit::{load_corpus_set, ChrfParams, CorpusSet, LineStore, ScoreStore};
use kdaudit_cli::audit::cmd_audit;
use kdaudit_cli::config::{Overrides, RunConfig, Settings};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use crate::oracle::{exmem_rows, hal_rows, mismatches, read_lines, Files};
use crate::synth::{Spec, FRACTIONS, ROLES, STORES};

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

fn grew(n: usize) {
    let now = CURRENT.fetch_add(n, Relaxed) + n;
    PEAK.fetch_max(now, Relaxed);
}

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, l: Layout) -> *mut u8 {
        let p = System.alloc(l);
        if !p.is_null() {
            grew(l.size());
        }
        p
    }

    unsafe fn alloc_zeroed(&self, l: Layout) -> *mut u8 {
        let p = System.alloc_zeroed(l);
        if !p.is_null() {
            grew(l.size());
        }
        p
    }

    unsafe fn dealloc(&self, p: *mut u8, l: Layout) {
        System.dealloc(p, l);
        CURRENT.fetch_sub(l.size(), Relaxed);
    }

    unsafe fn realloc(&self, p: *mut u8, l: Layout, new_size: usize) -> *mut u8 {
        let q = System.realloc(p, l, new_size);
        if !q.is_null() {
            if new_size >= l.size() {
                grew(new_size - l.size());
            } else {
                CURRENT.fetch_sub(l.size() - new_size, Relaxed);
            }
        }
        q
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

fn kdaudit(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_kdaudit"))
        .args(args)
        .output()
        .map_err(|e| format!("spawn: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "kdaudit {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 temp path")
}

/// Every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/published_wmt20.plot.csv");
    let t = MetricTable::read(&path).map_err(|e| e.to_string())?;
    let deltas = compare_models(
        &t,
        "student",
        "baseline",
        &["replication_tc", "exmem_tc", "oschal", "nathal"],
    )
    .map_err(|e| e.to_string())?;
    let tt = summarize_raw(&t, "student", &["replication_tt"]).map_err(|e| e.to_string())?;
    let tc = summarize_raw(&t, "teacher", &["replication_tc"]).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed().as_secs_f64();

    let want = [
        ("replication_tc", 3.4, 0.9),
        ("exmem_tc", 57.0, 15.4),
        ("oschal", 31.0, 25.7),
        ("nathal", 13.8, 5.0),
    ];
    let mut parts = Vec::new();
    for (s, (m, mean, std)) in deltas.iter().zip(want) {
        ensure!(s.metric == m, "metric order {} vs {m}", s.metric);
        ensure!((s.mean - mean).abs() <= 0.1, "{m} mean {:.3} vs {mean}", s.mean);
        ensure!((s.std - std).abs() <= 0.1, "{m} std {:.3} vs {std}", s.std);
        parts.push(format!("{m} {:+.2}±{:.2}", s.mean, s.std));
    }
    ensure!(
        (tt[0].mean - 35.3).abs() <= 0.1 && (tt[0].std - 2.7).abs() <= 0.1,
        "student wrt teacher {:?}",
        tt[0]
    );
    ensure!((tc[0].mean - 18.4).abs() <= 0.1, "teacher replication {}", tc[0].mean);
    parts.push(format!("student wrt teacher {:.2}±{:.2}", tt[0].mean, tt[0].std));
    parts.push(format!("teacher {:.2}", tc[0].mean));
    ensure!(elapsed < 1.0, "took {elapsed:.3}s");
    Ok(format!("{} (tol 0.1, {:.1} ms)", parts.join(", "), elapsed * 1e3))
}

fn ac2() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth::generate(
        &data,
        &Spec {
            n: 10_000,
            seed: 2,
            pool: 300,
            max_src_words: 60,
            pooled: false,
        },
    );
    let out = tmp.path().join("out");
    kdaudit(&["--seed", "1", "--out", p(&out), "audit", "--manifest", p(&manifest)])?;
    let audit: Value = serde_json::from_slice(&std::fs::read(out.join("audit.json")).unwrap()).unwrap();

    let f = Files::read(&data);
    let role_lines = |role: &str| read_lines(&data.join(format!("{role}.de")));
    let prefixes = |role: &str| -> Vec<Vec<String>> {
        FRACTIONS
            .iter()
            .map(|fr| read_lines(&data.join(format!("{role}.prefix{fr}.de"))))
            .collect()
    };
    let dump = |name: &str| read_lines(&out.join("records").join(name));
    let teacher = role_lines("teacher");

    let mut bad = 0;
    let mut planted = Vec::new();
    for role in ROLES {
        let hyps = role_lines(role);
        let pre = prefixes(role);
        let (rows, tally, tc_flags) = exmem_rows(&f, &f.tgt, &hyps, &pre);
        bad += mismatches(&rows, &dump(&format!("{role}.exmem_tc.tsv")));
        let got = &audit["roles"][role]["exmem_tc"];
        bad += (got["replicated"] != tally.replicated
            || got["eligible"] != tally.eligible
            || got["exmem"] != tally.exmem) as usize;

        if role == "student" {
            let (rows, tally_tt, tt_flags) = exmem_rows(&f, &teacher, &hyps, &pre);
            bad += mismatches(&rows, &dump("student.exmem_tt.tsv"));
            let primary = tc_flags.iter().filter(|x| **x).count();
            let secondary = tc_flags.iter().zip(&tt_flags).filter(|(a, b)| !**a && **b).count();
            let prov = &audit["roles"]["student"]["exmem_provenance"];
            bad += (prov["primary"] != primary || prov["secondary"] != secondary) as usize;
            bad += (audit["roles"]["student"]["exmem_tt"]["exmem"] != tally_tt.exmem) as usize;
            planted.push(format!("student secondary {secondary}"));
        }

        let qe = read_lines(&data.join(format!("qe.{role}.txt")));
        let (rows, groups, hal) = hal_rows(&f, &hyps, &qe);
        bad += mismatches(&rows, &dump(&format!("{role}.hal.tsv")));
        bad += mismatches(&groups, &dump(&format!("{role}.nathal_groups.tsv")));
        let h = &audit["roles"][role]["hallucinations"];
        bad += (h["oschal"] != hal.oschal
            || h["oschal_excluded"] != hal.oschal_excluded
            || h["nathal"] != hal.nathal
            || h["nathal_excluded"] != hal.nathal_excluded) as usize;
        ensure!(
            tally.exmem > 0 && hal.oschal > 0 && hal.nathal > 0,
            "{role}: nothing planted"
        );
        planted.push(format!(
            "{role} exmem {} oschal {} nathal {}",
            tally.exmem, hal.oschal, hal.nathal
        ));
    }
    ensure!(bad == 0, "{bad} mismatches against the oracle");
    Ok(format!("0 mismatches over 10000 records; {}", planted.join(", ")))
}

fn oracle_chrf(hyp: &str, reference: &str) -> f64 {
    let h: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let r: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    if h.is_empty() && r.is_empty() {
        return 100.0;
    }
    if h.is_empty() || r.is_empty() {
        return 0.0;
    }
    let (mut sum, mut orders) = (0.0, 0);
    for n in 1..=6 {
        if h.len() < n || r.len() < n {
            continue;
        }
        let hg: Vec<&[char]> = h.windows(n).collect();
        let rg: Vec<&[char]> = r.windows(n).collect();
        let mut seen: Vec<&[char]> = Vec::new();
        let mut matches = 0;
        for g in &hg {
            if seen.contains(g) {
                continue;
            }
            seen.push(g);
            let in_h = hg.iter().filter(|x| *x == g).count();
            let in_r = rg.iter().filter(|x| *x == g).count();
            matches += in_h.min(in_r);
        }
        let prec = matches as f64 / hg.len() as f64;
        let rec = matches as f64 / rg.len() as f64;
        sum += if prec + rec == 0.0 {
            0.0
        } else {
            5.0 * prec * rec / (4.0 * prec + rec)
        };
        orders += 1;
    }
    100.0 * sum / orders as f64
}

fn ac3() -> Outcome {
    const ALPHABET: [char; 10] = ['a', 'b', 'c', 'd', 'ä', '日', '🙂', ' ', '\t', 'ß'];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let text = |rng: &mut ChaCha8Rng, max: usize| -> String {
        let len = rng.random_range(0..=max);
        (0..len)
            .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
            .collect()
    };
    let params = ChrfParams::default();
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let reference = text(&mut rng, 24);
        let hyp = if k % 3 == 0 {
            // A mutated copy shares most n-grams with the reference.
            let mut chars: Vec<char> = reference.chars().collect();
            if !chars.is_empty() {
                let at = rng.random_range(0..chars.len());
                chars[at] = ALPHABET[rng.random_range(0..ALPHABET.len())];
            }
            chars.into_iter().collect()
        } else {
            text(&mut rng, 24)
        };
        let (got, want) = (chrf(&hyp, &reference, &params), oracle_chrf(&hyp, &reference));
        ensure!(
            (got - want).abs() <= 1e-6,
            "chrf({hyp:?}, {reference:?}) = {got}, oracle {want}"
        );
        worst = worst.max((got - want).abs());
    }
    for _ in 0..100 {
        let s = text(&mut rng, 40);
        ensure!(
            chrf(&s, &s, &params) == 100.0,
            "identity {s:?} gave {}",
            chrf(&s, &s, &params)
        );
    }
    ensure!(chrf("", "", &params) == 100.0, "empty identity");
    Ok(format!(
        "200 pairs, max |diff| {worst:.1e} (tol 1e-6); 100 identity pairs exactly 100"
    ))
}

fn ac4() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_dir().join("run.json");
    let mut compared = 0;
    for cmd in ["audit", "subgroups", "select"] {
        let mut trees = Vec::new();
        for w in ["1", "8"] {
            let out = tmp.path().join(format!("fixture-{cmd}-{w}"));
            kdaudit(&["--config", p(&cfg), "--workers", w, "--out", p(&out), cmd])?;
            trees.push(tree(&out));
        }
        ensure!(trees[0] == trees[1], "fixture {cmd} differs between 1 and 8 workers");
        compared += trees[0].len();
    }

    let data = tmp.path().join("data");
    let manifest = synth::generate(
        &data,
        &Spec {
            n: 40_000,
            seed: 4,
            pool: 500,
            max_src_words: 60,
            pooled: false,
        },
    );
    let mut trees = Vec::new();
    for w in ["1", "8"] {
        let out = tmp.path().join(format!("synth-{w}"));
        kdaudit(&[
            "--seed",
            "9",
            "--workers",
            w,
            "--out",
            p(&out),
            "audit",
            "--manifest",
            p(&manifest),
        ])?;
        trees.push(tree(&out));
    }
    ensure!(trees[0] == trees[1], "40k-record audit differs between 1 and 8 workers");
    compared += trees[0].len();
    Ok(format!(
        "{compared} output files byte-identical (fixture audit/subgroups/select, 40000-record audit)"
    ))
}

fn interval_hits(v: f64, boundaries: &[f64]) -> Vec<usize> {
    let mut edges = vec![f64::NEG_INFINITY];
    edges.extend_from_slice(boundaries);
    edges.push(f64::INFINITY);
    (0..edges.len() - 1)
        .filter(|&b| v >= edges[b] && v < edges[b + 1])
        .collect()
}

fn ac5() -> Outcome {
    let n = 60_000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let unit = |rng: &mut ChaCha8Rng| -> f64 {
        match rng.random_range(0..100) {
            0 => f64::NAN,
            1 => QUALITY_BOUNDARIES[rng.random_range(0..4)],
            2 => [0.0, 1.0, -0.05, 1.05][rng.random_range(0..4)],
            _ => rng.random(),
        }
    };
    let quality: Vec<f64> = (0..n).map(|_| unit(&mut rng)).collect();
    // Coarse confidences produce many ties across the extremes.
    let confidence: Vec<f64> = (0..n).map(|_| -(rng.random_range(0..200) as f64) / 100.0).collect();
    let evidence: Vec<ModelEvidence> = (0..4)
        .map(|m| {
            let membership = (0..n).map(|_| rng.random_bool(0.5)).collect();
            let scores = (0..n)
                .map(|_| {
                    if rng.random_range(0..100) == 0 {
                        f64::NAN
                    } else {
                        rng.random::<f64>().powf(0.5 + m as f64 * 0.3)
                    }
                })
                .collect();
            ModelEvidence::new(format!("m{m}"), membership, scores).unwrap()
        })
        .collect();
    let lines: Vec<String> = (0..n).map(|i| format!("w{i} x y z")).collect();
    let corpus = CorpusSet::builder("en-de", LineStore::from_lines(&lines), LineStore::from_lines(&lines))
        .score("comet-qe-22@corpus", ScoreStore::from_values(&quality))
        .score("teacher-mean-logprob", ScoreStore::from_values(&confidence))
        .build()
        .map_err(|e| e.to_string())?;

    // Bucket uniqueness against explicit interval tests.
    let qb = bucket_quality(&quality, &QUALITY_BOUNDARIES).unwrap();
    let mut q_members = vec![BTreeSet::new(); QUALITY_BOUNDARIES.len() + 1];
    for (i, (&v, b)) in quality.iter().zip(&qb).enumerate() {
        if v.is_nan() {
            ensure!(b.is_none(), "NaN quality at {i} got a bucket");
            continue;
        }
        let hits = interval_hits(v, &QUALITY_BOUNDARIES);
        ensure!(
            hits.len() == 1 && Some(hits[0]) == *b,
            "quality {v} at {i}: hits {hits:?}, bucket {b:?}"
        );
        q_members[hits[0]].insert(i);
    }
    let cm = compute_all_cm(&evidence, n);
    let mut c_members = vec![BTreeSet::new(); CM_BOUNDARIES.len() + 1];
    let (mut lowlow, mut highhigh) = (BTreeSet::new(), BTreeSet::new());
    for (c, a) in cm.iter().zip(bucket_cm(&cm, &CM_BOUNDARIES).unwrap()) {
        let hits = interval_hits(c.cm, &CM_BOUNDARIES);
        ensure!(
            hits.len() == 1 && hits[0] == a.bucket,
            "cm {} at {}: hits {hits:?}",
            c.cm,
            c.index
        );
        c_members[hits[0]].insert(c.index);
        if c.in_score <= 0.2 && c.out_score <= 0.2 {
            lowlow.insert(c.index);
        }
        if c.in_score >= 0.8 && c.out_score >= 0.8 {
            highhigh.insert(c.index);
        }
    }

    let specs = SubgroupSpec::standard_set();
    let groups = kdaudit::subgroups::build_subgroups(&corpus, &specs, &evidence, 5).map_err(|e| e.to_string())?;
    let (mut qi, mut ci, mut capped) = (0, 0, 0);
    let mut low = BTreeSet::new();
    let mut high = BTreeSet::new();
    for g in &groups {
        let set: BTreeSet<usize> = g.indices.iter().copied().collect();
        ensure!(set.len() == g.indices.len(), "{} has duplicates", g.name);
        let full = match g.kind {
            SubgroupKind::Quality => {
                qi += 1;
                Some(&q_members[qi - 1])
            }
            SubgroupKind::Cm => {
                ci += 1;
                Some(&c_members[ci - 1])
            }
            SubgroupKind::CmLowlow => Some(&lowlow),
            SubgroupKind::CmHighhigh => Some(&highhigh),
            SubgroupKind::ConfidenceLow => {
                low = set.clone();
                None
            }
            SubgroupKind::ConfidenceHigh => {
                high = set.clone();
                None
            }
            SubgroupKind::Random => None,
        };
        if let Some(full) = full {
            ensure!(set.is_subset(full), "{} holds records outside its bucket", g.name);
            ensure!(
                g.indices.len() == full.len().min(DEFAULT_CAP),
                "{}: {} of {}",
                g.name,
                g.indices.len(),
                full.len()
            );
            capped += (full.len() > DEFAULT_CAP) as usize;
        }
    }
    ensure!(
        qi == 5 && ci == 4,
        "expected 5 quality and 4 CM groups, got {qi} and {ci}"
    );
    ensure!(capped >= 3, "only {capped} groups exercised the cap");

    ensure!(
        low.len() == DEFAULT_CAP && high.len() == DEFAULT_CAP,
        "extreme sizes {} {}",
        low.len(),
        high.len()
    );
    ensure!(low.is_disjoint(&high), "confidence extremes overlap");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidence[a].partial_cmp(&confidence[b]).unwrap().then(a.cmp(&b)));
    ensure!(
        low == order[..DEFAULT_CAP].iter().copied().collect(),
        "low extreme differs from sorted order"
    );
    ensure!(
        high == order[n - DEFAULT_CAP..].iter().copied().collect(),
        "high extreme differs from sorted order"
    );

    // CM against IN minus OUT on randomized evidence.
    let mut runner = TestRunner::new_with_rng(
        PropConfig {
            cases: 1000,
            failure_persistence: None,
            ..PropConfig::default()
        },
        proptest::test_runner::TestRng::deterministic_rng(proptest::test_runner::RngAlgorithm::ChaCha),
    );
    let score = prop_oneof![1 => Just(f64::NAN), 8 => 0.0f64..=1.0];
    let config = (1usize..12, 1usize..7).prop_flat_map(move |(records, models)| {
        prop::collection::vec(
            (
                prop::collection::vec(any::<bool>(), records),
                prop::collection::vec(score.clone(), records),
            ),
            models,
        )
    });
    let result = runner.run(&config, |models| {
        let records = models[0].0.len();
        let ev: Vec<ModelEvidence> = models
            .iter()
            .enumerate()
            .map(|(k, (m, s))| ModelEvidence::new(format!("m{k}"), m.clone(), s.clone()).unwrap())
            .collect();
        let mut expected_indices = Vec::new();
        for i in 0..records {
            let ins: Vec<f64> = models
                .iter()
                .filter(|(m, s)| m[i] && !s[i].is_nan())
                .map(|(_, s)| s[i])
                .collect();
            let outs: Vec<f64> = models
                .iter()
                .filter(|(m, s)| !m[i] && !s[i].is_nan())
                .map(|(_, s)| s[i])
                .collect();
            let got = compute_cm(&ev, i);
            if ins.is_empty() || outs.is_empty() {
                prop_assert!(got.is_err());
                continue;
            }
            expected_indices.push(i);
            let want = ins.iter().sum::<f64>() / ins.len() as f64 - outs.iter().sum::<f64>() / outs.len() as f64;
            let got = got.unwrap();
            prop_assert!((got.cm - want).abs() <= 1e-12, "record {i}: {} vs {want}", got.cm);
            prop_assert!((got.cm - (got.in_score - got.out_score)).abs() == 0.0);
        }
        let all: Vec<usize> = compute_all_cm(&ev, records).iter().map(|c| c.index).collect();
        prop_assert_eq!(all, expected_indices);
        Ok(())
    });
    result.map_err(|e| format!("CM property: {e}"))?;

    Ok(format!(
        "{n} records: every scored record in one quality and one CM bucket; {capped} groups capped at {DEFAULT_CAP}; \
         extremes disjoint; CM = IN-OUT on 1000 random configurations (tol 1e-12)"
    ))
}

fn ac6() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let n = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let qualifying: BTreeSet<usize> = rand::seq::index::sample(&mut rng, n, 1234).into_iter().collect();
    let (mut src, mut tgt, mut teacher, mut logprob) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let sentence = |rng: &mut ChaCha8Rng, k: usize, tag: &str| -> String {
        (0..k)
            .map(|_| format!("{tag}{}", rng.random_range(0..5000)))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut failing = 0;
    for i in 0..n {
        let target = sentence(&mut rng, 7, "t");
        let long = rng.random_range(6..12);
        let (s, t, lp) = if qualifying.contains(&i) {
            (sentence(&mut rng, long, "s"), target.clone(), "-0.01")
        } else {
            failing += 1;
            match failing % 3 {
                0 => {
                    let short = rng.random_range(4..=5);
                    (sentence(&mut rng, short, "s"), target.clone(), "-0.01")
                }
                1 => (sentence(&mut rng, long, "s"), target.clone(), "-0.2"),
                _ => (sentence(&mut rng, long, "s"), sentence(&mut rng, 7, "q"), "-0.01"),
            }
        };
        src.push(s);
        tgt.push(target);
        teacher.push(t);
        logprob.push(lp.to_string());
    }
    let write = |name: &str, lines: &[String]| std::fs::write(d.join(name), lines.join("\n") + "\n").unwrap();
    write("train.en", &src);
    write("train.de", &tgt);
    write("teacher.de", &teacher);
    write("teacher.logprob.txt", &logprob);
    std::fs::write(
        d.join("manifest.json"),
        r#"{"language_pair":"en-de","sources":"train.en","targets":"train.de",
            "translations":{"teacher":"teacher.de"},"scores":{"teacher-mean-logprob":"teacher.logprob.txt"}}"#,
    )
    .unwrap();
    for k in [500, 2000] {
        std::fs::write(
            d.join(format!("run{k}.json")),
            format!(r#"{{"manifest":"manifest.json","selection":{{"criteria":{{"n":{k}}}}}}}"#),
        )
        .unwrap();
    }
    let select = |k: usize, seed: &str, out: &str| -> Result<(Vec<usize>, Vec<usize>, Value), String> {
        let out = d.join(out);
        kdaudit(&[
            "--config",
            p(&d.join(format!("run{k}.json"))),
            "--seed",
            seed,
            "--out",
            p(&out),
            "select",
        ])?;
        let idx = |set: &str| -> Vec<usize> {
            read_lines(&out.join(set).join("selected.idx"))[1..]
                .iter()
                .map(|l| l.parse().unwrap())
                .collect()
        };
        let summary = serde_json::from_slice(&std::fs::read(out.join("selection.json")).unwrap()).unwrap();
        Ok((idx("high_quality"), idx("random"), summary))
    };

    let (hq, random, summary) = select(500, "11", "a")?;
    ensure!(hq.len() == 500, "n=500 selected {}", hq.len());
    ensure!(
        hq.iter().all(|i| qualifying.contains(i)),
        "a selected record does not qualify"
    );
    ensure!(
        summary["high_quality"]["n_qualifying"] == 1234,
        "qualifying {}",
        summary["high_quality"]["n_qualifying"]
    );
    ensure!(
        summary["warnings"].as_array().is_some_and(|w| w.is_empty()),
        "unexpected warning"
    );
    let (hq_again, random_again, _) = select(500, "11", "b")?;
    ensure!(
        hq == hq_again && random == random_again,
        "same seed, different selection"
    );
    let (hq_other, _, _) = select(500, "12", "c")?;
    ensure!(hq_other != hq, "seed has no effect");

    let (all, _, summary) = select(2000, "11", "d")?;
    ensure!(
        all == qualifying.iter().copied().collect::<Vec<_>>(),
        "n=2000 did not return every qualifying record"
    );
    let warned = summary["warnings"].as_array().is_some_and(|w| {
        w.iter().any(|m| {
            m.as_str()
                .is_some_and(|m| m.starts_with("high_quality") && m.contains("1234"))
        })
    });
    ensure!(warned, "n=2000 gave no shortfall warning: {}", summary["warnings"]);

    // Perturb the chrF and confidence inputs: teacher text and log-probs.
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    for i in 0..n {
        if rng.random_bool(0.5) {
            teacher[i] = sentence(&mut rng, 7, "p");
        }
        if rng.random_bool(0.5) {
            logprob[i] = format!("{:.3}", -rng.random::<f64>());
        }
    }
    write("teacher.de", &teacher);
    write("teacher.logprob.txt", &logprob);
    let (hq_perturbed, random_perturbed, _) = select(500, "11", "e")?;
    ensure!(random_perturbed == random, "random baseline moved after perturbation");
    ensure!(
        hq_perturbed != hq,
        "perturbation did not reach the high-quality selection"
    );
    Ok("n=500: 500 of 1234 qualifying, seed-stable; n=2000: all 1234 plus warning; random baseline unchanged".into())
}

fn audit_in_process(manifest: &Path, out: &Path) -> Result<(f64, usize, Value), String> {
    let settings = Settings::resolve(
        RunConfig::for_manifest(manifest.to_path_buf()),
        &Overrides {
            seed: Some(7),
            workers: Some(1),
            out: Some(out.to_path_buf()),
        },
    )
    .map_err(|e| e.to_string())?;
    let base = CURRENT.load(Relaxed);
    PEAK.store(base, Relaxed);
    let start = Instant::now();
    {
        let corpus = load_corpus_set(manifest).map_err(|e| e.to_string())?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(settings.workers)
            .build()
            .unwrap();
        pool.install(|| cmd_audit(&settings, &corpus))
            .map_err(|e| e.to_string())?;
    }
    let secs = start.elapsed().as_secs_f64();
    let peak = PEAK.load(Relaxed) - base;
    let summary = serde_json::from_slice(&std::fs::read(out.join("audit.json")).unwrap()).unwrap();
    Ok((secs, peak, summary))
}

fn ac7() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for n in [250_000, 1_000_000] {
        let data = tmp.path().join(format!("data{n}"));
        let manifest = synth::generate(
            &data,
            &Spec {
                n,
                seed: 7,
                pool: 20_000,
                max_src_words: 14,
                pooled: true,
            },
        );
        let bytes = synth::disk_bytes(&data, &["train.en", "train.de"]);
        let (secs, peak, summary) = audit_in_process(&manifest, &tmp.path().join(format!("out{n}")))?;
        let distinct: u64 = ROLES
            .iter()
            .map(|r| summary["roles"][r]["nathal_distinct_translations"].as_u64().unwrap())
            .max()
            .unwrap();
        runs.push((n, bytes, secs, peak, distinct));
        std::fs::remove_dir_all(&data).unwrap();
    }
    let (_, _, _, small_peak, small_distinct) = runs[0];
    let (n, bytes, secs, peak, distinct) = runs[1];
    // Line indexes keep one offset per 64 lines per store; allow for Vec doubling.
    let index_allowance = 2 * STORES * (n / 64 + 1) * std::mem::size_of::<usize>();
    let budget = small_peak + index_allowance + (1 << 20);
    let mib = |b: usize| b as f64 / (1 << 20) as f64;
    let detail = format!(
        "{n} lines, {:.0} MB src+tgt, audit {secs:.1}s, peak heap {:.1} MiB (250k lines: {:.1} MiB; budget {:.1} MiB), \
         distinct translations per role at most {distinct} (250k lines: {small_distinct})",
        bytes as f64 / 1e6,
        mib(peak),
        mib(small_peak),
        mib(budget)
    );
    ensure!(secs < 300.0, "too slow: {detail}");
    ensure!(peak <= budget, "heap grew with corpus size: {detail}");
    Ok(detail)
}

fn ac8() -> Outcome {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md"))
        .map_err(|e| format!("README: {e}"))?;
    ensure!(
        readme.contains("not reproducible at desk scale"),
        "README lacks the non-reproducibility note"
    );
    Ok(
        "published absolute WMT20 values (e.g. En-De teacher replication 12.75) need WMT-scale NMT training and are \
        not reproducible at desk scale; they appear only as inputs to the published-results regression fixture"
            .into(),
    )
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("AC1", "published-results regression", ac1),
        ("AC2", "rule-oracle equivalence", ac2),
        ("AC3", "chrF oracle", ac3),
        ("AC4", "determinism under parallelism", ac4),
        ("AC5", "subgroup properties", ac5),
        ("AC6", "selection correctness", ac6),
        ("AC7", "scale smoke test", ac7),
        ("AC8", "non-reproducibility note", ac8),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (id, title, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {title}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id} {title}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
