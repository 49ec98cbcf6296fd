//! The `validate`, `subgroups`, `select` and `report` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kdaudit::report::{self, compare_models, summarize_raw, MetricTable, METRIC_REGISTRY};
use kdaudit::rng::substream;
use kdaudit::selector::{emit_finetune_set, select_high_quality, select_random_baseline, Selection};
use kdaudit::subgroups::{
    build_subgroups, evaluate_subgroup, write_group_dump, write_subgroup_plot_csv, write_subgroup_tsv, SubgroupRow,
};
use kdaudit::{CorpusSet, ModelRole};
use serde::Serialize;

use crate::audit::{default_summaries, write_text, Dump};
use crate::config::Settings;
use crate::exit::{output_error, usage, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SidecarDensity {
    pub records: usize,
    pub nan: usize,
    pub nan_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub language_pair: String,
    pub n_records: usize,
    pub roles: Vec<String>,
    pub prefix_fractions: BTreeMap<String, Vec<f64>>,
    pub scores: BTreeMap<String, SidecarDensity>,
    /// Lang-ID lines that are blank or disagree with the declared pair.
    pub lang_ids: Option<LangIdDiagnostics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LangIdDiagnostics {
    pub blank: usize,
    pub mismatched: usize,
}

/// Loading the corpus already checks alignment, encoding and value syntax;
/// this adds per-sidecar NaN densities and lang-ID agreement.
pub fn cmd_validate(corpus: &CorpusSet) -> Diagnostics {
    let n = corpus.n_records();
    let scores = corpus
        .score_names()
        .map(|name| {
            let nan = corpus.scores(name).map(|s| s.nan_count()).unwrap_or(0);
            let nan_fraction = if n == 0 { 0.0 } else { nan as f64 / n as f64 };
            (
                name.to_string(),
                SidecarDensity {
                    records: n,
                    nan,
                    nan_fraction,
                },
            )
        })
        .collect();
    let lang_ids = corpus.lang_ids().map(|ids| {
        let declared = corpus.declared_languages();
        let (mut blank, mut mismatched) = (0, 0);
        for i in 0..n {
            match (ids.get(i), declared) {
                (None, _) => blank += 1,
                (Some((s, t)), Some((ds, dt))) if !(s.eq_ignore_ascii_case(ds) && t.eq_ignore_ascii_case(dt)) => {
                    mismatched += 1
                }
                _ => {}
            }
        }
        LangIdDiagnostics { blank, mismatched }
    });
    Diagnostics {
        language_pair: corpus.language_pair().to_string(),
        n_records: n,
        roles: corpus.roles().map(|r| r.to_string()).collect(),
        prefix_fractions: corpus
            .roles()
            .map(|r| (r.to_string(), corpus.prefix_fractions(r)))
            .filter(|(_, f)| !f.is_empty())
            .collect(),
        scores,
        lang_ids,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubgroupsSummary {
    pub seed: u64,
    pub msttr_window: usize,
    pub groups: Vec<GroupSize>,
    pub notices: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSize {
    pub name: String,
    pub size: usize,
}

pub fn cmd_subgroups(s: &Settings, corpus: &CorpusSet) -> CliResult<Vec<SubgroupRow>> {
    let evidence = s.config.load_evidence()?;
    let groups = build_subgroups(corpus, &s.config.subgroups, &evidence, s.seed)?;
    let roles: Vec<ModelRole> = corpus.roles().cloned().collect();
    let mut rows = Vec::new();
    let mut notices = Vec::new();
    for g in &groups {
        if g.indices.is_empty() {
            notices.push(format!("subgroup {} is empty; no rows", g.name));
            continue;
        }
        rows.extend(evaluate_subgroup(corpus, &g.name, &g.indices, &roles, &s.config.eval)?);
    }
    std::fs::create_dir_all(&s.out).map_err(|e| output_error(&s.out, e))?;
    let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> CliResult<()> {
        let path = s.out.join(name);
        let mut buf = Vec::new();
        f(&mut buf).map_err(|e| output_error(&path, e))?;
        std::fs::write(&path, buf).map_err(|e| output_error(&path, e))
    };
    write("subgroups.tsv", &|w| write_subgroup_tsv(w, &rows))?;
    write("subgroups.plot.csv", &|w| write_subgroup_plot_csv(w, &rows))?;
    write("subgroup_members.tsv", &|w| {
        use std::io::Write;
        writeln!(w, "group_name\tindex")?;
        write_group_dump(w, &groups)
    })?;
    let summary = SubgroupsSummary {
        seed: s.seed,
        msttr_window: s.config.eval.msttr_window,
        groups: groups
            .iter()
            .map(|g| GroupSize {
                name: g.name.clone(),
                size: g.indices.len(),
            })
            .collect(),
        notices,
    };
    write_text(
        &s.out.join("subgroups.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelectOutcome {
    pub high_quality: Selection,
    pub random: Selection,
}

fn write_indices(dir: &Path, sel: &Selection) -> CliResult<()> {
    let mut d = Dump::create(dir.join("selected.idx"), "index")?;
    for i in &sel.indices {
        d.line(&i.to_string())?;
    }
    d.finish()
}

/// High-quality selection plus the length-only random baseline, each
/// written as an aligned fine-tuning set.
pub fn cmd_select(s: &Settings, corpus: &CorpusSet) -> CliResult<SelectOutcome> {
    let sc = &s.config.selection;
    let mut criteria = sc.criteria.clone();
    criteria.seed = substream(s.seed, "select:high_quality");
    let high_quality = select_high_quality(corpus, &ModelRole::Teacher, &criteria, &sc.confidence_score)?;
    criteria.seed = substream(s.seed, "select:random");
    let random = select_random_baseline(corpus, &criteria)?;

    let mut warnings = Vec::new();
    for (name, sel) in [("high_quality", &high_quality), ("random", &random)] {
        if sel.is_short() {
            warnings.push(format!(
                "{name}: only {} records qualify, fewer than the requested {}",
                sel.n_qualifying, sel.criteria.n
            ));
        }
        let dir = s.out.join(name);
        emit_finetune_set(corpus, sel, sc.target, &dir)?;
        write_indices(&dir, sel)?;
    }
    let summary = serde_json::json!({
        "high_quality": high_quality.summary(),
        "random": random.summary(),
        "confidence_score": sc.confidence_score,
        "target": sc.target,
        "warnings": warnings,
    });
    write_text(
        &s.out.join("selection.json"),
        &(serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n"),
    )?;
    Ok(SelectOutcome { high_quality, random })
}

#[derive(Debug, Clone, Default)]
pub struct ReportArgs {
    pub inputs: Vec<PathBuf>,
    pub subject: Option<String>,
    pub reference: Option<String>,
    pub metrics: Vec<String>,
    pub out: PathBuf,
}

/// Merge audit tables and summarize. Without an explicit subject and
/// reference this is the student-versus-baseline default of `audit`.
pub fn cmd_report(args: &ReportArgs) -> CliResult<(MetricTable, Vec<report::DeltaSummary>)> {
    if args.inputs.is_empty() {
        return Err(usage("report needs at least one input table"));
    }
    let mut table = MetricTable::new();
    for path in &args.inputs {
        table.merge(&MetricTable::read(path)?)?;
    }
    let mut notices = Vec::new();
    let summaries = match (&args.subject, &args.reference) {
        (None, None) if args.metrics.is_empty() => default_summaries(&table, &mut notices),
        (subject, reference) => {
            let subject = subject.as_deref().unwrap_or("student");
            let reference = reference.as_deref().unwrap_or("baseline");
            let metrics: Vec<&str> = if args.metrics.is_empty() {
                METRIC_REGISTRY
                    .iter()
                    .copied()
                    .filter(|m| {
                        table
                            .pairs()
                            .iter()
                            .all(|p| table.get(p, subject, m).is_some() && table.get(p, reference, m).is_some())
                    })
                    .collect()
            } else {
                args.metrics.iter().map(String::as_str).collect()
            };
            let mut out = compare_models(&table, subject, reference, &metrics)?;
            if let Ok(mut raw) = summarize_raw(&table, subject, &metrics) {
                out.append(&mut raw);
            }
            out
        }
    };
    for n in &notices {
        log::warn!("{n}");
    }
    report::write_all(&args.out, "report", &table, &summaries)?;
    Ok((table, summaries))
}
