//! The `audit` command: replication, ExMem, OscHal and NatHal for every role.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use kdaudit::hallucination::{count_translations, scan_hallucinations, write_group_tsv, HalCounts, HAL_TSV_HEADER};
use kdaudit::memorization::{
    classify_provenance, replication_rate, scan_exmem, ExmemCounts, ExmemResult, EXMEM_TSV_HEADER,
};
use kdaudit::report::{self, compare_models, summarize_raw, DeltaSummary, MetricTable};
use kdaudit::{CorpusSet, ExmemProvenance, ModelRole, Reference};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Settings;
use crate::exit::{output_error, CliResult};

/// Records per unit of parallel work.
pub const CHUNK: usize = 16 * 1024;

/// Map `f` over consecutive record chunks in parallel and feed the results
/// to `sink` in index order. Only a bounded batch of chunks is in flight.
pub fn for_each_chunk<T, F, S>(n_records: usize, f: F, mut sink: S) -> CliResult<()>
where
    T: Send,
    F: Fn(Range<usize>) -> CliResult<T> + Sync,
    S: FnMut(T) -> CliResult<()>,
{
    let n_chunks = n_records.div_ceil(CHUNK);
    let batch = 2 * rayon::current_num_threads().max(1);
    let mut next = 0;
    while next < n_chunks {
        let end = (next + batch).min(n_chunks);
        let results: Vec<T> = (next..end)
            .into_par_iter()
            .map(|c| f(c * CHUNK..((c + 1) * CHUNK).min(n_records)))
            .collect::<CliResult<_>>()?;
        for r in results {
            sink(r)?;
        }
        next = end;
    }
    Ok(())
}

pub(crate) struct Dump {
    path: PathBuf,
    w: BufWriter<File>,
}

impl Dump {
    pub(crate) fn create(path: PathBuf, header: &str) -> CliResult<Self> {
        let file = File::create(&path).map_err(|e| output_error(&path, e))?;
        let mut d = Dump {
            w: BufWriter::new(file),
            path,
        };
        d.line(header)?;
        Ok(d)
    }

    pub(crate) fn line(&mut self, s: &str) -> CliResult<()> {
        writeln!(self.w, "{s}").map_err(|e| output_error(&self.path, e))
    }

    pub(crate) fn finish(mut self) -> CliResult<()> {
        self.w.flush().map_err(|e| output_error(&self.path, e))
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| output_error(path, e))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProvenanceCounts {
    pub primary: usize,
    pub secondary: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RoleAudit {
    pub replication_tc: f64,
    pub replication_tt: Option<f64>,
    pub exmem_tc: Option<ExmemCounts>,
    pub exmem_tt: Option<ExmemCounts>,
    pub exmem_provenance: Option<ProvenanceCounts>,
    pub hallucinations: HalCounts,
    pub nathal_distinct_translations: usize,
    pub nathal_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub language_pair: String,
    pub n_records: usize,
    pub seed: u64,
    pub roles: BTreeMap<String, RoleAudit>,
    pub notices: Vec<String>,
}

fn missing_prefixes(corpus: &CorpusSet, role: &ModelRole, fractions: &[f64]) -> Vec<f64> {
    let have = corpus.prefix_fractions(role);
    fractions
        .iter()
        .copied()
        .filter(|f| !have.iter().any(|h| (h - f).abs() < 1e-9))
        .collect()
}

struct ExmemChunk {
    tc: Vec<ExmemResult>,
    tt: Option<Vec<ExmemResult>>,
}

fn audit_exmem(
    s: &Settings,
    corpus: &CorpusSet,
    role: &ModelRole,
    with_teacher_ref: bool,
    dir: &Path,
    ra: &mut RoleAudit,
) -> CliResult<()> {
    let cfg = &s.config.exmem;
    let mut tc_dump = Dump::create(dir.join(format!("{role}.exmem_tc.tsv")), EXMEM_TSV_HEADER)?;
    let mut tt_dump = match with_teacher_ref {
        true => Some(Dump::create(
            dir.join(format!("{role}.exmem_tt.tsv")),
            EXMEM_TSV_HEADER,
        )?),
        false => None,
    };
    let mut tc_counts = ExmemCounts::default();
    let mut tt_counts = ExmemCounts::default();
    let mut prov = ProvenanceCounts::default();
    for_each_chunk(
        corpus.n_records(),
        |range| {
            let tc = scan_exmem(corpus, role, Reference::CorpusTargets, cfg, range.clone())?;
            let tt = match with_teacher_ref {
                true => Some(scan_exmem(corpus, role, Reference::TeacherTargets, cfg, range)?),
                false => None,
            };
            Ok(ExmemChunk { tc, tt })
        },
        |chunk| {
            for r in &chunk.tc {
                tc_counts.add(r);
                tc_dump.line(&r.tsv_row())?;
            }
            if let (Some(tt), Some(dump)) = (&chunk.tt, tt_dump.as_mut()) {
                for (a, b) in chunk.tc.iter().zip(tt) {
                    tt_counts.add(b);
                    dump.line(&b.tsv_row())?;
                    match classify_provenance(a, b)? {
                        Some(ExmemProvenance::Primary) => prov.primary += 1,
                        Some(ExmemProvenance::Secondary) => prov.secondary += 1,
                        None => {}
                    }
                }
            }
            Ok(())
        },
    )?;
    tc_dump.finish()?;
    ra.replication_tc = tc_counts.replication_rate().unwrap_or(0.0);
    ra.exmem_tc = Some(tc_counts);
    if let Some(d) = tt_dump {
        d.finish()?;
        ra.replication_tt = tt_counts.replication_rate();
        ra.exmem_tt = Some(tt_counts);
        ra.exmem_provenance = Some(prov);
    }
    Ok(())
}

fn audit_hallucinations(
    s: &Settings,
    corpus: &CorpusSet,
    role: &ModelRole,
    dir: &Path,
    ra: &mut RoleAudit,
) -> CliResult<()> {
    let counts = count_translations(corpus, role, &s.config.nathal)?;
    let mut dump = Dump::create(dir.join(format!("{role}.hal.tsv")), HAL_TSV_HEADER)?;
    let mut tally = HalCounts::default();
    for_each_chunk(
        corpus.n_records(),
        |range| Ok(scan_hallucinations(corpus, role, &s.config.oschal, &counts, range)?),
        |flags| {
            for f in &flags {
                tally.add(f);
                dump.line(&f.tsv_row())?;
            }
            Ok(())
        },
    )?;
    dump.finish()?;
    let groups = counts.groups();
    let path = dir.join(format!("{role}.nathal_groups.tsv"));
    let mut w = BufWriter::new(File::create(&path).map_err(|e| output_error(&path, e))?);
    write_group_tsv(&mut w, &groups)
        .and_then(|_| w.flush())
        .map_err(|e| output_error(&path, e))?;
    ra.hallucinations = tally;
    ra.nathal_distinct_translations = counts.distinct();
    ra.nathal_groups = groups.len();
    Ok(())
}

fn audit_role(
    s: &Settings,
    corpus: &CorpusSet,
    role: &ModelRole,
    dir: &Path,
    notices: &mut Vec<String>,
) -> CliResult<RoleAudit> {
    let mut ra = RoleAudit::default();
    let missing = missing_prefixes(corpus, role, &s.config.exmem.prefix_fractions);
    let has_teacher = corpus.has_role(&ModelRole::Teacher);
    let teacher_ref = *role == ModelRole::Student && has_teacher;
    if *role == ModelRole::Student && !has_teacher {
        notices.push("student: no teacher translations; metrics wrt teacher targets skipped".into());
    }
    if missing.is_empty() {
        audit_exmem(s, corpus, role, teacher_ref, dir, &mut ra)?;
    } else {
        let list: Vec<String> = missing.iter().map(|f| f.to_string()).collect();
        notices.push(format!(
            "{role}: no prefix decodes for fraction(s) {}; ExMem skipped",
            list.join(", ")
        ));
        ra.replication_tc = replication_rate(corpus, role, Reference::CorpusTargets)?;
        if teacher_ref {
            ra.replication_tt = Some(replication_rate(corpus, role, Reference::TeacherTargets)?);
        }
    }
    if !corpus.has_score(&s.config.nathal.score_key(role)) {
        notices.push(format!(
            "{role}: no {} sidecar; NatHal skipped",
            s.config.nathal.score_key(role)
        ));
    }
    audit_hallucinations(s, corpus, role, dir, &mut ra)?;
    Ok(ra)
}

fn build_table(summary: &AuditSummary, notices: &mut Vec<String>) -> kdaudit::Result<MetricTable> {
    let pair = &summary.language_pair;
    let mut t = MetricTable::new();
    for (role, ra) in &summary.roles {
        t.insert(pair, role, "replication_tc", ra.replication_tc)?;
        if let Some(v) = ra.replication_tt {
            t.insert(pair, role, "replication_tt", v)?;
        }
        if let Some(c) = &ra.exmem_tc {
            t.insert(pair, role, "exmem_tc", c.exmem_rate())?;
        }
        if let Some(c) = &ra.exmem_tt {
            t.insert(pair, role, "exmem_tt", c.exmem_rate())?;
        }
        match ra.hallucinations.oschal_rate() {
            Ok(v) => t.insert(pair, role, "oschal", v)?,
            Err(e) => notices.push(format!("{role}: {e}")),
        }
        match ra.hallucinations.nathal_rate() {
            Ok(v) => t.insert(pair, role, "nathal", v)?,
            Err(e) => notices.push(format!("{role}: {e}")),
        }
    }
    Ok(t)
}

/// Student-versus-baseline changes for every metric both have, plus the
/// raw means of teacher replication and student replication wrt the teacher.
pub fn default_summaries(table: &MetricTable, notices: &mut Vec<String>) -> Vec<DeltaSummary> {
    let mut out = Vec::new();
    for metric in report::METRIC_REGISTRY {
        let complete = |role: &str| table.pairs().iter().all(|p| table.get(p, role, metric).is_some());
        if table.pairs().is_empty() || !complete("student") || !complete("baseline") {
            continue;
        }
        match compare_models(table, "student", "baseline", &[metric]) {
            Ok(mut s) => out.append(&mut s),
            Err(e) => notices.push(format!("{metric}: student vs baseline skipped: {e}")),
        }
    }
    for (role, metric) in [("teacher", "replication_tc"), ("student", "replication_tt")] {
        if let Ok(mut s) = summarize_raw(table, role, &[metric]) {
            out.append(&mut s);
        }
    }
    out
}

/// Run the audit and write every output under `s.out`.
pub fn cmd_audit(s: &Settings, corpus: &CorpusSet) -> CliResult<AuditSummary> {
    s.config.exmem.validate()?;
    s.config.oschal.validate()?;
    s.config.nathal.validate()?;
    let records = s.out.join("records");
    std::fs::create_dir_all(&records).map_err(|e| output_error(&records, e))?;

    let mut notices = Vec::new();
    if s.config.exmem.use_lang_check && corpus.lang_ids().is_none() {
        notices.push("language check skipped: no lang_ids sidecar".to_string());
    }
    let mut roles = BTreeMap::new();
    for role in corpus.roles() {
        let ra = audit_role(s, corpus, role, &records, &mut notices)?;
        roles.insert(role.to_string(), ra);
    }
    let mut summary = AuditSummary {
        language_pair: corpus.language_pair().to_string(),
        n_records: corpus.n_records(),
        seed: s.seed,
        roles,
        notices: Vec::new(),
    };
    let table = build_table(&summary, &mut notices)?;
    let summaries = default_summaries(&table, &mut notices);
    summary.notices = notices;

    report::write_all(&s.out, "report", &table, &summaries)?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_text(&s.out.join("audit.json"), &json)?;
    let notices: String = summary.notices.iter().map(|n| format!("{n}\n")).collect();
    write_text(&s.out.join("notices.txt"), &notices)?;
    for n in &summary.notices {
        log::warn!("{n}");
    }
    Ok(summary)
}
