//! Memorization and hallucination audits for sequence-level knowledge
//! distillation pipelines.
//!
//! A [`CorpusSet`] holds a parallel corpus with the translations each model
//! produced for it, plus optional score sidecars. The analysis modules read
//! it record by record:
//!
//! - [`memorization`]: replication and extractive memorization (ExMem)
//! - [`hallucination`]: oscillatory (OscHal) and natural (NatHal) hallucinations
//! - [`subgroups`]: quality, counterfactual-memorization and confidence groups
//! - [`selector`]: high-quality subset selection for teacher fine-tuning
//! - [`report`]: cross-pair comparison tables

// Negated float comparisons below are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod corpus;
pub mod error;
pub mod hallucination;
pub mod memorization;
pub mod metrics;
pub mod report;
pub mod rng;
pub mod selector;
pub mod subgroups;

pub use corpus::{load_corpus_set, CorpusSet, LangIdStore, LineStore, Manifest, ModelRole, RecordView, ScoreStore};
pub use error::{Error, Result};
pub use hallucination::{HalCounts, HalFlags, NathalConfig, OschalConfig};
pub use memorization::{ExclusionReason, ExmemConfig, ExmemCounts, ExmemProvenance, ExmemResult, Reference};
pub use metrics::ChrfParams;
pub use report::{DeltaSummary, MetricTable, ReportFormat};
pub use selector::{Selection, SelectionCriteria};
pub use subgroups::{CmScore, ModelEvidence, Subgroup, SubgroupKind, SubgroupSpec};
