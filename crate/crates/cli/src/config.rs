//! Run configuration: a JSON file mirroring [`RunConfig`], with command-line overrides.

use std::path::{Path, PathBuf};

use kdaudit::hallucination::{NathalConfig, OschalConfig};
use kdaudit::memorization::ExmemConfig;
use kdaudit::selector::{FinetuneTarget, SelectionCriteria, DEFAULT_CONFIDENCE_SCORE};
use kdaudit::subgroups::{EvalConfig, ModelEvidence, SubgroupSpec};
use serde::{Deserialize, Serialize};

use crate::exit::{usage, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvidenceFiles {
    pub model_id: String,
    /// One `0`/`1` per record: whether the model trained on it.
    pub mask: PathBuf,
    /// One probability per record.
    pub scores: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectConfig {
    /// The seed inside is ignored; selection draws from the run seed.
    pub criteria: SelectionCriteria,
    pub confidence_score: String,
    pub target: FinetuneTarget,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            criteria: SelectionCriteria::default(),
            confidence_score: DEFAULT_CONFIDENCE_SCORE.into(),
            target: FinetuneTarget::default(),
        }
    }
}

fn default_workers() -> usize {
    1
}

fn default_subgroups() -> Vec<SubgroupSpec> {
    SubgroupSpec::standard_set()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    /// Mandatory, either here or on the command line.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub exmem: ExmemConfig,
    #[serde(default)]
    pub oschal: OschalConfig,
    #[serde(default)]
    pub nathal: NathalConfig,
    #[serde(default = "default_subgroups")]
    pub subgroups: Vec<SubgroupSpec>,
    #[serde(default)]
    pub evidence: Vec<EvidenceFiles>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub selection: SelectConfig,
}

impl RunConfig {
    pub fn for_manifest(manifest: PathBuf) -> Self {
        RunConfig {
            manifest,
            seed: None,
            workers: default_workers(),
            out: None,
            exmem: ExmemConfig::default(),
            oschal: OschalConfig::default(),
            nathal: NathalConfig::default(),
            subgroups: default_subgroups(),
            evidence: Vec::new(),
            eval: EvalConfig::default(),
            selection: SelectConfig::default(),
        }
    }

    /// Parse a config file; relative paths inside resolve against its directory.
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.manifest);
        if let Some(out) = cfg.out.as_mut() {
            resolve(out);
        }
        for e in &mut cfg.evidence {
            resolve(&mut e.mask);
            resolve(&mut e.scores);
        }
        Ok(cfg)
    }

    pub fn load_evidence(&self) -> kdaudit::Result<Vec<ModelEvidence>> {
        self.evidence
            .iter()
            .map(|e| ModelEvidence::load(e.model_id.clone(), &e.mask, &e.scores))
            .collect()
    }
}

/// A config with every override applied and every mandatory value present.
#[derive(Debug, Clone)]
pub struct Settings {
    pub config: RunConfig,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Settings {
    pub fn resolve(config: RunConfig, o: &Overrides) -> CliResult<Self> {
        let seed = o
            .seed
            .or(config.seed)
            .ok_or_else(|| usage("a seed is required: pass --seed or set \"seed\" in the config"))?;
        let workers = o.workers.unwrap_or(config.workers);
        if workers < 1 {
            return Err(usage("--workers must be at least 1"));
        }
        let out = o
            .out
            .clone()
            .or_else(|| config.out.clone())
            .ok_or_else(|| usage("an output directory is required: pass --out or set \"out\" in the config"))?;
        Ok(Settings {
            config,
            seed,
            workers,
            out,
        })
    }
}
