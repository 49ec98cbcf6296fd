//! Aligned line-based corpora.
//!
//! A [`CorpusSet`] groups everything known about one language pair: the
//! training sources and targets, each model's translations of the sources,
//! translations of truncated sources, and per-line sidecar scores. Every
//! store is memory-mapped and addressed through a sparse line index, so a
//! corpus of tens of millions of lines costs a few megabytes of heap.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use memmap2::Mmap;
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Lines between two entries of a store's sparse offset index.
const INDEX_STRIDE: usize = 64;

/// Fractions closer than this are treated as the same truncation point.
const FRACTION_EPS: f64 = 1e-9;

/// The model whose outputs a store holds.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelRole {
    Teacher,
    Student,
    Baseline,
    External(String),
}

impl ModelRole {
    pub fn as_str(&self) -> &str {
        match self {
            ModelRole::Teacher => "teacher",
            ModelRole::Student => "student",
            ModelRole::Baseline => "baseline",
            ModelRole::External(name) => name,
        }
    }
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "teacher" => ModelRole::Teacher,
            "student" => ModelRole::Student,
            "baseline" => ModelRole::Baseline,
            "" => return Err(Error::InvalidConfig("empty model role name".into())),
            other => ModelRole::External(other.to_string()),
        })
    }
}

impl TryFrom<String> for ModelRole {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelRole> for String {
    fn from(role: ModelRole) -> String {
        role.as_str().to_string()
    }
}

/// Key of a role-specific sidecar score, e.g. `comet-qe-22@student`.
pub fn role_score_key(name: &str, role: &str) -> String {
    format!("{name}@{role}")
}

/// Trim trailing whitespace (including `\r`); leading whitespace is kept.
pub fn trim_segment(s: &str) -> &str {
    s.trim_end()
}

enum Bytes {
    Mapped(Mmap),
    Owned(Vec<u8>),
}

impl Bytes {
    fn as_slice(&self) -> &[u8] {
        match self {
            Bytes::Mapped(m) => m,
            Bytes::Owned(v) => v,
        }
    }
}

/// One segment per line, backed by a memory map (or a buffer for in-memory stores).
pub struct LineStore {
    path: PathBuf,
    data: Bytes,
    n_lines: usize,
    /// Byte offset of every `INDEX_STRIDE`-th line.
    checkpoints: Vec<usize>,
}

impl fmt::Debug for LineStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LineStore")
            .field("path", &self.path)
            .field("n_lines", &self.n_lines)
            .finish()
    }
}

impl LineStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        let data = if len == 0 {
            Bytes::Owned(Vec::new())
        } else {
            // SAFETY: the map is read-only; inputs are not expected to be
            // modified while an audit runs.
            let map = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(&path, e))?;
            Bytes::Mapped(map)
        };
        Self::index(path, data)
    }

    /// Build a store from in-memory lines. Lines must not contain `\n`.
    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut buf = Vec::new();
        for line in lines {
            let line = line.as_ref();
            debug_assert!(!line.contains('\n'));
            buf.extend_from_slice(line.as_bytes());
            buf.push(b'\n');
        }
        Self::index(PathBuf::from("<memory>"), Bytes::Owned(buf)).expect("in-memory lines are valid UTF-8")
    }

    fn index(path: PathBuf, data: Bytes) -> Result<Self> {
        let bytes = data.as_slice();
        if let Err(e) = std::str::from_utf8(bytes) {
            return Err(Error::Encoding {
                path,
                offset: e.valid_up_to(),
            });
        }
        let mut checkpoints = vec![0];
        let mut n_lines = 0usize;
        for nl in memchr::memchr_iter(b'\n', bytes) {
            n_lines += 1;
            if n_lines.is_multiple_of(INDEX_STRIDE) {
                checkpoints.push(nl + 1);
            }
        }
        if bytes.last().is_some_and(|&b| b != b'\n') {
            n_lines += 1;
        }
        Ok(LineStore {
            path,
            data,
            n_lines,
            checkpoints,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.n_lines
    }

    pub fn is_empty(&self) -> bool {
        self.n_lines == 0
    }

    fn str_at(&self, start: usize, end: usize) -> &str {
        let bytes = &self.data.as_slice()[start..end];
        // SAFETY: the whole buffer was validated as UTF-8 in `index`, and
        // `start`/`end` sit next to `\n` bytes or the buffer ends, which are
        // always char boundaries.
        unsafe { std::str::from_utf8_unchecked(bytes) }
    }

    fn line_start(&self, index: usize) -> usize {
        let bytes = self.data.as_slice();
        let mut pos = self.checkpoints[index / INDEX_STRIDE];
        for _ in 0..index % INDEX_STRIDE {
            pos = memchr::memchr(b'\n', &bytes[pos..]).map_or(bytes.len(), |p| pos + p + 1);
        }
        pos
    }

    /// The raw line at `index`, without its terminator. Panics when out of range.
    pub fn get(&self, index: usize) -> &str {
        assert!(
            index < self.n_lines,
            "line {index} out of range for {} ({} lines)",
            self.path.display(),
            self.n_lines
        );
        let bytes = self.data.as_slice();
        let start = self.line_start(index);
        let end = memchr::memchr(b'\n', &bytes[start..]).map_or(bytes.len(), |p| start + p);
        self.str_at(start, end)
    }

    pub fn iter(&self) -> Lines<'_> {
        self.iter_range(0..self.n_lines)
    }

    /// Sequential iteration over `range`, seeking once to its start.
    pub fn iter_range(&self, range: Range<usize>) -> Lines<'_> {
        let end = range.end.min(self.n_lines);
        let start = range.start.min(end);
        Lines {
            store: self,
            pos: self.line_start(start),
            remaining: end - start,
        }
    }

    /// Re-emit the store, one `\n`-terminated line per segment.
    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for line in self.iter() {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub struct Lines<'a> {
    store: &'a LineStore,
    pos: usize,
    remaining: usize,
}

impl<'a> Iterator for Lines<'a> {
    type Item = &'a str;

    fn next(&mut self) -> Option<&'a str> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let bytes = self.store.data.as_slice();
        let start = self.pos;
        let end = memchr::memchr(b'\n', &bytes[start..]).map_or(bytes.len(), |p| start + p);
        self.pos = (end + 1).min(bytes.len());
        Some(self.store.str_at(start, end))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        (self.remaining, Some(self.remaining))
    }
}

impl ExactSizeIterator for Lines<'_> {}

fn parse_score(s: &str) -> Option<f64> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("nan") {
        return Some(f64::NAN);
    }
    s.parse::<f64>().ok()
}

/// One float per line; `nan` marks a missing value.
#[derive(Debug)]
pub struct ScoreStore {
    lines: LineStore,
}

impl ScoreStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(LineStore::open(path)?)
    }

    pub fn from_store(lines: LineStore) -> Result<Self> {
        for (i, line) in lines.iter().enumerate() {
            if parse_score(line).is_none() {
                return Err(Error::MalformedValue {
                    path: lines.path().to_path_buf(),
                    line: i + 1,
                    value: line.to_string(),
                });
            }
        }
        Ok(ScoreStore { lines })
    }

    pub fn from_values(values: &[f64]) -> Self {
        let lines =
            LineStore::from_lines(
                values
                    .iter()
                    .map(|v| if v.is_nan() { "nan".to_string() } else { v.to_string() }),
            );
        ScoreStore { lines }
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn path(&self) -> &Path {
        self.lines.path()
    }

    pub fn get(&self, index: usize) -> f64 {
        parse_score(self.lines.get(index)).expect("validated at load")
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.lines.iter().map(|l| parse_score(l).expect("validated at load"))
    }

    pub fn iter_range(&self, range: Range<usize>) -> impl Iterator<Item = f64> + '_ {
        self.lines
            .iter_range(range)
            .map(|l| parse_score(l).expect("validated at load"))
    }

    pub fn nan_count(&self) -> usize {
        self.iter().filter(|v| v.is_nan()).count()
    }
}

fn parse_lang_pair(line: &str) -> Option<Option<(&str, &str)>> {
    let line = trim_segment(line);
    if line.is_empty() {
        return Some(None);
    }
    let (src, tgt) = line.split_once('\t')?;
    if src.is_empty() || tgt.is_empty() || tgt.contains('\t') {
        return None;
    }
    Some(Some((src, tgt)))
}

/// Per-line `src_code<TAB>tgt_code` produced by an external language identifier.
/// A blank line means the identifier gave no answer for that record.
#[derive(Debug)]
pub struct LangIdStore {
    lines: LineStore,
}

impl LangIdStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_store(LineStore::open(path)?)
    }

    pub fn from_store(lines: LineStore) -> Result<Self> {
        for (i, line) in lines.iter().enumerate() {
            if parse_lang_pair(line).is_none() {
                return Err(Error::MalformedValue {
                    path: lines.path().to_path_buf(),
                    line: i + 1,
                    value: line.to_string(),
                });
            }
        }
        Ok(LangIdStore { lines })
    }

    pub fn len(&self) -> usize {
        self.lines.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lines.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<(&str, &str)> {
        parse_lang_pair(self.lines.get(index)).expect("validated at load")
    }
}

/// A JSON object whose keys must be unique.
#[derive(Debug, Clone, Default)]
pub struct UniqueMap<V>(pub Vec<(String, V)>);

impl<'de, V: Deserialize<'de>> Deserialize<'de> for UniqueMap<V> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct UniqueVisitor<V>(std::marker::PhantomData<V>);

        impl<'de, V: Deserialize<'de>> Visitor<'de> for UniqueVisitor<V> {
            type Value = UniqueMap<V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object with unique keys")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<Self::Value, A::Error> {
                let mut entries: Vec<(String, V)> = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, V>()? {
                    if entries.iter().any(|(k, _)| *k == key) {
                        return Err(serde::de::Error::custom(format!("duplicate key {key:?}")));
                    }
                    entries.push((key, value));
                }
                Ok(UniqueMap(entries))
            }
        }

        deserializer.deserialize_map(UniqueVisitor(std::marker::PhantomData))
    }
}

/// The JSON document that names every file of a corpus set.
///
/// Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub language_pair: String,
    pub sources: PathBuf,
    pub targets: PathBuf,
    #[serde(default)]
    pub translations: UniqueMap<PathBuf>,
    #[serde(default)]
    pub prefix_translations: UniqueMap<UniqueMap<PathBuf>>,
    #[serde(default)]
    pub scores: UniqueMap<PathBuf>,
    #[serde(default)]
    pub lang_ids: Option<PathBuf>,
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl Manifest {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Everything loaded for one language pair.
#[derive(Debug)]
pub struct CorpusSet {
    language_pair: String,
    n_records: usize,
    sources: LineStore,
    targets: LineStore,
    translations: BTreeMap<ModelRole, LineStore>,
    prefix_translations: BTreeMap<ModelRole, Vec<(f64, LineStore)>>,
    scores: BTreeMap<String, ScoreStore>,
    lang_ids: Option<LangIdStore>,
    provenance: serde_json::Value,
}

pub struct CorpusBuilder {
    language_pair: String,
    sources: LineStore,
    targets: LineStore,
    translations: Vec<(ModelRole, LineStore)>,
    prefix_translations: Vec<(ModelRole, f64, LineStore)>,
    scores: Vec<(String, ScoreStore)>,
    lang_ids: Option<LangIdStore>,
    provenance: serde_json::Value,
}

impl CorpusBuilder {
    pub fn translation(mut self, role: ModelRole, store: LineStore) -> Self {
        self.translations.push((role, store));
        self
    }

    pub fn prefix_translation(mut self, role: ModelRole, fraction: f64, store: LineStore) -> Self {
        self.prefix_translations.push((role, fraction, store));
        self
    }

    pub fn score(mut self, name: impl Into<String>, store: ScoreStore) -> Self {
        self.scores.push((name.into(), store));
        self
    }

    pub fn lang_ids(mut self, store: LangIdStore) -> Self {
        self.lang_ids = Some(store);
        self
    }

    pub fn provenance(mut self, provenance: serde_json::Value) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn build(self) -> Result<CorpusSet> {
        if self.language_pair.trim().is_empty() {
            return Err(Error::InvalidConfig("language_pair must be non-empty".into()));
        }
        let n_records = self.sources.len();
        let reference = self.sources.path().to_path_buf();
        let check = |path: &Path, found: usize| -> Result<()> {
            if found != n_records {
                return Err(Error::Alignment {
                    file: path.to_path_buf(),
                    found,
                    reference: reference.clone(),
                    expected: n_records,
                });
            }
            Ok(())
        };

        check(self.targets.path(), self.targets.len())?;

        let mut translations = BTreeMap::new();
        for (role, store) in self.translations {
            check(store.path(), store.len())?;
            if translations.insert(role.clone(), store).is_some() {
                return Err(Error::DuplicateKey(format!("translation role {role}")));
            }
        }

        let mut prefix_translations: BTreeMap<ModelRole, Vec<(f64, LineStore)>> = BTreeMap::new();
        for (role, fraction, store) in self.prefix_translations {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "prefix fraction {fraction} for role {role} is outside (0, 1]"
                )));
            }
            check(store.path(), store.len())?;
            let entry = prefix_translations.entry(role.clone()).or_default();
            if entry.iter().any(|(f, _)| (f - fraction).abs() < FRACTION_EPS) {
                return Err(Error::DuplicateKey(format!(
                    "prefix translation role {role} fraction {fraction}"
                )));
            }
            entry.push((fraction, store));
            entry.sort_by(|a, b| a.0.total_cmp(&b.0));
        }

        let mut scores = BTreeMap::new();
        for (name, store) in self.scores {
            check(store.path(), store.len())?;
            if scores.insert(name.clone(), store).is_some() {
                return Err(Error::DuplicateKey(format!("score {name}")));
            }
        }

        if let Some(ids) = &self.lang_ids {
            check(ids.lines.path(), ids.len())?;
        }

        Ok(CorpusSet {
            language_pair: self.language_pair,
            n_records,
            sources: self.sources,
            targets: self.targets,
            translations,
            prefix_translations,
            scores,
            lang_ids: self.lang_ids,
            provenance: self.provenance,
        })
    }
}

impl CorpusSet {
    pub fn builder(language_pair: impl Into<String>, sources: LineStore, targets: LineStore) -> CorpusBuilder {
        CorpusBuilder {
            language_pair: language_pair.into(),
            sources,
            targets,
            translations: Vec::new(),
            prefix_translations: Vec::new(),
            scores: Vec::new(),
            lang_ids: None,
            provenance: serde_json::Value::Null,
        }
    }

    pub fn language_pair(&self) -> &str {
        &self.language_pair
    }

    /// Declared `(source, target)` language codes, split on the first `-`.
    pub fn declared_languages(&self) -> Option<(&str, &str)> {
        self.language_pair.split_once('-')
    }

    pub fn n_records(&self) -> usize {
        self.n_records
    }

    pub fn sources(&self) -> &LineStore {
        &self.sources
    }

    pub fn targets(&self) -> &LineStore {
        &self.targets
    }

    pub fn roles(&self) -> impl Iterator<Item = &ModelRole> {
        self.translations.keys()
    }

    pub fn has_role(&self, role: &ModelRole) -> bool {
        self.translations.contains_key(role)
    }

    pub fn translations(&self, role: &ModelRole) -> Result<&LineStore> {
        self.translations
            .get(role)
            .ok_or_else(|| Error::MissingRole(role.clone()))
    }

    pub fn prefix_fractions(&self, role: &ModelRole) -> Vec<f64> {
        self.prefix_translations
            .get(role)
            .map(|v| v.iter().map(|(f, _)| *f).collect())
            .unwrap_or_default()
    }

    pub fn prefix_translations(&self, role: &ModelRole, fraction: f64) -> Result<&LineStore> {
        self.prefix_translations
            .get(role)
            .and_then(|v| v.iter().find(|(f, _)| (f - fraction).abs() < FRACTION_EPS))
            .map(|(_, store)| store)
            .ok_or_else(|| Error::MissingPrefix {
                role: role.clone(),
                fraction,
            })
    }

    pub fn score_names(&self) -> impl Iterator<Item = &str> {
        self.scores.keys().map(String::as_str)
    }

    pub fn scores(&self, name: &str) -> Result<&ScoreStore> {
        self.scores
            .get(name)
            .ok_or_else(|| Error::UnknownScore(name.to_string()))
    }

    pub fn has_score(&self, name: &str) -> bool {
        self.scores.contains_key(name)
    }

    pub fn lang_ids(&self) -> Option<&LangIdStore> {
        self.lang_ids.as_ref()
    }

    pub fn provenance(&self) -> &serde_json::Value {
        &self.provenance
    }

    pub fn record(&self, index: usize) -> Result<RecordView<'_>> {
        if index >= self.n_records {
            return Err(Error::IndexOutOfRange {
                index,
                n_records: self.n_records,
            });
        }
        Ok(RecordView { corpus: self, index })
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Load every store named by the manifest at `manifest_path`.
pub fn load_corpus_set(manifest_path: impl AsRef<Path>) -> Result<CorpusSet> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let bad = |message: String| Error::Manifest {
        path: manifest_path.to_path_buf(),
        message,
    };

    let mut builder = CorpusSet::builder(
        manifest.language_pair.clone(),
        LineStore::open(resolve(base, &manifest.sources))?,
        LineStore::open(resolve(base, &manifest.targets))?,
    )
    .provenance(manifest.provenance.clone());

    for (role, path) in &manifest.translations.0 {
        let role: ModelRole = role.parse()?;
        builder = builder.translation(role, LineStore::open(resolve(base, path))?);
    }
    for (role, fractions) in &manifest.prefix_translations.0 {
        let role: ModelRole = role.parse()?;
        for (fraction, path) in &fractions.0 {
            let f: f64 = fraction
                .trim()
                .parse()
                .map_err(|_| bad(format!("prefix fraction {fraction:?} for role {role} is not a number")))?;
            builder = builder.prefix_translation(role.clone(), f, LineStore::open(resolve(base, path))?);
        }
    }
    for (name, path) in &manifest.scores.0 {
        builder = builder.score(name.clone(), ScoreStore::open(resolve(base, path))?);
    }
    if let Some(path) = &manifest.lang_ids {
        builder = builder.lang_ids(LangIdStore::open(resolve(base, path))?);
    }
    builder.build()
}

/// `n` distinct record indices, uniform without replacement, sorted ascending.
pub fn sample_random(corpus: &CorpusSet, n: usize, seed: u64) -> Result<Vec<usize>> {
    sample_indices(corpus.n_records(), n, seed)
}

pub fn sample_indices(n_records: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n > n_records {
        return Err(Error::Degenerate(format!(
            "cannot sample {n} records from a corpus of {n_records}"
        )));
    }
    Ok(rng::sample_sorted(n_records, n, seed))
}

/// Borrowed access to one record across all stores.
#[derive(Clone, Copy)]
pub struct RecordView<'a> {
    corpus: &'a CorpusSet,
    index: usize,
}

impl<'a> RecordView<'a> {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn corpus(&self) -> &'a CorpusSet {
        self.corpus
    }

    pub fn source(&self) -> &'a str {
        self.corpus.sources.get(self.index)
    }

    pub fn target(&self) -> &'a str {
        self.corpus.targets.get(self.index)
    }

    pub fn translation(&self, role: &ModelRole) -> Result<&'a str> {
        Ok(self.corpus.translations(role)?.get(self.index))
    }

    pub fn prefix_translation(&self, role: &ModelRole, fraction: f64) -> Result<&'a str> {
        Ok(self.corpus.prefix_translations(role, fraction)?.get(self.index))
    }

    pub fn score(&self, name: &str) -> Result<f64> {
        Ok(self.corpus.scores(name)?.get(self.index))
    }

    /// `None` when no language-ID sidecar was loaded; `Some(None)` when the
    /// sidecar has no answer for this record.
    pub fn lang_ids(&self) -> Option<Option<(&'a str, &'a str)>> {
        self.corpus.lang_ids.as_ref().map(|ids| ids.get(self.index))
    }
}
