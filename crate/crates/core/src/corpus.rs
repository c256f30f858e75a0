//! TSV comment corpora: loading, label schemas, seeded splits and class counts.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of unknown-label lines above which a load is rejected.
pub const UNKNOWN_LABEL_TOLERANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    English,
    Tamil,
    Malayalam,
}

impl Language {
    pub const ALL: [Language; 3] = [Language::English, Language::Tamil, Language::Malayalam];

    pub fn as_str(self) -> &'static str {
        match self {
            Language::English => "english",
            Language::Tamil => "tamil",
            Language::Malayalam => "malayalam",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Language {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "english" | "en" => Ok(Language::English),
            "tamil" | "ta" => Ok(Language::Tamil),
            "malayalam" | "ml" => Ok(Language::Malayalam),
            other => Err(Error::Config(format!("unknown language `{other}`"))),
        }
    }
}

/// Canonical three-way label set shared by all languages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Hope,
    NotHope,
    OtherLanguage,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Hope, Label::NotHope, Label::OtherLanguage];
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Label::Hope => 0,
            Label::NotHope => 1,
            Label::OtherLanguage => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Hope => "Hope",
            Label::NotHope => "NotHope",
            Label::OtherLanguage => "OtherLanguage",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Label::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parse(format!("unknown canonical label `{s}`")))
    }
}

/// Per-language raw-file spellings of the canonical labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    surfaces: BTreeMap<Language, [String; 3]>,
}

impl Default for LabelSchema {
    /// Spellings used by the released shared-task files.
    fn default() -> Self {
        let mut surfaces = BTreeMap::new();
        for lang in Language::ALL {
            let other = match lang {
                Language::English => "not-English",
                Language::Tamil => "not-Tamil",
                Language::Malayalam => "not-malayalam",
            };
            surfaces.insert(
                lang,
                [
                    "Hope_speech".to_string(),
                    "Non_hope_speech".to_string(),
                    other.to_string(),
                ],
            );
        }
        Self { surfaces }
    }
}

impl LabelSchema {
    /// Replaces the spelling of one label. Fails if that would make two labels
    /// share a spelling.
    pub fn with_surface(mut self, lang: Language, label: Label, surface: &str) -> Result<Self> {
        let entry = self
            .surfaces
            .get_mut(&lang)
            .expect("schema covers every language");
        entry[label.index()] = surface.trim().to_string();
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (lang, s) in &self.surfaces {
            if s.iter().any(String::is_empty) {
                return Err(Error::Config(format!("empty label spelling for {lang}")));
            }
            if s[0] == s[1] || s[0] == s[2] || s[1] == s[2] {
                return Err(Error::Config(format!(
                    "label spellings for {lang} are not distinct: {s:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn surface(&self, lang: Language, label: Label) -> &str {
        &self.surfaces[&lang][label.index()]
    }

    pub fn resolve(&self, lang: Language, surface: &str) -> Option<Label> {
        let s = surface.trim();
        self.surfaces[&lang]
            .iter()
            .position(|x| x == s)
            .and_then(Label::from_index)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledRecord {
    pub text: String,
    pub label: Label,
    pub language: Language,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledCorpus {
    language: Language,
    schema: LabelSchema,
    records: Vec<LabeledRecord>,
}

impl LabeledCorpus {
    pub fn new(language: Language, schema: LabelSchema) -> Self {
        Self {
            language,
            schema,
            records: Vec::new(),
        }
    }

    pub fn from_records(
        language: Language,
        schema: LabelSchema,
        records: Vec<LabeledRecord>,
    ) -> Result<Self> {
        let mut corpus = Self::new(language, schema);
        for r in records {
            corpus.push(r)?;
        }
        Ok(corpus)
    }

    pub fn push(&mut self, record: LabeledRecord) -> Result<()> {
        if record.language != self.language {
            return Err(Error::Config(format!(
                "record language {} does not match corpus language {}",
                record.language, self.language
            )));
        }
        if record.text.trim().is_empty() {
            return Err(Error::Config("record text is empty".into()));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn language(&self) -> Language {
        self.language
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn records(&self) -> &[LabeledRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.text.as_str())
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.label).collect()
    }

    fn subset(&self, indices: &[usize]) -> LabeledCorpus {
        LabeledCorpus {
            language: self.language,
            schema: self.schema.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Skip the first line.
    pub header: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RejectReason {
    UnknownLabel(String),
    EmptyText,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the source file.
    pub line: usize,
    pub reason: RejectReason,
}

#[derive(Clone, Debug)]
pub struct LoadReport {
    pub corpus: LabeledCorpus,
    pub rejected: Vec<Rejection>,
}

impl LoadReport {
    pub fn unknown_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self
            .rejected
            .iter()
            .filter_map(|r| match &r.reason {
                RejectReason::UnknownLabel(l) => Some(l.clone()),
                RejectReason::EmptyText => None,
            })
            .collect();
        labels.sort();
        labels.dedup();
        labels
    }
}

/// Reads `text<TAB>label[<TAB>...]` lines.
pub fn load_tsv(
    path: impl AsRef<Path>,
    language: Language,
    schema: &LabelSchema,
    opts: LoadOptions,
) -> Result<LoadReport> {
    let path = path.as_ref();
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    let content = String::from_utf8(raw)
        .map_err(|e| Error::Parse(format!("{} is not valid UTF-8: {e}", path.display())))?;
    parse_tsv(&content, language, schema, opts)
}

pub fn parse_tsv(
    content: &str,
    language: Language,
    schema: &LabelSchema,
    opts: LoadOptions,
) -> Result<LoadReport> {
    schema.validate()?;
    let mut corpus = LabeledCorpus::new(language, schema.clone());
    let mut rejected = Vec::new();
    let mut data_lines = 0usize;
    let mut unknown = 0usize;

    for (idx, line) in content.split('\n').enumerate() {
        if opts.header && idx == 0 {
            continue;
        }
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        data_lines += 1;
        let mut fields = line.split('\t');
        let text = fields.next().unwrap_or_default().trim_end();
        let Some(label_field) = fields.next() else {
            return Err(Error::Parse(format!(
                "line {}: expected at least 2 tab-separated fields",
                idx + 1
            )));
        };
        match schema.resolve(language, label_field) {
            None => {
                unknown += 1;
                rejected.push(Rejection {
                    line: idx + 1,
                    reason: RejectReason::UnknownLabel(label_field.trim().to_string()),
                });
            }
            Some(_) if text.trim().is_empty() => rejected.push(Rejection {
                line: idx + 1,
                reason: RejectReason::EmptyText,
            }),
            Some(label) => corpus.records.push(LabeledRecord {
                text: text.to_string(),
                label,
                language,
            }),
        }
    }

    let report = LoadReport { corpus, rejected };
    if data_lines > 0 && unknown as f64 / data_lines as f64 > UNKNOWN_LABEL_TOLERANCE {
        return Err(Error::SchemaMismatch {
            rejected: unknown,
            total: data_lines,
            labels: report.unknown_labels(),
        });
    }
    Ok(report)
}

pub fn to_tsv(corpus: &LabeledCorpus) -> String {
    let mut out = String::new();
    for r in corpus.records() {
        out.push_str(&r.text);
        out.push('\t');
        out.push_str(corpus.schema().surface(corpus.language(), r.label));
        out.push('\n');
    }
    out
}

pub fn save_tsv(corpus: &LabeledCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    crate::fsutil::write_atomic(path, to_tsv(corpus).as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
    pub seed: u64,
    /// Split each class separately with the same ratios.
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(train: f64, dev: f64, test: f64, seed: u64) -> Result<Self> {
        let spec = Self {
            train,
            dev,
            test,
            seed,
            stratified: false,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn stratified(mut self, on: bool) -> Self {
        self.stratified = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("train", self.train), ("dev", self.dev), ("test", self.test)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} ratio {r} not in (0, 1)")));
            }
        }
        let sum = self.train + self.dev + self.test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// `(⌊N·train⌋, ⌊N·dev⌋, remainder)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let dev = floor(self.dev).min(n - train);
        (train, dev, n - train - dev)
    }
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            dev: 0.1,
            test: 0.1,
            seed: 0,
            stratified: false,
        }
    }
}

/// In-place Fisher–Yates shuffle driven by `rng`.
pub(crate) fn fisher_yates<T, R: Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Seeded shuffled-index partition. Records keep their original relative
/// order inside each split.
pub fn split_corpus(
    corpus: &LabeledCorpus,
    spec: &SplitSpec,
) -> Result<(LabeledCorpus, LabeledCorpus, LabeledCorpus)> {
    spec.validate()?;
    if corpus.is_empty() {
        return Err(Error::DegenerateSplit {
            train: 0,
            dev: 0,
            test: 0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());

    let groups: Vec<Vec<usize>> = if spec.stratified {
        Label::ALL
            .iter()
            .map(|&l| {
                (0..corpus.len())
                    .filter(|&i| corpus.records[i].label == l)
                    .collect()
            })
            .collect()
    } else {
        vec![(0..corpus.len()).collect()]
    };

    for mut idx in groups {
        fisher_yates(&mut idx, &mut rng);
        let (nt, nd, _) = spec.sizes(idx.len());
        train.extend_from_slice(&idx[..nt]);
        dev.extend_from_slice(&idx[nt..nt + nd]);
        test.extend_from_slice(&idx[nt + nd..]);
    }

    if train.is_empty() || dev.is_empty() || test.is_empty() {
        return Err(Error::DegenerateSplit {
            train: train.len(),
            dev: dev.len(),
            test: test.len(),
        });
    }
    for v in [&mut train, &mut dev, &mut test] {
        v.sort_unstable();
    }
    Ok((corpus.subset(&train), corpus.subset(&dev), corpus.subset(&test)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionTable {
    pub counts: [usize; 3],
    pub total: usize,
}

impl DistributionTable {
    pub fn count(&self, label: Label) -> usize {
        self.counts[label.index()]
    }

    /// `class,count` rows including the total.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,count\n");
        for l in Label::ALL {
            out.push_str(&format!("{},{}\n", l.name(), self.count(l)));
        }
        out.push_str(&format!("Total,{}\n", self.total));
        out
    }
}

impl fmt::Display for DistributionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}{:>10}", "Class", "Count")?;
        for l in Label::ALL {
            writeln!(f, "{:<16}{:>10}", l.name(), group_thousands(self.count(l)))?;
        }
        write!(f, "{:<16}{:>10}", "Total", group_thousands(self.total))
    }
}

pub(crate) fn group_thousands(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::with_capacity(s.len() + s.len() / 3);
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

pub fn class_distribution(corpus: &LabeledCorpus) -> DistributionTable {
    let mut counts = [0usize; 3];
    for r in corpus.records() {
        counts[r.label.index()] += 1;
    }
    DistributionTable {
        counts,
        total: corpus.len(),
    }
}
