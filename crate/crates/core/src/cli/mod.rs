//! Command-line front end.
//!
//! Exit codes: 0 success, 1 user error (bad input, config or arguments),
//! 2 internal error.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::agreement::{krippendorff_alpha, ReliabilityMatrix};
use crate::corpus::{
    class_distribution, load_tsv, save_tsv, split_corpus, DistributionTable, Label, LabelSchema, LabeledCorpus,
    Language, LoadOptions, SplitSpec,
};
use crate::encoder::{BackboneKind, CharVocab, Vocabulary};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::metrics::{comparison_csv, comparison_text, sort_comparison, ComparisonRow, EvaluationReport};
use crate::model::{ModelBundle, Tokenizer};
use crate::train::{self, checkpoint, History, LmConfig};

pub use config::{parse_config, read_settings, Regimen, RunConfig, Settings, SEED_ENV};

pub const MANIFEST: &str = "manifest.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const HISTORY: &str = "history.csv";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_CSV: &str = "report.csv";

#[derive(Parser, Debug)]
#[command(name = "hopespeech", version, about = "Hope-speech corpus tooling, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a labeled TSV, split it and write train/dev/test files.
    Ingest(IngestArgs),
    /// Class distribution of one or more labeled TSV files.
    Stats(StatsArgs),
    /// Krippendorff's alpha of an items × annotators CSV.
    Alpha(AlphaArgs),
    /// Train a classifier from a run config.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled TSV.
    Evaluate(EvaluateArgs),
    /// Label raw texts with a checkpoint.
    Predict(PredictArgs),
    /// Rank finished runs by test weighted-F1.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    lang: Language,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// The first line is a header.
    #[arg(long)]
    header: bool,
    /// Train, dev and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 1, default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split every class separately.
    #[arg(long)]
    stratified: bool,
}

#[derive(Args, Debug)]
struct StatsArgs {
    #[arg(long)]
    lang: Language,
    #[arg(long)]
    header: bool,
    /// Also print the split sizes these fractions would give.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    split: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
    #[arg(required = true)]
    files: Vec<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Text,
    Csv,
    Both,
}

#[derive(Args, Debug)]
struct AlphaArgs {
    file: PathBuf,
    /// The CSV has no header row.
    #[arg(long)]
    no_header: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Any other key, as `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    header: bool,
    /// Write report files here as well.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// File with one text per line.
    #[arg(long)]
    input: Option<PathBuf>,
    texts: Vec<String>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    dir: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Both)]
    format: Format,
}

/// Summary written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub tool_version: String,
    pub language: Language,
    pub seed: u64,
    pub architecture: String,
    pub embedding: String,
    pub config: Option<RunConfig>,
    pub best_epoch: Option<usize>,
    pub dev_weighted_f1: Option<f64>,
    pub last_epoch_dev_weighted_f1: Option<f64>,
    pub test_weighted_f1: Option<f64>,
    /// Split the stored report was computed on.
    pub report_split: Option<String>,
    pub report: Option<EvaluationReport>,
    pub lm_losses: Vec<f64>,
    pub split_sizes: Option<[usize; 3]>,
    pub files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, language: Language, seed: u64) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            language,
            seed,
            architecture: String::new(),
            embedding: String::new(),
            config: None,
            best_epoch: None,
            dev_weighted_f1: None,
            last_epoch_dev_weighted_f1: None,
            test_weighted_f1: None,
            report_split: None,
            report: None,
            lm_losses: Vec::new(),
            split_sizes: None,
            files: Vec::new(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        text.push('\n');
        write_atomic(dir.join(MANIFEST), text.as_bytes())
    }
}

/// 1 for problems with inputs or configuration, 2 for internal failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io { .. }
        | Error::SchemaMismatch { .. }
        | Error::DegenerateSplit { .. }
        | Error::InsufficientData(_)
        | Error::UndefinedAlpha
        | Error::Config(_)
        | Error::Parse(_)
        | Error::Checkpoint(_)
        | Error::EmptySequence => 1,
        Error::Shape(_)
        | Error::IndexOutOfRange { .. }
        | Error::LengthMismatch { .. }
        | Error::NonFinite(_)
        | Error::Diverged { .. } => 2,
    }
}

/// Runs the CLI on `args` (program name first), printing to stdout/stderr.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`dispatch`] with explicit output streams.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let result = match cli.command {
        Command::Ingest(a) => ingest(a, out),
        Command::Stats(a) => stats(a, out),
        Command::Alpha(a) => alpha(a, out),
        Command::Train(a) => train_cmd(a, out, err),
        Command::Evaluate(a) => evaluate_cmd(a, out),
        Command::Predict(a) => predict_cmd(a, out),
        Command::Compare(a) => compare(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn w(r: std::io::Result<()>) -> Result<()> {
    r.map_err(|e| Error::io("<stdout>", e))
}

fn load_corpus(path: &Path, lang: Language, header: bool, err: Option<&mut dyn Write>) -> Result<LabeledCorpus> {
    let report = load_tsv(path, lang, &LabelSchema::default(), LoadOptions { header })?;
    if let Some(err) = err {
        if !report.rejected.is_empty() {
            let _ = writeln!(
                err,
                "warning: {}: skipped {} line(s); unknown labels {:?}",
                path.display(),
                report.rejected.len(),
                report.unknown_labels()
            );
        }
    }
    Ok(report.corpus)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Exactly three comma-separated fractions.
fn fractions(flag: &str, v: &[f64]) -> Result<(f64, f64, f64)> {
    match v {
        &[a, b, c] => Ok((a, b, c)),
        _ => Err(Error::Config(format!("--{flag} takes three fractions, got {}", v.len()))),
    }
}

fn ingest(a: IngestArgs, out: &mut dyn Write) -> Result<()> {
    let (tr, dv, te) = fractions("ratios", &a.ratios)?;
    let spec = SplitSpec::new(tr, dv, te, a.seed)?.stratified(a.stratified);
    let corpus = load_corpus(&a.input, a.lang, a.header, None)?;
    let (tr, dv, te) = split_corpus(&corpus, &spec)?;
    ensure_dir(&a.out)?;
    let mut manifest = Manifest::new("ingest", a.lang, a.seed);
    for (name, part) in [("train.tsv", &tr), ("dev.tsv", &dv), ("test.tsv", &te)] {
        save_tsv(part, a.out.join(name))?;
        manifest.files.push(name.into());
    }
    manifest.split_sizes = Some([tr.len(), dv.len(), te.len()]);
    manifest.files.push(MANIFEST.into());
    manifest.save(&a.out)?;
    w(writeln!(out, "{}", class_distribution(&corpus)))?;
    w(writeln!(out, "split train/dev/test: {}/{}/{}", tr.len(), dv.len(), te.len()))
}

fn merged_distribution(files: &[PathBuf], lang: Language, header: bool) -> Result<DistributionTable> {
    let mut table = DistributionTable::default();
    for f in files {
        let d = class_distribution(&load_corpus(f, lang, header, None)?);
        for l in Label::ALL {
            table.counts[l.index()] += d.count(l);
        }
        table.total += d.total;
    }
    Ok(table)
}

fn stats(a: StatsArgs, out: &mut dyn Write) -> Result<()> {
    let table = merged_distribution(&a.files, a.lang, a.header)?;
    if a.format != Format::Csv {
        w(writeln!(out, "{table}"))?;
    }
    if a.format == Format::Both {
        w(writeln!(out))?;
    }
    if a.format != Format::Text {
        w(write!(out, "{}", table.to_csv()))?;
    }
    if let Some(r) = a.split {
        let (tr, dv, te) = fractions("split", &r)?;
        let spec = SplitSpec::new(tr, dv, te, 0)?;
        let (tr, dv, te) = spec.sizes(table.total);
        w(writeln!(out, "split train/dev/test: {tr}/{dv}/{te}"))?;
    }
    Ok(())
}

fn alpha(a: AlphaArgs, out: &mut dyn Write) -> Result<()> {
    let m = ReliabilityMatrix::from_csv_path(&a.file, !a.no_header)?;
    let value = krippendorff_alpha(&m)?;
    w(writeln!(out, "{value:.4}"))
}

fn flag_settings(a: &TrainArgs) -> Result<Settings> {
    let mut s = Settings::default();
    let pairs: [(&str, &str, Option<String>); 9] = [
        ("train", "seed", a.seed.map(|v| v.to_string())),
        ("train", "epochs", a.epochs.map(|v| v.to_string())),
        ("train", "lr", a.lr.map(|v| v.to_string())),
        ("train", "batch_size", a.batch_size.map(|v| v.to_string())),
        ("train", "max_len", a.max_len.map(|v| v.to_string())),
        ("model", "head", a.head.clone()),
        ("model", "backbone", a.backbone.clone()),
        ("train", "schedule", a.schedule.clone()),
        ("output", "dir", a.output.as_ref().map(|p| p.to_string_lossy().into_owned())),
    ];
    for spec in &a.set {
        let (sec, key, value) = Settings::parse_override(spec)?;
        s.set(&sec, &key, value)?;
    }
    for (sec, key, value) in pairs {
        if let Some(v) = value {
            s.set(sec, key, v)?;
        }
    }
    Ok(s)
}

/// Config file, then `SEED`, then flags.
pub fn resolve_run_config(config: &Path, env_seed: Option<&str>, flags: &Settings) -> Result<RunConfig> {
    let file = read_settings(config)?;
    RunConfig::from_settings(&config::layered(&file, env_seed, flags)?)
}

fn build_tokenizer(cfg: &RunConfig, train: &LabeledCorpus) -> Result<Tokenizer> {
    let mut tok = match cfg.backbone.kind {
        BackboneKind::CharTransformer => Tokenizer::character(
            CharVocab::induce(train.texts(), cfg.casing, cfg.char_vocab_size),
            cfg.casing,
            cfg.train.max_len,
        ),
        _ => {
            let vocab = match &cfg.vocab_path {
                Some(p) => Vocabulary::load(p)?,
                None => Vocabulary::induce(train.texts(), cfg.casing, cfg.vocab_size, cfg.min_pair_freq),
            };
            Tokenizer::subword(vocab, cfg.casing, cfg.train.max_len)
        }
    };
    tok.strip_emoji = cfg.strip_emoji;
    Ok(tok)
}

fn architecture_name(cfg: &RunConfig) -> String {
    match cfg.regimen {
        Regimen::Ulmfit => format!("ulmfit+{}", cfg.head.kind),
        Regimen::Bert => cfg.head.kind.to_string(),
    }
}

fn report_files(dir: &Path, report: &EvaluationReport) -> Result<()> {
    write_atomic(dir.join(REPORT_TEXT), report.render_text().as_bytes())?;
    write_atomic(dir.join(REPORT_CSV), report.to_csv().as_bytes())
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = resolve_run_config(&a.config, env_seed.as_deref(), &flag_settings(&a)?)?;
    cfg.check_paths()?;
    let train_c = load_corpus(&cfg.train_path, cfg.language, cfg.header, Some(&mut *err))?;
    let dev_c = load_corpus(&cfg.dev_path, cfg.language, cfg.header, Some(&mut *err))?;
    let test_c = match &cfg.test_path {
        Some(p) => Some(load_corpus(p, cfg.language, cfg.header, Some(&mut *err))?),
        None => None,
    };
    ensure_dir(&cfg.output_dir)?;

    let tokenizer = build_tokenizer(&cfg, &train_c)?;
    let mut bundle = ModelBundle::init(
        cfg.language,
        LabelSchema::default(),
        cfg.backbone.clone(),
        cfg.head.clone(),
        tokenizer,
        cfg.train.seed,
    )?;
    bundle.dropout_scale = cfg.train.dropout_scale;
    let mut lm_losses = Vec::new();
    if cfg.lm_epochs > 0 {
        let lm = LmConfig {
            epochs: cfg.lm_epochs,
            batch_size: cfg.train.batch_size,
            seed: cfg.train.seed,
            optimizer: crate::train::OptimizerConfig {
                beta1: cfg.train.optimizer.beta1,
                beta2: cfg.train.optimizer.beta2,
                ..LmConfig::default().optimizer
            },
            ..LmConfig::default()
        };
        let texts: Vec<&str> = train_c.texts().collect();
        lm_losses = train::pretrain_language_model(&mut bundle, &texts, &lm)?;
    }

    let (best, history) = match train::train(bundle, &train_c, &dev_c, &cfg.train) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, step, last_good }) => {
            let path = cfg.output_dir.join("last_good.ckpt");
            checkpoint::save(&last_good, &path)?;
            let _ = writeln!(err, "training diverged; last good parameters saved to {}", path.display());
            return Err(Error::Diverged { epoch, step, last_good });
        }
        Err(e) => return Err(e),
    };
    finish_run(&cfg, &best, &history, lm_losses, test_c.as_ref(), &dev_c, out)
}

fn finish_run(
    cfg: &RunConfig,
    best: &ModelBundle,
    history: &History,
    lm_losses: Vec<f64>,
    test: Option<&LabeledCorpus>,
    dev: &LabeledCorpus,
    out: &mut dyn Write,
) -> Result<()> {
    let dir = &cfg.output_dir;
    checkpoint::save(best, dir.join(CHECKPOINT))?;
    write_atomic(dir.join(HISTORY), history.to_csv().as_bytes())?;
    let (split, corpus) = match test {
        Some(t) => ("test", t),
        None => ("dev", dev),
    };
    let (_, report) = train::evaluate(best, corpus)?;
    report_files(dir, &report)?;

    let mut m = Manifest::new("train", cfg.language, cfg.train.seed);
    m.architecture = architecture_name(cfg);
    m.embedding = cfg.backbone.kind.as_str().into();
    m.config = Some(cfg.clone());
    m.best_epoch = Some(history.best_epoch);
    m.dev_weighted_f1 = history.best().map(|r| r.dev_weighted_f1);
    m.last_epoch_dev_weighted_f1 = history.last().map(|r| r.dev_weighted_f1);
    m.test_weighted_f1 = test.map(|_| report.weighted_avg.f1);
    m.report_split = Some(split.into());
    m.report = Some(report.clone());
    m.lm_losses = lm_losses;
    m.files = [CHECKPOINT, HISTORY, REPORT_TEXT, REPORT_CSV, MANIFEST].map(String::from).to_vec();
    m.save(dir)?;

    w(write!(out, "{}", history.to_csv()))?;
    w(writeln!(out))?;
    w(writeln!(out, "{split} report (epoch {}):", history.best_epoch))?;
    w(write!(out, "{}", report.render_text()))
}

fn evaluate_cmd(a: EvaluateArgs, out: &mut dyn Write) -> Result<()> {
    let bundle = checkpoint::load(&a.checkpoint)?;
    let corpus = load_corpus(&a.data, bundle.language, a.header, None)?;
    let (_, report) = train::evaluate(&bundle, &corpus)?;
    if let Some(dir) = &a.out {
        ensure_dir(dir)?;
        report_files(dir, &report)?;
        let mut m = Manifest::new("evaluate", bundle.language, 0);
        m.report = Some(report.clone());
        m.files = [REPORT_TEXT, REPORT_CSV, MANIFEST].map(String::from).to_vec();
        m.save(dir)?;
    }
    w(write!(out, "{}", report.render_text()))?;
    w(writeln!(out, "weighted_f1,{:?}", report.weighted_avg.f1))
}

fn predict_cmd(a: PredictArgs, out: &mut dyn Write) -> Result<()> {
    let bundle = checkpoint::load(&a.checkpoint)?;
    let mut texts = a.texts;
    if let Some(p) = &a.input {
        let content = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        texts.extend(content.lines().map(|l| l.trim_end_matches('\r').to_string()));
    }
    let preds = train::predict(&bundle, &texts)?;
    for p in preds {
        let probs: Vec<String> = p.probs.0.iter().map(|v| format!("{v:.6}")).collect();
        let surface = bundle.schema.surface(bundle.language, p.label);
        w(writeln!(out, "{surface}\t{}", probs.join("\t")))?;
    }
    Ok(())
}

fn find_manifests(dir: &Path, depth: usize, found: &mut Vec<PathBuf>) -> Result<()> {
    let m = dir.join(MANIFEST);
    if m.is_file() {
        found.push(m);
    }
    if depth == 0 {
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for e in entries {
        find_manifests(&e, depth - 1, found)?;
    }
    Ok(())
}

/// Comparison rows from every training manifest under `dir` (three levels).
pub fn collect_runs(dir: &Path) -> Result<Vec<ComparisonRow>> {
    let mut paths = Vec::new();
    find_manifests(dir, 3, &mut paths)?;
    let mut rows = Vec::new();
    for p in paths {
        let m = Manifest::load(&p)?;
        if m.command != "train" {
            continue;
        }
        rows.push(ComparisonRow {
            architecture: m.architecture,
            embedding: m.embedding,
            dev_weighted_f1: m.dev_weighted_f1.unwrap_or(f64::NAN),
            test_weighted_f1: m.test_weighted_f1,
        });
    }
    sort_comparison(&mut rows);
    Ok(rows)
}

fn compare(a: CompareArgs, out: &mut dyn Write) -> Result<()> {
    let rows = collect_runs(&a.dir)?;
    if rows.is_empty() {
        return Err(Error::InsufficientData(format!("no training manifests under {}", a.dir.display())));
    }
    if a.format != Format::Csv {
        w(write!(out, "{}", comparison_text(&rows)))?;
    }
    if a.format == Format::Both {
        w(writeln!(out))?;
    }
    if a.format != Format::Text {
        w(write!(out, "{}", comparison_csv(&rows)))?;
    }
    Ok(())
}
