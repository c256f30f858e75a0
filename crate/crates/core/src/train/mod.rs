//! Fine-tuning loop, evaluation and prediction.

pub mod checkpoint;
pub mod lm;
pub mod optim;
pub mod schedule;

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Mode};
use crate::corpus::{fisher_yates, Label, LabeledCorpus};
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::heads::ProbVector;
use crate::metrics::{aggregate_report, confusion, label_names, ConfusionMatrix, EvaluationReport};
use crate::model::{Model, ModelBundle};

pub use lm::{pretrain_language_model, LmConfig};
pub use optim::{adamw_step, AdamState, AdamW, OptimizerConfig};
pub use schedule::{discriminative_lrs, group_of, stlr, ScheduleKind, StlrConfig, UnfreezePlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_len: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleKind,
    /// Warm-up fraction, peak-to-start ratio and floor of the STLR schedule;
    /// the peak is `optimizer.lr`.
    pub stlr_cut_frac: f64,
    pub stlr_ratio: f64,
    pub stlr_floor: f64,
    /// Global-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Per-group learning-rate divisor, classifier group first.
    pub discriminative_factor: Option<f64>,
    /// Gradual unfreezing, one more group every this many epochs.
    pub unfreeze_epochs_per_stage: Option<usize>,
    /// Multiplier on every dropout rate of the model.
    pub dropout_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_len: 128,
            epochs: 5,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleKind::Constant,
            stlr_cut_frac: 0.1,
            stlr_ratio: 32.0,
            stlr_floor: 1e-8,
            grad_clip: Some(1.0),
            discriminative_factor: None,
            unfreeze_epochs_per_stage: None,
            dropout_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be >= 2".into()));
        }
        self.optimizer.validate()?;
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be > 0, got {c}")));
            }
        }
        if let Some(f) = self.discriminative_factor {
            if !(f > 1.0) {
                return Err(Error::Config(format!("discriminative factor must exceed 1, got {f}")));
            }
        }
        if self.unfreeze_epochs_per_stage == Some(0) {
            return Err(Error::Config("unfreeze epochs per stage must be >= 1".into()));
        }
        if !(self.dropout_scale >= 0.0) {
            return Err(Error::Config("dropout scale must be >= 0".into()));
        }
        self.stlr(1).validate()
    }

    pub fn stlr(&self, total_steps: usize) -> StlrConfig {
        StlrConfig {
            total_steps,
            cut_frac: self.stlr_cut_frac,
            ratio: self.stlr_ratio,
            lr_max: self.optimizer.lr,
            lr_floor: self.stlr_floor,
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// One-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_weighted_f1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Mean batch loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Number of trainable tensors during each epoch.
    pub trainable_tensors: Vec<usize>,
    /// One-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    /// `epoch,train_loss,dev_weighted_f1`, values in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,dev_weighted_f1\n");
        for r in &self.epochs {
            let _ = writeln!(out, "{},{:?},{:?}", r.epoch, r.train_loss, r.dev_weighted_f1);
        }
        out
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Mixes a seed with stream coordinates (SplitMix64 finalizer).
pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_corpus(bundle: &ModelBundle, corpus: &LabeledCorpus, what: &str) -> Result<()> {
    if corpus.language() != bundle.language || corpus.schema() != &bundle.schema {
        return Err(Error::Config(format!(
            "{what} corpus ({}) does not share the model's language and label schema ({})",
            corpus.language(),
            bundle.language
        )));
    }
    if corpus.is_empty() {
        return Err(Error::InsufficientData(format!("{what} corpus is empty")));
    }
    Ok(())
}

/// Fine-tunes `bundle` and returns the parameters of the epoch with the best
/// dev weighted-F1 (earliest on ties) with the per-epoch history.
pub fn train(
    mut bundle: ModelBundle,
    train: &LabeledCorpus,
    dev: &LabeledCorpus,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, History)> {
    cfg.validate()?;
    check_corpus(&bundle, train, "train")?;
    check_corpus(&bundle, dev, "dev")?;
    bundle.tokenizer.max_len = cfg.max_len;
    bundle.dropout_scale = cfg.dropout_scale;
    let model = bundle.model()?;

    let seqs: Vec<TokenSequence> = train.texts().map(|t| bundle.tokenizer.tokenize(t)).collect();
    let gold: Vec<usize> = train.labels().iter().map(|l| l.index()).collect();
    let steps_per_epoch = cfg.steps_per_epoch(seqs.len());
    let total_steps = steps_per_epoch * cfg.epochs;
    let stlr_cfg = cfg.stlr(total_steps);

    let groups = model.layer_groups();
    let group_idx: Vec<usize> = bundle.params.iter().map(|(_, name, _)| group_of(&groups, name)).collect();
    let group_scale: Vec<f64> = match cfg.discriminative_factor {
        Some(f) => discriminative_lrs(1.0, f, groups.len()),
        None => vec![1.0; groups.len()],
    };
    let plan = cfg
        .unfreeze_epochs_per_stage
        .map(|e| UnfreezePlan::new(groups.clone(), e))
        .transpose()?;

    let mut opt = AdamW::new(cfg.optimizer, &bundle.params)?;
    // fallback for a divergence before the first epoch completes
    let initial = bundle.clone();
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0, 0));
    let mut history = History::default();
    let mut best: Option<(f64, ModelBundle)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let trainable = match &plan {
            Some(p) => p.mask(&bundle.params, p.unfrozen_at(epoch)),
            None => vec![true; bundle.params.len()],
        };
        history.trainable_tensors.push(trainable.iter().filter(|&&t| t).count());
        fisher_yates(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let base_lr = match cfg.schedule {
                ScheduleKind::Constant => cfg.optimizer.lr,
                ScheduleKind::Stlr => stlr(step, &stlr_cfg)?,
            };
            let mut grads = Gradients::zeros_like(&bundle.params);
            let mut batch_loss = 0.0;
            for &i in batch {
                let mode = Mode::Train {
                    seed: mix_seed(cfg.seed, step as u64 + 1, i as u64),
                };
                let mut g = Graph::with_trainable(&bundle.params, mode, &trainable);
                let logits = model.logits(&mut g, &seqs[i], bundle.tokenizer.chars())?;
                let loss = g.cross_entropy(logits, gold[i])?;
                let l = g.value(loss).get(0, 0);
                if !l.is_finite() {
                    return Err(diverged(epoch, step, best, &initial));
                }
                batch_loss += l;
                g.backward_into(loss, &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            let lrs: Vec<Option<f64>> = trainable
                .iter()
                .zip(&group_idx)
                .map(|(&t, &gi)| t.then(|| base_lr * group_scale[gi]))
                .collect();
            if let Err(e) = opt.step(&mut bundle.params, &grads, &lrs) {
                return match e {
                    Error::NonFinite(_) => Err(diverged(epoch, step, best, &initial)),
                    other => Err(other),
                };
            }
            epoch_loss += batch_loss;
            history.step_losses.push(batch_loss / batch.len() as f64);
            step += 1;
        }
        let (_, report) = evaluate_with(&bundle, &bundle.model()?, dev)?;
        let f1 = report.weighted_avg.f1;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: epoch_loss / seqs.len() as f64,
            dev_weighted_f1: f1,
        });
        if best.as_ref().map_or(true, |(b, _)| f1 > *b) {
            history.best_epoch = epoch + 1;
            best = Some((f1, bundle.clone()));
        }
    }
    let (_, mut best) = best.expect("epochs >= 1");
    best.metadata.insert("best_epoch".into(), history.best_epoch.to_string());
    best.metadata.insert("seed".into(), cfg.seed.to_string());
    Ok((best, history))
}

fn diverged(epoch: usize, step: usize, best: Option<(f64, ModelBundle)>, initial: &ModelBundle) -> Error {
    Error::Diverged {
        epoch: epoch + 1,
        step,
        last_good: Box::new(best.map_or_else(|| initial.clone(), |(_, b)| b)),
    }
}

/// Predicted label and class probabilities for one text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub probs: ProbVector,
}

pub fn predict<S: AsRef<str>>(bundle: &ModelBundle, texts: &[S]) -> Result<Vec<Prediction>> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let model = bundle.model()?;
    predict_with(bundle, &model, texts)
}

fn predict_with<S: AsRef<str>>(bundle: &ModelBundle, model: &Model, texts: &[S]) -> Result<Vec<Prediction>> {
    texts
        .iter()
        .map(|t| {
            let probs = bundle.probabilities(model, t.as_ref())?;
            let label = Label::from_index(probs.argmax()).expect("head emits one score per label");
            Ok(Prediction { label, probs })
        })
        .collect()
}

/// Confusion matrix and report of `bundle` on a labeled corpus.
pub fn evaluate(bundle: &ModelBundle, corpus: &LabeledCorpus) -> Result<(ConfusionMatrix, EvaluationReport)> {
    evaluate_with(bundle, &bundle.model()?, corpus)
}

fn evaluate_with(
    bundle: &ModelBundle,
    model: &Model,
    corpus: &LabeledCorpus,
) -> Result<(ConfusionMatrix, EvaluationReport)> {
    let texts: Vec<&str> = corpus.texts().collect();
    let pred: Vec<Label> = predict_with(bundle, model, &texts)?.into_iter().map(|p| p.label).collect();
    let cm = confusion(&corpus.labels(), &pred)?;
    let report = aggregate_report(&cm, &label_names())?;
    Ok((cm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{LabelSchema, LabeledRecord, Language};
    use crate::encoder::{BackboneConfig, BackboneKind, Casing, Vocabulary};
    use crate::heads::{HeadConfig, HeadKind};
    use crate::model::Tokenizer;

    fn corpus(words: &[(&str, Label)], repeat: usize) -> LabeledCorpus {
        let mut c = LabeledCorpus::new(Language::English, LabelSchema::default());
        for _ in 0..repeat {
            for &(w, label) in words {
                c.push(LabeledRecord {
                    text: w.to_string(),
                    label,
                    language: Language::English,
                })
                .unwrap();
            }
        }
        c
    }

    fn tiny_bundle(seed: u64) -> ModelBundle {
        let mut backbone = BackboneConfig::desk(BackboneKind::Transformer);
        backbone.layers = 1;
        backbone.heads = 2;
        backbone.d_model = 8;
        backbone.ff_dim = 16;
        ModelBundle::init(
            Language::English,
            LabelSchema::default(),
            backbone,
            HeadConfig::new(HeadKind::Dense),
            Tokenizer::subword(Vocabulary::from_tokens(["good", "bad", "other"]).unwrap(), Casing::Uncased, 8),
            seed,
        )
        .unwrap()
    }

    fn data() -> LabeledCorpus {
        corpus(
            &[("good", Label::Hope), ("bad", Label::NotHope), ("other", Label::OtherLanguage)],
            4,
        )
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_len: 8,
            epochs: 3,
            seed: 11,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_is_config_error() {
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg()
        };
        assert!(matches!(train(tiny_bundle(0), &data(), &data(), &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn runs_steps_and_is_deterministic() {
        let (b1, h1) = train(tiny_bundle(0), &data(), &data(), &quick_cfg()).unwrap();
        let (b2, h2) = train(tiny_bundle(0), &data(), &data(), &quick_cfg()).unwrap();
        assert_eq!(h1.step_losses.len(), 3 * 3);
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(b1.params, b2.params);
    }

    #[test]
    fn predictions_preserve_order_and_repeat() {
        let b = tiny_bundle(1);
        let p = predict(&b, &["good", "bad", "good"]).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p[0], p[2]);
        assert!(predict::<&str>(&b, &[]).unwrap().is_empty());
    }

    #[test]
    fn schema_mismatch_is_rejected() {
        let mut other = LabeledCorpus::new(Language::Tamil, LabelSchema::default());
        other
            .push(LabeledRecord {
                text: "x".into(),
                label: Label::Hope,
                language: Language::Tamil,
            })
            .unwrap();
        assert!(train(tiny_bundle(0), &other, &data(), &quick_cfg()).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = History {
            epochs: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                dev_weighted_f1: 0.25,
            }],
            ..Default::default()
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,dev_weighted_f1\n1,0.5,0.25\n");
    }
}
