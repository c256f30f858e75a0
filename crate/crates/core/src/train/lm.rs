//! Next-token language-model pretraining for the recurrent backbone.
//!
//! A temporary decoder (`lm.decoder.*`) sits on top of the backbone; only the
//! backbone's parameters are written back into the bundle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, OptimizerConfig};
use super::schedule::{stlr, ScheduleKind, StlrConfig};
use super::mix_seed;
use crate::autograd::{Graph, Mode};
use crate::corpus::fisher_yates;
use crate::encoder::{BackboneKind, Encoder, Tokens, ENCODER_PREFIX};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, TokenizerKind};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleKind,
    pub grad_clip: Option<f64>,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                ..OptimizerConfig::ulmfit()
            },
            schedule: ScheduleKind::Stlr,
            grad_clip: Some(1.0),
        }
    }
}

/// Trains the backbone of `bundle` to predict each next subword of `texts`.
/// Returns the mean per-token loss of every epoch.
pub fn pretrain_language_model<S: AsRef<str>>(
    bundle: &mut ModelBundle,
    texts: &[S],
    cfg: &LmConfig,
) -> Result<Vec<f64>> {
    if bundle.backbone.kind != BackboneKind::Recurrent {
        return Err(Error::Config("language-model pretraining needs the recurrent backbone".into()));
    }
    let TokenizerKind::Subword(vocab) = &bundle.tokenizer.kind else {
        return Err(Error::Config("language-model pretraining needs a subword tokenizer".into()));
    };
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("LM epochs and batch size must be >= 1".into()));
    }
    let v = vocab.len();
    let d = bundle.backbone.d_model;
    let seqs: Vec<_> = texts
        .iter()
        .map(|t| bundle.tokenizer.tokenize(t.as_ref()))
        .filter(|s| s.real_len() >= 2)
        .collect();
    if seqs.is_empty() {
        return Err(Error::InsufficientData("no text yields two or more tokens".into()));
    }

    let mut store = bundle.params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 1, 1));
    let bound = 1.0 / (d as f64).sqrt();
    let dec_w = store.add("lm.decoder.w", Matrix::uniform(d, v, bound, &mut rng))?;
    let dec_b = store.add("lm.decoder.b", Matrix::zeros(1, v))?;
    let mut encoder = Encoder::bind(&bundle.backbone, v, &store)?;
    encoder.set_dropout_scale(bundle.dropout_scale);

    let steps = seqs.len().div_ceil(cfg.batch_size) * cfg.epochs;
    let schedule = StlrConfig {
        lr_max: cfg.optimizer.lr,
        ..StlrConfig::new(steps)
    };
    let mut opt = AdamW::new(cfg.optimizer, &store)?;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    for _ in 0..cfg.epochs {
        fisher_yates(&mut order, &mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = crate::autograd::Gradients::zeros_like(&store);
            let mut batch_tokens = 0usize;
            for &i in batch {
                let seq = &seqs[i];
                let Tokens::Ids(ids) = &seq.tokens else { unreachable!("subword tokenizer") };
                let n = seq.real_len();
                let mut g = Graph::new(
                    &store,
                    Mode::Train {
                        seed: mix_seed(cfg.seed, step as u64 + 1, i as u64 + (1 << 40)),
                    },
                );
                let enc = encoder.forward(&mut g, seq, None)?;
                let ctx = g.slice_rows(enc.hidden, 0, n - 1);
                let logits = g.affine(ctx, dec_w, dec_b);
                let per_token: Vec<_> = (0..n - 1)
                    .map(|t| {
                        let row = g.slice_rows(logits, t, 1);
                        g.cross_entropy(row, ids[t + 1])
                    })
                    .collect::<Result<_>>()?;
                let loss = g.sum(&per_token);
                let l = g.value(loss).get(0, 0);
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!("language-model loss at step {step}")));
                }
                total += l;
                tokens += n - 1;
                batch_tokens += n - 1;
                g.backward_into(loss, &mut grads);
            }
            grads.scale(1.0 / batch_tokens as f64);
            if let Some(clip) = cfg.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            let lr = match cfg.schedule {
                ScheduleKind::Constant => cfg.optimizer.lr,
                ScheduleKind::Stlr => stlr(step, &schedule)?,
            };
            let lrs = vec![Some(lr); store.len()];
            opt.step(&mut store, &grads, &lrs)?;
            step += 1;
        }
        losses.push(total / tokens as f64);
    }

    let prefix = format!("{ENCODER_PREFIX}.");
    let ids: Vec<_> = bundle.params.ids().collect();
    for id in ids {
        let name = bundle.params.name(id).to_string();
        if name.starts_with(&prefix) {
            let src = store.id(&name).expect("cloned store keeps every name");
            *bundle.params.get_mut(id) = store.get(src).clone();
        }
    }
    Ok(losses)
}
