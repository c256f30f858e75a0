//! Fixtures and independent oracles shared by the integration targets.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::Path;

use hopespeech::corpus::{Label, LabelSchema, LabeledCorpus, LabeledRecord, Language};
use hopespeech::encoder::{BackboneConfig, BackboneKind, Casing, Vocabulary};
use hopespeech::heads::{HeadConfig, HeadKind};
use hopespeech::model::{ModelBundle, Tokenizer};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Brute-force nominal alpha by direct pair enumeration.
///
/// Observed disagreement: every ordered pair of distinct annotators inside an
/// item, weighted `1/(m−1)`. Expected disagreement: every ordered pair of
/// distinct pairable values anywhere in the table. `None` when undefined.
pub fn alpha_oracle(items: &[Vec<Option<usize>>]) -> Option<f64> {
    let mut observed = 0.0;
    let mut n = 0.0;
    let mut pool = Vec::new();
    for item in items {
        let vals: Vec<usize> = item.iter().flatten().copied().collect();
        let m = vals.len();
        if m < 2 {
            continue;
        }
        n += m as f64;
        pool.extend_from_slice(&vals);
        for a in 0..m {
            for b in 0..m {
                if a != b && vals[a] != vals[b] {
                    observed += 1.0 / (m - 1) as f64;
                }
            }
        }
    }
    if pool.is_empty() {
        return None;
    }
    let mut expected = 0.0;
    for i in 0..pool.len() {
        for j in 0..pool.len() {
            if i != j && pool[i] != pool[j] {
                expected += 1.0;
            }
        }
    }
    if expected == 0.0 {
        return None;
    }
    let d_o = observed / n;
    let d_e = expected / (n * (n - 1.0));
    Some(1.0 - d_o / d_e)
}

/// Random items × annotators table: up to `max_ann` annotators, `max_items`
/// items, `max_cat` categories and at most 30 % missing cells.
pub fn random_reliability(rng: &mut ChaCha8Rng, max_ann: usize, max_items: usize, max_cat: usize) -> Vec<Vec<Option<usize>>> {
    let ann = rng.gen_range(2..=max_ann);
    let items = rng.gen_range(1..=max_items);
    let cats = rng.gen_range(1..=max_cat);
    let missing = rng.gen_range(0.0..0.3);
    (0..items)
        .map(|_| {
            (0..ann)
                .map(|_| (!rng.gen_bool(missing)).then(|| rng.gen_range(0..cats)))
                .collect()
        })
        .collect()
}

/// Class-specific word pools; each text draws only from its own class pool
/// plus shared filler, so the classes are separable by token identity.
const WORDS: [&[&str]; 3] = [
    &["hope", "believe", "together", "strong", "bright", "heal", "support", "courage"],
    &["hate", "stupid", "useless", "angry", "boring", "worst", "ugly", "waste"],
    &["vanakkam", "nanri", "enna", "romba", "sollu", "paaru", "illa", "venum"],
];
const FILLER: [&str; 6] = ["the", "video", "this", "is", "we", "all"];

pub fn synthetic_text(label: Label, rng: &mut ChaCha8Rng) -> String {
    let pool = WORDS[label.index()];
    let n = rng.gen_range(3..=7);
    let mut words: Vec<&str> = (0..n).map(|_| *pool.choose(rng).unwrap()).collect();
    for _ in 0..rng.gen_range(0..=2) {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, FILLER.choose(rng).unwrap());
    }
    words.join(" ")
}

/// `n` records cycling through the three classes, texts seeded by `seed`.
pub fn synthetic_corpus(language: Language, n: usize, seed: u64) -> LabeledCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let label = Label::ALL[i % 3];
            LabeledRecord {
                text: synthetic_text(label, &mut rng),
                label,
                language,
            }
        })
        .collect();
    LabeledCorpus::from_records(language, LabelSchema::default(), records).unwrap()
}

/// TSV with exactly `counts[c]` lines of class `c`, shuffled by `seed`.
pub fn write_count_fixture(path: &Path, language: Language, counts: [usize; 3], seed: u64) {
    let schema = LabelSchema::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Label> = Label::ALL
        .iter()
        .flat_map(|&l| std::iter::repeat(l).take(counts[l.index()]))
        .collect();
    labels.shuffle(&mut rng);
    let mut out = String::new();
    for (i, l) in labels.iter().enumerate() {
        let text = synthetic_text(*l, &mut rng);
        let _ = writeln!(out, "{text} {i}\t{}", schema.surface(language, *l));
    }
    std::fs::write(path, out).unwrap();
}

/// Backbone small enough for many repeated forward passes.
pub fn tiny_backbone(kind: BackboneKind) -> BackboneConfig {
    let mut b = BackboneConfig::desk(kind);
    b.layers = 1;
    b.heads = 2;
    b.d_model = 8;
    b.ff_dim = 16;
    b.char_cnn = hopespeech::encoder::CharCnnConfig::desk(8);
    b
}

pub fn tiny_bundle(corpus: &LabeledCorpus, head: HeadKind, seed: u64) -> ModelBundle {
    let mut head_cfg = HeadConfig::new(head);
    head_cfg.lstm_units = 4;
    head_cfg.dense_hidden = Some(8);
    let vocab = Vocabulary::induce(corpus.texts(), Casing::Uncased, 200, 2);
    ModelBundle::init(
        corpus.language(),
        LabelSchema::default(),
        tiny_backbone(BackboneKind::Transformer),
        head_cfg,
        Tokenizer::subword(vocab, Casing::Uncased, 16),
        seed,
    )
    .unwrap()
}

/// Largest step allowed by `gradient_check`; rounding noise in the central
/// difference shrinks as 1/ε while truncation error stays far below it here.
pub const GRAD_EPS: f64 = 1e-4;

/// Which classification head a gradient check exercises.
#[derive(Clone, Copy, Debug)]
pub enum CheckedHead {
    Dense,
    BiLstm { seq_len: usize, units: usize },
}

/// Analytic vs central-difference gradients of head + cross-entropy over all
/// parameters, with a fixed dropout mask (train mode, fixed seed).
pub fn head_gradient_check(which: CheckedHead, seed: u64) -> hopespeech::heads::GradCheck {
    use hopespeech::autograd::{Graph, Mode, ParamStore};
    use hopespeech::heads::{gradient_check, BiLstmHead, DenseHead};
    use hopespeech::tensor::Matrix;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = 5;
    let mut cfg = HeadConfig::new(match which {
        CheckedHead::Dense => HeadKind::Dense,
        CheckedHead::BiLstm { .. } => HeadKind::BiLstm,
    });
    cfg.dense_hidden = Some(6);
    let rows = match which {
        CheckedHead::Dense => 1,
        CheckedHead::BiLstm { seq_len, units } => {
            cfg.lstm_units = units;
            seq_len
        }
    };
    let mut store = ParamStore::new();
    let dense = matches!(which, CheckedHead::Dense).then(|| DenseHead::init(&cfg, input, &mut store, &mut rng).unwrap());
    let bilstm = dense.is_none().then(|| BiLstmHead::init(&cfg, input, &mut store, &mut rng).unwrap());
    let x = Matrix::uniform(rows, input, 1.5, &mut rng);
    let gold = (seed % 3) as usize;
    let mode = Mode::Train { seed: seed ^ 0x5eed };

    let theta = store.flatten();
    let mut probe = store.clone();
    let f = |flat: &[f64]| {
        probe.assign_flat(flat);
        let mut g = Graph::new(&probe, mode);
        let xs = g.input(x.clone());
        let logits = match (&dense, &bilstm) {
            (Some(h), _) => h.forward(&mut g, xs)?,
            (_, Some(h)) => h.forward(&mut g, xs)?,
            _ => unreachable!(),
        };
        let loss = g.cross_entropy(logits, gold)?;
        let value = g.value(loss).get(0, 0);
        Ok((value, g.backward(loss).flatten(&probe)))
    };
    gradient_check(f, &theta, GRAD_EPS, None).unwrap()
}
