//! Property tests for the data, agreement, metric, schedule, optimizer and
//! configuration layers.

mod common;

use std::collections::{BTreeMap, BTreeSet};

use hopespeech::agreement::{coincidence_matrix, krippendorff_alpha, ReliabilityMatrix};
use hopespeech::cli::config::KEYS;
use hopespeech::cli::{config, RunConfig, Settings};
use hopespeech::corpus::{
    class_distribution, load_tsv, save_tsv, split_corpus, Label, LabelSchema, LabeledCorpus, LabeledRecord, Language,
    LoadOptions, SplitSpec,
};
use hopespeech::error::Error;
use hopespeech::metrics::{aggregate_report, f1_score, per_class_prf, ConfusionMatrix};
use hopespeech::train::{adamw_step, stlr, AdamState, OptimizerConfig, StlrConfig, UnfreezePlan};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn corpus_of(texts: &[String], labels: &[usize]) -> LabeledCorpus {
    let records = texts
        .iter()
        .zip(labels)
        .map(|(t, &l)| LabeledRecord {
            text: t.clone(),
            label: Label::ALL[l],
            language: Language::Tamil,
        })
        .collect();
    LabeledCorpus::from_records(Language::Tamil, LabelSchema::default(), records).unwrap()
}

fn ratios() -> impl Strategy<Value = (f64, f64, f64)> {
    (1u32..=8, 1u32..=8, 1u32..=8).prop_map(|(a, b, c)| {
        let s = f64::from(a + b + c);
        let (a, b) = (f64::from(a) / s, f64::from(b) / s);
        (a, b, 1.0 - a - b)
    })
}

proptest! {
    #[test]
    fn split_is_a_partition(n in 3usize..300, seed in any::<u64>(), (a, b, c) in ratios(), stratified in any::<bool>()) {
        let texts: Vec<String> = (0..n).map(|i| format!("comment {i}")).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + 3) % 3).collect();
        let corpus = corpus_of(&texts, &labels);
        let spec = SplitSpec::new(a, b, c, seed).unwrap().stratified(stratified);
        match split_corpus(&corpus, &spec) {
            Ok((tr, dv, te)) => {
                prop_assert_eq!(tr.len() + dv.len() + te.len(), n);
                let sets: Vec<BTreeSet<&str>> = [&tr, &dv, &te].iter().map(|c| c.texts().collect()).collect();
                prop_assert!(sets[0].is_disjoint(&sets[1]));
                prop_assert!(sets[0].is_disjoint(&sets[2]));
                prop_assert!(sets[1].is_disjoint(&sets[2]));
                if !stratified {
                    let (nt, nd, ns) = spec.sizes(n);
                    prop_assert_eq!((tr.len(), dv.len(), te.len()), (nt, nd, ns));
                }
            }
            Err(Error::DegenerateSplit { train, dev, test }) => {
                prop_assert!(train == 0 || dev == 0 || test == 0);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn tsv_round_trip_and_totals(
        rows in prop::collection::vec(("[a-zA-Z0-9அ-ஹ][a-zA-Z0-9அ-ஹ ,.!?]{0,30}[a-zA-Z0-9அ-ஹ!]", 0usize..3), 1..40),
    ) {
        let texts: Vec<String> = rows.iter().map(|(t, _)| t.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let corpus = corpus_of(&texts, &labels);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        save_tsv(&corpus, &path).unwrap();
        let back = load_tsv(&path, Language::Tamil, &LabelSchema::default(), LoadOptions::default()).unwrap();
        prop_assert!(back.rejected.is_empty());
        prop_assert_eq!(&back.corpus, &corpus);
        let dist = class_distribution(&back.corpus);
        prop_assert_eq!(dist.total, corpus.len());
        prop_assert_eq!(dist.counts.iter().sum::<usize>(), dist.total);
    }
}

fn alpha_of(values: &[Vec<Option<usize>>], cats: usize) -> Option<f64> {
    krippendorff_alpha(&ReliabilityMatrix::from_codes(cats, values.to_vec()).ok()?).ok()
}

fn reliability() -> impl Strategy<Value = Vec<Vec<Option<usize>>>> {
    any::<u64>().prop_map(|seed| common::random_reliability(&mut ChaCha8Rng::seed_from_u64(seed), 5, 8, 4))
}

proptest! {
    #[test]
    fn alpha_matches_pair_enumeration(values in reliability()) {
        let got = alpha_of(&values, 4);
        let want = common::alpha_oracle(&values);
        match (got, want) {
            (Some(g), Some(w)) => prop_assert!((g - w).abs() < 1e-9, "{} vs {}", g, w),
            (None, None) => {}
            (g, w) => prop_assert!(false, "defined-ness differs: {:?} vs {:?}", g, w),
        }
    }

    #[test]
    fn alpha_invariances(values in reliability(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let Some(base) = alpha_of(&values, 4) else { return Ok(()) };
        prop_assert!(base <= 1.0 + 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);

        let mut relabel: Vec<usize> = (0..4).collect();
        relabel.shuffle(&mut rng);
        let renamed: Vec<Vec<Option<usize>>> = values
            .iter()
            .map(|r| r.iter().map(|v| v.map(|c| relabel[c])).collect())
            .collect();
        prop_assert!((alpha_of(&renamed, 4).unwrap() - base).abs() < 1e-12);

        let mut items = values.clone();
        items.shuffle(&mut rng);
        prop_assert!((alpha_of(&items, 4).unwrap() - base).abs() < 1e-12);

        let mut cols: Vec<usize> = (0..values[0].len()).collect();
        cols.shuffle(&mut rng);
        let swapped: Vec<Vec<Option<usize>>> = values.iter().map(|r| cols.iter().map(|&c| r[c]).collect()).collect();
        prop_assert!((alpha_of(&swapped, 4).unwrap() - base).abs() < 1e-12);

        // duplication doubles every coincidence; with the n(n−1) expected term
        // alpha then moves to 1 − (1 − α)(2n − 1)/(2(n − 1)), not to α itself
        let doubled: Vec<Vec<Option<usize>>> = values.iter().chain(values.iter()).cloned().collect();
        let once = coincidence_matrix(&ReliabilityMatrix::from_codes(4, values.clone()).unwrap()).unwrap();
        let twice = coincidence_matrix(&ReliabilityMatrix::from_codes(4, doubled.clone()).unwrap()).unwrap();
        for (r1, r2) in once.o.iter().zip(&twice.o) {
            for (a, b) in r1.iter().zip(r2) {
                prop_assert!((2.0 * a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
        let n = once.total;
        let predicted = 1.0 - (1.0 - base) * (2.0 * n - 1.0) / (2.0 * (n - 1.0));
        prop_assert!((alpha_of(&doubled, 4).unwrap() - predicted).abs() < 1e-12);
    }

    #[test]
    fn perfect_agreement_is_one(codes in prop::collection::vec(0usize..4, 2..8), ann in 2usize..5) {
        prop_assume!(codes.iter().collect::<BTreeSet<_>>().len() >= 2);
        let values: Vec<Vec<Option<usize>>> = codes.iter().map(|&c| vec![Some(c); ann]).collect();
        prop_assert_eq!(alpha_of(&values, 4), Some(1.0));
    }
}

fn confusion() -> impl Strategy<Value = ConfusionMatrix> {
    prop::collection::vec(0usize..40, 9).prop_filter_map("empty", |cells| {
        let rows: Vec<Vec<usize>> = cells.chunks(3).map(|c| c.to_vec()).collect();
        let cm = ConfusionMatrix::from_counts(&rows).ok()?;
        (cm.total() > 0).then_some(cm)
    })
}

fn names() -> Vec<String> {
    ["a", "b", "c"].map(String::from).to_vec()
}

proptest! {
    #[test]
    fn micro_averages_equal_accuracy(cm in confusion()) {
        let report = aggregate_report(&cm, &names()).unwrap();
        let tp: usize = (0..3).map(|c| cm.get(c, c)).sum();
        let fp: usize = (0..3).map(|c| (0..3).filter(|&g| g != c).map(|g| cm.get(g, c)).sum::<usize>()).sum();
        let fn_: usize = (0..3).map(|c| (0..3).filter(|&p| p != c).map(|p| cm.get(c, p)).sum::<usize>()).sum();
        let micro_p = tp as f64 / (tp + fp) as f64;
        let micro_r = tp as f64 / (tp + fn_) as f64;
        prop_assert!((micro_p - report.accuracy).abs() < 1e-15);
        prop_assert!((micro_r - report.accuracy).abs() < 1e-15);
    }

    #[test]
    fn averages_follow_their_definitions(cm in confusion()) {
        let report = aggregate_report(&cm, &names()).unwrap();
        let n = cm.total() as f64;
        let weighted: f64 = report.classes.iter().map(|c| c.support as f64 / n * c.f1).sum();
        let macro_f1: f64 = report.classes.iter().map(|c| c.f1).sum::<f64>() / 3.0;
        prop_assert!((report.weighted_avg.f1 - weighted).abs() < 1e-12);
        prop_assert!((report.macro_avg.f1 - macro_f1).abs() < 1e-12);
    }

    #[test]
    fn weighted_f1_ignores_class_order(cm in confusion(), perm_idx in 0usize..6) {
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = PERMS[perm_idx];
        let base = aggregate_report(&cm, &names()).unwrap();
        let moved = cm.permuted(&perm);
        let permuted_names: Vec<String> = perm.iter().map(|&old| names()[old].clone()).collect();
        let other = aggregate_report(&moved, &permuted_names).unwrap();
        prop_assert!((base.weighted_avg.f1 - other.weighted_avg.f1).abs() < 1e-12);
        prop_assert!((base.macro_avg.f1 - other.macro_avg.f1).abs() < 1e-12);
        for (new, &old) in perm.iter().enumerate() {
            prop_assert_eq!(per_class_prf(&cm, old), per_class_prf(&moved, new));
        }
    }

    #[test]
    fn f1_lies_between_precision_and_recall(p in 1e-6f64..=1.0, r in 1e-6f64..=1.0) {
        let f = f1_score(p, r);
        let (lo, hi) = (p.min(r), p.max(r));
        prop_assert!(f >= lo * (1.0 - 1e-15) && f <= hi * (1.0 + 1e-15));
        if p != r {
            prop_assert!(f < hi);
        }
        let same = f1_score(p, p);
        prop_assert!((same - p).abs() <= p * 1e-15);
    }
}

proptest! {
    #[test]
    fn stlr_is_unimodal(total in 1usize..3000, cut_frac in 0.01f64..0.99, ratio in 1.5f64..100.0) {
        let cfg = StlrConfig { total_steps: total, cut_frac, ratio, lr_max: 1e-2, lr_floor: 1e-8 };
        let lrs: Vec<f64> = (0..=total).map(|t| stlr(t, &cfg).unwrap()).collect();
        let cut = cfg.cut();
        prop_assert_eq!(lrs[cut], 1e-2);
        prop_assert!(lrs[..=cut].windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(lrs[cut..].windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(lrs.iter().all(|&l| (1e-8..=1e-2).contains(&l)));
        prop_assert!(stlr(total + 1, &cfg).is_err());
    }

    #[test]
    fn unfreeze_masks_grow(groups in 1usize..6, per_stage in 1usize..4, tensors in prop::collection::vec(0usize..6, 1..20)) {
        use hopespeech::autograd::ParamStore;
        use hopespeech::tensor::Matrix;
        let prefixes: Vec<String> = (0..groups).map(|g| format!("g{g}.")).collect();
        let mut store = ParamStore::new();
        for (i, g) in tensors.iter().enumerate() {
            store.add(format!("g{}.t{i}", g % groups), Matrix::zeros(1, 1)).unwrap();
        }
        let plan = UnfreezePlan::new(prefixes, per_stage).unwrap();
        let mut prev: Vec<bool> = vec![false; store.len()];
        for epoch in 0..groups * per_stage + 3 {
            let mask = plan.mask(&store, plan.unfrozen_at(epoch));
            prop_assert!(prev.iter().zip(&mask).all(|(&p, &m)| !p || m), "a tensor was re-frozen");
            prev = mask;
        }
        prop_assert!(prev.iter().all(|&m| m));
    }

    #[test]
    fn adamw_without_decay_is_adam(
        theta0 in prop::collection::vec(-3.0f64..3.0, 1..16),
        steps in 1usize..25,
        grad_seed in any::<u64>(),
        lr in 1e-5f64..1e-1,
    ) {
        use rand::Rng;
        let cfg = OptimizerConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(grad_seed);
        let n = theta0.len();
        let mut theta = theta0.clone();
        let mut state = AdamState::new(n);
        // textbook Adam, kept separate from the library's loop
        let mut reference = theta0.clone();
        let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
        for t in 1..=steps {
            let grad: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            adamw_step(&mut theta, &grad, &mut state, &cfg).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * grad[i];
                v[i] = 0.999 * v[i] + 0.001 * grad[i] * grad[i];
                let m_hat = m[i] / (1.0 - 0.9f64.powf(t as f64));
                let v_hat = v[i] / (1.0 - 0.999f64.powf(t as f64));
                reference[i] -= lr * m_hat / (v_hat.sqrt() + 1e-8);
            }
        }
        for (a, b) in theta.iter().zip(&reference) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}

/// Value pairs `(file, flag)` for keys that can vary independently.
const VARIED: &[(&str, &str, &str, &str)] = &[
    ("data", "language", "tamil", "malayalam"),
    ("data", "header", "true", "false"),
    ("model", "head", "bilstm", "dense"),
    ("model", "layers", "3", "1"),
    ("model", "ff_dim", "64", "32"),
    ("model", "dropout", "0.25", "0.05"),
    ("model", "pooling", "cls", "mean"),
    ("model", "dense_hidden", "16", "none"),
    ("model", "lstm_units", "12", "7"),
    ("model", "head_dropout", "0.3", "0.2"),
    ("model", "casing", "cased", "uncased"),
    ("model", "strip_emoji", "true", "false"),
    ("model", "vocab_size", "500", "900"),
    ("model", "min_pair_freq", "3", "4"),
    ("train", "seed", "11", "12"),
    ("train", "epochs", "2", "9"),
    ("train", "batch_size", "8", "4"),
    ("train", "max_len", "40", "24"),
    ("train", "lr", "0.001", "0.003"),
    ("train", "beta1", "0.8", "0.85"),
    ("train", "beta2", "0.99", "0.95"),
    ("train", "weight_decay", "0.1", "0"),
    ("train", "schedule", "stlr", "constant"),
    ("train", "stlr_ratio", "16", "8"),
    ("train", "grad_clip", "none", "5"),
    ("train", "discriminative_factor", "2.6", "1.5"),
    ("train", "dropout_scale", "0.5", "0.75"),
];

const BASE_FILE: &str = "[data]\nlanguage = english\ntrain = /t.tsv\ndev = /d.tsv\n[output]\ndir = /o\n";

proptest! {
    #[test]
    fn flags_beat_env_beat_file_beat_defaults(
        in_file in prop::collection::vec(any::<bool>(), VARIED.len()),
        in_flags in prop::collection::vec(any::<bool>(), VARIED.len()),
        env_seed in prop::option::of(100u64..200),
    ) {
        let defaults = RunConfig::from_settings(&Settings::parse(BASE_FILE, None).unwrap()).unwrap();
        let mut text = String::from(BASE_FILE);
        let mut file_lines: BTreeMap<&str, Vec<String>> = BTreeMap::new();
        let mut flags = Settings::default();
        for (i, &(sec, key, file_v, flag_v)) in VARIED.iter().enumerate() {
            if in_file[i] {
                file_lines.entry(sec).or_default().push(format!("{key} = {file_v}"));
            }
            if in_flags[i] {
                flags.set(sec, key, flag_v).unwrap();
            }
        }
        for (sec, lines) in &file_lines {
            text.push_str(&format!("[{sec}]\n{}\n", lines.join("\n")));
        }
        // a section may only appear once; merge the base sections instead
        let file = merge_sections(&text);
        let env = env_seed.map(|s| s.to_string());
        let resolved = RunConfig::from_settings(&config::layered(&file, env.as_deref(), &flags).unwrap()).unwrap();
        for (i, &(sec, key, file_v, flag_v)) in VARIED.iter().enumerate() {
            let want = if in_flags[i] {
                flag_v.to_string()
            } else if (sec, key) == ("train", "seed") && env.is_some() {
                env.clone().unwrap()
            } else if in_file[i] {
                file_v.to_string()
            } else {
                defaults.setting(sec, key).unwrap()
            };
            prop_assert_eq!(resolved.setting(sec, key).unwrap(), want, "[{}] {}", sec, key);
        }
        for &(sec, key) in KEYS {
            prop_assert!(resolved.setting(sec, key).is_some());
        }
    }
}

/// Parses `text` after folding repeated sections together; a repeated key
/// keeps its last value.
fn merge_sections(text: &str) -> Settings {
    let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    let mut current = String::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        if let Some(name) = line.strip_prefix('[') {
            current = name.trim_end_matches(']').to_string();
        } else {
            let (k, v) = line.split_once('=').unwrap();
            sections.entry(current.clone()).or_default().insert(k.trim().into(), v.trim().into());
        }
    }
    let merged: String = sections
        .iter()
        .map(|(s, kv)| {
            let lines: Vec<String> = kv.iter().map(|(k, v)| format!("{k} = {v}")).collect();
            format!("[{s}]\n{}\n", lines.join("\n"))
        })
        .collect();
    Settings::parse(&merged, None).unwrap()
}
