//! Character-CNN token embedder: one vector per whole token, built from
//! character convolutions, max-pooling over positions, highway layers and a
//! linear projection.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, ParamId, ParamStore, Var};
use crate::encoder::vocab::{pre_tokenize, Casing, CLS, PAD, SEP};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Reserved character ids.
pub const CHAR_PAD: usize = 0;
pub const CHAR_UNK: usize = 1;
pub const CHAR_CLS: usize = 2;
pub const CHAR_SEP: usize = 3;
pub const CHAR_TOKEN_PAD: usize = 4;
const RESERVED: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharCnnConfig {
    pub char_dim: usize,
    /// `(kernel width, filter count)` pairs.
    pub filters: Vec<(usize, usize)>,
    pub highway_layers: usize,
    pub output_dim: usize,
    /// Characters kept per token.
    pub max_chars: usize,
}

impl CharCnnConfig {
    pub fn desk(output_dim: usize) -> Self {
        Self {
            char_dim: 16,
            filters: vec![(1, 16), (2, 16), (3, 32), (4, 32)],
            highway_layers: 1,
            output_dim,
            max_chars: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.char_dim == 0 || self.output_dim == 0 || self.max_chars == 0 {
            return Err(Error::Config("char-cnn dimensions must be >= 1".into()));
        }
        if self.filters.is_empty() || self.filters.iter().any(|&(w, n)| w == 0 || n == 0) {
            return Err(Error::Config(
                "char-cnn needs at least one (width >= 1, filters >= 1) pair".into(),
            ));
        }
        Ok(())
    }

    pub fn total_filters(&self) -> usize {
        self.filters.iter().map(|&(_, n)| n).sum()
    }

    pub fn max_width(&self) -> usize {
        self.filters.iter().map(|&(w, _)| w).max().unwrap_or(1)
    }
}

/// Codepoint table with reserved ids for padding, unknown characters and the
/// special sequence tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    ids: HashMap<char, usize>,
}

impl CharVocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Self {
        let mut v = Self {
            chars: Vec::new(),
            ids: HashMap::new(),
        };
        for c in chars {
            if !v.ids.contains_key(&c) {
                v.ids.insert(c, RESERVED + v.chars.len());
                v.chars.push(c);
            }
        }
        v
    }

    /// Most frequent characters of the normalized texts, capped at `max_size`
    /// entries including the reserved ids.
    pub fn induce<'a>(texts: impl IntoIterator<Item = &'a str>, casing: Casing, max_size: usize) -> Self {
        let mut freq: BTreeMap<char, usize> = BTreeMap::new();
        for t in texts {
            for w in pre_tokenize(t, casing) {
                for c in w.chars() {
                    *freq.entry(c).or_default() += 1;
                }
            }
        }
        let mut by_freq: Vec<(char, usize)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self::from_chars(
            by_freq
                .into_iter()
                .take(max_size.saturating_sub(RESERVED))
                .map(|(c, _)| c),
        )
    }

    pub fn len(&self) -> usize {
        RESERVED + self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn encode(&self, token: &str, max_chars: usize) -> Vec<usize> {
        match token {
            CLS => vec![CHAR_CLS],
            SEP => vec![CHAR_SEP],
            PAD => vec![CHAR_TOKEN_PAD],
            _ => token
                .chars()
                .take(max_chars)
                .map(|c| self.ids.get(&c).copied().unwrap_or(CHAR_UNK))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    width: usize,
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Highway {
    wh: ParamId,
    bh: ParamId,
    wt: ParamId,
    bt: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharCnn {
    cfg: CharCnnConfig,
    embed: ParamId,
    convs: Vec<Conv>,
    highways: Vec<Highway>,
    proj_w: ParamId,
    proj_b: ParamId,
}

fn bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl CharCnn {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &CharCnnConfig,
        n_chars: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut embed_m = Matrix::uniform(n_chars, cfg.char_dim, 1.0, rng);
        embed_m.row_mut(CHAR_PAD).fill(0.0);
        let embed = store.add(format!("{prefix}.embed"), embed_m)?;
        let mut convs = Vec::new();
        for &(width, n) in &cfg.filters {
            let fan_in = width * cfg.char_dim;
            convs.push(Conv {
                width,
                w: store.add(
                    format!("{prefix}.conv{width}.w"),
                    Matrix::uniform(fan_in, n, bound(fan_in), rng),
                )?,
                b: store.add(
                    format!("{prefix}.conv{width}.b"),
                    Matrix::uniform(1, n, bound(fan_in), rng),
                )?,
            });
        }
        let f = cfg.total_filters();
        let mut highways = Vec::new();
        for l in 0..cfg.highway_layers {
            highways.push(Highway {
                wh: store.add(format!("{prefix}.highway{l}.wh"), Matrix::uniform(f, f, bound(f), rng))?,
                bh: store.add(format!("{prefix}.highway{l}.bh"), Matrix::uniform(1, f, bound(f), rng))?,
                wt: store.add(format!("{prefix}.highway{l}.wt"), Matrix::uniform(f, f, bound(f), rng))?,
                bt: store.add(format!("{prefix}.highway{l}.bt"), Matrix::uniform(1, f, bound(f), rng))?,
            });
        }
        let proj_w = store.add(
            format!("{prefix}.proj.w"),
            Matrix::uniform(f, cfg.output_dim, bound(f), rng),
        )?;
        let proj_b = store.add(
            format!("{prefix}.proj.b"),
            Matrix::uniform(1, cfg.output_dim, bound(f), rng),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            convs,
            highways,
            proj_w,
            proj_b,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, cfg: &CharCnnConfig, n_chars: usize) -> Result<Self> {
        cfg.validate()?;
        let embed = store.expect(&format!("{prefix}.embed"), n_chars, cfg.char_dim)?;
        let mut convs = Vec::new();
        for &(width, n) in &cfg.filters {
            convs.push(Conv {
                width,
                w: store.expect(&format!("{prefix}.conv{width}.w"), width * cfg.char_dim, n)?,
                b: store.expect(&format!("{prefix}.conv{width}.b"), 1, n)?,
            });
        }
        let f = cfg.total_filters();
        let mut highways = Vec::new();
        for l in 0..cfg.highway_layers {
            highways.push(Highway {
                wh: store.expect(&format!("{prefix}.highway{l}.wh"), f, f)?,
                bh: store.expect(&format!("{prefix}.highway{l}.bh"), 1, f)?,
                wt: store.expect(&format!("{prefix}.highway{l}.wt"), f, f)?,
                bt: store.expect(&format!("{prefix}.highway{l}.bt"), 1, f)?,
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            convs,
            highways,
            proj_w: store.expect(&format!("{prefix}.proj.w"), f, cfg.output_dim)?,
            proj_b: store.expect(&format!("{prefix}.proj.b"), 1, cfg.output_dim)?,
        })
    }

    pub fn config(&self) -> &CharCnnConfig {
        &self.cfg
    }

    /// Max-pooled convolution features (before the activation), `1 × Σ filters`.
    pub fn pooled_features(&self, g: &mut Graph<'_>, char_ids: &[usize]) -> Var {
        let mut ids = char_ids.to_vec();
        if ids.is_empty() {
            ids.push(CHAR_UNK);
        }
        let width = self.cfg.max_width();
        if ids.len() < width {
            ids.resize(width, CHAR_PAD);
        }
        let table = g.param(self.embed);
        let chars = g.gather(table, &ids);
        let pooled: Vec<Var> = self
            .convs
            .iter()
            .map(|conv| {
                let windows = g.unfold(chars, conv.width);
                let response = g.affine(windows, conv.w, conv.b);
                g.max_rows(response)
            })
            .collect();
        if pooled.len() == 1 {
            pooled[0]
        } else {
            g.concat_cols(&pooled)
        }
    }

    /// `1 × output_dim` embedding of one token.
    pub fn forward(&self, g: &mut Graph<'_>, char_ids: &[usize]) -> Var {
        let pooled = self.pooled_features(g, char_ids);
        let mut x = g.relu(pooled);
        for hw in &self.highways {
            let h = g.affine(x, hw.wh, hw.bh);
            let h = g.relu(h);
            let t = g.affine(x, hw.wt, hw.bt);
            let t = g.sigmoid(t);
            let carry = g.one_minus(t);
            let th = g.mul(t, h);
            let cx = g.mul(carry, x);
            x = g.add(th, cx);
        }
        g.affine(x, self.proj_w, self.proj_b)
    }

    /// Embeds a single token string outside of any training graph.
    pub fn embed(&self, store: &ParamStore, vocab: &CharVocab, token: &str) -> Vec<f64> {
        let mut g = Graph::new(store, Mode::Eval);
        let ids = vocab.encode(token, self.cfg.max_chars);
        let v = self.forward(&mut g, &ids);
        g.value(v).as_slice().to_vec()
    }
}

/// Embeds `token` with a bound character CNN.
pub fn char_cnn_embed(token: &str, cnn: &CharCnn, vocab: &CharVocab, params: &ParamStore) -> Vec<f64> {
    cnn.embed(params, vocab, token)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ParamStore, CharCnn, CharVocab) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = CharVocab::from_chars("abcdefghijklmnopqrstuvwxyz".chars());
        let mut store = ParamStore::new();
        let cfg = CharCnnConfig::desk(8);
        let cnn = CharCnn::init(&mut store, "c", &cfg, vocab.len(), &mut rng).unwrap();
        (store, cnn, vocab)
    }

    #[test]
    fn equal_tokens_give_equal_vectors() {
        let (store, cnn, vocab) = setup(1);
        let a = char_cnn_embed("hope", &cnn, &vocab, &store);
        let b = char_cnn_embed("hope", &cnn, &vocab, &store);
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
    }

    #[test]
    fn zero_weights_give_zero_vector() {
        let (mut store, cnn, vocab) = setup(2);
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            if store.name(id) != "c.embed" {
                let m = store.get_mut(id);
                m.as_mut_slice().fill(0.0);
            }
        }
        let v = char_cnn_embed("hope", &cnn, &vocab, &store);
        assert!(v.iter().all(|&x| x == 0.0), "{v:?}");
    }

    #[test]
    fn single_width_two_filter_matches_hand_convolution() {
        let vocab = CharVocab::from_chars(['a', 'b']);
        let cfg = CharCnnConfig {
            char_dim: 2,
            filters: vec![(2, 1)],
            highway_layers: 0,
            output_dim: 1,
            max_chars: 10,
        };
        let mut store = ParamStore::new();
        let mut embed = Matrix::zeros(vocab.len(), 2);
        let (ia, ib) = (vocab.encode("a", 5)[0], vocab.encode("b", 5)[0]);
        embed.row_mut(ia).copy_from_slice(&[0.5, -1.0]);
        embed.row_mut(ib).copy_from_slice(&[2.0, 0.25]);
        store.add("c.embed", embed).unwrap();
        store
            .add("c.conv2.w", Matrix::from_vec(4, 1, vec![1.0, 2.0, -0.5, 3.0]))
            .unwrap();
        store.add("c.conv2.b", Matrix::filled(1, 1, 0.1)).unwrap();
        store.add("c.proj.w", Matrix::filled(1, 1, 1.0)).unwrap();
        store.add("c.proj.b", Matrix::zeros(1, 1)).unwrap();
        let cnn = CharCnn::bind(&store, "c", &cfg, vocab.len()).unwrap();

        // one window over "ab": [0.5, -1.0, 2.0, 0.25] · [1, 2, -0.5, 3] + 0.1
        let hand = 0.5 * 1.0 + (-1.0) * 2.0 + 2.0 * (-0.5) + 0.25 * 3.0 + 0.1;
        let mut g = Graph::new(&store, Mode::Eval);
        let pooled = cnn.pooled_features(&mut g, &vocab.encode("ab", 10));
        assert!((g.value(pooled).get(0, 0) - hand).abs() < 1e-15);
    }

    #[test]
    fn order_sensitive_for_generic_params() {
        let mut differ = 0;
        for seed in 0..10 {
            let (store, cnn, vocab) = setup(seed);
            if char_cnn_embed("ab", &cnn, &vocab, &store) != char_cnn_embed("ba", &cnn, &vocab, &store) {
                differ += 1;
            }
        }
        assert!(differ >= 9, "only {differ}/10 parameter draws distinguished ab/ba");
    }

    #[test]
    fn special_tokens_and_unknown_chars() {
        let vocab = CharVocab::from_chars(['a']);
        assert_eq!(vocab.encode(CLS, 5), vec![CHAR_CLS]);
        assert_eq!(vocab.encode(SEP, 5), vec![CHAR_SEP]);
        assert_eq!(vocab.encode("aé", 5), vec![RESERVED, CHAR_UNK]);
        assert_eq!(vocab.encode("aaaaaaa", 3).len(), 3);
    }
}
