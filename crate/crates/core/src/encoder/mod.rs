//! Text → contextual vectors.
//!
//! Every backbone produces an [`EncoderOutput`]: a `max_len × d` matrix whose
//! padded rows are zero, plus one pooled `d`-vector. Computation only ever
//! touches the real (unmasked) prefix of a sequence, so extra padding cannot
//! change the result.

pub mod charcnn;
pub mod external;
pub mod vocab;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::lstm::Lstm;
use crate::tensor::Matrix;

pub use charcnn::{char_cnn_embed, CharCnn, CharCnnConfig, CharVocab};
pub use external::ExternalEmbeddings;
pub use vocab::{
    pre_tokenize, tokenize_subword, tokenize_words, Casing, TokenSequence, Tokens, Vocabulary,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackboneKind {
    /// Subword embeddings + transformer layers.
    Transformer,
    /// Character-CNN token embeddings + transformer layers.
    CharTransformer,
    /// Subword embeddings + stacked LSTM (language-model style).
    Recurrent,
    /// Vectors supplied from a file; no trainable backbone.
    External,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Transformer => "small-transformer",
            BackboneKind::CharTransformer => "char-cnn+small-transformer",
            BackboneKind::Recurrent => "recurrent-lm",
            BackboneKind::External => "external-embeddings",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "small-transformer" | "transformer" => Ok(BackboneKind::Transformer),
            "char-cnn+small-transformer" | "char-transformer" | "character" => {
                Ok(BackboneKind::CharTransformer)
            }
            "recurrent-lm" | "recurrent" | "ulmfit" => Ok(BackboneKind::Recurrent),
            "external-embeddings" | "external" => Ok(BackboneKind::External),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Cls,
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub char_cnn: CharCnnConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk(BackboneKind::Transformer)
    }
}

impl BackboneConfig {
    /// 2 layers, 4 heads, d = 128, feed-forward 256, dropout 0.1.
    pub fn desk(kind: BackboneKind) -> Self {
        Self {
            kind,
            layers: 2,
            heads: 4,
            d_model: 128,
            ff_dim: 256,
            dropout: 0.1,
            pooling: Pooling::Mean,
            char_cnn: CharCnnConfig::desk(128),
        }
    }

    /// 12 layers, 12 heads, d = 768, feed-forward 3072.
    pub fn base(kind: BackboneKind) -> Self {
        Self {
            kind,
            layers: 12,
            heads: 12,
            d_model: 768,
            ff_dim: 3072,
            dropout: 0.1,
            pooling: Pooling::Mean,
            char_cnn: CharCnnConfig {
                char_dim: 16,
                filters: vec![(1, 32), (2, 32), (3, 64), (4, 128), (5, 256), (6, 512), (7, 1024)],
                highway_layers: 2,
                output_dim: 768,
                max_chars: 50,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        match self.kind {
            BackboneKind::Transformer | BackboneKind::CharTransformer => {
                if self.heads == 0 || self.d_model % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "d_model {} is not divisible by heads {}",
                        self.d_model, self.heads
                    )));
                }
                if self.ff_dim == 0 {
                    return Err(Error::Config("ff_dim must be >= 1".into()));
                }
                if self.kind == BackboneKind::CharTransformer {
                    self.char_cnn.validate()?;
                    if self.char_cnn.output_dim != self.d_model {
                        return Err(Error::Config(format!(
                            "char-cnn output {} must equal d_model {}",
                            self.char_cnn.output_dim, self.d_model
                        )));
                    }
                }
            }
            BackboneKind::Recurrent => {
                if self.layers == 0 {
                    return Err(Error::Config("recurrent backbone needs >= 1 layer".into()));
                }
            }
            BackboneKind::External => {}
        }
        Ok(())
    }
}

/// Contextual vectors for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// `max_len × d`; rows at masked positions are zero.
    pub hidden: Matrix,
    pub pooled: Vec<f64>,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sinusoidal position table, `n × d`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

#[derive(Clone, Debug, PartialEq)]
struct Affine {
    w: ParamId,
    b: ParamId,
}

impl Affine {
    fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Ok(Self {
            w: store.add(format!("{name}.w"), Matrix::uniform(fan_in, fan_out, bound, rng))?,
            b: store.add(format!("{name}.b"), Matrix::uniform(1, fan_out, bound, rng))?,
        })
    }

    fn bind(store: &ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        Ok(Self {
            w: store.expect(&format!("{name}.w"), fan_in, fan_out)?,
            b: store.expect(&format!("{name}.b"), 1, fan_out)?,
        })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.affine(x, self.w, self.b)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

impl Norm {
    fn init(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, d, 1.0))?,
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, d))?,
        })
    }

    fn bind(store: &ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gain: store.expect(&format!("{name}.gain"), 1, d)?,
            bias: store.expect(&format!("{name}.bias"), 1, d)?,
        })
    }

    fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        g.layer_norm(x, self.gain, self.bias)
    }
}

/// Post-norm transformer block.
#[derive(Clone, Debug, PartialEq)]
struct TransformerLayer {
    q: Affine,
    k: Affine,
    v: Affine,
    o: Affine,
    ln1: Norm,
    ff1: Affine,
    ff2: Affine,
    ln2: Norm,
}

impl TransformerLayer {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, p: &str, cfg: &BackboneConfig, rng: &mut R) -> Result<Self> {
        let (d, ff) = (cfg.d_model, cfg.ff_dim);
        Ok(Self {
            q: Affine::init(store, &format!("{p}.attn.q"), d, d, rng)?,
            k: Affine::init(store, &format!("{p}.attn.k"), d, d, rng)?,
            v: Affine::init(store, &format!("{p}.attn.v"), d, d, rng)?,
            o: Affine::init(store, &format!("{p}.attn.o"), d, d, rng)?,
            ln1: Norm::init(store, &format!("{p}.ln1"), d)?,
            ff1: Affine::init(store, &format!("{p}.ff1"), d, ff, rng)?,
            ff2: Affine::init(store, &format!("{p}.ff2"), ff, d, rng)?,
            ln2: Norm::init(store, &format!("{p}.ln2"), d)?,
        })
    }

    fn bind(store: &ParamStore, p: &str, cfg: &BackboneConfig) -> Result<Self> {
        let (d, ff) = (cfg.d_model, cfg.ff_dim);
        Ok(Self {
            q: Affine::bind(store, &format!("{p}.attn.q"), d, d)?,
            k: Affine::bind(store, &format!("{p}.attn.k"), d, d)?,
            v: Affine::bind(store, &format!("{p}.attn.v"), d, d)?,
            o: Affine::bind(store, &format!("{p}.attn.o"), d, d)?,
            ln1: Norm::bind(store, &format!("{p}.ln1"), d)?,
            ff1: Affine::bind(store, &format!("{p}.ff1"), d, ff)?,
            ff2: Affine::bind(store, &format!("{p}.ff2"), ff, d)?,
            ln2: Norm::bind(store, &format!("{p}.ln2"), d)?,
        })
    }

    fn forward(&self, g: &mut Graph<'_>, x: Var, heads: usize, dropout: f64) -> Var {
        let d = g.value(x).cols();
        let dh = d / heads;
        let q = self.q.apply(g, x);
        let k = self.k.apply(g, x);
        let v = self.v.apply(g, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let attn = g.softmax_rows(scores);
            let attn = g.dropout(attn, dropout);
            outs.push(g.matmul(attn, vh));
        }
        let ctx = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        let attn_out = self.o.apply(g, ctx);
        let attn_out = g.dropout(attn_out, dropout);
        let res = g.add(x, attn_out);
        let x = self.ln1.apply(g, res);
        let hdn = self.ff1.apply(g, x);
        let hdn = g.gelu(hdn);
        let ff = self.ff2.apply(g, hdn);
        let ff = g.dropout(ff, dropout);
        let res = g.add(x, ff);
        self.ln2.apply(g, res)
    }
}

#[derive(Clone, Debug, PartialEq)]
enum InputLayer {
    Tokens(ParamId),
    Chars(CharCnn),
    None,
}

/// Graph handles for one encoded sequence.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `n × d` over the real prefix only.
    pub hidden: Var,
    /// `1 × d`.
    pub pooled: Var,
    pub real_len: usize,
}

/// Parameter handles of a backbone, bound to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    cfg: BackboneConfig,
    input: InputLayer,
    emb_norm: Option<Norm>,
    layers: Vec<TransformerLayer>,
    lstms: Vec<Lstm>,
    dropout_scale: f64,
}

/// Parameter-name prefix of everything the backbone owns.
pub const ENCODER_PREFIX: &str = "encoder";

impl Encoder {
    /// Registers freshly initialized backbone parameters. `input_vocab` is the
    /// subword vocabulary size, or the character-table size for the
    /// character path.
    pub fn init<R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        input_vocab: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let p = ENCODER_PREFIX;
        let (input, emb_norm, layers, lstms) = match cfg.kind {
            BackboneKind::Transformer | BackboneKind::CharTransformer => {
                let input = if cfg.kind == BackboneKind::Transformer {
                    InputLayer::Tokens(store.add(
                        format!("{p}.embed.tokens"),
                        Matrix::uniform(input_vocab, d, 1.0 / (d as f64).sqrt(), rng),
                    )?)
                } else {
                    InputLayer::Chars(CharCnn::init(store, &format!("{p}.embed.char"), &cfg.char_cnn, input_vocab, rng)?)
                };
                let norm = Norm::init(store, &format!("{p}.embed.ln"), d)?;
                let layers = (0..cfg.layers)
                    .map(|l| TransformerLayer::init(store, &format!("{p}.layer{l}"), cfg, rng))
                    .collect::<Result<_>>()?;
                (input, Some(norm), layers, Vec::new())
            }
            BackboneKind::Recurrent => {
                let input = InputLayer::Tokens(store.add(
                    format!("{p}.embed.tokens"),
                    Matrix::uniform(input_vocab, d, 1.0 / (d as f64).sqrt(), rng),
                )?);
                let lstms = (0..cfg.layers)
                    .map(|l| Lstm::init(store, &format!("{p}.layer{l}.lstm"), d, d, rng))
                    .collect::<Result<_>>()?;
                (input, None, Vec::new(), lstms)
            }
            BackboneKind::External => (InputLayer::None, None, Vec::new(), Vec::new()),
        };
        Ok(Self {
            cfg: cfg.clone(),
            input,
            emb_norm,
            layers,
            lstms,
            dropout_scale: 1.0,
        })
    }

    /// Resolves parameters by name, failing on any missing tensor or shape
    /// that disagrees with `cfg`.
    pub fn bind(cfg: &BackboneConfig, input_vocab: usize, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let p = ENCODER_PREFIX;
        let (input, emb_norm, layers, lstms) = match cfg.kind {
            BackboneKind::Transformer | BackboneKind::CharTransformer => {
                let input = if cfg.kind == BackboneKind::Transformer {
                    InputLayer::Tokens(store.expect(&format!("{p}.embed.tokens"), input_vocab, d)?)
                } else {
                    InputLayer::Chars(CharCnn::bind(store, &format!("{p}.embed.char"), &cfg.char_cnn, input_vocab)?)
                };
                let norm = Norm::bind(store, &format!("{p}.embed.ln"), d)?;
                let layers = (0..cfg.layers)
                    .map(|l| TransformerLayer::bind(store, &format!("{p}.layer{l}"), cfg))
                    .collect::<Result<_>>()?;
                (input, Some(norm), layers, Vec::new())
            }
            BackboneKind::Recurrent => {
                let input = InputLayer::Tokens(store.expect(&format!("{p}.embed.tokens"), input_vocab, d)?);
                let lstms = (0..cfg.layers)
                    .map(|l| Lstm::bind(store, &format!("{p}.layer{l}.lstm"), d, d))
                    .collect::<Result<_>>()?;
                (input, None, Vec::new(), lstms)
            }
            BackboneKind::External => (InputLayer::None, None, Vec::new(), Vec::new()),
        };
        Ok(Self {
            cfg: cfg.clone(),
            input,
            emb_norm,
            layers,
            lstms,
            dropout_scale: 1.0,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Multiplies every backbone dropout rate.
    pub fn set_dropout_scale(&mut self, scale: f64) {
        self.dropout_scale = scale;
    }

    pub fn dropout(&self) -> f64 {
        self.cfg.dropout * self.dropout_scale
    }

    /// Name prefixes of the backbone's layer groups, input-most first.
    pub fn layer_groups(&self) -> Vec<String> {
        let p = ENCODER_PREFIX;
        let mut groups = vec![format!("{p}.embed.")];
        let n = match self.cfg.kind {
            BackboneKind::Transformer | BackboneKind::CharTransformer => self.layers.len(),
            BackboneKind::Recurrent => self.lstms.len(),
            BackboneKind::External => return Vec::new(),
        };
        groups.extend((0..n).map(|l| format!("{p}.layer{l}.")));
        groups
    }

    /// Embedding rows for the real prefix of `seq`, before any contextual layer.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, seq: &TokenSequence, chars: Option<&CharVocab>) -> Result<Var> {
        seq.validate()?;
        let n = seq.real_len();
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        match (&self.input, &seq.tokens) {
            (InputLayer::Tokens(table), Tokens::Ids(ids)) => {
                let t = g.param(*table);
                let rows = g.value(t).rows();
                if let Some(&bad) = ids[..n].iter().find(|&&i| i >= rows) {
                    return Err(Error::Config(format!(
                        "token id {bad} outside embedding table of {rows} rows"
                    )));
                }
                Ok(g.gather(t, &ids[..n]))
            }
            (InputLayer::Chars(cnn), Tokens::Words(words)) => {
                let vocab = chars.ok_or_else(|| {
                    Error::Config("character backbone needs a character table".into())
                })?;
                let rows: Vec<Var> = words[..n]
                    .iter()
                    .map(|w| cnn.forward(g, &vocab.encode(w, cnn.config().max_chars)))
                    .collect();
                Ok(if rows.len() == 1 { rows[0] } else { g.concat_rows(&rows) })
            }
            (InputLayer::None, _) => Err(Error::Config(
                "external-embeddings backbone takes precomputed vectors, not tokens".into(),
            )),
            _ => Err(Error::Config(
                "token sequence kind does not match the backbone input".into(),
            )),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, seq: &TokenSequence, chars: Option<&CharVocab>) -> Result<EncodedVars> {
        let emb = self.embed_tokens(g, seq, chars)?;
        let n = seq.real_len();
        let d = self.cfg.d_model;
        let p = self.dropout();
        let hidden = match self.cfg.kind {
            BackboneKind::Transformer | BackboneKind::CharTransformer => {
                let pos = g.input(sinusoidal_positions(n, d));
                let mut x = g.add(emb, pos);
                x = self.emb_norm.as_ref().expect("transformer has embedding norm").apply(g, x);
                x = g.dropout(x, p);
                for layer in &self.layers {
                    x = layer.forward(g, x, self.cfg.heads, p);
                }
                x
            }
            BackboneKind::Recurrent => {
                let mut x = g.dropout(emb, p);
                for lstm in &self.lstms {
                    let hs = lstm.run(g, x, false);
                    x = if hs.len() == 1 { hs[0] } else { g.concat_rows(&hs) };
                    x = g.dropout(x, p);
                }
                x
            }
            BackboneKind::External => unreachable!("rejected in embed_tokens"),
        };
        let pooled = match self.cfg.pooling {
            Pooling::Mean => g.mean_rows(hidden),
            Pooling::Cls => g.slice_rows(hidden, 0, 1),
        };
        Ok(EncodedVars {
            hidden,
            pooled,
            real_len: n,
        })
    }
}

fn pad_hidden(real: &Matrix, max_len: usize) -> Matrix {
    let mut hidden = Matrix::zeros(max_len, real.cols());
    for r in 0..real.rows().min(max_len) {
        hidden.row_mut(r).copy_from_slice(real.row(r));
    }
    hidden
}

/// Runs the backbone on one sequence.
pub fn encode(
    seq: &TokenSequence,
    encoder: &Encoder,
    params: &ParamStore,
    chars: Option<&CharVocab>,
    mode: Mode,
) -> Result<EncoderOutput> {
    let mut g = Graph::new(params, mode);
    let vars = encoder.forward(&mut g, seq, chars)?;
    Ok(EncoderOutput {
        hidden: pad_hidden(g.value(vars.hidden), seq.max_len()),
        pooled: g.value(vars.pooled).as_slice().to_vec(),
        mask: seq.mask.clone(),
    })
}

/// Wraps externally produced per-token vectors as an [`EncoderOutput`].
pub fn encode_external(
    emb: &ExternalEmbeddings,
    cfg: &BackboneConfig,
    max_len: usize,
) -> Result<EncoderOutput> {
    if emb.dim() != cfg.d_model {
        return Err(Error::Config(format!(
            "external vectors have dimension {}, backbone expects {}",
            emb.dim(),
            cfg.d_model
        )));
    }
    let n = emb.len().min(max_len);
    if n == 0 {
        return Err(Error::EmptySequence);
    }
    let hidden = pad_hidden(&emb.vectors, max_len);
    let pooled = match cfg.pooling {
        Pooling::Mean => {
            let mut acc = vec![0.0; emb.dim()];
            for r in 0..n {
                for (a, v) in acc.iter_mut().zip(emb.vectors.row(r)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / n as f64).collect()
        }
        Pooling::Cls => emb.vectors.row(0).to_vec(),
    };
    Ok(EncoderOutput {
        hidden,
        pooled,
        mask: (0..max_len).map(|i| i < n).collect(),
    })
}
