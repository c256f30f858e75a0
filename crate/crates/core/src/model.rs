//! A trainable classifier: tokenizer, backbone, head and label schema bundled
//! with their parameters.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, ParamStore, Var};
use crate::corpus::{Label, LabelSchema, Language};
use crate::encoder::{
    tokenize_subword, tokenize_words, BackboneConfig, BackboneKind, Casing, CharVocab, Encoder, TokenSequence,
    Vocabulary,
};
use crate::error::{Error, Result};
use crate::heads::{Head, HeadConfig, Logits, ProbVector};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenizerKind {
    Subword(Vocabulary),
    Character(CharVocab),
}

/// Text-to-sequence front end shared by training and serving.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    pub casing: Casing,
    pub max_len: usize,
    pub strip_emoji: bool,
    pub kind: TokenizerKind,
}

/// Serialized form of a [`Tokenizer`]; characters are stored as one-char strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct TokenizerSpec {
    casing: Casing,
    max_len: usize,
    strip_emoji: bool,
    kind: String,
    entries: Vec<String>,
}

/// Pictographic and presentation codepoints removed by the emoji filter.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF | 0x2600..=0x27BF | 0x2B00..=0x2BFF | 0xFE00..=0xFE0F | 0x200D | 0x20E3 | 0xE0020..=0xE007F)
}

pub fn strip_emoji(text: &str) -> String {
    text.chars().filter(|&c| !is_emoji(c)).collect()
}

impl Tokenizer {
    pub fn subword(vocab: Vocabulary, casing: Casing, max_len: usize) -> Self {
        Self {
            casing,
            max_len,
            strip_emoji: false,
            kind: TokenizerKind::Subword(vocab),
        }
    }

    pub fn character(chars: CharVocab, casing: Casing, max_len: usize) -> Self {
        Self {
            casing,
            max_len,
            strip_emoji: false,
            kind: TokenizerKind::Character(chars),
        }
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let cleaned;
        let text = if self.strip_emoji {
            cleaned = strip_emoji(text);
            &cleaned
        } else {
            text
        };
        match &self.kind {
            TokenizerKind::Subword(v) => tokenize_subword(text, v, self.max_len, self.casing),
            TokenizerKind::Character(_) => tokenize_words(text, self.max_len, self.casing),
        }
    }

    /// Rows of the backbone's input table.
    pub fn input_size(&self) -> usize {
        match &self.kind {
            TokenizerKind::Subword(v) => v.len(),
            TokenizerKind::Character(c) => c.len(),
        }
    }

    pub fn chars(&self) -> Option<&CharVocab> {
        match &self.kind {
            TokenizerKind::Character(c) => Some(c),
            TokenizerKind::Subword(_) => None,
        }
    }

    pub(crate) fn to_spec(&self) -> TokenizerSpec {
        let (kind, entries) = match &self.kind {
            TokenizerKind::Subword(v) => ("subword", v.tokens().to_vec()),
            TokenizerKind::Character(c) => ("character", c.chars().iter().map(|c| c.to_string()).collect()),
        };
        TokenizerSpec {
            casing: self.casing,
            max_len: self.max_len,
            strip_emoji: self.strip_emoji,
            kind: kind.to_string(),
            entries,
        }
    }

    pub(crate) fn from_spec(spec: TokenizerSpec) -> Result<Self> {
        let kind = match spec.kind.as_str() {
            "subword" => TokenizerKind::Subword(Vocabulary::from_tokens(spec.entries)?),
            "character" => {
                let mut chars = Vec::with_capacity(spec.entries.len());
                for e in &spec.entries {
                    let mut it = e.chars();
                    match (it.next(), it.next()) {
                        (Some(c), None) => chars.push(c),
                        _ => return Err(Error::Checkpoint(format!("bad character entry `{e}`"))),
                    }
                }
                TokenizerKind::Character(CharVocab::from_chars(chars))
            }
            other => return Err(Error::Checkpoint(format!("unknown tokenizer kind `{other}`"))),
        };
        if spec.max_len < 2 {
            return Err(Error::Checkpoint(format!("max_len {} below 2", spec.max_len)));
        }
        Ok(Self {
            casing: spec.casing,
            max_len: spec.max_len,
            strip_emoji: spec.strip_emoji,
            kind,
        })
    }
}

/// Everything needed to rebuild and run a classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub language: Language,
    pub schema: LabelSchema,
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub tokenizer: Tokenizer,
    /// Multiplier on every dropout rate of the model.
    pub dropout_scale: f64,
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

/// Parameter handles bound to a bundle's store.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub head: Head,
}

impl ModelBundle {
    /// Fresh parameters for `backbone` + `head`, seeded.
    pub fn init(
        language: Language,
        schema: LabelSchema,
        backbone: BackboneConfig,
        head: HeadConfig,
        tokenizer: Tokenizer,
        seed: u64,
    ) -> Result<Self> {
        Self::check_compatible(&backbone, &head, &tokenizer)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        Encoder::init(&backbone, tokenizer.input_size(), &mut params, &mut rng)?;
        Head::init(&head, backbone.d_model, &mut params, &mut rng)?;
        Ok(Self {
            language,
            schema,
            backbone,
            head,
            tokenizer,
            dropout_scale: 1.0,
            params,
            metadata: BTreeMap::new(),
        })
    }

    fn check_compatible(backbone: &BackboneConfig, head: &HeadConfig, tokenizer: &Tokenizer) -> Result<()> {
        backbone.validate()?;
        head.validate()?;
        if head.classes != Label::COUNT {
            return Err(Error::Config(format!(
                "head has {} classes, the label schema has {}",
                head.classes,
                Label::COUNT
            )));
        }
        match (backbone.kind, &tokenizer.kind) {
            (BackboneKind::Transformer | BackboneKind::Recurrent, TokenizerKind::Subword(_))
            | (BackboneKind::CharTransformer, TokenizerKind::Character(_)) => Ok(()),
            (BackboneKind::External, _) => Err(Error::Config(
                "external-embeddings backbones are used through encode_external, not trained end to end".into(),
            )),
            (kind, _) => Err(Error::Config(format!("tokenizer does not match backbone `{}`", kind.as_str()))),
        }
    }

    /// Binds parameter handles, validating every name and shape.
    pub fn model(&self) -> Result<Model> {
        Self::check_compatible(&self.backbone, &self.head, &self.tokenizer)?;
        let mut encoder = Encoder::bind(&self.backbone, self.tokenizer.input_size(), &self.params)?;
        encoder.set_dropout_scale(self.dropout_scale);
        let mut head_cfg = self.head.clone();
        head_cfg.dropout *= self.dropout_scale;
        let head = Head::bind(&head_cfg, self.backbone.d_model, &self.params)?;
        Ok(Model { encoder, head })
    }

    /// Eval-mode class probabilities for one text.
    pub fn probabilities(&self, model: &Model, text: &str) -> Result<ProbVector> {
        let seq = self.tokenizer.tokenize(text);
        let mut g = Graph::new(&self.params, Mode::Eval);
        let out = model.logits(&mut g, &seq, self.tokenizer.chars())?;
        Ok(Logits(g.value(out).as_slice().to_vec()).softmax())
    }
}

impl Model {
    /// `1 × C` logits for one sequence.
    pub fn logits(&self, g: &mut Graph<'_>, seq: &TokenSequence, chars: Option<&CharVocab>) -> Result<Var> {
        let enc = self.encoder.forward(g, seq, chars)?;
        self.head.forward(g, &enc)
    }

    /// Parameter-name prefixes from the classifier down to the input
    /// embeddings; the first entry is the head.
    pub fn layer_groups(&self) -> Vec<String> {
        let mut groups = vec![format!("{}.", crate::heads::HEAD_PREFIX)];
        groups.extend(self.encoder.layer_groups().into_iter().rev());
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::HeadKind;

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["hope", "##ful", "un", "sad"]).unwrap()
    }

    fn tiny_backbone(kind: BackboneKind) -> BackboneConfig {
        let mut cfg = BackboneConfig::desk(kind);
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.d_model = 8;
        cfg.ff_dim = 16;
        cfg.char_cnn.output_dim = 8;
        cfg
    }

    #[test]
    fn emoji_filter_keeps_text() {
        assert_eq!(strip_emoji("hope 🙏🏽 all ❤️ ok"), "hope  all  ok");
        assert_eq!(strip_emoji("நம்பிக்கை"), "நம்பிக்கை");
    }

    #[test]
    fn tokenizer_spec_round_trips() {
        let t = Tokenizer::subword(vocab(), Casing::Cased, 16);
        assert_eq!(Tokenizer::from_spec(t.to_spec()).unwrap(), t);
        let c = Tokenizer::character(CharVocab::from_chars("abcஅ".chars()), Casing::Uncased, 8);
        assert_eq!(Tokenizer::from_spec(c.to_spec()).unwrap(), c);
    }

    #[test]
    fn bundle_binds_and_predicts() {
        for head in [HeadKind::Dense, HeadKind::BiLstm] {
            let mut hc = HeadConfig::new(head);
            hc.lstm_units = 4;
            let b = ModelBundle::init(
                Language::English,
                LabelSchema::default(),
                tiny_backbone(BackboneKind::Transformer),
                hc,
                Tokenizer::subword(vocab(), Casing::Uncased, 12),
                3,
            )
            .unwrap();
            let m = b.model().unwrap();
            let p = b.probabilities(&m, "hopeful sad").unwrap();
            assert!((p.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert_eq!(p, b.probabilities(&m, "hopeful sad").unwrap());
        }
    }

    #[test]
    fn mismatched_tokenizer_is_config_error() {
        let err = ModelBundle::init(
            Language::Tamil,
            LabelSchema::default(),
            tiny_backbone(BackboneKind::CharTransformer),
            HeadConfig::new(HeadKind::Dense),
            Tokenizer::subword(vocab(), Casing::Uncased, 12),
            0,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn layer_groups_start_at_the_head() {
        let b = ModelBundle::init(
            Language::English,
            LabelSchema::default(),
            tiny_backbone(BackboneKind::Transformer),
            HeadConfig::new(HeadKind::Dense),
            Tokenizer::subword(vocab(), Casing::Uncased, 12),
            0,
        )
        .unwrap();
        let g = b.model().unwrap().layer_groups();
        assert_eq!(g, vec!["head.", "encoder.layer0.", "encoder.embed."]);
    }
}
