//! Text normalization, pre-tokenization, subword vocabularies and the
//! greedy longest-match tokenizer.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

/// Continuation prefix for word-internal subwords.
pub const CONTINUATION: &str = "##";

/// Words longer than this (in chars) become a single `[UNK]`.
const MAX_WORD_CHARS: usize = 100;

/// Casing mode. `Uncased` lowercases after NFC normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Casing {
    #[default]
    Uncased,
    Cased,
}

pub fn normalize(text: &str, casing: Casing) -> String {
    let nfc: String = text.nfc().collect();
    match casing {
        Casing::Uncased => nfc.to_lowercase(),
        Casing::Cased => nfc,
    }
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '“' | '”' | '‘' | '’' | '…' | '–' | '—' | '«' | '»' | '¿' | '¡' | '।'
        )
}

/// Normalizes, splits on whitespace and isolates punctuation characters.
pub fn pre_tokenize(text: &str, casing: Casing) -> Vec<String> {
    let norm = normalize(text, casing);
    let mut words = Vec::new();
    for chunk in norm.split_whitespace() {
        let mut current = String::new();
        for c in chunk.chars() {
            if is_punct(c) {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(c.to_string());
            } else {
                current.push(c);
            }
        }
        if !current.is_empty() {
            words.push(current);
        }
    }
    words
}

/// Dense token ↔ id map. The four special tokens are always present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary in the given order; missing special tokens are
    /// appended. Duplicates are an error.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Self {
            tokens: Vec::new(),
            ids: HashMap::new(),
        };
        for t in tokens {
            let t = t.into();
            if v.ids.contains_key(&t) {
                return Err(Error::Config(format!("duplicate vocabulary entry `{t}`")));
            }
            v.insert(t);
        }
        for s in SPECIALS {
            if !v.ids.contains_key(s) {
                v.insert(s.to_string());
            }
        }
        Ok(v)
    }

    fn insert(&mut self, t: String) -> usize {
        if let Some(&id) = self.ids.get(&t) {
            return id;
        }
        let id = self.tokens.len();
        self.ids.insert(t.clone(), id);
        self.tokens.push(t);
        id
    }

    /// One token per line; line index is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(|l| l.trim_end_matches('\r').to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.tokens.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> usize {
        self.ids[PAD]
    }

    pub fn unk_id(&self) -> usize {
        self.ids[UNK]
    }

    pub fn cls_id(&self) -> usize {
        self.ids[CLS]
    }

    pub fn sep_id(&self) -> usize {
        self.ids[SEP]
    }

    /// Induces a subword vocabulary from raw texts by frequency-driven pair
    /// merges, starting from the character alphabet (word-initial characters
    /// bare, word-internal characters with the `##` prefix).
    pub fn induce<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        casing: Casing,
        max_size: usize,
        min_pair_freq: usize,
    ) -> Self {
        let mut word_freq: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in pre_tokenize(t, casing) {
                if w.chars().count() <= MAX_WORD_CHARS {
                    *word_freq.entry(w).or_default() += 1;
                }
            }
        }

        let mut vocab = Self::from_tokens(SPECIALS).expect("specials are distinct");
        let mut words: Vec<(Vec<String>, usize)> = word_freq
            .into_iter()
            .map(|(w, f)| {
                let units = w
                    .chars()
                    .enumerate()
                    .map(|(i, c)| {
                        if i == 0 {
                            c.to_string()
                        } else {
                            format!("{CONTINUATION}{c}")
                        }
                    })
                    .collect();
                (units, f)
            })
            .collect();

        let mut alphabet: BTreeMap<&str, usize> = BTreeMap::new();
        for (units, f) in &words {
            for u in units {
                *alphabet.entry(u.as_str()).or_default() += f;
            }
        }
        let mut alphabet: Vec<(&str, usize)> = alphabet.into_iter().collect();
        alphabet.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let alphabet: Vec<String> = alphabet.into_iter().map(|(u, _)| u.to_string()).collect();
        for u in alphabet {
            if vocab.len() >= max_size {
                break;
            }
            vocab.insert(u);
        }

        let min_pair_freq = min_pair_freq.max(1);
        while vocab.len() < max_size {
            let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
            for (units, f) in &words {
                for w in units.windows(2) {
                    *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
                }
            }
            let best = pairs
                .into_iter()
                .filter(|&(_, c)| c >= min_pair_freq)
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), _)) = best else { break };
            let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right));
            let (left, right) = (left.to_string(), right.to_string());
            for (units, _) in &mut words {
                let mut i = 0;
                while i + 1 < units.len() {
                    if units[i] == left && units[i + 1] == right {
                        units[i] = merged.clone();
                        units.remove(i + 1);
                    }
                    i += 1;
                }
            }
            vocab.insert(merged);
        }
        vocab
    }
}

/// Greedy longest-match-first segmentation of one pre-tokenized word.
/// Returns `None` when some position has no matching vocabulary entry.
pub fn wordpiece(word: &str, vocab: &Vocabulary) -> Option<Vec<usize>> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return None;
    }
    let mut out = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let piece: String = chars[start..end].iter().collect();
            let candidate = if start > 0 {
                format!("{CONTINUATION}{piece}")
            } else {
                piece
            };
            if let Some(id) = vocab.id(&candidate) {
                found = Some(id);
                break;
            }
            end -= 1;
        }
        out.push(found?);
        start = end;
    }
    Some(out)
}

/// Token payload of a [`TokenSequence`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tokens {
    Ids(Vec<usize>),
    Words(Vec<String>),
}

/// Fixed-length token sequence. Real tokens form a prefix; `mask[i]` is true
/// exactly at real positions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Tokens,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.mask.len()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().take_while(|&&m| m).count()
    }

    pub fn validate(&self) -> Result<()> {
        let len = match &self.tokens {
            Tokens::Ids(v) => v.len(),
            Tokens::Words(v) => v.len(),
        };
        if len != self.mask.len() {
            return Err(Error::LengthMismatch {
                left: len,
                right: self.mask.len(),
            });
        }
        let n = self.real_len();
        if self.mask[n..].iter().any(|&m| m) {
            return Err(Error::Config("mask is not a contiguous prefix".into()));
        }
        Ok(())
    }

    /// Extends the padding to `max_len` positions.
    pub fn padded_to(&self, max_len: usize, pad_id: usize) -> TokenSequence {
        let mut seq = self.clone();
        let extra = max_len.saturating_sub(seq.mask.len());
        seq.mask.extend(std::iter::repeat(false).take(extra));
        match &mut seq.tokens {
            Tokens::Ids(v) => v.extend(std::iter::repeat(pad_id).take(extra)),
            Tokens::Words(v) => v.extend(std::iter::repeat(PAD.to_string()).take(extra)),
        }
        seq
    }
}

/// `[CLS] subwords [SEP]`, truncated so the sequence ends in `[SEP]`, then
/// padded to `max_len`.
pub fn tokenize_subword(text: &str, vocab: &Vocabulary, max_len: usize, casing: Casing) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let budget = max_len - 2;
    let mut ids = vec![vocab.cls_id()];
    'words: for w in pre_tokenize(text, casing) {
        let pieces = wordpiece(&w, vocab).unwrap_or_else(|| vec![vocab.unk_id()]);
        for p in pieces {
            if ids.len() - 1 == budget {
                break 'words;
            }
            ids.push(p);
        }
    }
    ids.push(vocab.sep_id());
    let real = ids.len();
    ids.resize(max_len, vocab.pad_id());
    let mask = (0..max_len).map(|i| i < real).collect();
    TokenSequence {
        tokens: Tokens::Ids(ids),
        mask,
    }
}

/// Whole-word sequence for the character path: `[CLS] words [SEP]` plus padding.
pub fn tokenize_words(text: &str, max_len: usize, casing: Casing) -> TokenSequence {
    assert!(max_len >= 2, "max_len must leave room for [CLS] and [SEP]");
    let mut words = vec![CLS.to_string()];
    words.extend(pre_tokenize(text, casing).into_iter().take(max_len - 2));
    words.push(SEP.to_string());
    let real = words.len();
    words.resize(max_len, PAD.to_string());
    TokenSequence {
        tokens: Tokens::Words(words),
        mask: (0..max_len).map(|i| i < real).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids_of(seq: &TokenSequence) -> &[usize] {
        match &seq.tokens {
            Tokens::Ids(v) => v,
            Tokens::Words(_) => panic!("expected ids"),
        }
    }

    #[test]
    fn greedy_longest_match_example() {
        let vocab = Vocabulary::from_tokens(["hope", "##ful", "un", "[UNK]"]).unwrap();
        let seq = tokenize_subword("hopeful", &vocab, 8, Casing::Uncased);
        let ids = ids_of(&seq);
        let expected = [
            vocab.cls_id(),
            vocab.id("hope").unwrap(),
            vocab.id("##ful").unwrap(),
            vocab.sep_id(),
        ];
        assert_eq!(&ids[..4], &expected);
        assert!(ids[4..].iter().all(|&i| i == vocab.pad_id()));
        assert_eq!(seq.real_len(), 4);
    }

    #[test]
    fn unknown_fragment_becomes_single_unk() {
        let vocab = Vocabulary::from_tokens(["hope", "##ful", "un"]).unwrap();
        let seq = tokenize_subword("unhopeful hope", &vocab, 8, Casing::Uncased);
        // "unhopeful" fails at "##hopeful" → whole word is [UNK]
        assert_eq!(
            &ids_of(&seq)[..4],
            &[vocab.cls_id(), vocab.unk_id(), vocab.id("hope").unwrap(), vocab.sep_id()]
        );
    }

    #[test]
    fn empty_text() {
        let vocab = Vocabulary::from_tokens(["a"]).unwrap();
        let seq = tokenize_subword("", &vocab, 128, Casing::Uncased);
        assert_eq!(seq.max_len(), 128);
        assert_eq!(seq.real_len(), 2);
        assert_eq!(&ids_of(&seq)[..2], &[vocab.cls_id(), vocab.sep_id()]);
    }

    #[test]
    fn long_input_truncates_to_max_len_ending_in_sep() {
        let vocab = Vocabulary::from_tokens(["a"]).unwrap();
        let text = vec!["a"; 300].join(" ");
        let seq = tokenize_subword(&text, &vocab, 128, Casing::Uncased);
        assert_eq!(seq.max_len(), 128);
        assert_eq!(seq.real_len(), 128);
        assert_eq!(ids_of(&seq)[127], vocab.sep_id());
    }

    #[test]
    fn casing_and_punctuation() {
        assert_eq!(pre_tokenize("Hope, ALWAYS!", Casing::Uncased), ["hope", ",", "always", "!"]);
        assert_eq!(pre_tokenize("Hope, ALWAYS!", Casing::Cased), ["Hope", ",", "ALWAYS", "!"]);
        // NFC: e + combining acute → é
        assert_eq!(normalize("e\u{301}", Casing::Cased), "\u{e9}");
    }

    #[test]
    fn induced_vocab_covers_training_words() {
        let texts = ["hopeful hope hoping", "hope is here", "hopeless hope"];
        let vocab = Vocabulary::induce(texts, Casing::Uncased, 40, 2);
        assert!(vocab.len() <= 40);
        for s in SPECIALS {
            assert!(vocab.id(s).is_some());
        }
        assert!(vocab.id("hope").is_some(), "{:?}", vocab.tokens());
        for t in texts {
            for w in pre_tokenize(t, Casing::Uncased) {
                assert!(wordpiece(&w, &vocab).is_some(), "{w}");
            }
        }
        // deterministic
        assert_eq!(vocab, Vocabulary::induce(texts, Casing::Uncased, 40, 2));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let vocab = Vocabulary::induce(["a bb ccc"], Casing::Uncased, 20, 1);
        vocab.save(&path).unwrap();
        assert_eq!(Vocabulary::load(&path).unwrap(), vocab);
    }

    #[test]
    fn padding_extension() {
        let vocab = Vocabulary::from_tokens(["a"]).unwrap();
        let seq = tokenize_subword("a a", &vocab, 6, Casing::Uncased);
        let longer = seq.padded_to(10, vocab.pad_id());
        assert_eq!(longer.max_len(), 10);
        assert_eq!(longer.real_len(), seq.real_len());
        longer.validate().unwrap();
    }
}
