//! Text normalization, vocabulary construction and fixed-length encoding.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const START: usize = 2;
pub const END: usize = 3;
/// Joins consecutive keywords into one sequence. Always present at id 4.
pub const SEP: usize = 4;

pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<unk>", "<start>", "<end>"];
pub const SEP_TOKEN: &str = "<sep>";

/// Lower-cases `text`, deletes every character that is neither an ASCII
/// letter nor whitespace, and splits on whitespace.
pub fn preprocess(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_ascii_alphabetic() || c.is_whitespace())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

/// A fixed-length id sequence; positions at or past `true_length` are PAD.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl EncodedSequence {
    /// The ids before padding.
    pub fn content(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized texts. Tokens seen fewer than
    /// `min_count` times are left out (they encode to UNK). Ids are assigned
    /// by descending count, then lexicographically.
    pub fn build(corpus: &[Vec<String>], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for tok in corpus.iter().flatten() {
            *counts.entry(tok.as_str()).or_default() += 1;
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(tok, n)| *n >= min_count && !is_reserved(tok))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(Self::from_tokens(kept.into_iter().map(|(t, _)| t.to_owned())))
    }

    fn from_tokens(body: impl IntoIterator<Item = String>) -> Self {
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.push(SEP_TOKEN.to_string());
        id_to_token.extend(body);
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Encodes `tokens` into exactly `max_len` ids. With `add_bounds` the
    /// sequence is wrapped in START/END; truncation keeps START and always
    /// ends on END.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize, add_bounds: bool) -> EncodedSequence {
        let max_len = max_len.max(1);
        let mut ids: Vec<usize> = Vec::with_capacity(max_len);
        if add_bounds {
            ids.push(START);
            let room = max_len.saturating_sub(2);
            ids.extend(tokens.iter().take(room).map(|t| self.id(t.as_ref())));
            if max_len >= 2 {
                ids.push(END);
            }
        } else {
            ids.extend(tokens.iter().take(max_len).map(|t| self.id(t.as_ref())));
        }
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        EncodedSequence { ids, true_length }
    }

    /// Encodes a keyword list as one unbounded sequence, keywords separated
    /// by [`SEP`].
    pub fn encode_keywords(&self, keywords: &[Vec<String>], max_len: usize) -> EncodedSequence {
        let mut joined: Vec<&str> = Vec::new();
        for (i, kw) in keywords.iter().enumerate() {
            if i > 0 {
                joined.push(SEP_TOKEN);
            }
            joined.extend(kw.iter().map(String::as_str));
        }
        self.encode(&joined, max_len, false)
    }

    /// Maps ids back to tokens, dropping PAD, START and END.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | START | END))
            .map(|&id| self.token(id).unwrap_or(SPECIAL_TOKENS[UNK]).to_owned())
            .collect()
    }

    /// One token per line: the four special tokens, then ids 4.. in order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.id_to_token {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < SPECIAL_TOKENS.len() + 1 {
            return Err(Error::Input("vocabulary file is missing its header".into()));
        }
        for (i, expected) in SPECIAL_TOKENS.iter().chain([&SEP_TOKEN]).enumerate() {
            if lines[i] != *expected {
                return Err(Error::Input(format!(
                    "vocabulary line {}: expected {expected}, found {:?}",
                    i + 1,
                    lines[i]
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for (i, line) in lines.iter().enumerate().skip(SPECIAL_TOKENS.len() + 1) {
            if line.is_empty() || !seen.insert(*line) || is_reserved(line) {
                return Err(Error::Input(format!("vocabulary line {}: bad token {line:?}", i + 1)));
            }
        }
        Ok(Self::from_tokens(
            lines[SPECIAL_TOKENS.len() + 1..].iter().map(|s| s.to_string()),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized vocabulary, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

fn is_reserved(token: &str) -> bool {
    SPECIAL_TOKENS.contains(&token) || token == SEP_TOKEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn preprocess_examples() {
        assert_eq!(preprocess("Macular Edema, OD-2021"), toks("macular edema od"));
        assert!(preprocess("").is_empty());
        assert_eq!(preprocess("ABC"), toks("abc"));
        assert!(preprocess("  12 -- 34 ").is_empty());
    }

    #[test]
    fn singletons_are_excluded() {
        let v = Vocabulary::build(&[toks("a a b")], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), UNK);
        assert_eq!(v.id("a"), 5);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::build(&[], 2).is_err());
    }

    #[test]
    fn ids_ordered_by_count_then_token() {
        let v = Vocabulary::build(&[toks("b b a a c c c d")], 1).unwrap();
        assert_eq!(&v.tokens()[5..], &toks("c a b d")[..]);
    }

    #[test]
    fn order_of_corpus_does_not_matter() {
        let a = vec![toks("x y y z"), toks("z z q x")];
        let b = vec![toks("q x z z"), toks("y z x y")];
        assert_eq!(Vocabulary::build(&a, 2).unwrap(), Vocabulary::build(&b, 2).unwrap());
    }

    #[test]
    fn encode_with_bounds_and_truncation() {
        let v = Vocabulary::build(&[toks("a a")], 2).unwrap();
        let a = v.id("a");
        let e = v.encode(&["a"], 4, true);
        assert_eq!(e.ids, vec![START, a, END, PAD]);
        assert_eq!(e.true_length, 3);

        let long: Vec<&str> = vec!["a"; 60];
        let e = v.encode(&long, 50, true);
        assert_eq!(e.true_length, 50);
        assert_eq!(e.ids[0], START);
        assert_eq!(e.ids[49], END);

        let e = v.encode(&long, 50, false);
        assert_eq!(e.true_length, 50);
        assert!(e.ids.iter().all(|&i| i == a));
    }

    #[test]
    fn keywords_joined_with_separator() {
        let v = Vocabulary::build(&[toks("a a b b")], 2).unwrap();
        let e = v.encode_keywords(&[toks("a"), toks("b a")], 6);
        assert_eq!(e.content(), &[v.id("a"), SEP, v.id("b"), v.id("a")]);
        assert_eq!(e.ids[4..], [PAD, PAD]);
    }

    #[test]
    fn text_format_round_trip() {
        let v = Vocabulary::build(&[toks("a a b b c c")], 2).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<unk>\n<start>\n<end>\n<sep>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("<pad>\n<unk>\n").is_err());
        assert!(Vocabulary::from_text(&format!("{text}a\n")).is_err());
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(s in "\\PC{0,40}") {
            let once = preprocess(&s);
            prop_assert_eq!(preprocess(&once.join(" ")), once);
        }

        #[test]
        fn decode_inverts_encode(words in prop::collection::vec(0usize..6, 0..8)) {
            let vocab_words = ["alpha", "beta", "gamma", "delta", "eps", "zeta"];
            let corpus: Vec<Vec<String>> = vec![vocab_words.iter().chain(vocab_words.iter()).map(|s| s.to_string()).collect()];
            let v = Vocabulary::build(&corpus, 2).unwrap();
            let tokens: Vec<String> = words.iter().map(|&i| vocab_words[i].to_string()).collect();
            let e = v.encode(&tokens, tokens.len() + 3, true);
            prop_assert_eq!(v.decode(&e.ids), tokens);
        }
    }
}
