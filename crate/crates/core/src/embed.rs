//! Tokenizer, vocabulary and the frozen word-embedding matrix.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Param};

pub const UNK: &str = "<unk>";

/// Lowercases, splits on anything that is not alphanumeric, and emits each
/// digit of a number as its own token.
///
/// ```
/// use pk_timellm::embed::tokenize;
/// assert_eq!(tokenize("3400 TEUs."), ["3", "4", "0", "0", "teus"]);
/// ```
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        match class(ch) {
            CharClass::Digit => {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
            CharClass::Letter => word.extend(ch.to_lowercase().filter(|c| class(*c) == CharClass::Letter)),
            CharClass::Sep => {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(PartialEq)]
enum CharClass {
    Digit,
    Letter,
    Sep,
}

fn class(ch: char) -> CharClass {
    if ch.is_numeric() && !ch.is_alphabetic() {
        CharClass::Digit
    } else if ch.is_alphanumeric() {
        CharClass::Letter
    } else {
        CharClass::Sep
    }
}

/// Ordered, duplicate-free token list with `<unk>` at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

/// Result of [`build_vocab`]; `degenerate` is set when the corpus held no tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VocabBuild {
    pub vocab: Vocabulary,
    pub degenerate: bool,
}

/// Collects every distinct token of the corpus, sorted after `<unk>`.
///
/// ```
/// use pk_timellm::embed::build_vocab;
/// let b = build_vocab(&["a b", "b c"]);
/// assert_eq!(b.vocab.tokens(), ["<unk>", "a", "b", "c"]);
/// ```
pub fn build_vocab<S: AsRef<str>>(corpus: &[S]) -> VocabBuild {
    let set: BTreeSet<String> = corpus.iter().flat_map(|t| tokenize(t.as_ref())).collect();
    let degenerate = set.is_empty();
    VocabBuild {
        vocab: Vocabulary::from_sorted_set(set),
        degenerate,
    }
}

impl Vocabulary {
    fn from_sorted_set(set: BTreeSet<String>) -> Self {
        let tokens: Vec<String> = std::iter::once(UNK.to_string())
            .chain(set.into_iter().filter(|t| t != UNK))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Rebuilds a vocabulary from an explicit token order (checkpoint reload).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.first().map(String::as_str) != Some(UNK) {
            return Err(Error::InvalidData(format!("vocabulary must start with {UNK}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::InvalidData(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Token id, or 0 (`<unk>`) when out of vocabulary.
    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(0)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Adds the tokens of `words` and re-sorts.
    pub fn with_words<S: AsRef<str>>(&self, words: &[S]) -> Self {
        let mut set: BTreeSet<String> = self.tokens[1..].iter().cloned().collect();
        set.extend(words.iter().flat_map(|w| tokenize(w.as_ref())));
        Vocabulary::from_sorted_set(set)
    }

    /// Pads with letters-only filler tokens until the size reaches `size`.
    pub fn padded_to(&self, size: usize) -> Self {
        let mut set: BTreeSet<String> = self.tokens[1..].iter().cloned().collect();
        let mut i = 0usize;
        while set.len() + 1 < size {
            set.insert(filler_token(i));
            i += 1;
        }
        Vocabulary::from_sorted_set(set)
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_tokens(s.lines().map(str::to_string).collect())
    }
}

fn filler_token(mut i: usize) -> String {
    let mut s = String::from("zq");
    loop {
        s.push((b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    s
}

/// Frozen `V × D` word-embedding matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    e: Param,
}

impl EmbeddingMatrix {
    /// Gaussian entries with std `1/√D` from `seed`.
    pub fn random(vocab_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if vocab_size < 2 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "embedding needs V ≥ 2 and D ≥ 1, got V={vocab_size}, D={dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::random_normal(vocab_size, dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        Ok(EmbeddingMatrix { e: Param::frozen(m) })
    }

    pub fn from_matrix(m: Matrix) -> Result<Self> {
        m.ensure_finite("embedding matrix")?;
        Ok(EmbeddingMatrix { e: Param::frozen(m) })
    }

    pub fn matrix(&self) -> &Matrix {
        self.e.value()
    }

    pub fn param(&self) -> &Param {
        &self.e
    }

    pub(crate) fn param_mut(&mut self) -> &mut Param {
        &mut self.e
    }

    pub fn vocab_size(&self) -> usize {
        self.e.value().rows()
    }

    pub fn dim(&self) -> usize {
        self.e.value().cols()
    }
}

/// Looks up one embedding row per token (OOV maps to `<unk>`).
pub fn embed_prompt<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary, e: &EmbeddingMatrix) -> Result<Matrix> {
    if vocab.len() != e.vocab_size() {
        return Err(Error::ShapeMismatch {
            op: "embed_prompt",
            left: (vocab.len(), 1),
            right: e.matrix().shape(),
        });
    }
    let d = e.dim();
    let mut out = Vec::with_capacity(tokens.len() * d);
    for t in tokens {
        out.extend_from_slice(e.matrix().row(vocab.id_or_unk(t.as_ref())));
    }
    Matrix::from_vec(tokens.len(), d, out)
}

/// Count of tokens that fall back to `<unk>`.
pub fn count_oov<S: AsRef<str>>(tokens: &[S], vocab: &Vocabulary) -> usize {
    tokens.iter().filter(|t| !vocab.contains(t.as_ref())).count()
}

/// Word lists used for prototype-activation reports and always added to
/// the vocabulary so the reports can resolve them.
pub mod lexicon {
    pub const RANDOM_WORDS: &[&str] = &[
        "apple", "guitar", "mountain", "pencil", "river", "blanket", "violin", "garden", "tiger", "candle",
        "painting", "window", "bicycle", "coffee", "poetry", "forest",
    ];

    pub const DOMAIN_WORDS: &[&str] = &[
        "berth", "container", "loading", "unloading", "vessel", "terminal", "port", "gate", "truck", "cargo",
        "holiday", "weekend", "schedule", "arrival", "throughput", "precipitation",
    ];

    pub const TS_WORDS: &[&str] = &[
        "timestamp", "trend", "forecasting", "seasonal", "lag", "series", "period", "history", "step", "input",
        "median", "upward", "downward", "daily", "horizon", "statistics",
    ];

    pub fn word_sets() -> [(&'static str, &'static [&'static str]); 3] {
        [("random", RANDOM_WORDS), ("domain", DOMAIN_WORDS), ("ts", TS_WORDS)]
    }

    pub fn all_words() -> Vec<&'static str> {
        RANDOM_WORDS.iter().chain(DOMAIN_WORDS).chain(TS_WORDS).copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_rules() {
        assert_eq!(tokenize("Busan Port, 2022"), ["busan", "port", "2", "0", "2", "2"]);
        assert_eq!(tokenize("3400 TEUs."), ["3", "4", "0", "0", "teus"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("5.0 °C, 3.2 m/s"), ["5", "0", "c", "3", "2", "m", "s"]);
        assert_eq!(tokenize("abc12x"), ["abc", "1", "2", "x"]);
    }

    #[test]
    fn vocab_enumeration_and_degenerate() {
        let b = build_vocab(&["a b", "b c"]);
        assert!(!b.degenerate);
        assert_eq!(b.vocab.tokens(), ["<unk>", "a", "b", "c"]);
        let b = build_vocab(&["", "  ,"]);
        assert!(b.degenerate);
        assert_eq!(b.vocab.tokens(), ["<unk>"]);
    }

    #[test]
    fn vocab_padding_and_merge() {
        let v = build_vocab(&["a b"]).vocab.with_words(&["zeta"]).padded_to(40);
        assert_eq!(v.len(), 40);
        assert_eq!(v.tokens()[0], UNK);
        assert!(v.contains("zeta") && v.contains("a"));
        let mut sorted = v.tokens()[1..].to_vec();
        sorted.sort();
        assert_eq!(sorted, v.tokens()[1..]);
        for t in v.tokens()[1..].iter() {
            assert_eq!(tokenize(t), [t.as_str()]);
        }
        assert_eq!(v.padded_to(3), v);
    }

    #[test]
    fn vocab_text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&["x y z"]).vocab;
        let p = dir.path().join("vocab.txt");
        v.write_text(&p).unwrap();
        assert_eq!(Vocabulary::read_text(&p).unwrap(), v);
        assert!(Vocabulary::from_tokens(vec!["a".into()]).is_err());
        assert!(Vocabulary::from_tokens(vec![UNK.into(), "a".into(), "a".into()]).is_err());
    }

    #[test]
    fn embed_lookup_oov_and_empty() {
        let v = build_vocab(&["a b"]).vocab;
        let e = EmbeddingMatrix::random(v.len(), 4, 9).unwrap();
        let m = embed_prompt(&["a", "b", "nope"], &v, &e).unwrap();
        assert_eq!(m.row(0), e.matrix().row(1));
        assert_eq!(m.row(1), e.matrix().row(2));
        assert_eq!(m.row(2), e.matrix().row(0));
        let empty: [&str; 0] = [];
        assert_eq!(embed_prompt(&empty, &v, &e).unwrap().shape(), (0, 4));
        assert!(e.param().is_frozen());
        assert_eq!(count_oov(&["a", "nope"], &v), 1);
    }

    #[test]
    fn embedding_is_seeded() {
        let a = EmbeddingMatrix::random(10, 8, 3).unwrap();
        let b = EmbeddingMatrix::random(10, 8, 3).unwrap();
        assert_eq!(a, b);
        let var = a.matrix().sum_squares() / 80.0;
        assert!(var > 0.02 && var < 0.3, "{var}");
    }

    proptest! {
        #[test]
        fn tokenize_join_idempotent(s in "\\PC{0,60}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn embed_rows_match_token_count(words in prop::collection::vec("[a-e]{1,3}|[0-9]", 0..40)) {
            let v = build_vocab(&["a b c d e"]).vocab;
            let e = EmbeddingMatrix::random(v.len(), 3, 1).unwrap();
            let text = words.join(" ");
            let toks = tokenize(&text);
            let m = embed_prompt(&toks, &v, &e).unwrap();
            prop_assert_eq!(m.rows(), toks.len());
        }
    }
}
