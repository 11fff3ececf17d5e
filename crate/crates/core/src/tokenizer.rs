//! Corpus-built subword vocabulary and greedy longest-match (WordPiece-style)
//! encoding into fixed-length id sequences.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const N_SPECIALS: usize = 5;

pub const SPECIAL_TOKENS: [&str; N_SPECIALS] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

const CONTINUATION: &str = "##";
const MAX_NGRAM: usize = 6;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("invalid vocabulary parameters: {0}")]
    InvalidParams(String),
    #[error("id {0} is not in the vocabulary")]
    UnknownId(usize),
    #[error("vocabulary file line {line}: {reason}")]
    BadVocabFile { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    id_of: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let id_of = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, id_of }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn contains(&self, token: &str) -> bool {
        self.id_of.contains_key(token)
    }

    /// One token per line; the line number (from 0) is the id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(special) {
                return Err(TokenizerError::BadVocabFile {
                    line: i + 1,
                    reason: format!("expected special token {special}"),
                });
            }
        }
        let mut seen = BTreeSet::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::BadVocabFile { line: i + 1, reason: "empty or whitespace token".into() });
            }
            if !seen.insert(t.as_str()) {
                return Err(TokenizerError::BadVocabFile { line: i + 1, reason: format!("duplicate token {t:?}") });
            }
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Builds a vocabulary from normalized text.
///
/// Layout: the five specials, then every observed character both as a
/// word-initial piece and (when it occurs word-internally) as a `##`
/// continuation, then whole words ranked by (frequency desc, text asc), then
/// word-internal character n-grams as `##` continuations ranked the same way.
/// `target_size` budgets the specials, words and n-grams; the character
/// inventory comes on top so that every observed word stays segmentable.
pub fn build_vocab<S: AsRef<str>>(
    corpus: &[S],
    target_size: usize,
    min_freq: usize,
) -> Result<Vocabulary, TokenizerError> {
    if target_size < N_SPECIALS + 1 {
        return Err(TokenizerError::InvalidParams(format!("target_size must be >= 6, got {target_size}")));
    }
    if min_freq < 1 {
        return Err(TokenizerError::InvalidParams("min_freq must be >= 1".into()));
    }

    let mut word_freq: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for w in text.as_ref().split_whitespace() {
            *word_freq.entry(w).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }

    let mut initial_chars = BTreeSet::new();
    let mut inner_chars = BTreeSet::new();
    let mut ngram_freq: HashMap<String, usize> = HashMap::new();
    for (&w, &f) in &word_freq {
        let chars: Vec<char> = w.chars().collect();
        initial_chars.insert(chars[0]);
        inner_chars.extend(chars[1..].iter().copied());
        for start in 1..chars.len() {
            for len in 2..=MAX_NGRAM.min(chars.len() - start) {
                let gram: String = chars[start..start + len].iter().collect();
                *ngram_freq.entry(gram).or_default() += f;
            }
        }
    }
    initial_chars.extend(inner_chars.iter().copied());

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut present: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut push = |t: String, tokens: &mut Vec<String>| {
        if present.insert(t.clone()) {
            tokens.push(t);
        }
    };
    for c in &initial_chars {
        push(c.to_string(), &mut tokens);
    }
    for c in &inner_chars {
        push(format!("{CONTINUATION}{c}"), &mut tokens);
    }
    let n_char_entries = tokens.len() - N_SPECIALS;
    let budget = target_size + n_char_entries;

    let mut words: Vec<(&str, usize)> = word_freq
        .iter()
        .filter(|&(w, &f)| f >= min_freq && !w.starts_with(CONTINUATION) && w.chars().count() > 1)
        .map(|(&w, &f)| (w, f))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    for (w, _) in words {
        if tokens.len() >= budget {
            break;
        }
        push(w.to_string(), &mut tokens);
    }

    let mut grams: Vec<(String, usize)> = ngram_freq.into_iter().filter(|&(_, f)| f >= min_freq).collect();
    grams.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    for (g, _) in grams {
        if tokens.len() >= budget {
            break;
        }
        push(format!("{CONTINUATION}{g}"), &mut tokens);
    }

    Ok(Vocabulary::from_tokens(tokens))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions (CLS and SEP included).
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// The ids of the real positions.
    pub fn real_ids(&self) -> &[usize] {
        &self.ids[..self.real_len()]
    }
}

/// Greedy longest-match segmentation of a single word. A position where no
/// piece matches turns the remainder of the word into one UNK.
pub fn segment_word(word: &str, vocab: &Vocabulary, out: &mut Vec<usize>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    let mut piece = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION);
            }
            piece.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(UNK);
                return;
            }
        }
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> TokenSequence {
    assert!(max_len >= 3, "max_len must be at least 3");
    let mut pieces = Vec::new();
    for word in text.split_whitespace() {
        segment_word(word, vocab, &mut pieces);
        if pieces.len() >= max_len - 2 {
            break;
        }
    }
    pieces.truncate(max_len - 2);

    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend(pieces);
    ids.push(SEP);
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mut attention_mask = vec![1u8; real];
    attention_mask.resize(max_len, 0);
    TokenSequence { ids, attention_mask }
}

pub fn decode(ids: &[usize], vocab: &Vocabulary) -> Result<String, TokenizerError> {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).ok_or(TokenizerError::UnknownId(id))?;
        if id < N_SPECIALS {
            continue;
        }
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) => out.push_str(rest),
            None => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    Ok(out)
}
