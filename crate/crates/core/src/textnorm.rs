//! Tweet text normalization: lowercasing, accent stripping, mention and
//! hashtag removal, collapsing of elongated characters and whitespace cleanup.

use unicode_normalization::char::is_combining_mark;
use unicode_normalization::UnicodeNormalization;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormConfig {
    /// Runs of one character at least this long collapse to a single
    /// character. `usize::MAX` disables collapsing.
    pub collapse_min_run: usize,
    pub remove_mentions: bool,
    pub remove_hashtags: bool,
    pub strip_marks: bool,
}

impl Default for NormConfig {
    fn default() -> Self {
        NormConfig { collapse_min_run: 3, remove_mentions: true, remove_hashtags: true, strip_marks: true }
    }
}

impl NormConfig {
    /// Every rule disabled except lowercasing and whitespace cleanup.
    pub fn disabled() -> Self {
        NormConfig {
            collapse_min_run: usize::MAX,
            remove_mentions: false,
            remove_hashtags: false,
            strip_marks: false,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.collapse_min_run < 2 {
            return Err(format!("collapse_min_run must be >= 2, got {}", self.collapse_min_run));
        }
        Ok(())
    }
}

/// Removes every combining mark after canonical decomposition, then recomposes.
pub fn strip_accents(text: &str) -> String {
    text.nfd().filter(|&c| !is_combining_mark(c)).nfc().collect()
}

/// Replaces every maximal run of one code point of length `>= min_run`
/// with a single occurrence.
pub fn collapse_repeats(text: &str, min_run: usize) -> String {
    assert!(min_run >= 2, "min_run must be at least 2");
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars().peekable();
    while let Some(c) = chars.next() {
        let mut run = 1;
        while chars.peek() == Some(&c) {
            chars.next();
            run += 1;
        }
        let keep = if run >= min_run { 1 } else { run };
        out.extend(std::iter::repeat_n(c, keep));
    }
    out
}

pub fn normalize(raw: &str, config: &NormConfig) -> String {
    let mut text = raw.to_lowercase();
    if config.strip_marks {
        text = strip_accents(&text);
    }
    let kept: Vec<&str> = text
        .split_whitespace()
        .filter(|tok| {
            !(config.remove_mentions && tok.starts_with('@') || config.remove_hashtags && tok.starts_with('#'))
        })
        .collect();
    let mut text = kept.join(" ");
    if config.collapse_min_run != usize::MAX {
        text = collapse_repeats(&text, config.collapse_min_run);
    }
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Hand-written decomposition table for the characters used below.
    fn table_strip(c: char) -> char {
        match c {
            'á' | 'à' | 'ä' | 'â' => 'a',
            'é' | 'è' | 'ë' | 'ê' => 'e',
            'í' | 'ì' | 'ï' => 'i',
            'ó' | 'ò' | 'ö' => 'o',
            'ú' | 'ù' | 'ü' => 'u',
            'ñ' => 'n',
            'ç' => 'c',
            other => other,
        }
    }

    #[test]
    fn strip_accents_examples() {
        assert_eq!(strip_accents("café"), "cafe");
        assert_eq!(strip_accents("abc"), "abc");
        assert_eq!(strip_accents("año"), "ano");
        // already-decomposed input
        assert_eq!(strip_accents("cafe\u{301}"), "cafe");
    }

    #[test]
    fn strip_accents_matches_table() {
        let s = "áàäâéèëêíìïóòöúùüñç pingüino";
        let expected: String = s.chars().map(table_strip).collect();
        assert_eq!(strip_accents(s), expected);
        assert!(strip_accents(s).chars().count() <= s.chars().count());
    }

    #[test]
    fn collapse_examples() {
        assert_eq!(collapse_repeats("holaaa", 3), "hola");
        assert_eq!(collapse_repeats("llama", 3), "llama");
        assert_eq!(collapse_repeats("", 3), "");
        assert_eq!(collapse_repeats("llama", 2), "lama");
        assert_eq!(collapse_repeats("aabbbcccc", 3), "aabc");
    }

    #[test]
    fn normalize_examples() {
        let cfg = NormConfig::default();
        assert_eq!(normalize("Qué GRANDEEE @juan #wow", &cfg), "que grande");
        assert_eq!(normalize("Hoy estoy feliiiizzz", &cfg), "hoy estoy feliz");
        assert_eq!(normalize("ok", &cfg), "ok");
        assert_eq!(normalize("  a \t b  ", &cfg), "a b");
        assert_eq!(normalize("@only #tags", &cfg), "");
    }

    #[test]
    fn disabled_config_is_lowercase_only() {
        let cfg = NormConfig::disabled();
        assert_eq!(normalize("Qué GRANDEEE @juan #wow", &cfg), "qué grandeee @juan #wow");
    }

    #[test]
    fn config_validation() {
        assert!(NormConfig::default().validate().is_ok());
        assert!(NormConfig { collapse_min_run: 1, ..NormConfig::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "[a-zA-ZáéíóúñÑ@# \t]{0,40}", run in 2usize..5) {
            let cfg = NormConfig { collapse_min_run: run, ..NormConfig::default() };
            let once = normalize(&s, &cfg);
            prop_assert_eq!(normalize(&once, &cfg), once.clone());
            prop_assert!(!once.contains("  "));
            prop_assert!(!once.chars().any(|c| c.is_uppercase()));
            prop_assert!(once.split(' ').all(|t| !t.starts_with('@') && !t.starts_with('#')));
        }

        #[test]
        fn collapse_is_idempotent(s in "[ab ]{0,30}", run in 2usize..5) {
            let once = collapse_repeats(&s, run);
            prop_assert_eq!(collapse_repeats(&once, run), once);
        }
    }
}
