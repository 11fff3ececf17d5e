//! SentiMix-style tweet corpora: the line-oriented CoNLL dialect used by the
//! shared task, plus a seeded generator of synthetic code-mixed tweets.
//!
//! A record is a header line `meta<TAB>uid[<TAB>sentiment]` followed by one
//! `surface<TAB>tag` line per token and terminated by a blank line. The final
//! record may omit the terminating blank line.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorpusError {
    #[error("line {line}: malformed meta line (expected `meta<TAB>uid[<TAB>sentiment]`)")]
    MalformedMeta { line: usize },
    #[error("line {line}: malformed token line (expected exactly two tab-separated fields)")]
    MalformedTokenLine { line: usize },
    #[error("line {line}: unknown sentiment label {value:?}")]
    UnknownSentiment { line: usize, value: String },
    #[error("line {line}: tweet {uid:?} has no tokens")]
    EmptyTweet { line: usize, uid: String },
    #[error("line {line}: duplicate uid {uid:?}")]
    DuplicateUid { line: usize, uid: String },
    #[error("line {line}: input is not valid UTF-8")]
    InvalidUtf8 { line: usize },
    #[error("synthetic corpus configuration has an empty lexicon: {0}")]
    EmptyLexicon(&'static str),
    #[error("noise rate {name} = {value} is outside [0, 1]")]
    InvalidRate { name: &'static str, value: f64 },
}

/// Per-token language tag. `lang1`/`lang2` are accepted as aliases for
/// `en`/`spa` when parsing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LangTag {
    En,
    Spa,
    Hi,
    Mixed,
    Univ,
    Other(String),
}

impl LangTag {
    pub fn parse(s: &str) -> Self {
        match s {
            "en" | "lang1" => LangTag::En,
            "spa" | "lang2" => LangTag::Spa,
            "hi" => LangTag::Hi,
            "mixed" => LangTag::Mixed,
            "univ" => LangTag::Univ,
            other => LangTag::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            LangTag::En => "en",
            LangTag::Spa => "spa",
            LangTag::Hi => "hi",
            LangTag::Mixed => "mixed",
            LangTag::Univ => "univ",
            LangTag::Other(s) => s,
        }
    }
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tweet polarity. The derived ordering (positive < negative < neutral) is
/// the fixed class order used for logits, confusion matrices and tie-breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Sentiment {
    Positive,
    Negative,
    Neutral,
}

impl Sentiment {
    pub const ALL: [Sentiment; 3] = [Sentiment::Positive, Sentiment::Negative, Sentiment::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sentiment::Positive => "positive",
            Sentiment::Negative => "negative",
            Sentiment::Neutral => "neutral",
        }
    }
}

impl fmt::Display for Sentiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Sentiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive" => Ok(Sentiment::Positive),
            "negative" => Ok(Sentiment::Negative),
            "neutral" => Ok(Sentiment::Neutral),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Token {
    pub surface: String,
    pub tag: LangTag,
}

impl Token {
    pub fn new(surface: impl Into<String>, tag: LangTag) -> Self {
        Token { surface: surface.into(), tag }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tweet {
    pub uid: String,
    pub tokens: Vec<Token>,
    pub label: Option<Sentiment>,
}

impl Tweet {
    /// Surface forms joined by single spaces; the input to text normalization.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for (i, tok) in self.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&tok.surface);
        }
        out
    }
}

/// An ordered, uid-unique collection of tweets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    tweets: Vec<Tweet>,
}

impl Dataset {
    pub fn new(tweets: Vec<Tweet>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, t) in tweets.iter().enumerate() {
            if !seen.insert(t.uid.as_str()) {
                return Err(CorpusError::DuplicateUid { line: i + 1, uid: t.uid.clone() });
            }
        }
        Ok(Dataset { tweets })
    }

    pub fn tweets(&self) -> &[Tweet] {
        &self.tweets
    }

    pub fn into_tweets(self) -> Vec<Tweet> {
        self.tweets
    }

    pub fn len(&self) -> usize {
        self.tweets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tweets.is_empty()
    }

    /// True iff every tweet carries a label (vacuously true when empty).
    pub fn labeled(&self) -> bool {
        self.tweets.iter().all(|t| t.label.is_some())
    }

    /// Label counts in `Sentiment` order.
    pub fn label_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for t in &self.tweets {
            if let Some(l) = t.label {
                counts[l.index()] += 1;
            }
        }
        counts
    }

    /// Parses a corpus, rejecting duplicate uids.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        Ok(Dataset { tweets: parse_conllu(text)? })
    }

    pub fn serialize(&self) -> String {
        serialize_conllu(&self.tweets)
    }

    /// Splits into two datasets: the first `n` tweets and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.tweets.len());
        (
            Dataset { tweets: self.tweets[..n].to_vec() },
            Dataset { tweets: self.tweets[n..].to_vec() },
        )
    }

    /// Copy of this dataset with every label removed.
    pub fn without_labels(&self) -> Dataset {
        Dataset {
            tweets: self
                .tweets
                .iter()
                .map(|t| Tweet { label: None, ..t.clone() })
                .collect(),
        }
    }
}

/// Parses raw bytes; invalid UTF-8 is reported with the line it occurs on.
pub fn parse_conllu_bytes(bytes: &[u8]) -> Result<Vec<Tweet>, CorpusError> {
    match std::str::from_utf8(bytes) {
        Ok(text) => parse_conllu(text),
        Err(e) => {
            let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
            Err(CorpusError::InvalidUtf8 { line })
        }
    }
}

pub fn parse_conllu(text: &str) -> Result<Vec<Tweet>, CorpusError> {
    let mut tweets = Vec::new();
    let mut seen = HashSet::new();
    // (tweet under construction, line number of its meta line)
    let mut current: Option<(Tweet, usize)> = None;

    for (idx, raw) in text.split('\n').enumerate() {
        let line_no = idx + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);

        if line.is_empty() {
            if let Some((tweet, meta_line)) = current.take() {
                finish(tweet, meta_line, &mut seen, &mut tweets)?;
            }
            continue;
        }

        match current.as_mut() {
            None => {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields[0] != "meta" || fields.len() < 2 || fields.len() > 3 || fields[1].is_empty() {
                    return Err(CorpusError::MalformedMeta { line: line_no });
                }
                let label = match fields.get(2) {
                    None => None,
                    Some(s) => Some(s.parse::<Sentiment>().map_err(|value| {
                        CorpusError::UnknownSentiment { line: line_no, value }
                    })?),
                };
                let tweet = Tweet { uid: fields[1].to_string(), tokens: Vec::new(), label };
                current = Some((tweet, line_no));
            }
            Some((tweet, _)) => {
                let mut fields = line.split('\t');
                let (surface, tag) = match (fields.next(), fields.next(), fields.next()) {
                    (Some(s), Some(t), None) if !s.is_empty() && !t.is_empty() => (s, t),
                    _ => return Err(CorpusError::MalformedTokenLine { line: line_no }),
                };
                tweet.tokens.push(Token::new(surface, LangTag::parse(tag)));
            }
        }
    }
    if let Some((tweet, meta_line)) = current.take() {
        finish(tweet, meta_line, &mut seen, &mut tweets)?;
    }
    Ok(tweets)
}

fn finish(
    tweet: Tweet,
    meta_line: usize,
    seen: &mut HashSet<String>,
    out: &mut Vec<Tweet>,
) -> Result<(), CorpusError> {
    if tweet.tokens.is_empty() {
        return Err(CorpusError::EmptyTweet { line: meta_line, uid: tweet.uid });
    }
    if !seen.insert(tweet.uid.clone()) {
        return Err(CorpusError::DuplicateUid { line: meta_line, uid: tweet.uid });
    }
    out.push(tweet);
    Ok(())
}

pub fn serialize_conllu(tweets: &[Tweet]) -> String {
    let mut out = String::new();
    for t in tweets {
        out.push_str("meta\t");
        out.push_str(&t.uid);
        if let Some(label) = t.label {
            out.push('\t');
            out.push_str(label.as_str());
        }
        out.push('\n');
        for tok in &t.tokens {
            out.push_str(&tok.surface);
            out.push('\t');
            out.push_str(tok.tag.as_str());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// A word and the language it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct LexEntry {
    pub word: String,
    pub tag: LangTag,
}

fn entries(words: &[&str], tag: LangTag) -> Vec<LexEntry> {
    words.iter().map(|w| LexEntry { word: w.to_string(), tag: tag.clone() }).collect()
}

/// Rates are per tweet for mentions and hashtags and per word for the
/// character-level noise.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRates {
    pub elongation: f64,
    pub uppercase: f64,
    pub accent: f64,
    pub mention: f64,
    pub hashtag: f64,
}

impl NoiseRates {
    pub fn none() -> Self {
        NoiseRates { elongation: 0.0, uppercase: 0.0, accent: 0.0, mention: 0.0, hashtag: 0.0 }
    }

    fn check(&self) -> Result<(), CorpusError> {
        for (name, value) in [
            ("elongation", self.elongation),
            ("uppercase", self.uppercase),
            ("accent", self.accent),
            ("mention", self.mention),
            ("hashtag", self.hashtag),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(CorpusError::InvalidRate { name, value });
            }
        }
        Ok(())
    }
}

impl Default for NoiseRates {
    fn default() -> Self {
        NoiseRates { elongation: 0.25, uppercase: 0.2, accent: 0.2, mention: 0.5, hashtag: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub noise: NoiseRates,
    pub positive_cues: Vec<LexEntry>,
    pub negative_cues: Vec<LexEntry>,
    pub fillers: Vec<LexEntry>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let mut positive_cues = entries(
            &["good", "great", "love", "happy", "awesome", "best", "nice", "amazing", "beautiful", "cool"],
            LangTag::En,
        );
        positive_cues.extend(entries(
            &["bueno", "feliz", "genial", "excelente", "amor", "bonito", "mejor", "increíble", "alegre", "chido"],
            LangTag::Spa,
        ));
        let mut negative_cues = entries(
            &["bad", "hate", "sad", "awful", "worst", "terrible", "ugly", "angry", "boring", "sucks"],
            LangTag::En,
        );
        negative_cues.extend(entries(
            &["malo", "triste", "odio", "horrible", "peor", "feo", "enojado", "asco", "aburrido", "fatal"],
            LangTag::Spa,
        ));
        let mut fillers = entries(
            &[
                "the", "today", "going", "to", "with", "my", "friends", "house", "work", "tomorrow", "this",
                "is", "and", "game", "movie", "song", "weekend", "school", "night", "people", "just", "so",
            ],
            LangTag::En,
        );
        fillers.extend(entries(
            &[
                "el", "la", "casa", "hoy", "voy", "con", "amigos", "trabajo", "mañana", "que", "de", "en",
                "y", "esta", "película", "canción", "fin", "semana", "escuela", "noche", "gente", "muy",
            ],
            LangTag::Spa,
        ));
        SynthConfig {
            n_per_class: 100,
            min_fillers: 3,
            max_fillers: 8,
            noise: NoiseRates::default(),
            positive_cues,
            negative_cues,
            fillers,
        }
    }
}

/// Generates a balanced, shuffled synthetic corpus.
///
/// Each tweet's label is the majority polarity of the cue words injected
/// into it; neutral tweets receive no cue words. Hashtags are built from
/// arbitrary lexicon words (cues of either polarity included) and therefore
/// carry no label information.
pub fn generate_synthetic(config: &SynthConfig, seed: u64) -> Result<Dataset, CorpusError> {
    if config.positive_cues.is_empty() {
        return Err(CorpusError::EmptyLexicon("positive_cues"));
    }
    if config.negative_cues.is_empty() {
        return Err(CorpusError::EmptyLexicon("negative_cues"));
    }
    if config.fillers.is_empty() {
        return Err(CorpusError::EmptyLexicon("fillers"));
    }
    config.noise.check()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(3 * config.n_per_class);
    for s in Sentiment::ALL {
        labels.extend(std::iter::repeat_n(s, config.n_per_class));
    }
    labels.shuffle(&mut rng);

    let tweets = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| synth_tweet(config, label, i + 1, &mut rng))
        .collect();
    Ok(Dataset { tweets })
}

fn synth_tweet(config: &SynthConfig, label: Sentiment, uid: usize, rng: &mut ChaCha8Rng) -> Tweet {
    let (majority, minority) = match label {
        Sentiment::Positive => (&config.positive_cues, &config.negative_cues),
        Sentiment::Negative => (&config.negative_cues, &config.positive_cues),
        Sentiment::Neutral => (&config.positive_cues, &config.negative_cues),
    };
    let mut words: Vec<LexEntry> = Vec::new();
    if label != Sentiment::Neutral {
        // 1 or 2 majority cues; a minority cue only when it stays a strict minority.
        let n_major = rng.gen_range(1..=2);
        let n_minor = if n_major == 2 && rng.gen_bool(0.5) { 1 } else { 0 };
        for _ in 0..n_major {
            words.push(majority.choose(rng).unwrap().clone());
        }
        for _ in 0..n_minor {
            words.push(minority.choose(rng).unwrap().clone());
        }
    }
    let lo = config.min_fillers.min(config.max_fillers);
    let n_fill = rng.gen_range(lo..=config.max_fillers.max(lo));
    for _ in 0..n_fill {
        words.push(config.fillers.choose(rng).unwrap().clone());
    }
    words.shuffle(rng);

    let noise = &config.noise;
    let mut tokens: Vec<Token> = words
        .into_iter()
        .map(|e| Token::new(add_word_noise(&e.word, noise, rng), e.tag))
        .collect();

    if rng.gen_bool(noise.mention) {
        let handle = config.fillers.choose(rng).unwrap();
        let surface = format!("@{}{}", handle.word, rng.gen_range(0..100));
        let pos = rng.gen_range(0..=tokens.len());
        tokens.insert(pos, Token::new(surface, LangTag::Univ));
    }
    if rng.gen_bool(noise.hashtag) {
        let pool = [&config.positive_cues, &config.negative_cues, &config.fillers];
        let lex = pool.choose(rng).unwrap();
        let word = &lex.choose(rng).unwrap().word;
        let pos = rng.gen_range(0..=tokens.len());
        tokens.insert(pos, Token::new(format!("#{word}"), LangTag::Univ));
    }

    Tweet { uid: uid.to_string(), tokens, label: Some(label) }
}

fn accented(c: char) -> Option<char> {
    Some(match c {
        'a' => 'á',
        'e' => 'é',
        'i' => 'í',
        'o' => 'ó',
        'u' => 'ú',
        _ => return None,
    })
}

fn add_word_noise(word: &str, noise: &NoiseRates, rng: &mut ChaCha8Rng) -> String {
    let mut chars: Vec<char> = word.chars().collect();
    if rng.gen_bool(noise.accent) {
        let vowels: Vec<usize> = (0..chars.len()).filter(|&i| accented(chars[i]).is_some()).collect();
        if let Some(&i) = vowels.choose(rng) {
            chars[i] = accented(chars[i]).unwrap();
        }
    }
    if rng.gen_bool(noise.elongation) {
        let i = rng.gen_range(0..chars.len());
        let extra = rng.gen_range(2..=4);
        let c = chars[i];
        for _ in 0..extra {
            chars.insert(i, c);
        }
    }
    let s: String = chars.into_iter().collect();
    if rng.gen_bool(noise.uppercase) {
        s.to_uppercase()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_labeled_record() {
        let t = parse_conllu("meta\t1\tpositive\nhola\tspa\nfriend\ten\n\n").unwrap();
        assert_eq!(
            t,
            vec![Tweet {
                uid: "1".into(),
                tokens: vec![Token::new("hola", LangTag::Spa), Token::new("friend", LangTag::En)],
                label: Some(Sentiment::Positive),
            }]
        );
    }

    #[test]
    fn empty_input_is_empty_corpus() {
        assert!(parse_conllu("").unwrap().is_empty());
        assert!(parse_conllu("\n\n").unwrap().is_empty());
    }

    #[test]
    fn unlabeled_record_without_trailing_blank() {
        let t = parse_conllu("meta\t7\nbien\tspa\n").unwrap();
        assert_eq!(t[0].uid, "7");
        assert_eq!(t[0].label, None);
        assert_eq!(t[0].tokens, vec![Token::new("bien", LangTag::Spa)]);
        assert_eq!(parse_conllu("meta\t7\nbien\tspa").unwrap(), t);
    }

    #[test]
    fn token_line_field_count() {
        assert_eq!(
            parse_conllu("meta\t1\tpositive\nhola\n\n"),
            Err(CorpusError::MalformedTokenLine { line: 2 })
        );
        assert_eq!(
            parse_conllu("meta\t1\nhola\tspa\textra\n"),
            Err(CorpusError::MalformedTokenLine { line: 2 })
        );
    }

    #[test]
    fn meta_errors() {
        assert_eq!(parse_conllu("meta\n"), Err(CorpusError::MalformedMeta { line: 1 }));
        assert_eq!(parse_conllu("hola\tspa\n"), Err(CorpusError::MalformedMeta { line: 1 }));
        assert_eq!(
            parse_conllu("meta\t1\thappy\nx\ten\n"),
            Err(CorpusError::UnknownSentiment { line: 1, value: "happy".into() })
        );
        assert_eq!(
            parse_conllu("meta\t1\n\n"),
            Err(CorpusError::EmptyTweet { line: 1, uid: "1".into() })
        );
    }

    #[test]
    fn duplicate_uid_rejected() {
        let err = parse_conllu("meta\t1\na\ten\n\nmeta\t1\nb\ten\n").unwrap_err();
        assert_eq!(err, CorpusError::DuplicateUid { line: 4, uid: "1".into() });
    }

    #[test]
    fn tag_aliases_and_other() {
        assert_eq!(LangTag::parse("lang1"), LangTag::En);
        assert_eq!(LangTag::parse("lang2"), LangTag::Spa);
        for tag in ["en", "spa", "hi", "mixed", "univ"] {
            assert_eq!(LangTag::parse(tag).as_str(), tag);
        }
        assert_eq!(LangTag::parse("fw"), LangTag::Other("fw".into()));
    }

    #[test]
    fn serialize_examples() {
        assert_eq!(serialize_conllu(&[]), "");
        let text = "meta\t1\tpositive\nhola\tspa\nfriend\ten\n\n";
        assert_eq!(serialize_conllu(&parse_conllu(text).unwrap()), text);
        let t = Tweet { uid: "9".into(), tokens: vec![Token::new("x", LangTag::Other("fw".into()))], label: None };
        assert_eq!(serialize_conllu(&[t]), "meta\t9\nx\tfw\n\n");
    }

    #[test]
    fn crlf_is_tolerated() {
        let t = parse_conllu("meta\t1\tneutral\r\nok\ten\r\n\r\n").unwrap();
        assert_eq!(t[0].tokens[0].surface, "ok");
        assert_eq!(t[0].tokens[0].tag, LangTag::En);
    }

    #[test]
    fn invalid_utf8_reports_line() {
        let bytes = b"meta\t1\nok\ten\n\xff\ten\n";
        assert_eq!(parse_conllu_bytes(bytes), Err(CorpusError::InvalidUtf8 { line: 3 }));
    }

    #[test]
    fn synthetic_zero_and_determinism() {
        let cfg = SynthConfig { n_per_class: 0, ..SynthConfig::default() };
        assert!(generate_synthetic(&cfg, 1).unwrap().is_empty());

        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg, 42).unwrap().serialize();
        let b = generate_synthetic(&cfg, 42).unwrap().serialize();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(&cfg, 43).unwrap().serialize());
    }

    #[test]
    fn synthetic_empty_lexicon() {
        let cfg = SynthConfig { fillers: vec![], ..SynthConfig::default() };
        assert_eq!(generate_synthetic(&cfg, 0), Err(CorpusError::EmptyLexicon("fillers")));
    }

    #[test]
    fn synthetic_noise_free_cues_match_labels() {
        let cfg = SynthConfig { n_per_class: 10, noise: NoiseRates::none(), ..SynthConfig::default() };
        let d = generate_synthetic(&cfg, 3).unwrap();
        assert_eq!(d.len(), 30);
        assert_eq!(d.label_counts(), [10, 10, 10]);
        let pos: HashSet<&str> = cfg.positive_cues.iter().map(|e| e.word.as_str()).collect();
        let neg: HashSet<&str> = cfg.negative_cues.iter().map(|e| e.word.as_str()).collect();
        for t in d.tweets() {
            let p = t.tokens.iter().filter(|k| pos.contains(k.surface.as_str())).count();
            let n = t.tokens.iter().filter(|k| neg.contains(k.surface.as_str())).count();
            let majority = match p.cmp(&n) {
                std::cmp::Ordering::Greater => Sentiment::Positive,
                std::cmp::Ordering::Less => Sentiment::Negative,
                std::cmp::Ordering::Equal => {
                    assert_eq!(p, 0, "tie between cue polarities in tweet {}", t.uid);
                    Sentiment::Neutral
                }
            };
            assert_eq!(Some(majority), t.label);
            if t.label == Some(Sentiment::Positive) {
                assert!(p >= 1);
            }
        }
    }

    #[test]
    fn label_counts_match_recount() {
        let d = generate_synthetic(&SynthConfig { n_per_class: 7, ..SynthConfig::default() }, 5).unwrap();
        let mut brute = [0usize; 3];
        for t in d.tweets() {
            for s in Sentiment::ALL {
                if t.label == Some(s) {
                    brute[s.index()] += 1;
                }
            }
        }
        assert_eq!(d.label_counts(), brute);
        assert!(d.labeled());
        assert!(!d.without_labels().labeled());
    }
}
