//! Tokenization, identifier splitting, vocabulary statistics and the text
//! counting primitives behind readability scoring.
//!
//! The VSM profile mirrors a stock TF-IDF vectorizer: lowercase, maximal
//! runs of two or more word characters, no stemming and no stopwords. The
//! analysis profile is the same rule plus the bundled English stopword list.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::LayerKind;

/// Bundled English stopword list (`data/stopwords_en.txt`).
pub const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("cannot read word list {}: {source}", path.display())]
    WordList {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenRule {
    /// Maximal runs of at least two alphanumeric characters.
    #[default]
    AlnumRunsMin2,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum StopwordList {
    BundledEnglish,
    File { path: PathBuf },
}

/// Serializable tokenizer configuration. Compile it into a [`Tokenizer`]
/// to resolve the stopword list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerProfile {
    pub lowercase: bool,
    #[serde(default)]
    pub token_rule: TokenRule,
    pub split_identifiers: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stopword_list: Option<StopwordList>,
}

impl TokenizerProfile {
    /// Scoring profile. Identifier splitting is on for source-code layers only.
    pub fn vsm(kind: LayerKind) -> Self {
        TokenizerProfile {
            lowercase: true,
            token_rule: TokenRule::AlnumRunsMin2,
            split_identifiers: kind == LayerKind::SourceCode,
            stopword_list: None,
        }
    }

    /// Profile used by the dataset-health and link-feature analyses.
    pub fn analysis(kind: LayerKind) -> Self {
        TokenizerProfile {
            stopword_list: Some(StopwordList::BundledEnglish),
            ..Self::vsm(kind)
        }
    }
}

/// Parses a word-list file body: one word per line, `#` starts a comment.
pub fn parse_word_list(content: &str) -> BTreeSet<String> {
    content
        .lines()
        .map(|line| line.split('#').next().unwrap_or("").trim())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn read_word_list(path: &Path) -> Result<BTreeSet<String>, TextError> {
    let content = fs::read_to_string(path).map_err(|source| TextError::WordList {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(parse_word_list(&content))
}

/// A compiled [`TokenizerProfile`].
#[derive(Clone, Debug)]
pub struct Tokenizer {
    profile: TokenizerProfile,
    stopwords: HashSet<String>,
}

impl Tokenizer {
    pub fn new(profile: TokenizerProfile) -> Result<Self, TextError> {
        let stopwords = match &profile.stopword_list {
            None => HashSet::new(),
            Some(StopwordList::BundledEnglish) => {
                parse_word_list(BUNDLED_STOPWORDS).into_iter().collect()
            }
            Some(StopwordList::File { path }) => read_word_list(path)?.into_iter().collect(),
        };
        Ok(Tokenizer { profile, stopwords })
    }

    pub fn profile(&self) -> &TokenizerProfile {
        &self.profile
    }

    pub fn tokenize(&self, text: &str) -> Vec<String> {
        let split = self.profile.split_identifiers;
        let mut tokens = Vec::new();
        for run in word_runs(text, split) {
            if split {
                for sub in split_identifier(run) {
                    self.push_clean(&sub, &mut tokens);
                }
            } else if self.profile.lowercase {
                self.push_clean(&run.to_lowercase(), &mut tokens);
            } else {
                self.push_clean(run, &mut tokens);
            }
        }
        tokens
    }

    pub fn bag(&self, text: &str) -> BagOfWords {
        BagOfWords::from_tokens(self.tokenize(text))
    }

    pub fn is_stopword(&self, token: &str) -> bool {
        !self.stopwords.is_empty() && self.stopwords.contains(&token.to_lowercase())
    }

    // Case mapping can introduce characters outside the word class, so the
    // candidate is re-split before the length and stopword filters.
    fn push_clean(&self, candidate: &str, out: &mut Vec<String>) {
        for piece in word_runs(candidate, self.profile.split_identifiers) {
            if !self.is_stopword(piece) {
                out.push(piece.to_string());
            }
        }
    }
}

fn is_word_char(c: char, underscore_separates: bool) -> bool {
    c.is_alphanumeric() || (!underscore_separates && c == '_')
}

fn word_runs(text: &str, underscore_separates: bool) -> impl Iterator<Item = &str> {
    text.split(move |c: char| !is_word_char(c, underscore_separates))
        .filter(|run| run.chars().nth(1).is_some())
}

/// Tokenizes `text` with a compiled profile.
pub fn tokenize(text: &str, tokenizer: &Tokenizer) -> Vec<String> {
    tokenizer.tokenize(text)
}

/// Splits an identifier on underscores and case transitions, lowercasing
/// each part. Acronym runs stay together: `parseHTTPResponse` gives
/// `parse`, `http`, `response`. Digits never start a new part.
pub fn split_identifier(token: &str) -> Vec<String> {
    let mut parts = Vec::new();
    for segment in token.split(|c: char| c == '_' || !c.is_alphanumeric()) {
        let chars: Vec<char> = segment.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let prev = chars[i - 1];
            let cur = chars[i];
            let camel = (prev.is_lowercase() || prev.is_numeric()) && cur.is_uppercase();
            let acronym_end = prev.is_uppercase()
                && cur.is_uppercase()
                && chars.get(i + 1).is_some_and(|next| next.is_lowercase());
            if camel || acronym_end {
                parts.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        if start < chars.len() {
            parts.push(chars[start..].iter().collect::<String>().to_lowercase());
        }
    }
    parts
}

/// Number of sentences: maximal runs of `.`, `!` or `?` that are followed by
/// whitespace or the end of the text close a sentence, and only segments
/// holding at least one alphanumeric character count. Non-blank text always
/// has at least one sentence.
pub fn count_sentences(text: &str) -> usize {
    if text.trim().is_empty() {
        return 0;
    }
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut has_content = false;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if matches!(c, '.' | '!' | '?') {
            let mut j = i;
            while j < chars.len() && matches!(chars[j], '.' | '!' | '?') {
                j += 1;
            }
            let closes = j == chars.len() || chars[j].is_whitespace();
            if closes && has_content {
                count += 1;
                has_content = false;
            }
            i = j;
            continue;
        }
        if c.is_alphanumeric() {
            has_content = true;
        }
        i += 1;
    }
    if has_content {
        count += 1;
    }
    count.max(1)
}

/// Whitespace-separated tokens containing at least one alphabetic character.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace()
        .filter(|w| w.chars().any(char::is_alphabetic))
        .count()
}

/// Vowel-run syllable heuristic (vowels `aeiouy`), at least 1. A final `e`
/// is treated as silent when the word has more than one vowel run and does
/// not end in `le`. Non-letters are ignored.
pub fn count_syllables(word: &str) -> usize {
    let letters: Vec<char> = word
        .chars()
        .filter(|c| c.is_alphabetic())
        .flat_map(char::to_lowercase)
        .collect();
    let is_vowel = |c: char| matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
    let mut runs = 0;
    let mut in_run = false;
    for &c in &letters {
        let v = is_vowel(c);
        if v && !in_run {
            runs += 1;
        }
        in_run = v;
    }
    let n = letters.len();
    let silent_e = runs > 1 && n >= 2 && letters[n - 1] == 'e' && letters[n - 2] != 'l';
    if silent_e {
        runs -= 1;
    }
    runs.max(1)
}

/// Term counts for one document.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BagOfWords(BTreeMap<String, u32>);

impl BagOfWords {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut counts = BTreeMap::new();
        for t in tokens {
            *counts.entry(t.into()).or_insert(0) += 1;
        }
        BagOfWords(counts)
    }

    pub fn get(&self, term: &str) -> u32 {
        self.0.get(term).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, u32)> {
        self.0.iter().map(|(t, c)| (t.as_str(), *c))
    }

    pub fn terms(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    pub fn distinct_count(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> u64 {
        self.0.values().map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermStats {
    pub collection_frequency: u64,
    pub document_frequency: u64,
}

/// Corpus-level term statistics.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabularyStats {
    pub terms: BTreeMap<String, TermStats>,
    pub total_token_count: u64,
    pub document_count: u64,
}

impl VocabularyStats {
    pub fn from_documents<I, D>(documents: I) -> Self
    where
        I: IntoIterator<Item = D>,
        D: AsRef<[String]>,
    {
        let mut stats = VocabularyStats::default();
        for doc in documents {
            stats.add_document(doc.as_ref());
        }
        stats
    }

    pub fn add_document(&mut self, tokens: &[String]) {
        self.add_bag(&BagOfWords::from_tokens(tokens.iter().cloned()));
    }

    pub fn add_bag(&mut self, bag: &BagOfWords) {
        self.document_count += 1;
        for (term, count) in bag.iter() {
            let entry = self.terms.entry(term.to_string()).or_default();
            entry.collection_frequency += u64::from(count);
            entry.document_frequency += 1;
            self.total_token_count += u64::from(count);
        }
    }

    /// Folds another corpus's statistics into this one.
    pub fn merge(&mut self, other: &VocabularyStats) {
        for (term, s) in &other.terms {
            let entry = self.terms.entry(term.clone()).or_default();
            entry.collection_frequency += s.collection_frequency;
            entry.document_frequency += s.document_frequency;
        }
        self.total_token_count += other.total_token_count;
        self.document_count += other.document_count;
    }

    pub fn term_count(&self) -> usize {
        self.terms.len()
    }

    pub fn contains(&self, term: &str) -> bool {
        self.terms.contains_key(term)
    }
}

pub fn build_vocabulary<S: AsRef<str>>(texts: &[S], tokenizer: &Tokenizer) -> VocabularyStats {
    let mut stats = VocabularyStats::default();
    for text in texts {
        stats.add_bag(&tokenizer.bag(text.as_ref()));
    }
    stats
}
