//! Book ingestion: normalization profiles, word tokenization with raw byte
//! offsets, excerpt segmentation, and mapping word spans back to raw text.
//!
//! Tokens are maximal runs of characters between separators (whitespace,
//! em/en dashes, the ellipsis glyph) with every punctuation character removed.
//! A chunk that is all punctuation produces no token. Each token remembers the
//! byte range of its raw chunk, trimmed to the first and last character that
//! survived normalization, so `"Don't,"` maps to the raw text `Don't`.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Exact,
    Soft,
}

impl MatchMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Exact => "exact",
            MatchMode::Soft => "soft",
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(MatchMode::Exact),
            "soft" => Ok(MatchMode::Soft),
            other => Err(Error::InvalidInput(format!("unknown match mode {other:?}"))),
        }
    }
}

/// Characters removed from tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PunctuationSet {
    /// Every character in Unicode general categories P* and S*.
    Unicode,
    Chars(BTreeSet<char>),
}

impl PunctuationSet {
    pub fn contains(&self, c: char) -> bool {
        match self {
            PunctuationSet::Unicode => is_punct_or_symbol(c),
            PunctuationSet::Chars(set) => set.contains(&c),
        }
    }
}

fn is_punct_or_symbol(c: char) -> bool {
    if c.is_ascii() {
        return c.is_ascii_punctuation();
    }
    use GeneralCategory::*;
    matches!(
        get_general_category(c),
        ConnectorPunctuation
            | DashPunctuation
            | OpenPunctuation
            | ClosePunctuation
            | InitialPunctuation
            | FinalPunctuation
            | OtherPunctuation
            | MathSymbol
            | CurrencySymbol
            | ModifierSymbol
            | OtherSymbol
    )
}

/// Token separators besides whitespace.
fn is_separator(c: char) -> bool {
    c.is_whitespace() || matches!(c, '\u{2013}' | '\u{2014}' | '\u{2026}')
}

fn unify_quote(c: char) -> char {
    match c {
        '\u{2018}' | '\u{2019}' | '\u{201A}' | '\u{201B}' | '\u{2032}' => '\'',
        '\u{201C}' | '\u{201D}' | '\u{201E}' | '\u{201F}' | '\u{2033}' => '"',
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormalizationProfile {
    mode: MatchMode,
    punctuation: PunctuationSet,
    casefold: bool,
    quote_unification: bool,
}

impl NormalizationProfile {
    /// Case-sensitive, punctuation stripped. The default for scoring.
    pub fn exact() -> Self {
        Self {
            mode: MatchMode::Exact,
            punctuation: PunctuationSet::Unicode,
            casefold: false,
            quote_unification: false,
        }
    }

    /// Casefolded, punctuation stripped, curly quotes unified.
    pub fn soft() -> Self {
        Self {
            mode: MatchMode::Soft,
            punctuation: PunctuationSet::Unicode,
            casefold: true,
            quote_unification: true,
        }
    }

    pub fn for_mode(mode: MatchMode) -> Self {
        match mode {
            MatchMode::Exact => Self::exact(),
            MatchMode::Soft => Self::soft(),
        }
    }

    pub fn with_punctuation(mut self, punctuation: PunctuationSet) -> Self {
        self.punctuation = punctuation;
        self
    }

    pub fn mode(&self) -> MatchMode {
        self.mode
    }

    pub fn punctuation(&self) -> &PunctuationSet {
        &self.punctuation
    }

    pub fn casefold(&self) -> bool {
        self.casefold
    }

    pub fn quote_unification(&self) -> bool {
        self.quote_unification
    }

    /// Normalize one separator-free chunk. Returns the token and the byte
    /// range (relative to the chunk) of the surviving characters.
    fn normalize_chunk(&self, chunk: &str) -> Option<(String, usize, usize)> {
        let mut token = String::new();
        let mut first = None;
        let mut last = 0;
        for (i, c) in chunk.char_indices() {
            let c2 = if self.quote_unification { unify_quote(c) } else { c };
            if self.punctuation.contains(c2) {
                continue;
            }
            first.get_or_insert(i);
            last = i + c.len_utf8();
            if self.casefold {
                token.extend(c2.to_lowercase());
            } else {
                token.push(c2);
            }
        }
        first.map(|f| (token, f, last))
    }

    /// Tokens of `text` together with their raw byte ranges.
    pub fn tokens_with_offsets(&self, text: &str) -> (Vec<String>, Vec<(usize, usize)>) {
        let mut words = Vec::new();
        let mut offsets = Vec::new();
        let mut chunk_start: Option<usize> = None;
        let mut flush = |start: usize, end: usize| {
            if let Some((tok, a, b)) = self.normalize_chunk(&text[start..end]) {
                words.push(tok);
                offsets.push((start + a, start + b));
            }
        };
        for (i, c) in text.char_indices() {
            if is_separator(c) {
                if let Some(s) = chunk_start.take() {
                    flush(s, i);
                }
            } else if chunk_start.is_none() {
                chunk_start = Some(i);
            }
        }
        if let Some(s) = chunk_start {
            flush(s, text.len());
        }
        (words, offsets)
    }

    pub fn words(&self, text: &str) -> Vec<String> {
        self.tokens_with_offsets(text).0
    }

    /// Tokens joined by single spaces.
    pub fn normalize_text(&self, text: &str) -> String {
        self.words(text).join(" ")
    }
}

impl Default for NormalizationProfile {
    fn default() -> Self {
        Self::exact()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BookMeta {
    pub book_id: String,
    pub title: String,
    pub author: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawBook {
    pub book_id: String,
    pub title: String,
    pub author: String,
    pub text: String,
}

impl RawBook {
    pub fn new(meta: BookMeta, text: impl Into<String>) -> Self {
        Self {
            book_id: meta.book_id,
            title: meta.title,
            author: meta.author,
            text: text.into(),
        }
    }

    /// Load a plain-text book and its JSON sidecar `{book_id, title, author}`.
    pub fn load(text_path: &Path, meta_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(text_path).map_err(|e| Error::io(text_path, e))?;
        let meta = jsonl::read_json::<BookMeta>(meta_path)?;
        if meta.book_id.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{}: empty book_id",
                meta_path.display()
            )));
        }
        Ok(Self::new(meta, text))
    }

    pub fn meta(&self) -> BookMeta {
        BookMeta {
            book_id: self.book_id.clone(),
            title: self.title.clone(),
            author: self.author.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Excerpt {
    pub excerpt_id: usize,
    pub word_start: usize,
    pub word_end: usize,
    pub text: String,
}

impl Excerpt {
    pub fn word_count(&self) -> usize {
        self.word_end - self.word_start
    }
}

/// Line format of the excerpt file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcerptRecord {
    pub book_id: String,
    pub excerpt_id: usize,
    pub word_start: usize,
    pub word_end: usize,
    pub text: String,
}

#[derive(Debug, Clone)]
pub struct TokenizedBook {
    book_id: String,
    profile: NormalizationProfile,
    text: String,
    words: Vec<String>,
    word_offsets: Vec<(usize, usize)>,
    excerpts: Vec<Excerpt>,
}

/// Normalize and tokenize a book.
pub fn tokenize(book: &RawBook, profile: &NormalizationProfile) -> Result<TokenizedBook> {
    let (words, word_offsets) = profile.tokens_with_offsets(&book.text);
    if words.is_empty() {
        return Err(Error::EmptyBook);
    }
    Ok(TokenizedBook {
        book_id: book.book_id.clone(),
        profile: profile.clone(),
        text: book.text.clone(),
        words,
        word_offsets,
        excerpts: Vec::new(),
    })
}

impl TokenizedBook {
    pub fn book_id(&self) -> &str {
        &self.book_id
    }

    pub fn profile(&self) -> &NormalizationProfile {
        &self.profile
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn word_offsets(&self) -> &[(usize, usize)] {
        &self.word_offsets
    }

    pub fn excerpts(&self) -> &[Excerpt] {
        &self.excerpts
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn excerpt(&self, excerpt_id: usize) -> Option<&Excerpt> {
        self.excerpts
            .binary_search_by_key(&excerpt_id, |e| e.excerpt_id)
            .ok()
            .map(|i| &self.excerpts[i])
    }

    /// Raw text from the start of word `word_start` to the end of word
    /// `word_end - 1`, with original casing and punctuation.
    pub fn span_to_raw(&self, word_start: usize, word_end: usize) -> Result<&str> {
        if word_start >= word_end || word_end > self.words.len() {
            return Err(Error::InvalidRange {
                start: word_start,
                end: word_end,
                len: self.words.len(),
            });
        }
        let a = self.word_offsets[word_start].0;
        let b = self.word_offsets[word_end - 1].1;
        Ok(&self.text[a..b])
    }

    /// Split into excerpts of `[min_words, max_words]` words, honoring
    /// paragraph boundaries first and sentence boundaries second. Only the
    /// final excerpt may fall below `min_words`.
    pub fn segment(mut self, min_words: usize, max_words: usize) -> Result<Self> {
        if min_words == 0 || max_words < min_words {
            return Err(Error::InvalidInput(format!(
                "segment bounds must satisfy 1 <= min <= max, got [{min_words}, {max_words}]"
            )));
        }
        let ranges = self.segment_ranges(min_words, max_words);
        self.excerpts = self.build_excerpts(&ranges);
        Ok(self)
    }

    /// Attach excerpts read back from an excerpt file.
    pub fn with_excerpts(mut self, records: &[ExcerptRecord]) -> Result<Self> {
        let mut prev_end = 0;
        let mut ranges = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if r.excerpt_id != i {
                return Err(Error::InvalidInput(format!(
                    "excerpt ids must be 0..n in order; found {} at position {i}",
                    r.excerpt_id
                )));
            }
            if r.word_start >= r.word_end || r.word_end > self.words.len() || r.word_start < prev_end
            {
                return Err(Error::InvalidRange {
                    start: r.word_start,
                    end: r.word_end,
                    len: self.words.len(),
                });
            }
            prev_end = r.word_end;
            ranges.push((r.word_start, r.word_end));
        }
        self.excerpts = self.build_excerpts(&ranges);
        Ok(self)
    }

    pub fn excerpt_records(&self) -> Vec<ExcerptRecord> {
        self.excerpts
            .iter()
            .map(|e| ExcerptRecord {
                book_id: self.book_id.clone(),
                excerpt_id: e.excerpt_id,
                word_start: e.word_start,
                word_end: e.word_end,
                text: e.text.clone(),
            })
            .collect()
    }

    fn build_excerpts(&self, ranges: &[(usize, usize)]) -> Vec<Excerpt> {
        ranges
            .iter()
            .enumerate()
            .map(|(excerpt_id, &(s, e))| Excerpt {
                excerpt_id,
                word_start: s,
                word_end: e,
                text: self.text[self.word_offsets[s].0..self.word_offsets[e - 1].1].to_string(),
            })
            .collect()
    }

    /// Word ranges of blank-line-delimited paragraphs.
    fn paragraphs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..self.words.len() {
            let gap = &self.text[self.word_offsets[i - 1].1..self.word_offsets[i].0];
            if has_blank_line(gap) {
                out.push((start, i));
                start = i;
            }
        }
        out.push((start, self.words.len()));
        out
    }

    /// `true` at word `i` when its raw chunk ends a sentence.
    fn sentence_ends(&self) -> Vec<bool> {
        self.word_offsets
            .iter()
            .map(|&(_, end)| {
                self.text[end..]
                    .chars()
                    .take_while(|&c| !is_separator(c))
                    .any(|c| matches!(c, '.' | '!' | '?'))
            })
            .collect()
    }

    fn segment_ranges(&self, min: usize, max: usize) -> Vec<(usize, usize)> {
        let sentence_end = self.sentence_ends();
        let mut units: VecDeque<(usize, usize)> = self.paragraphs().into();
        let mut out = Vec::new();
        let mut cur_start = 0;
        let mut cur_len = 0;
        while let Some((us, ue)) = units.pop_front() {
            let ulen = ue - us;
            if cur_len + ulen <= max {
                cur_len += ulen;
                if cur_len >= min {
                    out.push((cur_start, cur_start + cur_len));
                    cur_start += cur_len;
                    cur_len = 0;
                }
                continue;
            }
            // The unit overflows; cur_len < min here because excerpts are
            // emitted as soon as they reach min.
            let lo = min - cur_len;
            let hi = max - cur_len;
            let take = (lo..=hi)
                .rev()
                .find(|&t| sentence_end[us + t - 1])
                .unwrap_or(hi);
            cur_len += take;
            out.push((cur_start, cur_start + cur_len));
            cur_start += cur_len;
            cur_len = 0;
            units.push_front((us + take, ue));
        }
        if cur_len > 0 {
            out.push((cur_start, cur_start + cur_len));
        }
        out
    }
}

fn has_blank_line(gap: &str) -> bool {
    let mut saw_newline = false;
    for c in gap.chars() {
        if c == '\n' {
            if saw_newline {
                return true;
            }
            saw_newline = true;
        } else if !c.is_whitespace() {
            saw_newline = false;
        }
    }
    false
}

pub fn read_excerpts(path: &Path) -> Result<Vec<ExcerptRecord>> {
    jsonl::read_jsonl(path)
}

pub fn write_excerpts(path: &Path, book: &TokenizedBook) -> Result<()> {
    jsonl::write_jsonl(path, &book.excerpt_records())
}
