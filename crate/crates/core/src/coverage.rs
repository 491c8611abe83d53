//! Book memorization coverage (bmc@k) and the span statistics that come out
//! of the same pass over the generations.
//!
//! For each generation: find every maximal match against the whole book,
//! un-mark positions covered by a length-`m` window whose words also occur as
//! an `m`-gram of the generation's instruction, keep surviving sub-spans of at
//! least `k` words, and OR them into the book's coverage mask.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::hash::Hash;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use bitvec::prelude::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::TokenizedBook;
use crate::dataprep::PromptRecord;
use crate::error::{Error, Result};
use crate::matcher::{BookIndex, Generation, MatchSpan};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BmcConfig {
    /// Minimum match length in words.
    pub k: usize,
    /// Instruction-trimming n-gram order.
    pub m: usize,
    pub samples_per_excerpt: usize,
    /// Spans strictly longer than this many words are counted.
    pub span_count_threshold: usize,
}

impl Default for BmcConfig {
    fn default() -> Self {
        Self {
            k: 5,
            m: 5,
            samples_per_excerpt: 100,
            span_count_threshold: 20,
        }
    }
}

impl BmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.samples_per_excerpt == 0 {
            return Err(Error::InvalidInput(
                "k, m and samples_per_excerpt must be at least 1".into(),
            ));
        }
        if self.span_count_threshold < self.k {
            return Err(Error::InvalidInput(format!(
                "span_count_threshold {} must be >= k {}",
                self.span_count_threshold, self.k
            )));
        }
        Ok(())
    }
}

/// One bit per book word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CoverageMask {
    bits: BitVec<u64, Lsb0>,
}

impl CoverageMask {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: bitvec![u64, Lsb0; 0; len],
        }
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Self {
            bits: bits.iter().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set_range(&mut self, start: usize, end: usize) {
        self.bits[start..end].fill(true);
    }

    pub fn count_ones(&self) -> usize {
        self.bits.count_ones()
    }

    pub fn fraction(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.count_ones() as f64 / self.len() as f64
        }
    }

    pub fn union_with(&mut self, other: &CoverageMask) {
        self.bits |= &other.bits;
    }

    pub fn intersection_count(&self, other: &CoverageMask) -> usize {
        self.bits
            .as_raw_slice()
            .iter()
            .zip(other.bits.as_raw_slice())
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }

    pub fn union_count(&self, other: &CoverageMask) -> usize {
        self.bits
            .as_raw_slice()
            .iter()
            .zip(other.bits.as_raw_slice())
            .map(|(a, b)| (a | b).count_ones() as usize)
            .sum()
    }

    pub fn is_subset_of(&self, other: &CoverageMask) -> bool {
        self.len() == other.len() && self.intersection_count(other) == self.count_ones()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }

    pub fn to_bools(&self) -> Vec<bool> {
        self.bits.iter().by_vals().collect()
    }

    /// Maximal runs of set bits as half-open ranges.
    pub fn runs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut start = None;
        for (i, b) in self.bits.iter().by_vals().enumerate() {
            match (b, start) {
                (true, None) => start = Some(i),
                (false, Some(s)) => {
                    out.push((s, i));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            out.push((s, self.len()));
        }
        out
    }

    pub fn longest_run(&self) -> usize {
        self.runs().iter().map(|(s, e)| e - s).max().unwrap_or(0)
    }

    /// Bits packed most-significant-first into bytes, base64 encoded.
    pub fn to_base64(&self) -> String {
        let mut bytes = vec![0u8; self.len().div_ceil(8)];
        for i in self.bits.iter_ones() {
            bytes[i / 8] |= 0x80 >> (i % 8);
        }
        STANDARD.encode(bytes)
    }

    pub fn from_base64(encoded: &str, len: usize) -> Result<Self> {
        let bytes = STANDARD
            .decode(encoded.trim())
            .map_err(|e| Error::InvalidInput(format!("bad mask encoding: {e}")))?;
        if bytes.len() != len.div_ceil(8) {
            return Err(Error::LengthMismatch {
                left: bytes.len() * 8,
                right: len,
            });
        }
        let bits = (0..len).map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0).collect();
        Ok(Self { bits })
    }

    /// Run-length CSV: a `start,end` header then one half-open run per line.
    pub fn to_rle_csv(&self) -> String {
        let mut out = String::from("start,end\n");
        for (s, e) in self.runs() {
            out.push_str(&format!("{s},{e}\n"));
        }
        out
    }

    pub fn from_rle_csv(csv: &str, len: usize) -> Result<Self> {
        let mut mask = Self::zeros(len);
        for line in csv.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let parse = |s: Option<&str>| {
                s.and_then(|v| v.trim().parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidInput(format!("bad run line {line:?}")))
            };
            let mut parts = line.split(',');
            let (s, e) = (parse(parts.next())?, parse(parts.next())?);
            if s >= e || e > len {
                return Err(Error::InvalidRange { start: s, end: e, len });
            }
            mask.set_range(s, e);
        }
        Ok(mask)
    }
}

/// Serialized mask with enough context to decode it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskFile {
    pub book_id: String,
    pub model_id: String,
    pub n_words: usize,
    pub bits_base64: String,
}

impl MaskFile {
    pub fn new(book_id: &str, model_id: &str, mask: &CoverageMask) -> Self {
        Self {
            book_id: book_id.to_string(),
            model_id: model_id.to_string(),
            n_words: mask.len(),
            bits_base64: mask.to_base64(),
        }
    }

    pub fn mask(&self) -> Result<CoverageMask> {
        CoverageMask::from_base64(&self.bits_base64, self.n_words)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BmcReport {
    pub book_id: String,
    pub model_id: String,
    pub bmc: f64,
    pub longest_block_words: usize,
    pub longest_regurgitated_words: usize,
    pub n_spans_over_threshold: usize,
    pub mask: CoverageMask,
}

/// The JSON shape of a report; the mask travels separately.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub book_id: String,
    pub model_id: String,
    pub bmc: f64,
    pub longest_block_words: usize,
    pub longest_regurgitated_words: usize,
    pub n_spans_over_threshold: usize,
}

impl BmcReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            book_id: self.book_id.clone(),
            model_id: self.model_id.clone(),
            bmc: self.bmc,
            longest_block_words: self.longest_block_words,
            longest_regurgitated_words: self.longest_regurgitated_words,
            n_spans_over_threshold: self.n_spans_over_threshold,
        }
    }
}

fn trim_core(
    start: usize,
    end: usize,
    m: usize,
    mut shared_window: impl FnMut(usize) -> bool,
) -> Vec<(usize, usize)> {
    let len = end - start;
    let mut removed = vec![false; len];
    if m > 0 && len >= m {
        for w in start..=end - m {
            if shared_window(w) {
                removed[w - start..w - start + m].fill(true);
            }
        }
    }
    let mut out = Vec::new();
    let mut run = None;
    for (off, &r) in removed.iter().enumerate() {
        match (r, run) {
            (false, None) => run = Some(start + off),
            (true, Some(s)) => {
                out.push((s, start + off));
                run = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run {
        out.push((s, end));
    }
    out
}

fn gram_set<T: Eq + Hash>(words: &[T], m: usize) -> HashSet<&[T]> {
    if m == 0 || words.len() < m {
        return HashSet::new();
    }
    words.windows(m).collect()
}

/// Remove from a span's book-side words every position covered by a
/// length-`m` window that also occurs as an `m`-gram of the instruction.
/// Returns the remaining maximal sub-spans in book coordinates; callers keep
/// only those of at least `k` words.
pub fn trim_instruction_overlap<T: Eq + Hash>(
    span: &MatchSpan,
    book_words: &[T],
    instruction_words: &[T],
    m: usize,
) -> Vec<(usize, usize)> {
    let grams = gram_set(instruction_words, m);
    trim_core(span.book_start, span.book_end, m, |w| {
        grams.contains(&book_words[w..w + m])
    })
}

/// Instruction m-grams encoded against a book index. Grams containing words
/// absent from the book can never match a book window and are dropped.
#[derive(Debug, Clone, Default)]
struct InstructionGrams {
    grams: HashSet<Vec<u32>>,
}

impl InstructionGrams {
    fn new(index: &BookIndex, words: &[String], m: usize) -> Self {
        let ids = index.encode(words);
        let known = |g: &&[u32]| g.iter().all(|&id| id != u32::MAX);
        let grams = if ids.len() >= m {
            ids.windows(m).filter(known).map(<[u32]>::to_vec).collect()
        } else {
            HashSet::new()
        };
        Self { grams }
    }
}

/// What one generation contributes to a report.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GenerationOutcome {
    /// Untrimmed maximal matches (all of length `>= k`).
    pub matches: Vec<MatchSpan>,
    /// Trimmed sub-spans of at least `k` words, in book coordinates.
    pub covered: Vec<(usize, usize)>,
}

/// Book index plus per-excerpt instruction grams; shared read-only across
/// worker threads.
#[derive(Debug)]
pub struct Scorer<'a> {
    book: &'a TokenizedBook,
    index: BookIndex,
    config: BmcConfig,
    grams: HashMap<usize, InstructionGrams>,
}

impl<'a> Scorer<'a> {
    pub fn new(book: &'a TokenizedBook, prompts: &[PromptRecord], config: &BmcConfig) -> Result<Self> {
        config.validate()?;
        let index = BookIndex::for_book(book, config.k)?;
        let grams = prompts
            .iter()
            .map(|p| {
                let words = book.profile().words(&p.instruction);
                (p.excerpt_id, InstructionGrams::new(&index, &words, config.m))
            })
            .collect();
        Ok(Self {
            book,
            index,
            config: config.clone(),
            grams,
        })
    }

    pub fn book(&self) -> &TokenizedBook {
        self.book
    }

    pub fn config(&self) -> &BmcConfig {
        &self.config
    }

    pub fn index(&self) -> &BookIndex {
        &self.index
    }

    pub fn outcome(&self, generation: &Generation) -> Result<GenerationOutcome> {
        if self.book.excerpt(generation.excerpt_id).is_none() {
            return Err(Error::UnknownExcerpt(generation.excerpt_id));
        }
        let grams = self
            .grams
            .get(&generation.excerpt_id)
            .ok_or(Error::MissingPrompt(generation.excerpt_id))?;
        let (k, m) = (self.config.k, self.config.m);
        let book_ids = self.index.book_ids();
        let matches = self.index.find(&generation.words);
        let mut covered = Vec::new();
        for span in &matches {
            let kept = trim_core(span.book_start, span.book_end, m, |w| {
                grams.grams.contains(&book_ids[w..w + m])
            });
            covered.extend(kept.into_iter().filter(|(s, e)| e - s >= k));
        }
        Ok(GenerationOutcome { matches, covered })
    }

    /// Outcomes in input order, computed on the current rayon pool.
    pub fn outcomes(&self, generations: &[Generation]) -> Result<Vec<GenerationOutcome>> {
        generations.par_iter().map(|g| self.outcome(g)).collect()
    }

    pub fn mask_of<'o>(&self, outcomes: impl IntoIterator<Item = &'o GenerationOutcome>) -> CoverageMask {
        let mut mask = CoverageMask::zeros(self.book.len());
        for o in outcomes {
            for &(s, e) in &o.covered {
                mask.set_range(s, e);
            }
        }
        mask
    }

    pub fn report_from_outcomes(&self, model_id: &str, outcomes: &[GenerationOutcome]) -> BmcReport {
        let mask = self.mask_of(outcomes);
        let all_matches = outcomes.iter().flat_map(|o| o.matches.iter());
        let longest_regurgitated_words = all_matches.clone().map(MatchSpan::len).max().unwrap_or(0);
        let threshold = self.config.span_count_threshold;
        let long = all_matches.filter(|s| s.len() > threshold).map(MatchSpan::book_range);
        let n_spans_over_threshold = select_disjoint_longest(long, None).len();
        BmcReport {
            book_id: self.book.book_id().to_string(),
            model_id: model_id.to_string(),
            bmc: mask.fraction(),
            longest_block_words: mask.longest_run(),
            longest_regurgitated_words,
            n_spans_over_threshold,
            mask,
        }
    }

    pub fn report(&self, model_id: &str, generations: &[Generation]) -> Result<BmcReport> {
        let outcomes = self.outcomes(generations)?;
        Ok(self.report_from_outcomes(model_id, &outcomes))
    }
}

/// bmc@k plus the three span statistics for one (book, model) pair.
pub fn bmc(
    book: &TokenizedBook,
    model_id: &str,
    prompts: &[PromptRecord],
    generations: &[Generation],
    config: &BmcConfig,
) -> Result<BmcReport> {
    Scorer::new(book, prompts, config)?.report(model_id, generations)
}

/// Longest maximal match in any single generation, without trimming or merging.
pub fn longest_regurgitated_span(generations: &[Generation], book: &TokenizedBook, k: usize) -> Result<usize> {
    let index = BookIndex::for_book(book, k)?;
    Ok(generations
        .par_iter()
        .map(|g| index.find(&g.words).iter().map(MatchSpan::len).max().unwrap_or(0))
        .max()
        .unwrap_or(0))
}

/// Number of distinct non-overlapping untrimmed spans longer than `threshold`.
pub fn count_spans_over_threshold(
    generations: &[Generation],
    book: &TokenizedBook,
    k: usize,
    threshold: usize,
) -> Result<usize> {
    if threshold < k {
        return Err(Error::InvalidInput(format!("threshold {threshold} must be >= k {k}")));
    }
    let index = BookIndex::for_book(book, k)?;
    let long: Vec<(usize, usize)> = generations
        .par_iter()
        .flat_map_iter(|g| {
            index
                .find(&g.words)
                .into_iter()
                .filter(|s| s.len() > threshold)
                .map(|s| s.book_range())
        })
        .collect();
    Ok(select_disjoint_longest(long, None).len())
}

/// Greedy longest-first selection of pairwise non-overlapping book ranges.
/// Duplicates collapse; ties go to the smaller start. Output is in selection
/// order (length descending).
pub fn select_disjoint_longest(
    ranges: impl IntoIterator<Item = (usize, usize)>,
    limit: Option<usize>,
) -> Vec<(usize, usize)> {
    let unique: BTreeSet<(usize, usize)> = ranges.into_iter().filter(|(s, e)| s < e).collect();
    let mut candidates: Vec<(usize, usize)> = unique.into_iter().collect();
    candidates.sort_by_key(|&(s, e)| (std::cmp::Reverse(e - s), s));
    let mut chosen: BTreeMap<usize, usize> = BTreeMap::new();
    let mut out = Vec::new();
    for (s, e) in candidates {
        if limit.is_some_and(|n| out.len() >= n) {
            break;
        }
        let overlaps = chosen.range(..e).next_back().is_some_and(|(_, &pe)| pe > s);
        if !overlaps {
            chosen.insert(s, e);
            out.push((s, e));
        }
    }
    out
}

/// Coverage restricted to one excerpt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcerptCoverage {
    pub excerpt_id: usize,
    pub word_start: usize,
    pub word_end: usize,
    pub covered_words: usize,
    pub coverage: f64,
}

pub fn per_excerpt_coverage(book: &TokenizedBook, mask: &CoverageMask) -> Vec<ExcerptCoverage> {
    book.excerpts()
        .iter()
        .map(|e| {
            let covered_words = (e.word_start..e.word_end).filter(|&i| mask.get(i)).count();
            ExcerptCoverage {
                excerpt_id: e.excerpt_id,
                word_start: e.word_start,
                word_end: e.word_end,
                covered_words,
                coverage: covered_words as f64 / e.word_count() as f64,
            }
        })
        .collect()
}

pub fn per_excerpt_csv(rows: &[ExcerptCoverage]) -> String {
    let mut out = String::from("excerpt_id,word_start,word_end,covered_words,coverage\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.excerpt_id, r.word_start, r.word_end, r.covered_words, r.coverage
        ));
    }
    out
}
