//! Cross-paragraph attribution: which verbatim spans come from an excerpt
//! other than the one whose summary prompted them, and whether the triggered
//! excerpt is semantically close to the prompt.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Excerpt, NormalizationProfile, TokenizedBook};
use crate::error::{Error, Result};
use crate::matcher::{BookIndex, Generation};
use crate::retry::{Attempt, RetryPolicy};
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanEvidence {
    pub book_start: usize,
    pub book_end: usize,
    pub source_excerpts: BTreeSet<usize>,
    pub target_excerpt: usize,
    pub is_cross: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossParagraphResult {
    pub ratio: f64,
    pub n_unique_spans: usize,
    pub n_cross_spans: usize,
    pub evidence: Vec<SpanEvidence>,
}

/// Excerpt with the largest word overlap with `[start, end)`; ties go to the
/// earlier excerpt.
pub fn locate_target_excerpt(start: usize, end: usize, excerpts: &[Excerpt]) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for e in excerpts {
        let overlap = end.min(e.word_end).saturating_sub(start.max(e.word_start));
        if overlap > 0 && best.is_none_or(|(_, o)| overlap > o) {
            best = Some((e.excerpt_id, overlap));
        }
    }
    best.map(|(id, _)| id)
}

/// Fraction of unique long spans that were produced by a prompt for a
/// different excerpt than the one they lie in.
///
/// Spans are maximal matches longer than `min_span_words`. Spans strictly
/// contained in a larger span are removed first; identical spans are then
/// merged, unioning their source excerpts.
pub fn cross_paragraph_ratio(
    book: &TokenizedBook,
    generations: &[Generation],
    k: usize,
    min_span_words: usize,
) -> Result<CrossParagraphResult> {
    if min_span_words < k {
        return Err(Error::InvalidInput(format!("min_span_words {min_span_words} must be >= k {k}")));
    }
    for g in generations {
        if book.excerpt(g.excerpt_id).is_none() {
            return Err(Error::UnknownExcerpt(g.excerpt_id));
        }
    }
    let index = BookIndex::for_book(book, k)?;
    let pairs: Vec<((usize, usize), usize)> = generations
        .par_iter()
        .flat_map_iter(|g| {
            index
                .find(&g.words)
                .into_iter()
                .filter(|s| s.len() > min_span_words)
                .map(|s| (s.book_range(), g.excerpt_id))
        })
        .collect();
    Ok(cross_paragraph_from_pairs(book.excerpts(), pairs))
}

/// The aggregation half of [`cross_paragraph_ratio`], over `(span, source)` pairs.
pub fn cross_paragraph_from_pairs(
    excerpts: &[Excerpt],
    pairs: impl IntoIterator<Item = ((usize, usize), usize)>,
) -> CrossParagraphResult {
    let mut sources: BTreeMap<(usize, usize), BTreeSet<usize>> = BTreeMap::new();
    for (range, src) in pairs {
        sources.entry(range).or_default().insert(src);
    }
    // Sorted by start ascending, end descending: a range is strictly contained
    // in a larger one iff some earlier range reaches at least as far.
    let mut ordered: Vec<(usize, usize)> = sources.keys().copied().collect();
    ordered.sort_by_key(|&(s, e)| (s, std::cmp::Reverse(e)));
    let mut max_end = 0;
    let mut kept = Vec::new();
    for (i, &(s, e)) in ordered.iter().enumerate() {
        if i == 0 || e > max_end {
            kept.push((s, e));
        }
        max_end = max_end.max(e);
    }
    kept.sort_unstable();

    let evidence: Vec<SpanEvidence> = kept
        .into_iter()
        .map(|(s, e)| {
            let source_excerpts = sources.remove(&(s, e)).unwrap_or_default();
            let target_excerpt = locate_target_excerpt(s, e, excerpts).unwrap_or(0);
            let is_cross = source_excerpts.iter().any(|&src| src != target_excerpt);
            SpanEvidence {
                book_start: s,
                book_end: e,
                source_excerpts,
                target_excerpt,
                is_cross,
            }
        })
        .collect();
    let n_cross = evidence.iter().filter(|e| e.is_cross).count();
    CrossParagraphResult {
        ratio: if evidence.is_empty() {
            0.0
        } else {
            n_cross as f64 / evidence.len() as f64
        },
        n_unique_spans: evidence.len(),
        n_cross_spans: n_cross,
        evidence,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub fn cosine_similarity(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.dim() != v.dim() {
        return Err(Error::LengthMismatch {
            left: u.dim(),
            right: v.dim(),
        });
    }
    let (nu, nv) = (u.norm(), v.norm());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = u.0.iter().zip(&v.0).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

pub trait Embedder: Sync {
    /// One vector per input text, in input order.
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;
}

/// Deterministic offline embedder: soft-normalized tokens hashed into a
/// fixed number of signed buckets.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
    profile: NormalizationProfile,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        Self {
            dim: dim.max(1),
            profile: NormalizationProfile::soft(),
        }
    }

    fn fnv1a(bytes: &[u8]) -> u64 {
        bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
            (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
        })
    }

    pub fn embed_one(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0.0; self.dim];
        for w in self.profile.words(text) {
            let h = Self::fnv1a(w.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        }
        EmbeddingVector(v)
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        Self::new(256)
    }
}

impl Embedder for HashingEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
}

/// POSTs `{texts}` and expects `{vectors}` in the same order.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    url: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(url: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            url: url.into(),
            agent: retry.agent(),
            retry,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let request = EmbedRequest { texts: texts.to_vec() };
        let vectors = self
            .retry
            .run(texts.len() as u64, || {
                let mut resp = self.agent.post(&self.url).send_json(&request)?;
                let body: EmbedResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| Attempt::Retry(format!("bad response: {e}")))?;
                if body.vectors.len() != texts.len() {
                    return Err(Attempt::Fatal(format!(
                        "expected {} vectors, got {}",
                        texts.len(),
                        body.vectors.len()
                    )));
                }
                Ok(body.vectors)
            })
            .map_err(|message| Error::Provider {
                service: "embedding",
                context: self.url.clone(),
                message,
            })?;
        Ok(vectors.into_iter().map(EmbeddingVector).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DistanceBin {
    #[serde(rename = "1-5")]
    Near,
    #[serde(rename = "6-20")]
    Mid,
    #[serde(rename = "21-50")]
    Far,
    #[serde(rename = "51+")]
    VeryFar,
}

impl DistanceBin {
    /// `None` for distance 0 (same excerpt).
    pub fn of(distance: usize) -> Option<Self> {
        match distance {
            0 => None,
            1..=5 => Some(DistanceBin::Near),
            6..=20 => Some(DistanceBin::Mid),
            21..=50 => Some(DistanceBin::Far),
            _ => Some(DistanceBin::VeryFar),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            DistanceBin::Near => "1-5",
            DistanceBin::Mid => "6-20",
            DistanceBin::Far => "21-50",
            DistanceBin::VeryFar => "51+",
        }
    }
}

impl fmt::Display for DistanceBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// A (source prompt, triggered excerpt) relationship with its labels.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CrossPair {
    pub book_id: String,
    pub model_id: String,
    pub setting: String,
    pub source_excerpt: usize,
    pub target_excerpt: usize,
}

/// Expand evidence into one pair per (source, target). Same-excerpt pairs are
/// dropped unless `include_same_excerpt`.
pub fn cross_pairs(
    book_id: &str,
    model_id: &str,
    setting: &str,
    evidence: &[SpanEvidence],
    include_same_excerpt: bool,
) -> Vec<CrossPair> {
    let mut out: BTreeSet<CrossPair> = BTreeSet::new();
    for ev in evidence {
        for &src in &ev.source_excerpts {
            if src != ev.target_excerpt || include_same_excerpt {
                out.insert(CrossPair {
                    book_id: book_id.to_string(),
                    model_id: model_id.to_string(),
                    setting: setting.to_string(),
                    source_excerpt: src,
                    target_excerpt: ev.target_excerpt,
                });
            }
        }
    }
    out.into_iter().collect()
}

/// Prompt embeddings by excerpt id and excerpt embeddings in excerpt order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BookEmbeddings {
    pub prompts: BTreeMap<usize, EmbeddingVector>,
    pub excerpts: Vec<EmbeddingVector>,
}

impl BookEmbeddings {
    /// Embed every prompt's summary and every excerpt's text.
    pub fn compute(
        embedder: &dyn Embedder,
        book: &TokenizedBook,
        prompts: &[crate::dataprep::PromptRecord],
    ) -> Result<Self> {
        let texts: Vec<String> = book.excerpts().iter().map(|e| e.text.clone()).collect();
        let excerpts = embedder.embed(&texts)?;
        let summaries: Vec<String> = prompts
            .iter()
            .map(|p| if p.summary.is_empty() { p.instruction.clone() } else { p.summary.clone() })
            .collect();
        let vectors = embedder.embed(&summaries)?;
        Ok(Self {
            prompts: prompts.iter().map(|p| p.excerpt_id).zip(vectors).collect(),
            excerpts,
        })
    }

    fn similarities(&self, source: usize) -> Result<Vec<f64>> {
        let p = self
            .prompts
            .get(&source)
            .ok_or(Error::MissingPrompt(source))?;
        self.excerpts.iter().map(|e| cosine_similarity(p, e)).collect()
    }
}

/// Rank percentile of `target` among `similarities` (most similar = 1.0,
/// least = 0.0). Tied scores share the average of their ranks.
pub fn rank_percentile(similarities: &[f64], target: usize) -> Result<f64> {
    let n = similarities.len();
    if n < 2 {
        return Err(Error::BookTooSmall(n));
    }
    let t = similarities[target];
    let greater = similarities.iter().filter(|&&s| s > t).count();
    let tied = similarities.iter().filter(|&&s| s == t).count();
    let rank = greater as f64 + (tied as f64 + 1.0) / 2.0;
    Ok(1.0 - (rank - 1.0) / (n as f64 - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub book_id: String,
    pub source_excerpt: usize,
    pub target_excerpt: usize,
    pub rank_percentile: f64,
    pub top_decile: bool,
    pub distance_bin: Option<DistanceBin>,
}

impl RankRecord {
    fn new(pair: &CrossPair, rank_percentile: f64) -> Self {
        Self {
            book_id: pair.book_id.clone(),
            source_excerpt: pair.source_excerpt,
            target_excerpt: pair.target_excerpt,
            rank_percentile,
            top_decile: rank_percentile >= 0.9,
            distance_bin: DistanceBin::of(pair.source_excerpt.abs_diff(pair.target_excerpt)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub group: String,
    pub label: String,
    pub n: usize,
    pub mean_rank: f64,
    pub top10_rate: f64,
}

impl RankRow {
    fn of(group: &str, label: &str, records: &[&RankRecord]) -> Self {
        let n = records.len();
        let (mean_rank, top10_rate) = if n == 0 {
            (0.0, 0.0)
        } else {
            (
                records.iter().map(|r| r.rank_percentile).sum::<f64>() / n as f64,
                records.iter().filter(|r| r.top_decile).count() as f64 / n as f64,
            )
        };
        Self {
            group: group.into(),
            label: label.into(),
            n,
            mean_rank,
            top10_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub rows: Vec<RankRow>,
    /// Deduplicated (book, source, target) records behind the overall row.
    pub records: Vec<RankRecord>,
    pub baseline: Vec<RankRecord>,
}

impl RankTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("group,label,n,mean_rank,top10_rate\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{:.6},{:.6}\n", r.group, r.label, r.n, r.mean_rank, r.top10_rate));
        }
        out
    }
}

/// Rank each cross pair's triggered excerpt among all excerpts of its book by
/// similarity to the source prompt, and summarize overall, per model, per
/// setting and per distance bin, plus a seeded random-excerpt baseline.
pub fn semantic_rank_analysis(
    pairs: &[CrossPair],
    embeddings: &HashMap<String, BookEmbeddings>,
    seed: u64,
) -> Result<RankTable> {
    let mut sims: HashMap<(String, usize), Vec<f64>> = HashMap::new();
    let mut percentile = |book: &str, source: usize, target: usize| -> Result<f64> {
        let key = (book.to_string(), source);
        if !sims.contains_key(&key) {
            let emb = embeddings
                .get(book)
                .ok_or_else(|| Error::InvalidInput(format!("no embeddings for book {book:?}")))?;
            if emb.excerpts.len() < 2 {
                return Err(Error::BookTooSmall(emb.excerpts.len()));
            }
            sims.insert(key.clone(), emb.similarities(source)?);
        }
        let s = &sims[&key];
        if target >= s.len() {
            return Err(Error::UnknownExcerpt(target));
        }
        rank_percentile(s, target)
    };

    let overall: BTreeSet<(String, usize, usize)> = pairs
        .iter()
        .map(|p| (p.book_id.clone(), p.source_excerpt, p.target_excerpt))
        .collect();
    let mut records = Vec::with_capacity(overall.len());
    for (book, src, tgt) in &overall {
        let pair = CrossPair {
            book_id: book.clone(),
            model_id: String::new(),
            setting: String::new(),
            source_excerpt: *src,
            target_excerpt: *tgt,
        };
        records.push(RankRecord::new(&pair, percentile(book, *src, *tgt)?));
    }

    // One uniform draw per pair, in pair order, from a single seeded stream.
    let mut rng = rng_for(seed, &[]);
    let mut baseline = Vec::with_capacity(records.len());
    for r in &records {
        let n = embeddings[&r.book_id].excerpts.len();
        let pick = rng.random_range(0..n);
        let pair = CrossPair {
            book_id: r.book_id.clone(),
            model_id: String::new(),
            setting: String::new(),
            source_excerpt: r.source_excerpt,
            target_excerpt: pick,
        };
        baseline.push(RankRecord::new(&pair, percentile(&r.book_id, r.source_excerpt, pick)?));
    }

    let mut rows = vec![
        RankRow::of("overall", "observed", &records.iter().collect::<Vec<_>>()),
        RankRow::of("overall", "random baseline", &baseline.iter().collect::<Vec<_>>()),
    ];

    let lookup: HashMap<(&str, usize, usize), &RankRecord> = records
        .iter()
        .map(|r| ((r.book_id.as_str(), r.source_excerpt, r.target_excerpt), r))
        .collect();
    let grouped = |group: &str, label_of: &dyn Fn(&CrossPair) -> &str| -> Vec<RankRow> {
        let mut by_label: BTreeMap<&str, BTreeSet<(&str, usize, usize)>> = BTreeMap::new();
        for p in pairs {
            by_label
                .entry(label_of(p))
                .or_default()
                .insert((p.book_id.as_str(), p.source_excerpt, p.target_excerpt));
        }
        by_label
            .into_iter()
            .map(|(label, keys)| {
                let recs: Vec<&RankRecord> = keys.iter().map(|k| lookup[k]).collect();
                RankRow::of(group, label, &recs)
            })
            .collect()
    };
    rows.extend(grouped("model", &|p| p.model_id.as_str()));
    rows.extend(grouped("setting", &|p| p.setting.as_str()));
    for bin in [DistanceBin::Near, DistanceBin::Mid, DistanceBin::Far, DistanceBin::VeryFar] {
        let recs: Vec<&RankRecord> = records.iter().filter(|r| r.distance_bin == Some(bin)).collect();
        rows.push(RankRow::of("distance", bin.label(), &recs));
    }

    Ok(RankTable { rows, records, baseline })
}
