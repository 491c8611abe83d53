//! Provenance search: pick the longest extracted spans of a book and ask an
//! n-gram corpus-count service whether each appears in web text, under exact
//! (raw string) and soft (normalized) matching.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MatchMode, NormalizationProfile, TokenizedBook};
use crate::coverage::select_disjoint_longest;
use crate::error::{Error, Result};
use crate::retry::{Attempt, RetryPolicy};

pub const DEFAULT_TOP_SPANS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceQuery {
    pub book_id: String,
    pub book_start: usize,
    pub book_end: usize,
    pub text: String,
    pub mode: MatchMode,
}

impl ProvenanceQuery {
    /// The span exactly as printed in the book (casing and punctuation kept).
    pub fn exact(book: &TokenizedBook, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            book_id: book.book_id().to_string(),
            book_start: start,
            book_end: end,
            text: book.span_to_raw(start, end)?.to_string(),
            mode: MatchMode::Exact,
        })
    }

    /// The span under soft normalization (casefolded, punctuation stripped).
    pub fn soft(book: &TokenizedBook, start: usize, end: usize) -> Result<Self> {
        Ok(Self {
            book_id: book.book_id().to_string(),
            book_start: start,
            book_end: end,
            text: NormalizationProfile::soft().normalize_text(book.span_to_raw(start, end)?),
            mode: MatchMode::Soft,
        })
    }

    pub fn len_words(&self) -> usize {
        self.book_end - self.book_start
    }
}

/// Anything that can count occurrences of a string in a corpus.
pub trait CorpusCounter: Sync {
    fn count(&self, mode: MatchMode, text: &str) -> Result<u64>;
}

/// In-memory corpus with plain substring search. Soft lookups run against a
/// soft-normalized copy of every document.
#[derive(Debug, Clone, Default)]
pub struct MockCorpus {
    raw: Vec<String>,
    soft: Vec<String>,
}

impl MockCorpus {
    pub fn from_texts<S: Into<String>>(texts: impl IntoIterator<Item = S>) -> Self {
        let profile = NormalizationProfile::soft();
        let raw: Vec<String> = texts.into_iter().map(Into::into).collect();
        let soft = raw.iter().map(|t| profile.normalize_text(t)).collect();
        Self { raw, soft }
    }

    /// Every regular file directly inside `dir`, in file-name order.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths = Vec::new();
        for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.is_file() {
                paths.push(path);
            }
        }
        paths.sort();
        let texts = paths
            .iter()
            .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_texts(texts))
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

impl CorpusCounter for MockCorpus {
    fn count(&self, mode: MatchMode, text: &str) -> Result<u64> {
        if text.is_empty() {
            return Err(Error::InvalidInput("empty corpus query".into()));
        }
        let (docs, needle) = match mode {
            MatchMode::Exact => (&self.raw, text.to_string()),
            MatchMode::Soft => (&self.soft, NormalizationProfile::soft().normalize_text(text)),
        };
        if needle.is_empty() {
            return Ok(0);
        }
        Ok(docs.iter().map(|d| d.matches(needle.as_str()).count() as u64).sum())
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct CountResponse {
    count: u64,
}

/// Client for `GET {base}/count?mode=..&q=..` returning `{"count": n}`.
pub struct HttpCorpusClient {
    base_url: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpCorpusClient {
    pub fn new(base_url: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            agent: retry.agent(),
            retry,
        }
    }
}

impl CorpusCounter for HttpCorpusClient {
    fn count(&self, mode: MatchMode, text: &str) -> Result<u64> {
        let url = format!("{}/count", self.base_url);
        let key = text.bytes().fold(0u64, |h, b| h.wrapping_mul(31).wrapping_add(u64::from(b)));
        self.retry
            .run(key, || {
                let mut resp = self
                    .agent
                    .get(&url)
                    .query("mode", mode.as_str())
                    .query("q", text)
                    .call()?;
                let body: CountResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| Attempt::Retry(format!("bad response: {e}")))?;
                Ok(body.count)
            })
            .map_err(|message| Error::Provider {
                service: "corpus",
                context: url.clone(),
                message,
            })
    }
}

/// Local HTTP server speaking the corpus-count contract, backed by a
/// [`MockCorpus`]. Shuts down when dropped.
pub struct MockCorpusServer {
    server: Arc<tiny_http::Server>,
    handle: Option<JoinHandle<()>>,
    url: String,
    failures_left: Arc<AtomicUsize>,
}

impl MockCorpusServer {
    pub fn start(corpus: MockCorpus) -> Result<Self> {
        Self::start_on("127.0.0.1:0", corpus)
    }

    pub fn start_on(addr: &str, corpus: MockCorpus) -> Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(|e| Error::Provider {
            service: "corpus",
            context: addr.to_string(),
            message: e.to_string(),
        })?;
        let bound = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| Error::InvalidInput("mock server is not bound to an IP address".into()))?;
        let server = Arc::new(server);
        let failures_left = Arc::new(AtomicUsize::new(0));
        let handle = {
            let (server, failures_left) = (Arc::clone(&server), Arc::clone(&failures_left));
            std::thread::spawn(move || {
                for request in server.incoming_requests() {
                    let (status, body) = if failures_left
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                        .is_ok()
                    {
                        (503, r#"{"error":"injected failure"}"#.to_string())
                    } else {
                        answer(&corpus, request.url())
                    };
                    let header = tiny_http::Header::from_bytes("Content-Type", "application/json")
                        .expect("static header is valid");
                    let response = tiny_http::Response::from_string(body)
                        .with_status_code(status)
                        .with_header(header);
                    let _ = request.respond(response);
                }
            })
        };
        Ok(Self {
            server,
            handle: Some(handle),
            url: format!("http://{bound}"),
            failures_left,
        })
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// Answer the next `n` requests with HTTP 503.
    pub fn fail_next(&self, n: usize) {
        self.failures_left.store(n, Ordering::SeqCst);
    }

    /// Block until the server is stopped from another thread (used by the CLI).
    pub fn join(mut self) {
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MockCorpusServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn answer(corpus: &MockCorpus, path_and_query: &str) -> (u16, String) {
    let Ok(url) = url::Url::parse(&format!("http://localhost{path_and_query}")) else {
        return (400, r#"{"error":"bad url"}"#.into());
    };
    if url.path() != "/count" {
        return (404, r#"{"error":"not found"}"#.into());
    }
    let (mut mode, mut q) = (None, None);
    for (k, v) in url.query_pairs() {
        match k.as_ref() {
            "mode" => mode = v.parse::<MatchMode>().ok(),
            "q" => q = Some(v.into_owned()),
            _ => {}
        }
    }
    let (Some(mode), Some(q)) = (mode, q) else {
        return (400, r#"{"error":"expected mode and q"}"#.into());
    };
    match corpus.count(mode, &q) {
        Ok(count) => (200, serde_json::json!({ "count": count }).to_string()),
        Err(e) => (500, serde_json::json!({ "error": e.to_string() }).to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub found: bool,
    pub count: u64,
}

pub fn search_span(client: &dyn CorpusCounter, query: &ProvenanceQuery) -> Result<SearchOutcome> {
    if query.text.is_empty() {
        return Err(Error::InvalidInput(format!(
            "empty query text for span [{}, {}) of {}",
            query.book_start, query.book_end, query.book_id
        )));
    }
    let count = client.count(query.mode, &query.text)?;
    Ok(SearchOutcome { found: count > 0, count })
}

/// Run every query with at most `parallelism` in flight. Results keep the
/// input order.
pub fn run_queries(
    client: &dyn CorpusCounter,
    queries: &[ProvenanceQuery],
    parallelism: usize,
) -> Result<Vec<SearchOutcome>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    pool.install(|| queries.par_iter().map(|q| search_span(client, q)).collect())
}

/// Longest pairwise non-overlapping spans, longest first (ties: smaller start).
pub fn select_top_spans(ranges: impl IntoIterator<Item = (usize, usize)>, n: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    select_disjoint_longest(ranges, Some(n))
}

/// Both-mode provenance of one span.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanProvenance {
    pub book_id: String,
    pub book_start: usize,
    pub book_end: usize,
    pub exact_found: bool,
    pub soft_found: bool,
    pub exact_count: u64,
    pub soft_count: u64,
}

impl SpanProvenance {
    pub fn len_words(&self) -> usize {
        self.book_end - self.book_start
    }

    pub fn found(&self, mode: MatchMode) -> bool {
        match mode {
            MatchMode::Exact => self.exact_found,
            MatchMode::Soft => self.soft_found,
        }
    }
}

/// Query every span in both modes.
pub fn provenance_for_spans(
    client: &dyn CorpusCounter,
    book: &TokenizedBook,
    spans: &[(usize, usize)],
    parallelism: usize,
) -> Result<Vec<SpanProvenance>> {
    let mut queries = Vec::with_capacity(spans.len() * 2);
    for &(s, e) in spans {
        queries.push(ProvenanceQuery::exact(book, s, e)?);
        queries.push(ProvenanceQuery::soft(book, s, e)?);
    }
    let outcomes = run_queries(client, &queries, parallelism)?;
    Ok(spans
        .iter()
        .zip(outcomes.chunks(2))
        .map(|(&(s, e), pair)| SpanProvenance {
            book_id: book.book_id().to_string(),
            book_start: s,
            book_end: e,
            exact_found: pair[0].found,
            soft_found: pair[1].found,
            exact_count: pair[0].count,
            soft_count: pair[1].count,
        })
        .collect())
}

/// Half-open word-length interval; `hi = None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBin {
    pub lo: usize,
    pub hi: Option<usize>,
}

impl LengthBin {
    pub fn contains(&self, len: usize) -> bool {
        len >= self.lo && self.hi.is_none_or(|hi| len < hi)
    }

    pub fn label(&self) -> String {
        match self.hi {
            Some(hi) => format!("[{},{})", self.lo, hi),
            None => format!("[{},inf)", self.lo),
        }
    }
}

pub fn default_bins() -> Vec<LengthBin> {
    vec![
        LengthBin { lo: 50, hi: Some(100) },
        LengthBin { lo: 100, hi: Some(150) },
        LengthBin { lo: 150, hi: None },
    ]
}

/// Parse bin edges like "50,100,150": consecutive pairs plus an open last bin.
pub fn bins_from_edges(edges: &[usize]) -> Result<Vec<LengthBin>> {
    if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("bin edges must be non-empty and strictly increasing".into()));
    }
    Ok(edges
        .iter()
        .enumerate()
        .map(|(i, &lo)| LengthBin {
            lo,
            hi: edges.get(i + 1).copied(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsenceRow {
    /// Bin label, or "all" for the overall row.
    pub bin: String,
    pub mode: MatchMode,
    pub n_queried: usize,
    pub n_absent: usize,
    /// `None` when the bin is empty.
    pub absence_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsenceReport {
    pub bins: Vec<AbsenceRow>,
    pub overall: Vec<AbsenceRow>,
    /// Per book, spans ordered by position.
    pub books: BTreeMap<String, Vec<SpanProvenance>>,
}

fn absence_row(bin: String, mode: MatchMode, results: &[&SpanProvenance]) -> AbsenceRow {
    let n_queried = results.len();
    let n_absent = results.iter().filter(|r| !r.found(mode)).count();
    AbsenceRow {
        bin,
        mode,
        n_queried,
        n_absent,
        absence_rate: (n_queried > 0).then(|| n_absent as f64 / n_queried as f64),
    }
}

/// Absence rates per length bin and mode. Spans outside every bin still count
/// toward the overall rows.
pub fn absence_report(results: &[SpanProvenance], bins: &[LengthBin]) -> AbsenceReport {
    let modes = [MatchMode::Exact, MatchMode::Soft];
    let mut rows = Vec::new();
    for bin in bins {
        let members: Vec<&SpanProvenance> = results.iter().filter(|r| bin.contains(r.len_words())).collect();
        rows.extend(modes.iter().map(|&m| absence_row(bin.label(), m, &members)));
    }
    let all: Vec<&SpanProvenance> = results.iter().collect();
    let overall = modes.iter().map(|&m| absence_row("all".into(), m, &all)).collect();
    let mut books: BTreeMap<String, Vec<SpanProvenance>> = BTreeMap::new();
    for r in results {
        books.entry(r.book_id.clone()).or_default().push(r.clone());
    }
    for list in books.values_mut() {
        list.sort_by_key(|r| (r.book_start, r.book_end));
    }
    AbsenceReport {
        bins: rows,
        overall,
        books,
    }
}

impl AbsenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin,mode,n_queried,n_absent,absence_rate\n");
        for r in self.bins.iter().chain(&self.overall) {
            let rate = r.absence_rate.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
            out.push_str(&format!("{},{},{},{},{}\n", r.bin, r.mode, r.n_queried, r.n_absent, rate));
        }
        out
    }
}
