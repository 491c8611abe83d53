//! Finetuning data preparation: per-excerpt summary prompts, instructions,
//! dataset export, and a seeded memorizing-model simulator used to validate
//! the metrics end to end.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Excerpt, TokenizedBook};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::matcher::Generation;
use crate::retry::{Attempt, RetryPolicy};
use crate::seed::rng_for;

/// One excerpt's finetuning instruction and the pieces it was built from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub excerpt_id: usize,
    pub instruction: String,
    pub target_word_count: usize,
    pub author: String,
    pub summary: String,
}

impl PromptRecord {
    /// Record with an empty instruction, for scoring without prompt trimming.
    pub fn untrimmed(excerpt: &Excerpt) -> Self {
        Self {
            excerpt_id: excerpt.excerpt_id,
            instruction: String::new(),
            target_word_count: excerpt.word_count(),
            author: String::new(),
            summary: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneExample {
    pub input: String,
    pub output: String,
}

pub fn build_summary_prompt(excerpt: &Excerpt) -> Result<String> {
    if excerpt.word_count() == 0 || excerpt.text.is_empty() {
        return Err(Error::InvalidInput(format!("excerpt {} is empty", excerpt.excerpt_id)));
    }
    let response_count = excerpt.word_count().div_ceil(2);
    Ok(format!(
        "Describe in detail ({response_count} words) what is happening in this excerpt. \
         Mention the characters and whether the narration is primarily in the first or third person. \
         Maintain the original sentence order while describing.\n\n{}",
        excerpt.text
    ))
}

pub fn build_instruction(summary: &str, word_count: usize, author: &str) -> Result<String> {
    if summary.is_empty() || author.is_empty() || word_count == 0 {
        return Err(Error::InvalidInput(
            "instruction needs a summary, an author and a positive word count".into(),
        ));
    }
    Ok(format!(
        "Write a {word_count} word paragraph about the content below emulating the style and voice of {author}\n\nContent: {summary}"
    ))
}

/// Wire format of a text-generation request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_words: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
}

pub trait TextGenerator: Sync {
    fn generate(&self, request: &GenerateRequest) -> Result<String>;
}

/// Offline stand-in for a summary model: returns the first `max_words` words
/// of the excerpt embedded in the prompt, lower-cased, after a fixed prefix.
/// Being extractive, its output shares m-grams with the source.
#[derive(Debug, Clone, Copy, Default)]
pub struct MockSummarizer;

pub const MOCK_SUMMARY_PREFIX: &str = "In this excerpt:";

impl TextGenerator for MockSummarizer {
    fn generate(&self, request: &GenerateRequest) -> Result<String> {
        let body = request
            .prompt
            .split_once("\n\n")
            .map_or(request.prompt.as_str(), |(_, rest)| rest);
        let words: Vec<String> = body
            .split_whitespace()
            .take(request.max_words)
            .map(|w| w.chars().flat_map(char::to_lowercase).collect())
            .collect();
        Ok(format!("{MOCK_SUMMARY_PREFIX} {}", words.join(" ")))
    }
}

/// POSTs `{prompt, max_words}` and expects `{text}`.
#[derive(Debug, Clone)]
pub struct HttpTextGenerator {
    url: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

impl HttpTextGenerator {
    pub fn new(url: impl Into<String>, retry: RetryPolicy) -> Self {
        Self {
            url: url.into(),
            agent: retry.agent(),
            retry,
        }
    }
}

impl TextGenerator for HttpTextGenerator {
    fn generate(&self, request: &GenerateRequest) -> Result<String> {
        let key = crate::seed::derive_seed(request.max_words as u64, &[request.prompt.len() as u64]);
        self.retry
            .run(key, || {
                let mut resp = self.agent.post(&self.url).send_json(request)?;
                let body: GenerateResponse = resp
                    .body_mut()
                    .read_json()
                    .map_err(|e| Attempt::Retry(format!("bad response: {e}")))?;
                Ok(body.text)
            })
            .map_err(|message| Error::Provider {
                service: "text generation",
                context: self.url.clone(),
                message,
            })
    }
}

pub fn summarize(provider: &dyn TextGenerator, excerpt: &Excerpt) -> Result<String> {
    let request = GenerateRequest {
        prompt: build_summary_prompt(excerpt)?,
        max_words: excerpt.word_count().div_ceil(2),
    };
    provider.generate(&request).map_err(|e| match e {
        Error::Provider { service, message, .. } => Error::Provider {
            service,
            context: format!("excerpt {}", excerpt.excerpt_id),
            message,
        },
        other => other,
    })
}

/// Summarize every excerpt (at most `parallelism` requests in flight) and
/// build its instruction. Output is ordered by excerpt id.
pub fn prepare_prompts(
    book: &TokenizedBook,
    author: &str,
    provider: &dyn TextGenerator,
    parallelism: usize,
) -> Result<Vec<PromptRecord>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    pool.install(|| {
        book.excerpts()
            .par_iter()
            .map(|e| {
                let summary = summarize(provider, e)?;
                Ok(PromptRecord {
                    excerpt_id: e.excerpt_id,
                    instruction: build_instruction(&summary, e.word_count(), author)?,
                    target_word_count: e.word_count(),
                    author: author.to_string(),
                    summary,
                })
            })
            .collect()
    })
}

pub fn read_prompts(path: &Path) -> Result<Vec<PromptRecord>> {
    jsonl::read_jsonl(path)
}

pub fn write_prompts(path: &Path, prompts: &[PromptRecord]) -> Result<()> {
    jsonl::write_jsonl(path, prompts)
}

pub fn finetune_examples(prompts: &[PromptRecord], excerpts: &[Excerpt]) -> Result<Vec<FinetuneExample>> {
    let by_id: HashMap<usize, &PromptRecord> = prompts.iter().map(|p| (p.excerpt_id, p)).collect();
    excerpts
        .iter()
        .map(|e| {
            let p = by_id.get(&e.excerpt_id).ok_or(Error::MissingPrompt(e.excerpt_id))?;
            Ok(FinetuneExample {
                input: p.instruction.clone(),
                output: e.text.clone(),
            })
        })
        .collect()
}

/// One `{input, output}` JSON object per line, in excerpt order.
pub fn export_finetune_dataset(prompts: &[PromptRecord], excerpts: &[Excerpt], path: &Path) -> Result<()> {
    jsonl::write_jsonl(path, &finetune_examples(prompts, excerpts)?)
}

/// Training settings kept alongside an exported dataset for the record.
/// Nothing in this crate consumes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneMetadata {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub lora_rank: usize,
    pub max_length: usize,
    pub sampling_temperature: f64,
    pub samples_per_excerpt: usize,
}

impl Default for FinetuneMetadata {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 16,
            lora_rank: 32,
            max_length: 2048,
            sampling_temperature: 1.0,
            samples_per_excerpt: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayLength {
    Full,
    Words(usize),
}

impl FromStr for ReplayLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(ReplayLength::Full);
        }
        s.parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(ReplayLength::Words)
            .ok_or_else(|| Error::InvalidInput(format!("replay length must be 'full' or a positive integer, got {s:?}")))
    }
}

impl fmt::Display for ReplayLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReplayLength::Full => f.write_str("full"),
            ReplayLength::Words(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatorConfig {
    pub p_memorize: f64,
    pub replay: ReplayLength,
    pub filler_vocab: Vec<String>,
    pub seed: u64,
    pub model_id: String,
}

impl SimulatorConfig {
    pub fn new(p_memorize: f64, replay: ReplayLength, seed: u64) -> Self {
        Self {
            p_memorize,
            replay,
            filler_vocab: default_filler_vocab(64),
            seed,
            model_id: "simulated".into(),
        }
    }
}

/// Pseudo-words of the form `zqv17x`; disjoint from ordinary prose.
pub fn default_filler_vocab(size: usize) -> Vec<String> {
    (0..size).map(|i| format!("zqv{i}x")).collect()
}

/// A simulated generation and the book range it replays, if any.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimulatedGeneration {
    pub generation: Generation,
    pub replay: Option<(usize, usize)>,
}

/// Like [`simulate_generations`], also reporting each replayed range.
pub fn simulate_with_trace(
    book: &TokenizedBook,
    prompts: &[PromptRecord],
    config: &SimulatorConfig,
    samples: usize,
) -> Result<Vec<SimulatedGeneration>> {
    if !(0.0..=1.0).contains(&config.p_memorize) {
        return Err(Error::InvalidInput(format!("p_memorize {} outside [0, 1]", config.p_memorize)));
    }
    if config.filler_vocab.is_empty() {
        return Err(Error::InvalidInput("filler vocabulary is empty".into()));
    }
    let book_vocab: HashSet<&str> = book.words().iter().map(String::as_str).collect();
    for f in &config.filler_vocab {
        let toks = book.profile().words(f);
        if toks.len() != 1 || book_vocab.contains(toks[0].as_str()) {
            return Err(Error::InvalidInput(format!(
                "filler word {f:?} is not a single token disjoint from the book"
            )));
        }
    }
    let mut ordered: Vec<&PromptRecord> = prompts.iter().collect();
    ordered.sort_by_key(|p| p.excerpt_id);

    let mut out = Vec::with_capacity(ordered.len() * samples);
    for p in ordered {
        let ex = book.excerpt(p.excerpt_id).ok_or(Error::UnknownExcerpt(p.excerpt_id))?;
        let len = ex.word_count();
        let replay_len = match config.replay {
            ReplayLength::Full => len,
            ReplayLength::Words(n) => n.min(len),
        };
        for sample_idx in 0..samples {
            let mut rng = rng_for(config.seed, &[ex.excerpt_id as u64, sample_idx as u64]);
            let draw: f64 = rng.random();
            let (text, replay) = if draw < config.p_memorize {
                let start = ex.word_start + rng.random_range(0..=len - replay_len);
                let end = start + replay_len;
                (book.span_to_raw(start, end)?.to_string(), Some((start, end)))
            } else {
                let words: Vec<&str> = (0..replay_len)
                    .map(|_| config.filler_vocab[rng.random_range(0..config.filler_vocab.len())].as_str())
                    .collect();
                (words.join(" "), None)
            };
            out.push(SimulatedGeneration {
                generation: Generation::new(ex.excerpt_id, sample_idx, &config.model_id, text, book.profile()),
                replay,
            });
        }
    }
    Ok(out)
}

/// Seeded generations: each (excerpt, sample) independently replays book text
/// with probability `p_memorize`, otherwise emits filler of the same length.
pub fn simulate_generations(
    book: &TokenizedBook,
    prompts: &[PromptRecord],
    config: &SimulatorConfig,
    samples: usize,
) -> Result<Vec<Generation>> {
    Ok(simulate_with_trace(book, prompts, config, samples)?
        .into_iter()
        .map(|s| s.generation)
        .collect())
}
