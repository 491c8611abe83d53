use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use bookmem::agreement::{self, MaskPairStats, SelfAgreement};
use bookmem::attribution::{
    self, BookEmbeddings, CrossParagraphResult, Embedder, HashingEmbedder, HttpEmbedder, SpanEvidence,
};
use bookmem::corpus::{self, BookMeta, MatchMode, NormalizationProfile, RawBook, TokenizedBook};
use bookmem::coverage::{self, BmcConfig, MaskFile, Scorer};
use bookmem::dataprep::{self, FinetuneMetadata, MockSummarizer, PromptRecord, ReplayLength, SimulatorConfig};
use bookmem::jsonl;
use bookmem::matcher::{self, BookIndex, Generation};
use bookmem::provenance::{self, CorpusCounter, HttpCorpusClient, MockCorpus, MockCorpusServer};
use bookmem::retry::RetryPolicy;

use crate::config::Config;
use crate::{usage, BookArgs, Command, MatchArgs};

const DEFAULT_MIN_WORDS: usize = 300;
const DEFAULT_MAX_WORDS: usize = 500;
const DEFAULT_SEED: u64 = 0;

pub fn resolve_mode(cfg: &Config, flag: Option<&str>) -> Result<MatchMode> {
    let raw = cfg.pick_opt(flag.map(str::to_string), "mode")?;
    match raw {
        None => Ok(MatchMode::Exact),
        Some(s) => s.parse().map_err(|_| usage!("--mode must be 'exact' or 'soft', got {s:?}")),
    }
}

pub fn dispatch(command: Command, cfg: &Config, mode: MatchMode) -> Result<()> {
    let profile = NormalizationProfile::for_mode(mode);
    match command {
        Command::Ingest { book, meta, out } => ingest(&book, meta.as_deref(), &profile, &out),
        Command::Segment {
            book,
            meta,
            min_words,
            max_words,
            out,
        } => {
            let raw = load_raw(&book, meta.as_deref())?;
            let (min, max) = segment_bounds(cfg, min_words, max_words)?;
            let tokenized = corpus::tokenize(&raw, &profile)?.segment(min, max)?;
            corpus::write_excerpts(&out, &tokenized)?;
            eprintln!("{} excerpts -> {}", tokenized.excerpts().len(), out.display());
            Ok(())
        }
        Command::Prepare {
            book,
            provider,
            generate_url,
            parallelism,
            out,
            finetune_out,
        } => {
            let (raw, tokenized) = load_book(cfg, &book, &profile)?;
            let parallelism = cfg.pick(parallelism, "parallelism", 4)?;
            let prompts = match provider.as_str() {
                "mock" => dataprep::prepare_prompts(&tokenized, &raw.author, &MockSummarizer, parallelism)?,
                "http" => {
                    let url = cfg
                        .pick_opt(generate_url, "generate_url")?
                        .ok_or_else(|| usage!("--provider http needs --generate-url or BOOKMEM_GENERATE_URL"))?;
                    let client = dataprep::HttpTextGenerator::new(url, retry_policy(cfg)?);
                    dataprep::prepare_prompts(&tokenized, &raw.author, &client, parallelism)?
                }
                other => return Err(usage!("unknown provider {other:?} (expected mock or http)")),
            };
            dataprep::write_prompts(&out, &prompts)?;
            if let Some(ft) = finetune_out {
                dataprep::export_finetune_dataset(&prompts, tokenized.excerpts(), &ft)?;
                jsonl::write_json(&ft.with_extension("meta.json"), &FinetuneMetadata::default())?;
            }
            eprintln!("{} prompts -> {}", prompts.len(), out.display());
            Ok(())
        }
        Command::Simulate {
            book,
            prompts,
            p,
            replay,
            samples,
            seed,
            model_id,
            out,
        } => {
            let (_, tokenized) = load_book(cfg, &book, &profile)?;
            let prompts = load_prompts(prompts.as_deref(), &tokenized)?;
            let p = cfg.pick(p, "p_memorize", 0.5)?;
            let replay: ReplayLength = cfg
                .pick(replay, "replay", "full".to_string())?
                .parse()
                .map_err(|e| usage!("{e}"))?;
            let mut sim = SimulatorConfig::new(p, replay, cfg.pick(seed, "seed", DEFAULT_SEED)?);
            sim.model_id = cfg.pick(model_id, "model_id", "simulated".to_string())?;
            let samples = cfg.pick(samples, "samples", BmcConfig::default().samples_per_excerpt)?;
            let gens = dataprep::simulate_generations(&tokenized, &prompts, &sim, samples)?;
            matcher::write_generations(&out, &gens)?;
            eprintln!("{} generations -> {}", gens.len(), out.display());
            Ok(())
        }
        Command::Score {
            book,
            generations,
            prompts,
            matching,
            out,
            out_dir,
            per_excerpt,
        } => score(cfg, &profile, &book, &generations, prompts.as_deref(), &matching, out, out_dir, per_excerpt),
        Command::Stats {
            book,
            generations,
            matching,
            top,
            out,
        } => stats(cfg, &profile, &book, &generations, &matching, top, out.as_deref()),
        Command::Crosspara {
            book,
            generations,
            prompts,
            k,
            min_span_words,
            setting,
            out,
            rank_out,
            include_same_excerpt,
            embedder,
            embed_url,
            embed_dim,
            seed,
        } => {
            let (_, tokenized) = load_book(cfg, &book, &profile)?;
            let gens = load_generations(&generations, &profile)?;
            let k = cfg.pick(k, "k", BmcConfig::default().k)?;
            let min_span = cfg.pick(min_span_words, "min_span_words", BmcConfig::default().span_count_threshold)?;
            let mut results = Vec::new();
            let mut pairs = Vec::new();
            for (model, model_gens) in by_model(&gens) {
                let r = attribution::cross_paragraph_ratio(&tokenized, &model_gens, k, min_span)?;
                pairs.extend(attribution::cross_pairs(
                    tokenized.book_id(),
                    &model,
                    &setting,
                    &r.evidence,
                    include_same_excerpt,
                ));
                results.push(CrossOutput::new(tokenized.book_id(), &model, &setting, r));
            }
            jsonl::write_json(&out, &results)?;
            if let Some(rank_out) = rank_out {
                let prompts_path = prompts
                    .as_deref()
                    .ok_or_else(|| usage!("--rank-out needs --prompts (summaries are embedded)"))?;
                let prompts = dataprep::read_prompts(prompts_path)?;
                let embedder: Box<dyn Embedder> = match embedder.as_str() {
                    "hashing" => Box::new(HashingEmbedder::new(embed_dim)),
                    "http" => {
                        let url = cfg
                            .pick_opt(embed_url, "embed_url")?
                            .ok_or_else(|| usage!("--embedder http needs --embed-url or BOOKMEM_EMBED_URL"))?;
                        Box::new(HttpEmbedder::new(url, retry_policy(cfg)?))
                    }
                    other => return Err(usage!("unknown embedder {other:?} (expected hashing or http)")),
                };
                let emb = BookEmbeddings::compute(embedder.as_ref(), &tokenized, &prompts)?;
                let embeddings = HashMap::from([(tokenized.book_id().to_string(), emb)]);
                let table =
                    attribution::semantic_rank_analysis(&pairs, &embeddings, cfg.pick(seed, "seed", DEFAULT_SEED)?)?;
                write_text(&rank_out, &table.to_csv())?;
            }
            for r in &results {
                emit(format_args!("{}\t{}\t{:.6}", r.book_id, r.model_id, r.ratio));
            }
            Ok(())
        }
        Command::Agree {
            book,
            generations,
            prompts,
            matching,
            split_trials,
            shuffle_trials,
            seed,
            out,
        } => {
            let (_, tokenized) = load_book(cfg, &book, &profile)?;
            let gens = load_generations(&generations, &profile)?;
            let prompts = load_prompts(prompts.as_deref(), &tokenized)?;
            let config = bmc_config(cfg, &matching)?;
            let split_trials = cfg.pick(split_trials, "split_trials", 10)?;
            let shuffle_trials = cfg.pick(shuffle_trials, "shuffle_trials", 100)?;
            let seed = cfg.pick(seed, "seed", DEFAULT_SEED)?;
            let output = agree(&tokenized, &prompts, &gens, &config, split_trials, shuffle_trials, seed)?;
            jsonl::write_json(&out, &output)?;
            for p in &output.pairs {
                emit(format_args!("{}\t{}\t{:.6}", p.model_a, p.model_b, p.jaccard));
            }
            Ok(())
        }
        Command::Provenance {
            book,
            meta,
            excerpts,
            generations,
            k,
            top,
            corpus_url,
            corpus_dir,
            serve,
            bins,
            parallelism,
            out_csv,
            out_json,
        } => {
            if let Some(addr) = serve {
                let dir = corpus_dir.expect("clap enforces --corpus-dir with --serve");
                let server = MockCorpusServer::start_on(&addr, MockCorpus::from_dir(&dir)?)?;
                emit(format_args!("{}", server.url()));
                server.join();
                return Ok(());
            }
            let book = BookArgs {
                book: book.ok_or_else(|| usage!("--book is required"))?,
                meta,
                excerpts,
            };
            let (_, tokenized) = load_book(cfg, &book, &profile)?;
            let gens = load_generations(&generations, &profile)?;
            let k = cfg.pick(k, "k", BmcConfig::default().k)?;
            let top = cfg.pick(top, "top_spans", provenance::DEFAULT_TOP_SPANS)?;
            if top == 0 {
                return Err(usage!("--top must be at least 1"));
            }
            let bins = match cfg.pick_opt(bins, "bins")? {
                Some(edges) => provenance::bins_from_edges(&edges).map_err(|e| usage!("{e}"))?,
                None => provenance::default_bins(),
            };
            let index = BookIndex::for_book(&tokenized, k)?;
            let ranges: Vec<(usize, usize)> = gens
                .iter()
                .flat_map(|g| index.find(&g.words))
                .map(|s| s.book_range())
                .collect();
            let spans = provenance::select_top_spans(ranges, top);
            let counter: Box<dyn CorpusCounter> = match (corpus_dir, cfg.pick_opt(corpus_url, "corpus_url")?) {
                (Some(dir), _) => Box::new(MockCorpus::from_dir(&dir)?),
                (None, Some(url)) => Box::new(HttpCorpusClient::new(url, retry_policy(cfg)?)),
                (None, None) => return Err(usage!("need --corpus-dir, --corpus-url or BOOKMEM_CORPUS_URL")),
            };
            let parallelism = cfg.pick(parallelism, "parallelism", 8)?;
            let results = provenance::provenance_for_spans(counter.as_ref(), &tokenized, &spans, parallelism)?;
            let report = provenance::absence_report(&results, &bins);
            if let Some(path) = &out_json {
                jsonl::write_json(path, &report)?;
            }
            match &out_csv {
                Some(path) => write_text(path, &report.to_csv())?,
                None => emit(format_args!("{}", report.to_csv().trim_end())),
            }
            Ok(())
        }
        Command::Report { reports, agree, out_dir } => crate::report::run(&reports, &agree, &out_dir),
    }
}

fn ingest(book: &Path, meta: Option<&Path>, profile: &NormalizationProfile, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Ingested<'a> {
        book_id: &'a str,
        title: &'a str,
        author: &'a str,
        mode: MatchMode,
        n_words: usize,
        words: &'a [String],
    }
    let raw = load_raw(book, meta)?;
    let tokenized = corpus::tokenize(&raw, profile)?;
    jsonl::write_json(
        out,
        &Ingested {
            book_id: &raw.book_id,
            title: &raw.title,
            author: &raw.author,
            mode: profile.mode(),
            n_words: tokenized.len(),
            words: tokenized.words(),
        },
    )?;
    eprintln!("{}: {} words -> {}", raw.book_id, tokenized.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn score(
    cfg: &Config,
    profile: &NormalizationProfile,
    book: &BookArgs,
    generations: &[PathBuf],
    prompts: Option<&Path>,
    matching: &MatchArgs,
    out: Option<PathBuf>,
    out_dir: Option<PathBuf>,
    per_excerpt: bool,
) -> Result<()> {
    let (_, tokenized) = load_book(cfg, book, profile)?;
    let gens = load_generations(generations, profile)?;
    let prompts = load_prompts(prompts, &tokenized)?;
    let config = bmc_config(cfg, matching)?;
    let scorer = Scorer::new(&tokenized, &prompts, &config)?;
    let grouped = by_model(&gens);
    if out.is_some() && grouped.len() > 1 {
        return Err(usage!(
            "--out takes a single model but the generations hold {}; use --out-dir",
            grouped.len()
        ));
    }
    if let Some(dir) = &out_dir {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut summaries = Vec::new();
    for (model, model_gens) in &grouped {
        let report = scorer.report(model, model_gens)?;
        let report_path = match (&out, &out_dir) {
            (Some(p), _) => Some(p.clone()),
            (None, Some(dir)) => Some(dir.join(format!("{}__{}.report.json", file_id(&report.book_id), file_id(model)))),
            (None, None) => None,
        };
        if let Some(path) = report_path {
            jsonl::write_json(&path, &report.summary())?;
            let stem = path.to_string_lossy();
            let stem = stem.strip_suffix(".report.json").or_else(|| stem.strip_suffix(".json")).unwrap_or(&stem);
            jsonl::write_json(
                Path::new(&format!("{stem}.mask.json")),
                &MaskFile::new(&report.book_id, model, &report.mask),
            )?;
            if per_excerpt {
                let rows = coverage::per_excerpt_coverage(&tokenized, &report.mask);
                write_text(Path::new(&format!("{stem}.excerpts.csv")), &coverage::per_excerpt_csv(&rows))?;
            }
        }
        summaries.push(report.summary());
    }
    if out.is_none() && out_dir.is_none() {
        let json = match summaries.as_slice() {
            [one] => serde_json::to_string_pretty(one)?,
            many => serde_json::to_string_pretty(many)?,
        };
        emit(format_args!("{json}"));
    } else {
        for s in &summaries {
            emit(format_args!("{}\t{}\tbmc={:.6}", s.book_id, s.model_id, s.bmc));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct TopSpan {
    book_start: usize,
    book_end: usize,
    words: usize,
    text: String,
}

#[derive(Serialize)]
struct ModelStats {
    book_id: String,
    model_id: String,
    longest_regurgitated_words: usize,
    n_spans_over_threshold: usize,
    top_spans: Vec<TopSpan>,
}

fn stats(
    cfg: &Config,
    profile: &NormalizationProfile,
    book: &BookArgs,
    generations: &[PathBuf],
    matching: &MatchArgs,
    top: usize,
    out: Option<&Path>,
) -> Result<()> {
    let (_, tokenized) = load_book(cfg, book, profile)?;
    let gens = load_generations(generations, profile)?;
    let config = bmc_config(cfg, matching)?;
    let index = BookIndex::for_book(&tokenized, config.k)?;
    let mut all = Vec::new();
    for (model, model_gens) in by_model(&gens) {
        let ranges: Vec<(usize, usize)> = model_gens
            .iter()
            .flat_map(|g| index.find(&g.words))
            .map(|s| s.book_range())
            .collect();
        let top_spans = coverage::select_disjoint_longest(ranges, Some(top))
            .into_iter()
            .map(|(s, e)| {
                Ok(TopSpan {
                    book_start: s,
                    book_end: e,
                    words: e - s,
                    text: tokenized.span_to_raw(s, e)?.to_string(),
                })
            })
            .collect::<bookmem::Result<Vec<_>>>()?;
        all.push(ModelStats {
            book_id: tokenized.book_id().to_string(),
            longest_regurgitated_words: coverage::longest_regurgitated_span(&model_gens, &tokenized, config.k)?,
            n_spans_over_threshold: coverage::count_spans_over_threshold(
                &model_gens,
                &tokenized,
                config.k,
                config.span_count_threshold,
            )?,
            model_id: model,
            top_spans,
        });
    }
    match out {
        Some(path) => jsonl::write_json(path, &all)?,
        None => emit(format_args!("{}", serde_json::to_string_pretty(&all)?)),
    }
    Ok(())
}

/// Cross-paragraph result of one model, as written by `crosspara`.
#[derive(Debug, Serialize, Deserialize)]
pub struct CrossOutput {
    pub book_id: String,
    pub model_id: String,
    pub setting: String,
    pub ratio: f64,
    pub n_unique_spans: usize,
    pub n_cross_spans: usize,
    pub evidence: Vec<SpanEvidence>,
}

impl CrossOutput {
    fn new(book_id: &str, model_id: &str, setting: &str, r: CrossParagraphResult) -> Self {
        Self {
            book_id: book_id.to_string(),
            model_id: model_id.to_string(),
            setting: setting.to_string(),
            ratio: r.ratio,
            n_unique_spans: r.n_unique_spans,
            n_cross_spans: r.n_cross_spans,
            evidence: r.evidence,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelAgreement {
    pub model_id: String,
    pub bmc: f64,
    /// Absent when some excerpt has fewer than two generations.
    pub self_agreement: Option<SelfAgreement>,
}

/// Output of `agree` for one book.
#[derive(Debug, Serialize, Deserialize)]
pub struct AgreeOutput {
    pub book_id: String,
    pub models: Vec<ModelAgreement>,
    pub pairs: Vec<MaskPairStats>,
}

fn agree(
    book: &TokenizedBook,
    prompts: &[PromptRecord],
    gens: &[Generation],
    config: &BmcConfig,
    split_trials: usize,
    shuffle_trials: usize,
    seed: u64,
) -> Result<AgreeOutput> {
    let scorer = Scorer::new(book, prompts, config)?;
    let mut models = Vec::new();
    let mut masks = Vec::new();
    for (model, model_gens) in by_model(gens) {
        let report = scorer.report(&model, &model_gens)?;
        let mut per_excerpt: BTreeMap<usize, usize> = BTreeMap::new();
        for g in &model_gens {
            *per_excerpt.entry(g.excerpt_id).or_default() += 1;
        }
        let self_agreement = if per_excerpt.values().all(|&n| n >= 2) {
            Some(agreement::split_half_self_agreement(&scorer, &model_gens, split_trials, seed)?)
        } else {
            None
        };
        models.push(ModelAgreement {
            model_id: model.clone(),
            bmc: report.bmc,
            self_agreement,
        });
        masks.push((model, report.mask));
    }
    let mut pairs = Vec::new();
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            let self_of = |idx: usize| models[idx].self_agreement.map(|s| s.mean_jaccard);
            pairs.push(agreement::mask_pair_stats(
                book.book_id(),
                (&masks[i].0, &masks[i].1),
                (&masks[j].0, &masks[j].1),
                self_of(i),
                self_of(j),
                shuffle_trials,
                seed,
            )?);
        }
    }
    Ok(AgreeOutput {
        book_id: book.book_id().to_string(),
        models,
        pairs,
    })
}

/// Load the raw book. Without a sidecar next to the text, the file stem
/// serves as id and title.
fn load_raw(book: &Path, meta: Option<&Path>) -> Result<RawBook> {
    let default_meta = book.with_extension("json");
    match meta {
        Some(m) => Ok(RawBook::load(book, m)?),
        None if default_meta.is_file() => Ok(RawBook::load(book, &default_meta)?),
        None => {
            let text = std::fs::read_to_string(book)
                .map_err(|e| bookmem::Error::Io { path: book.to_path_buf(), source: e })?;
            let stem = book
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "book".into());
            let meta = BookMeta {
                book_id: stem.clone(),
                title: stem,
                author: "unknown".into(),
            };
            Ok(RawBook::new(meta, text))
        }
    }
}

fn segment_bounds(cfg: &Config, min: Option<usize>, max: Option<usize>) -> Result<(usize, usize)> {
    let min = cfg.pick(min, "min_words", DEFAULT_MIN_WORDS)?;
    let max = cfg.pick(max, "max_words", DEFAULT_MAX_WORDS)?;
    if min == 0 || min > max {
        return Err(usage!("excerpt bounds must satisfy 1 <= min <= max (got {min}, {max})"));
    }
    Ok((min, max))
}

fn load_book(cfg: &Config, args: &BookArgs, profile: &NormalizationProfile) -> Result<(RawBook, TokenizedBook)> {
    let raw = load_raw(&args.book, args.meta.as_deref())?;
    let tokenized = corpus::tokenize(&raw, profile)?;
    let tokenized = match &args.excerpts {
        Some(path) => tokenized.with_excerpts(&corpus::read_excerpts(path)?)?,
        None => {
            let (min, max) = segment_bounds(cfg, None, None)?;
            tokenized.segment(min, max)?
        }
    };
    Ok((raw, tokenized))
}

fn load_generations(paths: &[PathBuf], profile: &NormalizationProfile) -> Result<Vec<Generation>> {
    if paths.is_empty() {
        return Err(usage!("at least one --generations file is required"));
    }
    let mut all = Vec::new();
    let mut seen = HashSet::new();
    for path in paths {
        for g in matcher::read_generations(path, profile)? {
            if !seen.insert((g.model_id.clone(), g.excerpt_id, g.sample_idx)) {
                return Err(bookmem::Error::InvalidInput(format!(
                    "{}: sample {} of excerpt {} for model {:?} already seen in an earlier file",
                    path.display(),
                    g.sample_idx,
                    g.excerpt_id,
                    g.model_id
                ))
                .into());
            }
            all.push(g);
        }
    }
    Ok(all)
}

/// Prompts from file, or empty instructions for every excerpt.
fn load_prompts(path: Option<&Path>, book: &TokenizedBook) -> Result<Vec<PromptRecord>> {
    Ok(match path {
        Some(p) => dataprep::read_prompts(p)?,
        None => book.excerpts().iter().map(PromptRecord::untrimmed).collect(),
    })
}

fn bmc_config(cfg: &Config, matching: &MatchArgs) -> Result<BmcConfig> {
    let d = BmcConfig::default();
    let config = BmcConfig {
        k: cfg.pick(matching.k, "k", d.k)?,
        m: cfg.pick(matching.m, "m", d.m)?,
        samples_per_excerpt: cfg.pick(None, "samples", d.samples_per_excerpt)?,
        span_count_threshold: cfg.pick(matching.threshold, "threshold", d.span_count_threshold)?,
    };
    config.validate().map_err(|e| usage!("{e}"))?;
    Ok(config)
}

fn retry_policy(cfg: &Config) -> Result<RetryPolicy> {
    let d = RetryPolicy::default();
    Ok(RetryPolicy {
        max_attempts: cfg.pick(None, "retry_attempts", d.max_attempts)?,
        base_delay_ms: cfg.pick(None, "retry_base_delay_ms", d.base_delay_ms)?,
        max_delay_ms: cfg.pick(None, "retry_max_delay_ms", d.max_delay_ms)?,
        timeout_ms: cfg.pick(None, "timeout_ms", d.timeout_ms)?,
        seed: cfg.pick(None, "seed", d.seed)?,
    })
}

/// Generations grouped by model, models in name order.
fn by_model(gens: &[Generation]) -> BTreeMap<String, Vec<Generation>> {
    let mut out: BTreeMap<String, Vec<Generation>> = BTreeMap::new();
    for g in gens {
        out.entry(g.model_id.clone()).or_default().push(g.clone());
    }
    out
}

/// Identifier made safe for use in a file name.
pub fn file_id(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect()
}

/// Print a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(args: std::fmt::Arguments<'_>) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout().lock(), "{args}");
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
