//! Acceptance gate. Prints one `criterion N: PASS|FAIL` line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset (`cargo test --test acceptance -- 3 7`).

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;

use bookmem::agreement::{self, average_ranks, pearson, spearman};
use bookmem::attribution::{self, BookEmbeddings, CrossPair, EmbeddingVector};
use bookmem::corpus::{tokenize, BookMeta, ExcerptRecord, MatchMode, NormalizationProfile, RawBook, TokenizedBook};
use bookmem::coverage::{self, BmcConfig, CoverageMask, Scorer};
use bookmem::dataprep::{self, PromptRecord, ReplayLength, SimulatorConfig};
use bookmem::matcher::{BookIndex, Generation};
use bookmem::provenance::{
    self, absence_report, CorpusCounter, HttpCorpusClient, LengthBin, MockCorpus, MockCorpusServer, ProvenanceQuery,
    SpanProvenance,
};
use bookmem::retry::RetryPolicy;
use bookmem::seed::rng_for;

type Check = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if $cond {
        } else {
            return Err(format!($($arg)*));
        }
    };
}

// ---------------------------------------------------------------------------
// Shared builders and independent oracles
// ---------------------------------------------------------------------------

fn meta(id: &str) -> BookMeta {
    BookMeta {
        book_id: id.into(),
        title: id.into(),
        author: "Test Author".into(),
    }
}

/// Render words as prose: a period every `sentence` words, a blank line every
/// `paragraph` words. Tokenizes back to exactly `words` in exact mode.
fn prose(words: &[String], sentence: usize, paragraph: usize) -> String {
    let mut text = String::new();
    for (i, w) in words.iter().enumerate() {
        if i > 0 {
            text.push_str(if i % paragraph == 0 { "\n\n" } else { " " });
        }
        text.push_str(w);
        if (i + 1) % sentence == 0 || i + 1 == words.len() {
            text.push('.');
        }
    }
    text
}

fn book_from_words(id: &str, words: &[String]) -> TokenizedBook {
    let book = tokenize(&RawBook::new(meta(id), prose(words, 11, 97)), &NormalizationProfile::exact()).unwrap();
    assert_eq!(book.words(), words, "test book must tokenize back to its words");
    book
}

fn with_ranges(book: TokenizedBook, ranges: &[(usize, usize)]) -> TokenizedBook {
    let records: Vec<ExcerptRecord> = ranges
        .iter()
        .enumerate()
        .map(|(i, &(s, e))| ExcerptRecord {
            book_id: book.book_id().into(),
            excerpt_id: i,
            word_start: s,
            word_end: e,
            text: String::new(),
        })
        .collect();
    book.with_excerpts(&records).unwrap()
}

/// Every word distinct, so a replayed range can only match where it came from.
fn distinct_words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

fn random_words(rng: &mut impl Rng, vocab: usize, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("t{}", rng.random_range(0..vocab))).collect()
}

/// A generation mixing copied book slices with random words.
fn mixed_generation(rng: &mut impl Rng, book: &[String], vocab: usize, len: usize) -> Vec<String> {
    let mut g = Vec::with_capacity(len + 40);
    while g.len() < len {
        if rng.random_bool(0.5) && !book.is_empty() {
            let n = rng.random_range(1..=40.min(book.len()));
            let s = rng.random_range(0..=book.len() - n);
            g.extend_from_slice(&book[s..s + n]);
        } else {
            let n = rng.random_range(1..=20);
            g.extend(random_words(rng, vocab, n));
        }
    }
    g.truncate(len);
    g
}

/// Equal-length runs, found by testing every (i, j) start pair directly.
/// Returns (book_start, book_end, gen_start, gen_end).
fn naive_maximal_matches(gen: &[String], book: &[String], k: usize) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for i in 0..gen.len() {
        for j in 0..book.len() {
            if gen[i] != book[j] || (i > 0 && j > 0 && gen[i - 1] == book[j - 1]) {
                continue;
            }
            let mut len = 0;
            while i + len < gen.len() && j + len < book.len() && gen[i + len] == book[j + len] {
                len += 1;
            }
            if len >= k {
                out.push((j, j + len, i, i + len));
            }
        }
    }
    out.sort_unstable();
    out
}

/// Coverage computed step by step as the metric is defined: every maximal
/// match of at least k words, minus positions under a book-side m-gram shared
/// with the instruction, keeping remaining pieces of at least k words.
fn literal_coverage(
    book: &[String],
    runs: &[(Vec<String>, Vec<String>)], // (generation words, instruction words)
    k: usize,
    m: usize,
) -> Vec<bool> {
    let mut covered = vec![false; book.len()];
    for (g, instruction) in runs {
        let inst_grams: HashSet<&[String]> = if instruction.len() >= m {
            instruction.windows(m).collect()
        } else {
            HashSet::new()
        };
        for (s, e, _, _) in naive_maximal_matches(g, book, k) {
            let mut removed = vec![false; e - s];
            if e - s >= m {
                for p in s..=e - m {
                    if inst_grams.contains(&book[p..p + m]) {
                        for r in &mut removed[p - s..p - s + m] {
                            *r = true;
                        }
                    }
                }
            }
            let mut p = s;
            while p < e {
                if removed[p - s] {
                    p += 1;
                    continue;
                }
                let start = p;
                while p < e && !removed[p - s] {
                    p += 1;
                }
                if p - start >= k {
                    for c in &mut covered[start..p] {
                        *c = true;
                    }
                }
            }
        }
    }
    covered
}

fn gen(excerpt_id: usize, sample_idx: usize, words: &[String]) -> Generation {
    Generation::new(excerpt_id, sample_idx, "model", words.join(" "), &NormalizationProfile::exact())
}

fn prompt(excerpt_id: usize, instruction: &[String]) -> PromptRecord {
    PromptRecord {
        excerpt_id,
        instruction: instruction.join(" "),
        target_word_count: 0,
        author: String::new(),
        summary: String::new(),
    }
}

fn fixture_book() -> RawBook {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    RawBook::load(&dir.join("lantern_keeper.txt"), &dir.join("lantern_keeper.json")).unwrap()
}

/// A random book split into at most 10 tiled excerpts, with per-excerpt
/// instructions that carry planted book m-grams and random generations.
struct Instance {
    book: TokenizedBook,
    prompts: Vec<PromptRecord>,
    gens: Vec<Generation>,
    k: usize,
    m: usize,
}

fn random_instance(i: u64, tag: u64) -> Instance {
    let mut rng = rng_for(tag, &[i]);
    let vocab = [4, 8, 30][(i % 3) as usize];
    let len = rng.random_range(60..=600);
    let words = random_words(&mut rng, vocab, len);
    let n_ex = rng.random_range(1..=10.min(len));
    let mut cuts: BTreeSet<usize> = BTreeSet::new();
    while cuts.len() < n_ex - 1 {
        cuts.insert(rng.random_range(1..len));
    }
    let bounds: Vec<usize> = std::iter::once(0).chain(cuts).chain(std::iter::once(len)).collect();
    let ranges: Vec<(usize, usize)> = bounds.windows(2).map(|w| (w[0], w[1])).collect();
    let book = with_ranges(book_from_words("rand", &words), &ranges);
    let k = rng.random_range(3..=5);
    let m = rng.random_range(2..=6);

    let mut prompts = Vec::new();
    let mut gens = Vec::new();
    for (ex, &(s, e)) in ranges.iter().enumerate() {
        let n_noise = rng.random_range(0..30);
        let mut instruction = random_words(&mut rng, vocab * 2, n_noise);
        for _ in 0..rng.random_range(0..4) {
            // Plant an m-gram from inside the excerpt or from anywhere.
            let (lo, hi) = if rng.random_bool(0.7) { (s, e) } else { (0, len) };
            if hi - lo >= m {
                let p = rng.random_range(lo..=hi - m);
                instruction.extend_from_slice(&words[p..p + m]);
            }
        }
        prompts.push(prompt(ex, &instruction));
        for t in 0..rng.random_range(0..=20) {
            let glen = rng.random_range(1..=120);
            gens.push(gen(ex, t, &mixed_generation(&mut rng, &words, vocab, glen)));
        }
    }
    Instance { book, prompts, gens, k, m }
}

// ---------------------------------------------------------------------------
// Criteria
// ---------------------------------------------------------------------------

fn c1_matcher_oracle() -> Check {
    let start = Instant::now();
    let mut total_spans = 0;
    for i in 0..1000u64 {
        let mut rng = rng_for(1, &[i]);
        let vocab = [5, 50, 1000][(i % 3) as usize];
        let k = [3, 5, 8][((i / 3) % 3) as usize];
        let blen = rng.random_range(1..=2000);
        let glen = rng.random_range(1..=300);
        let book = random_words(&mut rng, vocab, blen);
        let g = mixed_generation(&mut rng, &book, vocab, glen);

        let index = BookIndex::new(&book, k).map_err(|e| e.to_string())?;
        let mut fast: Vec<_> = index
            .find(&g)
            .into_iter()
            .map(|s| (s.book_start, s.book_end, s.gen_start, s.gen_end))
            .collect();
        fast.sort_unstable();
        let oracle = naive_maximal_matches(&g, &book, k);
        ensure!(
            fast == oracle,
            "instance {i} (vocab {vocab}, k {k}): fast {} spans vs oracle {}",
            fast.len(),
            oracle.len()
        );
        total_spans += oracle.len();
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("1000 instances, {total_spans} spans identical, {:.1}s", elapsed.as_secs_f64()))
}

fn c2_coverage_literal() -> Check {
    let mut nonzero = 0;
    for i in 0..200u64 {
        let inst = random_instance(i, 2);
        let config = BmcConfig {
            k: inst.k,
            m: inst.m,
            samples_per_excerpt: 20,
            span_count_threshold: 20,
        };
        let report = coverage::bmc(&inst.book, "model", &inst.prompts, &inst.gens, &config).map_err(|e| e.to_string())?;
        let profile = inst.book.profile();
        let runs: Vec<(Vec<String>, Vec<String>)> = inst
            .gens
            .iter()
            .map(|g| (g.words.clone(), profile.words(&inst.prompts[g.excerpt_id].instruction)))
            .collect();
        let expected = literal_coverage(inst.book.words(), &runs, inst.k, inst.m);
        ensure!(report.mask.to_bools() == expected, "instance {i}: masks differ");
        let expected_bmc = expected.iter().filter(|&&b| b).count() as f64 / expected.len() as f64;
        ensure!(report.bmc == expected_bmc, "instance {i}: bmc {} vs {}", report.bmc, expected_bmc);
        if report.bmc > 0.0 {
            nonzero += 1;
        }
    }
    ensure!(nonzero > 100, "only {nonzero} instances had any coverage; the check is too weak");
    Ok(format!("200 instances equal bit for bit ({nonzero} with coverage)"))
}

fn c3_trim_fixtures() -> Check {
    let words = distinct_words(20);
    let book = with_ranges(book_from_words("trim", &words), &[(0, 20)]);
    let config = BmcConfig {
        k: 5,
        m: 5,
        ..BmcConfig::default()
    };
    let first = coverage::bmc(&book, "m", &[prompt(0, &words[6..11])], &[gen(0, 0, &words)], &config)
        .map_err(|e| e.to_string())?;
    ensure!(first.bmc == 0.75, "covered [0,20) minus [6,11): bmc {}", first.bmc);
    let second = coverage::bmc(&book, "m", &[prompt(0, &words[8..13])], &[gen(0, 0, &words[5..15])], &config)
        .map_err(|e| e.to_string())?;
    ensure!(second.bmc == 0.0, "span [5,15) minus [8,13): bmc {}", second.bmc);
    Ok("0.75 and 0.0 exactly".into())
}

fn c4_monotonicity() -> Check {
    let mut checks = 0;
    for i in 0..200u64 {
        let inst = random_instance(i, 4);
        let mask_for = |k: usize, gens: &[Generation]| -> Result<CoverageMask, String> {
            let config = BmcConfig {
                k,
                m: inst.m,
                samples_per_excerpt: 20,
                span_count_threshold: 20,
            };
            Ok(coverage::bmc(&inst.book, "m", &inst.prompts, gens, &config).map_err(|e| e.to_string())?.mask)
        };
        let mut prev: Option<CoverageMask> = None;
        for k in 2..=9 {
            let mask = mask_for(k, &inst.gens)?;
            if let Some(p) = &prev {
                ensure!(mask.is_subset_of(p), "instance {i}: mask at k={k} not within k={}", k - 1);
                ensure!(mask.fraction() <= p.fraction(), "instance {i}: bmc rose at k={k}");
                checks += 1;
            }
            prev = Some(mask);
        }
        let mut prev = CoverageMask::zeros(inst.book.len());
        let step = (inst.gens.len() / 5).max(1);
        for n in (0..=inst.gens.len()).step_by(step).chain(std::iter::once(inst.gens.len())) {
            let mask = mask_for(inst.k, &inst.gens[..n])?;
            ensure!(prev.is_subset_of(&mask), "instance {i}: adding generations removed coverage");
            prev = mask;
            checks += 1;
        }
    }
    Ok(format!("{checks} comparisons, zero violations"))
}

fn c5_identity() -> Check {
    let book = tokenize(&fixture_book(), &NormalizationProfile::exact())
        .and_then(|b| b.segment(300, 500))
        .map_err(|e| e.to_string())?;
    let prompts: Vec<PromptRecord> = book.excerpts().iter().map(PromptRecord::untrimmed).collect();
    let config = BmcConfig::default();

    let full = SimulatorConfig::new(1.0, ReplayLength::Full, 5);
    let gens = dataprep::simulate_generations(&book, &prompts, &full, 3).map_err(|e| e.to_string())?;
    let r = coverage::bmc(&book, "sim", &prompts, &gens, &config).map_err(|e| e.to_string())?;
    ensure!(r.bmc == 1.0, "p=1: bmc {}", r.bmc);
    ensure!(r.longest_block_words == book.len(), "p=1: longest block {} of {}", r.longest_block_words, book.len());

    let none = SimulatorConfig::new(0.0, ReplayLength::Full, 5);
    let gens = dataprep::simulate_generations(&book, &prompts, &none, 3).map_err(|e| e.to_string())?;
    let r = coverage::bmc(&book, "sim", &prompts, &gens, &config).map_err(|e| e.to_string())?;
    ensure!(
        r.bmc == 0.0 && r.longest_block_words == 0 && r.longest_regurgitated_words == 0 && r.n_spans_over_threshold == 0,
        "p=0: {:?}",
        r.summary()
    );
    Ok(format!("{} words: bmc 1.0 / 0.0", book.len()))
}

fn c6_partial_replay() -> Check {
    let words = distinct_words(1500);
    let ranges: Vec<(usize, usize)> = (0..1500).step_by(150).map(|s| (s, s + 150)).collect();
    let book = with_ranges(book_from_words("replay", &words), &ranges);
    let prompts: Vec<PromptRecord> = book.excerpts().iter().map(PromptRecord::untrimmed).collect();
    let config = BmcConfig::default();
    let mut cases = 0;
    for (seed, n) in [(1u64, 5usize), (2, 12), (3, 40), (4, 149), (5, 400)] {
        let sim = SimulatorConfig::new(0.4, ReplayLength::Words(n), seed);
        let traced = dataprep::simulate_with_trace(&book, &prompts, &sim, 6).map_err(|e| e.to_string())?;
        let mut expected = vec![false; book.len()];
        for (s, e) in traced.iter().filter_map(|t| t.replay) {
            expected[s..e].iter_mut().for_each(|b| *b = true);
        }
        let gens: Vec<Generation> = traced.into_iter().map(|t| t.generation).collect();
        let r = coverage::bmc(&book, "sim", &prompts, &gens, &config).map_err(|e| e.to_string())?;
        let want = expected.iter().filter(|&&b| b).count() as f64 / expected.len() as f64;
        ensure!(r.mask.to_bools() == expected, "replay {n}: mask differs from union of replays");
        ensure!(r.bmc == want, "replay {n}: bmc {} vs {want}", r.bmc);
        cases += 1;
    }
    Ok(format!("{cases} replay settings exact"))
}

fn c7_cross_paragraph() -> Check {
    let words = distinct_words(800);
    let ranges: Vec<(usize, usize)> = (0..800).step_by(100).map(|s| (s, s + 100)).collect();
    let book = with_ranges(book_from_words("cross", &words), &ranges);
    let filler = dataprep::default_filler_vocab(8);
    let slots: Vec<(usize, usize)> = (0..8)
        .flat_map(|ex| [5, 35, 65].map(|o| (ex * 100 + o, ex * 100 + o + 25)))
        .take(20)
        .collect();

    for (f, n_cross) in [(0.0, 0), (0.25, 5), (0.5, 10), (1.0, 20)] {
        let mut gens = Vec::new();
        let mut sample = [0usize; 8];
        let mut push = |source: usize, s: usize, e: usize| {
            let mut g = filler[..3].to_vec();
            g.extend_from_slice(&words[s..e]);
            g.extend_from_slice(&filler[3..6]);
            gens.push(gen(source, sample[source], &g));
            sample[source] += 1;
        };
        for (i, &(s, e)) in slots.iter().enumerate() {
            let target = s / 100;
            let source = if i < n_cross { (target + 3) % 8 } else { target };
            push(source, s, e);
            push(source, s, e); // duplicate: merged
            push((target + 1) % 8, s + 2, e - 2); // contained, 21 words: removed
        }
        let r = attribution::cross_paragraph_ratio(&book, &gens, 5, 20).map_err(|e| e.to_string())?;
        ensure!(r.n_unique_spans == 20, "f={f}: {} unique spans", r.n_unique_spans);
        ensure!(r.ratio == f, "f={f}: ratio {}", r.ratio);
    }

    let fixture = attribution::cross_paragraph_from_pairs(book.excerpts(), [((10, 40), 0), ((15, 30), 1)]);
    ensure!(
        fixture.evidence.len() == 1
            && (fixture.evidence[0].book_start, fixture.evidence[0].book_end) == (10, 40)
            && fixture.evidence[0].source_excerpts == BTreeSet::from([0]),
        "containment fixture: {:?}",
        fixture.evidence
    );
    Ok("ratios 0, 0.25, 0.5, 1 exact; containment keeps [10,40) from A only".into())
}

fn c8_rank_baseline() -> Check {
    let n = 100;
    let mut rng = rng_for(8, &[]);
    let mut vector = || EmbeddingVector((0..16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let emb = BookEmbeddings {
        prompts: (0..n).map(|i| (i, vector())).collect(),
        excerpts: (0..n).map(|_| vector()).collect(),
    };
    let pairs: Vec<CrossPair> = (0..n)
        .flat_map(|s| {
            (0..n).map(move |t| CrossPair {
                book_id: "b".into(),
                model_id: "m".into(),
                setting: "s".into(),
                source_excerpt: s,
                target_excerpt: t,
            })
        })
        .collect();
    let table = attribution::semantic_rank_analysis(&pairs, &HashMap::from([("b".to_string(), emb)]), 8)
        .map_err(|e| e.to_string())?;
    let draws = &table.baseline;
    ensure!(draws.len() == 10_000, "{} baseline draws", draws.len());
    let mean = draws.iter().map(|r| r.rank_percentile).sum::<f64>() / draws.len() as f64;
    let top = draws.iter().filter(|r| r.top_decile).count() as f64 / draws.len() as f64;
    ensure!((mean - 0.5).abs() <= 0.02, "mean percentile {mean}");
    ensure!((top - 0.10).abs() <= 0.01, "top-decile rate {top}");
    Ok(format!("mean {mean:.4}, top-decile {:.2}%", top * 100.0))
}

fn c9_correlations() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let up = [2.0, 4.1, 6.5, 9.0, 30.0];
    let down = [10.0, 8.0, 5.0, 1.0, -3.0];
    let e = |r: bookmem::Result<f64>| r.map_err(|e| e.to_string());
    ensure!(close(e(spearman(&x, &up))?, 1.0), "spearman monotone up");
    ensure!(close(e(spearman(&x, &down))?, -1.0), "spearman monotone down");
    ensure!(close(e(pearson(&x, &[3.0, 5.0, 7.0, 9.0, 11.0]))?, 1.0), "pearson linear up");
    ensure!(close(e(pearson(&x, &[5.0, 4.0, 3.0, 2.0, 1.0]))?, -1.0), "pearson linear down");
    let (a, b) = ([1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0]);
    ensure!(close(e(pearson(&a, &b))?, 0.8), "pearson four-point");
    ensure!(close(e(spearman(&a, &b))?, 0.8), "spearman four-point");

    // Ties: ranks [1, 2.5, 2.5, 4, 5] against [1..5]: 9.5 / sqrt(9.5 * 10).
    ensure!(average_ranks(&[1.0, 2.0, 2.0, 3.0, 4.0]) == vec![1.0, 2.5, 2.5, 4.0, 5.0], "tie ranks");
    let r = e(spearman(&[1.0, 2.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0, 50.0]))?;
    ensure!(close(r, 95f64.sqrt() / 10.0), "tie fixture 1: {r}");
    // Ranks [2, 2, 2, 4.5, 4.5] against [5, 4, 3, 2, 1]: -7.5 / sqrt(7.5 * 10).
    let r = e(spearman(&[1.0, 1.0, 1.0, 2.0, 2.0], &[5.0, 4.0, 3.0, 2.0, 1.0]))?;
    ensure!(close(r, -(75f64.sqrt()) / 10.0), "tie fixture 2: {r}");
    Ok("closed forms within 1e-12, average-rank ties".into())
}

fn c10_shuffled_baseline() -> Check {
    let len = 100_000;
    let mut rng = rng_for(10, &[]);
    let mut mask = |ones: usize| {
        let mut bits = vec![false; len];
        bits[..ones].iter_mut().for_each(|b| *b = true);
        bits.shuffle(&mut rng);
        CoverageMask::from_bools(&bits)
    };
    let (a, b) = (mask(30_000), mask(30_000));
    let mean = agreement::shuffled_baseline(&a, &b, 100, 10).map_err(|e| e.to_string())?;
    let analytic = 0.09 / (0.6 - 0.09);
    ensure!((mean - 0.1765).abs() <= 0.01, "mean {mean}");
    Ok(format!("mean {mean:.4} (analytic {analytic:.4})"))
}

fn c11_split_half() -> Check {
    let words = distinct_words(150);
    let book = with_ranges(book_from_words("split", &words), &[(0, 50), (50, 100), (100, 150)]);
    let prompts: Vec<PromptRecord> = book.excerpts().iter().map(PromptRecord::untrimmed).collect();
    let scorer = Scorer::new(&book, &prompts, &BmcConfig::default()).map_err(|e| e.to_string())?;
    let gens: Vec<Generation> = (0..3)
        .flat_map(|ex| (0..4).map(move |t| (ex, t)))
        .map(|(ex, t)| gen(ex, t, &words[ex * 50 + 5..ex * 50 + 30]))
        .collect();
    let same = agreement::split_half_self_agreement(&scorer, &gens, 10, 11).map_err(|e| e.to_string())?;
    ensure!(same.mean_jaccard == 1.0 && !same.both_empty_flag, "identical: {same:?}");

    let disjoint = vec![gen(0, 0, &words[0..20]), gen(0, 1, &words[25..45])];
    let one = with_ranges(book_from_words("split", &words), &[(0, 150)]);
    let prompts: Vec<PromptRecord> = one.excerpts().iter().map(PromptRecord::untrimmed).collect();
    let scorer = Scorer::new(&one, &prompts, &BmcConfig::default()).map_err(|e| e.to_string())?;
    let split = agreement::split_half_self_agreement(&scorer, &disjoint, 10, 11).map_err(|e| e.to_string())?;
    ensure!(split.mean_jaccard == 0.0 && !split.both_empty_flag, "disjoint: {split:?}");
    Ok("identical 1.0, disjoint 0.0".into())
}

/// Text with curly quotes, dashes, ellipses and mixed case, for provenance.
fn decorated_text(rng: &mut impl Rng, n_sentences: usize) -> String {
    let vocab = ["Lamp", "river", "old", "Mara", "wind", "door", "quiet", "salt", "o'clock", "mist", "road", "rain"];
    let mut out = String::new();
    for _ in 0..n_sentences {
        let n = rng.random_range(4..12);
        let ws: Vec<&str> = (0..n).map(|_| vocab[rng.random_range(0..vocab.len())]).collect();
        let body = ws.join(" ");
        let s = match rng.random_range(0..5) {
            0 => format!("\u{201C}{body},\u{201D} she said."),
            1 => format!("{body} \u{2014} {}.", ws[0]),
            2 => format!("{body}\u{2026} don\u{2019}t."),
            3 => format!("\"{body}!\""),
            _ => format!("{body}."),
        };
        out.push_str(&s);
        out.push(' ');
    }
    out
}

fn variants(text: &str) -> Vec<String> {
    vec![
        text.to_string(),
        text.to_lowercase(),
        text.replace(['\u{201C}', '\u{201D}'], "\"").replace('\u{2019}', "'"),
        text.replace('\u{2026}', ". . .").replace('\u{2014}', "--"),
        text.chars().filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect(),
    ]
}

fn c12_provenance() -> Check {
    let mut rng = rng_for(12, &[]);
    let book_text = decorated_text(&mut rng, 300);
    let book = tokenize(&RawBook::new(meta("prov"), book_text.clone()), &NormalizationProfile::exact())
        .map_err(|e| e.to_string())?;
    let mut docs = Vec::new();
    // Some slices appear verbatim; the rest only as re-typed variants, so
    // book spans inside them are findable only after normalization.
    for i in 0..8 {
        let (a, b) = (rng.random_range(0..book_text.len()), rng.random_range(0..book_text.len()));
        let (a, b) = (a.min(b), a.max(b));
        let (a, b) = (floor_char(&book_text, a), floor_char(&book_text, b));
        docs.extend(variants(&book_text[a..b]).into_iter().skip(if i < 3 { 0 } else { 1 }));
    }
    docs.push(decorated_text(&mut rng, 50));
    let server = MockCorpusServer::start(MockCorpus::from_texts(docs.clone())).map_err(|e| e.to_string())?;
    let client = HttpCorpusClient::new(server.url(), RetryPolicy::immediate(2));

    let mut queries: Vec<String> = Vec::new();
    while queries.len() < 250 {
        let d = &docs[rng.random_range(0..docs.len())];
        if d.is_empty() {
            continue;
        }
        let a = floor_char(d, rng.random_range(0..d.len()));
        let b = floor_char(d, (a + rng.random_range(5..200)).min(d.len()));
        let q = &d[a..b];
        if q.chars().any(char::is_alphanumeric) {
            queries.push(q.to_string());
        }
    }
    while queries.len() < 500 {
        let len = rng.random_range(5..60);
        let s = rng.random_range(0..book.len() - len);
        queries.push(ProvenanceQuery::exact(&book, s, s + len).map_err(|e| e.to_string())?.text);
    }
    let (mut exact_found, mut soft_only, mut violations) = (0, 0, 0);
    for q in &queries {
        let exact = client.count(MatchMode::Exact, q).map_err(|e| e.to_string())? > 0;
        let soft = client.count(MatchMode::Soft, q).map_err(|e| e.to_string())? > 0;
        exact_found += exact as usize;
        soft_only += (soft && !exact) as usize;
        violations += (exact && !soft) as usize;
    }
    ensure!(violations == 0, "{violations} queries found exactly but not softly");
    ensure!(exact_found >= 250 && soft_only > 0, "weak query mix: {exact_found} exact, {soft_only} soft-only");

    // Curly quotes in the book, straight quotes on the web.
    let curly = tokenize(
        &RawBook::new(meta("curly"), "She whispered, \u{201C}I don\u{2019}t know what you mean\u{2026}\u{201D} and left."),
        &NormalizationProfile::exact(),
    )
    .map_err(|e| e.to_string())?;
    let web_server = MockCorpusServer::start(MockCorpus::from_texts([
        "and then she whispered, \"I don't know what you mean...\" and left the room",
    ]))
    .map_err(|e| e.to_string())?;
    let web = HttpCorpusClient::new(web_server.url(), RetryPolicy::immediate(2));
    let exact = provenance::search_span(&web, &ProvenanceQuery::exact(&curly, 0, 9).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let soft = provenance::search_span(&web, &ProvenanceQuery::soft(&curly, 0, 9).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    ensure!(!exact.found && soft.found, "curly fixture: exact {exact:?}, soft {soft:?}");

    absence_arithmetic()?;
    Ok(format!(
        "500 queries ({exact_found} exact hits, {soft_only} soft-only), 0 violations; curly fixture soft-only; absence arithmetic exact"
    ))
}

fn floor_char(s: &str, mut i: usize) -> usize {
    while !s.is_char_boundary(i) {
        i -= 1;
    }
    i
}

fn absence_arithmetic() -> Result<(), String> {
    let span = |i: usize, len: usize, exact: bool, soft: bool| SpanProvenance {
        book_id: if i.is_multiple_of(2) { "a" } else { "b" }.into(),
        book_start: i * 1000,
        book_end: i * 1000 + len,
        exact_found: exact,
        soft_found: soft,
        exact_count: exact as u64,
        soft_count: soft as u64,
    };
    let mut results = Vec::new();
    results.extend((0..10).map(|i| span(i, 60, i < 4, i < 9))); // exact 6/10 absent, soft 1/10
    results.extend((10..14).map(|i| span(i, 120, true, true))); // none absent
    results.extend((14..19).map(|i| span(i, 200, i == 14, i < 18))); // exact 4/5, soft 1/5
    results.extend((19..22).map(|i| span(i, 30, false, false))); // outside every bin

    let bins = provenance::default_bins();
    let report = absence_report(&results, &bins);
    let rate = |bin: usize, mode: usize| report.bins[bin * 2 + mode].absence_rate;
    let want = [(0.6, 0.1), (0.0, 0.0), (0.8, 0.2)];
    for (b, &(ex, so)) in want.iter().enumerate() {
        ensure!(rate(b, 0) == Some(ex) && rate(b, 1) == Some(so), "bin {b}: {:?}", &report.bins[b * 2..b * 2 + 2]);
    }
    ensure!(
        report.overall[0].n_queried == 22
            && report.overall[0].n_absent == 13
            && report.overall[0].absence_rate == Some(13.0 / 22.0)
            && report.overall[1].n_absent == 5,
        "overall: {:?}",
        report.overall
    );
    let mut shuffled = results.clone();
    shuffled.shuffle(&mut rng_for(12, &[1]));
    ensure!(absence_report(&shuffled, &bins) == report, "report depends on result order");

    let all_found: Vec<SpanProvenance> = (0..9).map(|i| span(i, 50 + i * 25, true, true)).collect();
    let report = absence_report(&all_found, &bins);
    ensure!(
        report.bins.iter().all(|r| r.absence_rate == Some(0.0)),
        "all found: {:?}",
        report.bins
    );
    let custom = [LengthBin { lo: 0, hi: None }];
    ensure!(absence_report(&results, &custom).bins[0].n_queried == 22, "open bin");
    Ok(())
}

/// Run the CLI pipeline in `dir` and return every artifact it wrote.
fn run_pipeline(dir: &Path, threads: usize) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let book = data.join("lantern_keeper.txt");
    let book = book.to_str().unwrap();
    let threads = threads.to_string();
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_bookmem"))
            .current_dir(dir)
            .args(["--threads", &threads])
            .args(args)
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        Ok(())
    };
    let book_args = ["--book", book, "--excerpts", "excerpts.jsonl"];
    let with = |extra: &[&'static str]| -> Vec<String> {
        book_args.iter().map(|s| s.to_string()).chain(extra.iter().map(|s| s.to_string())).collect()
    };
    let strs = |v: &[String]| -> Vec<String> { v.to_vec() };
    let call = |sub: &str, v: Vec<String>| -> Result<(), String> {
        let mut args = vec![sub.to_string()];
        args.extend(strs(&v));
        run(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    run(&["segment", "--book", book, "--out", "excerpts.jsonl"])?;
    call("prepare", with(&["--out", "prompts.jsonl"]))?;
    call(
        "simulate",
        with(&["--prompts", "prompts.jsonl", "--p", "0.4", "--replay", "60", "--samples", "6", "--seed", "11", "--model-id", "alpha", "--out", "alpha.jsonl"]),
    )?;
    call(
        "simulate",
        with(&["--prompts", "prompts.jsonl", "--p", "0.6", "--replay", "30", "--samples", "6", "--seed", "12", "--model-id", "beta", "--out", "beta.jsonl"]),
    )?;
    let gens = ["--generations", "alpha.jsonl", "--generations", "beta.jsonl", "--prompts", "prompts.jsonl"];
    let mut score = with(&gens);
    score.extend(["--out-dir", "reports", "--per-excerpt"].map(String::from));
    call("score", score)?;
    let mut cross = with(&gens);
    cross.extend(["--out", "cross.json", "--rank-out", "ranks.csv", "--include-same-excerpt", "--min-span-words", "10"].map(String::from));
    call("crosspara", cross)?;
    let mut agree = with(&gens);
    agree.extend(["--out", "agree.json", "--split-trials", "4", "--shuffle-trials", "20", "--seed", "3"].map(String::from));
    call("agree", agree)?;
    run(&["report", "--reports", "reports", "--agree", "agree.json", "--out-dir", "out"])?;

    let mut files = BTreeMap::new();
    collect_files(dir, dir, &mut files).map_err(|e| e.to_string())?;
    Ok(files)
}

fn collect_files(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) -> std::io::Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.insert(path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path)?);
        }
    }
    Ok(())
}

fn c13_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for (i, threads) in [(0, 1), (1, 8), (2, 8)] {
        let dir = tmp.path().join(format!("run{i}"));
        std::fs::create_dir(&dir).map_err(|e| e.to_string())?;
        runs.push(run_pipeline(&dir, threads)?);
    }
    ensure!(runs[0].len() >= 15, "only {} artifacts", runs[0].len());
    for (i, run) in runs.iter().enumerate().skip(1) {
        let names: Vec<_> = run.keys().collect();
        ensure!(names == runs[0].keys().collect::<Vec<_>>(), "run {i} wrote different files");
        for (name, bytes) in run {
            ensure!(&runs[0][name] == bytes, "run {i}: {} differs", name.display());
        }
    }
    Ok(format!("{} artifacts byte-identical across 3 runs (threads 1, 8, 8)", runs[0].len()))
}

/// Zipf-ish word sampler over `vocab` words.
struct Zipf {
    cdf: Vec<f64>,
}

impl Zipf {
    fn new(vocab: usize, s: f64) -> Self {
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = (1..=vocab)
            .map(|r| {
                acc += 1.0 / (r as f64).powf(s);
                acc
            })
            .collect();
        cdf.iter_mut().for_each(|c| *c /= acc);
        Self { cdf }
    }

    fn word(&self, rng: &mut impl Rng) -> String {
        let u: f64 = rng.random();
        format!("w{}", self.cdf.partition_point(|&c| c < u))
    }
}

fn c14_performance() -> Check {
    let (n_words, n_excerpts, samples, gen_len) = (120_000, 300, 100, 400);
    let mut rng = rng_for(14, &[]);
    let zipf = Zipf::new(8000, 1.05);
    let words: Vec<String> = (0..n_words).map(|_| zipf.word(&mut rng)).collect();
    let ex_len = n_words / n_excerpts;
    let text = prose(&words, 15, ex_len);
    let ranges: Vec<(usize, usize)> = (0..n_excerpts).map(|i| (i * ex_len, (i + 1) * ex_len)).collect();
    let book = with_ranges(
        tokenize(&RawBook::new(meta("perf"), text), &NormalizationProfile::exact()).map_err(|e| e.to_string())?,
        &ranges,
    );
    let prompts: Vec<PromptRecord> = book
        .excerpts()
        .iter()
        .map(|e| {
            let summary = words[e.word_start..e.word_start + 150].join(" ");
            PromptRecord {
                excerpt_id: e.excerpt_id,
                instruction: dataprep::build_instruction(&summary, e.word_count(), "Test Author").unwrap(),
                target_word_count: e.word_count(),
                author: "Test Author".into(),
                summary,
            }
        })
        .collect();

    let mut texts = Vec::with_capacity(n_excerpts * samples);
    for (ex, &(s, e)) in ranges.iter().enumerate() {
        for t in 0..samples {
            let mut g: Vec<String> = Vec::with_capacity(gen_len);
            if rng.random_bool(0.3) {
                let len = rng.random_range(50..=e - s);
                let start = rng.random_range(s..=e - len);
                for (i, w) in words[start..start + len].iter().enumerate() {
                    g.push(if i % 25 == 24 { zipf.word(&mut rng) } else { w.clone() });
                }
            }
            while g.len() < gen_len {
                g.push(zipf.word(&mut rng));
            }
            texts.push((ex, t, g.join(" ")));
        }
    }

    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let report = pool.install(|| {
        let gens: Vec<Generation> = texts
            .into_iter()
            .map(|(ex, t, text)| Generation::new(ex, t, "perf", text, book.profile()))
            .collect();
        coverage::bmc(&book, "perf", &prompts, &gens, &BmcConfig::default())
    });
    let elapsed = start.elapsed();
    let report = report.map_err(|e| e.to_string())?;
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    ensure!(report.bmc > 0.0, "no coverage; workload is not exercising the matcher");
    Ok(format!(
        "{} words, {} generations scored in {:.1}s on one thread (bmc {:.3})",
        book.len(),
        n_excerpts * samples,
        elapsed.as_secs_f64(),
        report.bmc
    ))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [Criterion; 14] = [
        (1, "matcher equals brute-force oracle", c1_matcher_oracle),
        (2, "coverage equals literal step-by-step computation", c2_coverage_literal),
        (3, "instruction trimming fixtures", c3_trim_fixtures),
        (4, "monotonicity in k and in generations", c4_monotonicity),
        (5, "identity pipeline", c5_identity),
        (6, "partial-replay coverage", c6_partial_replay),
        (7, "cross-paragraph ratio", c7_cross_paragraph),
        (8, "semantic-rank random baseline", c8_rank_baseline),
        (9, "correlation fixtures", c9_correlations),
        (10, "shuffled-mask baseline", c10_shuffled_baseline),
        (11, "split-half self-agreement", c11_split_half),
        (12, "provenance against the mock corpus service", c12_provenance),
        (13, "CLI determinism", c13_determinism),
        (14, "desk-scale performance", c14_performance),
    ];
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
