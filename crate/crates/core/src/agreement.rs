//! Agreement statistics between models and conditions: Pearson and Spearman
//! correlation of per-book scores, word-level Jaccard overlap of coverage
//! masks, a shuffled-mask baseline and the split-half self-agreement ceiling.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::TokenizedBook;
use crate::coverage::{BmcConfig, CoverageMask, Scorer};
use crate::dataprep::PromptRecord;
use crate::error::{Error, Result};
use crate::matcher::Generation;
use crate::seed::rng_for;

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Degenerate("need at least two observations"));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("zero variance"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; ties share the mean of the ranks they span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    ExactPermutation,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpearmanTest {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: PValueMethod,
}

/// Largest sample size for which the p-value enumerates all permutations.
pub const EXACT_PERMUTATION_MAX_N: usize = 10;

/// Spearman's rho with a two-sided p-value.
pub fn spearman_test(xs: &[f64], ys: &[f64]) -> Result<SpearmanTest> {
    let rho = spearman(xs, ys)?;
    let n = xs.len();
    if n <= EXACT_PERMUTATION_MAX_N {
        return Ok(SpearmanTest {
            rho,
            p_value: permutation_p_value(&average_ranks(xs), &average_ranks(ys), rho),
            n,
            method: PValueMethod::ExactPermutation,
        });
    }
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|_| Error::Degenerate("t distribution"))?;
        (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
    };
    Ok(SpearmanTest {
        rho,
        p_value,
        n,
        method: PValueMethod::StudentT,
    })
}

/// Fraction of all permutations of `ry` whose |rho| is at least the observed.
fn permutation_p_value(rx: &[f64], ry: &[f64], observed: f64) -> f64 {
    let n = rx.len();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let cx: Vec<f64> = rx.iter().map(|x| x - mean(rx)).collect();
    let my = mean(ry);
    let mut cy: Vec<f64> = ry.iter().map(|y| y - my).collect();
    let denom = cx.iter().map(|x| x * x).sum::<f64>().sqrt() * cy.iter().map(|y| y * y).sum::<f64>().sqrt();
    let target = observed.abs() - 1e-12;
    let rho = |cy: &[f64]| cx.iter().zip(cy).map(|(a, b)| a * b).sum::<f64>() / denom;

    // Heap's algorithm.
    let (mut hits, mut total) = (0u64, 0u64);
    let mut c = vec![0usize; n];
    let mut visit = |cy: &[f64]| {
        total += 1;
        if rho(cy).abs() >= target {
            hits += 1;
        }
    };
    visit(&cy);
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                cy.swap(0, i);
            } else {
                cy.swap(c[i], i);
            }
            visit(&cy);
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    hits as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JaccardResult {
    pub value: f64,
    /// Both masks were empty; `value` is 1.0 by convention.
    pub both_empty: bool,
}

pub fn jaccard(a: &CoverageMask, b: &CoverageMask) -> Result<JaccardResult> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let union = a.union_count(b);
    if union == 0 {
        return Ok(JaccardResult {
            value: 1.0,
            both_empty: true,
        });
    }
    Ok(JaccardResult {
        value: a.intersection_count(b) as f64 / union as f64,
        both_empty: false,
    })
}

/// Mean Jaccard over `trials` independent random permutations of each mask
/// (densities preserved). Trial `t` draws from sub-seed `(seed, t)`.
pub fn shuffled_baseline(a: &CoverageMask, b: &CoverageMask, trials: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let (len, na, nb) = (a.len(), a.count_ones(), b.count_ones());
    let values: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            if na + nb == 0 {
                return 1.0;
            }
            let mut rng = rng_for(seed, &[t as u64]);
            let mut in_a = vec![false; len];
            for i in index::sample(&mut rng, len, na) {
                in_a[i] = true;
            }
            let inter = index::sample(&mut rng, len, nb).into_iter().filter(|&i| in_a[i]).count();
            inter as f64 / (na + nb - inter) as f64
        })
        .collect();
    Ok(values.iter().sum::<f64>() / trials as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfAgreement {
    pub mean_jaccard: f64,
    /// Some trial compared two empty masks.
    pub both_empty_flag: bool,
}

/// Split-half agreement of one model with itself: each trial splits every
/// excerpt's generations into two random equal halves, scores both halves and
/// takes the Jaccard of the two masks. An odd leftover generation is unused.
pub fn split_half_self_agreement(
    scorer: &Scorer<'_>,
    generations: &[Generation],
    trials: usize,
    seed: u64,
) -> Result<SelfAgreement> {
    if trials == 0 {
        return Err(Error::InvalidInput("trials must be at least 1".into()));
    }
    let mut by_excerpt: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in generations.iter().enumerate() {
        by_excerpt.entry(g.excerpt_id).or_default().push(i);
    }
    for (&ex, idx) in &mut by_excerpt {
        if idx.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "excerpt {ex} has {} generation(s); split-half needs at least 2",
                idx.len()
            )));
        }
        idx.sort_by_key(|&i| (generations[i].sample_idx, generations[i].model_id.clone()));
    }
    let outcomes = scorer.outcomes(generations)?;
    let results: Vec<JaccardResult> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let (mut first, mut second) = (Vec::new(), Vec::new());
            for (&ex, idx) in &by_excerpt {
                let mut shuffled = idx.clone();
                shuffled.shuffle(&mut rng_for(seed, &[t as u64, ex as u64]));
                let half = shuffled.len() / 2;
                first.extend(shuffled[..half].iter().map(|&i| &outcomes[i]));
                second.extend(shuffled[half..2 * half].iter().map(|&i| &outcomes[i]));
            }
            jaccard(&scorer.mask_of(first), &scorer.mask_of(second))
        })
        .collect::<Result<_>>()?;
    Ok(SelfAgreement {
        mean_jaccard: results.iter().map(|r| r.value).sum::<f64>() / trials as f64,
        both_empty_flag: results.iter().any(|r| r.both_empty),
    })
}

/// Convenience wrapper building the scorer from its parts.
pub fn split_half_for_book(
    book: &TokenizedBook,
    prompts: &[PromptRecord],
    generations: &[Generation],
    config: &BmcConfig,
    trials: usize,
    seed: u64,
) -> Result<SelfAgreement> {
    split_half_self_agreement(&Scorer::new(book, prompts, config)?, generations, trials, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPairStats {
    pub book_id: String,
    pub model_a: String,
    pub model_b: String,
    pub jaccard: f64,
    pub both_empty: bool,
    pub shuffled_baseline_mean: f64,
    pub self_agreement_a: Option<f64>,
    pub self_agreement_b: Option<f64>,
    /// `jaccard / min(self_a, self_b)`; may exceed 1.
    pub normalized_overlap: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn mask_pair_stats(
    book_id: &str,
    (model_a, mask_a): (&str, &CoverageMask),
    (model_b, mask_b): (&str, &CoverageMask),
    self_a: Option<f64>,
    self_b: Option<f64>,
    shuffle_trials: usize,
    seed: u64,
) -> Result<MaskPairStats> {
    let j = jaccard(mask_a, mask_b)?;
    let normalized_overlap = match (self_a, self_b) {
        (Some(a), Some(b)) if a.min(b) > 0.0 => Some(j.value / a.min(b)),
        _ => None,
    };
    Ok(MaskPairStats {
        book_id: book_id.to_string(),
        model_a: model_a.to_string(),
        model_b: model_b.to_string(),
        jaccard: j.value,
        both_empty: j.both_empty,
        shuffled_baseline_mean: shuffled_baseline(mask_a, mask_b, shuffle_trials, seed)?,
        self_agreement_a: self_a,
        self_agreement_b: self_b,
        normalized_overlap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub model_a: String,
    pub model_b: String,
    pub n_books: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

/// Pairwise correlation of per-book scores over the books both models share.
/// `scores[model][book]`.
pub fn correlation_matrix(scores: &BTreeMap<String, BTreeMap<String, f64>>) -> Vec<CorrelationEntry> {
    let models: Vec<&String> = scores.keys().collect();
    let mut out = Vec::new();
    for (i, a) in models.iter().enumerate() {
        for b in &models[i + 1..] {
            let (xs, ys): (Vec<f64>, Vec<f64>) = scores[*a]
                .iter()
                .filter_map(|(book, &x)| scores[*b].get(book).map(|&y| (x, y)))
                .unzip();
            out.push(CorrelationEntry {
                model_a: (*a).clone(),
                model_b: (*b).clone(),
                n_books: xs.len(),
                pearson: pearson(&xs, &ys).ok(),
                spearman: spearman(&xs, &ys).ok(),
            });
        }
    }
    out
}

pub fn correlation_csv(entries: &[CorrelationEntry]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("model_a,model_b,n_books,pearson,spearman\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.model_a,
            e.model_b,
            e.n_books,
            fmt(e.pearson),
            fmt(e.spearman)
        ));
    }
    out
}
