//! Maximal verbatim word matches between a generation and a book.
//!
//! A match is a maximal run of position-wise equal words along one alignment
//! diagonal `(gen_start - book_start)`. Every maximal run of length `>= k`
//! starts at a left-maximal pair whose k-gram is shared, so the index only
//! needs to map book k-grams to their start positions; each hit that cannot
//! be extended to the left is extended to the right once.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{NormalizationProfile, TokenizedBook};
use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MatchSpan {
    pub book_start: usize,
    pub book_end: usize,
    pub gen_start: usize,
    pub gen_end: usize,
}

impl MatchSpan {
    pub fn len(&self) -> usize {
        self.book_end - self.book_start
    }

    pub fn is_empty(&self) -> bool {
        self.book_end == self.book_start
    }

    pub fn book_range(&self) -> (usize, usize) {
        (self.book_start, self.book_end)
    }

    /// The same span with the roles of generation and book swapped.
    pub fn transposed(&self) -> Self {
        Self {
            book_start: self.gen_start,
            book_end: self.gen_end,
            gen_start: self.book_start,
            gen_end: self.book_end,
        }
    }
}

/// One sampled model output. `words` is derived from `text` under the active
/// profile and is not part of the wire format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Generation {
    pub excerpt_id: usize,
    pub sample_idx: usize,
    pub model_id: String,
    pub text: String,
    #[serde(skip)]
    pub words: Vec<String>,
}

impl Generation {
    pub fn new(
        excerpt_id: usize,
        sample_idx: usize,
        model_id: impl Into<String>,
        text: impl Into<String>,
        profile: &NormalizationProfile,
    ) -> Self {
        let text = text.into();
        Self {
            excerpt_id,
            sample_idx,
            model_id: model_id.into(),
            words: profile.words(&text),
            text,
        }
    }

    pub fn retokenize(&mut self, profile: &NormalizationProfile) {
        self.words = profile.words(&self.text);
    }
}

/// Read a generations file and tokenize every record under `profile`.
pub fn read_generations(path: &Path, profile: &NormalizationProfile) -> Result<Vec<Generation>> {
    let mut gens: Vec<Generation> = jsonl::read_jsonl(path)?;
    let mut seen = HashSet::new();
    for g in &mut gens {
        if !seen.insert((g.model_id.clone(), g.excerpt_id, g.sample_idx)) {
            return Err(Error::InvalidInput(format!(
                "{}: duplicate sample {} for excerpt {} of model {:?}",
                path.display(),
                g.sample_idx,
                g.excerpt_id,
                g.model_id
            )));
        }
        g.retokenize(profile);
    }
    Ok(gens)
}

pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    jsonl::write_jsonl(path, gens)
}

const UNKNOWN: u32 = u32::MAX;

fn gram_hash(ids: &[u32]) -> u64 {
    ids.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &id| {
        (h ^ u64::from(id)).wrapping_mul(0x0000_0100_0000_01b3).rotate_left(17)
    })
}

/// Read-only k-gram index over a book's words. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct BookIndex {
    k: usize,
    vocab: HashMap<String, u32>,
    ids: Vec<u32>,
    seeds: HashMap<u64, Vec<u32>>,
}

impl BookIndex {
    pub fn new<S: AsRef<str>>(book_words: &[S], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidInput("k must be at least 1".into()));
        }
        let mut vocab = HashMap::new();
        let ids: Vec<u32> = book_words
            .iter()
            .map(|w| {
                let next = vocab.len() as u32;
                *vocab.entry(w.as_ref().to_string()).or_insert(next)
            })
            .collect();
        let mut seeds: HashMap<u64, Vec<u32>> = HashMap::new();
        if ids.len() >= k {
            for j in 0..=ids.len() - k {
                seeds.entry(gram_hash(&ids[j..j + k])).or_default().push(j as u32);
            }
        }
        Ok(Self {
            k,
            vocab,
            ids,
            seeds,
        })
    }

    pub fn for_book(book: &TokenizedBook, k: usize) -> Result<Self> {
        Self::new(book.words(), k)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn book_ids(&self) -> &[u32] {
        &self.ids
    }

    /// Map words to book vocabulary ids; words absent from the book get an
    /// id that never equals a book id.
    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        words
            .iter()
            .map(|w| self.vocab.get(w.as_ref()).copied().unwrap_or(UNKNOWN))
            .collect()
    }

    pub fn find<S: AsRef<str>>(&self, gen_words: &[S]) -> Vec<MatchSpan> {
        self.find_ids(&self.encode(gen_words))
    }

    /// All maximal matches of length `>= k`, sorted by `(gen_start, book_start)`.
    pub fn find_ids(&self, gen: &[u32]) -> Vec<MatchSpan> {
        let (k, book) = (self.k, &self.ids);
        let mut out = Vec::new();
        if gen.len() < k || book.len() < k {
            return out;
        }
        for i in 0..=gen.len() - k {
            let gram = &gen[i..i + k];
            if gram.contains(&UNKNOWN) {
                continue;
            }
            let Some(starts) = self.seeds.get(&gram_hash(gram)) else {
                continue;
            };
            for &j in starts {
                let j = j as usize;
                if &book[j..j + k] != gram {
                    continue;
                }
                if i > 0 && j > 0 && gen[i - 1] == book[j - 1] {
                    continue;
                }
                let mut len = k;
                while i + len < gen.len() && j + len < book.len() && gen[i + len] == book[j + len] {
                    len += 1;
                }
                out.push(MatchSpan {
                    book_start: j,
                    book_end: j + len,
                    gen_start: i,
                    gen_end: i + len,
                });
            }
        }
        out.sort_unstable_by_key(|s| (s.gen_start, s.book_start));
        out
    }
}

/// Every maximal match of `>= k` words between `gen_words` and the whole book.
pub fn find_contiguous_matches<S: AsRef<str>>(
    gen_words: &[S],
    book: &TokenizedBook,
    k: usize,
) -> Result<Vec<MatchSpan>> {
    Ok(BookIndex::for_book(book, k)?.find(gen_words))
}

/// Reference implementation: scan every alignment diagonal and emit the runs
/// of equal words. O(|gen| * |book|); meant for checking the index.
pub fn brute_force_matches<T: PartialEq>(gen: &[T], book: &[T], k: usize) -> Vec<MatchSpan> {
    let (g, b) = (gen.len() as isize, book.len() as isize);
    let mut out = Vec::new();
    for d in -(g - 1)..b {
        // book index = gen index + d
        let mut i = 0.max(-d);
        let mut run_start: Option<isize> = None;
        while i <= g {
            let j = i + d;
            let equal = i < g && j < b && gen[i as usize] == book[j as usize];
            match (equal, run_start) {
                (true, None) => run_start = Some(i),
                (false, Some(s)) => {
                    if (i - s) as usize >= k {
                        out.push(MatchSpan {
                            book_start: (s + d) as usize,
                            book_end: (i + d) as usize,
                            gen_start: s as usize,
                            gen_end: i as usize,
                        });
                    }
                    run_start = None;
                }
                _ => {}
            }
            if j >= b {
                break;
            }
            i += 1;
        }
    }
    out.sort_unstable_by_key(|s| (s.gen_start, s.book_start));
    out
}
