//! Caption metrics: CIDEr-D and BLEU.
//!
//! CIDEr-D scores a candidate against reference sentences by TF-IDF weighted
//! n-gram cosine similarity (orders 1..4) with candidate counts clipped to
//! the reference counts and a Gaussian length penalty, averaged over the
//! references and orders, scaled to `[0, 10]`. When an order has no signal
//! on either side (no n-grams, or only zero-idf ones), the similarity is 1
//! if the two count multisets are identical and 0 otherwise; this keeps a
//! candidate scored against itself at exactly 10.
//!
//! BLEU is the classic clipped-precision geometric mean with a brevity
//! penalty and no smoothing; a zero precision at any counted order zeroes
//! the score. Orders longer than the candidate are skipped.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::fmath;

pub const CIDER_MAX_ORDER: usize = 4;
pub const DEFAULT_SIGMA: f64 = 6.0;
pub const BLEU_MAX_ORDER: usize = 4;

/// Joins tokens of one n-gram with an unprintable separator so maps can key
/// on a single `String`.
const SEP: char = '\u{1f}';

type Counts = BTreeMap<String, u32>;

fn ngram_counts(tokens: &[String], n: usize) -> Counts {
    let mut counts = Counts::new();
    if tokens.len() < n {
        return counts;
    }
    for window in tokens.windows(n) {
        let mut key = String::new();
        for (i, tok) in window.iter().enumerate() {
            if i > 0 {
                key.push(SEP);
            }
            key.push_str(tok);
        }
        *counts.entry(key).or_insert(0) += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MetricsError {
    EmptyCorpus,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::EmptyCorpus => write!(f, "idf table needs at least one example"),
        }
    }
}

impl core::error::Error for MetricsError {}

/// Document frequencies over reference examples, orders 1..4. The document
/// unit is the example: an n-gram seen in any of an example's references
/// counts once for that example.
#[derive(Clone, Debug, Default)]
pub struct IdfTable {
    n_examples: usize,
    df: BTreeMap<String, u32>,
}

impl IdfTable {
    pub fn n_examples(&self) -> usize {
        self.n_examples
    }

    pub fn df(&self, ngram_key: &str) -> u32 {
        self.df.get(ngram_key).copied().unwrap_or(0)
    }

    /// `ln(|I| / max(df, 1))`; unseen n-grams get the maximum idf.
    fn idf(&self, key: &str) -> f64 {
        let df = self.df(key).max(1) as f64;
        fmath::ln(self.n_examples as f64 / df)
    }
}

/// Count document frequencies from a reference corpus grouped by example.
pub fn build_idf(references_by_example: &[Vec<Vec<String>>]) -> Result<IdfTable, MetricsError> {
    if references_by_example.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut df: BTreeMap<String, u32> = BTreeMap::new();
    for refs in references_by_example {
        let mut seen: BTreeMap<String, ()> = BTreeMap::new();
        for sentence in refs {
            for n in 1..=CIDER_MAX_ORDER {
                for key in ngram_counts(sentence, n).into_keys() {
                    seen.entry(key).or_insert(());
                }
            }
        }
        for key in seen.into_keys() {
            *df.entry(key).or_insert(0) += 1;
        }
    }
    Ok(IdfTable { n_examples: references_by_example.len(), df })
}

/// TF-IDF vector representation of one order's counts: weighted entries and
/// squared norm.
fn tfidf(counts: &Counts, idf: &IdfTable) -> (BTreeMap<String, f64>, f64) {
    let mut vec = BTreeMap::new();
    let mut norm_sq = 0.0;
    for (key, &tf) in counts {
        let w = tf as f64 * idf.idf(key);
        norm_sq += w * w;
        vec.insert(key.clone(), w);
    }
    (vec, norm_sq)
}

/// CIDEr-D of `candidate` against `references`, in `[0, 10]`.
pub fn cider_d(
    candidate: &[String],
    references: &[Vec<String>],
    idf: &IdfTable,
    sigma: f64,
) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut order_sum = 0.0;
    for n in 1..=CIDER_MAX_ORDER {
        let cand_counts = ngram_counts(candidate, n);
        let (cand_vec, cand_norm_sq) = tfidf(&cand_counts, idf);
        let mut ref_sum = 0.0;
        for reference in references {
            let ref_counts = ngram_counts(reference, n);
            let sim = if cand_counts == ref_counts {
                // Identical multisets are a perfect match by definition;
                // this also covers the zero-norm corner exactly.
                1.0
            } else {
                let (ref_vec, ref_norm_sq) = tfidf(&ref_counts, idf);
                if cand_norm_sq > 0.0 && ref_norm_sq > 0.0 {
                    let mut dot = 0.0;
                    for (key, &cw) in &cand_vec {
                        if let Some(&rw) = ref_vec.get(key) {
                            dot += cw.min(rw) * rw;
                        }
                    }
                    (dot / (fmath::sqrt(cand_norm_sq) * fmath::sqrt(ref_norm_sq))).min(1.0)
                } else {
                    0.0
                }
            };
            let delta = candidate.len() as f64 - reference.len() as f64;
            ref_sum += sim * fmath::exp(-(delta * delta) / (2.0 * sigma * sigma));
        }
        order_sum += ref_sum / references.len() as f64;
    }
    10.0 * order_sum / CIDER_MAX_ORDER as f64
}

/// Effective reference length: closest to the candidate length, ties to the
/// shorter reference.
fn effective_ref_len(cand_len: usize, references: &[Vec<String>]) -> usize {
    let mut best = references[0].len();
    for r in references {
        let len = r.len();
        let d_new = (len as i64 - cand_len as i64).abs();
        let d_old = (best as i64 - cand_len as i64).abs();
        if d_new < d_old || (d_new == d_old && len < best) {
            best = len;
        }
    }
    best
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        fmath::exp(1.0 - ref_len as f64 / cand_len as f64)
    }
}

/// Clipped matches and totals for one candidate/references pair at order `n`.
fn clipped_counts(candidate: &[String], references: &[Vec<String>], n: usize) -> (u64, u64) {
    let cand = ngram_counts(candidate, n);
    let total: u64 = cand.values().map(|&c| c as u64).sum();
    if total == 0 {
        return (0, 0);
    }
    let mut max_ref: Counts = Counts::new();
    for r in references {
        for (key, count) in ngram_counts(r, n) {
            let e = max_ref.entry(key).or_insert(0);
            *e = (*e).max(count);
        }
    }
    let matched: u64 = cand
        .iter()
        .map(|(key, &c)| c.min(max_ref.get(key).copied().unwrap_or(0)) as u64)
        .sum();
    (matched, total)
}

/// Sentence BLEU up to order `max_n`, in `[0, 1]`.
pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> f64 {
    if candidate.is_empty() || references.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    let mut used = 0usize;
    for n in 1..=max_n {
        let (matched, total) = clipped_counts(candidate, references, n);
        if total == 0 {
            // The candidate is shorter than n tokens; the order carries no
            // evidence either way.
            continue;
        }
        if matched == 0 {
            return 0.0;
        }
        log_sum += fmath::ln(matched as f64 / total as f64);
        used += 1;
    }
    if used == 0 {
        return 0.0;
    }
    let precision_mean = fmath::exp(log_sum / used as f64);
    brevity_penalty(candidate.len(), effective_ref_len(candidate.len(), references)) * precision_mean
}

/// Corpus BLEU-1..4 over aligned candidate/reference pairs, aggregating the
/// clipped counts across the corpus before the geometric mean.
pub fn corpus_bleu(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
) -> [f64; BLEU_MAX_ORDER] {
    let mut matched = [0u64; BLEU_MAX_ORDER];
    let mut total = [0u64; BLEU_MAX_ORDER];
    let mut cand_len = 0u64;
    let mut ref_len = 0u64;
    for (cand, refs) in candidates.iter().zip(references) {
        if refs.is_empty() {
            continue;
        }
        cand_len += cand.len() as u64;
        ref_len += effective_ref_len(cand.len(), refs) as u64;
        for n in 1..=BLEU_MAX_ORDER {
            let (m, t) = clipped_counts(cand, refs, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        fmath::exp(1.0 - ref_len as f64 / cand_len as f64)
    };
    let mut scores = [0.0; BLEU_MAX_ORDER];
    for k in 1..=BLEU_MAX_ORDER {
        let mut log_sum = 0.0;
        let mut used = 0usize;
        let mut zero = false;
        for n in 1..=k {
            if total[n - 1] == 0 {
                continue;
            }
            if matched[n - 1] == 0 {
                zero = true;
                break;
            }
            log_sum += fmath::ln(matched[n - 1] as f64 / total[n - 1] as f64);
            used += 1;
        }
        scores[k - 1] = if zero || used == 0 {
            0.0
        } else {
            bp * fmath::exp(log_sum / used as f64)
        };
    }
    scores
}
