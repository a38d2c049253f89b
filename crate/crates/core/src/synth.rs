//! Deterministic synthetic corpus: templated sentences over small
//! attribute/object/relation lexicons, with matching image-side concept
//! records and an 80/20 train/held-out split.
//!
//! Sentences follow `a <attr> <obj> <rel> a <attr> <obj>`. Word usage is
//! balanced (least-used-first with seeded tie-breaks) so every lexicon word
//! clears the vocabulary frequency threshold, and concept signatures are
//! unique per example so reconstruction from a concept set is well defined.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::concepts::{ImageConceptRecord, ScoredConcept};
use crate::vocab::Category;

pub const ATTRIBUTES: [&str; 8] =
    ["young", "old", "small", "large", "red", "black", "white", "happy"];
pub const OBJECTS: [&str; 8] =
    ["woman", "man", "dog", "cat", "bike", "shirt", "ball", "tree"];
pub const RELATIONS: [&str; 5] = ["wearing", "riding", "holding", "watching", "chasing"];

/// One corpus sentence record, as serialized to the corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub sentence: String,
}

/// Train/held-out id split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

/// Everything one generation run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub sentences: Vec<SentenceRecord>,
    pub concepts: Vec<ImageConceptRecord>,
    pub lexicon: Vec<(String, Category)>,
    pub split: CorpusSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthError {
    /// A split needs at least one example on each side.
    SizeTooSmall(usize),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::SizeTooSmall(n) => write!(f, "corpus size {n} < 2"),
        }
    }
}

impl core::error::Error for SynthError {}

/// The full category lexicon the generator draws from.
pub fn category_lexicon() -> Vec<(String, Category)> {
    let mut lex = Vec::new();
    for w in ATTRIBUTES {
        lex.push((w.to_string(), Category::Attribute));
    }
    for w in OBJECTS {
        lex.push((w.to_string(), Category::Object));
    }
    for w in RELATIONS {
        lex.push((w.to_string(), Category::Relation));
    }
    lex
}

/// Pick the least-used word, breaking usage ties with the rng, skipping
/// anything in `taken`.
fn pick_balanced(
    rng: &mut ChaCha12Rng,
    usage: &mut [usize],
    words: &[&'static str],
    taken: &[usize],
) -> usize {
    let min_usage = usage
        .iter()
        .enumerate()
        .filter(|(i, _)| !taken.contains(i))
        .map(|(_, &u)| u)
        .min()
        .expect("lexicon exhausted");
    let pool: Vec<usize> = (0..words.len())
        .filter(|i| !taken.contains(i) && usage[*i] == min_usage)
        .collect();
    let pick = pool[rng.random_range(0..pool.len())];
    usage[pick] += 1;
    pick
}

/// Generate `size` sentence records with matching image-concept records and
/// an 80/20 split. Byte-deterministic for a given `(seed, size)`.
pub fn gen_synthetic_corpus(seed: u64, size: usize) -> Result<SyntheticCorpus, SynthError> {
    if size < 2 {
        return Err(SynthError::SizeTooSmall(size));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut attr_usage = [0usize; ATTRIBUTES.len()];
    let mut obj_usage = [0usize; OBJECTS.len()];
    let mut rel_usage = [0usize; RELATIONS.len()];
    let mut signatures: Vec<(Vec<usize>, Vec<usize>, usize)> = Vec::new();

    let mut sentences = Vec::with_capacity(size);
    let mut concepts = Vec::with_capacity(size);
    for idx in 0..size {
        // Resample until the concept signature (unordered per category) is
        // unique across the corpus.
        let (a1, a2, o1, o2, rel) = loop {
            let a1 = pick_balanced(&mut rng, &mut attr_usage, &ATTRIBUTES, &[]);
            let a2 = pick_balanced(&mut rng, &mut attr_usage, &ATTRIBUTES, &[a1]);
            let o1 = pick_balanced(&mut rng, &mut obj_usage, &OBJECTS, &[]);
            let o2 = pick_balanced(&mut rng, &mut obj_usage, &OBJECTS, &[o1]);
            let rel = pick_balanced(&mut rng, &mut rel_usage, &RELATIONS, &[]);
            let mut sig_a = alloc::vec![a1, a2];
            sig_a.sort_unstable();
            let mut sig_o = alloc::vec![o1, o2];
            sig_o.sort_unstable();
            let sig = (sig_a, sig_o, rel);
            if signatures.contains(&sig) {
                // Roll back the usage counters and try again.
                attr_usage[a1] -= 1;
                attr_usage[a2] -= 1;
                obj_usage[o1] -= 1;
                obj_usage[o2] -= 1;
                rel_usage[rel] -= 1;
                continue;
            }
            signatures.push(sig);
            break (a1, a2, o1, o2, rel);
        };

        let id = format!("ex{idx:03}");
        let sentence = format!(
            "a {} {} {} a {} {}",
            ATTRIBUTES[a1], OBJECTS[o1], RELATIONS[rel], ATTRIBUTES[a2], OBJECTS[o2]
        );
        // Concepts in first-occurrence order, score 1.0 each, exactly what
        // sentence-side extraction recovers.
        let triples = [
            (ATTRIBUTES[a1], Category::Attribute),
            (OBJECTS[o1], Category::Object),
            (RELATIONS[rel], Category::Relation),
            (ATTRIBUTES[a2], Category::Attribute),
            (OBJECTS[o2], Category::Object),
        ];
        concepts.push(ImageConceptRecord {
            id: id.clone(),
            concepts: triples
                .iter()
                .map(|(w, c)| ScoredConcept { word: w.to_string(), category: *c, score: 1.0 })
                .collect(),
        });
        sentences.push(SentenceRecord { id, sentence });
    }

    let mut ids: Vec<String> = sentences.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut rng);
    let train_size = (size * 4) / 5;
    let train_size = train_size.clamp(1, size - 1);
    let mut train: Vec<String> = ids[..train_size].to_vec();
    let mut heldout: Vec<String> = ids[train_size..].to_vec();
    train.sort();
    heldout.sort();

    Ok(SyntheticCorpus {
        sentences,
        concepts,
        lexicon: category_lexicon(),
        split: CorpusSplit { train, heldout },
    })
}
