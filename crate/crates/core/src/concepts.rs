//! Concept sets: extraction from sentences, ingestion of image-side concept
//! records, and the category partition consumed by the relationship
//! explorers.
//!
//! Sentences contribute the words they share with the concept vocabulary.
//! Image records arrive as scored `(word, category, score)` triples; only the
//! top `K` scores are kept. Either way the result is a global list `C_g`
//! partitioned into attributes, objects and relations, with a learned NULL
//! placeholder injected into any category that would otherwise be empty so
//! the aggregators always have keys to attend to.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::vocab::{Category, ConceptVocabulary, TokenId};

/// Cap on the number of concepts kept per example.
pub const DEFAULT_MAX_CONCEPTS: usize = 20;
/// Image records keep the top-K concepts by score.
pub const DEFAULT_TOP_K: usize = 20;

/// One example's concepts: the global list and its category partition.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConceptSet {
    /// Global concepts in extraction order. Contains the NULL placeholders
    /// only when nothing at all was extracted.
    pub global: Vec<TokenId>,
    pub attributes: Vec<TokenId>,
    pub objects: Vec<TokenId>,
    pub relations: Vec<TokenId>,
}

impl ConceptSet {
    /// Partition `extracted` (deduplicated, capped, in order) by category and
    /// inject NULL placeholders into empty partitions.
    fn from_extracted(extracted: Vec<TokenId>, vocab: &ConceptVocabulary) -> ConceptSet {
        let mut attributes = Vec::new();
        let mut objects = Vec::new();
        let mut relations = Vec::new();
        for &id in &extracted {
            match vocab.concept_category(id) {
                Some(Category::Attribute) => attributes.push(id),
                Some(Category::Object) => objects.push(id),
                Some(Category::Relation) => relations.push(id),
                None => unreachable!("extraction only yields concept-vocabulary words"),
            }
        }
        if attributes.is_empty() {
            attributes.push(Category::Attribute.null_token());
        }
        if objects.is_empty() {
            objects.push(Category::Object.null_token());
        }
        if relations.is_empty() {
            relations.push(Category::Relation.null_token());
        }
        let global = if extracted.is_empty() {
            // Nothing extracted: the placeholders stand in for C_g as well,
            // keeping every downstream row count at least one.
            let mut g = attributes.clone();
            g.extend_from_slice(&objects);
            g.extend_from_slice(&relations);
            g
        } else {
            extracted
        };
        ConceptSet { global, attributes, objects, relations }
    }

    pub fn global_len(&self) -> usize {
        self.global.len()
    }
}

/// Scored concept triple from an image-side record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredConcept {
    pub word: String,
    pub category: Category,
    pub score: f64,
}

/// One image's concept record, as read from the image-concept file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageConceptRecord {
    pub id: String,
    pub concepts: Vec<ScoredConcept>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConceptError {
    /// Record names a word outside the concept vocabulary.
    UnknownWord(String),
    /// Record category disagrees with the vocabulary's category.
    CategoryMismatch {
        word: String,
        expected: Category,
        found: Category,
    },
    NonFiniteScore(String),
}

impl fmt::Display for ConceptError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConceptError::UnknownWord(w) => {
                write!(f, "concept word '{w}' is not in the concept vocabulary")
            }
            ConceptError::CategoryMismatch { word, expected, found } => write!(
                f,
                "concept '{word}' categorized as {found}, vocabulary says {expected}"
            ),
            ConceptError::NonFiniteScore(w) => {
                write!(f, "concept '{w}' has a non-finite score")
            }
        }
    }
}

impl core::error::Error for ConceptError {}

/// Sentence-side extraction: words present in the concept vocabulary,
/// deduplicated by first occurrence and capped at `max_concepts`.
pub fn extract_sentence_concepts(
    tokens: &[String],
    vocab: &ConceptVocabulary,
    max_concepts: usize,
) -> ConceptSet {
    let mut extracted: Vec<TokenId> = Vec::new();
    for tok in tokens {
        if extracted.len() >= max_concepts {
            break;
        }
        if let Some(id) = vocab.token_id(tok) {
            if vocab.concept_category(id).is_some() && !extracted.contains(&id) {
                extracted.push(id);
            }
        }
    }
    ConceptSet::from_extracted(extracted, vocab)
}

/// Image-side ingestion: validate the record against the vocabulary, keep the
/// `top_k` concepts by descending score (ties broken by ascending word), then
/// partition as usual. Duplicate words keep their best-ranked occurrence.
pub fn load_image_concepts(
    record: &ImageConceptRecord,
    vocab: &ConceptVocabulary,
    top_k: usize,
) -> Result<ConceptSet, ConceptError> {
    let mut scored: Vec<(&ScoredConcept, TokenId)> = Vec::with_capacity(record.concepts.len());
    for c in &record.concepts {
        if !c.score.is_finite() {
            return Err(ConceptError::NonFiniteScore(c.word.clone()));
        }
        let id = vocab
            .token_id(&c.word)
            .filter(|&id| vocab.concept_category(id).is_some())
            .ok_or_else(|| ConceptError::UnknownWord(c.word.clone()))?;
        let expected = vocab.concept_category(id).unwrap();
        if expected != c.category {
            return Err(ConceptError::CategoryMismatch {
                word: c.word.clone(),
                expected,
                found: c.category,
            });
        }
        scored.push((c, id));
    }
    scored.sort_by(|(a, _), (b, _)| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.word.cmp(&b.word))
    });
    let mut extracted: Vec<TokenId> = Vec::new();
    for (_, id) in scored {
        if extracted.len() >= top_k {
            break;
        }
        if !extracted.contains(&id) {
            extracted.push(id);
        }
    }
    Ok(ConceptSet::from_extracted(extracted, vocab))
}

/// Render a concept set back to words, useful in logs and tests.
pub fn describe(set: &ConceptSet, vocab: &ConceptVocabulary) -> String {
    let names = |ids: &[TokenId]| {
        ids.iter()
            .map(|&i| vocab.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        "a[{}] o[{}] r[{}]",
        names(&set.attributes),
        names(&set.objects),
        names(&set.relations)
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize;
    use crate::vocab::{NULL_ATTRIBUTE, NULL_OBJECT, NULL_RELATION};
    use alloc::string::ToString;
    use alloc::vec;

    fn vocab() -> ConceptVocabulary {
        let sentences: Vec<Vec<String>> = (0..5)
            .flat_map(|_| {
                vec![
                    normalize("a young woman wearing shirt"),
                    normalize("dog chasing dog"),
                    normalize("a plain sentence here"),
                ]
            })
            .collect();
        let lexicon = vec![
            ("young".to_string(), Category::Attribute),
            ("woman".to_string(), Category::Object),
            ("shirt".to_string(), Category::Object),
            ("dog".to_string(), Category::Object),
            ("wearing".to_string(), Category::Relation),
            ("chasing".to_string(), Category::Relation),
        ];
        ConceptVocabulary::build(&sentences, &lexicon).unwrap()
    }

    fn ids(vocab: &ConceptVocabulary, words: &[&str]) -> Vec<TokenId> {
        words.iter().map(|w| vocab.token_id(w).unwrap()).collect()
    }

    #[test]
    fn extraction_partitions_by_category() {
        let v = vocab();
        let set = extract_sentence_concepts(&normalize("a young woman wearing shirt"), &v, 20);
        assert_eq!(set.attributes, ids(&v, &["young"]));
        assert_eq!(set.objects, ids(&v, &["woman", "shirt"]));
        assert_eq!(set.relations, ids(&v, &["wearing"]));
        assert_eq!(set.global, ids(&v, &["young", "woman", "wearing", "shirt"]));
    }

    #[test]
    fn no_concepts_yields_null_placeholders() {
        let v = vocab();
        let set = extract_sentence_concepts(&normalize("a plain sentence here"), &v, 20);
        assert_eq!(set.attributes, vec![NULL_ATTRIBUTE]);
        assert_eq!(set.objects, vec![NULL_OBJECT]);
        assert_eq!(set.relations, vec![NULL_RELATION]);
        assert_eq!(set.global, vec![NULL_ATTRIBUTE, NULL_OBJECT, NULL_RELATION]);
    }

    #[test]
    fn duplicates_keep_first_occurrence() {
        let v = vocab();
        let set = extract_sentence_concepts(&normalize("dog chasing dog"), &v, 20);
        assert_eq!(set.objects, ids(&v, &["dog"]));
        assert_eq!(set.relations, ids(&v, &["chasing"]));
        assert_eq!(set.attributes, vec![NULL_ATTRIBUTE]);
        assert_eq!(set.global, ids(&v, &["dog", "chasing"]));
    }

    #[test]
    fn extraction_is_idempotent_on_its_own_output() {
        let v = vocab();
        let first = extract_sentence_concepts(&normalize("young woman wearing dog shirt"), &v, 20);
        let words: Vec<String> = first.global.iter().map(|&i| v.word(i).to_string()).collect();
        let second = extract_sentence_concepts(&words, &v, 20);
        assert_eq!(first, second);
    }

    #[test]
    fn cap_truncates_by_first_occurrence() {
        let v = vocab();
        let set = extract_sentence_concepts(&normalize("young woman shirt dog wearing"), &v, 2);
        assert_eq!(set.global, ids(&v, &["young", "woman"]));
        assert_eq!(set.relations, vec![NULL_RELATION]);
    }

    fn record(concepts: &[(&str, Category, f64)]) -> ImageConceptRecord {
        ImageConceptRecord {
            id: "img0".into(),
            concepts: concepts
                .iter()
                .map(|(w, c, s)| ScoredConcept { word: w.to_string(), category: *c, score: *s })
                .collect(),
        }
    }

    #[test]
    fn image_top_k_and_tie_break() {
        let v = vocab();
        let rec = record(&[
            ("woman", Category::Object, 0.9),
            ("shirt", Category::Object, 0.5),
            ("dog", Category::Object, 0.5),
            ("young", Category::Attribute, 0.1),
        ]);
        let set = load_image_concepts(&rec, &v, 3).unwrap();
        // 0.5 tie resolves alphabetically: dog before shirt.
        assert_eq!(set.global, ids(&v, &["woman", "dog", "shirt"]));
        assert_eq!(set.attributes, vec![NULL_ATTRIBUTE]);
    }

    #[test]
    fn image_unknown_word_names_the_word() {
        let v = vocab();
        let rec = record(&[("flibber", Category::Object, 1.0)]);
        let err = load_image_concepts(&rec, &v, 20).unwrap_err();
        assert_eq!(err, ConceptError::UnknownWord("flibber".into()));
    }

    #[test]
    fn image_category_disagreement_rejected() {
        let v = vocab();
        let rec = record(&[("woman", Category::Attribute, 1.0)]);
        let err = load_image_concepts(&rec, &v, 20).unwrap_err();
        assert!(matches!(err, ConceptError::CategoryMismatch { .. }));
    }

    #[test]
    fn image_load_is_deterministic() {
        let v = vocab();
        let rec = record(&[
            ("woman", Category::Object, 0.25),
            ("wearing", Category::Relation, 0.25),
            ("young", Category::Attribute, 0.25),
        ]);
        let a = load_image_concepts(&rec, &v, 20).unwrap();
        let b = load_image_concepts(&rec, &v, 20).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn partition_sizes_cover_global() {
        let v = vocab();
        for text in ["dog chasing dog", "a plain sentence here", "young woman wearing shirt"] {
            let set = extract_sentence_concepts(&normalize(text), &v, 20);
            let total = set.attributes.len() + set.objects.len() + set.relations.len();
            assert!(total >= set.global_len());
            assert!(set.global_len() >= 1);
        }
    }
}
