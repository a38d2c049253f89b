//! Caption vocabulary and the categorized concept vocabulary.
//!
//! The caption vocabulary `D` holds every training-corpus word with frequency
//! at least [`MIN_WORD_FREQ`] plus the reserved tokens. Concept words are the
//! subset of `D` that appears in the category lexicon; each carries exactly
//! one category. Concepts share the word embedding table with the decoder
//! input, which is why every concept word must be a member of `D`.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

/// Corpus words rarer than this are replaced by `UNK`.
pub const MIN_WORD_FREQ: usize = 5;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// Learned placeholder injected when a concept category is empty.
pub const NULL_ATTRIBUTE: TokenId = 4;
pub const NULL_OBJECT: TokenId = 5;
pub const NULL_RELATION: TokenId = 6;

pub const RESERVED: [(&str, TokenId); 7] = [
    ("<pad>", PAD),
    ("<bos>", BOS),
    ("<eos>", EOS),
    ("<unk>", UNK),
    ("<null:attribute>", NULL_ATTRIBUTE),
    ("<null:object>", NULL_OBJECT),
    ("<null:relation>", NULL_RELATION),
];

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Attribute,
    Object,
    Relation,
}

impl Category {
    pub fn null_token(self) -> TokenId {
        match self {
            Category::Attribute => NULL_ATTRIBUTE,
            Category::Object => NULL_OBJECT,
            Category::Relation => NULL_RELATION,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Attribute => "attribute",
            Category::Object => "object",
            Category::Relation => "relation",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VocabError {
    EmptyCorpus,
    DuplicateLexiconWord(String),
}

impl fmt::Display for VocabError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VocabError::EmptyCorpus => write!(f, "cannot build a vocabulary from an empty corpus"),
            VocabError::DuplicateLexiconWord(w) => {
                write!(f, "lexicon assigns more than one category to '{w}'")
            }
        }
    }
}

impl core::error::Error for VocabError {}

/// Caption vocabulary `D` plus the categorized concept subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, TokenId>,
    /// Concept word id -> category; disjoint by construction.
    concepts: BTreeMap<TokenId, Category>,
}

impl ConceptVocabulary {
    /// Build from tokenized training sentences and a `word -> category`
    /// lexicon. Lexicon words that never reach the frequency threshold are
    /// dropped from the concept vocabulary (they are not in `D`).
    pub fn build(
        sentences: &[Vec<String>],
        lexicon: &[(String, Category)],
    ) -> Result<Self, VocabError> {
        if sentences.is_empty() {
            return Err(VocabError::EmptyCorpus);
        }
        let mut categories: BTreeMap<&str, Category> = BTreeMap::new();
        for (word, cat) in lexicon {
            if categories.insert(word.as_str(), *cat).is_some() {
                return Err(VocabError::DuplicateLexiconWord(word.clone()));
            }
        }

        let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
        for sent in sentences {
            for tok in sent {
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }

        let mut words: Vec<String> = RESERVED.iter().map(|(w, _)| w.to_string()).collect();
        // BTreeMap iteration makes id assignment deterministic (alphabetical).
        for (word, count) in &freq {
            if *count >= MIN_WORD_FREQ {
                words.push(word.to_string());
            }
        }

        let mut vocab = ConceptVocabulary {
            words,
            index: BTreeMap::new(),
            concepts: BTreeMap::new(),
        };
        vocab.rebuild_index();
        for (word, cat) in categories {
            if let Some(&id) = vocab.index.get(word) {
                vocab.concepts.insert(id, cat);
            }
        }
        Ok(vocab)
    }

    /// Restore the derived index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as TokenId))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn token_id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    /// Category of a concept word id, if it is one.
    pub fn concept_category(&self, id: TokenId) -> Option<Category> {
        self.concepts.get(&id).copied()
    }

    pub fn concept_count(&self) -> usize {
        self.concepts.len()
    }

    pub fn concept_ids(&self) -> impl Iterator<Item = (TokenId, Category)> + '_ {
        self.concepts.iter().map(|(&id, &c)| (id, c))
    }

    /// Encode tokens, mapping out-of-vocabulary words to `UNK`.
    pub fn encode(&self, tokens: &[String]) -> Vec<TokenId> {
        tokens
            .iter()
            .map(|t| self.token_id(t).unwrap_or(UNK))
            .collect()
    }

    /// Join ids back into a sentence, skipping nothing.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for (i, &id) in ids.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(self.word(id));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::normalize;
    use alloc::vec;

    fn toy_sentences() -> Vec<Vec<String>> {
        // "young", "woman", "wearing", "shirt", "a" each appear 5 times;
        // "rare" appears once and must be dropped.
        let mut s: Vec<Vec<String>> = (0..5)
            .map(|_| normalize("a young woman wearing shirt"))
            .collect();
        s.push(normalize("rare"));
        s
    }

    fn toy_lexicon() -> Vec<(String, Category)> {
        vec![
            ("young".into(), Category::Attribute),
            ("woman".into(), Category::Object),
            ("shirt".into(), Category::Object),
            ("wearing".into(), Category::Relation),
            ("rare".into(), Category::Object),
        ]
    }

    #[test]
    fn frequency_threshold_and_reserved_tokens() {
        let v = ConceptVocabulary::build(&toy_sentences(), &toy_lexicon()).unwrap();
        assert_eq!(v.len(), 7 + 5); // reserved + {a, shirt, wearing, woman, young}
        assert!(v.token_id("rare").is_none());
        assert_eq!(v.token_id("<bos>"), Some(BOS));
        assert_eq!(v.encode(&normalize("rare woman"))[0], UNK);
    }

    #[test]
    fn concept_words_are_in_vocabulary_with_one_category() {
        let v = ConceptVocabulary::build(&toy_sentences(), &toy_lexicon()).unwrap();
        for (id, _) in v.concept_ids() {
            assert!((id as usize) < v.len());
        }
        let woman = v.token_id("woman").unwrap();
        assert_eq!(v.concept_category(woman), Some(Category::Object));
        // "rare" fell below the threshold, so it is not a concept either.
        assert_eq!(v.concept_count(), 4);
    }

    #[test]
    fn duplicate_lexicon_entry_rejected() {
        let mut lex = toy_lexicon();
        lex.push(("woman".into(), Category::Attribute));
        let err = ConceptVocabulary::build(&toy_sentences(), &lex).unwrap_err();
        assert_eq!(err, VocabError::DuplicateLexiconWord("woman".into()));
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = ConceptVocabulary::build(&toy_sentences(), &toy_lexicon()).unwrap();
        let toks = normalize("a young woman wearing shirt");
        let ids = v.encode(&toks);
        assert_eq!(v.decode(&ids), "a young woman wearing shirt");
    }
}
