//! Sentence normalization shared by the training pipeline and the metrics.

use alloc::string::String;
use alloc::vec::Vec;

/// Lowercase, drop ASCII punctuation, split on whitespace.
pub fn normalize(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .filter_map(|w| {
            let token: String = w
                .chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(|c| c.to_lowercase())
                .collect();
            if token.is_empty() {
                None
            } else {
                Some(token)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn lowercases_and_strips_punctuation() {
        assert_eq!(
            normalize("A man's hat, on the mat!"),
            vec!["a", "mans", "hat", "on", "the", "mat"]
        );
    }

    #[test]
    fn drops_punctuation_only_tokens() {
        assert_eq!(normalize("hello -- world ..."), vec!["hello", "world"]);
    }

    #[test]
    fn empty_input_gives_empty_tokens() {
        assert!(normalize("   ").is_empty());
    }
}
