//! Small text helpers shared by retrieval, routing and the metrics.

/// Lower-cased alphanumeric tokens. Everything that is not a letter, digit,
/// `_` or `-` separates tokens.
pub fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '_' || c == '-'))
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Whitespace token count, the unit used for generation cost accounting.
pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Case-folded whole-substring test.
pub fn contains_folded(haystack: &str, needle: &str) -> bool {
    if needle.is_empty() {
        return false;
    }
    haystack.to_lowercase().contains(&needle.to_lowercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_fold_and_split() {
        assert_eq!(tokens("Gear, is STEEL!"), vec!["gear", "is", "steel"]);
        assert_eq!(tokens("m6-bolt x4"), vec!["m6-bolt", "x4"]);
        assert!(tokens("  ?! ").is_empty());
    }

    #[test]
    fn substring_is_case_folded() {
        assert!(contains_folded("The Large Gear is steel", "large gear"));
        assert!(!contains_folded("gear", ""));
    }
}
