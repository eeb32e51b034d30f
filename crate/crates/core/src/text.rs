//! Text normalization and tokenization shared by every stage of the pipeline.
//!
//! All matching (KG object lookup, answer linking, entity scoring) goes
//! through [`normalize`] so that the same surface form always produces the
//! same key.

use unicode_normalization::UnicodeNormalization;

/// NFC-normalize, lowercase and collapse runs of whitespace into one space.
pub fn normalize(text: &str) -> String {
    let lowered: String = text.nfc().collect::<String>().to_lowercase();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased tokens; punctuation characters become tokens of their own.
pub fn tokenize(text: &str) -> Vec<String> {
    let normalized = normalize(text);
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in normalized.chars() {
        if ch.is_whitespace() {
            flush(&mut current, &mut tokens);
        } else if ch.is_alphanumeric() {
            current.push(ch);
        } else {
            flush(&mut current, &mut tokens);
            tokens.push(ch.to_string());
        }
    }
    flush(&mut current, &mut tokens);
    tokens
}

fn flush(current: &mut String, tokens: &mut Vec<String>) {
    if !current.is_empty() {
        tokens.push(std::mem::take(current));
    }
}

/// Canonical matching key for an entity label: its tokens joined by one space.
pub fn entity_key(label: &str) -> String {
    tokenize(label).join(" ")
}

/// True when every character of the token is punctuation or a symbol.
pub fn is_punctuation(token: &str) -> bool {
    !token.is_empty() && token.chars().all(|c| !c.is_alphanumeric() && !c.is_whitespace())
}

/// Jaccard index over the token sets of two sequences.
pub fn token_jaccard<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> f64 {
    use std::collections::BTreeSet;
    let left: BTreeSet<&str> = a.iter().map(|t| t.as_ref()).collect();
    let right: BTreeSet<&str> = b.iter().map(|t| t.as_ref()).collect();
    if left.is_empty() && right.is_empty() {
        return 1.0;
    }
    let inter = left.intersection(&right).count() as f64;
    let union = left.union(&right).count() as f64;
    inter / union
}
