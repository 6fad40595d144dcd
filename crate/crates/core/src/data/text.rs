//! Unigram featurization of per-timestamp text bundles.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::SideInfo;
use crate::error::Result;

/// One post: a user, a minute timestamp, and raw text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBundle {
    pub user_id: String,
    pub timestamp_min: i64,
    pub text: String,
}

/// Lowercase, split on non-alphanumerics, keep tokens of length >= 2.
fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(|t| t.to_string())
        .collect()
}

/// Build per-user unigram features from text bundles.
///
/// The vocabulary keeps tokens whose total corpus count is strictly greater
/// than `min_count`, ordered lexicographically. Each feature value is the
/// token's count within the posts at one timestamp, divided by the user's
/// total post count. Users are returned sorted by id.
pub fn unigram_featurize(docs: &[TextBundle], min_count: usize) -> Result<Vec<SideInfo>> {
    let mut corpus_counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        for token in tokenize(&doc.text) {
            *corpus_counts.entry(token).or_insert(0) += 1;
        }
    }
    let vocab: Vec<String> = corpus_counts
        .into_iter()
        .filter(|(_, count)| *count > min_count)
        .map(|(token, _)| token)
        .collect();
    let vocab_index: BTreeMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i))
        .collect();

    // user -> timestamp -> token counts; plus user -> total posts
    let mut per_user: BTreeMap<String, BTreeMap<i64, Vec<f64>>> = BTreeMap::new();
    let mut post_counts: BTreeMap<String, usize> = BTreeMap::new();
    for doc in docs {
        *post_counts.entry(doc.user_id.clone()).or_insert(0) += 1;
        let bundle = per_user
            .entry(doc.user_id.clone())
            .or_default()
            .entry(doc.timestamp_min)
            .or_insert_with(|| vec![0.0; vocab.len()]);
        for token in tokenize(&doc.text) {
            if let Some(&col) = vocab_index.get(token.as_str()) {
                bundle[col] += 1.0;
            }
        }
    }

    per_user
        .into_iter()
        .map(|(user_id, bundles)| {
            let total_posts = post_counts[&user_id] as f64;
            let timestamps: Vec<i64> = bundles.keys().copied().collect();
            let features = DMatrix::from_fn(bundles.len(), vocab.len(), |r, c| {
                bundles[&timestamps[r]][c] / total_posts
            });
            SideInfo::new(user_id, timestamps, features, vocab.clone())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(user: &str, ts: i64, text: &str) -> TextBundle {
        TextBundle {
            user_id: user.into(),
            timestamp_min: ts,
            text: text.into(),
        }
    }

    #[test]
    fn vocabulary_threshold_is_strict() {
        // "juice" appears 11 times, "gym" 10 times.
        let mut docs = Vec::new();
        for i in 0..11 {
            docs.push(bundle("u1", i, "juice"));
        }
        for i in 0..10 {
            docs.push(bundle("u2", i, "gym"));
        }
        let sides = unigram_featurize(&docs, 10).unwrap();
        assert_eq!(sides[0].feature_names, vec!["juice".to_string()]);
    }

    #[test]
    fn normalization_by_post_count() {
        // Four posts for u1; at timestamp 0 the token "low" appears twice.
        let docs = vec![
            bundle("u1", 0, "low low sugar"),
            bundle("u1", 10, "coffee"),
            bundle("u1", 20, "gym later"),
            bundle("u1", 30, "fine now"),
        ];
        let sides = unigram_featurize(&docs, 0).unwrap();
        let side = &sides[0];
        let low_col = side.feature_names.iter().position(|t| t == "low").unwrap();
        assert_eq!(side.features[(0, low_col)], 0.5);
    }

    #[test]
    fn deterministic_lexicographic_vocab() {
        let docs = vec![
            bundle("u1", 0, "zebra apple mango"),
            bundle("u1", 5, "apple zebra"),
        ];
        let a = unigram_featurize(&docs, 0).unwrap();
        let b = unigram_featurize(&docs, 0).unwrap();
        assert_eq!(a[0].feature_names, b[0].feature_names);
        assert_eq!(
            a[0].feature_names,
            vec!["apple".to_string(), "mango".into(), "zebra".into()]
        );
        assert_eq!(a[0].features, b[0].features);
    }

    #[test]
    fn short_tokens_and_case_folding() {
        let docs = vec![bundle("u1", 0, "I AM ok Ok OK a b c")];
        let sides = unigram_featurize(&docs, 0).unwrap();
        // "I", "a", "b", "c" are dropped; "AM"/"ok" lowercase-fold
        assert_eq!(
            sides[0].feature_names,
            vec!["am".to_string(), "ok".to_string()]
        );
        assert_eq!(sides[0].features[(0, 1)], 3.0);
    }

    #[test]
    fn empty_corpus_gives_nothing() {
        let sides = unigram_featurize(&[], 10).unwrap();
        assert!(sides.is_empty());
    }

    #[test]
    fn multiple_posts_same_timestamp_merge() {
        let docs = vec![
            bundle("u1", 0, "coffee"),
            bundle("u1", 0, "more coffee"),
        ];
        let sides = unigram_featurize(&docs, 0).unwrap();
        let side = &sides[0];
        assert_eq!(side.timestamps, vec![0]);
        let coffee = side.feature_names.iter().position(|t| t == "coffee").unwrap();
        assert_eq!(side.features[(0, coffee)], 1.0); // 2 occurrences / 2 posts
    }
}
