//! The four rationale/answer reward functions.

use std::collections::{BTreeSet, HashSet};
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::vocab::TokenId;

use super::predictors::ConsistencyPredictors;

/// Product over n = 2..=4 of `unique n-grams / total n-grams`.
///
/// An order with no n-grams at all (sequence shorter than n) contributes a
/// neutral factor of 1.
pub fn diversity<T: Eq + Hash>(rationale: &[T]) -> f64 {
    (2..=4)
        .map(|n| {
            if rationale.len() < n {
                return 1.0;
            }
            let total = rationale.len() - n + 1;
            let unique: HashSet<&[T]> = rationale.windows(n).collect();
            unique.len() as f64 / total as f64
        })
        .product()
}

/// 1 iff the predicted label equals gold; a missing prediction is wrong.
pub fn task_correctness(predicted: Option<&str>, gold: &str) -> f64 {
    match predicted {
        Some(p) if p == gold => 1.0,
        _ => 0.0,
    }
}

/// `P_QR(gold | question, rationale) - P_Q(gold | question)`.
pub fn consistency(
    predictors: &ConsistencyPredictors,
    question: &[TokenId],
    rationale: &[TokenId],
    gold: &str,
) -> Result<f64> {
    let with = predictors.prob_with_rationale(question, rationale, gold)?;
    let without = predictors.prob_without_rationale(question, gold)?;
    Ok((with - without).clamp(-1.0, 1.0))
}

/// Any frozen scorer mapping a rationale to `[0, 1]`.
pub trait PlausibilityScorer: Send + Sync {
    fn score(&self, rationale: &[String]) -> Result<f64>;
}

/// Fraction of the rationale's n-grams that appear in a fixed fact set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactOverlapOracle {
    n: usize,
    facts: BTreeSet<Vec<String>>,
}

const FACTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactsDocument {
    version: u32,
    n: usize,
    facts: Vec<Vec<String>>,
}

impl FactOverlapOracle {
    pub fn new(n: usize, facts: impl IntoIterator<Item = Vec<String>>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Reward("n-gram order must be positive".into()));
        }
        let facts: BTreeSet<Vec<String>> = facts.into_iter().collect();
        if facts.is_empty() {
            return Err(Error::Reward("plausibility fact set is empty".into()));
        }
        if let Some(bad) = facts.iter().find(|f| f.len() != n) {
            return Err(Error::Reward(format!("fact {bad:?} is not a {n}-gram")));
        }
        Ok(Self { n, facts })
    }

    pub fn bigrams(facts: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        Self::new(2, facts.into_iter().map(|(a, b)| vec![a, b]))
    }

    pub fn order(&self) -> usize {
        self.n
    }

    pub fn contains(&self, gram: &[String]) -> bool {
        self.facts.contains(gram)
    }

    pub fn facts(&self) -> impl Iterator<Item = &Vec<String>> {
        self.facts.iter()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &FactsDocument {
                version: FACTS_VERSION,
                n: self.n,
                facts: self.facts.iter().cloned().collect(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: FactsDocument = io::read_json(path)?;
        if doc.version != FACTS_VERSION {
            return Err(Error::Version {
                what: "fact set",
                found: doc.version,
                expected: FACTS_VERSION,
            });
        }
        Self::new(doc.n, doc.facts)
    }
}

impl PlausibilityScorer for FactOverlapOracle {
    /// Rationales too short to contain an n-gram score 0.
    fn score(&self, rationale: &[String]) -> Result<f64> {
        if rationale.len() < self.n {
            return Ok(0.0);
        }
        let total = rationale.len() - self.n + 1;
        let hits = rationale
            .windows(self.n)
            .filter(|w| self.facts.contains(*w))
            .count();
        Ok(hits as f64 / total as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashMap;

    /// Independent enumerator: counts every n-gram occurrence in a map.
    fn brute_diversity(seq: &[u32]) -> f64 {
        let mut prod = 1.0;
        for n in 2..=4usize {
            let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
            let mut total = 0usize;
            let mut i = 0;
            while i + n <= seq.len() {
                *counts.entry(seq[i..i + n].to_vec()).or_default() += 1;
                total += 1;
                i += 1;
            }
            if total > 0 {
                prod *= counts.len() as f64 / total as f64;
            }
        }
        prod
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(diversity(&s(&["v", "w", "x", "y", "z"])), 1.0);
        let rep = diversity(&s(&["a", "b", "a", "b", "a", "b"]));
        assert!((rep - (2.0 / 5.0) * (2.0 / 4.0) * (2.0 / 3.0)).abs() < 1e-15);
        assert_eq!(diversity(&s(&["a", "b", "c"])), 1.0);
        assert_eq!(diversity::<String>(&[]), 1.0);
    }

    #[test]
    fn correctness_examples() {
        assert_eq!(task_correctness(Some("(d)"), "(d)"), 1.0);
        assert_eq!(task_correctness(Some("(a)"), "(d)"), 0.0);
        assert_eq!(task_correctness(None, "(a)"), 0.0);
    }

    #[test]
    fn plausibility_examples() {
        let oracle = FactOverlapOracle::bigrams(
            [("a", "b"), ("b", "c"), ("c", "d")]
                .iter()
                .map(|(x, y)| (x.to_string(), y.to_string())),
        )
        .unwrap();
        assert_eq!(oracle.score(&s(&["a", "b", "c", "d"])).unwrap(), 1.0);
        assert_eq!(oracle.score(&s(&["d", "a", "d"])).unwrap(), 0.0);
        // bigrams: ab bc cx xa ab -> 3 of 5 in the set
        assert!((oracle.score(&s(&["a", "b", "c", "x", "a", "b"])).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(oracle.score(&[]).unwrap(), 0.0);
    }

    #[test]
    fn empty_fact_set_is_an_error() {
        assert!(FactOverlapOracle::bigrams(std::iter::empty()).is_err());
    }

    #[test]
    fn fact_set_round_trip() {
        let oracle = FactOverlapOracle::bigrams([("a".into(), "b".into())]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("facts.json");
        oracle.save(&path).unwrap();
        assert_eq!(FactOverlapOracle::load(&path).unwrap(), oracle);
    }

    proptest! {
        #[test]
        fn diversity_matches_enumerator(seq in proptest::collection::vec(0u32..20, 0..40)) {
            let d = diversity(&seq);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d - brute_diversity(&seq)).abs() <= 1e-12);
        }

        #[test]
        fn plausibility_is_membership_fraction(
            seq in proptest::collection::vec(0u8..5, 0..20),
            facts in proptest::collection::btree_set((0u8..5, 0u8..5), 1..10),
        ) {
            let tok = |x: u8| format!("t{x}");
            let oracle = FactOverlapOracle::bigrams(facts.iter().map(|(a, b)| (tok(*a), tok(*b)))).unwrap();
            let rationale: Vec<String> = seq.iter().map(|&x| tok(x)).collect();
            let mut hits = 0;
            let mut total = 0;
            for i in 1..seq.len() {
                total += 1;
                if facts.contains(&(seq[i - 1], seq[i])) {
                    hits += 1;
                }
            }
            let expected = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
            prop_assert_eq!(oracle.score(&rationale).unwrap(), expected);
        }
    }
}
