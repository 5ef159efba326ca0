//! Synthetic multiple-choice counting task with gold rationales.
//!
//! A question is a query word (`most` or `least`) followed by a sequence of
//! symbols; the answer is the label of the symbol occurring most (or least)
//! often. Gold rationales state counts using fact bigrams only, in one of
//! three styles picked by a hash of the question:
//!
//! * concise: `A has n3 most A`
//! * repetitive: `A has n3 A has n3 most A`
//! * uninformative: `B has n2 C has n1` (runners-up, no conclusion)

use std::collections::HashSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pool::{Instance, Origin};
use crate::rewards::{FactOverlapOracle, RewardSpec};
use crate::vocab::Vocabulary;

const HAS: &str = "has";
const MOST: &str = "most";
const LEAST: &str = "least";
const MAX_SYMBOLS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTask {
    /// Number of symbols, equal to the number of answer choices.
    pub choices: usize,
    /// Symbols per question.
    pub length: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self { choices: 4, length: 7 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Style {
    Concise,
    Repetitive,
    Uninformative,
}

/// The three disjoint splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Instance>,
    pub val: Vec<Instance>,
    pub test: Vec<Instance>,
}

fn symbol(i: usize) -> String {
    ((b'A' + i as u8) as char).to_string()
}

fn label(i: usize) -> String {
    format!("({})", (b'a' + i as u8) as char)
}

fn count_token(k: usize) -> String {
    format!("n{k}")
}

/// FNV-1a over the question's tokens.
fn question_hash(question: &[String]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for tok in question {
        for b in tok.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYMBOLS).contains(&self.choices) {
            return Err(Error::Config(format!("choices must be in 2..={MAX_SYMBOLS}, got {}", self.choices)));
        }
        if !(1..=32).contains(&self.length) {
            return Err(Error::Config(format!("length must be in 1..=32, got {}", self.length)));
        }
        Ok(())
    }

    pub fn symbols(&self) -> Vec<String> {
        (0..self.choices).map(symbol).collect()
    }

    pub fn labels(&self) -> Vec<String> {
        (0..self.choices).map(label).collect()
    }

    /// Content tokens in a fixed order.
    pub fn content_tokens(&self) -> Vec<String> {
        let mut toks = self.symbols();
        toks.extend([HAS, MOST, LEAST].map(String::from));
        toks.extend((0..=self.length).map(count_token));
        toks.extend(self.labels());
        toks
    }

    /// Task vocabulary with control tokens for every registered reward.
    pub fn vocabulary(&self) -> Result<Vocabulary> {
        self.validate()?;
        let mut vocab = Vocabulary::build(&[self.content_tokens()])?;
        vocab.register_control_tokens(&RewardSpec::registry())?;
        Ok(vocab)
    }

    /// Every bigram a well-formed count statement can contain.
    pub fn fact_oracle(&self) -> Result<FactOverlapOracle> {
        let mut facts = Vec::new();
        for s in self.symbols() {
            facts.push((s.clone(), HAS.to_string()));
            facts.push((MOST.to_string(), s.clone()));
            facts.push((LEAST.to_string(), s.clone()));
            for k in 0..=self.length {
                facts.push((count_token(k), s.clone()));
            }
        }
        for k in 0..=self.length {
            facts.push((HAS.to_string(), count_token(k)));
            facts.push((count_token(k), MOST.to_string()));
            facts.push((count_token(k), LEAST.to_string()));
        }
        FactOverlapOracle::bigrams(facts)
    }

    fn counts(&self, question: &[String]) -> Result<(bool, Vec<usize>)> {
        let (query, body) = question
            .split_first()
            .ok_or_else(|| Error::Config("empty question".into()))?;
        let most = match query.as_str() {
            MOST => true,
            LEAST => false,
            other => return Err(Error::Config(format!("unknown query word {other:?}"))),
        };
        let mut counts = vec![0usize; self.choices];
        for tok in body {
            let i = self
                .symbols()
                .iter()
                .position(|s| s == tok)
                .ok_or_else(|| Error::Config(format!("unknown symbol {tok:?}")))?;
            counts[i] += 1;
        }
        Ok((most, counts))
    }

    /// Symbol indices from the answer outward: by count (descending for
    /// `most`, ascending for `least`), ties by index.
    fn ranking(&self, question: &[String]) -> Result<(bool, Vec<usize>, Vec<usize>)> {
        let (most, counts) = self.counts(question)?;
        let mut order: Vec<usize> = (0..self.choices).collect();
        order.sort_by(|&a, &b| {
            let c = if most { counts[b].cmp(&counts[a]) } else { counts[a].cmp(&counts[b]) };
            c.then(a.cmp(&b))
        });
        Ok((most, counts, order))
    }

    fn has_unique_answer(&self, question: &[String]) -> Result<bool> {
        let (_, counts, order) = self.ranking(question)?;
        Ok(counts[order[0]] != counts[order[1]])
    }

    /// Gold answer label.
    pub fn gold(&self, question: &[String]) -> Result<String> {
        let (_, _, order) = self.ranking(question)?;
        Ok(label(order[0]))
    }

    pub fn style(&self, question: &[String]) -> Style {
        match question_hash(question) % 100 {
            0..=24 => Style::Concise,
            25..=69 => Style::Repetitive,
            _ => Style::Uninformative,
        }
    }

    /// Gold rationale tokens in the question's style.
    pub fn gold_rationale(&self, question: &[String]) -> Result<Vec<String>> {
        let (most, counts, order) = self.ranking(question)?;
        let statement = |i: usize| vec![symbol(i), HAS.to_string(), count_token(counts[i])];
        let conclusion = vec![(if most { MOST } else { LEAST }).to_string(), symbol(order[0])];
        Ok(match self.style(question) {
            Style::Concise => [statement(order[0]), conclusion].concat(),
            Style::Repetitive => [statement(order[0]), statement(order[0]), conclusion].concat(),
            Style::Uninformative => order[1..].iter().take(2).flat_map(|&i| statement(i)).collect(),
        })
    }

    /// Rationale, answer delimiter and gold label.
    pub fn gold_generation(&self, question: &[String], vocab: &Vocabulary) -> Result<Vec<u32>> {
        let mut toks = vocab.encode(&self.gold_rationale(question)?)?;
        toks.push(vocab.special().delim);
        toks.push(vocab.id(&self.gold(question)?)?);
        Ok(toks)
    }

    fn random_question<R: Rng>(&self, rng: &mut R) -> Vec<String> {
        let mut q = vec![(if rng.gen_bool(0.5) { MOST } else { LEAST }).to_string()];
        q.extend((0..self.length).map(|_| symbol(rng.gen_range(0..self.choices))));
        q
    }

    /// Disjoint train/val/test splits of unique questions with unique
    /// answers; ids run consecutively across the splits.
    pub fn generate(&self, sizes: (usize, usize, usize), seed: u64, vocab: &Vocabulary) -> Result<Splits> {
        self.validate()?;
        let (n_train, n_val, n_test) = sizes;
        if n_train == 0 || n_val == 0 || n_test == 0 {
            return Err(Error::Config("split sizes must be at least 1".into()));
        }
        let total = n_train + n_val + n_test;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = HashSet::new();
        let mut all = Vec::with_capacity(total);
        let max_attempts = 1000 * total;
        let mut attempts = 0;
        while all.len() < total {
            attempts += 1;
            if attempts > max_attempts {
                return Err(Error::Config(format!(
                    "could not draw {total} unique questions with choices={} length={}",
                    self.choices, self.length
                )));
            }
            let q = self.random_question(&mut rng);
            if !self.has_unique_answer(&q)? || !seen.insert(q.clone()) {
                continue;
            }
            let gold = self.gold(&q)?;
            all.push(Instance {
                id: all.len() as u64,
                question: vocab.encode(&q)?,
                choices: self.labels(),
                generation: Some(self.gold_generation(&q, vocab)?),
                predicted: Some(gold.clone()),
                gold,
                scores: None,
                bins: None,
                origin: Origin::SilverSeed,
                step: None,
            });
        }
        let test = all.split_off(n_train + n_val);
        let val = all.split_off(n_train);
        Ok(Splits { train: all, val, test })
    }
}
