//! Reward definitions and per-instance scoring.

mod metrics;
mod predictors;

use std::collections::BTreeMap;

pub use metrics::{consistency, diversity, task_correctness, FactOverlapOracle, PlausibilityScorer};
pub use predictors::{ConsistencyPredictors, PredictorAccuracy, PredictorConfig, PredictorExample};

use crate::error::{Error, Result};
use crate::eval::nrg;
use crate::vocab::{TokenId, Vocabulary};

pub const PLAUSIBILITY: &str = "plausibility";
pub const DIVERSITY: &str = "diversity";
pub const CONSISTENCY: &str = "consistency";
pub const CORRECTNESS: &str = "correctness";
pub const PRODUCT: &str = "product";

/// What a reward measures.
#[derive(Debug, Clone, PartialEq)]
pub enum RewardKind {
    Plausibility,
    Diversity,
    Consistency,
    Correctness,
    /// Product of the components' range-normalized scores.
    Product(Vec<RewardSpec>),
}

/// How a reward's scores are turned into bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binning {
    /// Equal-mass groups from a descending sort.
    Quantile,
    /// Binary: bin 1 iff the score equals the range maximum.
    Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RewardSpec {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub bins: u32,
    pub kind: RewardKind,
    pub binning: Binning,
}

impl RewardSpec {
    pub fn plausibility() -> Self {
        Self::quantile(PLAUSIBILITY, 0.0, 1.0, RewardKind::Plausibility)
    }

    pub fn diversity() -> Self {
        Self::quantile(DIVERSITY, 0.0, 1.0, RewardKind::Diversity)
    }

    pub fn consistency() -> Self {
        Self::quantile(CONSISTENCY, -1.0, 1.0, RewardKind::Consistency)
    }

    pub fn correctness() -> Self {
        Self {
            name: CORRECTNESS.into(),
            min: 0.0,
            max: 1.0,
            bins: 2,
            kind: RewardKind::Correctness,
            binning: Binning::Value,
        }
    }

    /// Single reward combining the four standard ones.
    pub fn product() -> Self {
        Self::quantile(PRODUCT, 0.0, 1.0, RewardKind::Product(Self::standard()))
    }

    fn quantile(name: &str, min: f64, max: f64, kind: RewardKind) -> Self {
        Self {
            name: name.into(),
            min,
            max,
            bins: 5,
            kind,
            binning: Binning::Quantile,
        }
    }

    pub fn with_bins(mut self, bins: u32) -> Self {
        self.bins = bins;
        self
    }

    /// Plausibility, diversity, consistency and task correctness.
    pub fn standard() -> Vec<Self> {
        vec![Self::plausibility(), Self::diversity(), Self::consistency(), Self::correctness()]
    }

    /// Every reward a run may condition on; control tokens are reserved for
    /// all of them up front so the vocabulary never grows.
    pub fn registry() -> Vec<Self> {
        let mut all = Self::standard();
        all.push(Self::product());
        all
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::registry()
            .into_iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Reward(format!("unknown reward {name:?}")))
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }
}

/// Reward name -> score.
pub type RewardVector = BTreeMap<String, f64>;

/// A generation split at the last answer delimiter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedGeneration<'a> {
    pub rationale: &'a [TokenId],
    pub answer: Option<TokenId>,
}

/// Tokens before the last delimiter are the rationale, the token right after
/// it is the answer. Without a delimiter the whole generation is rationale
/// and there is no answer.
pub fn parse_answer(generation: &[TokenId], delim: TokenId) -> ParsedGeneration<'_> {
    match generation.iter().rposition(|&t| t == delim) {
        Some(pos) => ParsedGeneration {
            rationale: &generation[..pos],
            answer: generation.get(pos + 1).copied(),
        },
        None => ParsedGeneration {
            rationale: generation,
            answer: None,
        },
    }
}

/// Decodes the predicted label of a generation, if any.
pub fn predicted_label(generation: &[TokenId], vocab: &Vocabulary) -> Result<Option<String>> {
    let parsed = parse_answer(generation, vocab.special().delim);
    parsed
        .answer
        .map(|id| vocab.token(id).map(str::to_string))
        .transpose()
}

/// Frozen scorers shared by every scoring call.
#[derive(Clone, Copy)]
pub struct ScoringContext<'a> {
    pub vocab: &'a Vocabulary,
    pub predictors: &'a ConsistencyPredictors,
    pub plausibility: &'a dyn PlausibilityScorer,
}

/// Scores one generation for `question`/`gold` under every listed reward.
pub fn score_generation(
    question: &[TokenId],
    gold: &str,
    generation: &[TokenId],
    rewards: &[RewardSpec],
    ctx: &ScoringContext<'_>,
) -> Result<RewardVector> {
    let parsed = parse_answer(generation, ctx.vocab.special().delim);
    let predicted = parsed.answer.map(|id| ctx.vocab.token(id)).transpose()?;
    let mut out = RewardVector::new();
    for spec in rewards {
        let value = score_one(spec, question, gold, parsed.rationale, predicted, ctx)?;
        if !value.is_finite() || !spec.contains(value) {
            return Err(Error::OutOfRange {
                value,
                min: spec.min,
                max: spec.max,
            });
        }
        out.insert(spec.name.clone(), value);
    }
    Ok(out)
}

fn score_one(
    spec: &RewardSpec,
    question: &[TokenId],
    gold: &str,
    rationale: &[TokenId],
    predicted: Option<&str>,
    ctx: &ScoringContext<'_>,
) -> Result<f64> {
    Ok(match &spec.kind {
        RewardKind::Plausibility => ctx.plausibility.score(&ctx.vocab.decode(rationale)?)?,
        RewardKind::Diversity => diversity(rationale),
        RewardKind::Consistency => consistency(ctx.predictors, question, rationale, gold)?,
        RewardKind::Correctness => task_correctness(predicted, gold),
        RewardKind::Product(components) => {
            let mut prod = 1.0;
            for c in components {
                let v = score_one(c, question, gold, rationale, predicted, ctx)?;
                prod *= nrg(v, c.min, c.max)?;
            }
            prod
        }
    })
}

/// Product-baseline combination of already computed component scores.
pub fn product_score(scores: &RewardVector, components: &[RewardSpec]) -> Result<f64> {
    let mut prod = 1.0;
    for c in components {
        let v = scores
            .get(&c.name)
            .ok_or_else(|| Error::Reward(format!("missing score for {}", c.name)))?;
        prod *= nrg(*v, c.min, c.max)?;
    }
    Ok(prod)
}
