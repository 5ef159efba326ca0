//! The growing data pool: seed and sampled instances, their scores, per-reward
//! bins, control prefixes and batch sampling.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::policy::Example;
use crate::rewards::{parse_answer, predicted_label, score_generation, PredictorExample, Binning, RewardSpec, RewardVector, ScoringContext};
use crate::vocab::{ControlTokenTable, TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    SilverSeed,
    Sampled,
}

/// One question with (optionally) a generation, its scores and bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Instance {
    pub id: u64,
    pub question: Vec<TokenId>,
    pub choices: Vec<String>,
    pub gold: String,
    pub generation: Option<Vec<TokenId>>,
    pub predicted: Option<String>,
    pub scores: Option<RewardVector>,
    pub bins: Option<BTreeMap<String, u32>>,
    pub origin: Origin,
    pub step: Option<u64>,
}

impl Instance {
    pub fn score(&self, reward: &str) -> Option<f64> {
        self.scores.as_ref().and_then(|s| s.get(reward).copied())
    }

    pub fn bin(&self, reward: &str) -> Option<u32> {
        self.bins.as_ref().and_then(|b| b.get(reward).copied())
    }

    /// Predictor training row from the instance's own generation.
    pub fn predictor_example(&self, vocab: &Vocabulary) -> Result<PredictorExample> {
        let generation = self
            .generation
            .as_deref()
            .ok_or_else(|| Error::Pool(format!("instance {} has no generation", self.id)))?;
        Ok(PredictorExample {
            question: self.question.clone(),
            rationale: parse_answer(generation, vocab.special().delim).rationale.to_vec(),
            choices: self.choices.clone(),
            gold: self.gold.clone(),
        })
    }
}

/// Scores an instance's generation under every listed reward.
pub fn score_instance(instance: &Instance, rewards: &[RewardSpec], ctx: &ScoringContext<'_>) -> Result<RewardVector> {
    let generation = instance
        .generation
        .as_deref()
        .ok_or_else(|| Error::Pool(format!("instance {} has no generation", instance.id)))?;
    score_generation(&instance.question, &instance.gold, generation, rewards, ctx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Left,
    Right,
}

/// Active rewards in conditioning order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub active: Vec<String>,
    pub direction: Direction,
}

impl ScheduleState {
    pub fn empty() -> Self {
        Self {
            active: Vec::new(),
            direction: Direction::Right,
        }
    }

    pub fn all(rewards: &[String]) -> Self {
        Self {
            active: rewards.to_vec(),
            direction: Direction::Right,
        }
    }

    /// Activates `reward` on the configured side of the current prefix.
    pub fn insert(&mut self, reward: &str) {
        if self.active.iter().any(|r| r == reward) {
            return;
        }
        match self.direction {
            Direction::Right => self.active.push(reward.to_string()),
            Direction::Left => self.active.insert(0, reward.to_string()),
        }
    }
}

/// One token per active reward, in schedule order, for the instance's bins.
pub fn control_prefix(instance: &Instance, schedule: &ScheduleState, table: &ControlTokenTable) -> Result<Vec<TokenId>> {
    schedule
        .active
        .iter()
        .map(|r| {
            let bin = instance
                .bin(r)
                .ok_or_else(|| Error::Pool(format!("instance {} has no bin for {r:?}", instance.id)))?;
            table
                .get(r, bin)
                .ok_or_else(|| Error::Pool(format!("no control token for {r:?} bin {bin}")))
        })
        .collect()
}

/// Which bin every active reward is conditioned on at generation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Target {
    Best,
    Worst,
}

/// Prefix conditioning on bin 1 (best) or bin K (worst) for every active reward.
pub fn target_prefix(schedule: &ScheduleState, table: &ControlTokenTable, target: Target) -> Result<Vec<TokenId>> {
    schedule
        .active
        .iter()
        .map(|r| {
            let k = table
                .bins(r)
                .ok_or_else(|| Error::Pool(format!("no control tokens registered for {r:?}")))?;
            let bin = match target {
                Target::Best => 1,
                Target::Worst => k,
            };
            Ok(table.get(r, bin).expect("registered bin"))
        })
        .collect()
}

/// Equal-mass bins from a stable descending sort, ties broken by id.
/// Group sizes differ by at most one, larger groups first; bin 1 is best.
pub fn quantile_bins(scored: &[(u64, f64)], k: u32) -> Vec<u32> {
    let n = scored.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scored[b]
            .1
            .total_cmp(&scored[a].1)
            .then(scored[a].0.cmp(&scored[b].0))
    });
    let k = k as usize;
    let base = n / k;
    let extra = n % k;
    let mut bins = vec![0u32; n];
    let mut rank = 0;
    for bin in 0..k {
        let size = base + usize::from(bin < extra);
        for _ in 0..size {
            bins[order[rank]] = bin as u32 + 1;
            rank += 1;
        }
    }
    bins
}

#[derive(Debug, Clone)]
pub struct DataPool {
    instances: Vec<Instance>,
    next_id: u64,
    /// Seed id -> index of the seed instance.
    seeds: BTreeMap<u64, usize>,
}

impl DataPool {
    /// Pool of seed instances, each carrying a gold generation.
    pub fn new(seeds: Vec<Instance>, vocab: &Vocabulary) -> Result<Self> {
        if seeds.is_empty() {
            return Err(Error::Pool("empty seed set".into()));
        }
        let mut seen = HashSet::new();
        let mut instances = Vec::with_capacity(seeds.len());
        let mut index = BTreeMap::new();
        for mut inst in seeds {
            if !seen.insert(inst.id) {
                return Err(Error::Pool(format!("duplicate instance id {}", inst.id)));
            }
            let generation = inst
                .generation
                .as_deref()
                .ok_or_else(|| Error::Pool(format!("seed {} has no gold generation", inst.id)))?;
            inst.predicted = predicted_label(generation, vocab)?;
            inst.origin = Origin::SilverSeed;
            inst.step = None;
            index.insert(inst.id, instances.len());
            instances.push(inst);
        }
        let next_id = instances.iter().map(|i| i.id).max().unwrap_or(0) + 1;
        Ok(Self {
            instances,
            next_id,
            seeds: index,
        })
    }

    /// Pool holding `instances` exactly as given.
    #[cfg(test)]
    pub(crate) fn from_raw(instances: Vec<Instance>) -> Self {
        let seeds = instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.origin == Origin::SilverSeed)
            .map(|(k, i)| (i.id, k))
            .collect();
        let next_id = instances.iter().map(|i| i.id).max().unwrap_or(0) + 1;
        Self {
            instances,
            next_id,
            seeds,
        }
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn seed_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.seeds.keys().copied()
    }

    pub fn seed(&self, id: u64) -> Option<&Instance> {
        self.seeds.get(&id).map(|&i| &self.instances[i])
    }

    /// Appends sampled generations for known seed questions. Scores and bins
    /// stay empty until the next scoring pass.
    pub fn add_generations(&mut self, sampled: &[(u64, Vec<TokenId>)], step: u64, vocab: &Vocabulary) -> Result<usize> {
        for (qid, _) in sampled {
            if !self.seeds.contains_key(qid) {
                return Err(Error::Pool(format!("unknown question id {qid}")));
            }
        }
        for (qid, generation) in sampled {
            let seed = &self.instances[self.seeds[qid]];
            let inst = Instance {
                id: self.next_id,
                question: seed.question.clone(),
                choices: seed.choices.clone(),
                gold: seed.gold.clone(),
                predicted: predicted_label(generation, vocab)?,
                generation: Some(generation.clone()),
                scores: None,
                bins: None,
                origin: Origin::Sampled,
                step: Some(step),
            };
            self.next_id += 1;
            self.instances.push(inst);
        }
        Ok(sampled.len())
    }

    /// Scores every instance missing a score for any listed reward. Existing
    /// scores are kept: the scorers are frozen.
    pub fn score_pending(&mut self, rewards: &[RewardSpec], ctx: &ScoringContext<'_>) -> Result<usize> {
        let mut count = 0;
        for inst in &mut self.instances {
            let missing: Vec<RewardSpec> = rewards
                .iter()
                .filter(|r| inst.score(&r.name).is_none())
                .cloned()
                .collect();
            if missing.is_empty() {
                continue;
            }
            let fresh = score_instance(inst, &missing, ctx)?;
            inst.scores.get_or_insert_with(RewardVector::new).extend(fresh);
            count += 1;
        }
        Ok(count)
    }

    /// Assigns a bin for `reward` to every instance (pool order) and records it.
    pub fn bin_by_reward(&mut self, reward: &RewardSpec) -> Result<Vec<u32>> {
        let mut scored = Vec::with_capacity(self.instances.len());
        for inst in &self.instances {
            let s = inst
                .score(&reward.name)
                .ok_or_else(|| Error::Pool(format!("instance {} not scored for {}", inst.id, reward.name)))?;
            scored.push((inst.id, s));
        }
        let bins = match reward.binning {
            Binning::Quantile => quantile_bins(&scored, reward.bins),
            Binning::Value => scored
                .iter()
                .map(|&(_, s)| if s >= reward.max { 1 } else { reward.bins })
                .collect(),
        };
        for (inst, &b) in self.instances.iter_mut().zip(&bins) {
            inst.bins.get_or_insert_with(BTreeMap::new).insert(reward.name.clone(), b);
        }
        Ok(bins)
    }

    pub fn rebin(&mut self, rewards: &[RewardSpec]) -> Result<()> {
        for r in rewards {
            self.bin_by_reward(r)?;
        }
        Ok(())
    }

    /// Draws `batch_size` pool indices from `candidates`, without replacement
    /// when possible.
    pub fn sample_indices<R: Rng + ?Sized>(&self, candidates: &[usize], batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if candidates.is_empty() {
            return Err(Error::Pool("no candidate instances to sample".into()));
        }
        let picks: Vec<usize> = if batch_size <= candidates.len() {
            index::sample(rng, candidates.len(), batch_size).into_vec()
        } else {
            (0..batch_size).map(|_| rng.gen_range(0..candidates.len())).collect()
        };
        Ok(picks.into_iter().map(|p| candidates[p]).collect())
    }

    /// Training examples for pool indices, each with its own control prefix
    /// under `schedule`.
    pub fn examples(&self, indices: &[usize], schedule: &ScheduleState, vocab: &Vocabulary) -> Result<Vec<Example>> {
        let eos = vocab.special().eos;
        indices
            .iter()
            .map(|&i| {
                let inst = &self.instances[i];
                let mut target = inst
                    .generation
                    .clone()
                    .ok_or_else(|| Error::Pool(format!("instance {} has no generation", inst.id)))?;
                target.push(eos);
                Ok(Example {
                    control: control_prefix(inst, schedule, vocab.control())?,
                    input: inst.question.clone(),
                    target,
                })
            })
            .collect()
    }

    /// Uniform draw from `candidates` (indices into the pool) paired with
    /// control prefixes.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        candidates: &[usize],
        schedule: &ScheduleState,
        vocab: &Vocabulary,
        batch_size: usize,
        rng: &mut R,
    ) -> Result<Vec<Example>> {
        let picks = self.sample_indices(candidates, batch_size, rng)?;
        self.examples(&picks, schedule, vocab)
    }

    /// Indices of every instance that has a generation.
    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&i| self.instances[i].generation.is_some())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_jsonl(path, &self.instances)
    }
}
