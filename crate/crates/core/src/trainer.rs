//! Training algorithms: supervised fine-tuning, single-reward conditioning,
//! the two multi-reward schedules and the non-conditioned baselines, all
//! sharing one explore/score/bin/train loop.

use std::collections::BTreeMap;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, MetricsReport};
use crate::optim::{Adam, OptimizerConfig};
use crate::policy::{
    conditioning_prefix, sample, snapshot_reference, train_step, LossBreakdown, LossWeights, PolicyModel, SamplingConfig,
};
use crate::pool::{target_prefix, DataPool, Direction, Instance, ScheduleState, Target};
use crate::rewards::{
    ConsistencyPredictors, PlausibilityScorer, RewardSpec, ScoringContext, CONSISTENCY, CORRECTNESS, DIVERSITY,
    PLAUSIBILITY, PRODUCT,
};
use crate::vocab::{TokenId, Vocabulary};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Sft,
    Quark,
    Classic,
    Additive,
    Product,
    FiltAcc,
    FiltAll,
}

impl Algorithm {
    pub fn needs_reference(self) -> bool {
        self != Algorithm::Sft
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrderMode {
    WeakFirst,
    StrongFirst,
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub algorithm: Algorithm,
    /// Conditioning rewards; the order is used as-is in explicit mode.
    pub rewards: Vec<String>,
    pub beta: f64,
    pub alpha: f64,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub total_steps: u64,
    /// Exploration happens before every step that is a positive multiple of this.
    pub exploration_frequency: u64,
    pub samples_per_instance: usize,
    pub additive_interval: u64,
    pub order: OrderMode,
    pub direction: Direction,
    /// Minimum score per rationale reward, used by filt-all.
    pub thresholds: BTreeMap<String, f64>,
    pub explore_top_p: f64,
    pub explore_temperature: f64,
    pub max_len: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            algorithm: Algorithm::Sft,
            rewards: vec![PLAUSIBILITY.into(), DIVERSITY.into(), CONSISTENCY.into(), CORRECTNESS.into()],
            beta: 0.05,
            alpha: 0.05,
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            total_steps: 1000,
            exploration_frequency: 200,
            samples_per_instance: 2,
            additive_interval: 200,
            order: OrderMode::Explicit,
            direction: Direction::Right,
            thresholds: BTreeMap::new(),
            explore_top_p: 0.7,
            explore_temperature: 1.0,
            max_len: 32,
            hidden: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.version != CONFIG_VERSION {
            return Err(Error::Version {
                what: "train config",
                found: self.version,
                expected: CONFIG_VERSION,
            });
        }
        if self.exploration_frequency < 1 {
            return bad("exploration_frequency must be at least 1".into());
        }
        if self.additive_interval < 1 {
            return bad("additive_interval must be at least 1".into());
        }
        if self.batch_size < 1 || self.samples_per_instance < 1 || self.max_len < 1 || self.hidden < 1 {
            return bad("batch_size, samples_per_instance, max_len and hidden must be at least 1".into());
        }
        if self.total_steps < 1 {
            return bad("total_steps must be at least 1".into());
        }
        if !(self.explore_top_p > 0.0 && self.explore_top_p <= 1.0) || !(self.explore_temperature > 0.0) {
            return bad("explore_top_p must be in (0, 1] and explore_temperature positive".into());
        }
        if !(self.beta >= 0.0) || !(self.alpha >= 0.0) || !(self.optimizer.learning_rate > 0.0) {
            return bad("beta and alpha must be non-negative and the learning rate positive".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for r in &self.rewards {
            let spec = RewardSpec::by_name(r)?;
            if spec.name == PRODUCT {
                return bad("the product reward is selected with the product algorithm".into());
            }
            if !seen.insert(r) {
                return bad(format!("duplicate reward {r:?}"));
            }
        }
        for (name, &tau) in &self.thresholds {
            let spec = RewardSpec::by_name(name)?;
            if !spec.contains(tau) {
                return Err(Error::OutOfRange {
                    value: tau,
                    min: spec.min,
                    max: spec.max,
                });
            }
        }
        match self.algorithm {
            Algorithm::Quark if self.rewards.len() != 1 => bad("quark needs exactly one reward".into()),
            Algorithm::Classic | Algorithm::Additive if self.rewards.len() < 2 => {
                bad(format!("{:?} needs at least two rewards", self.algorithm))
            }
            _ => Ok(()),
        }
    }
}

/// Frozen data and scorers shared by a run.
#[derive(Clone, Copy)]
pub struct Resources<'a> {
    pub vocab: &'a Vocabulary,
    pub predictors: &'a ConsistencyPredictors,
    pub plausibility: &'a dyn PlausibilityScorer,
    pub train: &'a [Instance],
    pub val: &'a [Instance],
}

impl<'a> Resources<'a> {
    pub fn scoring(&self) -> ScoringContext<'a> {
        ScoringContext {
            vocab: self.vocab,
            predictors: self.predictors,
            plausibility: self.plausibility,
        }
    }
}

/// One RunLog line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundRecord {
    pub step: u64,
    pub round: u64,
    pub pool_size: usize,
    pub active: Vec<String>,
    /// Mean training loss over the steps since the previous record.
    pub loss: LossBreakdown,
    pub validation: MetricsReport,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub model: PolicyModel,
    pub log: Vec<RoundRecord>,
    /// Active rewards at the end of training, used for best-bin inference.
    pub schedule: ScheduleState,
    pub pool: DataPool,
}

/// Training-batch visibility for tests and diagnostics.
pub struct BatchEvent<'p> {
    pub step: u64,
    pub indices: &'p [usize],
    pub pool: &'p DataPool,
}

/// `(max - value) / (max - min)`: headroom left above the SFT value.
pub fn reward_strength(value: f64, min: f64, max: f64) -> Result<f64> {
    if !(min < max) {
        return Err(Error::Config(format!("degenerate range [{min}, {max}]")));
    }
    if !(value >= min && value <= max) {
        return Err(Error::OutOfRange { value, min, max });
    }
    Ok((max - value) / (max - min))
}

/// Orders rewards by strength: weak-first is descending (ties by name),
/// strong-first its reverse, explicit returns `explicit` unchanged.
pub fn determine_order(strengths: &BTreeMap<String, f64>, mode: OrderMode, explicit: &[String]) -> Vec<String> {
    if mode == OrderMode::Explicit {
        return explicit.to_vec();
    }
    let mut names: Vec<(&String, f64)> = strengths.iter().map(|(k, &v)| (k, v)).collect();
    names.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(b.0)));
    let mut order: Vec<String> = names.into_iter().map(|(k, _)| k.clone()).collect();
    if mode == OrderMode::StrongFirst {
        order.reverse();
    }
    order
}

/// Strengths of `rewards` from an SFT validation report.
pub fn strengths_from_report(report: &MetricsReport, rewards: &[String]) -> Result<BTreeMap<String, f64>> {
    rewards
        .iter()
        .map(|name| {
            let spec = RewardSpec::by_name(name)?;
            let value = report.reward(name)?;
            Ok((name.clone(), reward_strength(value, spec.min, spec.max)?))
        })
        .collect()
}

/// Active set at 0-based `step`: the first `step / t + 1` rewards (capped),
/// each inserted on the `direction` side of the existing prefix.
pub fn additive_schedule(order: &[String], step: u64, t: u64, direction: Direction) -> ScheduleState {
    let count = ((step / t.max(1)) as usize + 1).min(order.len());
    let mut state = ScheduleState {
        active: Vec::new(),
        direction,
    };
    for r in &order[..count] {
        state.insert(r);
    }
    state
}

/// Which pool instances a baseline may train on.
#[derive(Debug, Clone, PartialEq)]
pub enum Filter {
    None,
    /// Correct predictions only.
    Correct,
    /// Correct predictions whose listed rewards reach their thresholds.
    Thresholds(BTreeMap<String, f64>),
}

impl Filter {
    pub fn keeps(&self, inst: &Instance) -> bool {
        match self {
            Filter::None => true,
            Filter::Correct => inst.score(CORRECTNESS) == Some(1.0),
            Filter::Thresholds(t) => {
                inst.score(CORRECTNESS) == Some(1.0)
                    && t.iter().all(|(name, &tau)| inst.score(name).is_some_and(|s| s >= tau))
            }
        }
    }

    /// Retained pool indices, falling back to the seed instances when the
    /// filter removes everything.
    pub fn candidates(&self, pool: &DataPool) -> Vec<usize> {
        let kept: Vec<usize> = pool
            .all_indices()
            .into_iter()
            .filter(|&i| self.keeps(&pool.instances()[i]))
            .collect();
        if kept.is_empty() {
            warn!("filter retained no instances; falling back to seed data");
            return (0..pool.len())
                .filter(|&i| pool.instances()[i].origin == crate::pool::Origin::SilverSeed)
                .collect();
        }
        kept
    }
}

#[derive(Debug, Clone)]
enum Schedule {
    Fixed(ScheduleState),
    Additive { order: Vec<String>, t: u64, direction: Direction },
}

impl Schedule {
    fn at(&self, step: u64) -> ScheduleState {
        match self {
            Schedule::Fixed(s) => s.clone(),
            Schedule::Additive { order, t, direction } => additive_schedule(order, step, *t, *direction),
        }
    }
}

struct Plan {
    /// Rewards that receive bins.
    conditioning: Vec<RewardSpec>,
    schedule: Schedule,
    filter: Filter,
    weights: LossWeights,
    use_reference: bool,
}

fn new_optimizer(model: &PolicyModel, config: &TrainConfig) -> Adam {
    Adam::new(model.params().len(), config.optimizer)
}

fn validation_report(model: &PolicyModel, schedule: &ScheduleState, res: &Resources<'_>, config: &TrainConfig) -> Result<MetricsReport> {
    let eval = EvalConfig {
        max_len: config.max_len,
        target: Target::Best,
    };
    Ok(evaluate(model, res.val, schedule, &res.scoring(), &eval)?.0)
}

#[derive(Default)]
struct LossMeter {
    sum: LossBreakdown,
    n: usize,
}

impl LossMeter {
    fn add(&mut self, l: &LossBreakdown) {
        self.sum.cross_entropy += l.cross_entropy;
        self.sum.kl_penalty += l.kl_penalty;
        self.sum.entropy_bonus += l.entropy_bonus;
        self.sum.total += l.total;
        self.n += 1;
    }

    fn take(&mut self) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        let out = LossBreakdown {
            cross_entropy: self.sum.cross_entropy / n,
            kl_penalty: self.sum.kl_penalty / n,
            entropy_bonus: self.sum.entropy_bonus / n,
            total: self.sum.total / n,
        };
        *self = Self::default();
        out
    }
}

/// Supervised fine-tuning on the seed gold generations with cross-entropy
/// only and no control tokens. The model starts from a seeded random init
/// whose control-token embeddings are zero.
pub fn train_sft(config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    config.validate()?;
    let vocab = res.vocab;
    let control_ids: Vec<TokenId> = vocab.control().ids().collect();
    let mut model = PolicyModel::new(vocab.size(), config.hidden, config.seed, control_ids);
    let pool = DataPool::new(res.train.to_vec(), vocab)?;
    let schedule = ScheduleState::empty();
    let mut adam = new_optimizer(&model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let candidates = pool.all_indices();
    let bos = vocab.special().bos;
    let mut meter = LossMeter::default();
    let mut log = Vec::new();
    for step in 0..config.total_steps {
        if step > 0 && step % config.exploration_frequency == 0 {
            log.push(RoundRecord {
                step,
                round: log.len() as u64,
                pool_size: pool.len(),
                active: vec![],
                loss: meter.take(),
                validation: validation_report(&model, &schedule, res, config)?,
            });
        }
        let batch = pool.sample_batch(&candidates, &schedule, vocab, config.batch_size, &mut rng)?;
        let loss = train_step(&mut model, &mut adam, None, &batch, bos, LossWeights::CROSS_ENTROPY_ONLY)
            .map_err(|e| with_step(e, step))?;
        meter.add(&loss);
    }
    log.push(RoundRecord {
        step: config.total_steps,
        round: log.len() as u64,
        pool_size: pool.len(),
        active: vec![],
        loss: meter.take(),
        validation: validation_report(&model, &schedule, res, config)?,
    });
    Ok(RunOutput {
        model,
        log,
        schedule,
        pool,
    })
}

fn with_step(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::NonFinite { step },
        other => other,
    }
}

fn specs(names: &[String]) -> Result<Vec<RewardSpec>> {
    names.iter().map(|n| RewardSpec::by_name(n)).collect()
}

/// Generates `samples_per_instance` continuations per train question,
/// conditioned on the best bin of every active reward.
fn explore(
    model: &PolicyModel,
    pool: &mut DataPool,
    schedule: &ScheduleState,
    step: u64,
    config: &TrainConfig,
    res: &Resources<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let vocab = res.vocab;
    let special = vocab.special();
    let control = target_prefix(schedule, vocab.control(), Target::Best)?;
    let decode = SamplingConfig::top_p(config.explore_top_p, config.explore_temperature, config.max_len);
    let mut sampled = Vec::with_capacity(res.train.len() * config.samples_per_instance);
    for inst in res.train {
        let prefix = conditioning_prefix(&control, special.bos, &inst.question);
        for _ in 0..config.samples_per_instance {
            sampled.push((inst.id, sample(model, &prefix, special.eos, &decode, rng)?));
        }
    }
    pool.add_generations(&sampled, step, vocab)
}

/// The shared loop. Exploration runs before every step `n >= 1` with
/// `n % F == 0`, so a run of `N` steps has `(N - 1) / F` rounds.
fn run_plan(
    sft: &PolicyModel,
    plan: Plan,
    config: &TrainConfig,
    res: &Resources<'_>,
    mut observer: Option<&mut dyn FnMut(&BatchEvent<'_>)>,
) -> Result<RunOutput> {
    let vocab = res.vocab;
    let bos = vocab.special().bos;
    let ctx = res.scoring();
    let mut scored = RewardSpec::standard();
    for c in &plan.conditioning {
        if !scored.iter().any(|s| s.name == c.name) {
            scored.push(c.clone());
        }
    }
    let mut model = sft.clone();
    let reference = plan.use_reference.then(|| snapshot_reference(sft));
    let mut pool = DataPool::new(res.train.to_vec(), vocab)?;
    pool.score_pending(&scored, &ctx)?;
    pool.rebin(&plan.conditioning)?;
    let mut adam = new_optimizer(&model, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut meter = LossMeter::default();
    let mut log = Vec::new();
    let mut round = 0;
    let mut candidates = plan.filter.candidates(&pool);
    for step in 0..config.total_steps {
        let schedule = plan.schedule.at(step);
        if step > 0 && step % config.exploration_frequency == 0 {
            round += 1;
            let added = explore(&model, &mut pool, &schedule, step, config, res, &mut rng)?;
            pool.score_pending(&scored, &ctx)?;
            pool.rebin(&plan.conditioning)?;
            candidates = plan.filter.candidates(&pool);
            info!("step {step}: round {round} added {added}, pool {}", pool.len());
            log.push(RoundRecord {
                step,
                round,
                pool_size: pool.len(),
                active: schedule.active.clone(),
                loss: meter.take(),
                validation: validation_report(&model, &schedule, res, config)?,
            });
        }
        let picks = pool.sample_indices(&candidates, config.batch_size, &mut rng)?;
        if let Some(obs) = observer.as_deref_mut() {
            obs(&BatchEvent {
                step,
                indices: &picks,
                pool: &pool,
            });
        }
        let batch = pool.examples(&picks, &schedule, vocab)?;
        let loss = train_step(&mut model, &mut adam, reference.as_ref(), &batch, bos, plan.weights)
            .map_err(|e| with_step(e, step))?;
        meter.add(&loss);
    }
    let schedule = plan.schedule.at(config.total_steps.saturating_sub(1));
    log.push(RoundRecord {
        step: config.total_steps,
        round,
        pool_size: pool.len(),
        active: schedule.active.clone(),
        loss: meter.take(),
        validation: validation_report(&model, &schedule, res, config)?,
    });
    Ok(RunOutput {
        model,
        log,
        schedule,
        pool,
    })
}

fn weights(config: &TrainConfig) -> LossWeights {
    LossWeights {
        beta: config.beta,
        alpha: config.alpha,
    }
}

/// Resolves the conditioning order, evaluating the SFT model on validation
/// data when the order depends on reward strengths.
pub fn resolve_order(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<Vec<String>> {
    if config.order == OrderMode::Explicit {
        return Ok(config.rewards.clone());
    }
    let report = validation_report(sft, &ScheduleState::empty(), res, config)?;
    let strengths = strengths_from_report(&report, &config.rewards)?;
    let order = determine_order(&strengths, config.order, &config.rewards);
    info!("reward strengths {strengths:?} -> order {order:?}");
    Ok(order)
}

/// Single-reward conditioning.
pub fn run_quark(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    run_quark_observed(sft, config, res, None)
}

pub fn run_quark_observed(
    sft: &PolicyModel,
    config: &TrainConfig,
    res: &Resources<'_>,
    observer: Option<&mut dyn FnMut(&BatchEvent<'_>)>,
) -> Result<RunOutput> {
    config.validate()?;
    if config.rewards.len() != 1 {
        return Err(Error::Config("quark needs exactly one reward".into()));
    }
    let plan = Plan {
        conditioning: specs(&config.rewards)?,
        schedule: Schedule::Fixed(ScheduleState::all(&config.rewards)),
        filter: Filter::None,
        weights: weights(config),
        use_reference: true,
    };
    run_plan(sft, plan, config, res, observer)
}

/// All rewards conditioned from the first step, in the resolved order.
pub fn run_mario_classic(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    config.validate()?;
    let order = resolve_order(sft, config, res)?;
    let plan = Plan {
        conditioning: specs(&order)?,
        schedule: Schedule::Fixed(ScheduleState::all(&order)),
        filter: Filter::None,
        weights: weights(config),
        use_reference: true,
    };
    run_plan(sft, plan, config, res, None)
}

/// Rewards activated one at a time every `additive_interval` steps.
pub fn run_mario_additive(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    config.validate()?;
    let order = resolve_order(sft, config, res)?;
    let plan = Plan {
        conditioning: specs(&order)?,
        schedule: Schedule::Additive {
            order,
            t: config.additive_interval,
            direction: config.direction,
        },
        filter: Filter::None,
        weights: weights(config),
        use_reference: true,
    };
    run_plan(sft, plan, config, res, None)
}

/// Single-reward conditioning on the product of the range-normalized
/// standard rewards.
pub fn run_product_baseline(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    config.validate()?;
    let product = RewardSpec::product();
    let plan = Plan {
        schedule: Schedule::Fixed(ScheduleState::all(std::slice::from_ref(&product.name))),
        conditioning: vec![product],
        filter: Filter::None,
        weights: weights(config),
        use_reference: true,
    };
    run_plan(sft, plan, config, res, None)
}

/// Cross-entropy training on correct predictions only, without control tokens.
pub fn run_filt_acc(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    run_filtered(sft, Filter::Correct, config, res, None)
}

/// As filt-acc, additionally requiring every thresholded reward to reach its
/// threshold.
pub fn run_filt_all(sft: &PolicyModel, config: &TrainConfig, res: &Resources<'_>) -> Result<RunOutput> {
    run_filtered(sft, Filter::Thresholds(config.thresholds.clone()), config, res, None)
}

pub fn run_filtered(
    sft: &PolicyModel,
    filter: Filter,
    config: &TrainConfig,
    res: &Resources<'_>,
    observer: Option<&mut dyn FnMut(&BatchEvent<'_>)>,
) -> Result<RunOutput> {
    config.validate()?;
    let plan = Plan {
        conditioning: vec![],
        schedule: Schedule::Fixed(ScheduleState::empty()),
        filter,
        weights: LossWeights::CROSS_ENTROPY_ONLY,
        use_reference: false,
    };
    run_plan(sft, plan, config, res, observer)
}

/// Dispatches on `config.algorithm`. Every algorithm other than SFT needs the
/// SFT model it starts from.
pub fn run(config: &TrainConfig, sft: Option<&PolicyModel>, res: &Resources<'_>) -> Result<RunOutput> {
    config.validate()?;
    if config.algorithm == Algorithm::Sft {
        return train_sft(config, res);
    }
    let sft = sft.ok_or_else(|| Error::Config(format!("{:?} needs a reference checkpoint", config.algorithm)))?;
    if sft.vocab_size() != res.vocab.size() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary size {} does not match the task vocabulary {}",
            sft.vocab_size(),
            res.vocab.size()
        )));
    }
    match config.algorithm {
        Algorithm::Sft => unreachable!(),
        Algorithm::Quark => run_quark(sft, config, res),
        Algorithm::Classic => run_mario_classic(sft, config, res),
        Algorithm::Additive => run_mario_additive(sft, config, res),
        Algorithm::Product => run_product_baseline(sft, config, res),
        Algorithm::FiltAcc => run_filt_acc(sft, config, res),
        Algorithm::FiltAll => run_filt_all(sft, config, res),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::Origin;
    use crate::rewards::{FactOverlapOracle, PredictorConfig, PredictorExample, RewardVector};
    use crate::task::SyntheticTask;
    use proptest::prelude::*;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn strength_examples() {
        assert_eq!(reward_strength(1.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(reward_strength(0.0, 0.0, 1.0).unwrap(), 1.0);
        assert!((reward_strength(0.18, -1.0, 1.0).unwrap() - 0.41).abs() < 1e-12);
        assert!(reward_strength(1.5, 0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn strength_is_affine_invariant(
            lo in -10.0f64..10.0, width in 0.1f64..20.0, u in 0.0f64..1.0,
            scale in 0.01f64..50.0, shift in -50.0f64..50.0,
        ) {
            let hi = lo + width;
            let v = lo + u * width;
            let s = reward_strength(v, lo, hi).unwrap();
            let f = |z: f64| z * scale + shift;
            let t = reward_strength(f(v).clamp(f(lo), f(hi)), f(lo), f(hi)).unwrap();
            prop_assert!((s - t).abs() < 1e-9);
        }
    }

    #[test]
    fn order_examples() {
        let s = BTreeMap::from([("A".to_string(), 0.2), ("B".to_string(), 0.7), ("C".to_string(), 0.5)]);
        assert_eq!(determine_order(&s, OrderMode::WeakFirst, &[]), names(&["B", "C", "A"]));
        assert_eq!(determine_order(&s, OrderMode::StrongFirst, &[]), names(&["A", "C", "B"]));
        let tie = BTreeMap::from([("y".to_string(), 0.5), ("x".to_string(), 0.5)]);
        assert_eq!(determine_order(&tie, OrderMode::WeakFirst, &[]), names(&["x", "y"]));
        let explicit = names(&["C", "A", "B"]);
        assert_eq!(determine_order(&s, OrderMode::Explicit, &explicit), explicit);
    }

    #[test]
    fn additive_switches_at_multiples_of_t() {
        let order = names(&["A", "B", "C"]);
        let at = |step, dir| additive_schedule(&order, step, 300, dir).active;
        for dir in [Direction::Right, Direction::Left] {
            assert_eq!(at(0, dir), names(&["A"]));
            assert_eq!(at(299, dir), names(&["A"]));
            assert_eq!(at(300, dir).len(), 2);
            assert_eq!(at(599, dir).len(), 2);
            assert_eq!(at(600, dir).len(), 3);
            assert_eq!(at(5000, dir).len(), 3);
        }
        assert_eq!(at(300, Direction::Right), names(&["A", "B"]));
        assert_eq!(at(300, Direction::Left), names(&["B", "A"]));
        assert_eq!(at(600, Direction::Left), names(&["C", "B", "A"]));
    }

    proptest! {
        #[test]
        fn additive_size_is_monotone(t in 1u64..50, steps in 1u64..400, n in 2usize..5) {
            let order: Vec<String> = (0..n).map(|i| format!("r{i}")).collect();
            let mut prev = 0;
            for step in 0..steps {
                let k = additive_schedule(&order, step, t, Direction::Right).active.len();
                prop_assert!(k >= prev);
                if k > prev && step > 0 {
                    prop_assert_eq!(step % t, 0);
                }
                prev = k;
            }
        }
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        ok.validate().unwrap();
        let cases: Vec<Box<dyn Fn(&mut TrainConfig)>> = vec![
            Box::new(|c| c.exploration_frequency = 0),
            Box::new(|c| c.additive_interval = 0),
            Box::new(|c| c.version = 2),
            Box::new(|c| {
                c.thresholds.insert(CONSISTENCY.into(), 1.5);
            }),
            Box::new(|c| c.rewards.push("nope".into())),
            Box::new(|c| c.rewards.push(DIVERSITY.into())),
            Box::new(|c| c.algorithm = Algorithm::Quark),
            Box::new(|c| {
                c.algorithm = Algorithm::Classic;
                c.rewards.truncate(1);
            }),
        ];
        for mutate in cases {
            let mut c = ok.clone();
            mutate(&mut c);
            assert!(c.validate().is_err(), "{c:?}");
        }
        let json = r#"{"version":1,"algorithm":"classic","bogus":1}"#;
        assert!(serde_json::from_str::<TrainConfig>(json).is_err());
        let json = r#"{"version":1,"algorithm":"filt-all","thresholds":{"diversity":0.5}}"#;
        assert_eq!(serde_json::from_str::<TrainConfig>(json).unwrap().algorithm, Algorithm::FiltAll);
    }

    fn scored(id: u64, correct: f64, div: f64, origin: Origin) -> Instance {
        Instance {
            id,
            question: vec![0],
            choices: vec!["(a)".into()],
            gold: "(a)".into(),
            generation: Some(vec![0]),
            predicted: None,
            scores: Some(RewardVector::from([
                (CORRECTNESS.to_string(), correct),
                (DIVERSITY.to_string(), div),
                (PLAUSIBILITY.to_string(), 1.0),
                (CONSISTENCY.to_string(), -0.5),
            ])),
            bins: None,
            origin,
            step: None,
        }
    }

    fn pool_of(instances: Vec<Instance>) -> DataPool {
        DataPool::from_raw(instances)
    }

    #[test]
    fn filter_examples() {
        let pool = pool_of(vec![
            scored(0, 1.0, 0.9, Origin::SilverSeed),
            scored(1, 0.0, 0.9, Origin::Sampled),
            scored(2, 1.0, 0.2, Origin::Sampled),
        ]);
        assert_eq!(Filter::Correct.candidates(&pool), vec![0, 2]);
        let minimal = Filter::Thresholds(BTreeMap::from([
            (DIVERSITY.to_string(), 0.0),
            (CONSISTENCY.to_string(), -1.0),
            (PLAUSIBILITY.to_string(), 0.0),
        ]));
        assert_eq!(minimal.candidates(&pool), Filter::Correct.candidates(&pool));
        let div = Filter::Thresholds(BTreeMap::from([(DIVERSITY.to_string(), 0.5)]));
        assert_eq!(div.candidates(&pool), vec![0]);
        let maxed = Filter::Thresholds(BTreeMap::from([(CONSISTENCY.to_string(), 1.0)]));
        // nothing reaches the maximum: fall back to the seed instance
        assert_eq!(maxed.candidates(&pool), vec![0]);
    }

    #[test]
    fn all_wrong_falls_back_to_seeds() {
        let pool = pool_of(vec![
            scored(0, 0.0, 0.9, Origin::SilverSeed),
            scored(1, 0.0, 0.9, Origin::SilverSeed),
            scored(2, 0.0, 0.2, Origin::Sampled),
        ]);
        assert_eq!(Filter::Correct.candidates(&pool), vec![0, 1]);
    }

    proptest! {
        #[test]
        fn threshold_filter_is_set_intersection(
            rows in proptest::collection::vec((0u8..2, 0.0f64..1.0, -1.0f64..1.0), 1..40),
            tau_d in 0.0f64..1.0, tau_c in -1.0f64..1.0,
        ) {
            let instances: Vec<Instance> = rows.iter().enumerate().map(|(i, &(c, d, k))| {
                let mut inst = scored(i as u64, c as f64, d, Origin::SilverSeed);
                inst.scores.as_mut().unwrap().insert(CONSISTENCY.into(), k);
                inst
            }).collect();
            let pool = pool_of(instances);
            let t = BTreeMap::from([(DIVERSITY.to_string(), tau_d), (CONSISTENCY.to_string(), tau_c)]);
            let got = Filter::Thresholds(t).candidates(&pool);
            let correct: std::collections::BTreeSet<usize> = (0..rows.len()).filter(|&i| rows[i].0 == 1).collect();
            let above: std::collections::BTreeSet<usize> = (0..rows.len()).filter(|&i| rows[i].1 >= tau_d && rows[i].2 >= tau_c).collect();
            let expected: Vec<usize> = correct.intersection(&above).copied().collect();
            if expected.is_empty() {
                prop_assert_eq!(got, (0..rows.len()).collect::<Vec<_>>());
            } else {
                prop_assert_eq!(got, expected);
            }
        }
    }

    /// Small task with trained predictors, shared by the loop tests.
    struct Fixture {
        vocab: Vocabulary,
        predictors: ConsistencyPredictors,
        oracle: FactOverlapOracle,
        train: Vec<Instance>,
        val: Vec<Instance>,
    }

    impl Fixture {
        fn new(n_train: usize) -> Self {
            let task = SyntheticTask::default();
            let vocab = task.vocabulary().unwrap();
            let splits = task.generate((n_train, 10, 10), 3, &vocab).unwrap();
            let examples: Vec<PredictorExample> = splits
                .train
                .iter()
                .map(|i| {
                    let gen = i.generation.as_ref().unwrap();
                    PredictorExample {
                        question: i.question.clone(),
                        rationale: crate::rewards::parse_answer(gen, vocab.special().delim).rationale.to_vec(),
                        choices: i.choices.clone(),
                        gold: i.gold.clone(),
                    }
                })
                .collect();
            let cfg = PredictorConfig {
                epochs: 5,
                ..PredictorConfig::default()
            };
            let predictors = ConsistencyPredictors::train(&examples, vocab.size(), &cfg).unwrap();
            Self {
                oracle: task.fact_oracle().unwrap(),
                vocab,
                predictors,
                train: splits.train,
                val: splits.val,
            }
        }

        fn res(&self) -> Resources<'_> {
            Resources {
                vocab: &self.vocab,
                predictors: &self.predictors,
                plausibility: &self.oracle,
                train: &self.train,
                val: &self.val,
            }
        }
    }

    fn small_config(algorithm: Algorithm, steps: u64) -> TrainConfig {
        TrainConfig {
            algorithm,
            total_steps: steps,
            batch_size: 4,
            hidden: 8,
            exploration_frequency: 5,
            additive_interval: 5,
            max_len: 12,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn sft_is_deterministic_and_ignores_weights() {
        let f = Fixture::new(12);
        let mut cfg = small_config(Algorithm::Sft, 12);
        let a = train_sft(&cfg, &f.res()).unwrap();
        let b = train_sft(&cfg, &f.res()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        cfg.beta = 3.0;
        cfg.alpha = 2.0;
        let c = train_sft(&cfg, &f.res()).unwrap();
        assert_eq!(a.model, c.model);
        // control-token embeddings are untouched by supervised training
        for id in f.vocab.control().ids() {
            assert!(a.model.embedding(id).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pool_grows_by_samples_per_round() {
        let f = Fixture::new(6);
        let sft = train_sft(&small_config(Algorithm::Sft, 3), &f.res()).unwrap().model;
        let mut cfg = small_config(Algorithm::Classic, 16);
        cfg.samples_per_instance = 2;
        let out = run_mario_classic(&sft, &cfg, &f.res()).unwrap();
        // rounds before steps 5, 10, 15
        assert_eq!(out.pool.len(), 6 + 3 * 2 * 6);
        let rounds: Vec<u64> = out.log.iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![1, 2, 3, 3]);
        assert!(out.log.windows(2).all(|w| w[0].step < w[1].step));
        assert_eq!(out.schedule.active.len(), 4);

        cfg.exploration_frequency = 100;
        let out = run_mario_classic(&sft, &cfg, &f.res()).unwrap();
        assert_eq!(out.pool.len(), 6);
    }

    #[test]
    fn classic_prefixes_have_one_token_per_reward() {
        let f = Fixture::new(6);
        let sft = train_sft(&small_config(Algorithm::Sft, 3), &f.res()).unwrap().model;
        let cfg = small_config(Algorithm::Classic, 2);
        let out = run_mario_classic(&sft, &cfg, &f.res()).unwrap();
        let batch = out
            .pool
            .sample_batch(&out.pool.all_indices(), &out.schedule, &f.vocab, 4, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        for ex in &batch {
            assert_eq!(ex.control.len(), 4);
        }
        let mut permuted = cfg.clone();
        permuted.rewards.reverse();
        let other = run_mario_classic(&sft, &permuted, &f.res()).unwrap();
        assert_eq!(other.schedule.active.iter().rev().cloned().collect::<Vec<_>>(), out.schedule.active);
    }

    #[test]
    fn additive_degenerates_to_first_reward() {
        let f = Fixture::new(6);
        let sft = train_sft(&small_config(Algorithm::Sft, 3), &f.res()).unwrap().model;
        let mut cfg = small_config(Algorithm::Additive, 8);
        cfg.additive_interval = 100;
        let out = run_mario_additive(&sft, &cfg, &f.res()).unwrap();
        assert_eq!(out.schedule.active, vec![PLAUSIBILITY.to_string()]);
        assert!(out.log.iter().all(|r| r.active == vec![PLAUSIBILITY.to_string()]));
    }

    #[test]
    fn filt_acc_batches_are_correct_only() {
        let f = Fixture::new(8);
        let sft = train_sft(&small_config(Algorithm::Sft, 3), &f.res()).unwrap().model;
        let cfg = small_config(Algorithm::FiltAcc, 26);
        let mut batches = 0;
        let mut obs = |ev: &BatchEvent<'_>| {
            batches += 1;
            let any_correct = ev.pool.instances().iter().any(|i| Filter::Correct.keeps(i));
            for &i in ev.indices {
                let inst = &ev.pool.instances()[i];
                assert!(!any_correct || inst.score(CORRECTNESS) == Some(1.0));
            }
        };
        run_filtered(&sft, Filter::Correct, &cfg, &f.res(), Some(&mut obs)).unwrap();
        assert_eq!(batches, 26);
    }

    #[test]
    fn reward_runs_require_reference() {
        let f = Fixture::new(4);
        let cfg = small_config(Algorithm::Classic, 2);
        assert!(run(&cfg, None, &f.res()).is_err());
        let wrong = PolicyModel::new(3, 4, 0, []);
        assert!(run(&cfg, Some(&wrong), &f.res()).is_err());
    }
}
