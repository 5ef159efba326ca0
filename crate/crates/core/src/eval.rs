//! Held-out evaluation, normalized relative gain and significance testing.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::io;
use crate::policy::{conditioning_prefix, sample, PolicyModel, SamplingConfig};
use crate::pool::{target_prefix, Instance, ScheduleState, Target};
use crate::rewards::{
    parse_answer, product_score, score_generation, RewardSpec, RewardVector, ScoringContext, CONSISTENCY, CORRECTNESS,
    DIVERSITY, PLAUSIBILITY,
};
use crate::vocab::TokenId;

pub const ACCURACY_RANGE: (f64, f64) = (0.0, 100.0);

/// `(value - min) / (max - min)`.
pub fn nrg(value: f64, min: f64, max: f64) -> Result<f64> {
    if !(min < max) {
        return Err(Error::Config(format!("degenerate range [{min}, {max}]")));
    }
    if !value.is_finite() || value < min || value > max {
        return Err(Error::OutOfRange { value, min, max });
    }
    Ok((value - min) / (max - min))
}

/// Mean NRG of accuracy (percent), plausibility, diversity and consistency,
/// as a percentage.
pub fn avg_nrg(accuracy: f64, plausibility: f64, diversity: f64, consistency: f64) -> Result<f64> {
    let parts = [
        nrg(accuracy, ACCURACY_RANGE.0, ACCURACY_RANGE.1)?,
        nrg(plausibility, 0.0, 1.0)?,
        nrg(diversity, 0.0, 1.0)?,
        nrg(consistency, -1.0, 1.0)?,
    ];
    Ok(100.0 * parts.iter().sum::<f64>() / parts.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub rewards: BTreeMap<String, f64>,
    pub avg_nrg: f64,
    pub parse_failures: usize,
}

impl MetricsReport {
    pub fn reward(&self, name: &str) -> Result<f64> {
        self.rewards
            .get(name)
            .copied()
            .ok_or_else(|| Error::Reward(format!("report has no {name:?} mean")))
    }

    /// Avg NRG recomputed from the report's own four metrics.
    pub fn recompute_avg_nrg(&self) -> Result<f64> {
        avg_nrg(
            self.accuracy,
            self.reward(PLAUSIBILITY)?,
            self.reward(DIVERSITY)?,
            self.reward(CONSISTENCY)?,
        )
    }
}

/// One evaluated test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceScores {
    pub id: u64,
    pub generation: Vec<TokenId>,
    pub parse_failure: bool,
    /// Whether the rationale-based rewards count toward the means.
    pub rationale_scored: bool,
    pub scores: RewardVector,
}

impl InstanceScores {
    /// Combined score: product of range-normalized standard rewards.
    pub fn combined(&self) -> Result<f64> {
        product_score(&self.scores, &RewardSpec::standard())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_len: usize,
    /// Conditioning target for every active reward.
    pub target: Target,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_len: 32,
            target: Target::Best,
        }
    }
}

/// Greedy generation on every test instance, conditioned on the target bin for
/// every active reward, then scoring under the four standard rewards.
pub fn generate_and_score(
    model: &PolicyModel,
    test: &[Instance],
    schedule: &ScheduleState,
    ctx: &ScoringContext<'_>,
    config: &EvalConfig,
) -> Result<Vec<InstanceScores>> {
    let control = target_prefix(schedule, ctx.vocab.control(), config.target)?;
    let special = ctx.vocab.special();
    let decode = SamplingConfig::greedy(config.max_len);
    // greedy decoding never draws from the rng
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let rewards = RewardSpec::standard();
    test.iter()
        .map(|inst| {
            let prefix = conditioning_prefix(&control, special.bos, &inst.question);
            let generation = sample(model, &prefix, special.eos, &decode, &mut rng)?;
            let parsed = parse_answer(&generation, special.delim);
            let parse_failure = match parsed.answer {
                Some(id) => !inst.choices.iter().any(|c| ctx.vocab.token(id).map(|t| t == c).unwrap_or(false)),
                None => true,
            };
            let rationale_scored = !(parse_failure && parsed.rationale.is_empty());
            let scores = score_generation(&inst.question, &inst.gold, &generation, &rewards, ctx)?;
            Ok(InstanceScores {
                id: inst.id,
                generation,
                parse_failure,
                rationale_scored,
                scores,
            })
        })
        .collect()
}

/// Aggregates per-instance scores into a report.
pub fn aggregate(scores: &[InstanceScores]) -> Result<MetricsReport> {
    if scores.is_empty() {
        return Err(Error::Config("cannot aggregate an empty evaluation".into()));
    }
    let n = scores.len();
    let correct: f64 = scores
        .iter()
        .map(|s| s.scores.get(CORRECTNESS).copied().unwrap_or(0.0))
        .sum();
    let accuracy = 100.0 * correct / n as f64;
    let mut rewards = BTreeMap::new();
    rewards.insert(CORRECTNESS.to_string(), correct / n as f64);
    for name in [PLAUSIBILITY, DIVERSITY, CONSISTENCY] {
        let kept: Vec<f64> = scores
            .iter()
            .filter(|s| s.rationale_scored)
            .filter_map(|s| s.scores.get(name).copied())
            .collect();
        let mean = if kept.is_empty() {
            RewardSpec::by_name(name)?.min
        } else {
            kept.iter().sum::<f64>() / kept.len() as f64
        };
        rewards.insert(name.to_string(), mean);
    }
    let avg = avg_nrg(accuracy, rewards[PLAUSIBILITY], rewards[DIVERSITY], rewards[CONSISTENCY])?;
    Ok(MetricsReport {
        n,
        accuracy,
        rewards,
        avg_nrg: avg,
        parse_failures: scores.iter().filter(|s| s.parse_failure).count(),
    })
}

/// Greedy best-bin evaluation; returns the report and per-instance scores.
pub fn evaluate(
    model: &PolicyModel,
    test: &[Instance],
    schedule: &ScheduleState,
    ctx: &ScoringContext<'_>,
    config: &EvalConfig,
) -> Result<(MetricsReport, Vec<InstanceScores>)> {
    let per_instance = generate_and_score(model, test, schedule, ctx, config)?;
    Ok((aggregate(&per_instance)?, per_instance))
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch two-sample t statistic and degrees of freedom.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats("each sample needs at least 2 values".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if !(se2 > 0.0) || !se2.is_finite() {
        return Err(Error::Stats("zero variance in both samples".into()));
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    Ok((t, df))
}

/// One-tailed p-value for `mean(a) > mean(b)` under Welch's t-test.
pub fn t_test_one_tailed(a: &[f64], b: &[f64]) -> Result<f64> {
    let (t, df) = welch_t(a, b)?;
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Stats(e.to_string()))?;
    Ok((1.0 - dist.cdf(t)).clamp(0.0, 1.0))
}

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// One row of plot data: a logged validation report at a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub run: String,
    pub step: u64,
    pub accuracy: f64,
    pub plausibility: f64,
    pub diversity: f64,
    pub consistency: f64,
    pub avg_nrg: f64,
}

impl PlotRow {
    pub fn from_report(run: &str, step: u64, report: &MetricsReport) -> Result<Self> {
        Ok(Self {
            run: run.to_string(),
            step,
            accuracy: report.accuracy,
            plausibility: report.reward(PLAUSIBILITY)?,
            diversity: report.reward(DIVERSITY)?,
            consistency: report.reward(CONSISTENCY)?,
            avg_nrg: report.avg_nrg,
        })
    }
}

/// Long-format CSV, one row per logged round per run.
pub fn write_plot_csv(path: &Path, rows: &[PlotRow]) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    writer.flush().map_err(io_err)
}

pub fn read_plot_csv(path: &Path) -> Result<Vec<PlotRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn save_instance_scores(path: &Path, scores: &[InstanceScores]) -> Result<()> {
    io::write_jsonl(path, scores)
}

pub fn load_instance_scores(path: &Path) -> Result<Vec<InstanceScores>> {
    io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn nrg_examples() {
        assert!((nrg(57.64, 0.0, 100.0).unwrap() - 0.5764).abs() < 1e-12);
        assert!((nrg(-0.02, -1.0, 1.0).unwrap() - 0.49).abs() < 1e-12);
        assert_eq!(nrg(1.0, -1.0, 1.0).unwrap(), 1.0);
        assert_eq!(nrg(-1.0, -1.0, 1.0).unwrap(), 0.0);
        assert!(nrg(1.5, 0.0, 1.0).is_err());
        assert!(nrg(0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn avg_nrg_table_rows() {
        let cases = [
            ((57.64, 0.33, 0.95, -0.02), 58.66),
            ((76.99, 0.71, 0.95, 0.18), 75.50),
            ((66.06, 0.55, 0.99, 0.09), 68.64),
        ];
        for ((a, p, d, c), want) in cases {
            let got = avg_nrg(a, p, d, c).unwrap();
            assert!((got - want).abs() <= 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn t_test_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((t_test_one_tailed(&a, &a).unwrap() - 0.5).abs() < 1e-12);
        assert!(t_test_one_tailed(&[1.0, 1.0], &[2.0, 2.0]).is_err());
        assert!(t_test_one_tailed(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn t_test_against_table() {
        // equal sizes and variances: df = 2(n-1) = 18; a shift of 2 with unit
        // variances gives t = 2 / sqrt(2/10) = 4.4721; one-tailed p ~ 1.5e-4,
        // below the tabulated 0.001 critical value 3.610 for 18 df
        let base = [-1.5, -1.0, -0.5, -0.25, 0.0, 0.0, 0.25, 0.5, 1.0, 1.5];
        let var = base.iter().map(|x: &f64| x * x).sum::<f64>() / 9.0;
        let scale = 1.0 / var.sqrt();
        let b: Vec<f64> = base.iter().map(|x| x * scale).collect();
        let a: Vec<f64> = b.iter().map(|x| x + 2.0).collect();
        let (t, df) = welch_t(&a, &b).unwrap();
        assert!((t - 4.47213595).abs() < 1e-6);
        assert!((df - 18.0).abs() < 1e-9);
        let p = t_test_one_tailed(&a, &b).unwrap();
        assert!(p < 0.001);
        // tabulated: t = 2.101 at df 18 has one-tailed p = 0.025
        let c: Vec<f64> = b.iter().map(|x| x + 2.101 * (0.2f64).sqrt()).collect();
        let p = t_test_one_tailed(&c, &b).unwrap();
        assert!((p - 0.025).abs() < 5e-4, "p = {p}");
    }

    proptest! {
        #[test]
        fn t_test_swap_symmetry(
            a in proptest::collection::vec(-5.0f64..5.0, 2..20),
            b in proptest::collection::vec(-5.0f64..5.0, 2..20),
        ) {
            if let (Ok(p), Ok(q)) = (t_test_one_tailed(&a, &b), t_test_one_tailed(&b, &a)) {
                prop_assert!((p + q - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn nrg_monotone_and_affine_invariant(
            lo in -50.0f64..50.0, width in 0.1f64..100.0,
            u in 0.0f64..1.0, v in 0.0f64..1.0,
            scale in 0.01f64..100.0, shift in -100.0f64..100.0,
        ) {
            let hi = lo + width;
            let (x, y) = (lo + u * width, lo + v * width);
            let (nx, ny) = (nrg(x, lo, hi).unwrap(), nrg(y, lo, hi).unwrap());
            if x <= y { prop_assert!(nx <= ny + 1e-12); }
            let f = |z: f64| z * scale + shift;
            let mapped = nrg(f(x).clamp(f(lo), f(hi)), f(lo), f(hi)).unwrap();
            prop_assert!((mapped - nx).abs() < 1e-9);
        }
    }

    #[test]
    fn aggregate_parse_failure_rules() {
        let mk = |pf: bool, rs: bool, c: f64, d: f64| InstanceScores {
            id: 0,
            generation: vec![],
            parse_failure: pf,
            rationale_scored: rs,
            scores: RewardVector::from([
                (PLAUSIBILITY.to_string(), 1.0),
                (DIVERSITY.to_string(), d),
                (CONSISTENCY.to_string(), 0.0),
                (CORRECTNESS.to_string(), c),
            ]),
        };
        let report = aggregate(&[mk(false, true, 1.0, 0.5), mk(true, false, 0.0, 1.0), mk(true, true, 0.0, 0.25)]).unwrap();
        assert_eq!(report.n, 3);
        assert_eq!(report.parse_failures, 2);
        assert!((report.accuracy - 100.0 / 3.0).abs() < 1e-9);
        assert!((report.rewards[DIVERSITY] - 0.375).abs() < 1e-12);
        assert!((report.recompute_avg_nrg().unwrap() - report.avg_nrg).abs() < 1e-12);
    }

    #[test]
    fn plot_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plot.csv");
        let rows = vec![
            PlotRow {
                run: "a,b".into(),
                step: 3,
                accuracy: 12.5,
                plausibility: 0.1 + 0.2,
                diversity: 1e-7,
                consistency: -0.3,
                avg_nrg: 41.0,
            };
            2
        ];
        write_plot_csv(&path, &rows).unwrap();
        assert_eq!(read_plot_csv(&path).unwrap(), rows);
    }
}
