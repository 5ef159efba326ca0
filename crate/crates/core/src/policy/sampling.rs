//! Greedy and nucleus (top-p) decoding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{softmax, PolicyModel};
use crate::error::Result;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    TopP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub strategy: Strategy,
    /// Nucleus mass; ignored by greedy decoding.
    pub p: f64,
    /// Logit divisor; ignored by greedy decoding.
    pub temperature: f64,
    pub max_len: usize,
}

impl SamplingConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            p: 1.0,
            temperature: 1.0,
            max_len,
        }
    }

    pub fn top_p(p: f64, temperature: f64, max_len: usize) -> Self {
        Self {
            strategy: Strategy::TopP,
            p,
            temperature,
            max_len,
        }
    }
}

/// Smallest highest-probability set whose mass reaches `p`, renormalized.
/// Ties in probability are ordered by token id.
pub fn nucleus(probs: &[f64], p: f64) -> Vec<(TokenId, f64)> {
    let mut order: Vec<(TokenId, f64)> = probs
        .iter()
        .enumerate()
        .map(|(i, &q)| (i as TokenId, q))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut mass = 0.0;
    let mut keep = order.len();
    for (i, (_, q)) in order.iter().enumerate() {
        mass += q;
        if mass >= p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    order.truncate(keep.max(1));
    let total: f64 = order.iter().map(|(_, q)| q).sum();
    order.into_iter().map(|(t, q)| (t, q / total)).collect()
}

fn argmax(values: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Decodes from `prefix` until `eos` (excluded from the output) or
/// `max_len` tokens.
pub fn sample<R: Rng + ?Sized>(
    model: &PolicyModel,
    prefix: &[TokenId],
    eos: TokenId,
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<Vec<TokenId>> {
    let mut state = model.run_prefix(prefix)?;
    let mut out = Vec::new();
    for _ in 0..config.max_len.max(1) {
        let logits = model.logits(&state);
        let next = match config.strategy {
            Strategy::Greedy => argmax(&logits),
            Strategy::TopP => {
                let scaled: Vec<f64> = logits.iter().map(|z| z / config.temperature).collect();
                let kept = nucleus(&softmax(&scaled), config.p);
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let mut pick = kept.last().map(|k| k.0).unwrap_or(0);
                for (tok, q) in &kept {
                    acc += q;
                    if u < acc {
                        pick = *tok;
                        break;
                    }
                }
                pick
            }
        };
        if next == eos {
            break;
        }
        out.push(next);
        state = model.advance(&state, next)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn nucleus_hand_enumeration() {
        let kept = nucleus(&[0.6, 0.3, 0.05, 0.05], 0.7);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0].0, 0);
        assert_eq!(kept[1].0, 1);
        assert!((kept[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((kept[1].1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(nucleus(&[0.25; 4], 1.0).len(), 4);
        assert_eq!(nucleus(&[0.1, 0.9], 0.5), vec![(1, 1.0)]);
    }

    /// Model whose state after token `t` strongly predicts `next[t]`.
    fn chain_model() -> PolicyModel {
        // vocab 5: 0=bos, 1..3 content, 4=eos; chain bos->1->2->3->eos
        let v = 5;
        let h = 5;
        let mut m = PolicyModel::zeros(v, h);
        for t in 0..v {
            m.embedding_mut(t as TokenId)[t] = 3.0;
        }
        let out = m.out_range();
        let next = [1usize, 2, 3, 4, 4];
        for (t, &n) in next.iter().enumerate() {
            m.params_mut()[out.start + n * h + t] = 20.0;
        }
        m
    }

    #[test]
    fn greedy_follows_deterministic_chain() {
        let m = chain_model();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample(&m, &[0], 4, &SamplingConfig::greedy(10), &mut rng).unwrap();
        assert_eq!(out, vec![1, 2, 3]);
        let out = sample(&m, &[0], 4, &SamplingConfig::greedy(2), &mut rng).unwrap();
        assert_eq!(out, vec![1, 2]);
    }

    #[test]
    fn top_p_is_seed_reproducible() {
        let m = PolicyModel::new(12, 6, 4, []);
        let cfg = SamplingConfig::top_p(0.7, 1.0, 15);
        let a = sample(&m, &[0, 1], 11, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample(&m, &[0, 1], 11, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn high_temperature_is_near_uniform() {
        let m = chain_model();
        let cfg = SamplingConfig::top_p(1.0, 1e6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..draws {
            // eos is one of the outcomes; an empty output means eos was drawn
            let out = sample(&m, &[0], 99, &cfg, &mut rng).unwrap();
            counts[out[0] as usize] += 1;
        }
        let expected = draws as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, 99.9th percentile
        assert!(chi2 < 18.47, "chi2 = {chi2}, counts = {counts:?}");
    }
}
