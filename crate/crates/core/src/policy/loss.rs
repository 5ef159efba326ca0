//! Cross-entropy + KL-to-reference − entropy objective and its gradient.

use serde::{Deserialize, Serialize};

use super::{conditioning_prefix, log_softmax, Example, PolicyModel, ReferenceModel};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::vocab::TokenId;

/// Probability floor inside logarithms.
pub const KL_EPSILON: f64 = 1e-12;

/// `KL(reference || policy)`; reference entries with zero mass contribute 0.
pub fn kl_per_token(reference: &[f64], policy: &[f64]) -> f64 {
    debug_assert_eq!(reference.len(), policy.len());
    let kl: f64 = reference
        .iter()
        .zip(policy)
        .filter(|(&r, _)| r > 0.0)
        .map(|(&r, &p)| r * (r.max(KL_EPSILON).ln() - p.max(KL_EPSILON).ln()))
        .sum();
    kl.max(0.0)
}

/// Shannon entropy in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.max(KL_EPSILON).ln())
        .sum::<f64>()
}

/// Coefficients of the KL penalty and the entropy bonus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub alpha: f64,
}

impl LossWeights {
    pub const CROSS_ENTROPY_ONLY: Self = Self { beta: 0.0, alpha: 0.0 };
}

/// Per-token averages of the loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub kl_penalty: f64,
    pub entropy_bonus: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_sums(ce: f64, kl: f64, ent: f64, tokens: usize, w: LossWeights) -> Self {
        let n = tokens.max(1) as f64;
        let (cross_entropy, kl_penalty, entropy_bonus) = (ce / n, kl / n, ent / n);
        Self {
            cross_entropy,
            kl_penalty,
            entropy_bonus,
            total: cross_entropy + w.beta * kl_penalty - w.alpha * entropy_bonus,
        }
    }
}

struct Sums {
    ce: f64,
    kl: f64,
    ent: f64,
}

/// Accumulates loss sums for one example and, if `grad` is given, adds
/// `scale * d(sum)/d(params)` into it.
fn example_loss(
    model: &PolicyModel,
    reference: Option<&PolicyModel>,
    ex: &Example,
    bos: TokenId,
    w: LossWeights,
    scale: f64,
    grad: Option<&mut [f64]>,
) -> Result<Sums> {
    let prefix = conditioning_prefix(&ex.control, bos, &ex.input);
    let trace = model.trace(&prefix, &ex.target)?;
    let ref_logprobs: Option<Vec<Vec<f64>>> = match reference {
        Some(r) if w.beta != 0.0 => {
            let rprefix = conditioning_prefix(&[], bos, &ex.input);
            let rtrace = r.trace(&rprefix, &ex.target)?;
            Some(
                (0..ex.target.len())
                    .map(|j| log_softmax(&r.logits(&rtrace.states[rtrace.prefix_len + j])))
                    .collect(),
            )
        }
        _ => None,
    };

    let v = model.vocab_size;
    let h = model.hidden;
    let mut sums = Sums { ce: 0.0, kl: 0.0, ent: 0.0 };
    // d(loss)/d(state) for every state index.
    let mut dstate = grad.as_ref().map(|_| vec![vec![0.0; h]; trace.states.len()]);
    let mut dlogits_all: Vec<(usize, Vec<f64>)> = Vec::new();

    for (j, &y) in ex.target.iter().enumerate() {
        let si = trace.prefix_len + j;
        let logp = log_softmax(&model.logits(&trace.states[si]));
        let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let ent: f64 = -p.iter().zip(&logp).map(|(a, b)| a * b).sum::<f64>();
        sums.ce -= logp[y as usize];
        sums.ent += ent;
        if let Some(rl) = &ref_logprobs {
            let rlp = &rl[j];
            let kl: f64 = rlp
                .iter()
                .zip(&logp)
                .map(|(&lr, &lp)| {
                    let r = lr.exp();
                    if r > 0.0 {
                        r * (lr - lp)
                    } else {
                        0.0
                    }
                })
                .sum();
            sums.kl += kl;
        }
        if dstate.is_some() {
            let mut dz = vec![0.0; v];
            for k in 0..v {
                let mut g = p[k];
                if k == y as usize {
                    g -= 1.0;
                }
                if let Some(rl) = &ref_logprobs {
                    g += w.beta * (p[k] - rl[j][k].exp());
                }
                g += w.alpha * p[k] * (logp[k] + ent);
                dz[k] = g * scale;
            }
            dlogits_all.push((si, dz));
        }
    }

    if let (Some(grad), Some(dstate)) = (grad, dstate.as_mut()) {
        let out = model.out_range();
        let bias = model.bias_range();
        let rec = model.rec_range();
        let params = model.params();
        for (si, dz) in &dlogits_all {
            let state = &trace.states[*si];
            for k in 0..v {
                let g = dz[k];
                if g == 0.0 {
                    continue;
                }
                grad[bias.start + k] += g;
                let orow = out.start + k * h;
                for i in 0..h {
                    grad[orow + i] += g * state[i];
                    dstate[*si][i] += g * params[orow + i];
                }
            }
        }
        // Backpropagate through the recurrence; states[t] = tanh(W states[t-1] + E[tokens[t-1]]).
        for t in (1..trace.states.len()).rev() {
            let state = &trace.states[t];
            let da: Vec<f64> = (0..h).map(|i| dstate[t][i] * (1.0 - state[i] * state[i])).collect();
            if da.iter().all(|&x| x == 0.0) {
                continue;
            }
            let tok = trace.tokens[t - 1] as usize;
            let erow = tok * h;
            let prev_state = &trace.states[t - 1];
            let dprev = &mut dstate[t - 1];
            for i in 0..h {
                let g = da[i];
                if g == 0.0 {
                    continue;
                }
                grad[erow + i] += g;
                let wrow = rec.start + i * h;
                for j in 0..h {
                    grad[wrow + j] += g * prev_state[j];
                    dprev[j] += g * params[wrow + j];
                }
            }
        }
    }
    Ok(sums)
}

/// Batch loss (per-token averages) and, optionally, its exact gradient.
///
/// The policy sees `control ++ bos ++ input`; the reference sees
/// `bos ++ input`. The KL term is skipped when `reference` is `None` or
/// `beta == 0`.
pub fn loss_and_grad(
    model: &PolicyModel,
    reference: Option<&ReferenceModel>,
    batch: &[Example],
    bos: TokenId,
    weights: LossWeights,
    mut grad: Option<&mut [f64]>,
) -> Result<LossBreakdown> {
    let tokens: usize = batch.iter().map(|e| e.target.len()).sum();
    if tokens == 0 {
        return Err(Error::Config("batch has no target tokens".into()));
    }
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let scale = 1.0 / tokens as f64;
    let reference = reference.map(ReferenceModel::model);
    let (mut ce, mut kl, mut ent) = (0.0, 0.0, 0.0);
    for ex in batch {
        let s = example_loss(model, reference, ex, bos, weights, scale, grad.as_deref_mut())?;
        ce += s.ce;
        kl += s.kl;
        ent += s.ent;
    }
    Ok(LossBreakdown::from_sums(ce, kl, ent, tokens, weights))
}

/// One optimizer update on `batch`. Returns the pre-update loss.
///
/// The batch is processed in `accumulation` micro-batches whose token-weighted
/// gradients are summed before the single update.
pub fn train_step(
    model: &mut PolicyModel,
    optimizer: &mut Adam,
    reference: Option<&ReferenceModel>,
    batch: &[Example],
    bos: TokenId,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    let tokens: usize = batch.iter().map(|e| e.target.len()).sum();
    if tokens == 0 {
        return Err(Error::Config("batch has no target tokens".into()));
    }
    let n = model.params().len();
    let mut grad = vec![0.0; n];
    let mut micro = vec![0.0; n];
    let parts = optimizer.config().accumulation.clamp(1, batch.len());
    let chunk = batch.len().div_ceil(parts);
    let (mut ce, mut kl, mut ent) = (0.0, 0.0, 0.0);
    for part in batch.chunks(chunk) {
        let part_tokens: usize = part.iter().map(|e| e.target.len()).sum();
        if part_tokens == 0 {
            continue;
        }
        let lb = loss_and_grad(model, reference, part, bos, weights, Some(&mut micro))?;
        let share = part_tokens as f64 / tokens as f64;
        for (g, m) in grad.iter_mut().zip(&micro) {
            *g += m * share;
        }
        ce += lb.cross_entropy * part_tokens as f64;
        kl += lb.kl_penalty * part_tokens as f64;
        ent += lb.entropy_bonus * part_tokens as f64;
    }
    let loss = LossBreakdown::from_sums(ce, kl, ent, tokens, weights);
    if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: optimizer.steps_taken(),
        });
    }
    optimizer.step(model.params_mut(), &mut grad);
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;
    use crate::policy::snapshot_reference;
    use proptest::prelude::*;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_per_token(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((kl_per_token(&[1.0, 0.0], &[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
        // zero policy mass under positive reference mass is clamped, not infinite
        assert!(kl_per_token(&[0.5, 0.5], &[1.0, 0.0]).is_finite());
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_entropy_matches_sum(
            a in proptest::collection::vec(0.001f64..1.0, 2..10),
            b in proptest::collection::vec(0.001f64..1.0, 2..10),
        ) {
            let n = a.len().min(b.len());
            let norm = |v: &[f64]| { let s: f64 = v.iter().sum(); v.iter().map(|x| x / s).collect::<Vec<_>>() };
            let p = norm(&a[..n]);
            let q = norm(&b[..n]);
            prop_assert!(kl_per_token(&p, &q) >= 0.0);
            let mut brute = 0.0;
            for x in &p { brute -= x * x.ln(); }
            prop_assert!((entropy(&p) - brute).abs() < 1e-12);
        }
    }

    fn batch() -> Vec<Example> {
        vec![
            Example { control: vec![6], input: vec![1, 2], target: vec![3, 4, 5] },
            Example { control: vec![7], input: vec![2], target: vec![4, 5] },
        ]
    }

    #[test]
    fn zero_weights_give_pure_cross_entropy() {
        let m = PolicyModel::new(8, 4, 1, [6, 7]);
        let r = snapshot_reference(&PolicyModel::new(8, 4, 2, []));
        let lb = loss_and_grad(&m, Some(&r), &batch(), 0, LossWeights::CROSS_ENTROPY_ONLY, None).unwrap();
        assert_eq!(lb.total, lb.cross_entropy);
        let mut expected = 0.0;
        let mut n = 0;
        for ex in batch() {
            let lp = crate::policy::log_prob(&m, 0, &ex.input, &ex.control, &ex.target).unwrap();
            expected -= lp.iter().sum::<f64>();
            n += lp.len();
        }
        assert!((lb.cross_entropy - expected / n as f64).abs() < 1e-12);
    }

    #[test]
    fn kl_zero_when_policy_copies_reference() {
        let m = PolicyModel::new(8, 4, 5, [6, 7]);
        let r = snapshot_reference(&m);
        let w = LossWeights { beta: 0.05, alpha: 0.05 };
        let lb = loss_and_grad(&m, Some(&r), &batch(), 0, w, None).unwrap();
        assert!(lb.kl_penalty.abs() <= 1e-9);
    }

    #[test]
    fn reference_unchanged_by_training() {
        let mut m = PolicyModel::new(8, 4, 5, [6, 7]);
        let r = snapshot_reference(&m);
        let before = r.clone();
        let mut opt = Adam::new(m.params().len(), OptimizerConfig::default());
        let w = LossWeights { beta: 0.1, alpha: 0.05 };
        for _ in 0..100 {
            train_step(&mut m, &mut opt, Some(&r), &batch(), 0, w).unwrap();
        }
        assert_eq!(r, before);
        assert_ne!(m.params(), r.model().params());
    }

    #[test]
    fn accumulation_does_not_change_the_update() {
        let base = PolicyModel::new(8, 4, 9, [6, 7]);
        let r = snapshot_reference(&PolicyModel::new(8, 4, 3, []));
        let w = LossWeights { beta: 0.1, alpha: 0.05 };
        let mut outs = Vec::new();
        for acc in [1, 2] {
            let mut m = base.clone();
            let cfg = OptimizerConfig { accumulation: acc, ..Default::default() };
            let mut opt = Adam::new(m.params().len(), cfg);
            let lb = train_step(&mut m, &mut opt, Some(&r), &batch(), 0, w).unwrap();
            outs.push((lb, m));
        }
        assert!((outs[0].0.total - outs[1].0.total).abs() < 1e-12);
        for (a, b) in outs[0].1.params().iter().zip(outs[1].1.params()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut m = PolicyModel::new(8, 4, 5, []);
        let b = m.bias_range();
        m.params_mut()[b.start] = f64::NAN;
        let mut opt = Adam::new(m.params().len(), OptimizerConfig::default());
        let err = train_step(&mut m, &mut opt, None, &batch(), 0, LossWeights::CROSS_ENTROPY_ONLY);
        assert!(matches!(err, Err(Error::NonFinite { step: 0 })));
    }
}
