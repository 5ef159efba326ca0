//! The trainable conditional sequence model and its frozen reference.
//!
//! A single-layer Elman recurrence without bias,
//! `h_t = tanh(W h_{t-1} + E[x_t])` with `h_0 = 0`, followed by an affine
//! projection to vocabulary logits. Because the recurrence has no bias term,
//! a token whose embedding row is zero leaves a zero state unchanged: control
//! tokens with zero-initialized embeddings placed at the very start of the
//! prefix are exact no-ops.

mod loss;
mod sampling;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{entropy, kl_per_token, loss_and_grad, train_step, LossBreakdown, LossWeights, KL_EPSILON};
pub use sampling::{nucleus, sample, SamplingConfig, Strategy};

use crate::error::{Error, Result};
use crate::io;
use crate::vocab::TokenId;

const REC_GAIN: f64 = 1.0;
const REC_NOISE: f64 = 0.5;

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `[control ids] ++ [bos] ++ [input ids]`.
pub fn conditioning_prefix(control: &[TokenId], bos: TokenId, input: &[TokenId]) -> Vec<TokenId> {
    let mut prefix = Vec::with_capacity(control.len() + 1 + input.len());
    prefix.extend_from_slice(control);
    prefix.push(bos);
    prefix.extend_from_slice(input);
    prefix
}

/// One supervised example: conditioning tokens and the target continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub control: Vec<TokenId>,
    pub input: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    vocab_size: usize,
    hidden: usize,
    params: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    version: u32,
    vocab_size: usize,
    hidden: usize,
    params: Vec<f64>,
}

/// Hidden states of one teacher-forced pass.
pub(crate) struct Trace {
    pub tokens: Vec<TokenId>,
    /// `states[t]` is the state after consuming `tokens[..t]`; `states[0]` is zero.
    pub states: Vec<Vec<f64>>,
    pub prefix_len: usize,
}

impl PolicyModel {
    pub fn param_count(vocab_size: usize, hidden: usize) -> usize {
        2 * vocab_size * hidden + hidden * hidden + vocab_size
    }

    /// Small random weights around an identity recurrence, so early prefix
    /// tokens (control tokens) still reach the state after the question.
    /// Rows listed in `zero_rows` (control tokens) get zero embeddings.
    pub fn new(vocab_size: usize, hidden: usize, seed: u64, zero_rows: impl IntoIterator<Item = TokenId>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Self::param_count(vocab_size, hidden);
        let emb_scale = 0.5;
        let rec_scale = REC_NOISE / (hidden as f64).sqrt();
        let out_scale = 1.0 / (hidden as f64).sqrt();
        let mut model = Self::zeros(vocab_size, hidden);
        let (e, w, o) = (model.emb_range(), model.rec_range(), model.out_range());
        for i in 0..n {
            let scale = if e.contains(&i) {
                emb_scale
            } else if w.contains(&i) {
                rec_scale
            } else if o.contains(&i) {
                out_scale
            } else {
                0.0
            };
            model.params[i] = if scale > 0.0 { rng.gen_range(-scale..scale) } else { 0.0 };
        }
        for k in 0..hidden {
            model.params[w.start + k * hidden + k] += REC_GAIN;
        }
        for row in zero_rows {
            let start = row as usize * hidden;
            model.params[start..start + hidden].fill(0.0);
        }
        model
    }

    /// All-zero parameters: every next-token distribution is uniform.
    pub fn zeros(vocab_size: usize, hidden: usize) -> Self {
        Self {
            vocab_size,
            hidden,
            params: vec![0.0; Self::param_count(vocab_size, hidden)],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub(crate) fn emb_range(&self) -> std::ops::Range<usize> {
        0..self.vocab_size * self.hidden
    }

    pub(crate) fn rec_range(&self) -> std::ops::Range<usize> {
        let s = self.vocab_size * self.hidden;
        s..s + self.hidden * self.hidden
    }

    pub(crate) fn out_range(&self) -> std::ops::Range<usize> {
        let s = self.rec_range().end;
        s..s + self.vocab_size * self.hidden
    }

    pub(crate) fn bias_range(&self) -> std::ops::Range<usize> {
        let s = self.out_range().end;
        s..s + self.vocab_size
    }

    pub fn embedding(&self, token: TokenId) -> &[f64] {
        let s = token as usize * self.hidden;
        &self.params[s..s + self.hidden]
    }

    pub fn embedding_mut(&mut self, token: TokenId) -> &mut [f64] {
        let s = token as usize * self.hidden;
        &mut self.params[s..s + self.hidden]
    }

    fn check(&self, tok: TokenId) -> Result<()> {
        if (tok as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::InvalidId(tok))
        }
    }

    /// One recurrence step.
    pub fn advance(&self, state: &[f64], tok: TokenId) -> Result<Vec<f64>> {
        self.check(tok)?;
        let h = self.hidden;
        let w = &self.params[self.rec_range()];
        let e = self.embedding(tok);
        Ok((0..h)
            .map(|i| {
                let row = &w[i * h..(i + 1) * h];
                let pre: f64 = e[i] + row.iter().zip(state).map(|(a, b)| a * b).sum::<f64>();
                pre.tanh()
            })
            .collect())
    }

    pub fn initial_state(&self) -> Vec<f64> {
        vec![0.0; self.hidden]
    }

    pub fn logits(&self, state: &[f64]) -> Vec<f64> {
        let h = self.hidden;
        let o = &self.params[self.out_range()];
        let c = &self.params[self.bias_range()];
        (0..self.vocab_size)
            .map(|v| c[v] + o[v * h..(v + 1) * h].iter().zip(state).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    }

    pub fn run_prefix(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut state = self.initial_state();
        for &t in prefix {
            state = self.advance(&state, t)?;
        }
        Ok(state)
    }

    /// Next-token distribution after `prefix`.
    pub fn next_distribution(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        Ok(softmax(&self.logits(&self.run_prefix(prefix)?)))
    }

    pub(crate) fn trace(&self, prefix: &[TokenId], target: &[TokenId]) -> Result<Trace> {
        if prefix.is_empty() {
            return Err(Error::Config("conditioning prefix must be nonempty".into()));
        }
        for &t in target {
            self.check(t)?;
        }
        let mut tokens = prefix.to_vec();
        if target.len() > 1 {
            tokens.extend_from_slice(&target[..target.len() - 1]);
        }
        let mut states = Vec::with_capacity(tokens.len() + 1);
        states.push(self.initial_state());
        for &t in &tokens {
            let next = self.advance(states.last().unwrap(), t)?;
            states.push(next);
        }
        Ok(Trace {
            tokens,
            states,
            prefix_len: prefix.len(),
        })
    }

    /// Log-probabilities of each target token given the prefix and the
    /// preceding target tokens.
    pub fn target_log_probs(&self, prefix: &[TokenId], target: &[TokenId]) -> Result<Vec<f64>> {
        if target.is_empty() {
            return Err(Error::Config("target must be nonempty".into()));
        }
        let trace = self.trace(prefix, target)?;
        Ok(target
            .iter()
            .enumerate()
            .map(|(j, &y)| log_softmax(&self.logits(&trace.states[trace.prefix_len + j]))[y as usize])
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &Checkpoint {
                version: CHECKPOINT_VERSION,
                vocab_size: self.vocab_size,
                hidden: self.hidden,
                params: self.params.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = io::read_json(path)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                what: "checkpoint",
                found: ck.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if ck.params.len() != Self::param_count(ck.vocab_size, ck.hidden) {
            return Err(Error::Config(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                Self::param_count(ck.vocab_size, ck.hidden),
                ck.params.len()
            )));
        }
        Ok(Self {
            vocab_size: ck.vocab_size,
            hidden: ck.hidden,
            params: ck.params,
        })
    }
}

/// `log p(target | control ++ bos ++ input)` per target token.
pub fn log_prob(
    model: &PolicyModel,
    bos: TokenId,
    input: &[TokenId],
    control: &[TokenId],
    target: &[TokenId],
) -> Result<Vec<f64>> {
    model.target_log_probs(&conditioning_prefix(control, bos, input), target)
}

/// Frozen copy of a policy. Exposes no way to mutate its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel(PolicyModel);

impl ReferenceModel {
    pub fn model(&self) -> &PolicyModel {
        &self.0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.0.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        PolicyModel::load(path).map(Self)
    }
}

pub fn snapshot_reference(model: &PolicyModel) -> ReferenceModel {
    ReferenceModel(model.clone())
}
