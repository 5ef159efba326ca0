//! The two frozen answer predictors behind the consistency reward: one sees
//! the question and the rationale, the other only the question.
//!
//! Each is a bag-of-embeddings classifier: every input segment is embedded
//! with its own table and mean-pooled, the pooled vectors are concatenated,
//! and an affine map followed by a softmax yields a distribution over the
//! answer labels.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::optim::{Adam, OptimizerConfig};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            epochs: 60,
            batch_size: 32,
            learning_rate: 0.02,
            seed: 0,
        }
    }
}

/// One training row: a question, its gold rationale and the gold label.
#[derive(Debug, Clone)]
pub struct PredictorExample {
    pub question: Vec<TokenId>,
    pub rationale: Vec<TokenId>,
    pub choices: Vec<String>,
    pub gold: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BagClassifier {
    segments: usize,
    vocab_size: usize,
    dim: usize,
    classes: usize,
    params: Vec<f64>,
}

impl BagClassifier {
    fn new(segments: usize, vocab_size: usize, dim: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let n = segments * vocab_size * dim + classes * segments * dim + classes;
        let scale = 0.1;
        let params = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Self {
            segments,
            vocab_size,
            dim,
            classes,
            params,
        }
    }

    fn emb_offset(&self, seg: usize, tok: TokenId) -> usize {
        (seg * self.vocab_size + tok as usize) * self.dim
    }

    fn weight_offset(&self) -> usize {
        self.segments * self.vocab_size * self.dim
    }

    fn bias_offset(&self) -> usize {
        self.weight_offset() + self.classes * self.segments * self.dim
    }

    fn features(&self, inputs: &[&[TokenId]]) -> Result<Vec<f64>> {
        debug_assert_eq!(inputs.len(), self.segments);
        let mut x = vec![0.0; self.segments * self.dim];
        for (seg, toks) in inputs.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let inv = 1.0 / toks.len() as f64;
            for &t in *toks {
                if t as usize >= self.vocab_size {
                    return Err(Error::InvalidId(t));
                }
                let off = self.emb_offset(seg, t);
                for d in 0..self.dim {
                    x[seg * self.dim + d] += self.params[off + d] * inv;
                }
            }
        }
        Ok(x)
    }

    fn probs_from_features(&self, x: &[f64]) -> Vec<f64> {
        let width = self.segments * self.dim;
        let w = self.weight_offset();
        let b = self.bias_offset();
        let logits: Vec<f64> = (0..self.classes)
            .map(|c| {
                let row = &self.params[w + c * width..w + (c + 1) * width];
                self.params[b + c] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        crate::policy::softmax(&logits)
    }

    fn probs(&self, inputs: &[&[TokenId]]) -> Result<Vec<f64>> {
        Ok(self.probs_from_features(&self.features(inputs)?))
    }

    /// Adds the cross-entropy gradient for one example into `grad`; returns the loss.
    fn accumulate_grad(&self, inputs: &[&[TokenId]], label: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let x = self.features(inputs)?;
        let p = self.probs_from_features(&x);
        let width = self.segments * self.dim;
        let w = self.weight_offset();
        let b = self.bias_offset();
        let mut dx = vec![0.0; width];
        for c in 0..self.classes {
            let g = (p[c] - if c == label { 1.0 } else { 0.0 }) * scale;
            grad[b + c] += g;
            for j in 0..width {
                grad[w + c * width + j] += g * x[j];
                dx[j] += g * self.params[w + c * width + j];
            }
        }
        for (seg, toks) in inputs.iter().enumerate() {
            if toks.is_empty() {
                continue;
            }
            let inv = 1.0 / toks.len() as f64;
            for &t in *toks {
                let off = self.emb_offset(seg, t);
                for d in 0..self.dim {
                    grad[off + d] += dx[seg * self.dim + d] * inv;
                }
            }
        }
        Ok(-p[label].max(1e-12).ln())
    }

    fn fit(&mut self, rows: &[(Vec<&[TokenId]>, usize)], config: &PredictorConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut adam = Adam::new(
            self.params.len(),
            OptimizerConfig {
                learning_rate: config.learning_rate,
                warmup_steps: 0,
                total_steps: 0,
                clip_norm: 0.0,
                accumulation: 1,
                ..Default::default()
            },
        );
        let mut order: Vec<usize> = (0..rows.len()).collect();
        let mut grad = vec![0.0; self.params.len()];
        let mut last_loss = f64::NAN;
        let batch = config.batch_size.max(1);
        for _ in 0..config.epochs {
            order.shuffle(rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(batch) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let (inputs, label) = &rows[i];
                    epoch_loss += self.accumulate_grad(inputs, *label, scale, &mut grad)?;
                }
                adam.step(&mut self.params, &mut grad);
            }
            last_loss = epoch_loss / rows.len() as f64;
        }
        Ok(last_loss)
    }
}

/// Held-out accuracy of both predictors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictorAccuracy {
    pub with_rationale: f64,
    pub without_rationale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyPredictors {
    labels: Vec<String>,
    with_rationale: BagClassifier,
    without_rationale: BagClassifier,
    trained: bool,
}

const PREDICTORS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictorsDocument {
    version: u32,
    labels: Vec<String>,
    trained: bool,
    m_qr: BagClassifier,
    m_q: BagClassifier,
}

impl ConsistencyPredictors {
    /// Freshly initialized, untrained pair. Queries fail until [`fit`](Self::fit).
    pub fn new(labels: Vec<String>, vocab_size: usize, config: &PredictorConfig) -> Result<Self> {
        if labels.len() < 2 {
            return Err(Error::Reward(format!(
                "consistency predictors need at least 2 answer labels, got {}",
                labels.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let with_rationale = BagClassifier::new(2, vocab_size, config.dim, labels.len(), &mut rng);
        let without_rationale = BagClassifier::new(1, vocab_size, config.dim, labels.len(), &mut rng);
        Ok(Self {
            labels,
            with_rationale,
            without_rationale,
            trained: false,
        })
    }

    /// Trains both predictors on gold data. The label set is the union of
    /// every example's choices.
    pub fn train(data: &[PredictorExample], vocab_size: usize, config: &PredictorConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Reward("no predictor training data".into()));
        }
        let labels: BTreeSet<String> = data
            .iter()
            .flat_map(|ex| ex.choices.iter().cloned().chain([ex.gold.clone()]))
            .collect();
        let mut predictors = Self::new(labels.into_iter().collect(), vocab_size, config)?;
        predictors.fit(data, config)?;
        Ok(predictors)
    }

    pub fn fit(&mut self, data: &[PredictorExample], config: &PredictorConfig) -> Result<()> {
        let mut with_rows = Vec::with_capacity(data.len());
        let mut without_rows = Vec::with_capacity(data.len());
        for ex in data {
            let label = self.label_index(&ex.gold)?;
            with_rows.push((vec![ex.question.as_slice(), ex.rationale.as_slice()], label));
            without_rows.push((vec![ex.question.as_slice()], label));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let loss_with = self.with_rationale.fit(&with_rows, config, &mut rng)?;
        let loss_without = self.without_rationale.fit(&without_rows, config, &mut rng)?;
        log::debug!("predictor training loss: with={loss_with:.4} without={loss_without:.4}");
        self.trained = true;
        Ok(())
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    fn label_index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Reward(format!("unknown answer label {label:?}")))
    }

    pub fn dist_with_rationale(&self, question: &[TokenId], rationale: &[TokenId]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        self.with_rationale.probs(&[question, rationale])
    }

    pub fn dist_without_rationale(&self, question: &[TokenId]) -> Result<Vec<f64>> {
        if !self.trained {
            return Err(Error::Untrained);
        }
        self.without_rationale.probs(&[question])
    }

    pub fn prob_with_rationale(&self, question: &[TokenId], rationale: &[TokenId], gold: &str) -> Result<f64> {
        let idx = self.label_index(gold)?;
        Ok(self.dist_with_rationale(question, rationale)?[idx])
    }

    pub fn prob_without_rationale(&self, question: &[TokenId], gold: &str) -> Result<f64> {
        let idx = self.label_index(gold)?;
        Ok(self.dist_without_rationale(question)?[idx])
    }

    /// Argmax accuracy of both predictors against the gold labels.
    pub fn accuracy(&self, data: &[PredictorExample]) -> Result<PredictorAccuracy> {
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        };
        let (mut with_hits, mut without_hits) = (0usize, 0usize);
        for ex in data {
            let gold = self.label_index(&ex.gold)?;
            if argmax(&self.dist_with_rationale(&ex.question, &ex.rationale)?) == gold {
                with_hits += 1;
            }
            if argmax(&self.dist_without_rationale(&ex.question)?) == gold {
                without_hits += 1;
            }
        }
        let n = data.len().max(1) as f64;
        Ok(PredictorAccuracy {
            with_rationale: with_hits as f64 / n,
            without_rationale: without_hits as f64 / n,
        })
    }

    /// Bias-only predictors emitting fixed distributions regardless of input.
    #[cfg(test)]
    pub(crate) fn with_outputs(labels: Vec<String>, with: Vec<f64>, without: Vec<f64>) -> Self {
        let mk = |segments: usize, probs: &[f64]| {
            let classes = probs.len();
            let mut params = vec![0.0; segments * classes + classes * segments + classes];
            let b = segments * classes + classes * segments;
            for (c, p) in probs.iter().enumerate() {
                params[b + c] = p.max(1e-300).ln();
            }
            BagClassifier {
                segments,
                vocab_size: classes,
                dim: 1,
                classes,
                params,
            }
        };
        Self {
            with_rationale: mk(2, &with),
            without_rationale: mk(1, &without),
            labels,
            trained: true,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(
            path,
            &PredictorsDocument {
                version: PREDICTORS_VERSION,
                labels: self.labels.clone(),
                trained: self.trained,
                m_qr: self.with_rationale.clone(),
                m_q: self.without_rationale.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: PredictorsDocument = io::read_json(path)?;
        if doc.version != PREDICTORS_VERSION {
            return Err(Error::Version {
                what: "predictors",
                found: doc.version,
                expected: PREDICTORS_VERSION,
            });
        }
        Ok(Self {
            labels: doc.labels,
            with_rationale: doc.m_qr,
            without_rationale: doc.m_q,
            trained: doc.trained,
        })
    }
}
