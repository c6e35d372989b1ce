//! Binary domain classifier: recognizes target-distribution text and scores
//! arbitrary text with a confidence in [0, 1].
//!
//! The encoder is a hashed n-gram bag-of-words model (optionally with one
//! hidden layer): small enough to train from scratch under DP, and the
//! selection mechanism downstream only depends on the ranking of scores,
//! not on the encoder family.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::accounting::{
    calibrate_noise, prv_epsilon, AccountingError, MechanismSpec, PrivacyBudget,
};
use crate::optim::{clip_per_example, pairwise_sum, AdamState, CounterRng, GradientBatch, OptimError};

const MODEL_MAGIC: &[u8; 4] = b"SPTC";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ClassifierError {
    #[error("text is empty after normalization")]
    EmptyText,
    #[error("source corpus too small: need {need} sequences, have {have}")]
    SourceTooSmall { need: usize, have: usize },
    #[error("negative/positive ratio must be at least 1, got {0}")]
    BadRatio(usize),
    #[error("training set has no examples")]
    EmptyTrainSet,
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad model file: {0}")]
    BadModelFile(String),
}

/// Hashing featurizer configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    /// Hash width in bits; features land in 2^hash_bits buckets.
    pub hash_bits: u8,
    /// Include word bigrams in addition to unigrams.
    pub bigrams: bool,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        Self {
            hash_bits: 18,
            bigrams: true,
        }
    }
}

/// Sparse hashed feature vector; indices strictly increasing, values > 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl FeatureVector {
    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lowercase, whitespace-tokenize, hash word uni- and bigrams into
/// 2^hash_bits buckets with their counts. Deterministic. An empty or
/// whitespace-only text yields the empty vector, which scores at the bias.
pub fn featurize(text: &str, config: &FeaturizerConfig) -> FeatureVector {
    let lowered = text.to_lowercase();
    let tokens: Vec<&str> = lowered.split_whitespace().collect();
    let mask = (1u64 << config.hash_bits) - 1;
    let mut counts: std::collections::BTreeMap<u32, f64> = std::collections::BTreeMap::new();
    for (i, tok) in tokens.iter().enumerate() {
        let idx = (fnv1a64(tok.as_bytes()) & mask) as u32;
        *counts.entry(idx).or_insert(0.0) += 1.0;
        if config.bigrams && i + 1 < tokens.len() {
            let bigram = format!("{}\u{1f}{}", tok, tokens[i + 1]);
            let idx = (fnv1a64(bigram.as_bytes()) & mask) as u32;
            *counts.entry(idx).or_insert(0.0) += 1.0;
        }
    }
    let (indices, values) = counts.into_iter().unzip();
    FeatureVector { indices, values }
}

/// Positive (target) and negative (sampled source) feature vectors.
#[derive(Debug, Clone)]
pub struct ClassifierTrainSet {
    pub positives: Vec<FeatureVector>,
    pub negatives: Vec<FeatureVector>,
}

impl ClassifierTrainSet {
    pub fn len(&self) -> usize {
        self.positives.len() + self.negatives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Default ratio of negatives to positives.
pub const NEGATIVE_RATIO: usize = 5;

/// Build the classifier training set: every target sequence is a positive;
/// `ratio` times as many source sequences are sampled (seeded, without
/// replacement) as negatives.
pub fn build_train_set_with_ratio(
    target_texts: &[String],
    source_texts: &[String],
    featurizer: &FeaturizerConfig,
    seed: u64,
    ratio: usize,
) -> Result<ClassifierTrainSet, ClassifierError> {
    if ratio == 0 {
        return Err(ClassifierError::BadRatio(ratio));
    }
    let need = target_texts.len() * ratio;
    if source_texts.len() < need {
        return Err(ClassifierError::SourceTooSmall {
            need,
            have: source_texts.len(),
        });
    }
    let positives = target_texts.iter().map(|t| featurize(t, featurizer)).collect();
    // seeded partial Fisher-Yates over source indices, without replacement
    let mut rng = CounterRng::substream(seed, "classifier-negatives", 0);
    let mut indices: Vec<usize> = (0..source_texts.len()).collect();
    for i in 0..need {
        let j = i + rng.next_below((indices.len() - i) as u64) as usize;
        indices.swap(i, j);
    }
    let negatives = indices[..need]
        .iter()
        .map(|&i| featurize(&source_texts[i], featurizer))
        .collect();
    Ok(ClassifierTrainSet {
        positives,
        negatives,
    })
}

pub fn build_train_set(
    target_texts: &[String],
    source_texts: &[String],
    featurizer: &FeaturizerConfig,
    seed: u64,
) -> Result<ClassifierTrainSet, ClassifierError> {
    build_train_set_with_ratio(target_texts, source_texts, featurizer, seed, NEGATIVE_RATIO)
}

/// Logistic scorer over hashed features, optionally with one tanh hidden
/// layer. Parameters are stored flat for the DP optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    pub hash_bits: u8,
    pub hidden: u32,
    params: Vec<f64>,
}

impl ClassifierModel {
    pub fn zeros(hash_bits: u8, hidden: u32) -> Self {
        let dim = Self::param_dim(hash_bits, hidden);
        Self {
            hash_bits,
            hidden,
            params: vec![0.0; dim],
        }
    }

    /// Small random init for the hidden layer; the linear model starts at 0.
    pub fn init(hash_bits: u8, hidden: u32, seed: u64) -> Self {
        let mut model = Self::zeros(hash_bits, hidden);
        if hidden > 0 {
            let mut rng = CounterRng::substream(seed, "classifier-init", 0);
            let scale = 0.1 / (hidden as f64).sqrt();
            for p in model.params.iter_mut() {
                *p = scale * rng.next_gaussian();
            }
        }
        model
    }

    fn param_dim(hash_bits: u8, hidden: u32) -> usize {
        let n_feat = 1usize << hash_bits;
        if hidden == 0 {
            n_feat + 1 // weights + bias
        } else {
            let h = hidden as usize;
            h * n_feat + h + h + 1 // w1, b1, w2, b2
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_features(&self) -> usize {
        1usize << self.hash_bits
    }

    /// Raw score before the sigmoid.
    pub fn score(&self, fv: &FeatureVector) -> f64 {
        let n = self.n_features();
        if self.hidden == 0 {
            let mut s = self.params[n]; // bias
            for (&i, &v) in fv.indices.iter().zip(&fv.values) {
                s += self.params[i as usize] * v;
            }
            s
        } else {
            let h = self.hidden as usize;
            let (w1, rest) = self.params.split_at(h * n);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            let mut s = b2[0];
            for k in 0..h {
                let mut z = b1[k];
                for (&i, &v) in fv.indices.iter().zip(&fv.values) {
                    z += w1[k * n + i as usize] * v;
                }
                s += w2[k] * z.tanh();
            }
            s
        }
    }

    /// Sigmoid confidence in [0, 1]. No calibration is applied; the
    /// downstream selection only uses the ranking.
    pub fn confidence(&self, fv: &FeatureVector) -> f64 {
        sigmoid(self.score(fv))
    }

    /// Logistic-loss gradient for one (features, label) example, flattened
    /// to the parameter layout.
    pub fn loss_gradient(&self, fv: &FeatureVector, label: f64) -> Vec<f64> {
        let n = self.n_features();
        let mut grad = vec![0.0; self.params.len()];
        if self.hidden == 0 {
            let residual = sigmoid(self.score(fv)) - label;
            for (&i, &v) in fv.indices.iter().zip(&fv.values) {
                grad[i as usize] = residual * v;
            }
            grad[n] = residual;
        } else {
            let h = self.hidden as usize;
            let (w1, rest) = self.params.split_at(h * n);
            let (b1, rest) = rest.split_at(h);
            let (w2, _b2) = rest.split_at(h);
            let mut acts = vec![0.0; h];
            let mut s = rest[h];
            for k in 0..h {
                let mut z = b1[k];
                for (&i, &v) in fv.indices.iter().zip(&fv.values) {
                    z += w1[k * n + i as usize] * v;
                }
                acts[k] = z.tanh();
                s += w2[k] * acts[k];
            }
            let residual = sigmoid(s) - label;
            let (gw1, grest) = grad.split_at_mut(h * n);
            let (gb1, grest) = grest.split_at_mut(h);
            let (gw2, gb2) = grest.split_at_mut(h);
            for k in 0..h {
                let dz = residual * w2[k] * (1.0 - acts[k] * acts[k]);
                for (&i, &v) in fv.indices.iter().zip(&fv.values) {
                    gw1[k * n + i as usize] = dz * v;
                }
                gb1[k] = dz;
                gw2[k] = residual * acts[k];
            }
            gb2[0] = residual;
        }
        grad
    }

    /// Mean logistic loss over a labeled set.
    pub fn mean_loss(&self, examples: &[(&FeatureVector, f64)]) -> f64 {
        let total: f64 = examples
            .iter()
            .map(|(fv, y)| {
                let s = self.score(fv);
                // log(1 + e^s) - y s, stably
                s.max(0.0) + (-s.abs()).exp().ln_1p() - y * s
            })
            .sum();
        total / examples.len() as f64
    }

    pub fn save(&self, path: &Path) -> Result<(), ClassifierError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MODEL_MAGIC)?;
        f.write_all(&MODEL_VERSION.to_le_bytes())?;
        f.write_all(&u32::from(self.hash_bits).to_le_bytes())?;
        f.write_all(&self.hidden.to_le_bytes())?;
        for p in &self.params {
            f.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClassifierError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        f.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(ClassifierError::BadModelFile("bad magic".into()));
        }
        let mut word = [0u8; 4];
        f.read_exact(&mut word)?;
        if u32::from_le_bytes(word) != MODEL_VERSION {
            return Err(ClassifierError::BadModelFile("unknown version".into()));
        }
        f.read_exact(&mut word)?;
        let hash_bits = u32::from_le_bytes(word);
        if hash_bits > 30 {
            return Err(ClassifierError::BadModelFile("hash bits out of range".into()));
        }
        f.read_exact(&mut word)?;
        let hidden = u32::from_le_bytes(word);
        let dim = Self::param_dim(hash_bits as u8, hidden);
        let mut params = vec![0.0; dim];
        let mut buf = [0u8; 8];
        for p in params.iter_mut() {
            f.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(ClassifierError::BadModelFile("non-finite parameter".into()));
        }
        Ok(Self {
            hash_bits: hash_bits as u8,
            hidden,
            params,
        })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// How the training noise level is chosen.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NoiseSetting {
    /// Use this noise multiplier; report epsilon at the given delta.
    Fixed { noise_multiplier: f64, delta: f64 },
    /// Calibrate the noise multiplier to this stage budget.
    Calibrated { epsilon: f64, delta: f64 },
    /// Disable privacy entirely (noise 0, no clipping); reports no budget.
    Off,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpTrainConfig {
    pub epochs: u32,
    /// Poisson sampling rate per step over the full (1 + ratio) N set.
    pub sampling_rate: f64,
    pub clip_norm: f64,
    pub learning_rate: f64,
    pub hidden: u32,
    pub seed: u64,
    pub noise: NoiseSetting,
}

impl Default for DpTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            sampling_rate: 0.005,
            clip_norm: 1.0,
            learning_rate: 0.1,
            hidden: 0,
            seed: 0,
            noise: NoiseSetting::Off,
        }
    }
}

/// Outcome of one DP training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    /// Stage budget; absent when training ran with privacy off.
    pub budget: Option<PrivacyBudget>,
    pub noise_multiplier: f64,
    pub steps: u32,
}

/// Metadata sidecar written next to a persisted model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub hash_bits: u8,
    pub hidden: u32,
    pub epochs: u32,
    pub sampling_rate: f64,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub steps: u32,
    pub epsilon: Option<f64>,
    pub delta: Option<f64>,
    pub seed: u64,
}

/// DP logistic-loss training over the pooled positive/negative set with
/// Poisson-sampled minibatches, per-example clipping, Gaussian noise, and
/// Adam. Returns the model together with the stage privacy budget.
pub fn train_dp(
    train_set: &ClassifierTrainSet,
    featurizer: &FeaturizerConfig,
    config: &DpTrainConfig,
) -> Result<TrainOutcome, ClassifierError> {
    if train_set.is_empty() {
        return Err(ClassifierError::EmptyTrainSet);
    }
    let total = train_set.len();
    let q = config.sampling_rate;
    let steps = (f64::from(config.epochs) / q).ceil() as u32;
    let expected_batch = q * total as f64;

    let (noise_multiplier, budget) = match config.noise {
        NoiseSetting::Off => (0.0, None),
        NoiseSetting::Fixed {
            noise_multiplier,
            delta,
        } => {
            if noise_multiplier == 0.0 {
                // no noise gives no finite guarantee; report no budget
                (0.0, None)
            } else {
                let spec = MechanismSpec::new(noise_multiplier, q, steps)?;
                let epsilon = prv_epsilon(&spec, delta)?;
                (noise_multiplier, Some(PrivacyBudget::new(epsilon, delta)?))
            }
        }
        NoiseSetting::Calibrated { epsilon, delta } => {
            let target = PrivacyBudget::new(epsilon, delta)?;
            let sigma = calibrate_noise(&target, q, steps)?;
            let spec = MechanismSpec::new(sigma, q, steps)?;
            let achieved = prv_epsilon(&spec, delta)?;
            (sigma, Some(PrivacyBudget::new(achieved, delta)?))
        }
    };

    let examples: Vec<(&FeatureVector, f64)> = train_set
        .positives
        .iter()
        .map(|fv| (fv, 1.0))
        .chain(train_set.negatives.iter().map(|fv| (fv, 0.0)))
        .collect();

    let mut model = ClassifierModel::init(featurizer.hash_bits, config.hidden, config.seed);
    let dim = model.params().len();
    let mut adam = AdamState::new(dim, config.learning_rate)?;
    let disabled = matches!(config.noise, NoiseSetting::Off);

    for step in 0..steps {
        let mut sampler = CounterRng::substream(config.seed, "poisson-batch", u64::from(step));
        let mut grads = Vec::new();
        for &(fv, y) in &examples {
            if sampler.next_unit() <= q {
                grads.push(model.loss_gradient(fv, y));
            }
        }
        let mut sum = if grads.is_empty() {
            vec![0.0; dim]
        } else if disabled {
            pairwise_sum(&grads)
        } else {
            let batch = GradientBatch::new(grads)?;
            let clipped = clip_per_example(&batch, config.clip_norm)?;
            pairwise_sum(clipped.examples())
        };
        if noise_multiplier > 0.0 {
            let mut noise = CounterRng::substream(config.seed, "dp-noise", u64::from(step));
            let std = noise_multiplier * config.clip_norm;
            for x in sum.iter_mut() {
                *x += std * noise.next_gaussian();
            }
        }
        for x in sum.iter_mut() {
            *x /= expected_batch;
        }
        let delta = adam.step(&sum, model.params())?;
        for (p, d) in model.params_mut().iter_mut().zip(&delta) {
            *p += d;
        }
    }

    Ok(TrainOutcome {
        model,
        budget,
        noise_multiplier,
        steps,
    })
}

/// Precision/recall F1 of the model at threshold 0.5 on a labeled set.
pub fn f1_score(model: &ClassifierModel, examples: &[(&FeatureVector, f64)]) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
    for (fv, y) in examples {
        let pred = model.confidence(fv) >= 0.5;
        match (pred, *y >= 0.5) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fn_ += 1.0,
            (false, false) => {}
        }
    }
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fn_)
}
