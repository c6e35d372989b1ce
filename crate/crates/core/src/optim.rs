//! Privatized gradient pipeline: per-example clipping, Gaussian noise, and
//! an Adam update on the privatized mean gradient.
//!
//! The mean denominator is always the fixed expected batch size, not the
//! realized Poisson draw; the accounting is only valid under that rule.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OptimError {
    #[error("gradient batch is empty")]
    EmptyBatch,
    #[error("gradient vectors have mixed dimensions: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("non-finite gradient entry at example {example}, coordinate {coordinate}")]
    NonFiniteGradient { example: usize, coordinate: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// Per-example gradients of one minibatch, all of equal dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBatch {
    per_example: Vec<Vec<f64>>,
}

impl GradientBatch {
    pub fn new(per_example: Vec<Vec<f64>>) -> Result<Self, OptimError> {
        if per_example.is_empty() {
            return Err(OptimError::EmptyBatch);
        }
        let dim = per_example[0].len();
        for (i, g) in per_example.iter().enumerate() {
            if g.len() != dim {
                return Err(OptimError::DimensionMismatch(dim, g.len()));
            }
            if let Some(j) = g.iter().position(|x| !x.is_finite()) {
                return Err(OptimError::NonFiniteGradient {
                    example: i,
                    coordinate: j,
                });
            }
        }
        Ok(Self { per_example })
    }

    pub fn batch_size(&self) -> usize {
        self.per_example.len()
    }

    pub fn dim(&self) -> usize {
        self.per_example[0].len()
    }

    pub fn examples(&self) -> &[Vec<f64>] {
        &self.per_example
    }
}

/// Clipping norm, noise multiplier, and the fixed mean denominator.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpSgdConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub expected_batch_size: f64,
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(OptimError::InvalidConfig(format!(
                "clip norm must be positive, got {}",
                self.clip_norm
            )));
        }
        if !self.noise_multiplier.is_finite() || self.noise_multiplier < 0.0 {
            return Err(OptimError::InvalidConfig(format!(
                "noise multiplier must be nonnegative, got {}",
                self.noise_multiplier
            )));
        }
        if !self.expected_batch_size.is_finite() || self.expected_batch_size <= 0.0 {
            return Err(OptimError::InvalidConfig(format!(
                "expected batch size must be positive, got {}",
                self.expected_batch_size
            )));
        }
        Ok(())
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescale each example gradient to norm at most `clip_norm`, preserving
/// direction. The zero vector passes through untouched.
pub fn clip_per_example(batch: &GradientBatch, clip_norm: f64) -> Result<GradientBatch, OptimError> {
    if !clip_norm.is_finite() || clip_norm <= 0.0 {
        return Err(OptimError::InvalidConfig(format!(
            "clip norm must be positive, got {clip_norm}"
        )));
    }
    let per_example = batch
        .per_example
        .iter()
        .map(|g| {
            let norm = l2_norm(g);
            if norm <= clip_norm || norm == 0.0 {
                g.clone()
            } else {
                let scale = clip_norm / norm;
                g.iter().map(|x| x * scale).collect()
            }
        })
        .collect();
    Ok(GradientBatch { per_example })
}

/// Sum vectors pairwise over a fixed tree so the result is independent of
/// any parallel schedule.
pub fn pairwise_sum(vectors: &[Vec<f64>]) -> Vec<f64> {
    fn rec(vs: &[Vec<f64>]) -> Vec<f64> {
        match vs.len() {
            1 => vs[0].clone(),
            n => {
                let (a, b) = vs.split_at(n / 2);
                let mut left = rec(a);
                let right = rec(b);
                for (x, y) in left.iter_mut().zip(right.iter()) {
                    *x += y;
                }
                left
            }
        }
    }
    if vectors.is_empty() {
        return Vec::new();
    }
    rec(vectors)
}

/// Counter-based generator: each (seed, step) pair yields an independent
/// stream, identical on every platform.
#[derive(Debug, Clone)]
pub struct CounterRng {
    state: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: splitmix64(seed),
        }
    }

    /// Sub-stream for a labeled purpose, e.g. the noise of one step.
    pub fn substream(seed: u64, label: &str, counter: u64) -> Self {
        let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
        for b in label.bytes() {
            h = splitmix64(h ^ u64::from(b));
        }
        Self::new(splitmix64(h ^ counter))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in (0, 1].
    pub fn next_unit(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 1.0) / (1u64 << 53) as f64
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u = self.next_unit();
        let v = self.next_unit();
        (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
    }

    /// Uniform in [0, bound).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        // rejection-free modulo is fine at the corpus sizes involved
        self.next_u64() % bound.max(1)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Clip, sum, add Gaussian noise with std `noise_multiplier * clip_norm`
/// per coordinate, and divide by the expected batch size. Deterministic in
/// (rng_seed, step).
pub fn privatize(
    batch: &GradientBatch,
    config: &DpSgdConfig,
    rng_seed: u64,
    step: u64,
) -> Result<Vec<f64>, OptimError> {
    config.validate()?;
    let clipped = clip_per_example(batch, config.clip_norm)?;
    let mut sum = pairwise_sum(&clipped.per_example);
    if config.noise_multiplier > 0.0 {
        let mut rng = CounterRng::substream(rng_seed, "dp-noise", step);
        let std = config.noise_multiplier * config.clip_norm;
        for x in sum.iter_mut() {
            *x += std * rng.next_gaussian();
        }
    }
    for x in sum.iter_mut() {
        *x /= config.expected_batch_size;
    }
    Ok(sum)
}

/// Adam state for one parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon_stability: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(dim: usize, learning_rate: f64) -> Result<Self, OptimError> {
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(OptimError::InvalidConfig(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon_stability: 1e-8,
            learning_rate,
            weight_decay: 0.0,
        })
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn with_learning_rate(mut self, learning_rate: f64) -> Self {
        self.learning_rate = learning_rate;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Bias-corrected Adam with decoupled weight decay. Returns the delta to
    /// add to the parameters; `params` are only read for the decay term.
    pub fn step(&mut self, gradient: &[f64], params: &[f64]) -> Result<Vec<f64>, OptimError> {
        if gradient.len() != self.first_moment.len() || params.len() != gradient.len() {
            return Err(OptimError::DimensionMismatch(
                self.first_moment.len(),
                gradient.len(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut delta = vec![0.0; gradient.len()];
        for i in 0..gradient.len() {
            let g = gradient[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] =
                self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / bc1;
            let v_hat = self.second_moment[i] / bc2;
            delta[i] = -self.learning_rate
                * (m_hat / (v_hat.sqrt() + self.epsilon_stability)
                    + self.weight_decay * params[i]);
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(vs: &[&[f64]]) -> GradientBatch {
        GradientBatch::new(vs.iter().map(|v| v.to_vec()).collect()).unwrap()
    }

    #[test]
    fn batch_rejects_bad_input() {
        assert_eq!(GradientBatch::new(vec![]).unwrap_err(), OptimError::EmptyBatch);
        assert!(matches!(
            GradientBatch::new(vec![vec![1.0], vec![1.0, 2.0]]),
            Err(OptimError::DimensionMismatch(1, 2))
        ));
        assert!(matches!(
            GradientBatch::new(vec![vec![f64::NAN]]),
            Err(OptimError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn clip_scales_long_vectors() {
        let b = batch(&[&[3.0, 4.0]]); // norm 5
        let c = clip_per_example(&b, 1.0).unwrap();
        let g = &c.examples()[0];
        assert!((l2_norm(g) - 1.0).abs() < 1e-12);
        assert!((g[0] / g[1] - 3.0 / 4.0).abs() < 1e-12); // direction kept
    }

    #[test]
    fn clip_keeps_short_vectors() {
        let b = batch(&[&[0.3, 0.4]]);
        let c = clip_per_example(&b, 1.0).unwrap();
        assert_eq!(c.examples()[0], vec![0.3, 0.4]);
    }

    #[test]
    fn clip_zero_vector_is_safe() {
        let b = batch(&[&[0.0, 0.0]]);
        let c = clip_per_example(&b, 1.0).unwrap();
        assert_eq!(c.examples()[0], vec![0.0, 0.0]);
    }

    #[test]
    fn privatize_noiseless_is_clipped_mean() {
        let b = batch(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let config = DpSgdConfig {
            clip_norm: 1.0,
            noise_multiplier: 0.0,
            expected_batch_size: 2.0,
        };
        let out = privatize(&b, &config, 7, 0).unwrap();
        assert_eq!(out, vec![0.5, 0.5]);
    }

    #[test]
    fn privatize_single_example_identity_path() {
        let b = batch(&[&[0.25, -0.75]]);
        let config = DpSgdConfig {
            clip_norm: 1e12,
            noise_multiplier: 0.0,
            expected_batch_size: 1.0,
        };
        assert_eq!(privatize(&b, &config, 0, 0).unwrap(), vec![0.25, -0.75]);
    }

    #[test]
    fn privatize_is_seed_deterministic() {
        let b = batch(&[&[1.0, 2.0, 3.0]]);
        let config = DpSgdConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            expected_batch_size: 8.0,
        };
        let a = privatize(&b, &config, 42, 3).unwrap();
        let c = privatize(&b, &config, 42, 3).unwrap();
        let d = privatize(&b, &config, 43, 3).unwrap();
        let e = privatize(&b, &config, 42, 4).unwrap();
        assert_eq!(a, c);
        assert_ne!(a, d);
        assert_ne!(a, e);
    }

    #[test]
    fn privatize_noise_scale_matches_formula() {
        // per-coordinate output noise std must be sigma * C / expected_batch
        let b = batch(&[&[0.0]]);
        let config = DpSgdConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.03,
            expected_batch_size: 64.0,
        };
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for step in 0..n {
            let x = privatize(&b, &config, 1, step).unwrap()[0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let expected_std = 1.03 / 64.0;
        assert!(
            (var.sqrt() - expected_std).abs() / expected_std < 0.02,
            "std {} vs {}",
            var.sqrt(),
            expected_std
        );
    }

    #[test]
    fn adam_zero_gradient_zero_delta() {
        let mut state = AdamState::new(3, 1e-3).unwrap();
        let delta = state.step(&[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(delta, vec![0.0; 3]);
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn adam_constant_gradient_approaches_sign_step() {
        let lr = 1e-3;
        let mut state = AdamState::new(2, lr).unwrap();
        let g = [0.37, -2.5];
        let params = [0.0, 0.0];
        let mut delta = Vec::new();
        for _ in 0..500 {
            delta = state.step(&g, &params).unwrap();
        }
        // fixed point of bias-corrected Adam on a constant gradient
        assert!((delta[0] - (-lr)).abs() < 1e-3 * lr.abs().max(1e-9) + 1e-6);
        assert!((delta[1] - lr).abs() < 1e-6);
    }

    #[test]
    fn adam_rejects_dimension_mismatch() {
        let mut state = AdamState::new(2, 1e-3).unwrap();
        assert!(state.step(&[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn pairwise_sum_matches_sequential() {
        let vs: Vec<Vec<f64>> = (0..17).map(|i| vec![i as f64, 1.0]).collect();
        let s = pairwise_sum(&vs);
        assert_eq!(s, vec![136.0, 17.0]);
    }
}

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn post_clip_norms_bounded(
            grads in prop::collection::vec(
                prop::collection::vec(-100.0f64..100.0, 4), 1..16),
            clip in 0.01f64..10.0,
        ) {
            let batch = GradientBatch::new(grads).unwrap();
            let clipped = clip_per_example(&batch, clip).unwrap();
            for (orig, out) in batch.examples().iter().zip(clipped.examples()) {
                prop_assert!(l2_norm(out) <= clip * (1.0 + 1e-12));
                // direction preserved: out is a nonnegative multiple of orig
                let dot: f64 = orig.iter().zip(out).map(|(a, b)| a * b).sum();
                prop_assert!(dot >= 0.0);
            }
        }
    }
}
