//! Shared helpers for integration tests: the closed-form Gaussian oracle
//! and a synthetic Markov-mixture benchmark generator.

use std::path::Path;

use statrs::distribution::{ContinuousCDF, Normal};

use selectpt_core::optim::CounterRng;
use selectpt_core::pipeline::{parse_config, PipelineConfig};
use selectpt_core::selection::{write_corpus, Sequence};

/// Closed-form delta(epsilon) of the Gaussian mechanism with sensitivity 1:
/// `Phi(1/(2s) - eps*s) - e^eps * Phi(-1/(2s) - eps*s)`.
pub fn analytic_gaussian_delta(sigma: f64, epsilon: f64) -> f64 {
    let phi = Normal::new(0.0, 1.0).unwrap();
    let a = phi.cdf(1.0 / (2.0 * sigma) - epsilon * sigma);
    let b = epsilon.exp() * phi.cdf(-1.0 / (2.0 * sigma) - epsilon * sigma);
    (a - b).max(0.0)
}

/// Invert the analytic curve: smallest epsilon with delta(epsilon) <= delta.
pub fn analytic_gaussian_epsilon(sigma: f64, delta: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 60.0f64);
    assert!(analytic_gaussian_delta(sigma, hi) <= delta);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if analytic_gaussian_delta(sigma, mid) <= delta {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// First-order Markov chain over a prefixed token vocabulary; sequences from
/// one chain share transition structure a model can learn.
pub struct MarkovChain {
    prefix: &'static str,
    succ: Vec<Vec<usize>>,
}

impl MarkovChain {
    pub fn new(prefix: &'static str, vocab: usize, branching: usize, seed: u64) -> Self {
        let mut rng = CounterRng::substream(seed, "markov-build", 0);
        let succ = (0..vocab)
            .map(|_| {
                (0..branching)
                    .map(|_| rng.next_below(vocab as u64) as usize)
                    .collect()
            })
            .collect();
        Self { prefix, succ }
    }

    pub fn sample(&self, len: usize, rng: &mut CounterRng) -> String {
        let mut cur = rng.next_below(self.succ.len() as u64) as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            out.push(format!("{}{}", self.prefix, cur));
            let next = &self.succ[cur];
            cur = next[rng.next_below(next.len() as u64) as usize];
        }
        out.join(" ")
    }
}

/// The synthetic mixture benchmark: a small target corpus from one Markov
/// distribution and a source corpus that is 10% target-like, 90% background.
/// Token budget 10% of the source. Returns (target_len, source_len) token
/// totals for reference.
pub struct MixtureBenchmark {
    pub target: Vec<String>,
    pub source: Vec<String>,
    pub source_tokens: u64,
}

pub fn mixture_benchmark(seed: u64, target_like_fraction: f64) -> MixtureBenchmark {
    let tgt_chain = MarkovChain::new("tgt", 40, 3, 1000 + seed);
    let bg_chain = MarkovChain::new("bg", 200, 5, 2000 + seed);
    let mut rng = CounterRng::substream(seed, "benchmark-corpora", 0);
    let target: Vec<String> = (0..120).map(|_| tgt_chain.sample(20, &mut rng)).collect();
    let mut source = Vec::with_capacity(1500);
    let mut source_tokens = 0u64;
    for _ in 0..1500 {
        let text = if rng.next_unit() < target_like_fraction {
            tgt_chain.sample(20, &mut rng)
        } else {
            bg_chain.sample(20, &mut rng)
        };
        source_tokens += 20;
        source.push(text);
    }
    MixtureBenchmark {
        target,
        source,
        source_tokens,
    }
}

/// Write a text list as a JSON-lines corpus with sequential ids.
pub fn write_texts(path: &Path, texts: &[String], id_base: u64) {
    let corpus: Vec<Sequence> = texts
        .iter()
        .enumerate()
        .map(|(i, t)| Sequence::from_text(id_base + i as u64, t.clone()))
        .collect();
    write_corpus(path, &corpus).unwrap();
}

/// Benchmark pipeline configuration: desk-scale settings sized so one run
/// takes seconds, shared by the end-to-end and bookkeeping criteria.
pub fn benchmark_config(dir: &Path, seed: u64) -> PipelineConfig {
    let mut config = parse_config(
        "[paths]\ntarget_corpus = t\nsource_corpus = s\noutput_dir = o\n",
    )
    .unwrap();
    config.target_corpus = dir.join("target.jsonl");
    config.source_corpus = dir.join("source.jsonl");
    config.output_dir = dir.join(format!("out-{seed}"));
    config.total_epsilon = 7.3;
    config.total_delta = 1e-6;
    config.token_budget = 3000; // 10% of the 30k-token source
    config.classifier_hash_bits = 12;
    config.classifier_epochs = 2;
    config.classifier_sampling_rate = 0.02;
    config.classifier_learning_rate = 0.1;
    config.lm_embedding_dim = 16;
    config.lm_window = 4;
    config.lm_hidden_dim = 32;
    config.lm_vocab_size = 512;
    config.pretrain_steps = 500;
    config.pretrain_batch = 16;
    config.finetune_epochs = 1;
    config.finetune_sampling_rate = 0.02;
    config.diagnostics_k = 30;
    config.seed = seed;
    config
}
