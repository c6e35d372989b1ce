//! Acceptance gate: each test covers one numbered criterion with pinned
//! tolerances and prints a single pass/fail line.

mod common;

use std::cmp::Ordering;
use std::time::Instant;

use common::{
    analytic_gaussian_epsilon, benchmark_config, mixture_benchmark, write_texts, MarkovChain,
};
use selectpt_core::accounting::{
    advanced_compose, calibrate_noise, calibrate_noise_joint, compose_pld, epsilon_at_delta,
    pld_for_gaussian, prv_epsilon, rdp_epsilon, CompositionInput, MechanismSpec, PrivacyBudget,
    DEFAULT_GRID_SPACING,
};
use selectpt_core::classifier::{
    build_train_set, featurize, train_dp, ClassifierModel, DpTrainConfig, FeaturizerConfig,
    NoiseSetting,
};
use selectpt_core::diagnostics::{overlap_count, top_k_terms, TermFrequencyTable};
use selectpt_core::lm::{
    finetune_dp, windows, Example, FinetuneConfig, LmConfig, ToyLmModel,
};
use selectpt_core::optim::{clip_per_example, AdamState, CounterRng, GradientBatch};
use selectpt_core::pipeline::{run, validate, Mode, Severity};
use selectpt_core::selection::{
    random_baseline, score_corpus, select_top, ScoredSequence, SelectionResult, Sequence,
};

fn report(number: u32, name: &str, outcome: Result<String, String>) {
    match outcome {
        Ok(detail) => println!("ACCEPTANCE {number} ({name}): PASS — {detail}"),
        Err(detail) => {
            println!("ACCEPTANCE {number} ({name}): FAIL — {detail}");
            panic!("acceptance criterion {number} failed: {detail}");
        }
    }
}

#[test]
fn criterion_01_accountant_matches_analytic_gaussian() {
    let started = Instant::now();
    let outcome = (|| {
        let mut worst: f64 = 0.0;
        for &sigma in &[0.5, 1.0, 2.0, 4.0] {
            let pld = pld_for_gaussian(sigma, DEFAULT_GRID_SPACING)
                .map_err(|e| format!("pld build failed: {e}"))?;
            for &delta in &[1e-5, 1e-7] {
                let got = epsilon_at_delta(&pld, delta)
                    .map_err(|e| format!("epsilon query failed: {e}"))?;
                let oracle = analytic_gaussian_epsilon(sigma, delta);
                let rel = (got - oracle).abs() / oracle;
                worst = worst.max(rel);
                if rel > 0.01 {
                    return Err(format!(
                        "sigma={sigma} delta={delta}: epsilon {got:.6} vs analytic {oracle:.6} \
                         (relative error {rel:.4} > 0.01)"
                    ));
                }
            }
        }
        let elapsed = started.elapsed();
        if elapsed.as_secs_f64() >= 10.0 {
            return Err(format!("runtime {elapsed:?} exceeds 10 s"));
        }
        Ok(format!(
            "8 (sigma, delta) points within 1% of the closed form; worst relative error \
             {worst:.5}; runtime {elapsed:.2?}"
        ))
    })();
    report(1, "accountant vs analytic oracle", outcome);
}

#[test]
fn criterion_02_noise_multiplier_reproduction() {
    let started = Instant::now();
    let outcome = (|| {
        let target = PrivacyBudget::new(7.3, 1e-7).unwrap();
        let standard = calibrate_noise(&target, 0.03, 1000)
            .map_err(|e| format!("standard calibration failed: {e}"))?;
        if !(0.95..=1.05).contains(&standard) {
            return Err(format!("standard sigma {standard:.4} outside [0.95, 1.05]"));
        }
        // selection stage: 3 epochs over the 6x-augmented set at q = 0.005
        let selective = calibrate_noise_joint(&target, (0.005, 600), (0.03, 1000))
            .map_err(|e| format!("joint calibration failed: {e}"))?;
        if !(0.98..=1.08).contains(&selective) {
            return Err(format!(
                "selective sigma {selective:.4} outside 1.03 +/- 0.05"
            ));
        }
        if selective < standard {
            return Err(format!(
                "selective sigma {selective:.4} below standard {standard:.4}"
            ));
        }
        let elapsed = started.elapsed();
        if elapsed.as_secs_f64() >= 60.0 {
            return Err(format!("runtime {elapsed:?} exceeds 1 min"));
        }
        Ok(format!(
            "standard sigma {standard:.4} (reference 1.00), selective sigma {selective:.4} \
             (reference 1.03); runtime {elapsed:.2?}"
        ))
    })();
    report(2, "noise-multiplier reproduction", outcome);
}

#[test]
fn criterion_03_prv_never_exceeds_rdp() {
    let outcome = (|| {
        let sigmas = [0.6, 0.8, 1.0, 1.3, 1.7, 2.2, 3.0, 4.0];
        let rates = [0.01, 0.03, 0.1, 0.3, 1.0];
        let step_counts = [1u32, 10, 100];
        let deltas = [1e-5, 1e-7];
        let mut compared = 0usize;
        let mut violations = Vec::new();
        for &sigma in &sigmas {
            for &q in &rates {
                for &steps in &step_counts {
                    let spec = MechanismSpec::new(sigma, q, steps).unwrap();
                    for &delta in &deltas {
                        // skip corners past the grid range; both routes agree
                        // the budget is enormous there
                        let Ok(rdp) = rdp_epsilon(&spec, delta) else {
                            continue;
                        };
                        if rdp > 20.0 {
                            continue;
                        }
                        let Ok(prv) = prv_epsilon(&spec, delta) else {
                            continue;
                        };
                        compared += 1;
                        if prv > rdp {
                            violations.push(format!(
                                "sigma={sigma} q={q} T={steps} delta={delta}: \
                                 prv {prv:.4} > rdp {rdp:.4}"
                            ));
                        }
                    }
                }
            }
        }
        if compared < 100 {
            return Err(format!("only {compared} tuples compared, need >= 100"));
        }
        if !violations.is_empty() {
            return Err(format!(
                "{} violations out of {compared}: {}",
                violations.len(),
                violations.join("; ")
            ));
        }
        Ok(format!("PRV <= RDP on all {compared} tuples, zero violations"))
    })();
    report(3, "cross-accountant dominance", outcome);
}

#[test]
fn criterion_04_composition_identity() {
    let outcome = (|| {
        let spacing = 1e-4;
        let delta = 1e-6;
        let sigma = 2.0;
        let mut details = Vec::new();
        for &k in &[2u32, 4, 16] {
            let step = pld_for_gaussian(sigma, spacing).unwrap();
            let composed = compose_pld(&step, k).map_err(|e| format!("k={k}: {e}"))?;
            let eps_composed =
                epsilon_at_delta(&composed, delta).map_err(|e| format!("k={k}: {e}"))?;
            let effective = sigma / f64::from(k).sqrt();
            let single = pld_for_gaussian(effective, spacing).unwrap();
            let eps_single =
                epsilon_at_delta(&single, delta).map_err(|e| format!("k={k}: {e}"))?;
            let rel = (eps_composed - eps_single).abs() / eps_single;
            if rel > 0.02 {
                return Err(format!(
                    "k={k}: composed epsilon {eps_composed:.5} vs sigma/sqrt(k) epsilon \
                     {eps_single:.5} (relative error {rel:.4} > 0.02)"
                ));
            }
            details.push(format!("k={k} rel {rel:.5}"));
        }
        Ok(format!(
            "k-fold composition matches sigma/sqrt(k) within 2% ({})",
            details.join(", ")
        ))
    })();
    report(4, "composition identity", outcome);
}

#[test]
fn criterion_05_disabled_path_equals_vanilla_adam() {
    let outcome = (|| {
        let config = LmConfig {
            vocab_size: 30,
            embedding_dim: 8,
            window: 3,
            hidden_dim: 8,
        };
        let mut rng = CounterRng::substream(5, "criterion5-data", 0);
        let sequences: Vec<Vec<u32>> = (0..8)
            .map(|_| (0..8).map(|_| rng.next_below(30) as u32).collect())
            .collect();
        let examples = windows(&sequences, config.window);
        assert!(examples.len() >= 40);

        let learning_rate = 1e-3;
        let mut dp_model = ToyLmModel::init(config, 7).unwrap();
        let mut vanilla = dp_model.clone();

        // DP path: sigma = 0, C = 1e9, q = 1 makes every Poisson batch the
        // full set; 200 epochs at q = 1 is 200 steps
        let outcome = finetune_dp(
            &mut dp_model,
            &examples,
            &FinetuneConfig {
                epochs: 200,
                sampling_rate: 1.0,
                clip_norm: 1e9,
                learning_rate,
                seed: 7,
                noise: NoiseSetting::Fixed {
                    noise_multiplier: 0.0,
                    delta: 1e-6,
                },
            },
        )
        .map_err(|e| format!("dp path failed: {e}"))?;
        if outcome.steps != 200 {
            return Err(format!("expected 200 dp steps, got {}", outcome.steps));
        }

        // reference: plain full-batch Adam on the mean gradient
        let dim = vanilla.params().len();
        let mut adam = AdamState::new(dim, learning_rate).unwrap();
        for _ in 0..200 {
            let mut mean = vec![0.0; dim];
            for ex in &examples {
                let (_, g) = vanilla.loss_gradient(ex).unwrap();
                for (m, gi) in mean.iter_mut().zip(&g) {
                    *m += gi;
                }
            }
            for m in mean.iter_mut() {
                *m /= examples.len() as f64;
            }
            let delta = adam.step(&mean, vanilla.params()).unwrap();
            for (p, d) in vanilla.params_mut().iter_mut().zip(&delta) {
                *p += d;
            }
        }

        let mut worst: f64 = 0.0;
        for (a, b) in dp_model.params().iter().zip(vanilla.params()) {
            let rel = (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
            worst = worst.max(rel);
        }
        if worst > 1e-9 {
            return Err(format!(
                "final parameters diverge: worst relative difference {worst:.3e} > 1e-9"
            ));
        }
        Ok(format!(
            "200 steps with sigma=0, C=1e9 match vanilla Adam; worst relative difference \
             {worst:.3e}"
        ))
    })();
    report(5, "disabled-path equivalence", outcome);
}

#[test]
fn criterion_06_clipping_property_suite() {
    let outcome = (|| {
        let mut rng = CounterRng::substream(6, "criterion6", 0);
        let mut clipped_count = 0usize;
        for batch_index in 0..10_000u64 {
            let dim = 1 + rng.next_below(8) as usize;
            let batch_size = 1 + rng.next_below(6) as usize;
            let clip_norm = 0.1 + 5.0 * rng.next_unit();
            let mut per_example = Vec::with_capacity(batch_size);
            for i in 0..batch_size {
                if i == 0 && batch_index % 7 == 0 {
                    per_example.push(vec![0.0; dim]); // zero vector must survive
                } else {
                    let scale = 10f64.powf(3.0 * rng.next_unit() - 1.5);
                    per_example.push((0..dim).map(|_| scale * rng.next_gaussian()).collect());
                }
            }
            let batch = GradientBatch::new(per_example.clone()).unwrap();
            let clipped = clip_per_example(&batch, clip_norm)
                .map_err(|e| format!("batch {batch_index}: {e}"))?;
            for (orig, clip) in per_example.iter().zip(clipped.examples()) {
                let norm_before: f64 = orig.iter().map(|x| x * x).sum::<f64>().sqrt();
                let norm_after: f64 = clip.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm_after > clip_norm * (1.0 + 1e-12) {
                    return Err(format!(
                        "batch {batch_index}: post-clip norm {norm_after} > C {clip_norm}"
                    ));
                }
                if norm_before == 0.0 {
                    if clip.iter().any(|&x| x != 0.0) {
                        return Err(format!("batch {batch_index}: zero vector disturbed"));
                    }
                    continue;
                }
                if norm_before <= clip_norm {
                    if clip != orig {
                        return Err(format!(
                            "batch {batch_index}: in-norm gradient was modified"
                        ));
                    }
                    continue;
                }
                clipped_count += 1;
                let dot: f64 = orig.iter().zip(clip).map(|(a, b)| a * b).sum();
                let cosine = dot / (norm_before * norm_after);
                if (cosine - 1.0).abs() > 1e-9 {
                    return Err(format!(
                        "batch {batch_index}: direction changed, cosine {cosine}"
                    ));
                }
            }
        }
        Ok(format!(
            "10000 random batches: norms bounded, direction preserved on {clipped_count} \
             clipped gradients, zero vectors untouched"
        ))
    })();
    report(6, "clipping property suite", outcome);
}

fn max_rel_gradient_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-3))
        .fold(0.0, f64::max)
}

#[test]
fn criterion_07_gradient_checks() {
    let outcome = (|| {
        let h = 1e-5;
        let mut checked = 0usize;
        let mut worst: f64 = 0.0;

        // classifier: 6 linear + 6 one-hidden-layer instances
        for instance in 0..12u64 {
            let hidden = if instance < 6 { 0 } else { 3 };
            let featurizer = FeaturizerConfig {
                hash_bits: 6,
                bigrams: true,
            };
            let mut rng = CounterRng::substream(70, "criterion7-clf", instance);
            let text: String = (0..6)
                .map(|_| format!("w{}", rng.next_below(40)))
                .collect::<Vec<_>>()
                .join(" ");
            let fv = featurize(&text, &featurizer);
            let label = f64::from(instance % 2 == 0);
            let mut model = ClassifierModel::init(6, hidden, 700 + instance);
            let analytic = model.loss_gradient(&fv, label);
            let mut numeric = vec![0.0; analytic.len()];
            for i in 0..numeric.len() {
                let saved = model.params()[i];
                model.params_mut()[i] = saved + h;
                let up = model.mean_loss(&[(&fv, label)]);
                model.params_mut()[i] = saved - h;
                let down = model.mean_loss(&[(&fv, label)]);
                model.params_mut()[i] = saved;
                numeric[i] = (up - down) / (2.0 * h);
            }
            let rel = max_rel_gradient_error(&analytic, &numeric);
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!(
                    "classifier instance {instance} (hidden {hidden}): relative error \
                     {rel:.2e} > 1e-4"
                ));
            }
            checked += 1;
        }

        // toy LM: 12 random small instances
        for instance in 0..12u64 {
            let config = LmConfig {
                vocab_size: 12,
                embedding_dim: 3,
                window: 2 + (instance % 2) as usize,
                hidden_dim: 4,
            };
            let mut rng = CounterRng::substream(71, "criterion7-lm", instance);
            let ex = Example {
                context: (0..config.window)
                    .map(|_| rng.next_below(12) as u32)
                    .collect(),
                target: rng.next_below(12) as u32,
            };
            let mut model = ToyLmModel::init(config, 710 + instance).unwrap();
            let (_, analytic) = model.loss_gradient(&ex).unwrap();
            let mut numeric = vec![0.0; analytic.len()];
            for i in 0..numeric.len() {
                let saved = model.params()[i];
                model.params_mut()[i] = saved + h;
                let up = model.loss(&ex).unwrap();
                model.params_mut()[i] = saved - h;
                let down = model.loss(&ex).unwrap();
                model.params_mut()[i] = saved;
                numeric[i] = (up - down) / (2.0 * h);
            }
            let rel = max_rel_gradient_error(&analytic, &numeric);
            worst = worst.max(rel);
            if rel > 1e-4 {
                return Err(format!(
                    "lm instance {instance}: relative error {rel:.2e} > 1e-4"
                ));
            }
            checked += 1;
        }

        if checked < 20 {
            return Err(format!("only {checked} instances checked, need >= 20"));
        }
        Ok(format!(
            "{checked} random instances within 1e-4 of central differences; worst relative \
             error {worst:.2e}"
        ))
    })();
    report(7, "gradient checks", outcome);
}

fn oracle_select(scored: &[ScoredSequence], budget: u64) -> SelectionResult {
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| match b.score.partial_cmp(&a.score).unwrap() {
        Ordering::Equal => a.sequence_id.cmp(&b.sequence_id),
        other => other,
    });
    let mut total = 0u64;
    let mut take = 0usize;
    for s in &sorted {
        total += s.token_count;
        take += 1;
        if total >= budget {
            break;
        }
    }
    sorted.truncate(take);
    SelectionResult {
        cutoff_score: sorted.last().map_or(0.0, |s| s.score),
        selected_ids: sorted.iter().map(|s| s.sequence_id).collect(),
        total_tokens: total,
        budget,
        budget_exceeds_corpus: total < budget,
    }
}

#[test]
fn criterion_08_selection_oracle_equivalence() {
    let outcome = (|| {
        let mut rng = CounterRng::substream(8, "criterion8", 0);
        for case in 0..100u64 {
            let n = 1 + rng.next_below(10_000) as usize;
            let mut corpus = Vec::with_capacity(n);
            let mut total_tokens = 0u64;
            for id in 0..n as u64 {
                // coarse score grid so ties are common
                let score = rng.next_below(50) as f64 / 49.0;
                let token_count = 1 + rng.next_below(40);
                total_tokens += token_count;
                corpus.push(ScoredSequence {
                    sequence_id: id,
                    score,
                    token_count,
                });
            }
            let budget = match case % 3 {
                0 => 1 + total_tokens / 10,
                1 => 1 + total_tokens / 2,
                _ => total_tokens + 100, // exceeds the corpus
            };
            let streaming = select_top(corpus.iter().copied(), budget)
                .map_err(|e| format!("case {case}: {e}"))?;
            let oracle = oracle_select(&corpus, budget);
            let lhs = serde_json::to_string(&streaming).unwrap();
            let rhs = serde_json::to_string(&oracle).unwrap();
            if lhs != rhs {
                return Err(format!(
                    "case {case} (n={n}, budget={budget}): streaming output differs from \
                     sort-and-prefix"
                ));
            }
        }
        Ok("streaming select_top byte-identical to sort-and-prefix on 100 random corpora"
            .to_string())
    })();
    report(8, "selection oracle equivalence", outcome);
}

#[test]
fn criterion_09_end_to_end_benefit() {
    let started = Instant::now();
    let outcome = (|| {
        let dir = tempfile::tempdir().unwrap();
        let mut selective_wins = 0usize;
        let mut random_beats_none = 0usize;
        let mut selective_beats_none = 0usize;
        let mut rows = Vec::new();
        for seed in 0..10u64 {
            let bench = mixture_benchmark(seed, 0.10);
            write_texts(&dir.path().join("target.jsonl"), &bench.target, 0);
            write_texts(&dir.path().join("source.jsonl"), &bench.source, 10_000);
            assert_eq!(bench.source_tokens, 30_000);

            let mut ppl = std::collections::HashMap::new();
            for mode in [Mode::Selective, Mode::Random, Mode::NoPretrain] {
                let mut config = benchmark_config(dir.path(), seed);
                config.mode = mode;
                config.output_dir = dir.path().join(format!("out-{seed}-{mode:?}"));
                let report = run(&config).map_err(|e| format!("seed {seed} {mode:?}: {e}"))?;
                if report.failed {
                    return Err(format!(
                        "seed {seed} {mode:?} failed: {}",
                        report.error.unwrap_or_default()
                    ));
                }
                let eval = report
                    .eval
                    .ok_or_else(|| format!("seed {seed} {mode:?}: no eval metrics"))?;
                ppl.insert(format!("{mode:?}"), eval.perplexity);
            }
            let sel = ppl["Selective"];
            let rnd = ppl["Random"];
            let none = ppl["NoPretrain"];
            if sel < rnd {
                selective_wins += 1;
            }
            if sel < none {
                selective_beats_none += 1;
            }
            if rnd < none {
                random_beats_none += 1;
            }
            rows.push(format!("seed {seed}: sel {sel:.1} rnd {rnd:.1} none {none:.1}"));
        }
        let elapsed = started.elapsed();
        if selective_wins < 9 {
            return Err(format!(
                "selective < random in only {selective_wins}/10 runs ({})",
                rows.join("; ")
            ));
        }
        if selective_beats_none < 10 || random_beats_none < 10 {
            return Err(format!(
                "pretraining beat no-pretrain in {selective_beats_none}/10 (selective) and \
                 {random_beats_none}/10 (random) runs ({})",
                rows.join("; ")
            ));
        }
        if elapsed.as_secs_f64() >= 900.0 {
            return Err(format!("runtime {elapsed:?} exceeds 15 min"));
        }
        Ok(format!(
            "selective < random in {selective_wins}/10 runs, both beat no-pretrain 10/10; \
             runtime {elapsed:.1?}; {}",
            rows.join("; ")
        ))
    })();
    report(9, "end-to-end framework benefit", outcome);
}

#[test]
fn criterion_10_diagnostics_direction() {
    let outcome = (|| {
        let mut successes = 0usize;
        for trial in 0..100u64 {
            let tgt_chain = MarkovChain::new("tgt", 150, 3, 50_000 + trial);
            let bg_chain = MarkovChain::new("bg", 300, 5, 60_000 + trial);
            let mut rng = CounterRng::substream(trial, "criterion10-corpora", 0);
            let target: Vec<String> =
                (0..60).map(|_| tgt_chain.sample(15, &mut rng)).collect();
            let mut source_texts = Vec::with_capacity(600);
            for _ in 0..600 {
                source_texts.push(if rng.next_unit() < 0.10 {
                    tgt_chain.sample(15, &mut rng)
                } else {
                    bg_chain.sample(15, &mut rng)
                });
            }
            let corpus: Vec<Sequence> = source_texts
                .iter()
                .enumerate()
                .map(|(i, t)| Sequence::from_text(i as u64, t.clone()))
                .collect();

            let featurizer = FeaturizerConfig {
                hash_bits: 12,
                bigrams: true,
            };
            let train_set = build_train_set(&target, &source_texts, &featurizer, trial)
                .map_err(|e| format!("trial {trial}: {e}"))?;
            let trained = train_dp(
                &train_set,
                &featurizer,
                &DpTrainConfig {
                    epochs: 3,
                    sampling_rate: 0.1,
                    clip_norm: 1.0,
                    learning_rate: 0.1,
                    hidden: 0,
                    seed: trial,
                    noise: NoiseSetting::Fixed {
                        noise_multiplier: 1.0,
                        delta: 1e-6,
                    },
                },
            )
            .map_err(|e| format!("trial {trial}: {e}"))?;

            let scored = score_corpus(&trained.model, &featurizer, &corpus, 1);
            let budget = 900; // 10% of the 9000-token source
            let selected = select_top(scored.iter().copied(), budget)
                .map_err(|e| format!("trial {trial}: {e}"))?;
            let random = random_baseline(&scored, budget, trial)
                .map_err(|e| format!("trial {trial}: {e}"))?;

            let texts_for = |result: &SelectionResult| -> Vec<String> {
                result
                    .selected_ids
                    .iter()
                    .map(|&id| source_texts[id as usize].clone())
                    .collect()
            };
            let top = |texts: &[String]| {
                let table =
                    TermFrequencyTable::from_texts(texts.iter().map(String::as_str), &[]);
                top_k_terms(&table, 100)
            };
            let target_top = top(&target);
            let selected_top = top(&texts_for(&selected));
            let random_top = top(&texts_for(&random));
            if overlap_count(&target_top, &selected_top)
                >= overlap_count(&target_top, &random_top)
            {
                successes += 1;
            }
        }
        if successes < 95 {
            return Err(format!(
                "selected overlap beat random in only {successes}/100 trials, need >= 95"
            ));
        }
        Ok(format!(
            "overlap(target, selected) >= overlap(target, random) in {successes}/100 trials \
             at k=100"
        ))
    })();
    report(10, "diagnostics direction", outcome);
}

#[test]
fn criterion_11_privacy_bookkeeping() {
    let outcome = (|| {
        let dir = tempfile::tempdir().unwrap();
        let bench = mixture_benchmark(0, 0.10);
        write_texts(&dir.path().join("target.jsonl"), &bench.target, 0);
        write_texts(&dir.path().join("source.jsonl"), &bench.source, 10_000);
        let mut config = benchmark_config(dir.path(), 0);
        config.pretrain_steps = 40; // bookkeeping only; keep the run short
        let run_report = run(&config).map_err(|e| format!("pipeline run failed: {e}"))?;
        if run_report.failed {
            return Err(format!(
                "pipeline run failed: {}",
                run_report.error.unwrap_or_default()
            ));
        }

        let stage1 = run_report.stage1.ok_or("missing stage1 report")?;
        let stage2 = run_report.stage2.ok_or("missing stage2 report")?;
        let total = run_report.total.ok_or("missing total report")?;
        let (recomposed, rule) = advanced_compose(&CompositionInput {
            stage1: PrivacyBudget::new(stage1.epsilon, stage1.delta).unwrap(),
            stage2: PrivacyBudget::new(stage2.epsilon, stage2.delta).unwrap(),
            delta_slack: config.delta_slack,
        })
        .map_err(|e| format!("recomposition failed: {e}"))?;
        if total.epsilon != recomposed.epsilon() || total.delta != recomposed.delta() {
            return Err(format!(
                "report total ({}, {}) != advanced_compose of stages ({}, {})",
                total.epsilon,
                total.delta,
                recomposed.epsilon(),
                recomposed.delta()
            ));
        }
        if total.rule != rule {
            return Err(format!(
                "report rule {:?} != recomposed rule {rule:?}",
                total.rule
            ));
        }

        // validate must reject budgets violating delta > delta1 + delta2
        let mut bad = config.clone();
        bad.delta1 = 0.6 * bad.total_delta;
        bad.delta2 = 0.6 * bad.total_delta;
        let findings = validate(&bad);
        if !findings.iter().any(|f| {
            f.severity == Severity::Error && f.message.contains("exceeds total delta")
        }) {
            return Err("validate accepted delta1 + delta2 + slack > total delta".into());
        }
        let mut no_slack = config.clone();
        no_slack.delta_slack = 0.0;
        if !validate(&no_slack)
            .iter()
            .any(|f| f.severity == Severity::Error && f.message.contains("delta_slack"))
        {
            return Err("validate accepted zero delta slack".into());
        }
        Ok(format!(
            "report total ({:.4}, {:.1e}) bit-identical to advanced_compose of stage budgets \
             ({:.4}, {:.1e}) + ({:.4}, {:.1e}); delta constraint enforced by validate",
            total.epsilon,
            total.delta,
            stage1.epsilon,
            stage1.delta,
            stage2.epsilon,
            stage2.delta
        ))
    })();
    report(11, "privacy bookkeeping", outcome);
}
