//! Pipeline orchestration: budget split, DP classifier training, selection,
//! pre-training, DP fine-tuning, diagnostics, and a composed privacy report.
//!
//! Stages run sequentially; all randomness flows from one master seed via
//! labeled substreams. The total privacy spend is computed and checked
//! against the configured cap before any private computation starts.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::accounting::{
    advanced_compose, prv_epsilon, prv_epsilon_stages, AccountingError, CompositionInput,
    CompositionRule, MechanismSpec, PrivacyBudget,
};
use crate::classifier::{
    build_train_set, train_dp, ClassifierError, DpTrainConfig, FeaturizerConfig, NoiseSetting,
};
use crate::diagnostics::{diagnostics_report, DiagnosticsReport, FUNCTION_WORDS};
use crate::lm::{
    evaluate, finetune_dp, pretrain, windows, EvalMetrics, FinetuneConfig, LmConfig, LmError,
    PretrainSchedule, ToyLmModel, Vocabulary,
};
use crate::optim::CounterRng;
use crate::selection::{
    random_baseline, read_corpus, score_corpus, select_top, write_corpus, SelectionError,
    SelectionResult, Sequence,
};

/// Environment variable capping worker threads for parallel scoring.
pub const THREADS_ENV: &str = "SELECTPT_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("config invalid:\n{}", .0.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Finding>),
    #[error("privacy over-spend: computed total ({computed:.4}, {computed_delta:.3e}) exceeds cap ({cap:.4}, {cap_delta:.3e})")]
    BudgetExceeded {
        computed: f64,
        computed_delta: f64,
        cap: f64,
        cap_delta: f64,
    },
    #[error("output directory is locked by another run: {0}")]
    Locked(PathBuf),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Execution mode; selects the pre-training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Selective,
    Random,
    FullSource,
    NoPretrain,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "selective" => Ok(Self::Selective),
            "random" => Ok(Self::Random),
            "full-source" => Ok(Self::FullSource),
            "no-pretrain" => Ok(Self::NoPretrain),
            other => Err(format!(
                "unknown mode {other:?} (expected selective | random | full-source | no-pretrain)"
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub target_corpus: PathBuf,
    pub source_corpus: PathBuf,
    pub output_dir: PathBuf,

    pub total_epsilon: f64,
    pub total_delta: f64,
    /// Fraction of the epsilon mass assigned to the selection stage.
    pub split: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta_slack: f64,
    pub token_budget: u64,

    pub classifier_hash_bits: u8,
    pub classifier_hidden: u32,
    pub classifier_epochs: u32,
    pub classifier_sampling_rate: f64,
    pub classifier_clip_norm: f64,
    pub classifier_learning_rate: f64,

    pub lm_embedding_dim: usize,
    pub lm_window: usize,
    pub lm_hidden_dim: usize,
    pub lm_vocab_size: usize,
    pub lm_min_count: u64,
    pub pretrain_steps: u32,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
    pub finetune_epochs: u32,
    pub finetune_sampling_rate: f64,
    pub finetune_clip_norm: f64,
    pub finetune_learning_rate: f64,

    pub mode: Mode,
    pub seed: u64,
    pub eval_holdout: f64,
    pub diagnostics_k: usize,
}

/// Severity of a validation finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

impl std::fmt::Display for Finding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}", self.message)
    }
}

fn err(message: impl Into<String>) -> Finding {
    Finding {
        severity: Severity::Error,
        message: message.into(),
    }
}

fn warn(message: impl Into<String>) -> Finding {
    Finding {
        severity: Severity::Warning,
        message: message.into(),
    }
}

/// Parse the flat key-value config format: `[section]` headers, `key = value`
/// lines, `#`/`;` comments. Unknown keys are an error; missing non-path keys
/// fall back to defaults.
pub fn parse_config(text: &str) -> Result<PipelineConfig, PipelineError> {
    let mut section = String::new();
    let mut map: HashMap<String, String> = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            section = name.trim().to_string();
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(PipelineError::Parse(format!(
                "line {}: expected `key = value`, got {line:?}",
                lineno + 1
            )));
        };
        let full = format!("{section}.{}", key.trim());
        if map
            .insert(full.clone(), value.trim().to_string())
            .is_some()
        {
            return Err(PipelineError::Parse(format!(
                "line {}: duplicate key {full}",
                lineno + 1
            )));
        }
    }

    let mut take = |key: &str| map.remove(key);
    fn parse<T: std::str::FromStr>(key: &str, value: Option<String>, default: T) -> Result<T, PipelineError>
    where
        T::Err: std::fmt::Display,
    {
        match value {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| PipelineError::Parse(format!("key {key}: {e}"))),
        }
    }
    fn require(key: &str, value: Option<String>) -> Result<String, PipelineError> {
        value.ok_or_else(|| PipelineError::Parse(format!("missing required key {key}")))
    }

    let total_delta: f64 = parse("budget.delta", take("budget.delta"), 1e-6)?;
    let config = PipelineConfig {
        target_corpus: require("paths.target_corpus", take("paths.target_corpus"))?.into(),
        source_corpus: require("paths.source_corpus", take("paths.source_corpus"))?.into(),
        output_dir: require("paths.output_dir", take("paths.output_dir"))?.into(),
        total_epsilon: parse("budget.epsilon", take("budget.epsilon"), 7.3)?,
        total_delta,
        split: parse("budget.split", take("budget.split"), 0.1)?,
        delta1: parse("budget.delta1", take("budget.delta1"), 0.4 * total_delta)?,
        delta2: parse("budget.delta2", take("budget.delta2"), 0.4 * total_delta)?,
        delta_slack: parse(
            "budget.delta_slack",
            take("budget.delta_slack"),
            0.2 * total_delta,
        )?,
        token_budget: parse("budget.token_budget", take("budget.token_budget"), 10_000)?,
        classifier_hash_bits: parse(
            "classifier.hash_bits",
            take("classifier.hash_bits"),
            18,
        )?,
        classifier_hidden: parse("classifier.hidden", take("classifier.hidden"), 0)?,
        classifier_epochs: parse("classifier.epochs", take("classifier.epochs"), 3)?,
        classifier_sampling_rate: parse(
            "classifier.sampling_rate",
            take("classifier.sampling_rate"),
            0.005,
        )?,
        classifier_clip_norm: parse(
            "classifier.clip_norm",
            take("classifier.clip_norm"),
            1.0,
        )?,
        classifier_learning_rate: parse(
            "classifier.learning_rate",
            take("classifier.learning_rate"),
            0.1,
        )?,
        lm_embedding_dim: parse("lm.embedding_dim", take("lm.embedding_dim"), 32)?,
        lm_window: parse("lm.window", take("lm.window"), 8)?,
        lm_hidden_dim: parse("lm.hidden_dim", take("lm.hidden_dim"), 128)?,
        lm_vocab_size: parse("lm.vocab_size", take("lm.vocab_size"), 8192)?,
        lm_min_count: parse("lm.min_count", take("lm.min_count"), 1)?,
        pretrain_steps: parse("lm.pretrain_steps", take("lm.pretrain_steps"), 500)?,
        pretrain_batch: parse("lm.pretrain_batch", take("lm.pretrain_batch"), 32)?,
        pretrain_learning_rate: parse(
            "lm.pretrain_learning_rate",
            take("lm.pretrain_learning_rate"),
            3e-3,
        )?,
        finetune_epochs: parse("lm.finetune_epochs", take("lm.finetune_epochs"), 4)?,
        finetune_sampling_rate: parse(
            "lm.finetune_sampling_rate",
            take("lm.finetune_sampling_rate"),
            0.05,
        )?,
        finetune_clip_norm: parse(
            "lm.finetune_clip_norm",
            take("lm.finetune_clip_norm"),
            1.0,
        )?,
        finetune_learning_rate: parse(
            "lm.finetune_learning_rate",
            take("lm.finetune_learning_rate"),
            1e-3,
        )?,
        mode: parse("run.mode", take("run.mode"), Mode::Selective)?,
        seed: parse("run.seed", take("run.seed"), 0)?,
        eval_holdout: parse("run.eval_holdout", take("run.eval_holdout"), 0.2)?,
        diagnostics_k: parse("run.diagnostics_k", take("run.diagnostics_k"), 100)?,
    };
    if let Some(stray) = map.keys().next() {
        return Err(PipelineError::Parse(format!("unknown key {stray}")));
    }
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<PipelineConfig, PipelineError> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Schema, path, and budget-arithmetic checks; no side effects. An empty
/// result means the config is runnable.
pub fn validate(config: &PipelineConfig) -> Vec<Finding> {
    let mut findings = Vec::new();
    for (label, path) in [
        ("target_corpus", &config.target_corpus),
        ("source_corpus", &config.source_corpus),
    ] {
        if !path.is_file() {
            findings.push(err(format!("{label} not found: {}", path.display())));
        }
    }
    if !config.total_epsilon.is_finite() || config.total_epsilon <= 0.0 {
        findings.push(err(format!(
            "total epsilon must be positive, got {}",
            config.total_epsilon
        )));
    }
    if !(0.0..1.0).contains(&config.total_delta) || config.total_delta <= 0.0 {
        findings.push(err(format!(
            "total delta must lie in (0, 1), got {}",
            config.total_delta
        )));
    }
    if !(config.split > 0.0 && config.split < 1.0) {
        findings.push(err(format!("split must lie in (0, 1), got {}", config.split)));
    }
    if config.delta_slack <= 0.0 {
        findings.push(err(
            "delta_slack must be strictly positive (the composition theorem needs slack)",
        ));
    }
    for (label, d) in [("delta1", config.delta1), ("delta2", config.delta2)] {
        if d < 0.0 || !d.is_finite() {
            findings.push(err(format!("{label} must be nonnegative, got {d}")));
        }
    }
    if config.delta1 + config.delta2 + config.delta_slack > config.total_delta {
        findings.push(err(format!(
            "delta1 + delta2 + delta_slack = {:.3e} exceeds total delta {:.3e}",
            config.delta1 + config.delta2 + config.delta_slack,
            config.total_delta
        )));
    }
    if config.token_budget == 0 {
        findings.push(err("token_budget must be at least 1"));
    }
    for (label, q) in [
        ("classifier.sampling_rate", config.classifier_sampling_rate),
        ("lm.finetune_sampling_rate", config.finetune_sampling_rate),
    ] {
        if !(q > 0.0 && q <= 1.0) {
            findings.push(err(format!("{label} must lie in (0, 1], got {q}")));
        }
    }
    if !(0.0..0.9).contains(&config.eval_holdout) {
        findings.push(err(format!(
            "eval_holdout must lie in [0, 0.9), got {}",
            config.eval_holdout
        )));
    }
    if config.diagnostics_k == 0 {
        findings.push(err("diagnostics_k must be at least 1"));
    }
    if config.classifier_hash_bits > 24 {
        findings.push(warn(format!(
            "hash_bits = {} makes a very large dense model",
            config.classifier_hash_bits
        )));
    }
    findings
}

/// One private stage as reported.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub epsilon: f64,
    pub delta: f64,
    pub noise_multiplier: f64,
    pub sampling_rate: f64,
    pub steps: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TotalBudgetReport {
    pub epsilon: f64,
    pub delta: f64,
    pub rule: CompositionRule,
    /// Joint loss-distribution composition of the two stages at the total
    /// delta; usually tighter than the closed-form theorem.
    pub joint_prv_epsilon: Option<f64>,
    pub tighter: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: Mode,
    pub seed: u64,
    pub config_hash: String,
    pub stage1: Option<StageReport>,
    pub stage2: Option<StageReport>,
    pub total: Option<TotalBudgetReport>,
    pub selection: Option<SelectionResult>,
    pub diagnostics: Option<DiagnosticsReport>,
    pub eval: Option<EvalMetrics>,
    pub failed: bool,
    pub error: Option<String>,
}

fn config_hash(config: &PipelineConfig) -> String {
    // FNV-1a over the canonical JSON form
    let json = serde_json::to_string(config).unwrap_or_default();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Worker-thread cap from the environment, default 4.
pub fn worker_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(4)
}

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(".selectpt.lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(PipelineError::Locked(path))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn write_report_atomic(dir: &Path, report: &RunReport) -> Result<(), PipelineError> {
    let tmp = dir.join("report.json.tmp");
    let file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
    serde_json::to_writer_pretty(file, report).map_err(std::io::Error::other)?;
    std::fs::rename(&tmp, dir.join("report.json"))?;
    Ok(())
}

/// Pre-computed privacy plan: calibrated noise for both stages plus the
/// composed totals, checked against the cap before anything private runs.
pub struct PrivacyPlan {
    pub stage1: Option<(MechanismSpec, PrivacyBudget)>,
    pub stage2: (MechanismSpec, PrivacyBudget),
    pub total: TotalBudgetReport,
}

/// Split the budget, calibrate both stages, and verify the composed total
/// stays within the cap. `classifier_steps`/`finetune_steps` come from the
/// corpus sizes and epoch counts.
pub fn plan_privacy(
    config: &PipelineConfig,
    with_selection_stage: bool,
) -> Result<PrivacyPlan, PipelineError> {
    let cap = PrivacyBudget::new(config.total_epsilon, config.total_delta)?;
    let eps1 = config.split * config.total_epsilon;
    let eps2 = config.total_epsilon - eps1;

    let classifier_steps =
        MechanismSpec::steps_for_epochs(config.classifier_epochs, config.classifier_sampling_rate);
    let finetune_steps =
        MechanismSpec::steps_for_epochs(config.finetune_epochs, config.finetune_sampling_rate);

    let stage1 = if with_selection_stage {
        let target = PrivacyBudget::new(eps1, config.delta1)?;
        let sigma = crate::accounting::calibrate_noise(
            &target,
            config.classifier_sampling_rate,
            classifier_steps,
        )?;
        let spec = MechanismSpec::new(sigma, config.classifier_sampling_rate, classifier_steps)?;
        let achieved = prv_epsilon(&spec, config.delta1)?;
        Some((spec, PrivacyBudget::new(achieved, config.delta1)?))
    } else {
        None
    };

    let target2 = PrivacyBudget::new(eps2, config.delta2)?;
    let sigma2 = crate::accounting::calibrate_noise(
        &target2,
        config.finetune_sampling_rate,
        finetune_steps,
    )?;
    let spec2 = MechanismSpec::new(sigma2, config.finetune_sampling_rate, finetune_steps)?;
    let achieved2 = prv_epsilon(&spec2, config.delta2)?;
    let stage2 = (spec2, PrivacyBudget::new(achieved2, config.delta2)?);

    let zero = PrivacyBudget::new(0.0, 0.0)?;
    let (composed, rule) = advanced_compose(&CompositionInput {
        stage1: stage1.as_ref().map_or(zero, |(_, b)| *b),
        stage2: stage2.1,
        delta_slack: config.delta_slack,
    })?;

    let joint_prv_epsilon = match &stage1 {
        None => None,
        Some((spec1, _)) => Some(prv_epsilon_stages(&[*spec1, spec2], config.total_delta)?),
    };
    let tighter = match joint_prv_epsilon {
        Some(j) if j < composed.epsilon() => "joint_prv",
        Some(_) => "theorem1",
        None => "theorem1",
    }
    .to_string();

    if composed.epsilon() > cap.epsilon() * (1.0 + 1e-9)
        || composed.delta() > cap.delta() * (1.0 + 1e-9)
    {
        return Err(PipelineError::BudgetExceeded {
            computed: composed.epsilon(),
            computed_delta: composed.delta(),
            cap: cap.epsilon(),
            cap_delta: cap.delta(),
        });
    }

    Ok(PrivacyPlan {
        stage1,
        stage2,
        total: TotalBudgetReport {
            epsilon: composed.epsilon(),
            delta: composed.delta(),
            rule,
            joint_prv_epsilon,
            tighter,
        },
    })
}

fn stage_report(spec: &MechanismSpec, budget: &PrivacyBudget) -> StageReport {
    StageReport {
        epsilon: budget.epsilon(),
        delta: budget.delta(),
        noise_multiplier: spec.noise_multiplier,
        sampling_rate: spec.sampling_rate,
        steps: spec.steps,
    }
}

/// Execute the configured mode end to end. The report is written atomically
/// to `output_dir/report.json` even when a stage fails (marked failed).
pub fn run(config: &PipelineConfig) -> Result<RunReport, PipelineError> {
    let findings = validate(config);
    if findings.iter().any(|f| f.severity == Severity::Error) {
        return Err(PipelineError::Invalid(findings));
    }
    let _lock = LockGuard::acquire(&config.output_dir)?;
    let mut report = RunReport {
        mode: config.mode,
        seed: config.seed,
        config_hash: config_hash(config),
        stage1: None,
        stage2: None,
        total: None,
        selection: None,
        diagnostics: None,
        eval: None,
        failed: false,
        error: None,
    };
    match run_stages(config, &mut report) {
        Ok(()) => {
            write_report_atomic(&config.output_dir, &report)?;
            Ok(report)
        }
        Err(e) => {
            report.failed = true;
            report.error = Some(e.to_string());
            write_report_atomic(&config.output_dir, &report)?;
            Err(e)
        }
    }
}

fn run_stages(config: &PipelineConfig, report: &mut RunReport) -> Result<(), PipelineError> {
    let target = read_corpus(&config.target_corpus)?;
    let source = read_corpus(&config.source_corpus)?;
    if target.is_empty() || source.is_empty() {
        return Err(PipelineError::Parse("empty corpus".into()));
    }

    // budget check happens before anything private
    let plan = plan_privacy(config, config.mode == Mode::Selective)?;
    if let Some((spec, budget)) = &plan.stage1 {
        report.stage1 = Some(stage_report(spec, budget));
    }
    report.stage2 = Some(stage_report(&plan.stage2.0, &plan.stage2.1));
    report.total = Some(plan.total.clone());

    let featurizer = FeaturizerConfig {
        hash_bits: config.classifier_hash_bits,
        bigrams: true,
    };
    let target_texts: Vec<String> = target.iter().map(|s| s.text.clone()).collect();
    let source_texts: Vec<String> = source.iter().map(|s| s.text.clone()).collect();

    // pre-training corpus per mode
    let pretrain_seqs: Option<Vec<&Sequence>> = match config.mode {
        Mode::NoPretrain => None,
        Mode::FullSource => Some(source.iter().collect()),
        Mode::Random => {
            // no classifier: neutral scores, uniform shuffle does the work
            let scored: Vec<crate::selection::ScoredSequence> = source
                .iter()
                .map(|s| crate::selection::ScoredSequence {
                    sequence_id: s.id,
                    score: 0.5,
                    token_count: s.token_count,
                })
                .collect();
            let result = random_baseline(&scored, config.token_budget, config.seed)?;
            let picked = materialize(&source, &result.selected_ids);
            report.selection = Some(result);
            Some(picked)
        }
        Mode::Selective => {
            let (spec1, _) = plan.stage1.as_ref().expect("selective mode plans stage 1");
            let train_set = build_train_set(&target_texts, &source_texts, &featurizer, config.seed)?;
            let outcome = train_dp(
                &train_set,
                &featurizer,
                &DpTrainConfig {
                    epochs: config.classifier_epochs,
                    sampling_rate: config.classifier_sampling_rate,
                    clip_norm: config.classifier_clip_norm,
                    learning_rate: config.classifier_learning_rate,
                    hidden: config.classifier_hidden,
                    seed: config.seed,
                    noise: NoiseSetting::Fixed {
                        noise_multiplier: spec1.noise_multiplier,
                        delta: config.delta1,
                    },
                },
            )?;
            let scored = score_corpus(&outcome.model, &featurizer, &source, worker_threads());
            let result = select_top(scored, config.token_budget)?;
            let picked = materialize(&source, &result.selected_ids);
            report.selection = Some(result);
            Some(picked)
        }
    };

    // diagnostics on raw text
    let selected_texts: Option<Vec<String>> = pretrain_seqs
        .as_ref()
        .map(|seqs| seqs.iter().map(|s| s.text.clone()).collect());
    report.diagnostics = Some(diagnostics_report(
        &target_texts,
        &source_texts,
        selected_texts.as_deref(),
        config.diagnostics_k,
        FUNCTION_WORDS,
    ));
    if let Some(seqs) = &pretrain_seqs {
        let owned: Vec<Sequence> = seqs.iter().map(|s| (*s).clone()).collect();
        write_corpus(&config.output_dir.join("selected.jsonl"), &owned)?;
    }

    // shared vocabulary: built once from target + source so every mode
    // evaluates under identical token ids
    let vocab = Vocabulary::build(
        target_texts
            .iter()
            .chain(source_texts.iter())
            .map(String::as_str),
        config.lm_min_count,
        config.lm_vocab_size,
    )?;
    vocab.save(&config.output_dir.join("vocab.json"))?;
    let lm_config = LmConfig {
        vocab_size: vocab.size(),
        embedding_dim: config.lm_embedding_dim,
        window: config.lm_window,
        hidden_dim: config.lm_hidden_dim,
    };
    let mut model = ToyLmModel::init(lm_config, config.seed)?;

    if let Some(seqs) = &pretrain_seqs {
        let encoded: Vec<Vec<u32>> = seqs.iter().map(|s| vocab.encode(&s.text)).collect();
        let examples = windows(&encoded, config.lm_window);
        pretrain(
            &mut model,
            &examples,
            &PretrainSchedule {
                steps: config.pretrain_steps,
                batch_size: config.pretrain_batch,
                learning_rate: config.pretrain_learning_rate,
                seed: config.seed,
            },
        )?;
    }

    // deterministic per-sequence eval holdout, identical across modes
    let mut train_seqs = Vec::new();
    let mut eval_seqs = Vec::new();
    for seq in &target {
        let mut rng = CounterRng::substream(config.seed, "eval-split", seq.id);
        if rng.next_unit() < config.eval_holdout {
            eval_seqs.push(vocab.encode(&seq.text));
        } else {
            train_seqs.push(vocab.encode(&seq.text));
        }
    }
    if eval_seqs.is_empty() {
        eval_seqs = train_seqs.clone();
    }
    let train_examples = windows(&train_seqs, config.lm_window);
    let eval_examples = windows(&eval_seqs, config.lm_window);

    let outcome = finetune_dp(
        &mut model,
        &train_examples,
        &FinetuneConfig {
            epochs: config.finetune_epochs,
            sampling_rate: config.finetune_sampling_rate,
            clip_norm: config.finetune_clip_norm,
            learning_rate: config.finetune_learning_rate,
            seed: config.seed,
            noise: NoiseSetting::Fixed {
                noise_multiplier: plan.stage2.0.noise_multiplier,
                delta: config.delta2,
            },
        },
    )?;
    debug_assert_eq!(outcome.steps, plan.stage2.0.steps);
    model.save(&config.output_dir.join("model.bin"))?;

    report.eval = Some(evaluate(&model, &eval_examples)?);
    Ok(())
}

fn materialize<'a>(source: &'a [Sequence], ids: &[u64]) -> Vec<&'a Sequence> {
    let by_id: HashMap<u64, &Sequence> = source.iter().map(|s| (s.id, s)).collect();
    ids.iter().filter_map(|id| by_id.get(id).copied()).collect()
}
