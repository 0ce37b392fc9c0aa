//! Desk-scale ablations on the synthetic knowledge base.
//!
//! One suite per seed: a base LM pre-trained on the KB text, an IT and an
//! RA-IT model tuned from it, and an LSR-tuned query encoder. Arms pair one
//! of the LMs with one of the retrievers and are evaluated over a grid of
//! `(task, k, shots)` cells.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{build_plain_prompt, ensemble_choice, ensemble_generate, plain_choice};
use crate::harness::synth::{generate_synthetic_kb, Split, SynthConfig, SyntheticKb};
use crate::harness::{
    accuracy, build_query, exact_match, render_eval_prompt, select_shots, token_f1, EvalExample, FewShotConfig, Metric,
    Shot, TaskSpec,
};
use crate::lm::{checkpoint, AdamConfig, LanguageModel, ModelConfig, PromptLm, Vocabulary};
use crate::lm_finetune::{
    train, InstancePool, MixtureSpec, Mode, SourceKind, TrainConfig, TrainLog,
};
use crate::retriever::{checkpoint as rcheckpoint, EmbeddingIndex, RetrievalContext, Retriever};
use crate::retriever_finetune::{lsr_train, precompute_supervision, LSRExample, LsrConfig, LsrLog, LsrNorm};

/// Markers the LM sees in prompts, added to the vocabulary.
pub const PROMPT_WORDS: &str = "Background: Q: A: Question: Answer: Summarize this article: A. B. C. D. E. F.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervisor {
    Base,
    RaIt,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub retriever_dim: usize,
    pub pretrain: TrainConfig,
    pub it: TrainConfig,
    pub ra_it: TrainConfig,
    pub k_tilde: usize,
    pub unsupervised_fraction: f64,
    /// Dev questions scored during instruction tuning when `eval_every > 0`.
    pub dev_limit: usize,
    pub lsr: LsrConfig,
    pub lsr_k: usize,
    pub lsr_supervisor: Supervisor,
    /// Evaluation examples per task (the rest are skipped).
    pub eval_limit: usize,
    pub max_new_tokens: usize,
    pub choices: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let tune = TrainConfig {
            steps: 2000,
            batch_size: 16,
            peak_lr: 3e-3,
            end_lr: 3e-4,
            warmup: 50,
            eval_every: 0,
            seed: 0,
            adam: AdamConfig::default(),
        };
        Self {
            synth: SynthConfig {
                entities: 3000,
                pretrain_fraction: 0.0,
                name_words: 3,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                vocab_size: 0,
                window: 64,
                width: 64,
                layers: 2,
                heads: 2,
                ffn: 256,
            },
            retriever_dim: 64,
            pretrain: TrainConfig { steps: 300, ..tune.clone() },
            it: tune.clone(),
            ra_it: tune,
            k_tilde: 1,
            unsupervised_fraction: 0.10,
            dev_limit: 50,
            lsr: LsrConfig {
                steps: 300,
                lr: 3e-3,
                ..LsrConfig::default()
            },
            lsr_k: 10,
            lsr_supervisor: Supervisor::RaIt,
            eval_limit: 2500,
            max_new_tokens: 4,
            choices: 4,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = Vec::new();
        let mut put = |k: &str, v: String| out.push((k.to_string(), v));
        put("entities", self.synth.entities.to_string());
        put("dev", self.synth.dev.to_string());
        put("test", self.synth.test.to_string());
        put("distractors", self.synth.distractors.to_string());
        put("relations", self.synth.relations.to_string());
        put("pretrain_fraction", self.synth.pretrain_fraction.to_string());
        put("name_words", self.synth.name_words.to_string());
        put("values", self.synth.values.to_string());
        put("window", self.model.window.to_string());
        put("width", self.model.width.to_string());
        put("layers", self.model.layers.to_string());
        put("heads", self.model.heads.to_string());
        put("ffn", self.model.ffn.to_string());
        put("retriever_dim", self.retriever_dim.to_string());
        for (name, t) in [("pretrain", &self.pretrain), ("it", &self.it), ("ra_it", &self.ra_it)] {
            put(&format!("{name}_steps"), t.steps.to_string());
            put(&format!("{name}_batch"), t.batch_size.to_string());
            put(&format!("{name}_lr"), t.peak_lr.to_string());
            put(&format!("{name}_end_lr"), t.end_lr.to_string());
            put(&format!("{name}_warmup"), t.warmup.to_string());
            put(&format!("{name}_eval_every"), t.eval_every.to_string());
        }
        put("k_tilde", self.k_tilde.to_string());
        put("unsupervised_fraction", self.unsupervised_fraction.to_string());
        put("dev_limit", self.dev_limit.to_string());
        put("lsr_steps", self.lsr.steps.to_string());
        put("lsr_batch", self.lsr.batch_size.to_string());
        put("lsr_lr", self.lsr.lr.to_string());
        put("lsr_tau", self.lsr.tau.to_string());
        put(
            "lsr_norm",
            match self.lsr.norm {
                LsrNorm::Sequence => "seq",
                LsrNorm::PerToken => "tok",
                LsrNorm::Auto => "auto",
            }
            .to_string(),
        );
        put("lsr_eval_every", self.lsr.eval_every.to_string());
        put("lsr_keep_best", self.lsr.keep_best.to_string());
        put("lsr_k", self.lsr_k.to_string());
        put(
            "lsr_supervisor",
            match self.lsr_supervisor {
                Supervisor::Base => "base",
                Supervisor::RaIt => "ra_it",
            }
            .to_string(),
        );
        put("eval_limit", self.eval_limit.to_string());
        put("max_new_tokens", self.max_new_tokens.to_string());
        put("choices", self.choices.to_string());
        out
    }

    /// Sets one key; unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        if let Some((name, field)) = key.split_once('_').filter(|(n, _)| matches!(*n, "pretrain" | "it" | "ra")) {
            let (name, field) = if name == "ra" {
                match field.strip_prefix("it_") {
                    Some(f) => ("ra_it", f),
                    None => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
            } else {
                (name, field)
            };
            if !(name == "pretrain" && field == "fraction") {
                let t = match name {
                    "pretrain" => &mut self.pretrain,
                    "it" => &mut self.it,
                    _ => &mut self.ra_it,
                };
                match field {
                    "steps" => t.steps = parse(key, v)?,
                    "batch" => t.batch_size = parse(key, v)?,
                    "lr" => t.peak_lr = parse(key, v)?,
                    "end_lr" => t.end_lr = parse(key, v)?,
                    "warmup" => t.warmup = parse(key, v)?,
                    "eval_every" => t.eval_every = parse(key, v)?,
                    _ => return Err(Error::Config(format!("unknown key {key:?}"))),
                }
                return Ok(());
            }
        }
        match key {
            "entities" => self.synth.entities = parse(key, v)?,
            "dev" => self.synth.dev = parse(key, v)?,
            "test" => self.synth.test = parse(key, v)?,
            "distractors" => self.synth.distractors = parse(key, v)?,
            "relations" => self.synth.relations = parse(key, v)?,
            "pretrain_fraction" => self.synth.pretrain_fraction = parse(key, v)?,
            "name_words" => self.synth.name_words = parse(key, v)?,
            "values" => self.synth.values = parse(key, v)?,
            "window" => self.model.window = parse(key, v)?,
            "width" => self.model.width = parse(key, v)?,
            "layers" => self.model.layers = parse(key, v)?,
            "heads" => self.model.heads = parse(key, v)?,
            "ffn" => self.model.ffn = parse(key, v)?,
            "retriever_dim" => self.retriever_dim = parse(key, v)?,
            "k_tilde" => self.k_tilde = parse(key, v)?,
            "unsupervised_fraction" => self.unsupervised_fraction = parse(key, v)?,
            "dev_limit" => self.dev_limit = parse(key, v)?,
            "lsr_steps" => self.lsr.steps = parse(key, v)?,
            "lsr_batch" => self.lsr.batch_size = parse(key, v)?,
            "lsr_lr" => self.lsr.lr = parse(key, v)?,
            "lsr_tau" => self.lsr.tau = parse(key, v)?,
            "lsr_norm" => self.lsr.norm = v.parse::<LsrNorm>()?,
            "lsr_eval_every" => self.lsr.eval_every = parse(key, v)?,
            "lsr_keep_best" => self.lsr.keep_best = parse(key, v)?,
            "lsr_k" => self.lsr_k = parse(key, v)?,
            "lsr_supervisor" => {
                self.lsr_supervisor = match v {
                    "base" => Supervisor::Base,
                    "ra_it" => Supervisor::RaIt,
                    _ => return Err(Error::Config(format!("{key}: expected base or ra_it, got {v:?}"))),
                }
            }
            "eval_limit" => self.eval_limit = parse(key, v)?,
            "max_new_tokens" => self.max_new_tokens = parse(key, v)?,
            "choices" => self.choices = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Short digest of the full configuration.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            h.update(format!("{k}={v}\n"));
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        // The vocabulary size is only known once the KB exists.
        ModelConfig { vocab_size: 1, ..self.model }.validate()?;
        if self.retriever_dim == 0 || self.k_tilde == 0 || self.lsr_k == 0 || self.max_new_tokens == 0 {
            return Err(Error::Config("retriever_dim, k_tilde, lsr_k and max_new_tokens must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unsupervised_fraction) {
            return Err(Error::Config("unsupervised_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Vocabulary covering the KB and the prompt markers.
pub fn build_vocabulary(kb: &SyntheticKb) -> Vocabulary {
    let mut texts = kb.texts();
    texts.push(PROMPT_WORDS.to_string());
    Vocabulary::build(texts.iter().map(String::as_str), usize::MAX)
}

fn pretrain_pool(kb: &SyntheticKb, vocab: &Vocabulary, window: usize) -> Result<InstancePool> {
    InstancePool::from_lines("pretrain", &kb.pretrain, vocab, window)
}

/// Base LM trained on the KB pre-training text alone.
pub fn pretrain(kb: &SyntheticKb, vocab: &Vocabulary, config: &ExperimentConfig, seed: u64) -> Result<(LanguageModel, TrainLog)> {
    let model = LanguageModel::new(vocab.clone(), config.model, seed)?;
    let pool = pretrain_pool(kb, vocab, config.model.window)?;
    let tc = TrainConfig {
        seed,
        ..config.pretrain.clone()
    };
    train(model, &[pool], &MixtureSpec::default(), &tc, None)
}

/// Dev-set EM with the final evaluation protocol, used for early stopping.
fn dev_scorer<'a>(
    kb: &'a SyntheticKb,
    ctx: RetrievalContext<'a>,
    config: &'a ExperimentConfig,
) -> impl FnMut(&LanguageModel) -> Result<f64> + 'a {
    let spec = TaskSpec::short_generation(crate::harness::synth::TASK_NAME);
    let mut dev = kb.eval_examples(Split::Dev);
    dev.truncate(config.dev_limit);
    move |lm: &LanguageModel| {
        let setup = EvalSetup {
            lm,
            retrieval: Some(ctx),
            k: config.lsr_k,
            shots: &[],
            max_new_tokens: config.max_new_tokens,
        };
        Ok(evaluate(&spec, &dev, &setup)?.value)
    }
}

/// IT (`Mode::It`) or RA-IT (`Mode::RaIt`) tuning from the base model.
pub fn instruction_tune(
    base: &LanguageModel,
    kb: &SyntheticKb,
    ctx: RetrievalContext,
    mode: Mode,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(LanguageModel, TrainLog)> {
    let window = config.model.window;
    let pools = [
        InstancePool::from_tasks(
            crate::harness::synth::TASK_NAME,
            SourceKind::Task,
            &kb.task_examples(Split::Train),
            &base.vocab,
            Some(&ctx),
            config.k_tilde,
            mode,
            window,
            seed ^ 0x51ed,
        )?,
        pretrain_pool(kb, &base.vocab, window)?,
    ];
    let spec = MixtureSpec {
        unsupervised_fraction: config.unsupervised_fraction,
        ..MixtureSpec::default()
    };
    let tc = match mode {
        Mode::It => &config.it,
        Mode::RaIt => &config.ra_it,
    };
    let tc = TrainConfig { seed, ..tc.clone() };
    let mut scorer = dev_scorer(kb, ctx, config);
    let eval: Option<&mut crate::lm_finetune::Evaluator> = if tc.eval_every > 0 { Some(&mut scorer) } else { None };
    train(base.clone(), &pools, &spec, &tc, eval)
}

/// LSR tuning of the query encoder on the training questions, validated
/// by MRR on the dev questions.
pub fn tune_retriever(
    kb: &SyntheticKb,
    ctx: RetrievalContext,
    supervisor: &LanguageModel,
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Retriever, LsrLog)> {
    let to_lsr = |split| {
        kb.task_examples(split)
            .iter()
            .map(LSRExample::from_task)
            .collect::<Result<Vec<_>>>()
    };
    let train_ex = to_lsr(Split::Train)?;
    let mut dev_ex = to_lsr(Split::Dev)?;
    dev_ex.truncate(config.dev_limit.max(1));
    let train_b = precompute_supervision(&train_ex, &ctx, supervisor, config.lsr_k, None)?;
    let dev_b = precompute_supervision(&dev_ex, &ctx, supervisor, config.lsr_k, None)?;
    let lc = LsrConfig {
        seed,
        ..config.lsr.clone()
    };
    lsr_train(ctx.retriever.clone(), ctx.index, &train_b, &dev_b, &lc)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub pretrain_loss: f64,
    pub it_loss: f64,
    pub ra_it_loss: f64,
    pub it_best_step: usize,
    pub ra_it_best_step: usize,
    pub lsr_mrr: Vec<(usize, f64)>,
    pub lsr_best_step: usize,
    pub seconds: Vec<(String, f64)>,
}

/// Everything one seed of the experiment trains.
#[derive(Debug, Clone)]
pub struct Suite {
    pub seed: u64,
    pub kb: SyntheticKb,
    pub retriever: Retriever,
    pub rft_retriever: Retriever,
    pub index: EmbeddingIndex,
    pub base_lm: LanguageModel,
    pub it_lm: LanguageModel,
    pub ra_it_lm: LanguageModel,
    pub report: SuiteReport,
}

const SUITE_FILES: [&str; 6] = ["retriever.bin", "retriever_rft.bin", "index.bin", "lm_base.bin", "lm_it.bin", "lm_ra_it.bin"];

/// Trains the full suite for one seed.
pub fn prepare_suite(config: &ExperimentConfig, seed: u64) -> Result<Suite> {
    config.validate()?;
    let mut report = SuiteReport::default();
    let mut clock = Instant::now();
    let mut lap = |name: &str, report: &mut SuiteReport| {
        report.seconds.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };
    let kb = generate_synthetic_kb(&config.synth, seed)?;
    let vocab = build_vocabulary(&kb);
    let retriever = Retriever::new(vocab.clone(), config.retriever_dim, seed)?;
    let index = EmbeddingIndex::build(&retriever, &kb.store)?;
    let ctx = RetrievalContext::new(&retriever, &index, &kb.store)?;

    let (base_lm, log) = pretrain(&kb, &vocab, config, seed)?;
    report.pretrain_loss = log.recent_loss(50);
    lap("pretrain", &mut report);
    let (it_lm, log) = instruction_tune(&base_lm, &kb, ctx, Mode::It, config, seed)?;
    report.it_loss = log.recent_loss(50);
    report.it_best_step = log.best_step;
    lap("it", &mut report);
    let (ra_it_lm, log) = instruction_tune(&base_lm, &kb, ctx, Mode::RaIt, config, seed)?;
    report.ra_it_loss = log.recent_loss(50);
    report.ra_it_best_step = log.best_step;
    lap("ra_it", &mut report);
    let supervisor = match config.lsr_supervisor {
        Supervisor::Base => &base_lm,
        Supervisor::RaIt => &ra_it_lm,
    };
    let (rft_retriever, lsr_log) = tune_retriever(&kb, ctx, supervisor, config, seed)?;
    report.lsr_mrr = lsr_log.mrr;
    report.lsr_best_step = lsr_log.best_step;
    lap("lsr", &mut report);
    Ok(Suite {
        seed,
        kb,
        retriever,
        rft_retriever,
        index,
        base_lm,
        it_lm,
        ra_it_lm,
        report,
    })
}

impl Suite {
    /// Writes the trained checkpoints; the KB itself is regenerated from
    /// the config and seed on load.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let paths: Vec<PathBuf> = SUITE_FILES.iter().map(|f| dir.join(f)).collect();
        rcheckpoint::save(&self.retriever, &paths[0])?;
        rcheckpoint::save(&self.rft_retriever, &paths[1])?;
        self.index.save(&paths[2])?;
        checkpoint::save(&self.base_lm, &paths[3])?;
        checkpoint::save(&self.it_lm, &paths[4])?;
        checkpoint::save(&self.ra_it_lm, &paths[5])?;
        Ok(paths)
    }

    pub fn load(dir: &Path, config: &ExperimentConfig, seed: u64) -> Result<Self> {
        let paths: Vec<PathBuf> = SUITE_FILES.iter().map(|f| dir.join(f)).collect();
        if let Some(p) = paths.iter().find(|p| !p.exists()) {
            return Err(Error::ArtifactMissing(p.clone()));
        }
        let kb = generate_synthetic_kb(&config.synth, seed)?;
        Ok(Self {
            seed,
            kb,
            retriever: rcheckpoint::load(&paths[0])?,
            rft_retriever: rcheckpoint::load(&paths[1])?,
            index: EmbeddingIndex::load(&paths[2])?,
            base_lm: checkpoint::load(&paths[3])?,
            it_lm: checkpoint::load(&paths[4])?,
            ra_it_lm: checkpoint::load(&paths[5])?,
            report: SuiteReport::default(),
        })
    }
}

/// An LM paired with a retriever.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Pre-trained LM, untuned retriever.
    Base,
    /// Instruction-tuned LM without retrieval in training.
    It,
    /// Retrieval-augmented instruction tuning only (LM-ft).
    RaIt,
    /// Pre-trained LM with the LSR-tuned retriever (R-ft).
    RFt,
    /// Both tuned.
    RaDit,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::Base, Arm::It, Arm::RaIt, Arm::RFt, Arm::RaDit];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Base => "base",
            Arm::It => "it",
            Arm::RaIt => "ra_it",
            Arm::RFt => "r_ft",
            Arm::RaDit => "ra_dit",
        }
    }

    pub fn lm(self, suite: &Suite) -> &LanguageModel {
        match self {
            Arm::Base | Arm::RFt => &suite.base_lm,
            Arm::It => &suite.it_lm,
            Arm::RaIt | Arm::RaDit => &suite.ra_it_lm,
        }
    }

    pub fn retriever(self, suite: &Suite) -> &Retriever {
        match self {
            Arm::RFt | Arm::RaDit => &suite.rft_retriever,
            _ => &suite.retriever,
        }
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthTask {
    /// Short-answer generation, exact match.
    Qa,
    /// Multiple choice over same-relation values, accuracy.
    Choice,
}

impl SynthTask {
    pub fn spec(self) -> TaskSpec {
        match self {
            SynthTask::Qa => TaskSpec::short_generation("synth_qa"),
            SynthTask::Choice => TaskSpec::multi_choice("synth_mc"),
        }
    }

    fn examples(self, kb: &SyntheticKb, split: Split, config: &ExperimentConfig) -> Result<Vec<EvalExample>> {
        match self {
            SynthTask::Qa => Ok(kb.eval_examples(split)),
            SynthTask::Choice => kb.choice_examples(split, config.choices, kb.seed),
        }
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synth_qa" => Ok(SynthTask::Qa),
            "synth_mc" => Ok(SynthTask::Choice),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

/// One evaluation cell. `k = 0` evaluates closed-book.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub arm: Arm,
    pub task: SynthTask,
    pub k: usize,
    pub shots: usize,
}

/// Grids by name: `table3` (IT and RA-IT at k = 1, 3, 10), `table4` (the
/// four tuning arms at k = 10), `closed_book`, `shots`, `all` and `empty`.
/// A comma-separated list concatenates grids.
pub fn named_grid(name: &str) -> Result<Vec<GridCell>> {
    let mut out = Vec::new();
    let qa = |arm, k, shots| GridCell {
        arm,
        task: SynthTask::Qa,
        k,
        shots,
    };
    for part in name.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "empty" => {}
            "table3" => {
                for arm in [Arm::It, Arm::RaIt] {
                    for k in [1, 3, 10] {
                        out.push(qa(arm, k, 0));
                    }
                }
            }
            "table4" => {
                for arm in [Arm::Base, Arm::RFt, Arm::RaIt, Arm::RaDit] {
                    out.push(qa(arm, 10, 0));
                }
            }
            "closed_book" => {
                for arm in [Arm::Base, Arm::It, Arm::RaIt] {
                    out.push(qa(arm, 0, 0));
                }
            }
            "shots" => {
                for arm in [Arm::It, Arm::RaIt] {
                    out.push(qa(arm, 1, 2));
                }
            }
            "choice" => {
                for arm in [Arm::Base, Arm::It, Arm::RaIt, Arm::RaDit] {
                    out.push(GridCell {
                        arm,
                        task: SynthTask::Choice,
                        k: 10,
                        shots: 0,
                    });
                }
            }
            "all" => out.extend(named_grid("table3,table4,closed_book,shots,choice")?),
            _ => return Err(Error::Config(format!("unknown grid {part:?}"))),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub arm: String,
    pub task: String,
    pub k: usize,
    pub shots: usize,
    pub metric: String,
    /// Percentage points.
    pub value: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub struct EvalSetup<'a> {
    pub lm: &'a LanguageModel,
    /// `None` or `k = 0` evaluates without retrieval.
    pub retrieval: Option<RetrievalContext<'a>>,
    pub k: usize,
    pub shots: &'a [Shot<'a>],
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    /// Mean metric in percentage points.
    pub value: f64,
    pub predictions: Vec<String>,
    pub per_example: Vec<f64>,
}

/// Scores `examples` under one setup with retrieval fusion.
pub fn evaluate(spec: &TaskSpec, examples: &[EvalExample], setup: &EvalSetup) -> Result<EvalOutcome> {
    let lm = setup.lm;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut per_example = Vec::with_capacity(examples.len());
    for e in examples {
        e.validate()?;
        let rendered = render_eval_prompt(spec, e, setup.shots)?;
        let fewshot = rendered.fewshot_refs();
        let retrieved = match setup.retrieval {
            Some(ctx) if setup.k > 0 => Some(ctx.top_k(&build_query(spec, e)?, setup.k)?),
            _ => None,
        };
        let prediction = match &e.choices {
            Some(choices) => {
                let choices: Vec<&str> = choices.iter().map(String::as_str).collect();
                let r = match &retrieved {
                    Some(r) => ensemble_choice(lm, &choices, &rendered.prompt, r, &fewshot, spec.scorer)?,
                    None => {
                        let reserve = choices.iter().map(|c| lm.answer_len(c)).max().unwrap_or(0);
                        let (prompt, _) = build_plain_prompt(lm, &rendered.prompt, &fewshot, reserve)?;
                        plain_choice(lm, &choices, &prompt, spec.scorer)?
                    }
                };
                r.winner_text().to_string()
            }
            None => match &retrieved {
                Some(r) => match ensemble_generate(lm, &rendered.prompt, r, &fewshot, setup.max_new_tokens) {
                    Ok(m) => m.winner_text().to_string(),
                    Err(Error::EmptyGeneration) => String::new(),
                    Err(err) => return Err(err),
                },
                None => {
                    let (prompt, _) = build_plain_prompt(lm, &rendered.prompt, &fewshot, setup.max_new_tokens)?;
                    lm.generate(&prompt, setup.max_new_tokens)?.text.trim().to_string()
                }
            },
        };
        let score = match spec.metric {
            Metric::ExactMatch | Metric::Accuracy => exact_match(&prediction, &e.golds),
            Metric::TokenF1 => token_f1(&prediction, &e.golds),
        };
        predictions.push(prediction);
        per_example.push(score);
    }
    Ok(EvalOutcome {
        value: 100.0 * accuracy(&per_example),
        predictions,
        per_example,
    })
}

/// Evaluates every grid cell on the test split of the suite.
pub fn run_grid(suite: &Suite, grid: &[GridCell], config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    let hash = config.hash();
    let mut rows = Vec::with_capacity(grid.len());
    for cell in grid {
        let spec = cell.task.spec();
        let mut test = cell.task.examples(&suite.kb, Split::Test, config)?;
        test.truncate(config.eval_limit);
        let train = cell.task.examples(&suite.kb, Split::Train, config)?;
        let retriever = cell.arm.retriever(suite);
        let ctx = RetrievalContext::new(retriever, &suite.index, &suite.kb.store)?;
        let chosen = select_shots(
            &train,
            &test,
            &FewShotConfig {
                n_shots: cell.shots,
                seed: suite.seed,
            },
        )?;
        let shots = chosen
            .into_iter()
            .map(|e| {
                let background = if cell.k > 0 {
                    let top = ctx.top_k(&build_query(&spec, e)?, 1)?;
                    Some(top[0].chunk.text.clone())
                } else {
                    None
                };
                Ok(Shot { example: e, background })
            })
            .collect::<Result<Vec<_>>>()?;
        let setup = EvalSetup {
            lm: cell.arm.lm(suite),
            retrieval: Some(ctx),
            k: cell.k,
            shots: &shots,
            max_new_tokens: config.max_new_tokens,
        };
        let outcome = evaluate(&spec, &test, &setup)?;
        rows.push(ResultRow {
            arm: cell.arm.name().to_string(),
            task: spec.name.clone(),
            k: cell.k,
            shots: cell.shots,
            metric: spec.metric.name().to_string(),
            value: outcome.value,
            seed: suite.seed,
            config_hash: hash.clone(),
        });
    }
    Ok(rows)
}

pub fn rows_to_jsonl(rows: &[ResultRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("rows serialize") + "\n")
        .collect()
}

pub fn rows_from_jsonl(text: &str) -> Result<Vec<ResultRow>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format("results", format!("line {}: {e}", i + 1))))
        .collect()
}

/// Mean value of matching rows across seeds.
pub fn mean_value(rows: &[ResultRow], arm: Arm, task: &str, k: usize, shots: usize) -> Option<f64> {
    let v: Vec<f64> = rows
        .iter()
        .filter(|r| r.arm == arm.name() && r.task == task && r.k == k && r.shots == shots)
        .map(|r| r.value)
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Human-readable table of seed-averaged values.
pub fn summary(rows: &[ResultRow]) -> String {
    let mut keys: Vec<(String, String, usize, usize, String)> = Vec::new();
    for r in rows {
        let key = (r.task.clone(), r.arm.clone(), r.k, r.shots, r.metric.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:<8} {:>3} {:>5} {:<12} {:>7} {:>5}  config", "task", "arm", "k", "shots", "metric", "mean", "seeds");
    for (task, arm, k, shots, metric) in keys {
        let matching: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| r.task == task && r.arm == arm && r.k == k && r.shots == shots)
            .collect();
        let mean = matching.iter().map(|r| r.value).sum::<f64>() / matching.len() as f64;
        let seeds: Vec<String> = matching.iter().map(|r| r.seed.to_string()).collect();
        let hashes: Vec<&str> = matching.iter().map(|r| r.config_hash.as_str()).collect();
        let mut hashes_unique = hashes.clone();
        hashes_unique.dedup();
        let _ = writeln!(
            out,
            "{task:<10} {arm:<8} {k:>3} {shots:>5} {metric:<12} {mean:>7.2} {:>5}  {}",
            seeds.join(","),
            hashes_unique.join(",")
        );
    }
    out
}
