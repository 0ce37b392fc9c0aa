use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use ralab_core::corpus::{build_store, ChunkStore, Document, WordLimits, WEB_MAX_WORDS, WIKI_MAX_WORDS};
use ralab_core::fusion::{ensemble_choice, ensemble_generate, plain_choice, build_plain_prompt};
use ralab_core::harness::config::load_experiment_config;
use ralab_core::harness::experiment::{
    evaluate, named_grid, prepare_suite, rows_to_jsonl, run_grid, summary, EvalSetup, ExperimentConfig, ResultRow,
    Suite, PROMPT_WORDS,
};
use ralab_core::harness::synth::generate_synthetic_kb;
use ralab_core::harness::{
    build_query, from_task_example, select_shots, subsample, EvalExample, FewShotConfig, Shot,
    TaskSpec,
};
use ralab_core::lm::vocab::DEFAULT_VOCAB_CAP;
use ralab_core::lm::{checkpoint, LanguageModel, PromptLm, Scorer, Vocabulary};
use ralab_core::lm_finetune::{
    load_task_file, query_text, train, Category, Evaluator, FTExample, InstancePool, MixtureSpec, Mode, SourceKind,
    TrainConfig,
};
use ralab_core::retriever::{checkpoint as rcheckpoint, EmbeddingIndex, RetrievalContext, Retriever};
use ralab_core::retriever_finetune::{lsr_train, make_corpus_examples, precompute_supervision, LSRExample, LsrConfig};
use serde::Serialize;

use crate::{
    BuildIndexArgs, Cli, Command, EvalArgs, ExperimentArgs, GenerateArgs, InferArgs, IngestArgs, InitRetrieverArgs,
    RetrievalArgs, SearchArgs, TrainLmArgs, TrainMode, TrainRetrieverArgs,
};

struct Env {
    seed: u64,
    out_dir: PathBuf,
    config: ExperimentConfig,
}

impl Env {
    /// Relative output paths land in the output directory.
    fn out(&self, p: &Path) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir).with_context(|| format!("creating {}", self.out_dir.display()))?;
        Ok(if p.is_absolute() { p.to_path_buf() } else { self.out_dir.join(p) })
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => load_experiment_config(p)?,
        None => ExperimentConfig::default(),
    };
    let env = Env {
        seed: cli.seed,
        out_dir: cli.out_dir,
        config,
    };
    match cli.command {
        Command::Ingest(a) => ingest(&env, a),
        Command::InitRetriever(a) => init_retriever(&env, a),
        Command::BuildIndex(a) => build_index(&env, a),
        Command::TrainLm(a) => train_lm(&env, a),
        Command::TrainRetriever(a) => train_retriever(&env, a),
        Command::Search(a) => search(a),
        Command::Infer(a) => infer(&env, a),
        Command::Generate(a) => generate(a),
        Command::Eval(a) => eval(&env, a),
        Command::SynthKb => synth_kb(&env),
        Command::Experiment(a) => experiment(&env, a),
    }
}

fn ingest(env: &Env, a: IngestArgs) -> Result<()> {
    let mut docs = Vec::new();
    for path in &a.inputs {
        let file = fs::File::open(path).with_context(|| format!("reading {}", path.display()))?;
        for line in BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let doc = match line.split_once('\t') {
                Some((source, text)) => Document::new(source, text),
                None => Document::new(a.source.as_str(), line),
            };
            docs.push(doc);
        }
    }
    let limits = match a.max_words {
        Some(n) => WordLimits::uniform(n),
        None => WordLimits::uniform(WIKI_MAX_WORDS).with_source("web", WEB_MAX_WORDS),
    };
    let (store, report) = build_store(&docs, &limits)?;
    let out = env.out(&a.out)?;
    store.save(&out)?;
    println!(
        "{} documents, {} duplicates dropped, {} chunks -> {}",
        report.documents,
        report.duplicates_dropped,
        store.len(),
        out.display()
    );
    Ok(())
}

fn store_vocabulary(store: &ChunkStore, extra: &[String]) -> Vocabulary {
    let texts = store
        .chunks()
        .iter()
        .map(|c| c.text.as_str())
        .chain(extra.iter().map(String::as_str))
        .chain(std::iter::once(PROMPT_WORDS));
    Vocabulary::build(texts, DEFAULT_VOCAB_CAP)
}

fn init_retriever(env: &Env, a: InitRetrieverArgs) -> Result<()> {
    let vocab = match (&a.lm, &a.store) {
        (Some(lm), _) => checkpoint::load(lm)?.vocab,
        (None, Some(store)) => store_vocabulary(&ChunkStore::load(store)?, &[]),
        (None, None) => bail!("init-retriever needs --lm or --store for its vocabulary"),
    };
    let dim = a.dim.unwrap_or(env.config.retriever_dim);
    let r = Retriever::new(vocab, dim, env.seed)?;
    let out = env.out(&a.out)?;
    rcheckpoint::save(&r, &out)?;
    println!("retriever dim {dim}, vocabulary {} -> {}", r.query.vocab_len(), out.display());
    Ok(())
}

fn build_index(env: &Env, a: BuildIndexArgs) -> Result<()> {
    let r = rcheckpoint::load(&a.retriever)?;
    let store = ChunkStore::load(&a.store)?;
    let index = EmbeddingIndex::build(&r, &store)?;
    let out = env.out(&a.out)?;
    index.save(&out)?;
    println!("{} chunks, dim {} -> {}", index.len(), index.dim(), out.display());
    Ok(())
}

struct Loaded {
    retriever: Retriever,
    index: EmbeddingIndex,
    store: ChunkStore,
}

impl Loaded {
    fn open(a: &RetrievalArgs) -> Result<Self> {
        Self::from_paths(&a.retriever, &a.index, &a.store)
    }

    fn from_paths(retriever: &Path, index: &Path, store: &Path) -> Result<Self> {
        Ok(Self {
            retriever: rcheckpoint::load(retriever)?,
            index: EmbeddingIndex::load(index)?,
            store: ChunkStore::load(store)?,
        })
    }

    fn ctx(&self) -> Result<RetrievalContext<'_>> {
        Ok(RetrievalContext::new(&self.retriever, &self.index, &self.store)?)
    }
}

fn read_lines(paths: &[PathBuf]) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for p in paths {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        out.extend(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string));
    }
    Ok(out)
}

fn load_tasks(paths: &[PathBuf]) -> Result<Vec<FTExample>> {
    let mut out = Vec::new();
    for p in paths {
        out.extend(load_task_file(p).with_context(|| format!("loading {}", p.display()))?);
    }
    Ok(out)
}

fn parse_weights(spec: &str) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, w) = part.split_once('=').with_context(|| format!("expected name=weight, got {part:?}"))?;
        let w: f64 = w.trim().parse().with_context(|| format!("bad weight in {part:?}"))?;
        if out.insert(name.trim().to_string(), w).is_some() {
            bail!("weight for {name:?} given twice");
        }
    }
    Ok(out)
}

/// QA examples of a task file in evaluation form.
fn eval_form(examples: &[FTExample], prefix: &str) -> Result<Vec<(TaskSpec, EvalExample)>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| Ok(from_task_example(e, format!("{prefix}{i}"))?))
        .collect()
}

fn train_lm(env: &Env, a: TrainLmArgs) -> Result<()> {
    let cfg = &env.config;
    let mut text = a.text.clone();
    let mut tasks = a.tasks.clone();
    let mut dev = a.dev.clone();
    let mut store_path = a.store.clone();
    if let Some(dir) = &a.data {
        match a.mode {
            TrainMode::Pretrain => text.push(dir.join("pretrain.txt")),
            TrainMode::It | TrainMode::RaIt => {
                tasks.push(dir.join("train.tasks"));
                if dev.is_none() && dir.join("dev.tasks").exists() {
                    dev = Some(dir.join("dev.tasks"));
                }
            }
        }
        if store_path.is_none() && dir.join("chunks.store").exists() {
            store_path = Some(dir.join("chunks.store"));
        }
    }
    let lines = read_lines(&text)?;
    let examples = load_tasks(&tasks)?;
    if a.mode == TrainMode::Pretrain && !examples.is_empty() {
        bail!("pre-training reads --text only");
    }
    if lines.is_empty() && examples.is_empty() {
        bail!("no training data: pass --text, --tasks or --data");
    }
    let store = store_path.as_deref().map(ChunkStore::load).transpose()?;

    let model = match &a.init {
        Some(p) => checkpoint::load(p)?,
        None => {
            let mut extra = lines.clone();
            for e in &examples {
                extra.push(e.instruction.clone());
                extra.push(e.output.clone());
                extra.extend(e.context.clone());
            }
            let vocab = match &store {
                Some(s) => store_vocabulary(s, &extra),
                None => Vocabulary::build(extra.iter().map(String::as_str).chain([PROMPT_WORDS]), DEFAULT_VOCAB_CAP),
            };
            LanguageModel::new(vocab, cfg.model, env.seed)?
        }
    };
    let window = model.window();

    let retrieval = match (&a.retriever, &a.index, &store) {
        (Some(r), Some(i), Some(_)) => Some((rcheckpoint::load(r)?, EmbeddingIndex::load(i)?)),
        (None, None, _) => None,
        _ => bail!("retrieval needs --retriever, --index and --store together"),
    };
    let ctx = match (&retrieval, &store) {
        (Some((r, i)), Some(s)) => Some(RetrievalContext::new(r, i, s)?),
        _ => None,
    };
    let mode = match a.mode {
        TrainMode::RaIt => {
            if ctx.is_none() {
                bail!("ra-it needs --retriever, --index and --store (or --data)");
            }
            Mode::RaIt
        }
        _ => Mode::It,
    };

    let mut pools = Vec::new();
    let mut by_task: BTreeMap<&str, Vec<FTExample>> = BTreeMap::new();
    for e in &examples {
        by_task.entry(e.task.as_str()).or_default().push(e.clone());
    }
    let k_tilde = a.ktilde.unwrap_or(cfg.k_tilde);
    for (i, (name, group)) in by_task.iter().enumerate() {
        let kind = if group.iter().all(|e| e.category == Category::Dialogue) {
            SourceKind::Dialogue
        } else {
            SourceKind::Task
        };
        let seed = env.seed ^ (0x51ed + i as u64);
        pools.push(InstancePool::from_tasks(*name, kind, group, &model.vocab, ctx.as_ref(), k_tilde, mode, window, seed)?);
    }
    if !lines.is_empty() {
        pools.push(InstancePool::from_lines("text", &lines, &model.vocab, window)?);
    }
    let mut spec = MixtureSpec {
        unsupervised_fraction: cfg.unsupervised_fraction,
        ..MixtureSpec::default()
    };
    if let Some(m) = &a.mixture {
        spec.weights = parse_weights(m)?;
    }
    let base = match a.mode {
        TrainMode::Pretrain => &cfg.pretrain,
        TrainMode::It => &cfg.it,
        TrainMode::RaIt => &cfg.ra_it,
    };
    let tc = TrainConfig {
        seed: env.seed,
        ..base.clone()
    };

    let dev_examples = match &dev {
        Some(p) if tc.eval_every > 0 => {
            let d = eval_form(&load_task_file(p)?, "dev")?;
            subsample(&d, cfg.dev_limit, env.seed)
        }
        _ => Vec::new(),
    };
    let dev_k = if ctx.is_some() { cfg.lsr_k } else { 0 };
    let mut scorer = |lm: &LanguageModel| -> ralab_core::Result<f64> {
        let mut total = 0.0;
        for (spec, e) in &dev_examples {
            let setup = EvalSetup {
                lm,
                retrieval: ctx,
                k: dev_k,
                shots: &[],
                max_new_tokens: cfg.max_new_tokens,
            };
            total += evaluate(spec, std::slice::from_ref(e), &setup)?.value;
        }
        Ok(total / dev_examples.len().max(1) as f64)
    };
    let eval: Option<&mut Evaluator> = if dev_examples.is_empty() { None } else { Some(&mut scorer) };

    let clock = Instant::now();
    let (model, log) = train(model, &pools, &spec, &tc, eval)?;
    let out = env.out(&a.out)?;
    checkpoint::save(&model, &out)?;
    eprintln!("trained {} steps in {:.1}s", log.losses.len(), clock.elapsed().as_secs_f64());
    println!(
        "{} pools, final loss {:.4}, best step {} -> {}",
        pools.len(),
        log.recent_loss(50),
        log.best_step,
        out.display()
    );
    for (step, score) in &log.evals {
        println!("dev step {step}: {score:.2}");
    }
    Ok(())
}

fn train_retriever(env: &Env, a: TrainRetrieverArgs) -> Result<()> {
    let cfg = &env.config;
    let loaded = Loaded::open(&a.retrieval)?;
    let ctx = loaded.ctx()?;
    let lm = checkpoint::load(&a.lm)?;
    let to_lsr = |examples: &[FTExample]| -> Result<Vec<LSRExample>> {
        examples
            .iter()
            .filter(|e| query_text(e).is_some())
            .map(|e| Ok(LSRExample::from_task(e)?))
            .collect()
    };
    let mut train_ex = to_lsr(&load_tasks(&a.tasks)?)?;
    if a.corpus_sample > 0 {
        let sample = make_corpus_examples(&loaded.store, a.corpus_sample, env.seed)?;
        train_ex.extend(sample.examples);
    }
    if train_ex.is_empty() {
        bail!("no supervision examples: pass --tasks or --corpus-sample");
    }
    let k = a.k.unwrap_or(cfg.lsr_k);
    let train_b = precompute_supervision(&train_ex, &ctx, &lm, k, a.cache.as_deref())?;
    let heldout_b = match &a.heldout {
        Some(p) => precompute_supervision(&to_lsr(&load_task_file(p)?)?, &ctx, &lm, k, None)?,
        None => Vec::new(),
    };
    let mut lc = LsrConfig {
        seed: env.seed,
        ..cfg.lsr.clone()
    };
    if let Some(t) = a.tau {
        lc.tau = t;
    }
    if let Some(n) = &a.norm {
        lc.norm = n.parse()?;
    }
    if let Some(m) = &a.mix {
        let w = parse_weights(m)?;
        if let Some(name) = w.keys().find(|n| *n != "corpus" && *n != "mti") {
            bail!("unknown group {name:?} in --mix (corpus, mti)");
        }
        lc.corpus_fraction = w.get("corpus").copied().unwrap_or(0.0);
        lc.mti_fraction = w.get("mti").copied().unwrap_or(0.0);
    }
    let (tuned, log) = lsr_train(loaded.retriever.clone(), &loaded.index, &train_b, &heldout_b, &lc)?;
    let out = env.out(&a.out)?;
    rcheckpoint::save(&tuned, &out)?;
    println!(
        "{} examples, k {k}, {} steps, best step {} -> {}",
        train_b.len(),
        log.kl.len(),
        log.best_step,
        out.display()
    );
    for (step, mrr) in &log.mrr {
        println!("held-out MRR step {step}: {mrr:.4}");
    }
    Ok(())
}

fn search(a: SearchArgs) -> Result<()> {
    let loaded = Loaded::open(&a.retrieval)?;
    for hit in loaded.ctx()?.top_k(&a.query, a.k)? {
        println!(
            "{}\t{}\t{:.6}\t{:.6}\t{}",
            hit.rank, hit.chunk.id, hit.score, hit.weight, hit.chunk.text
        );
    }
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let lm = checkpoint::load(&a.lm)?;
    let prompt = a.prompt.replace("\\n", "\n");
    let g = lm.generate(&prompt, a.max_new_tokens)?;
    println!("{}", g.text);
    Ok(())
}

#[derive(Serialize)]
struct Prediction<'a> {
    id: &'a str,
    task: &'a str,
    prediction: &'a str,
    golds: &'a [String],
    score: f64,
}

struct Scored {
    spec: TaskSpec,
    example: EvalExample,
    prediction: String,
    score: f64,
}

/// Scores every example of a task file with shots drawn from `shot_file`.
fn score_task_file(
    env: &Env,
    lm: &LanguageModel,
    ctx: RetrievalContext,
    tasks: &Path,
    k: usize,
    shots: usize,
    shot_file: Option<&Path>,
) -> Result<Vec<Scored>> {
    let all = eval_form(&load_task_file(tasks)?, "eval")?;
    let examples = subsample(&all, env.config.eval_limit, env.seed);
    let pool = match shot_file {
        Some(p) => eval_form(&load_task_file(p)?, "shot")?,
        None if shots > 0 => bail!("--shots needs --shot-tasks"),
        None => Vec::new(),
    };
    let pool_examples: Vec<EvalExample> = pool.iter().map(|(_, e)| e.clone()).collect();
    let eval_examples: Vec<EvalExample> = examples.iter().map(|(_, e)| e.clone()).collect();
    let chosen = select_shots(
        &pool_examples,
        &eval_examples,
        &FewShotConfig {
            n_shots: shots,
            seed: env.seed,
        },
    )?;
    let mut out = Vec::with_capacity(examples.len());
    for (spec, e) in &examples {
        let shots = chosen
            .iter()
            .map(|s| {
                let background = if k > 0 {
                    Some(ctx.top_k(&build_query(spec, s)?, 1)?[0].chunk.text.clone())
                } else {
                    None
                };
                Ok(Shot { example: s, background })
            })
            .collect::<Result<Vec<_>>>()?;
        let setup = EvalSetup {
            lm,
            retrieval: Some(ctx),
            k,
            shots: &shots,
            max_new_tokens: env.config.max_new_tokens,
        };
        let o = evaluate(spec, std::slice::from_ref(e), &setup)?;
        out.push(Scored {
            spec: spec.clone(),
            example: e.clone(),
            prediction: o.predictions[0].clone(),
            score: o.per_example[0],
        });
    }
    Ok(out)
}

fn infer(env: &Env, a: InferArgs) -> Result<()> {
    let loaded = Loaded::open(&a.retrieval)?;
    let ctx = loaded.ctx()?;
    let lm = checkpoint::load(&a.lm)?;
    if let Some(task) = &a.task {
        let scored = score_task_file(env, &lm, ctx, task, a.k, a.fewshot, a.shot_tasks.as_deref())?;
        let mut text = String::new();
        for s in &scored {
            let row = Prediction {
                id: &s.example.id,
                task: &s.spec.name,
                prediction: &s.prediction,
                golds: &s.example.golds,
                score: s.score,
            };
            text.push_str(&serde_json::to_string(&row)?);
            text.push('\n');
        }
        let out = env.out(&a.out)?;
        fs::write(&out, text)?;
        println!("{} predictions -> {}", scored.len(), out.display());
        return Ok(());
    }
    let question = a.question.as_deref().expect("clap requires --question or --task");
    let prompt = format!("Q: {question}\nA:");
    let scorer: Scorer = a.scorer.parse()?;
    let retrieved = if a.k > 0 { Some(ctx.top_k(question, a.k)?) } else { None };
    let result = match (&a.choices, &retrieved) {
        (Some(c), Some(r)) => {
            let choices: Vec<&str> = c.split('|').map(str::trim).collect();
            ensemble_choice(&lm, &choices, &prompt, r, &[], scorer)?
        }
        (Some(c), None) => {
            let choices: Vec<&str> = c.split('|').map(str::trim).collect();
            let reserve = choices.iter().map(|c| lm.answer_len(c)).max().unwrap_or(0);
            let (p, _) = build_plain_prompt(&lm, &prompt, &[], reserve)?;
            plain_choice(&lm, &choices, &p, scorer)?
        }
        (None, Some(r)) => match ensemble_generate(&lm, &prompt, r, &[], env.config.max_new_tokens) {
            Err(ralab_core::Error::EmptyGeneration) => {
                println!();
                eprintln!("every augmented decode was empty");
                return Ok(());
            }
            other => other?,
        },
        (None, None) => {
            let (p, _) = build_plain_prompt(&lm, &prompt, &[], env.config.max_new_tokens)?;
            println!("{}", lm.generate(&p, env.config.max_new_tokens)?.text.trim());
            return Ok(());
        }
    };
    println!("{}", result.winner_text());
    for c in &result.candidates {
        println!("  {:.6}\t{}", c.log_prob, c.text);
    }
    Ok(())
}

fn eval(env: &Env, a: EvalArgs) -> Result<()> {
    let loaded = Loaded::open(&a.retrieval)?;
    let ctx = loaded.ctx()?;
    let lm = checkpoint::load(&a.lm)?;
    let scored = score_task_file(env, &lm, ctx, &a.tasks, a.k, a.shots, a.shot_tasks.as_deref())?;
    let arm = a.lm.file_stem().and_then(|s| s.to_str()).unwrap_or("lm").to_string();
    let hash = env.config.hash();
    let mut by_task: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for s in &scored {
        by_task
            .entry((s.spec.name.clone(), s.spec.metric.name().to_string()))
            .or_default()
            .push(s.score);
    }
    let rows: Vec<ResultRow> = by_task
        .into_iter()
        .map(|((task, metric), scores)| ResultRow {
            arm: arm.clone(),
            task,
            k: a.k,
            shots: a.shots,
            metric,
            value: 100.0 * scores.iter().sum::<f64>() / scores.len() as f64,
            seed: env.seed,
            config_hash: hash.clone(),
        })
        .collect();
    let out = env.out(&a.out)?;
    fs::write(&out, rows_to_jsonl(&rows))?;
    print!("{}", summary(&rows));
    Ok(())
}

fn synth_kb(env: &Env) -> Result<()> {
    let kb = generate_synthetic_kb(&env.config.synth, env.seed)?;
    let dir = env.out(Path::new("."))?;
    for p in kb.write_files(&dir)? {
        println!("{}", p.display());
    }
    for (split, n) in kb.split_sizes() {
        println!("{}: {n} questions", split.name());
    }
    Ok(())
}

fn experiment(env: &Env, a: ExperimentArgs) -> Result<()> {
    let grid = named_grid(&a.grid)?;
    let seeds: Vec<u64> = match &a.seeds {
        Some(s) => s
            .split(',')
            .map(|x| x.trim().parse().with_context(|| format!("bad seed {x:?}")))
            .collect::<Result<_>>()?,
        None => vec![env.seed],
    };
    let mut rows = Vec::new();
    if !grid.is_empty() {
        for &seed in &seeds {
            let suite = match &a.from {
                Some(dir) => Suite::load(&dir.join(format!("seed{seed}")), &env.config, seed)?,
                None => {
                    let suite = prepare_suite(&env.config, seed)?;
                    for (stage, secs) in &suite.report.seconds {
                        eprintln!("seed {seed}: {stage} {secs:.1}s");
                    }
                    suite
                }
            };
            if a.save_checkpoints && a.from.is_none() {
                suite.save(&env.out(Path::new(&format!("seed{seed}")))?)?;
            }
            rows.extend(run_grid(&suite, &grid, &env.config)?);
        }
    }
    fs::write(env.out(Path::new("results.jsonl"))?, rows_to_jsonl(&rows))?;
    let text = summary(&rows);
    fs::write(env.out(Path::new("summary.txt"))?, &text)?;
    print!("{text}");
    Ok(())
}
