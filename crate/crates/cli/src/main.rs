mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "ralab", version, about = "Retrieval-augmented LM laboratory")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// `key = value` settings file; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory that receives output artifacts.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Chunk documents into a chunk store.
    Ingest(IngestArgs),
    /// Create an untrained retriever over a vocabulary.
    InitRetriever(InitRetrieverArgs),
    /// Encode every chunk with the document encoder.
    BuildIndex(BuildIndexArgs),
    /// Pre-train or instruction-tune the language model.
    TrainLm(TrainLmArgs),
    /// LM-supervised tuning of the query encoder.
    TrainRetriever(TrainRetrieverArgs),
    /// Top-k chunks for a query.
    Search(SearchArgs),
    /// Answer one question with retrieval ensembling.
    Infer(InferArgs),
    /// Greedy continuation of a raw prompt.
    Generate(GenerateArgs),
    /// Score a task file.
    Eval(EvalArgs),
    /// Write the synthetic knowledge base.
    SynthKb,
    /// Train and evaluate the desk-scale ablation grid.
    Experiment(ExperimentArgs),
}

#[derive(Args, Debug)]
struct IngestArgs {
    /// Text files; each non-empty line is a document, optionally prefixed by
    /// `source<TAB>`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Source for lines without a prefix.
    #[arg(long, default_value = "wiki")]
    source: String,
    /// Word limit for every source, replacing the per-source defaults.
    #[arg(long)]
    max_words: Option<usize>,
    #[arg(long, default_value = "chunks.store")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InitRetrieverArgs {
    /// Take the vocabulary from this LM checkpoint.
    #[arg(long)]
    lm: Option<PathBuf>,
    /// Otherwise build the vocabulary from this store.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, default_value = "retriever.bin")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RetrievalArgs {
    #[arg(long, visible_alias = "encoder")]
    retriever: PathBuf,
    #[arg(long, visible_alias = "idx")]
    index: PathBuf,
    #[arg(long)]
    store: PathBuf,
}

#[derive(Args, Debug)]
struct BuildIndexArgs {
    #[arg(long, visible_alias = "encoder")]
    retriever: PathBuf,
    #[arg(long)]
    store: PathBuf,
    #[arg(long, default_value = "index.bin")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TrainMode {
    Pretrain,
    It,
    RaIt,
}

#[derive(Args, Debug)]
struct TrainLmArgs {
    #[arg(long, value_enum)]
    mode: TrainMode,
    /// Starting checkpoint; a fresh model is created when absent.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Directory laid out like `synth-kb` output: `pretrain.txt` for
    /// pre-training, `train.tasks`, `dev.tasks` and `chunks.store` otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Plain-text files, one training example per line.
    #[arg(long)]
    text: Vec<PathBuf>,
    /// Task files for instruction tuning.
    #[arg(long)]
    tasks: Vec<PathBuf>,
    /// Dev task file for early stopping on exact match.
    #[arg(long)]
    dev: Option<PathBuf>,
    /// Chunk store; also used for the vocabulary of a fresh model.
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long, visible_alias = "encoder")]
    retriever: Option<PathBuf>,
    #[arg(long, visible_alias = "idx")]
    index: Option<PathBuf>,
    /// Retrieved chunks per RA-IT example.
    #[arg(long)]
    ktilde: Option<usize>,
    /// Explicit source weights, `name=weight,...`; sources are named by
    /// their task field, text sources `text`.
    #[arg(long)]
    mixture: Option<String>,
    #[arg(long, default_value = "lm.bin")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainRetrieverArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    /// Supervising LM.
    #[arg(long, visible_alias = "ckpt")]
    lm: PathBuf,
    /// Task files whose examples become supervision.
    #[arg(long)]
    tasks: Vec<PathBuf>,
    /// Held-out task file for MRR validation.
    #[arg(long)]
    heldout: Option<PathBuf>,
    /// Corpus examples sampled from the store.
    #[arg(long, default_value_t = 0)]
    corpus_sample: usize,
    /// Supervision cache file, reused when its key matches.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    tau: Option<f64>,
    /// Group weights, e.g. `corpus=0.95,mti=0.05`.
    #[arg(long)]
    mix: Option<String>,
    /// LM likelihood normalization: seq, tok or auto.
    #[arg(long)]
    norm: Option<String>,
    /// Retrieved chunks scored per example.
    #[arg(short, long)]
    k: Option<usize>,
    #[arg(long, default_value = "retriever_ft.bin")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SearchArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long)]
    query: String,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long, visible_alias = "ckpt")]
    lm: PathBuf,
    /// A single question; its answer is printed.
    #[arg(long, required_unless_present = "task", conflicts_with = "task")]
    question: Option<String>,
    /// Task file whose answers are written to `--out`.
    #[arg(long)]
    task: Option<PathBuf>,
    /// Demonstrations drawn from `--shot-tasks`.
    #[arg(long, default_value_t = 0)]
    fewshot: usize,
    #[arg(long)]
    shot_tasks: Option<PathBuf>,
    #[arg(long, default_value = "predictions.jsonl")]
    out: PathBuf,
    /// `|`-separated answer options; scored instead of generating.
    #[arg(long)]
    choices: Option<String>,
    #[arg(long, default_value = "nll")]
    scorer: String,
    /// Chunks to ensemble; 0 answers closed-book.
    #[arg(short, long, default_value_t = 10)]
    k: usize,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long, visible_alias = "ckpt")]
    lm: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    retrieval: RetrievalArgs,
    #[arg(long, visible_alias = "ckpt")]
    lm: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(short, long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    shots: usize,
    /// Training task file the shots are drawn from.
    #[arg(long)]
    shot_tasks: Option<PathBuf>,
    #[arg(long, default_value = "eval.jsonl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Comma-separated grid names: table3, table4, closed_book, shots,
    /// choice, all, empty.
    #[arg(long, default_value = "table3,table4")]
    grid: String,
    /// Comma-separated seeds; defaults to the global seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Evaluate checkpoints saved under `<dir>/seed<N>` instead of training.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Save the trained checkpoints under the output directory.
    #[arg(long)]
    save_checkpoints: bool,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = commands::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
