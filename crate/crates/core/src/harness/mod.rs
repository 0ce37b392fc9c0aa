//! Evaluation templates, metrics, the synthetic knowledge base and
//! experiment orchestration.

pub mod config;
pub mod experiment;
pub mod metrics;
pub mod synth;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{BACKGROUND_END, BACKGROUND_START, BLOCK_END};
use crate::lm::Scorer;
use crate::lm_finetune::{Category, FTExample};

pub use metrics::{accuracy, exact_match, normalize_answer, token_f1};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    MultiChoice,
    ShortGeneration,
    Dialogue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    Accuracy,
    TokenF1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::ExactMatch => "exact_match",
            Metric::Accuracy => "accuracy",
            Metric::TokenF1 => "token_f1",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Prompt and query layouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    /// `Q: {question}\nA:`; query is the bare question.
    Qa,
    /// `Question: {question}\nA. ..\nB. ..\nAnswer:`; query is the question
    /// plus the choice lines.
    MultiChoice,
    /// Alternating `Q:`/`A:` turns ending in `A:`; query is the space-joined
    /// turns.
    Dialogue,
}

impl Template {
    pub fn name(self) -> &'static str {
        match self {
            Template::Qa => "qa",
            Template::MultiChoice => "multi_choice",
            Template::Dialogue => "dialogue",
        }
    }
}

impl FromStr for Template {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Template::Qa, Template::MultiChoice, Template::Dialogue]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Template(format!("unknown template {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub prompt_template: Template,
    pub query_template: Template,
    pub metric: Metric,
    /// Answer scorer for multiple-choice tasks.
    pub scorer: Scorer,
}

impl TaskSpec {
    pub fn new(name: impl Into<String>, kind: TaskKind, template: Template, metric: Metric, scorer: Scorer) -> Result<Self> {
        let spec = Self {
            name: name.into(),
            kind,
            prompt_template: template,
            query_template: template,
            metric,
            scorer,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn short_generation(name: impl Into<String>) -> Self {
        Self::new(name, TaskKind::ShortGeneration, Template::Qa, Metric::ExactMatch, Scorer::Nll).expect("valid")
    }

    pub fn multi_choice(name: impl Into<String>) -> Self {
        Self::new(name, TaskKind::MultiChoice, Template::MultiChoice, Metric::Accuracy, Scorer::NllChar).expect("valid")
    }

    pub fn dialogue(name: impl Into<String>) -> Self {
        Self::new(name, TaskKind::Dialogue, Template::Dialogue, Metric::TokenF1, Scorer::Nll).expect("valid")
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::MultiChoice => self.metric == Metric::Accuracy,
            TaskKind::ShortGeneration | TaskKind::Dialogue => matches!(self.metric, Metric::ExactMatch | Metric::TokenF1),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("{}: metric {} does not fit {:?}", self.name, self.metric, self.kind)))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalExample {
    pub id: String,
    /// Template fields: `question`, or `turns` (newline-separated).
    pub fields: BTreeMap<String, String>,
    pub golds: Vec<String>,
    pub choices: Option<Vec<String>>,
}

impl EvalExample {
    pub fn question(id: impl Into<String>, question: impl Into<String>, golds: Vec<String>) -> Self {
        Self {
            id: id.into(),
            fields: BTreeMap::from([("question".to_string(), question.into())]),
            golds,
            choices: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.golds.is_empty() || self.golds.iter().any(|g| g.trim().is_empty()) {
            return Err(Error::InvalidAnswer(format!("{}: gold answers must be non-empty", self.id)));
        }
        if let Some(choices) = &self.choices {
            if choices.len() < 2 {
                return Err(Error::InvalidAnswer(format!("{}: fewer than two choices", self.id)));
            }
            if !self.golds.iter().all(|g| choices.contains(g)) {
                return Err(Error::InvalidAnswer(format!("{}: gold answer is not a choice", self.id)));
            }
        }
        Ok(())
    }

    fn field(&self, name: &str) -> Result<&str> {
        self.fields
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| Error::Template(format!("{}: missing field {name:?}", self.id)))
    }

    fn choices(&self) -> Result<&[String]> {
        self.choices
            .as_deref()
            .ok_or_else(|| Error::Template(format!("{}: missing choices", self.id)))
    }
}

const CHOICE_LABELS: &str = "ABCDEFGHIJ";

fn choice_lines(choices: &[String]) -> Result<String> {
    if choices.len() > CHOICE_LABELS.len() {
        return Err(Error::Template(format!("{} choices exceed the label set", choices.len())));
    }
    Ok(choices
        .iter()
        .zip(CHOICE_LABELS.chars())
        .map(|(c, l)| format!("{l}. {c}\n"))
        .collect())
}

fn turns(example: &EvalExample) -> Result<Vec<&str>> {
    let t: Vec<&str> = example.field("turns")?.lines().map(str::trim).filter(|t| !t.is_empty()).collect();
    if t.is_empty() {
        return Err(Error::Template(format!("{}: no dialogue turns", example.id)));
    }
    Ok(t)
}

/// The query-side prompt of an example, ending where the answer starts.
pub fn render_body(template: Template, example: &EvalExample) -> Result<String> {
    Ok(match template {
        Template::Qa => format!("Q: {}\nA:", example.field("question")?),
        Template::MultiChoice => {
            format!("Question: {}\n{}Answer:", example.field("question")?, choice_lines(example.choices()?)?)
        }
        Template::Dialogue => {
            let mut out = String::new();
            for (i, t) in turns(example)?.iter().enumerate() {
                out.push_str(if i % 2 == 0 { "Q: " } else { "A: " });
                out.push_str(t);
                out.push('\n');
            }
            out.push_str("A:");
            out
        }
    })
}

/// Retrieval query text; the same rendering is used for training-time
/// retrieval.
pub fn build_query(spec: &TaskSpec, example: &EvalExample) -> Result<String> {
    Ok(match spec.query_template {
        Template::Qa => example.field("question")?.to_string(),
        Template::MultiChoice => {
            let lines = choice_lines(example.choices()?)?;
            format!("{}\n{}", example.field("question")?, lines.trim_end())
        }
        Template::Dialogue => turns(example)?.join(" "),
    })
}

/// A demonstration with the background it is shown with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shot<'a> {
    pub example: &'a EvalExample,
    /// Top-1 retrieved chunk; `None` for closed-book runs.
    pub background: Option<String>,
}

/// Few-shot blocks followed by the query prompt. The query's own background
/// is inserted between them by fusion, one chunk at a time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedPrompt {
    pub fewshot: Vec<String>,
    pub prompt: String,
}

impl RenderedPrompt {
    pub fn fewshot_refs(&self) -> Vec<&str> {
        self.fewshot.iter().map(String::as_str).collect()
    }

    /// The full text with `background` as the query's Background block.
    pub fn text(&self, background: Option<&str>) -> String {
        let mut out = String::new();
        for b in &self.fewshot {
            out.push_str(b);
            out.push_str(BLOCK_END);
        }
        if let Some(bg) = background {
            out.push_str(BACKGROUND_START);
            out.push_str(bg);
            out.push_str(BACKGROUND_END);
        }
        out.push_str(&self.prompt);
        out
    }
}

/// Renders shots (each with its own Background and first gold answer) and
/// the query example.
pub fn render_eval_prompt(spec: &TaskSpec, example: &EvalExample, shots: &[Shot]) -> Result<RenderedPrompt> {
    let fewshot = shots
        .iter()
        .map(|s| {
            let body = render_body(spec.prompt_template, s.example)?;
            let answer = s.example.golds.first().ok_or_else(|| Error::InvalidAnswer(format!("{}: no gold", s.example.id)))?;
            Ok(match &s.background {
                Some(bg) => format!("{BACKGROUND_START}{bg}{BACKGROUND_END}{body} {answer}"),
                None => format!("{body} {answer}"),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RenderedPrompt {
        fewshot,
        prompt: render_body(spec.prompt_template, example)?,
    })
}

/// Evaluation form of a task-file example: question-answering categories
/// use the QA template, dialogue the dialogue template.
pub fn from_task_example(example: &FTExample, id: impl Into<String>) -> Result<(TaskSpec, EvalExample)> {
    example.validate()?;
    let id = id.into();
    let golds = vec![example.output.trim().to_string()];
    match example.category {
        Category::OpenQa | Category::ReadingComprehension => Ok((
            TaskSpec::short_generation(example.task.clone()),
            EvalExample::question(id, example.instruction.trim(), golds),
        )),
        Category::Dialogue => Ok((
            TaskSpec::dialogue(example.task.clone()),
            EvalExample {
                id,
                fields: BTreeMap::from([("turns".to_string(), example.instruction.clone())]),
                golds,
                choices: None,
            },
        )),
        other => Err(Error::Template(format!("no evaluation template for {other} examples"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FewShotConfig {
    pub n_shots: usize,
    pub seed: u64,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        Self { n_shots: 0, seed: 0 }
    }
}

/// Seeded choice of shots from the training split. Fails if a chosen shot
/// shares an id with an evaluation example.
pub fn select_shots<'a>(train: &'a [EvalExample], eval: &[EvalExample], config: &FewShotConfig) -> Result<Vec<&'a EvalExample>> {
    if config.n_shots > train.len() {
        return Err(Error::Config(format!("{} shots requested from {} training examples", config.n_shots, train.len())));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
    let shots: Vec<&EvalExample> = order[..config.n_shots].iter().map(|&i| &train[i]).collect();
    let eval_ids: HashSet<&str> = eval.iter().map(|e| e.id.as_str()).collect();
    if let Some(s) = shots.iter().find(|s| eval_ids.contains(s.id.as_str())) {
        return Err(Error::ContractViolation(format!("shot {} is an evaluation example", s.id)));
    }
    Ok(shots)
}

/// At most `n` items chosen by a seeded shuffle, in their original order.
pub fn subsample<T: Clone>(items: &[T], n: usize, seed: u64) -> Vec<T> {
    if items.len() <= n {
        return items.to_vec();
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = order[..n].to_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| items[i].clone()).collect()
}
