//! Retrieval-augmented instruction tuning.
//!
//! Each fine-tuning example is turned into one or more instances whose
//! background field is a retrieved chunk (or the example's own context),
//! serialized with randomized field markers, packed into BOS/EOS-delimited
//! sequences and trained with a loss on the output segment only.

mod instances;
mod mixture;
mod serialize;
mod train;

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::text::{escape_field, unescape_field};

pub use instances::{make_instances, pack, text_instances, Background, FTInstance, Mode};
pub use mixture::{mixture_weights, MixtureSampler, MixtureSource, MixtureSpec, SourceKind};
pub use serialize::{query_text, serialize, Markers, Serialized};
pub use train::{train, Evaluator, InstancePool, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Dialogue,
    OpenQa,
    ReadingComprehension,
    Summarization,
    Cot,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Dialogue,
        Category::OpenQa,
        Category::ReadingComprehension,
        Category::Summarization,
        Category::Cot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::Dialogue => "dialogue",
            Category::OpenQa => "open_qa",
            Category::ReadingComprehension => "reading_comprehension",
            Category::Summarization => "summarization",
            Category::Cot => "cot",
        }
    }

    /// Whether examples of this category bring their own context.
    pub fn needs_context(self) -> bool {
        matches!(self, Category::ReadingComprehension | Category::Summarization)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Template(format!("unknown category {s:?}")))
    }
}

/// One instruction/output pair from a fine-tuning task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FTExample {
    pub task: String,
    pub category: Category,
    /// Question, instructions, or dialogue turns separated by newlines.
    pub instruction: String,
    /// Answer text. For chain-of-thought the last line is the answer and the
    /// earlier lines are the reasoning chain.
    pub output: String,
    pub context: Option<String>,
    /// Reading comprehension whose question makes sense without the passage.
    pub self_contained: bool,
}

impl FTExample {
    pub fn validate(&self) -> Result<()> {
        if self.output.trim().is_empty() {
            return Err(Error::InvalidAnswer(format!("{}: empty output", self.task)));
        }
        if self.category != Category::Summarization && self.instruction.trim().is_empty() {
            return Err(Error::EmptyInput(format!("{}: empty instruction", self.task)));
        }
        if self.category.needs_context() && self.context.as_deref().map_or(true, |c| c.trim().is_empty()) {
            return Err(Error::Template(format!(
                "{}: {} examples need a context",
                self.task, self.category
            )));
        }
        Ok(())
    }

    fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            escape_field(&self.task),
            self.category,
            escape_field(&self.instruction),
            escape_field(&self.output),
            escape_field(self.context.as_deref().unwrap_or("")),
            u8::from(self.self_contained)
        )
    }
}

/// Task file: one example per line,
/// `task\tcategory\tinstruction\toutput\tcontext\tself_contained`, with
/// fields escaped as in the chunk store. An empty context field means none.
/// Blank lines and lines starting with `#` are skipped.
pub fn parse_task_file(content: &str, path: &Path) -> Result<Vec<FTExample>> {
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(err(format!("expected 6 tab-separated fields, found {}", fields.len())));
        }
        let text = |j: usize| unescape_field(fields[j]).ok_or_else(|| err(format!("bad escape in field {}", j + 1)));
        let context = text(4)?;
        let example = FTExample {
            task: text(0)?,
            category: fields[1].parse().map_err(|e: Error| err(e.to_string()))?,
            instruction: text(2)?,
            output: text(3)?,
            context: (!context.is_empty()).then_some(context),
            self_contained: match fields[5] {
                "0" => false,
                "1" => true,
                other => return Err(err(format!("self_contained must be 0 or 1, got {other:?}"))),
            },
        };
        example.validate().map_err(|e| err(e.to_string()))?;
        out.push(example);
    }
    Ok(out)
}

pub fn load_task_file(path: impl AsRef<Path>) -> Result<Vec<FTExample>> {
    let path = path.as_ref();
    parse_task_file(&fs::read_to_string(path)?, path)
}

pub fn write_task_file(examples: &[FTExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

pub fn save_task_file(examples: &[FTExample], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_task_file(examples))?;
    Ok(())
}
