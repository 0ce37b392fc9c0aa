use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::Result;
use crate::fusion::{BACKGROUND_END, BACKGROUND_START};
use crate::lm_finetune::{Category, FTExample};

pub const INST_STARTS: [&str; 3] = ["Q:", "Question: ", ""];
pub const ANSWER_STARTS: [&str; 2] = ["A:", "Answer:"];
pub const SUMMARIZE: &str = "Summarize this article:";

/// Field markers around the instruction and answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Markers {
    pub inst_start: &'static str,
    pub inst_end: &'static str,
    pub answer_start: &'static str,
}

impl Markers {
    /// Fixed markers used at evaluation time.
    pub const EVAL: Markers = Markers {
        inst_start: "Q:",
        inst_end: "\n",
        answer_start: "A:",
    };

    /// Training markers, drawn uniformly.
    pub fn sample(rng: &mut impl Rng) -> Self {
        Markers {
            inst_start: INST_STARTS.choose(rng).unwrap(),
            inst_end: "\n",
            answer_start: ANSWER_STARTS.choose(rng).unwrap(),
        }
    }
}

/// Serialized example split at the start of the output segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Serialized {
    /// Everything the model conditions on, background included.
    pub prompt: String,
    /// The output segment; the training loss covers exactly these tokens.
    pub output: String,
}

impl Serialized {
    pub fn text(&self) -> String {
        format!("{} {}", self.prompt, self.output)
    }
}

fn field(marker: &str, text: &str) -> String {
    if marker.is_empty() || marker.ends_with(char::is_whitespace) {
        format!("{marker}{text}")
    } else {
        format!("{marker} {text}")
    }
}

/// Prompt body and output for an example, without the background field.
fn body(example: &FTExample, m: Markers) -> (String, String) {
    match example.category {
        Category::OpenQa | Category::ReadingComprehension => (
            format!("{}{}{}", field(m.inst_start, &example.instruction), m.inst_end, m.answer_start),
            example.output.clone(),
        ),
        Category::Summarization => (format!("{SUMMARIZE}{}{}", m.inst_end, m.answer_start), example.output.clone()),
        Category::Dialogue => {
            let mut prompt = String::new();
            for (i, turn) in example.instruction.lines().filter(|t| !t.trim().is_empty()).enumerate() {
                let speaker = if i % 2 == 0 { "Q:" } else { "A:" };
                prompt.push_str(&field(speaker, turn.trim()));
                prompt.push('\n');
            }
            prompt.push_str("A:");
            (prompt, example.output.clone())
        }
        Category::Cot => {
            let lines: Vec<&str> = example.output.lines().filter(|l| !l.trim().is_empty()).collect();
            let (answer, reasoning) = lines.split_last().map_or(("", &[][..]), |(a, r)| (*a, r));
            let mut output = String::new();
            for r in reasoning {
                output.push_str(r.trim());
                output.push('\n');
            }
            output.push_str(&field(m.answer_start, answer.trim()));
            (format!("{}{}", field(m.inst_start, &example.instruction), m.inst_end), output)
        }
    }
}

/// Renders an example with an optional background field.
pub fn serialize(example: &FTExample, background: Option<&str>, markers: Markers) -> Result<Serialized> {
    example.validate()?;
    let (body, output) = body(example, markers);
    let prompt = match background {
        Some(bg) => format!("{BACKGROUND_START}{bg}{BACKGROUND_END}{body}"),
        None => body,
    };
    Ok(Serialized { prompt, output })
}

/// Retrieval query for an example; summarization has none.
pub fn query_text(example: &FTExample) -> Option<String> {
    match example.category {
        Category::Summarization => None,
        Category::Dialogue => Some(
            example
                .instruction
                .lines()
                .map(str::trim)
                .filter(|t| !t.is_empty())
                .collect::<Vec<_>>()
                .join(" "),
        ),
        _ => Some(example.instruction.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn qa() -> FTExample {
        FTExample {
            task: "qa".into(),
            category: Category::OpenQa,
            instruction: "what is it ?".into(),
            output: "blue".into(),
            context: None,
            self_contained: false,
        }
    }

    #[test]
    fn open_qa_layout() {
        let s = serialize(&qa(), Some("the sky is blue ."), Markers::EVAL).unwrap();
        assert_eq!(s.text(), "Background: the sky is blue .\n\nQ: what is it ?\nA: blue");
        let plain = serialize(&qa(), None, Markers::EVAL).unwrap();
        assert_eq!(plain.prompt, "Q: what is it ?\nA:");
    }

    #[test]
    fn marker_variants() {
        let m = Markers {
            inst_start: "Question: ",
            inst_end: "\n",
            answer_start: "Answer:",
        };
        assert_eq!(serialize(&qa(), None, m).unwrap().text(), "Question: what is it ?\nAnswer: blue");
        let m = Markers {
            inst_start: "",
            ..Markers::EVAL
        };
        assert_eq!(serialize(&qa(), None, m).unwrap().text(), "what is it ?\nA: blue");
    }

    #[test]
    fn other_categories() {
        let summary = FTExample {
            category: Category::Summarization,
            instruction: String::new(),
            context: Some("long text".into()),
            output: "short".into(),
            ..qa()
        };
        let s = serialize(&summary, summary.context.as_deref(), Markers::EVAL).unwrap();
        assert_eq!(s.text(), "Background: long text\n\nSummarize this article:\nA: short");
        assert_eq!(query_text(&summary), None);

        let dialogue = FTExample {
            category: Category::Dialogue,
            instruction: "hi\nhello\nhow are you ?".into(),
            output: "fine".into(),
            ..qa()
        };
        let s = serialize(&dialogue, None, Markers::EVAL).unwrap();
        assert_eq!(s.text(), "Q: hi\nA: hello\nQ: how are you ?\nA: fine");
        assert_eq!(query_text(&dialogue).unwrap(), "hi hello how are you ?");

        let cot = FTExample {
            category: Category::Cot,
            instruction: "add 2 and 3".into(),
            output: "2 plus 3\nis 5\n5".into(),
            ..qa()
        };
        let s = serialize(&cot, None, Markers::EVAL).unwrap();
        assert_eq!(s.prompt, "Q: add 2 and 3\n");
        assert_eq!(s.output, "2 plus 3\nis 5\nA: 5");
    }

    #[test]
    fn seeded_markers_repeat() {
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| Markers::sample(&mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(draw(5), draw(5));
    }

    #[test]
    fn instruction_markers_are_uniform() {
        // Chi-square goodness of fit against 1/3 each, 2 degrees of freedom.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 3];
        let mut answer_a = 0usize;
        let n = 10_000;
        for _ in 0..n {
            let m = Markers::sample(&mut rng);
            counts[INST_STARTS.iter().position(|s| *s == m.inst_start).unwrap()] += 1;
            answer_a += usize::from(m.answer_start == "A:");
        }
        let expected = n as f64 / 3.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 13.8, "chi2 {chi2}"); // p = 0.001
        for c in counts {
            assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.02);
        }
        assert!((answer_a as f64 / n as f64 - 0.5).abs() < 0.02);
    }
}
