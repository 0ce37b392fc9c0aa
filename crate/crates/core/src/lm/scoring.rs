use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditioning string for the calibrated `nll_compl` scorer.
pub const COMPLETION_CONTEXT: &str = "Answer:";

/// Answer-scoring rules; lower values are better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scorer {
    /// Negative log-likelihood of the answer.
    Nll,
    /// `nll` divided by the answer's character count.
    NllChar,
    /// `nll` divided by the answer's token count.
    NllToken,
    /// `-log(p(answer | prompt) / p(answer | "Answer:"))`.
    NllCompl,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [Scorer::Nll, Scorer::NllChar, Scorer::NllToken, Scorer::NllCompl];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Nll => "nll",
            Scorer::NllChar => "nll_char",
            Scorer::NllToken => "nll_token",
            Scorer::NllCompl => "nll_compl",
        }
    }

    /// Score from a conditional log-probability. `reference_log_prob` is
    /// `log p(answer | "Answer:")` and is only read by `nll_compl`.
    pub fn apply(self, log_prob: f64, tokens: usize, chars: usize, reference_log_prob: impl FnOnce() -> Result<f64>) -> Result<f64> {
        let nll = -log_prob;
        Ok(match self {
            Scorer::Nll => nll,
            Scorer::NllToken => nll / tokens.max(1) as f64,
            Scorer::NllChar => nll / chars.max(1) as f64,
            Scorer::NllCompl => -(log_prob - reference_log_prob()?),
        })
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnswerScore {
    pub scorer: Scorer,
    pub value: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nll_is_negated_log_prob() {
        let v = Scorer::Nll.apply(-2.0, 1, 1, || unreachable!()).unwrap();
        assert_eq!(v, 2.0);
    }

    #[test]
    fn length_normalizations() {
        // 4 tokens, 10 characters, nll 2.0
        assert_eq!(Scorer::NllToken.apply(-2.0, 4, 10, || unreachable!()).unwrap(), 0.5);
        assert_eq!(Scorer::NllChar.apply(-2.0, 4, 10, || unreachable!()).unwrap(), 0.2);
    }

    #[test]
    fn names_round_trip() {
        for s in Scorer::ALL {
            assert_eq!(s.name().parse::<Scorer>().unwrap(), s);
        }
        assert!("nll_foo".parse::<Scorer>().is_err());
    }
}
