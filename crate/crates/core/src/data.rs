//! Prompt pair batches and answer specifications.

use crate::error::{AblateError, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// One token-level answer entry: at `position`, which token ids count as
/// correct and which as incorrect (for logit-difference style metrics).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenAnswer {
    pub position: usize,
    pub correct: Vec<usize>,
    pub incorrect: Vec<usize>,
}

/// Answer specification for one prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum AnswerSpec {
    /// Classification-style answers per position.
    Tokens(Vec<TokenAnswer>),
    /// Regression targets `[T, d_out]`; `incorrect` optionally holds the
    /// corrupt-side targets.
    Regression {
        targets: Tensor,
        incorrect: Option<Tensor>,
    },
}

impl AnswerSpec {
    pub fn validate(&self) -> Result<()> {
        if let AnswerSpec::Tokens(entries) = self {
            for e in entries {
                if e.correct.iter().any(|c| e.incorrect.contains(c)) {
                    return Err(AblateError::InvalidConfig(format!(
                        "answer at position {} has overlapping correct/incorrect sets",
                        e.position
                    )));
                }
            }
        }
        Ok(())
    }
}

/// An aligned clean/corrupt token pair with its answer specification.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub clean: Vec<usize>,
    pub corrupt: Vec<usize>,
    pub answer: AnswerSpec,
}

/// Index-aligned clean/corrupt prompt pairs.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct PromptPairBatch {
    pub pairs: Vec<PromptPair>,
}

impl PromptPairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Reject pairs whose clean and corrupt sequences differ in length.
    /// No alignment heuristics; tasks are template-matched.
    pub fn check_pair_lengths(&self) -> Result<()> {
        for (i, p) in self.pairs.iter().enumerate() {
            if p.clean.len() != p.corrupt.len() {
                return Err(AblateError::PairLengthMismatch {
                    pair: i,
                    clean: p.clean.len(),
                    corrupt: p.corrupt.len(),
                });
            }
        }
        Ok(())
    }
}
