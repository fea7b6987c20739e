//! Task families and dataset generation.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{self, BOS, EOS, EQUALS, QUERY, REVERSE};
use crate::error::{Error, Result};
use crate::evaluator::FormatSpec;
use crate::model::Token;
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// `a + b =` → `(a + b) mod m`, with `a, b ∈ [0, m)`.
    ModularSum,
    /// `~ letters =` → the letters reversed; 1 to `param` letters.
    CopyReverse,
    /// `a ? b =` → one of `<`, `>`, `|` (same), with `a, b ∈ [0, m)`.
    Comparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Modulus for the arithmetic families, maximum length for copy_reverse.
    pub param: u32,
    pub open: Token,
    pub close: Token,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Eval => 1,
        }
    }
}

/// One prompt with its gold answer, the answer wrapped in the format tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub prompt: Vec<Token>,
    pub gold: Vec<Token>,
}

impl Sample {
    /// The answer without its format tags.
    pub fn content(&self) -> &[Token] {
        &self.gold[1..self.gold.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub task: TaskSpec,
    pub split: Split,
    pub samples: Vec<Sample>,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, param: u32, seed: u64) -> Self {
        Self {
            kind,
            param,
            open: vocab::OPEN,
            close: vocab::CLOSE,
            seed,
        }
    }

    pub fn modular_sum(modulus: u32, seed: u64) -> Self {
        Self::new(TaskKind::ModularSum, modulus, seed)
    }

    pub fn copy_reverse(max_len: u32, seed: u64) -> Self {
        Self::new(TaskKind::CopyReverse, max_len, seed)
    }

    pub fn comparison(modulus: u32, seed: u64) -> Self {
        Self::new(TaskKind::Comparison, modulus, seed)
    }

    /// Tokens that may appear in an answer.
    pub fn answer_alphabet(&self) -> Vec<Token> {
        match self.kind {
            TaskKind::ModularSum => vocab::digit_alphabet(),
            TaskKind::CopyReverse => vocab::letter_alphabet(),
            TaskKind::Comparison => vec![vocab::LESS, vocab::GREATER, vocab::SAME],
        }
    }

    /// Every token a prompt or answer of this task can contain.
    pub fn data_alphabet(&self) -> Vec<Token> {
        let mut a = self.answer_alphabet();
        a.extend([BOS, EQUALS, EOS]);
        match self.kind {
            TaskKind::ModularSum => a.push(vocab::PLUS),
            TaskKind::CopyReverse => a.push(REVERSE),
            TaskKind::Comparison => {
                a.extend(vocab::digit_alphabet());
                a.push(QUERY);
            }
        }
        a
    }

    pub fn max_answer_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularSum => vocab::digits_of(self.param - 1).len(),
            TaskKind::CopyReverse => self.param as usize,
            TaskKind::Comparison => 1,
        }
    }

    pub fn max_prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::ModularSum | TaskKind::Comparison => {
                3 + 2 * vocab::digits_of(self.param - 1).len()
            }
            TaskKind::CopyReverse => 3 + self.param as usize,
        }
    }

    /// Longest training sequence: prompt, tagged answer, end of sequence.
    pub fn max_sequence_len(&self) -> usize {
        self.max_prompt_len() + self.max_answer_len() + 3
    }

    pub fn format_spec(&self) -> FormatSpec {
        FormatSpec {
            open: self.open,
            close: self.close,
            max_len: self.max_answer_len(),
            alphabet: self.answer_alphabet(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = match self.kind {
            TaskKind::ModularSum | TaskKind::Comparison => (2, 100),
            TaskKind::CopyReverse => (1, 12),
        };
        if !(lo..=hi).contains(&self.param) {
            return Err(Error::Config(format!(
                "{:?} parameter must be in {lo}..={hi}, got {}",
                self.kind, self.param
            )));
        }
        if self.open == self.close {
            return Err(Error::Config("open and close tags must differ".into()));
        }
        let data = self.data_alphabet();
        for tag in [self.open, self.close] {
            if data.contains(&tag) {
                return Err(Error::Config(format!(
                    "format tag {tag} collides with the task alphabet"
                )));
            }
        }
        Ok(())
    }

    fn wrap(&self, content: Vec<Token>) -> Vec<Token> {
        let mut gold = Vec::with_capacity(content.len() + 2);
        gold.push(self.open);
        gold.extend(content);
        gold.push(self.close);
        gold
    }

    fn draw(&self, rng: &mut RngStream) -> Sample {
        let m = u64::from(self.param);
        match self.kind {
            TaskKind::ModularSum | TaskKind::Comparison => {
                let a = rng.below(m) as u32;
                let b = rng.below(m) as u32;
                let (op, answer) = if self.kind == TaskKind::ModularSum {
                    (vocab::PLUS, vocab::digits_of((a + b) % self.param))
                } else {
                    let rel = match a.cmp(&b) {
                        std::cmp::Ordering::Less => vocab::LESS,
                        std::cmp::Ordering::Greater => vocab::GREATER,
                        std::cmp::Ordering::Equal => vocab::SAME,
                    };
                    (QUERY, vec![rel])
                };
                let mut prompt = vec![BOS];
                prompt.extend(vocab::digits_of(a));
                prompt.push(op);
                prompt.extend(vocab::digits_of(b));
                prompt.push(EQUALS);
                Sample {
                    prompt,
                    gold: self.wrap(answer),
                }
            }
            TaskKind::CopyReverse => {
                let len = 1 + rng.below(m) as usize;
                let letters: Vec<Token> = (0..len)
                    .map(|_| vocab::letter(rng.below(u64::from(vocab::LETTER_COUNT)) as u32))
                    .collect();
                let mut prompt = vec![BOS, REVERSE];
                prompt.extend(&letters);
                prompt.push(EQUALS);
                Sample {
                    prompt,
                    gold: self.wrap(letters.into_iter().rev().collect()),
                }
            }
        }
    }
}

pub fn generate_split(spec: &TaskSpec, n: usize, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    let mut rng = RngStream::new(spec.seed).child(&[split.tag()]);
    Ok(Dataset {
        task: *spec,
        split,
        samples: (0..n).map(|_| spec.draw(&mut rng)).collect(),
    })
}

/// Training split of `n` samples.
pub fn generate_dataset(spec: &TaskSpec, n: usize) -> Result<Dataset> {
    generate_split(spec, n, Split::Train)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// One `{"prompt":[..],"gold":[..]}` record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s).expect("sample serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}
