//! Synthetic generation tasks with hidden, exactly computable quality.
//!
//! `TokenWeight` scores a response by the mean of hidden per-(prompt, token)
//! weights. `TargetMatch` scores it by negative normalized edit distance to
//! a hidden per-prompt target string, so a perfect answer scores `0` and a
//! fully wrong one `-1`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{TokenSequence, Vocab};

/// Prompt class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Prompt(pub usize);

impl std::fmt::Display for Prompt {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "prompt-{}", self.0)
    }
}

/// Anything that can score a response for a prompt.
pub trait Scorer {
    fn true_score(&self, prompt: Prompt, response: &TokenSequence) -> f64;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn true_score(&self, prompt: Prompt, response: &TokenSequence) -> f64 {
        (**self).true_score(prompt, response)
    }
}

impl<S: Scorer + ?Sized> Scorer for std::sync::Arc<S> {
    fn true_score(&self, prompt: Prompt, response: &TokenSequence) -> f64 {
        (**self).true_score(prompt, response)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TokenWeight,
    TargetMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    #[serde(default = "defaults::task_seed")]
    pub seed: u64,
    #[serde(default = "defaults::vocab_size")]
    pub vocab_size: usize,
    #[serde(default)]
    pub end_token: usize,
    #[serde(default = "defaults::prompt_count")]
    pub prompt_count: usize,
    #[serde(default = "defaults::max_len")]
    pub max_len: usize,
    /// Target string length for `TargetMatch`; ignored otherwise.
    #[serde(default = "defaults::target_len")]
    pub target_len: usize,
}

mod defaults {
    pub fn task_seed() -> u64 {
        7
    }
    pub fn vocab_size() -> usize {
        8
    }
    pub fn prompt_count() -> usize {
        1
    }
    pub fn max_len() -> usize {
        6
    }
    pub fn target_len() -> usize {
        4
    }
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::TargetMatch,
            seed: defaults::task_seed(),
            vocab_size: defaults::vocab_size(),
            end_token: 0,
            prompt_count: defaults::prompt_count(),
            max_len: defaults::max_len(),
            target_len: defaults::target_len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Hidden {
    /// `prompt_count x vocab` weights in `[-1, 1]`.
    TokenWeight(Vec<f64>),
    /// One target string per prompt, end token excluded.
    TargetMatch(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    spec: TaskSpec,
    vocab: Vocab,
    hidden: Hidden,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let vocab = Vocab::new(spec.vocab_size, spec.end_token)?;
        if spec.prompt_count == 0 {
            return Err(Error::InvalidArgument("prompt_count must be >= 1".into()));
        }
        if spec.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let hidden = match spec.kind {
            TaskKind::TokenWeight => Hidden::TokenWeight(
                (0..spec.prompt_count * spec.vocab_size)
                    .map(|_| rng.random_range(-1.0..=1.0))
                    .collect(),
            ),
            TaskKind::TargetMatch => {
                if spec.target_len == 0 {
                    return Err(Error::InvalidArgument("target_len must be >= 1".into()));
                }
                let content: Vec<usize> =
                    (0..spec.vocab_size).filter(|&t| t != spec.end_token).collect();
                Hidden::TargetMatch(
                    (0..spec.prompt_count)
                        .map(|_| {
                            (0..spec.target_len)
                                .map(|_| content[rng.random_range(0..content.len())])
                                .collect()
                        })
                        .collect(),
                )
            }
        };
        Ok(Task { spec, vocab, hidden })
    }

    /// TargetMatch task with explicit targets, for tests and fixtures.
    pub fn with_targets(spec: TaskSpec, targets: Vec<Vec<usize>>) -> Result<Self> {
        let vocab = Vocab::new(spec.vocab_size, spec.end_token)?;
        if targets.len() != spec.prompt_count {
            return Err(Error::LengthMismatch {
                expected: spec.prompt_count,
                actual: targets.len(),
            });
        }
        Ok(Task {
            spec: TaskSpec { kind: TaskKind::TargetMatch, ..spec },
            vocab,
            hidden: Hidden::TargetMatch(targets),
        })
    }

    /// TokenWeight task with explicit `prompt_count x vocab` weights.
    pub fn with_weights(spec: TaskSpec, weights: Vec<f64>) -> Result<Self> {
        let vocab = Vocab::new(spec.vocab_size, spec.end_token)?;
        if weights.len() != spec.prompt_count * spec.vocab_size {
            return Err(Error::LengthMismatch {
                expected: spec.prompt_count * spec.vocab_size,
                actual: weights.len(),
            });
        }
        Ok(Task {
            spec: TaskSpec { kind: TaskKind::TokenWeight, ..spec },
            vocab,
            hidden: Hidden::TokenWeight(weights),
        })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn prompt_count(&self) -> usize {
        self.spec.prompt_count
    }

    pub fn max_len(&self) -> usize {
        self.spec.max_len
    }

    pub fn target(&self, prompt: Prompt) -> Option<&[usize]> {
        match &self.hidden {
            Hidden::TargetMatch(t) => t.get(prompt.0).map(Vec::as_slice),
            Hidden::TokenWeight(_) => None,
        }
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Prompt {
        Prompt(rng.random_range(0..self.spec.prompt_count))
    }
}

impl Scorer for Task {
    fn true_score(&self, prompt: Prompt, response: &TokenSequence) -> f64 {
        match &self.hidden {
            Hidden::TokenWeight(w) => {
                let v = self.spec.vocab_size;
                let row = &w[prompt.0 * v..(prompt.0 + 1) * v];
                response.tokens.iter().map(|&t| row[t]).sum::<f64>()
                    / response.tokens.len().max(1) as f64
            }
            Hidden::TargetMatch(targets) => {
                let target = &targets[prompt.0];
                let content = response.content();
                let denom = content.len().max(target.len());
                if denom == 0 {
                    return 0.0;
                }
                -(edit_distance(content, target) as f64) / denom as f64
            }
        }
    }
}

/// Levenshtein distance with unit insert, delete and substitute costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}
