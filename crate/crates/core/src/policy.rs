//! Tabular autoregressive softmax policies.
//!
//! A policy conditions on the last `context_order` tokens of the response
//! (left-padded with a reserved pad id at the start of a sequence) and,
//! optionally, on the prompt class through an additive logit offset. All
//! parameters live in one flat vector so optimizers and finite-difference
//! checks can treat the policy as a point in `R^n`:
//!
//! ```text
//! [ context rows: (V + 1)^n x V ][ prompt offsets: prompt_count x V ]
//! ```

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::env::Prompt;
use crate::error::{Error, Result};
use crate::rank::RankPermutation;

/// Token alphabet. Ids are `0..size`; `size` itself is the pad id used
/// only inside context windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    end_token: usize,
}

impl Vocab {
    pub fn new(size: usize, end_token: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!("vocab size must be >= 2, got {size}")));
        }
        if end_token >= size {
            return Err(Error::InvalidArgument(format!(
                "end token {end_token} outside vocab of size {size}"
            )));
        }
        Ok(Vocab { size, end_token })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn end_token(&self) -> usize {
        self.end_token
    }

    pub fn pad(&self) -> usize {
        self.size
    }
}

/// A sampled response. `terminated` is set when the end token was emitted;
/// otherwise the response was cut at the length cap.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub terminated: bool,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocab of size {}",
                vocab.size()
            )));
        }
        let terminated = tokens.last() == Some(&vocab.end_token());
        Ok(TokenSequence { tokens, terminated })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens before the end token.
    pub fn content(&self) -> &[usize] {
        if self.terminated {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    /// Space-separated token ids, the form sent to external judges.
    pub fn render(&self) -> String {
        let parts: Vec<String> = self.tokens.iter().map(|t| t.to_string()).collect();
        parts.join(" ")
    }
}

/// Teacher-forced log-probabilities of a response, in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbTrace {
    pub per_token: Vec<f64>,
    pub total: f64,
}

impl LogProbTrace {
    pub fn new(per_token: Vec<f64>) -> Self {
        let total = per_token.iter().sum();
        LogProbTrace { per_token, total }
    }

    pub fn len(&self) -> usize {
        self.per_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_token.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.total / self.per_token.len().max(1) as f64
    }
}

/// How a response's log-probability trace is summarized before ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    /// Total log-probability of the sequence.
    #[default]
    Sum,
    /// Per-token mean, which removes the bias toward short responses.
    Mean,
}

impl RankBy {
    pub fn score(&self, trace: &LogProbTrace) -> f64 {
        match self {
            RankBy::Sum => trace.total,
            RankBy::Mean => trace.mean(),
        }
    }
}

/// Dense gradient over a policy's flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient(pub Vec<f64>);

impl Gradient {
    pub fn zeros(n: usize) -> Self {
        Gradient(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_scaled(&mut self, other: &Gradient, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|g| *g *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, g| m.max(g.abs()))
    }

    /// Index of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.0.iter().position(|g| !g.is_finite())
    }
}

/// One teacher-forced decoding step.
#[derive(Debug, Clone)]
pub struct Step {
    pub row: usize,
    pub token: usize,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Step {
    pub fn log_prob(&self) -> f64 {
        self.log_probs[self.token]
    }

    pub fn entropy(&self) -> f64 {
        categorical_entropy(&self.probs, &self.log_probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab: Vocab,
    context_order: usize,
    prompt_count: usize,
    prompt_embedding: bool,
    params: Vec<f64>,
}

impl Policy {
    /// A uniform policy (all logits zero).
    pub fn new(
        vocab: Vocab,
        context_order: usize,
        prompt_count: usize,
        prompt_embedding: bool,
    ) -> Result<Self> {
        if prompt_count == 0 {
            return Err(Error::InvalidArgument("prompt_count must be >= 1".into()));
        }
        let rows = (vocab.size() + 1)
            .checked_pow(context_order as u32)
            .filter(|r| r.saturating_mul(vocab.size()) <= 1 << 26)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "context table too large for vocab {} and order {context_order}",
                    vocab.size()
                ))
            })?;
        let n = rows * vocab.size() + if prompt_embedding { prompt_count * vocab.size() } else { 0 };
        Ok(Policy {
            vocab,
            context_order,
            prompt_count,
            prompt_embedding,
            params: vec![0.0; n],
        })
    }

    /// Rebuilds a policy from raw parameters, checking the layout.
    pub fn from_params(
        vocab: Vocab,
        context_order: usize,
        prompt_count: usize,
        prompt_embedding: bool,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut policy = Self::new(vocab, context_order, prompt_count, prompt_embedding)?;
        if params.len() != policy.params.len() {
            return Err(Error::LengthMismatch {
                expected: policy.params.len(),
                actual: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("policy parameters"));
        }
        policy.params = params;
        Ok(policy)
    }

    /// Draws every parameter from `N(0, std^2)`.
    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) -> Result<()> {
        if std == 0.0 {
            self.params.iter_mut().for_each(|p| *p = 0.0);
            return Ok(());
        }
        let normal = Normal::new(0.0, std)
            .map_err(|e| Error::InvalidArgument(format!("init scale {std}: {e}")))?;
        self.params.iter_mut().for_each(|p| *p = normal.sample(rng));
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn context_order(&self) -> usize {
        self.context_order
    }

    pub fn prompt_count(&self) -> usize {
        self.prompt_count
    }

    pub fn prompt_embedding(&self) -> bool {
        self.prompt_embedding
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn row_count(&self) -> usize {
        self.params.len() / self.vocab.size()
            - if self.prompt_embedding { self.prompt_count } else { 0 }
    }

    fn bias_offset(&self, prompt: Prompt) -> Option<usize> {
        self.prompt_embedding.then(|| {
            debug_assert!(prompt.0 < self.prompt_count);
            (self.row_count() + prompt.0) * self.vocab.size()
        })
    }

    /// Table row of a context window given in oldest-to-newest order.
    fn row_of_window(&self, window: &[usize]) -> usize {
        let base = self.vocab.size() + 1;
        window.iter().fold(0, |acc, &t| acc * base + t)
    }

    /// Row for predicting the token after `prefix`.
    pub fn row_after(&self, prefix: &[usize]) -> usize {
        let n = self.context_order;
        let pad = self.vocab.pad();
        let base = self.vocab.size() + 1;
        let start = prefix.len().saturating_sub(n);
        let mut row = 0;
        for _ in prefix.len() - start..n {
            row = row * base + pad;
        }
        for &t in &prefix[start..] {
            row = row * base + t;
        }
        row
    }

    fn logits(&self, prompt: Prompt, row: usize) -> Vec<f64> {
        let v = self.vocab.size();
        let mut z = self.params[row * v..(row + 1) * v].to_vec();
        if let Some(off) = self.bias_offset(prompt) {
            for (zi, b) in z.iter_mut().zip(&self.params[off..off + v]) {
                *zi += b;
            }
        }
        z
    }

    fn step_at(&self, prompt: Prompt, row: usize) -> (Vec<f64>, Vec<f64>) {
        log_softmax(&self.logits(prompt, row))
    }

    /// Next-token distribution for an explicit context window of exactly
    /// `context_order` ids (the pad id marks positions before the start).
    pub fn token_distribution(&self, prompt: Prompt, context: &[usize]) -> Result<Vec<f64>> {
        if context.len() != self.context_order {
            return Err(Error::LengthMismatch {
                expected: self.context_order,
                actual: context.len(),
            });
        }
        if let Some(&bad) = context.iter().find(|&&t| t > self.vocab.pad()) {
            return Err(Error::InvalidArgument(format!("context id {bad} out of range")));
        }
        self.check_prompt(prompt)?;
        Ok(self.step_at(prompt, self.row_of_window(context)).0)
    }

    fn check_prompt(&self, prompt: Prompt) -> Result<()> {
        if prompt.0 >= self.prompt_count {
            return Err(Error::InvalidArgument(format!(
                "prompt {} outside 0..{}",
                prompt.0, self.prompt_count
            )));
        }
        Ok(())
    }

    /// Ancestral sampling until the end token or `max_len` tokens.
    pub fn sample_response<R: Rng + ?Sized>(
        &self,
        prompt: Prompt,
        max_len: usize,
        rng: &mut R,
    ) -> TokenSequence {
        self.decode(prompt, max_len, |probs| sample_categorical(probs, rng.random::<f64>()))
    }

    /// Argmax decoding, ties to the lower token id.
    pub fn greedy_response(&self, prompt: Prompt, max_len: usize) -> TokenSequence {
        self.decode(prompt, max_len, |probs| {
            probs
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0
        })
    }

    fn decode(
        &self,
        prompt: Prompt,
        max_len: usize,
        mut pick: impl FnMut(&[f64]) -> usize,
    ) -> TokenSequence {
        let max_len = max_len.max(1);
        let mut tokens = Vec::with_capacity(max_len);
        let mut terminated = false;
        while tokens.len() < max_len {
            let (probs, _) = self.step_at(prompt, self.row_after(&tokens));
            let tok = pick(&probs);
            tokens.push(tok);
            if tok == self.vocab.end_token() {
                terminated = true;
                break;
            }
        }
        TokenSequence { tokens, terminated }
    }

    /// Teacher-forced steps over a response.
    pub fn steps(&self, prompt: Prompt, response: &TokenSequence) -> Vec<Step> {
        (0..response.tokens.len())
            .map(|t| {
                let row = self.row_after(&response.tokens[..t]);
                let (probs, log_probs) = self.step_at(prompt, row);
                Step {
                    row,
                    token: response.tokens[t],
                    probs,
                    log_probs,
                }
            })
            .collect()
    }

    pub fn sequence_log_prob(&self, prompt: Prompt, response: &TokenSequence) -> LogProbTrace {
        LogProbTrace::new(
            self.steps(prompt, response)
                .iter()
                .map(Step::log_prob)
                .collect(),
        )
    }

    /// Mean per-step categorical entropy over the contexts the response
    /// visits.
    pub fn sequence_entropy(&self, prompt: Prompt, response: &TokenSequence) -> f64 {
        let steps = self.steps(prompt, response);
        steps.iter().map(Step::entropy).sum::<f64>() / steps.len().max(1) as f64
    }

    /// Gradient of the response's total log-probability.
    pub fn log_prob_gradient(&self, prompt: Prompt, response: &TokenSequence) -> Gradient {
        let mut grad = Gradient::zeros(self.num_params());
        for step in self.steps(prompt, response) {
            let coeffs: Vec<f64> = step
                .probs
                .iter()
                .enumerate()
                .map(|(k, p)| if k == step.token { 1.0 - p } else { -p })
                .collect();
            self.accumulate(&mut grad, prompt, step.row, &coeffs, 1.0);
        }
        grad
    }

    /// Adds `scale * dlogits` for one context row to a gradient, routing it
    /// to the row block and to the prompt offset when enabled.
    pub fn accumulate(
        &self,
        grad: &mut Gradient,
        prompt: Prompt,
        row: usize,
        dlogits: &[f64],
        scale: f64,
    ) {
        let v = self.vocab.size();
        for (g, d) in grad.0[row * v..(row + 1) * v].iter_mut().zip(dlogits) {
            *g += scale * d;
        }
        if let Some(off) = self.bias_offset(prompt) {
            for (g, d) in grad.0[off..off + v].iter_mut().zip(dlogits) {
                *g += scale * d;
            }
        }
    }

    /// Full next-token distributions for every context row (tests and
    /// exact KL use this on tiny vocabularies).
    pub fn row_distribution(&self, prompt: Prompt, row: usize) -> (Vec<f64>, Vec<f64>) {
        self.step_at(prompt, row)
    }
}

/// `(softmax(z), log_softmax(z))`.
pub fn log_softmax(z: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = z.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    let log_probs: Vec<f64> = z.iter().map(|x| x - lse).collect();
    let probs = log_probs.iter().map(|l| l.exp()).collect();
    (probs, log_probs)
}

/// `-sum p ln p`, computed from log-probabilities so underflowed
/// probabilities contribute zero instead of NaN.
pub fn categorical_entropy(probs: &[f64], log_probs: &[f64]) -> f64 {
    -probs
        .iter()
        .zip(log_probs)
        .map(|(p, l)| if *p == 0.0 { 0.0 } else { p * l })
        .sum::<f64>()
}

/// Inverse-CDF draw with `u` in `[0, 1)`.
pub fn sample_categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left the cumulative sum just under 1
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Predicted ranks from per-response scores: rank 0 goes to the largest
/// score, ties go to the lower index.
pub fn predicted_ranks(totals: &[f64]) -> Result<RankPermutation> {
    RankPermutation::from_scores_desc(totals)
}
