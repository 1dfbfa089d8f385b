//! Oracle rankers: anything that orders a group of candidate responses.
//!
//! The trainer only ever sees a [`RankPermutation`] back from an oracle, so
//! an exact scorer, a noisy judge and an external process are
//! interchangeable.

mod external;

pub use external::{ExternalOracle, WireReply, WireRequest, MAX_MESSAGE_BYTES};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{Prompt, Scorer};
use crate::policy::TokenSequence;
use crate::rank::RankPermutation;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRequest {
    pub id: u64,
    pub prompt: Prompt,
    /// Candidates in generation order; index `i` is response `o_i`.
    pub candidates: Vec<TokenSequence>,
}

impl OracleRequest {
    pub fn new(id: u64, prompt: Prompt, candidates: Vec<TokenSequence>) -> Result<Self, OracleError> {
        if candidates.len() < 2 {
            return Err(OracleError::InvalidRequest(format!(
                "need at least 2 candidates, got {}",
                candidates.len()
            )));
        }
        Ok(OracleRequest { id, prompt, candidates })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleVerdict {
    pub id: u64,
    pub ranking: RankPermutation,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    /// The judge did not answer in time or its process is gone.
    #[error("oracle unavailable: {reason}")]
    Unavailable { reason: String },
    /// The judge answered with something that is not a valid verdict for
    /// the pending request. `raw` holds the offending payload.
    #[error("malformed verdict ({reason}): {raw}")]
    MalformedVerdict { reason: String, raw: String },
    #[error("invalid oracle request: {0}")]
    InvalidRequest(String),
}

pub trait Oracle {
    fn rank(&mut self, request: &OracleRequest) -> Result<OracleVerdict, OracleError>;

    /// `false` once the oracle can no longer answer any request (for
    /// example its process exited). The trainer aborts instead of dropping
    /// every remaining group.
    fn is_alive(&self) -> bool {
        true
    }
}

impl<O: Oracle + ?Sized> Oracle for Box<O> {
    fn rank(&mut self, request: &OracleRequest) -> Result<OracleVerdict, OracleError> {
        (**self).rank(request)
    }

    fn is_alive(&self) -> bool {
        (**self).is_alive()
    }
}

/// Checks a verdict against its request: matching id, matching group size.
pub fn validate_verdict(
    request: &OracleRequest,
    id: u64,
    ranks: Vec<usize>,
    raw: &str,
) -> Result<OracleVerdict, OracleError> {
    if id != request.id {
        return Err(OracleError::MalformedVerdict {
            reason: format!("reply id {id} does not match request id {}", request.id),
            raw: raw.to_string(),
        });
    }
    if ranks.len() != request.len() {
        return Err(OracleError::MalformedVerdict {
            reason: format!("expected {} ranks, got {}", request.len(), ranks.len()),
            raw: raw.to_string(),
        });
    }
    let ranking = RankPermutation::new(ranks).map_err(|e| OracleError::MalformedVerdict {
        reason: e.to_string(),
        raw: raw.to_string(),
    })?;
    Ok(OracleVerdict { id, ranking })
}

/// Ranks by the environment's hidden quality, best first, ties to the
/// lower candidate index.
#[derive(Debug, Clone)]
pub struct ExactOracle<S> {
    scorer: S,
}

impl<S: Scorer> ExactOracle<S> {
    pub fn new(scorer: S) -> Self {
        ExactOracle { scorer }
    }

    pub fn scores(&self, request: &OracleRequest) -> Vec<f64> {
        request
            .candidates
            .iter()
            .map(|c| self.scorer.true_score(request.prompt, c))
            .collect()
    }
}

impl<S: Scorer> Oracle for ExactOracle<S> {
    fn rank(&mut self, request: &OracleRequest) -> Result<OracleVerdict, OracleError> {
        let ranking = RankPermutation::from_scores_desc(&self.scores(request))
            .map_err(|e| OracleError::InvalidRequest(e.to_string()))?;
        Ok(OracleVerdict { id: request.id, ranking })
    }
}

/// Wraps another oracle and perturbs its ranking with one best-to-worst
/// sweep of adjacent swaps, each taken with probability `swap_prob`.
#[derive(Debug, Clone)]
pub struct NoisyOracle<O> {
    inner: O,
    swap_prob: f64,
    rng: ChaCha8Rng,
}

impl<O: Oracle> NoisyOracle<O> {
    pub fn new(inner: O, swap_prob: f64, seed: u64) -> Result<Self, OracleError> {
        if !(0.0..=1.0).contains(&swap_prob) {
            return Err(OracleError::InvalidRequest(format!(
                "swap probability {swap_prob} outside [0, 1]"
            )));
        }
        Ok(NoisyOracle {
            inner,
            swap_prob,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl<O: Oracle> Oracle for NoisyOracle<O> {
    fn rank(&mut self, request: &OracleRequest) -> Result<OracleVerdict, OracleError> {
        let verdict = self.inner.rank(request)?;
        if self.swap_prob == 0.0 {
            return Ok(verdict);
        }
        let mut order = verdict.ranking.order();
        for pos in 0..order.len() - 1 {
            if self.rng.random::<f64>() < self.swap_prob {
                order.swap(pos, pos + 1);
            }
        }
        let ranking = RankPermutation::from_order(&order)
            .map_err(|e| OracleError::InvalidRequest(e.to_string()))?;
        Ok(OracleVerdict { id: verdict.id, ranking })
    }

    fn is_alive(&self) -> bool {
        self.inner.is_alive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Task, TaskSpec};
    use crate::policy::Vocab;

    /// Scores are looked up from the first token.
    struct FirstToken(Vec<f64>);

    impl Scorer for FirstToken {
        fn true_score(&self, _: Prompt, r: &TokenSequence) -> f64 {
            self.0[r.tokens[0]]
        }
    }

    fn cands(first: &[usize]) -> Vec<TokenSequence> {
        first
            .iter()
            .map(|&t| TokenSequence { tokens: vec![t], terminated: false })
            .collect()
    }

    #[test]
    fn exact_ranks_by_score() {
        let mut o = ExactOracle::new(FirstToken(vec![3.0, 1.0, 2.0]));
        let req = OracleRequest::new(4, Prompt(0), cands(&[0, 1, 2])).unwrap();
        let v = o.rank(&req).unwrap();
        assert_eq!(v.id, 4);
        assert_eq!(v.ranking.ranks(), &[0, 2, 1]);

        let mut tied = ExactOracle::new(FirstToken(vec![1.0, 1.0, 1.0]));
        assert_eq!(tied.rank(&req).unwrap().ranking.ranks(), &[0, 1, 2]);
    }

    #[test]
    fn exact_oracle_is_permutation_equivariant() {
        let scores = vec![0.3, -1.0, 2.5, 0.9, 0.0];
        let mut o = ExactOracle::new(FirstToken(scores));
        let base = o.rank(&OracleRequest::new(0, Prompt(0), cands(&[0, 1, 2, 3, 4])).unwrap()).unwrap();
        let perm = [3, 0, 4, 1, 2];
        let permuted = o.rank(&OracleRequest::new(1, Prompt(0), cands(&perm)).unwrap()).unwrap();
        for (pos, &src) in perm.iter().enumerate() {
            assert_eq!(permuted.ranking.ranks()[pos], base.ranking.ranks()[src]);
        }
    }

    #[test]
    fn request_needs_two_candidates() {
        assert!(OracleRequest::new(0, Prompt(0), cands(&[1])).is_err());
    }

    #[test]
    fn noisy_extremes() {
        let req = OracleRequest::new(0, Prompt(0), cands(&[0, 1])).unwrap();
        let exact = || ExactOracle::new(FirstToken(vec![1.0, 0.0]));
        let mut always = NoisyOracle::new(exact(), 1.0, 3).unwrap();
        for _ in 0..20 {
            assert_eq!(always.rank(&req).unwrap().ranking.ranks(), &[1, 0]);
        }
        let mut never = NoisyOracle::new(exact(), 0.0, 3).unwrap();
        for _ in 0..20 {
            assert_eq!(never.rank(&req).unwrap().ranking.ranks(), &[0, 1]);
        }
        assert!(NoisyOracle::new(exact(), 1.5, 0).is_err());
    }

    #[test]
    fn noisy_zero_matches_exact_on_random_requests() {
        let spec = TaskSpec { prompt_count: 3, ..TaskSpec::default() };
        let task = Task::new(spec).unwrap();
        let mut exact = ExactOracle::new(&task);
        let mut noisy = NoisyOracle::new(ExactOracle::new(&task), 0.0, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let vocab = Vocab::new(8, 0).unwrap();
        for id in 0..1000 {
            let k = rng.random_range(2..8);
            let c: Vec<_> = (0..k)
                .map(|_| {
                    let len = rng.random_range(1..6);
                    TokenSequence::new((0..len).map(|_| rng.random_range(0..8)).collect(), &vocab).unwrap()
                })
                .collect();
            let req = OracleRequest::new(id, Prompt(rng.random_range(0..3)), c).unwrap();
            assert_eq!(exact.rank(&req).unwrap(), noisy.rank(&req).unwrap());
        }
    }

    #[test]
    fn noisy_half_reverses_half_the_time() {
        let req = OracleRequest::new(0, Prompt(0), cands(&[0, 1])).unwrap();
        let mut o = NoisyOracle::new(ExactOracle::new(FirstToken(vec![1.0, 0.0])), 0.5, 17).unwrap();
        let n = 10_000;
        let flips = (0..n).filter(|_| o.rank(&req).unwrap().ranking.ranks() == [1, 0]).count();
        assert!((flips as f64 / n as f64 - 0.5).abs() < 0.02);
    }

    #[test]
    fn noisy_keeps_permutations_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for case in 0..10_000u64 {
            let k = rng.random_range(2..12);
            let scores: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = rng.random_range(0.0..=1.0);
            let mut o = NoisyOracle::new(ExactOracle::new(FirstToken(scores)), p, case).unwrap();
            let req = OracleRequest::new(case, Prompt(0), cands(&(0..k).collect::<Vec<_>>())).unwrap();
            let v = o.rank(&req).unwrap();
            assert!(RankPermutation::new(v.ranking.ranks().to_vec()).is_ok());
        }
    }

    #[test]
    fn verdict_validation() {
        let req = OracleRequest::new(7, Prompt(0), cands(&[0, 1, 2])).unwrap();
        assert!(validate_verdict(&req, 7, vec![2, 0, 1], "").is_ok());
        for (id, ranks) in [(8, vec![0, 1, 2]), (7, vec![0, 1]), (7, vec![0, 0, 1]), (7, vec![1, 2, 3])] {
            assert!(matches!(
                validate_verdict(&req, id, ranks, "raw"),
                Err(OracleError::MalformedVerdict { .. })
            ));
        }
    }
}
