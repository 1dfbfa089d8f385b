//! Rank permutations and the DCG-based displacement penalty.
//!
//! Ranks are dense ordinals with `0` as the best response. A response's
//! penalty compares the discounted gain at the rank the policy predicted
//! against the gain at the rank the oracle assigned:
//!
//! ```text
//! delta_i = 1 - DCG(predicted_i) / DCG(truth_i)
//! ```
//!
//! Two discount curves are available through [`PenaltyMode`]. The default,
//! [`PenaltyMode::TableConsistent`], uses `log2(2 + r) / (1 + r)` and
//! compares the better of the two positions against the worse one, which
//! keeps every penalty in `[0, 1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Discount curve and ratio orientation used by the penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `(1 / (1 + r)) / log2(2 + r)`, ratio `DCG(predicted) / DCG(truth)`
    /// with no clamping. Penalties go negative when a response is ranked
    /// better than it deserves.
    AsWritten,
    /// `(1 / (1 + r)) * log2(2 + r)`, ratio of the worse position's gain to
    /// the better position's gain.
    #[default]
    TableConsistent,
}

impl std::fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PenaltyMode::AsWritten => f.write_str("as_written"),
            PenaltyMode::TableConsistent => f.write_str("table_consistent"),
        }
    }
}

impl std::str::FromStr for PenaltyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" | "as-written" => Ok(PenaltyMode::AsWritten),
            "table_consistent" | "table-consistent" => Ok(PenaltyMode::TableConsistent),
            other => Err(Error::InvalidArgument(format!("unknown penalty mode `{other}`"))),
        }
    }
}

/// A strict ordering of a response group: `ranks()[i]` is the rank of
/// response `i`, and the ranks are exactly `0..K` with `K >= 2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct RankPermutation(Vec<usize>);

impl RankPermutation {
    pub fn new(ranks: Vec<usize>) -> Result<Self> {
        let k = ranks.len();
        if k < 2 {
            return Err(Error::InvalidPermutation {
                ranks,
                reason: format!("need at least 2 entries, got {k}"),
            });
        }
        let mut seen = vec![false; k];
        for &r in &ranks {
            if r >= k {
                return Err(Error::InvalidPermutation {
                    reason: format!("rank {r} out of range 0..{k}"),
                    ranks,
                });
            }
            if seen[r] {
                return Err(Error::InvalidPermutation {
                    reason: format!("rank {r} appears more than once"),
                    ranks,
                });
            }
            seen[r] = true;
        }
        Ok(RankPermutation(ranks))
    }

    /// The identity ranking `(0, 1, ..., k-1)`.
    pub fn identity(k: usize) -> Result<Self> {
        Self::new((0..k).collect())
    }

    /// Builds the ranking from a best-to-worst list of response indices.
    pub fn from_order(order: &[usize]) -> Result<Self> {
        let k = order.len();
        let mut ranks = vec![usize::MAX; k];
        for (rank, &idx) in order.iter().enumerate() {
            if idx >= k || ranks[idx] != usize::MAX {
                return Err(Error::InvalidPermutation {
                    ranks: order.to_vec(),
                    reason: format!("order entry {idx} is out of range or repeated"),
                });
            }
            ranks[idx] = rank;
        }
        Self::new(ranks)
    }

    /// Ranks by descending score, ties broken by lower index.
    pub fn from_scores_desc(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores"));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        // stable sort keeps index order among equal scores
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        Self::from_order(&order)
    }

    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Response indices from best to worst.
    pub fn order(&self) -> Vec<usize> {
        let mut order = vec![0; self.0.len()];
        for (idx, &rank) in self.0.iter().enumerate() {
            order[rank] = idx;
        }
        order
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }
}

impl<'de> Deserialize<'de> for RankPermutation {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let ranks = Vec::<usize>::deserialize(deserializer)?;
        RankPermutation::new(ranks).map_err(serde::de::Error::custom)
    }
}

/// Per-response penalties for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PenaltyVector(pub Vec<f64>);

impl PenaltyVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl From<Vec<f64>> for PenaltyVector {
    fn from(v: Vec<f64>) -> Self {
        PenaltyVector(v)
    }
}

/// Discounted gain of a single rank position. `dcg(0, _) == 1` in both
/// modes and the curve is strictly decreasing over the non-negative
/// integers.
pub fn dcg(rank: usize, mode: PenaltyMode) -> f64 {
    let r = rank as f64;
    let gain = 1.0 / (1.0 + r);
    let discount = (2.0 + r).log2();
    match mode {
        PenaltyMode::AsWritten => gain / discount,
        PenaltyMode::TableConsistent => gain * discount,
    }
}

pub fn ndcg_pair(predicted: usize, truth: usize, mode: PenaltyMode) -> f64 {
    match mode {
        PenaltyMode::AsWritten => dcg(predicted, mode) / dcg(truth, mode),
        PenaltyMode::TableConsistent => {
            if predicted == truth {
                return 1.0;
            }
            let worse = predicted.max(truth);
            let better = predicted.min(truth);
            dcg(worse, mode) / dcg(better, mode)
        }
    }
}

pub fn penalty(predicted: usize, truth: usize, mode: PenaltyMode) -> f64 {
    1.0 - ndcg_pair(predicted, truth, mode)
}

/// Responsewise penalties of `predicted` against `truth`.
pub fn group_penalties(
    predicted: &RankPermutation,
    truth: &RankPermutation,
    mode: PenaltyMode,
) -> Result<PenaltyVector> {
    if predicted.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: predicted.len(),
        });
    }
    Ok(PenaltyVector(
        predicted
            .ranks()
            .iter()
            .zip(truth.ranks())
            .map(|(&p, &t)| penalty(p, t, mode))
            .collect(),
    ))
}

/// Spearman rank correlation between two strict rankings of equal length.
pub fn spearman(a: &RankPermutation, b: &RankPermutation) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let k = a.len() as f64;
    let d2: f64 = a
        .ranks()
        .iter()
        .zip(b.ranks())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(1.0 - 6.0 * d2 / (k * (k * k - 1.0)))
}

/// Average (mid) ranks of `xs`, largest value first, starting at 0. Equal
/// values share the mean of the positions they occupy.
fn mid_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]));
    let mut out = vec![0.0; xs.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && xs[idx[end]] == xs[idx[start]] {
            end += 1;
        }
        let mid = (start + end - 1) as f64 / 2.0;
        for &i in &idx[start..end] {
            out[i] = mid;
        }
        start = end;
    }
    out
}

/// Tie-aware Spearman correlation of two score vectors: the Pearson
/// correlation of their mid-ranks. `None` when either side is constant, so
/// groups of identical responses do not count as agreement.
pub fn spearman_scores(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let (ra, rb) = (mid_ranks(a), mid_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(None);
    }
    Ok(Some(sab / (saa * sbb).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn tie_aware_spearman() {
        assert_eq!(spearman_scores(&[1.0, 1.0, 1.0], &[3.0, 2.0, 1.0]).unwrap(), None);
        assert_abs_diff_eq!(spearman_scores(&[3.0, 2.0, 1.0], &[0.3, 0.2, 0.1]).unwrap().unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(spearman_scores(&[3.0, 2.0, 1.0], &[0.1, 0.2, 0.3]).unwrap().unwrap(), -1.0, epsilon = 1e-12);
        // without ties it equals the rank-difference formula
        let a = [0.4, -1.0, 2.0, 0.0, 1.5];
        let b = [1.0, 0.5, 0.2, -0.3, 2.0];
        let strict = spearman(
            &RankPermutation::from_scores_desc(&a).unwrap(),
            &RankPermutation::from_scores_desc(&b).unwrap(),
        )
        .unwrap();
        assert_abs_diff_eq!(spearman_scores(&a, &b).unwrap().unwrap(), strict, epsilon = 1e-12);
        assert!(spearman_scores(&[1.0], &[1.0, 2.0]).is_err());
    }

    use PenaltyMode::*;

    fn perm(r: &[usize]) -> RankPermutation {
        RankPermutation::new(r.to_vec()).unwrap()
    }

    #[test]
    fn dcg_reference_values() {
        assert_abs_diff_eq!(dcg(0, TableConsistent), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dcg(0, AsWritten), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dcg(1, TableConsistent), 0.7925, epsilon = 5e-5);
        assert_abs_diff_eq!(dcg(4, TableConsistent), 0.5170, epsilon = 5e-5);
        assert_abs_diff_eq!(dcg(1, AsWritten), 0.315465, epsilon = 5e-7);
    }

    #[test]
    fn ndcg_and_penalty_examples() {
        assert_abs_diff_eq!(ndcg_pair(1, 0, TableConsistent), 0.7925, epsilon = 5e-5);
        assert_abs_diff_eq!(ndcg_pair(4, 0, TableConsistent), 0.5170, epsilon = 5e-5);
        assert_abs_diff_eq!(penalty(1, 0, TableConsistent), 0.2075, epsilon = 5e-5);
        assert_abs_diff_eq!(penalty(3, 0, TableConsistent), 0.4195, epsilon = 5e-5);
        for k in 0..20 {
            assert_eq!(ndcg_pair(k, k, AsWritten), 1.0);
            assert_eq!(ndcg_pair(k, k, TableConsistent), 1.0);
            assert_eq!(penalty(k, k, AsWritten), 0.0);
            assert_eq!(penalty(k, k, TableConsistent), 0.0);
        }
    }

    #[test]
    fn as_written_penalty_goes_negative_on_promotion() {
        assert!(penalty(0, 3, AsWritten) < 0.0);
        assert!(penalty(0, 3, TableConsistent) > 0.0);
        assert_eq!(penalty(0, 3, TableConsistent), penalty(3, 0, TableConsistent));
    }

    #[test]
    fn group_penalty_examples() {
        let id = perm(&[0, 1, 2]);
        assert_eq!(group_penalties(&id, &id, TableConsistent).unwrap().0, vec![0.0; 3]);

        let d = group_penalties(&perm(&[1, 0]), &perm(&[0, 1]), TableConsistent).unwrap();
        assert_abs_diff_eq!(d.0[0], 0.2075, epsilon = 5e-5);
        assert_abs_diff_eq!(d.0[1], 0.2075, epsilon = 5e-5);

        let d = group_penalties(&perm(&[0, 2, 1, 3, 4]), &perm(&[0, 1, 2, 3, 4]), TableConsistent)
            .unwrap();
        // 1 - ((1/3) log2 4) / ((1/2) log2 3)
        let expected = 1.0 - (2.0 / 3.0) / (0.5 * 3f64.log2());
        assert_abs_diff_eq!(expected, 0.1588, epsilon = 5e-5);
        assert_eq!(d.0[0], 0.0);
        assert_abs_diff_eq!(d.0[1], expected, epsilon = 1e-12);
        assert_abs_diff_eq!(d.0[2], expected, epsilon = 1e-12);
        assert_eq!(&d.0[3..], &[0.0, 0.0]);
    }

    #[test]
    fn group_penalty_errors() {
        let err = group_penalties(&perm(&[0, 1]), &perm(&[0, 1, 2]), TableConsistent).unwrap_err();
        assert!(matches!(err, Error::LengthMismatch { .. }));
        assert!(matches!(
            RankPermutation::new(vec![0, 0, 1]),
            Err(Error::InvalidPermutation { .. })
        ));
        assert!(matches!(
            RankPermutation::new(vec![0, 2]),
            Err(Error::InvalidPermutation { .. })
        ));
        assert!(matches!(RankPermutation::new(vec![0]), Err(Error::InvalidPermutation { .. })));
    }

    #[test]
    fn permutation_deserialize_validates() {
        let ok: RankPermutation = serde_json::from_str("[2,0,1]").unwrap();
        assert_eq!(ok.ranks(), &[2, 0, 1]);
        assert!(serde_json::from_str::<RankPermutation>("[1,1]").is_err());
    }

    #[test]
    fn scores_to_ranks() {
        assert_eq!(RankPermutation::from_scores_desc(&[3.0, 1.0, 2.0]).unwrap().ranks(), &[0, 2, 1]);
        assert_eq!(RankPermutation::from_scores_desc(&[1.0, 1.0, 1.0]).unwrap().ranks(), &[0, 1, 2]);
        assert!(RankPermutation::from_scores_desc(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn dcg_strictly_decreasing() {
        for mode in [AsWritten, TableConsistent] {
            let mut prev = dcg(0, mode);
            for r in 1..=10_000 {
                let cur = dcg(r, mode);
                assert!(cur > 0.0 && cur < prev, "mode {mode} rank {r}");
                prev = cur;
            }
        }
    }

    #[test]
    fn top_displacement_costs_more_than_bottom() {
        for k in 3..=64 {
            for mode in [AsWritten, TableConsistent] {
                assert!(penalty(1, 0, mode) > penalty(k - 1, k - 2, mode));
            }
        }
    }

    #[test]
    fn spearman_extremes() {
        let a = perm(&[0, 1, 2, 3]);
        let b = perm(&[3, 2, 1, 0]);
        assert_abs_diff_eq!(spearman(&a, &a).unwrap(), 1.0);
        assert_abs_diff_eq!(spearman(&a, &b).unwrap(), -1.0);
    }

    fn arb_perm() -> impl Strategy<Value = RankPermutation> {
        (2usize..40).prop_flat_map(|k| {
            Just((0..k).collect::<Vec<_>>())
                .prop_shuffle()
                .prop_map(|v| RankPermutation::new(v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn permutation_sorts_to_identity(p in arb_perm()) {
            let mut r = p.ranks().to_vec();
            r.sort_unstable();
            prop_assert_eq!(r, (0..p.len()).collect::<Vec<_>>());
            prop_assert_eq!(RankPermutation::from_order(&p.order()).unwrap(), p);
        }

        #[test]
        fn identical_rankings_have_zero_penalty(p in arb_perm()) {
            for mode in [AsWritten, TableConsistent] {
                let d = group_penalties(&p, &p, mode).unwrap();
                prop_assert!(d.0.iter().all(|&x| x == 0.0));
            }
        }

        #[test]
        fn table_mode_penalty_bounded(a in 0usize..64, b in 0usize..64) {
            let d = penalty(a, b, TableConsistent);
            prop_assert!((0.0..1.0).contains(&d));
        }
    }
}
