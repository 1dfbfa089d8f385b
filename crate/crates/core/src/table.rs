//! Worked rank-advantage table for one displaced response.
//!
//! For a group of `k` responses whose true rank is `truth`, row `p` shows
//! what happens when the policy places the response at rank `p`: its DCG,
//! nDCG, penalty, the group's expected penalty (the mean over all `k`
//! possible predictions) and the resulting advantage.
//!
//! The published table was computed from 4-decimal intermediate values, so
//! DCG, nDCG and the penalty are each rounded to 4 decimals before the next
//! column is derived from them. The unrounded chain differs in the fourth
//! decimal for some cells (the advantage of rank 2 is -0.044658 at full
//! precision, against -0.04464 here).

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rank::{dcg, ndcg_pair, PenaltyMode};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TableRow {
    pub predicted: usize,
    pub dcg: f64,
    pub ndcg: f64,
    pub penalty: f64,
    pub expected_penalty: f64,
    pub advantage: f64,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

pub fn penalty_table(k: usize, truth: usize, mode: PenaltyMode) -> Result<Vec<TableRow>> {
    if k < 2 {
        return Err(Error::DegenerateGroup(k));
    }
    if truth >= k {
        return Err(Error::InvalidArgument(format!(
            "truth rank {truth} outside 0..{k}"
        )));
    }
    let partial: Vec<(f64, f64, f64)> = (0..k)
        .map(|p| {
            let d = round4(dcg(p, mode));
            let n = round4(ndcg_pair(p, truth, mode));
            (d, n, round4(1.0 - n))
        })
        .collect();
    let expected = partial.iter().map(|r| r.2).sum::<f64>() / k as f64;
    Ok(partial
        .into_iter()
        .enumerate()
        .map(|(p, (d, n, delta))| TableRow {
            predicted: p,
            dcg: d,
            ndcg: n,
            penalty: delta,
            expected_penalty: expected,
            advantage: expected - delta,
        })
        .collect())
}

/// Fixed-width text rendering, values to 4 decimals.
pub fn render_table(rows: &[TableRow]) -> String {
    let mut out = String::from("Pred. Rank  DCG     nDCG    δ       E[δ]    Â_rank\n");
    for r in rows {
        out.push_str(&format!(
            "{:<10}  {:.4}  {:.4}  {:.4}  {:.4}  {:+.4}\n",
            r.predicted, r.dcg, r.ndcg, r.penalty, r.expected_penalty, r.advantage
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_response_table() {
        let rows = penalty_table(2, 0, PenaltyMode::TableConsistent).unwrap();
        assert_eq!(rows[0].penalty, 0.0);
        assert_eq!(rows[1].penalty, 0.2075);
        assert!((rows[0].advantage - 0.10375).abs() < 1e-12);
        assert!((rows[1].advantage + 0.10375).abs() < 1e-12);
    }

    #[test]
    fn as_written_dcg() {
        let rows = penalty_table(5, 0, PenaltyMode::AsWritten).unwrap();
        assert_eq!(format!("{:.4}", rows[1].dcg), "0.3155");
    }

    #[test]
    fn bad_arguments() {
        assert!(penalty_table(1, 0, PenaltyMode::TableConsistent).is_err());
        assert!(penalty_table(5, 5, PenaltyMode::TableConsistent).is_err());
    }
}
