//! Combining per-model predictions.

use serde::{Deserialize, Serialize};

use super::{Result, RmdlError};
use crate::tensor::argmax;

/// Binary majority vote `M = floor(1/2 + (sum(y) - 1/2) / n)`. Exact ties
/// (even `n`) give 0.
pub fn majority_vote_binary(votes: &[u8]) -> Result<u8> {
    if votes.is_empty() {
        return Err(RmdlError::EmptyVotes);
    }
    if let Some(&bad) = votes.iter().find(|&&v| v > 1) {
        return Err(RmdlError::VoteValue(bad as usize));
    }
    let n = votes.len() as f64;
    let sum: f64 = votes.iter().map(|&v| v as f64).sum();
    Ok((0.5 + (sum - 0.5) / n).floor() as u8)
}

/// Plurality over each model's argmax label. Ties go to the label with the
/// largest summed probability, then to the lowest label.
pub fn majority_vote_multiclass(probs: &[&[f64]]) -> Result<usize> {
    let k = probs.first().ok_or(RmdlError::EmptyVotes)?.len();
    if k == 0 {
        return Err(RmdlError::VoteWidth { expected: 1, found: 0 });
    }
    let mut counts = vec![0usize; k];
    let mut columns = vec![Vec::with_capacity(probs.len()); k];
    for row in probs {
        if row.len() != k {
            return Err(RmdlError::VoteWidth {
                expected: k,
                found: row.len(),
            });
        }
        counts[argmax(row)] += 1;
        for (c, &p) in columns.iter_mut().zip(row.iter()) {
            c.push(p);
        }
    }
    // summing in sorted order keeps the tie-break independent of model order
    let mass: Vec<f64> = columns
        .into_iter()
        .map(|mut c| {
            c.sort_by(f64::total_cmp);
            c.iter().sum()
        })
        .collect();
    let best = *counts.iter().max().expect("k > 0");
    let mut winner = None;
    for label in (0..k).filter(|&l| counts[l] == best) {
        match winner {
            Some(w) if mass[label] <= mass[w] => {}
            _ => winner = Some(label),
        }
    }
    Ok(winner.expect("at least one label has the top count"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMode {
    /// Binary formula for two classes, plurality otherwise.
    Auto,
    Binary,
    Plurality,
}

impl VoteMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "auto" => Some(VoteMode::Auto),
            "binary" => Some(VoteMode::Binary),
            "plurality" => Some(VoteMode::Plurality),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            VoteMode::Auto => "auto",
            VoteMode::Binary => "binary",
            VoteMode::Plurality => "plurality",
        }
    }

    /// Final label from one probability row per model.
    pub fn vote(self, probs: &[&[f64]]) -> Result<usize> {
        let k = probs.first().map_or(0, |r| r.len());
        let binary = match self {
            VoteMode::Auto => k == 2,
            VoteMode::Binary => {
                if k != 2 {
                    return Err(RmdlError::VoteWidth { expected: 2, found: k });
                }
                true
            }
            VoteMode::Plurality => false,
        };
        if binary {
            let votes = probs.iter().map(|r| argmax(r) as u8).collect::<Vec<_>>();
            if let Some(r) = probs.iter().find(|r| r.len() != 2) {
                return Err(RmdlError::VoteWidth {
                    expected: 2,
                    found: r.len(),
                });
            }
            Ok(majority_vote_binary(&votes)? as usize)
        } else {
            majority_vote_multiclass(probs)
        }
    }
}
