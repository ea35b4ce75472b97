//! Conflicting-token identification from per-token bias gradients.
//!
//! For every (layer, expert) group the token gradients are averaged, each
//! token gets a similarity `s_n = (cos(g1, g1_mean) + cos(g2, g2_mean)) / 2`,
//! and tokens with `s_n < tau` are flagged. Tokens whose gradients are both
//! numerically zero carry no loss signal: they are left out of the mean and
//! never flagged.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StgcError};
use crate::numkit::{cosine_sim, norm, ZERO_NORM};

/// Gradient of one token's loss on the biases of one expert it was routed to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenGradRecord {
    pub token_index: usize,
    pub layer_index: usize,
    pub expert_id: usize,
    /// Gradient on `b1`, length D′.
    pub g1: Vec<f64>,
    /// Gradient on `b2`, length D.
    pub g2: Vec<f64>,
}

impl TokenGradRecord {
    pub fn is_zero(&self) -> bool {
        norm(&self.g1) < ZERO_NORM && norm(&self.g2) < ZERO_NORM
    }

    /// `g1 ‖ g2`
    pub fn concatenated(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.g1.len() + self.g2.len());
        v.extend_from_slice(&self.g1);
        v.extend_from_slice(&self.g2);
        v
    }
}

/// Arithmetic mean of an expert's records as `(g1_mean, g2_mean)`; `None`
/// for an empty group.
pub fn average_gradient<'a, I>(records: I) -> Option<(Vec<f64>, Vec<f64>)>
where
    I: IntoIterator<Item = &'a TokenGradRecord>,
{
    let mut it = records.into_iter();
    let first = it.next()?;
    let mut g1 = first.g1.clone();
    let mut g2 = first.g2.clone();
    let mut count = 1usize;
    for r in it {
        g1.iter_mut().zip(&r.g1).for_each(|(a, b)| *a += b);
        g2.iter_mut().zip(&r.g2).for_each(|(a, b)| *a += b);
        count += 1;
    }
    let inv = 1.0 / count as f64;
    g1.iter_mut().for_each(|v| *v *= inv);
    g2.iter_mut().for_each(|v| *v *= inv);
    Some((g1, g2))
}

/// `s_n`: mean of the two bias-gradient cosines against the expert means.
pub fn token_similarity(record: &TokenGradRecord, g1_mean: &[f64], g2_mean: &[f64]) -> Result<f64> {
    let s1 = cosine_sim(&record.g1, g1_mean)?.value;
    let s2 = cosine_sim(&record.g2, g2_mean)?.value;
    Ok(0.5 * (s1 + s2))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenVerdict {
    pub token_index: usize,
    /// `None` for zero-gradient tokens, which are excluded.
    pub similarity: Option<f64>,
    pub conflicting: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConflicts {
    pub layer_index: usize,
    pub expert_id: usize,
    pub g1_mean: Vec<f64>,
    pub g2_mean: Vec<f64>,
    pub tokens: Vec<TokenVerdict>,
}

/// A conflicting token and the expert it should leave.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedToken {
    pub layer_index: usize,
    pub token_index: usize,
    pub expert_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub tau: f64,
    /// Groups ordered by (layer, expert); experts without records are absent.
    pub experts: Vec<ExpertConflicts>,
    pub flagged: Vec<FlaggedToken>,
    /// Total conflicting assignments (`N_all`).
    pub num_conflicting: usize,
    /// Total routed assignments examined.
    pub num_records: usize,
    pub conflicting_ratio: f64,
    pub per_layer_conflicting_ratio: Vec<f64>,
}

/// Groups records by (layer, expert), preserving input order within groups.
pub fn group_records(
    records: &[TokenGradRecord],
) -> BTreeMap<(usize, usize), Vec<&TokenGradRecord>> {
    let mut groups: BTreeMap<(usize, usize), Vec<&TokenGradRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.layer_index, r.expert_id))
            .or_default()
            .push(r);
    }
    groups
}

/// Flags every record whose similarity to its expert's mean gradient is
/// below `tau`. `num_layers` sizes the per-layer ratio vector.
pub fn identify_conflicting(
    records: &[TokenGradRecord],
    tau: f64,
    num_layers: usize,
) -> Result<ConflictReport> {
    let mut experts = Vec::new();
    let mut flagged = Vec::new();
    let mut layer_counts = vec![(0usize, 0usize); num_layers];
    for ((layer, expert), group) in group_records(records) {
        if layer >= num_layers {
            return Err(StgcError::Shape(format!(
                "record layer {layer} >= {num_layers} layers"
            )));
        }
        let nonzero: Vec<&TokenGradRecord> =
            group.iter().copied().filter(|r| !r.is_zero()).collect();
        let means = average_gradient(nonzero.iter().copied());
        let mut tokens = Vec::with_capacity(group.len());
        for r in &group {
            let similarity = match (&means, r.is_zero()) {
                (Some((m1, m2)), false) => Some(token_similarity(r, m1, m2)?),
                _ => None,
            };
            let conflicting = similarity.is_some_and(|s| s < tau);
            if conflicting {
                flagged.push(FlaggedToken {
                    layer_index: layer,
                    token_index: r.token_index,
                    expert_id: expert,
                });
            }
            layer_counts[layer].1 += 1;
            layer_counts[layer].0 += conflicting as usize;
            tokens.push(TokenVerdict {
                token_index: r.token_index,
                similarity,
                conflicting,
            });
        }
        let (g1_mean, g2_mean) =
            means.unwrap_or_else(|| (vec![0.0; group[0].g1.len()], vec![0.0; group[0].g2.len()]));
        experts.push(ExpertConflicts {
            layer_index: layer,
            expert_id: expert,
            g1_mean,
            g2_mean,
            tokens,
        });
    }
    let num_conflicting = flagged.len();
    let num_records = records.len();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(ConflictReport {
        tau,
        experts,
        flagged,
        num_conflicting,
        num_records,
        conflicting_ratio: ratio(num_conflicting, num_records),
        per_layer_conflicting_ratio: layer_counts.iter().map(|&(a, b)| ratio(a, b)).collect(),
    })
}

impl ConflictReport {
    pub fn similarities(&self) -> Vec<f64> {
        self.experts
            .iter()
            .flat_map(|e| e.tokens.iter().filter_map(|t| t.similarity))
            .collect()
    }
}
