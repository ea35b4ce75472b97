//! Top-k routing decisions and capacity-limited admission.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StgcError};
use crate::numkit::{argtopk, softmax};

/// Routing of one token through one MoE layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// Full softmax over all experts.
    pub scores: Vec<f64>,
    /// Selected experts, highest score first.
    pub topk_ids: Vec<usize>,
    /// Softmax restricted to the selected logits, aligned with `topk_ids`.
    pub topk_weights: Vec<f64>,
    /// Per-slot flag set by capacity limiting.
    pub dropped: Vec<bool>,
}

impl RoutingDecision {
    pub fn from_logits(logits: &[f64], k: usize) -> Result<Self> {
        if k == 0 || k > logits.len() {
            return Err(StgcError::Config(format!(
                "top_k {k} out of range for {} experts",
                logits.len()
            )));
        }
        let scores = softmax(logits)?;
        let topk_ids = argtopk(logits, k);
        let selected: Vec<f64> = topk_ids.iter().map(|&i| logits[i]).collect();
        let topk_weights = softmax(&selected)?;
        Ok(RoutingDecision {
            scores,
            topk_ids,
            topk_weights,
            dropped: vec![false; k],
        })
    }

    /// Mixing weight actually applied to a slot (zero once dropped).
    pub fn effective_weight(&self, slot: usize) -> f64 {
        if self.dropped[slot] {
            0.0
        } else {
            self.topk_weights[slot]
        }
    }

    pub fn k(&self) -> usize {
        self.topk_ids.len()
    }

    pub fn slot_of(&self, expert: usize) -> Option<usize> {
        self.topk_ids.iter().position(|&e| e == expert)
    }
}

/// Inference-time expert capacity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacityPolicy {
    /// `f64::INFINITY` means unlimited.
    pub capacity_factor: f64,
    /// Batch Prioritized Routing: admit by descending score instead of batch order.
    pub bpr: bool,
}

impl CapacityPolicy {
    pub fn new(capacity_factor: f64, bpr: bool) -> Result<Self> {
        let p = CapacityPolicy {
            capacity_factor,
            bpr,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn unlimited() -> Self {
        CapacityPolicy {
            capacity_factor: f64::INFINITY,
            bpr: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.capacity_factor.is_nan() || self.capacity_factor <= 0.0 {
            return Err(StgcError::Config(format!(
                "capacity_factor must be > 0, got {}",
                self.capacity_factor
            )));
        }
        Ok(())
    }

    /// `ceil(capacity_factor * N * k / E)`, or `None` when unlimited.
    pub fn capacity(&self, tokens: usize, k: usize, experts: usize) -> Option<usize> {
        if self.capacity_factor.is_infinite() {
            return None;
        }
        Some((self.capacity_factor * tokens as f64 * k as f64 / experts as f64).ceil() as usize)
    }
}

/// Per-expert admission counts after [`apply_capacity`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CapacityStats {
    pub capacity: Option<usize>,
    pub admitted: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Marks assignments beyond each expert's capacity as dropped. Surviving
/// weights are left as they are; a dropped slot simply contributes nothing.
pub fn apply_capacity(
    decisions: &mut [RoutingDecision],
    num_experts: usize,
    policy: &CapacityPolicy,
) -> Result<CapacityStats> {
    policy.validate()?;
    let mut stats = CapacityStats {
        capacity: None,
        admitted: vec![0; num_experts],
        dropped: vec![0; num_experts],
    };
    let Some(first) = decisions.first() else {
        return Ok(stats);
    };
    let k = first.k();
    let capacity = policy.capacity(decisions.len(), k, num_experts);
    stats.capacity = capacity;

    // (token, slot) queue per expert, in batch order
    let mut queues: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_experts];
    for (t, d) in decisions.iter().enumerate() {
        for (slot, &e) in d.topk_ids.iter().enumerate() {
            if e >= num_experts {
                return Err(StgcError::ExpertOutOfRange {
                    id: e,
                    experts: num_experts,
                });
            }
            queues[e].push((t, slot));
        }
    }
    for (e, queue) in queues.iter_mut().enumerate() {
        if policy.bpr {
            // stable sort: equal scores keep batch order
            queue.sort_by(|a, b| decisions[b.0].scores[e].total_cmp(&decisions[a.0].scores[e]));
        }
        let cap = capacity.unwrap_or(usize::MAX);
        for (rank, &(t, slot)) in queue.iter().enumerate() {
            let keep = rank < cap;
            decisions[t].dropped[slot] = !keep;
            if keep {
                stats.admitted[e] += 1;
            } else {
                stats.dropped[e] += 1;
            }
        }
    }
    Ok(stats)
}
