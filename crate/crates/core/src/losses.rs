//! Training objectives and their gradients with respect to logits.
//!
//! Every loss returns its value together with the gradient on the logits it
//! consumes (classifier logits or router logits); [`crate::model::Model::backward`]
//! carries those into parameter gradients.
//!
//! The conflict-elimination loss (CE form) minimizes `-log p'_id` with
//! `p' = softmax(-z)`, which lowers the current expert's router logit. Taking
//! `+log p'_id` literally would raise it instead; that sign is available via
//! `literal_sign` for comparison runs only.

use serde::{Deserialize, Serialize};

use crate::error::{Result, StgcError};
use crate::model::CelKind;
use crate::numkit::{log_softmax, softmax, Matrix};
use crate::routing::RoutingDecision;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub main: f64,
    /// Load-balancing loss averaged over MoE layers.
    pub aux: f64,
    pub cel: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(main: f64, aux: f64, cel: f64, alpha: f64, beta: f64) -> Self {
        LossBreakdown {
            main,
            aux,
            cel,
            total: total_loss(main, aux, cel, alpha, beta),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.main.is_finite()
            && self.aux.is_finite()
            && self.cel.is_finite()
            && self.total.is_finite()
    }
}

/// `main + alpha * aux + beta * cel`
pub fn total_loss(main: f64, aux: f64, cel: f64, alpha: f64, beta: f64) -> f64 {
    main + alpha * aux + beta * cel
}

/// Mean per-token cross-entropy and its logit gradient `(softmax - onehot) / N`.
pub fn main_loss(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(StgcError::Shape(format!(
            "{} labels for {n} logit rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(StgcError::Empty("main loss batch"));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (t, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(StgcError::LabelOutOfRange {
                label: y,
                classes: c,
            });
        }
        let lp = log_softmax(logits.row(t))?;
        total -= lp[y];
        let g = grad.row_mut(t);
        for (j, l) in lp.iter().enumerate() {
            g[j] = (l.exp() - if j == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

/// Router logits of one conflicting token and the expert it is assigned to.
#[derive(Debug, Clone, Copy)]
pub struct FlaggedLogits<'a> {
    pub logits: &'a [f64],
    pub expert_id: usize,
}

fn check_ids(flagged: &[FlaggedLogits], num_experts: usize) -> Result<()> {
    for f in flagged {
        if f.expert_id >= num_experts {
            return Err(StgcError::ExpertOutOfRange {
                id: f.expert_id,
                experts: num_experts,
            });
        }
        if f.logits.len() != num_experts {
            return Err(StgcError::Shape(format!(
                "router logits of length {} for {num_experts} experts",
                f.logits.len()
            )));
        }
    }
    Ok(())
}

/// CE-like conflict elimination loss with per-token logit gradients.
///
/// `sum_n -log softmax(-z_n)[id_n] / (N_all * E)`; an empty list gives 0.
pub fn cel_ce_with_grad(
    flagged: &[FlaggedLogits],
    num_experts: usize,
    literal_sign: bool,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_ids(flagged, num_experts)?;
    if flagged.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let norm = 1.0 / (flagged.len() as f64 * num_experts as f64);
    let sign = if literal_sign { -1.0 } else { 1.0 };
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(flagged.len());
    for f in flagged {
        let inverted: Vec<f64> = f.logits.iter().map(|z| -z).collect();
        let lp = log_softmax(&inverted)?;
        loss -= lp[f.expert_id];
        // d(-log p'_id)/dz_j = onehot_j - p'_j
        let g = lp
            .iter()
            .enumerate()
            .map(|(j, l)| sign * norm * (if j == f.expert_id { 1.0 } else { 0.0 } - l.exp()))
            .collect();
        grads.push(g);
    }
    Ok((sign * loss * norm, grads))
}

pub fn cel_ce(flagged: &[FlaggedLogits], num_experts: usize) -> Result<f64> {
    cel_ce_with_grad(flagged, num_experts, false).map(|(l, _)| l)
}

/// MSE-like variant: mean routing score of the current expert.
pub fn cel_mse_with_grad(
    flagged: &[FlaggedLogits],
    num_experts: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_ids(flagged, num_experts)?;
    if flagged.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let norm = 1.0 / flagged.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(flagged.len());
    for f in flagged {
        let p = softmax(f.logits)?;
        let pid = p[f.expert_id];
        loss += pid;
        let g = p
            .iter()
            .enumerate()
            .map(|(j, pj)| norm * pid * (if j == f.expert_id { 1.0 } else { 0.0 } - pj))
            .collect();
        grads.push(g);
    }
    Ok((loss * norm, grads))
}

pub fn cel_mse(flagged: &[FlaggedLogits], num_experts: usize) -> Result<f64> {
    cel_mse_with_grad(flagged, num_experts).map(|(l, _)| l)
}

pub fn cel_with_grad(
    kind: CelKind,
    literal_sign: bool,
    flagged: &[FlaggedLogits],
    num_experts: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    match kind {
        CelKind::CeLike => cel_ce_with_grad(flagged, num_experts, literal_sign),
        CelKind::MseLike => cel_mse_with_grad(flagged, num_experts),
    }
}

/// Per-expert assignment fractions `F_i` (summing to 1) and mean scores `P_i`.
pub fn load_statistics(
    decisions: &[RoutingDecision],
    num_experts: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if decisions.is_empty() {
        return Err(StgcError::Empty("aux loss batch"));
    }
    let mut counts = vec![0usize; num_experts];
    let mut mean_scores = vec![0.0; num_experts];
    let mut assignments = 0usize;
    for d in decisions {
        if d.scores.len() != num_experts {
            return Err(StgcError::Shape(format!(
                "routing scores of length {} for {num_experts} experts",
                d.scores.len()
            )));
        }
        for &e in &d.topk_ids {
            counts[e] += 1;
            assignments += 1;
        }
        for (m, p) in mean_scores.iter_mut().zip(&d.scores) {
            *m += p;
        }
    }
    let n = decisions.len() as f64;
    mean_scores.iter_mut().for_each(|m| *m /= n);
    let fractions = counts
        .iter()
        .map(|&c| c as f64 / assignments as f64)
        .collect();
    Ok((fractions, mean_scores))
}

/// Load-balancing loss `E * sum_i F_i * P_i` for one layer, with its
/// gradient on the router logits (N × E). `F` is a count and carries no
/// gradient.
pub fn aux_loss_with_grad(
    decisions: &[RoutingDecision],
    num_experts: usize,
) -> Result<(f64, Matrix)> {
    let (f, p) = load_statistics(decisions, num_experts)?;
    let e = num_experts as f64;
    let loss = e * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>();
    let n = decisions.len();
    let mut grad = Matrix::zeros(n, num_experts);
    for (t, d) in decisions.iter().enumerate() {
        // dL/dp_i = E * F_i / N, then through the full softmax
        let dp: Vec<f64> = f.iter().map(|fi| e * fi / n as f64).collect();
        let s: f64 = d.scores.iter().zip(&dp).map(|(a, b)| a * b).sum();
        for (j, g) in grad.row_mut(t).iter_mut().enumerate() {
            *g = d.scores[j] * (dp[j] - s);
        }
    }
    Ok((loss, grad))
}

pub fn aux_loss(decisions: &[RoutingDecision], num_experts: usize) -> Result<f64> {
    aux_loss_with_grad(decisions, num_experts).map(|(l, _)| l)
}
