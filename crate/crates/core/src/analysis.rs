//! Mechanism statistics: gradient consistency, similarity histograms, load
//! distributions, proxy and feature-gradient correlation studies, and the
//! descent-step oracle on explicit quadratics.

use serde::{Deserialize, Serialize};

use crate::conflict::{group_records, identify_conflicting, TokenGradRecord};
use crate::error::{Result, StgcError};
use crate::losses::{load_statistics, LossBreakdown};
use crate::model::{ForwardTrace, Model};
use crate::numkit::{cosine_sim, dot, mean, norm, pearson, std_dev, Rng, ZERO_NORM};

pub const METRICS_SCHEMA: u32 = 1;

/// Everything logged for one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSnapshot {
    pub step: usize,
    pub loss: LossBreakdown,
    pub grad_consistency: Option<f64>,
    pub grad_consistency_std: Option<f64>,
    pub per_layer_consistency: Option<Vec<Option<f64>>>,
    pub conflicting_ratio: f64,
    pub num_conflicting: usize,
    pub per_layer_conflicting_ratio: Vec<f64>,
    /// `[layer][expert]`, each row sums to 1.
    pub load_fractions: Vec<Vec<f64>>,
    pub mean_scores: Vec<Vec<f64>>,
    pub val_acc: Option<f64>,
    pub wall_ms: Option<f64>,
}

/// One JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub schema: u32,
    pub step: usize,
    pub loss_main: f64,
    pub loss_aux: f64,
    pub loss_cel: f64,
    pub loss_total: f64,
    pub grad_consistency: Option<f64>,
    pub grad_consistency_std: Option<f64>,
    pub conflicting_ratio: f64,
    pub num_conflicting: usize,
    pub per_layer_conflicting_ratio: Vec<f64>,
    pub load_fractions: Vec<Vec<f64>>,
    pub mean_scores: Vec<Vec<f64>>,
    pub val_acc: Option<f64>,
    pub wall_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_consistency: Option<Vec<Option<f64>>>,
}

impl From<&MetricsSnapshot> for MetricsRecord {
    fn from(s: &MetricsSnapshot) -> Self {
        MetricsRecord {
            schema: METRICS_SCHEMA,
            step: s.step,
            loss_main: s.loss.main,
            loss_aux: s.loss.aux,
            loss_cel: s.loss.cel,
            loss_total: s.loss.total,
            grad_consistency: s.grad_consistency,
            grad_consistency_std: s.grad_consistency_std,
            conflicting_ratio: s.conflicting_ratio,
            num_conflicting: s.num_conflicting,
            per_layer_conflicting_ratio: s.per_layer_conflicting_ratio.clone(),
            load_fractions: s.load_fractions.clone(),
            mean_scores: s.mean_scores.clone(),
            val_acc: s.val_acc,
            wall_ms: s.wall_ms,
            per_layer_consistency: s.per_layer_consistency.clone(),
        }
    }
}

impl MetricsSnapshot {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&MetricsRecord::from(self)).expect("metrics serialize")
    }
}

fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < ZERO_NORM {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Mean pairwise cosine similarity within one group of gradients.
/// `None` for fewer than two vectors.
pub fn pairwise_mean_similarity(grads: &[Vec<f64>], include_diagonal: bool) -> Option<f64> {
    let n = grads.len();
    if n < 2 {
        return None;
    }
    let units: Vec<Vec<f64>> = grads.iter().map(|g| unit_or_zero(g)).collect();
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += 2.0 * dot(&units[i], &units[j]).clamp(-1.0, 1.0);
        }
    }
    if include_diagonal {
        sum += units.iter().map(|u| dot(u, u).min(1.0)).sum::<f64>();
        Some(sum / (n * n) as f64)
    } else {
        Some(sum / (n * (n - 1)) as f64)
    }
}

/// Mean and population std over groups of each group's pairwise similarity.
/// Groups with fewer than two vectors are skipped.
pub fn gradient_consistency(
    groups: &[Vec<Vec<f64>>],
    include_diagonal: bool,
) -> Result<(f64, f64)> {
    let sims: Vec<f64> = groups
        .iter()
        .filter_map(|g| pairwise_mean_similarity(g, include_diagonal))
        .collect();
    if sims.is_empty() {
        return Err(StgcError::Precondition(
            "gradient consistency needs an expert with at least two tokens".into(),
        ));
    }
    Ok((mean(&sims), std_dev(&sims)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertConsistency {
    pub layer_index: usize,
    pub expert_id: usize,
    pub tokens: usize,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub mean: f64,
    pub std: f64,
    pub experts: Vec<ExpertConsistency>,
}

impl ConsistencyStats {
    /// Token-weighted mean of expert similarities within each layer.
    pub fn per_layer(&self, num_layers: usize) -> Vec<Option<f64>> {
        let mut acc = vec![(0.0, 0usize); num_layers];
        for e in &self.experts {
            if let Some(a) = acc.get_mut(e.layer_index) {
                a.0 += e.similarity * e.tokens as f64;
                a.1 += e.tokens;
            }
        }
        acc.iter()
            .map(|&(s, n)| (n > 0).then(|| s / n as f64))
            .collect()
    }
}

/// Consistency over (layer, expert) groups, one concatenated `g1‖g2`
/// vector per record.
pub fn consistency_from_records(
    records: &[TokenGradRecord],
    include_diagonal: bool,
) -> Result<ConsistencyStats> {
    let mut experts = Vec::new();
    for ((layer, expert), group) in group_records(records) {
        let grads: Vec<Vec<f64>> = group.iter().map(|r| r.concatenated()).collect();
        if let Some(s) = pairwise_mean_similarity(&grads, include_diagonal) {
            experts.push(ExpertConsistency {
                layer_index: layer,
                expert_id: expert,
                tokens: grads.len(),
                similarity: s,
            });
        }
    }
    if experts.is_empty() {
        return Err(StgcError::Precondition(
            "gradient consistency needs an expert with at least two tokens".into(),
        ));
    }
    let sims: Vec<f64> = experts.iter().map(|e| e.similarity).collect();
    Ok(ConsistencyStats {
        mean: mean(&sims),
        std: std_dev(&sims),
        experts,
    })
}

pub const HIST_BIN_WIDTH: f64 = 0.05;
pub const HIST_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lower: f64,
    pub bin_width: f64,
    pub counts: Vec<usize>,
    pub frequencies: Vec<f64>,
}

fn hist_bin(s: f64) -> usize {
    let idx = ((s + 1.0) / HIST_BIN_WIDTH).floor();
    if idx < 0.0 {
        0
    } else {
        (idx as usize).min(HIST_BINS - 1)
    }
}

/// Fixed 0.05-wide bins over [-1, 1]; the top bin is closed at 1.
pub fn similarity_histogram(values: &[f64]) -> Result<Histogram> {
    if values.is_empty() {
        return Err(StgcError::Empty("similarity values"));
    }
    let mut counts = vec![0usize; HIST_BINS];
    for &s in values {
        counts[hist_bin(s)] += 1;
    }
    let total = values.len() as f64;
    Ok(Histogram {
        lower: -1.0,
        bin_width: HIST_BIN_WIDTH,
        frequencies: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
    })
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn mass_below(&self, x: f64) -> f64 {
        (0..self.counts.len())
            .filter(|&i| self.lower + (i + 1) as f64 * self.bin_width <= x + 1e-12)
            .map(|i| self.frequencies[i])
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count,frequency\n");
        for (i, (c, f)) in self.counts.iter().zip(&self.frequencies).enumerate() {
            let lo = self.lower + i as f64 * self.bin_width;
            out.push_str(&format!("{:.2},{:.2},{c},{f}\n", lo, lo + self.bin_width));
        }
        out
    }
}

/// Routing load of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerLoad {
    pub fractions: Vec<f64>,
    pub mean_scores: Vec<f64>,
    /// Assignments dropped by a capacity limit, per expert.
    pub dropped: Vec<usize>,
    pub capacity: Option<usize>,
}

pub fn load_report(trace: &ForwardTrace, num_experts: usize) -> Result<Vec<LayerLoad>> {
    trace
        .layers
        .iter()
        .map(|lt| {
            let (fractions, mean_scores) = load_statistics(&lt.decisions, num_experts)?;
            let mut dropped = vec![0usize; num_experts];
            for d in &lt.decisions {
                for (slot, &e) in d.topk_ids.iter().enumerate() {
                    dropped[e] += d.dropped[slot] as usize;
                }
            }
            Ok(LayerLoad {
                fractions,
                mean_scores,
                dropped,
                capacity: lt.capacity.as_ref().and_then(|c| c.capacity),
            })
        })
        .collect()
}

/// Largest `D·D′` for which per-token weight gradients are materialized.
pub const PROXY_MAX_WEIGHTS: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub pearson: f64,
    pub shuffled_pearson: f64,
    pub points: usize,
    pub bias_similarity: Vec<f64>,
    pub weight_similarity: Vec<f64>,
}

/// Compares the bias-gradient similarity `s_n` with the analogous score
/// built from full per-token fc1/fc2 weight gradients. Experts with fewer
/// than two non-zero records are skipped.
pub fn proxy_validation(
    model: &Model,
    trace: &ForwardTrace,
    logits_grad: &crate::numkit::Matrix,
    control_seed: u64,
) -> Result<ProxyReport> {
    let c = &model.config;
    if c.hidden_size * c.intermediate_size > PROXY_MAX_WEIGHTS {
        return Err(StgcError::Precondition(format!(
            "proxy validation needs D*D' <= {PROXY_MAX_WEIGHTS}, got {}",
            c.hidden_size * c.intermediate_size
        )));
    }
    let records = model.capture_token_bias_grads(trace, logits_grad)?;
    let report = identify_conflicting(&records, c.tau, c.num_layers)?;
    let mut bias_similarity = Vec::new();
    let mut weight_similarity = Vec::new();
    for ((_, _), group) in group_records(&records) {
        let nonzero: Vec<&TokenGradRecord> = group.into_iter().filter(|r| !r.is_zero()).collect();
        if nonzero.len() < 2 {
            continue;
        }
        let mut w1s = Vec::with_capacity(nonzero.len());
        let mut w2s = Vec::with_capacity(nonzero.len());
        for r in &nonzero {
            let (w1, w2) = model.token_weight_grads(trace, r)?;
            w1s.push(w1.into_data());
            w2s.push(w2.into_data());
        }
        let avg = |vs: &[Vec<f64>]| {
            let mut m = vec![0.0; vs[0].len()];
            for v in vs {
                crate::numkit::axpy(&mut m, 1.0, v);
            }
            m.iter_mut().for_each(|x| *x /= vs.len() as f64);
            m
        };
        let (m1, m2) = (avg(&w1s), avg(&w2s));
        for (i, r) in nonzero.iter().enumerate() {
            let s_w = (cosine_sim(&w1s[i], &m1)?.value + cosine_sim(&w2s[i], &m2)?.value) / 2.0;
            let s_b = report
                .experts
                .iter()
                .find(|e| e.layer_index == r.layer_index && e.expert_id == r.expert_id)
                .and_then(|e| e.tokens.iter().find(|t| t.token_index == r.token_index))
                .and_then(|t| t.similarity)
                .ok_or_else(|| StgcError::Precondition("missing bias similarity".into()))?;
            bias_similarity.push(s_b);
            weight_similarity.push(s_w);
        }
    }
    if bias_similarity.len() < 2 {
        return Err(StgcError::Precondition(
            "proxy validation needs at least two comparable tokens".into(),
        ));
    }
    let r = pearson(&bias_similarity, &weight_similarity)?;
    let mut shuffled = weight_similarity.clone();
    Rng::new(control_seed).shuffle(&mut shuffled);
    let control = pearson(&bias_similarity, &shuffled)?;
    Ok(ProxyReport {
        pearson: r,
        shuffled_pearson: control,
        points: bias_similarity.len(),
        bias_similarity,
        weight_similarity,
    })
}

/// `(features, gradients)` of one expert, one row per token.
pub type FeatureGradientGroup = (Vec<Vec<f64>>, Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureGradientReport {
    pub pearson: f64,
    pub pairs: usize,
}

/// Off-diagonal feature cosines and gradient cosines, pooled over groups,
/// correlated with Pearson's r. Each group is `(features, gradients)` with
/// one row per token.
pub fn feature_gradient_correlation(
    groups: &[FeatureGradientGroup],
) -> Result<FeatureGradientReport> {
    let mut fs = Vec::new();
    let mut gs = Vec::new();
    for (feats, grads) in groups {
        if feats.len() != grads.len() {
            return Err(StgcError::Shape(
                "features and gradients differ in count".into(),
            ));
        }
        let fu: Vec<Vec<f64>> = feats.iter().map(|v| unit_or_zero(v)).collect();
        let gu: Vec<Vec<f64>> = grads.iter().map(|v| unit_or_zero(v)).collect();
        for i in 0..fu.len() {
            for j in 0..fu.len() {
                if i != j {
                    fs.push(dot(&fu[i], &fu[j]));
                    gs.push(dot(&gu[i], &gu[j]));
                }
            }
        }
    }
    if fs.len() < 2 {
        return Err(StgcError::Precondition(
            "feature-gradient correlation needs an expert with two tokens".into(),
        ));
    }
    Ok(FeatureGradientReport {
        pearson: pearson(&fs, &gs)?,
        pairs: fs.len(),
    })
}

/// Groups for [`feature_gradient_correlation`]: each expert's normalized
/// block inputs and the concatenated bias gradients of its tokens.
pub fn feature_gradient_groups(
    trace: &ForwardTrace,
    records: &[TokenGradRecord],
) -> Vec<FeatureGradientGroup> {
    group_records(records)
        .into_iter()
        .filter(|(_, g)| g.len() >= 2)
        .map(|((layer, _), g)| {
            let feats = g
                .iter()
                .map(|r| trace.layers[layer].normed.row(r.token_index).to_vec())
                .collect();
            let grads = g.iter().map(|r| r.concatenated()).collect();
            (feats, grads)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescentVerdict {
    GuaranteedDecrease,
    BoundInconclusive,
}

/// `-(r + 1/r) / 2` with `r = |g1| / |g2|`: the cosine below which the
/// smoothness bound no longer certifies a decrease.
pub fn cosine_bound(g1: &[f64], g2: &[f64]) -> f64 {
    let r = norm(g1) / norm(g2);
    -0.5 * (r + 1.0 / r)
}

/// Verdict for one step of size `t` along `-(g1 + g2)` on an
/// `lipschitz`-smooth objective.
pub fn descent_oracle(g1: &[f64], g2: &[f64], lipschitz: f64, t: f64) -> Result<DescentVerdict> {
    if !(lipschitz > 0.0 && t > 0.0) {
        return Err(StgcError::Precondition(
            "lipschitz constant and step must be positive".into(),
        ));
    }
    if t > 1.0 / lipschitz {
        return Err(StgcError::Precondition(format!(
            "step {t} exceeds 1/L = {}",
            1.0 / lipschitz
        )));
    }
    let cos = cosine_sim(g1, g2)?;
    Ok(if !cos.zero_norm && cos.value > 0.0 {
        DescentVerdict::GuaranteedDecrease
    } else {
        DescentVerdict::BoundInconclusive
    })
}

/// `½ Σ_j a_j (θ_j − c_j)²`
#[derive(Debug, Clone, PartialEq)]
pub struct Quadratic {
    pub curvature: Vec<f64>,
    pub center: Vec<f64>,
}

impl Quadratic {
    pub fn value(&self, theta: &[f64]) -> f64 {
        0.5 * theta
            .iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((x, c), a)| a * (x - c) * (x - c))
            .sum::<f64>()
    }

    pub fn grad(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.center)
            .zip(&self.curvature)
            .map(|((x, c), a)| a * (x - c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescentTrial {
    pub cosine: f64,
    pub cosine_bound: f64,
    pub verdict: DescentVerdict,
    pub total_before: f64,
    pub total_after: f64,
    pub first_before: f64,
    pub first_after: f64,
    pub second_before: f64,
    pub second_after: f64,
}

impl DescentTrial {
    pub fn total_decreased(&self) -> bool {
        self.total_after < self.total_before
    }

    pub fn violates_bound(&self) -> bool {
        self.cosine < self.cosine_bound
    }

    /// Either single objective went up.
    pub fn some_objective_increased(&self) -> bool {
        self.first_after > self.first_before || self.second_after > self.second_before
    }
}

/// Lipschitz constant of the gradient of `a + b`.
pub fn pair_lipschitz(a: &Quadratic, b: &Quadratic) -> f64 {
    a.curvature
        .iter()
        .zip(&b.curvature)
        .map(|(x, y)| x + y)
        .fold(0.0, f64::max)
}

/// One gradient step of size `t` on `a + b` from `theta`.
pub fn descent_trial(a: &Quadratic, b: &Quadratic, theta: &[f64], t: f64) -> Result<DescentTrial> {
    let l = pair_lipschitz(a, b);
    let g1 = a.grad(theta);
    let g2 = b.grad(theta);
    let verdict = descent_oracle(&g1, &g2, l, t)?;
    let next: Vec<f64> = theta
        .iter()
        .zip(g1.iter().zip(&g2))
        .map(|(x, (p, q))| x - t * (p + q))
        .collect();
    Ok(DescentTrial {
        cosine: cosine_sim(&g1, &g2)?.value,
        cosine_bound: cosine_bound(&g1, &g2),
        verdict,
        total_before: a.value(theta) + b.value(theta),
        total_after: a.value(&next) + b.value(&next),
        first_before: a.value(theta),
        first_after: a.value(&next),
        second_before: b.value(theta),
        second_after: b.value(&next),
    })
}
