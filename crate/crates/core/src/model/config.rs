use serde::{Deserialize, Serialize};

use crate::error::{Result, StgcError};
use crate::routing::CapacityPolicy;

/// Which conflict-elimination objective to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CelKind {
    /// Cross-entropy on the softmax of negated router logits.
    CeLike,
    /// Plain routing score of the current expert.
    MseLike,
}

impl std::str::FromStr for CelKind {
    type Err = StgcError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce_like" | "ce" => Ok(CelKind::CeLike),
            "mse_like" | "mse" => Ok(CelKind::MseLike),
            other => Err(StgcError::Config(format!(
                "unknown cel_kind '{other}' (expected ce_like or mse_like)"
            ))),
        }
    }
}

/// Architecture and regularizer hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_size: usize,
    pub intermediate_size: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub num_layers: usize,
    pub num_classes: usize,
    /// Conflict threshold on the token similarity metric.
    pub tau: f64,
    /// Load-balancing loss weight.
    pub alpha: f64,
    /// Conflict-elimination loss weight.
    pub beta: f64,
    pub cel_kind: CelKind,
    /// Minimize `+log p'` instead of `-log p'`; comparison only.
    pub cel_literal_sign: bool,
    /// Evaluation-time expert capacity; `None` is unlimited.
    pub capacity_factor: Option<f64>,
    pub bpr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 16,
            hidden_size: 16,
            intermediate_size: 32,
            num_experts: 4,
            top_k: 2,
            num_layers: 2,
            num_classes: 8,
            tau: 0.0,
            alpha: 0.01,
            beta: 1.0,
            cel_kind: CelKind::CeLike,
            cel_literal_sign: false,
            capacity_factor: None,
            bpr: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("input_dim", self.input_dim),
            ("hidden_size", self.hidden_size),
            ("intermediate_size", self.intermediate_size),
            ("num_experts", self.num_experts),
            ("num_layers", self.num_layers),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(StgcError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(StgcError::Config(format!(
                "top_k must be in 1..={}, got {}",
                self.num_experts, self.top_k
            )));
        }
        if !(-1.0..=1.0).contains(&self.tau) {
            return Err(StgcError::Config(format!(
                "tau must be in [-1, 1], got {}",
                self.tau
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(StgcError::Config(format!(
                "alpha must be >= 0, got {}",
                self.alpha
            )));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(StgcError::Config(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if let Some(cf) = self.capacity_factor {
            CapacityPolicy::new(cf, self.bpr)?;
        }
        Ok(())
    }

    /// Evaluation capacity policy, if one is configured.
    pub fn capacity_policy(&self) -> Option<CapacityPolicy> {
        self.capacity_factor.map(|cf| CapacityPolicy {
            capacity_factor: cf,
            bpr: self.bpr,
        })
    }
}
