use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Result, StgcError};
use crate::numkit::{Matrix, Rng};

/// Two-affine GELU feed-forward expert: `gelu(h·w1 + b1)·w2 + b2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Expert {
    /// D × D′
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// D′ × D
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeLayer {
    /// D × E, no bias.
    pub router_w: Matrix,
    pub experts: Vec<Expert>,
    pub ln_gain: Vec<f64>,
    pub ln_bias: Vec<f64>,
}

/// Every trainable tensor. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    /// input_dim × D
    pub input_w: Matrix,
    pub input_b: Vec<f64>,
    pub layers: Vec<MoeLayer>,
    /// D × C
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

pub type ParamGrads = Params;

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data).expect("shape")
}

impl Params {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let (d, dp, e) = (cfg.hidden_size, cfg.intermediate_size, cfg.num_experts);
        Params {
            input_w: Matrix::zeros(cfg.input_dim, d),
            input_b: vec![0.0; d],
            layers: (0..cfg.num_layers)
                .map(|_| MoeLayer {
                    router_w: Matrix::zeros(d, e),
                    experts: (0..e)
                        .map(|_| Expert {
                            w1: Matrix::zeros(d, dp),
                            b1: vec![0.0; dp],
                            w2: Matrix::zeros(dp, d),
                            b2: vec![0.0; d],
                        })
                        .collect(),
                    ln_gain: vec![0.0; d],
                    ln_bias: vec![0.0; d],
                })
                .collect(),
            head_w: Matrix::zeros(d, cfg.num_classes),
            head_b: vec![0.0; cfg.num_classes],
        }
    }

    /// Scaled-Gaussian weights (std 1/sqrt(fan_in)), zero biases, unit LN gain.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut p = Params::zeros(cfg);
        let (d, dp) = (cfg.hidden_size as f64, cfg.intermediate_size as f64);
        p.input_w = gaussian(
            rng,
            cfg.input_dim,
            cfg.hidden_size,
            1.0 / (cfg.input_dim as f64).sqrt(),
        );
        for layer in &mut p.layers {
            layer.ln_gain.iter_mut().for_each(|g| *g = 1.0);
            layer.router_w = gaussian(rng, cfg.hidden_size, cfg.num_experts, 1.0 / d.sqrt());
            for ex in &mut layer.experts {
                ex.w1 = gaussian(rng, cfg.hidden_size, cfg.intermediate_size, 1.0 / d.sqrt());
                ex.w2 = gaussian(rng, cfg.intermediate_size, cfg.hidden_size, 1.0 / dp.sqrt());
            }
        }
        p.head_w = gaussian(rng, cfg.hidden_size, cfg.num_classes, 1.0 / d.sqrt());
        p
    }

    /// Tensor names in serialization order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["input.w".to_string(), "input.b".to_string()];
        for (l, layer) in self.layers.iter().enumerate() {
            names.push(format!("layers.{l}.ln_gain"));
            names.push(format!("layers.{l}.ln_bias"));
            names.push(format!("layers.{l}.router_w"));
            for e in 0..layer.experts.len() {
                for t in ["w1", "b1", "w2", "b2"] {
                    names.push(format!("layers.{l}.experts.{e}.{t}"));
                }
            }
        }
        names.push("head.w".to_string());
        names.push("head.b".to_string());
        names
    }

    /// All tensors as flat slices, in serialization order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.input_w.data(), &self.input_b];
        for layer in &self.layers {
            out.push(&layer.ln_gain);
            out.push(&layer.ln_bias);
            out.push(layer.router_w.data());
            for ex in &layer.experts {
                out.push(ex.w1.data());
                out.push(&ex.b1);
                out.push(ex.w2.data());
                out.push(&ex.b2);
            }
        }
        out.push(self.head_w.data());
        out.push(&self.head_b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.input_w.data_mut(), &mut self.input_b];
        for layer in &mut self.layers {
            out.push(&mut layer.ln_gain);
            out.push(&mut layer.ln_bias);
            out.push(layer.router_w.data_mut());
            for ex in &mut layer.experts {
                out.push(ex.w1.data_mut());
                out.push(&mut ex.b1);
                out.push(ex.w2.data_mut());
                out.push(&mut ex.b2);
            }
        }
        out.push(self.head_w.data_mut());
        out.push(&mut self.head_b);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Params, scale: f64) -> Result<()> {
        let src = other.tensors();
        let mut dst = self.tensors_mut();
        if src.len() != dst.len() {
            return Err(StgcError::Shape("parameter sets differ in layout".into()));
        }
        for (d, s) in dst.iter_mut().zip(src) {
            if d.len() != s.len() {
                return Err(StgcError::Shape("parameter tensors differ in size".into()));
            }
            for (a, b) in d.iter_mut().zip(s) {
                *a += scale * b;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut()
            .into_iter()
            .for_each(|t| t.iter_mut().for_each(|v| *v *= s));
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// FNV-1a over the bit patterns of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Params::zeros(cfg);
        let a: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        let b: Vec<usize> = reference.tensors().iter().map(|t| t.len()).collect();
        if a != b {
            return Err(StgcError::Shape(
                "parameters do not match the model configuration".into(),
            ));
        }
        Ok(())
    }
}
