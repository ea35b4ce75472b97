//! Toy MoE classifier: input projection, `L` residual MoE blocks
//! (`x + MoE(LN(x))`), linear classification head.
//!
//! Forward passes return a [`ForwardTrace`] that caches every activation the
//! reverse pass needs, so the same forward serves both the gradient-capture
//! backward and the optimizing backward. Top-k selection is treated as a
//! constant; gradients reach the router through the mixing weights and
//! through any loss seeded directly on router logits.

mod checkpoint;
mod config;
mod params;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use config::{CelKind, ModelConfig};
pub use params::{Expert, MoeLayer, ParamGrads, Params};

use crate::conflict::TokenGradRecord;
use crate::error::{Result, StgcError};
use crate::numkit::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, LayerNormCache, Matrix, Rng,
};
use crate::routing::{apply_capacity, CapacityPolicy, CapacityStats, RoutingDecision};

/// Activations of one expert for one token.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertActivation {
    /// `h·w1 + b1`
    pub pre: Vec<f64>,
    /// `gelu(pre)`
    pub post: Vec<f64>,
    /// `post·w2 + b2`
    pub out: Vec<f64>,
}

impl Expert {
    pub fn forward(&self, h: &[f64]) -> ExpertActivation {
        let mut pre = self.w1.vec_mul(h);
        pre.iter_mut().zip(&self.b1).for_each(|(a, b)| *a += b);
        let post: Vec<f64> = pre.iter().map(|&a| gelu(a)).collect();
        let mut out = self.w2.vec_mul(&post);
        out.iter_mut().zip(&self.b2).for_each(|(a, b)| *a += b);
        ExpertActivation { pre, post, out }
    }

    /// Bias gradients of this expert for one token, given the gradient
    /// `upstream` at the MoE output and the token's mixing weight.
    /// Returns `(g1, g2)` with `g1 ∈ R^{D′}` and `g2 ∈ R^{D}`.
    pub fn bias_grads(
        &self,
        act: &ExpertActivation,
        weight: f64,
        upstream: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let g2: Vec<f64> = upstream.iter().map(|d| weight * d).collect();
        let du = self.w2.mul_vec(&g2);
        let g1 = du
            .iter()
            .zip(&act.pre)
            .map(|(d, &a)| d * gelu_grad(a))
            .collect();
        (g1, g2)
    }
}

/// Output of one MoE layer over a batch.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    pub outputs: Matrix,
    pub logits: Matrix,
    pub decisions: Vec<RoutingDecision>,
    /// `[token][slot]`; `None` for dropped slots.
    pub activations: Vec<Vec<Option<ExpertActivation>>>,
    pub capacity: Option<CapacityStats>,
}

impl MoeLayer {
    /// Routes every row of `tokens` and mixes the selected experts' outputs.
    /// `layer_index` only labels errors.
    pub fn forward(
        &self,
        tokens: &Matrix,
        top_k: usize,
        capacity: Option<&CapacityPolicy>,
        layer_index: usize,
    ) -> Result<MoeOutput> {
        let n = tokens.rows();
        let d = tokens.cols();
        if d != self.router_w.rows() {
            return Err(StgcError::Shape(format!(
                "layer {layer_index}: tokens have width {d}, router expects {}",
                self.router_w.rows()
            )));
        }
        let num_experts = self.experts.len();
        let logits = tokens.matmul(&self.router_w)?;
        let mut decisions = Vec::with_capacity(n);
        for t in 0..n {
            let row = logits.row(t);
            if row.iter().any(|v| !v.is_finite()) {
                return Err(StgcError::NonFinite {
                    layer: layer_index,
                    token: t,
                    stage: "router logits",
                });
            }
            decisions.push(RoutingDecision::from_logits(row, top_k)?);
        }
        let capacity = match capacity {
            Some(policy) => Some(apply_capacity(&mut decisions, num_experts, policy)?),
            None => None,
        };
        let mut outputs = Matrix::zeros(n, d);
        let mut activations = Vec::with_capacity(n);
        for (t, dec) in decisions.iter().enumerate() {
            let h = tokens.row(t);
            let mut slots = Vec::with_capacity(dec.k());
            for (slot, &e) in dec.topk_ids.iter().enumerate() {
                if dec.dropped[slot] {
                    slots.push(None);
                    continue;
                }
                let act = self.experts[e].forward(h);
                let w = dec.topk_weights[slot];
                for (o, y) in outputs.row_mut(t).iter_mut().zip(&act.out) {
                    *o += w * y;
                }
                slots.push(Some(act));
            }
            if outputs.row(t).iter().any(|v| !v.is_finite()) {
                return Err(StgcError::NonFinite {
                    layer: layer_index,
                    token: t,
                    stage: "expert mixture",
                });
            }
            activations.push(slots);
        }
        Ok(MoeOutput {
            outputs,
            logits,
            decisions,
            activations,
            capacity,
        })
    }
}

/// Cached activations of one residual MoE block.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// Block input (before layer norm).
    pub input: Matrix,
    pub ln_caches: Vec<LayerNormCache>,
    /// Layer-normed input seen by router and experts.
    pub normed: Matrix,
    pub router_logits: Matrix,
    pub decisions: Vec<RoutingDecision>,
    pub activations: Vec<Vec<Option<ExpertActivation>>>,
    pub capacity: Option<CapacityStats>,
    /// `input + MoE(normed)`
    pub output: Matrix,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub features: Matrix,
    /// Input projection output (first block input).
    pub embedded: Matrix,
    pub layers: Vec<LayerTrace>,
    pub logits: Matrix,
}

impl ForwardTrace {
    pub fn num_tokens(&self) -> usize {
        self.features.rows()
    }

    pub fn final_hidden(&self) -> &Matrix {
        self.layers.last().map_or(&self.embedded, |l| &l.output)
    }
}

/// Gradient seeds for [`Model::backward`].
#[derive(Debug, Clone, Copy)]
pub struct BackwardSeeds<'a> {
    /// dLoss/dlogits, N × C.
    pub logits_grad: &'a Matrix,
    /// Extra dLoss/d(router logits), one N × E matrix per layer.
    pub router_logit_grads: Option<&'a [Matrix]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BackwardMode {
    Full,
    /// Bias gradients and per-token records only; weight outer products skipped.
    Capture,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        config.validate()?;
        params.check_layout(&config)?;
        Ok(Model { config, params })
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != self.config.input_dim {
            return Err(StgcError::Shape(format!(
                "features have {} columns, model expects {}",
                features.cols(),
                self.config.input_dim
            )));
        }
        if features.rows() == 0 {
            return Err(StgcError::Empty("feature batch"));
        }
        Ok(())
    }

    pub fn embed(&self, features: &Matrix) -> Result<Matrix> {
        self.check_features(features)?;
        let mut x = features.matmul(&self.params.input_w)?;
        for t in 0..x.rows() {
            x.row_mut(t)
                .iter_mut()
                .zip(&self.params.input_b)
                .for_each(|(a, b)| *a += b);
        }
        Ok(x)
    }

    /// One residual block: `x + MoE(LN(x))`.
    pub fn block_forward(
        &self,
        block_index: usize,
        x: &Matrix,
        capacity: Option<&CapacityPolicy>,
    ) -> Result<LayerTrace> {
        let layer = self
            .params
            .layers
            .get(block_index)
            .ok_or_else(|| StgcError::Shape(format!("block {block_index} does not exist")))?;
        for t in 0..x.rows() {
            if x.row(t).iter().any(|v| !v.is_finite()) {
                return Err(StgcError::NonFinite {
                    layer: block_index,
                    token: t,
                    stage: "block input",
                });
            }
        }
        let mut normed = Matrix::zeros(x.rows(), x.cols());
        let mut ln_caches = Vec::with_capacity(x.rows());
        for t in 0..x.rows() {
            let (y, cache) = layer_norm(x.row(t), &layer.ln_gain, &layer.ln_bias);
            normed.row_mut(t).copy_from_slice(&y);
            ln_caches.push(cache);
        }
        let moe = layer.forward(&normed, self.config.top_k, capacity, block_index)?;
        let mut output = x.clone();
        output.add_scaled(&moe.outputs, 1.0)?;
        Ok(LayerTrace {
            input: x.clone(),
            ln_caches,
            normed,
            router_logits: moe.logits,
            decisions: moe.decisions,
            activations: moe.activations,
            capacity: moe.capacity,
            output,
        })
    }

    pub fn head(&self, hidden: &Matrix) -> Result<Matrix> {
        let mut logits = hidden.matmul(&self.params.head_w)?;
        for t in 0..logits.rows() {
            logits
                .row_mut(t)
                .iter_mut()
                .zip(&self.params.head_b)
                .for_each(|(a, b)| *a += b);
        }
        Ok(logits)
    }

    pub fn forward(
        &self,
        features: &Matrix,
        capacity: Option<&CapacityPolicy>,
    ) -> Result<ForwardTrace> {
        let embedded = self.embed(features)?;
        let mut layers = Vec::with_capacity(self.config.num_layers);
        for l in 0..self.config.num_layers {
            let x = layers
                .last()
                .map_or(&embedded, |lt: &LayerTrace| &lt.output);
            let lt = self.block_forward(l, x, capacity)?;
            layers.push(lt);
        }
        let hidden = layers.last().map_or(&embedded, |lt| &lt.output);
        let logits = self.head(hidden)?;
        Ok(ForwardTrace {
            features: features.clone(),
            embedded,
            layers,
            logits,
        })
    }

    pub fn predict(
        &self,
        features: &Matrix,
        capacity: Option<&CapacityPolicy>,
    ) -> Result<Vec<usize>> {
        let trace = self.forward(features, capacity)?;
        Ok((0..trace.logits.rows())
            .map(|t| crate::numkit::argtopk(trace.logits.row(t), 1)[0])
            .collect())
    }

    fn check_trace(&self, trace: &ForwardTrace, seeds: &BackwardSeeds) -> Result<()> {
        let n = trace.num_tokens();
        if trace.layers.len() != self.config.num_layers
            || trace.logits.shape() != (n, self.config.num_classes)
            || seeds.logits_grad.shape() != trace.logits.shape()
            || trace.embedded.cols() != self.config.hidden_size
        {
            return Err(StgcError::Shape(
                "trace or logit gradient does not match the model".into(),
            ));
        }
        if let Some(rg) = seeds.router_logit_grads {
            if rg.len() != self.config.num_layers
                || rg.iter().any(|m| m.shape() != (n, self.config.num_experts))
            {
                return Err(StgcError::Shape(
                    "router logit gradients must be N x E per layer".into(),
                ));
            }
        }
        Ok(())
    }

    /// Analytic gradients of every trainable tensor.
    pub fn backward(&self, trace: &ForwardTrace, seeds: BackwardSeeds) -> Result<ParamGrads> {
        self.backward_impl(trace, seeds, BackwardMode::Full)
            .map(|(g, _)| g)
    }

    /// Per-token, per-layer, per-assigned-expert bias gradients of the loss
    /// whose logit gradient is `logits_grad`. Parameters are untouched.
    pub fn capture_token_bias_grads(
        &self,
        trace: &ForwardTrace,
        logits_grad: &Matrix,
    ) -> Result<Vec<TokenGradRecord>> {
        let seeds = BackwardSeeds {
            logits_grad,
            router_logit_grads: None,
        };
        self.backward_impl(trace, seeds, BackwardMode::Capture)
            .map(|(_, r)| r)
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        seeds: BackwardSeeds,
        mode: BackwardMode,
    ) -> Result<(ParamGrads, Vec<TokenGradRecord>)> {
        self.check_trace(trace, &seeds)?;
        let p = &self.params;
        let n = trace.num_tokens();
        let d = self.config.hidden_size;
        let full = mode == BackwardMode::Full;
        let mut grads = p.zeros_like();
        let mut records = Vec::new();

        // head
        let hidden = trace.final_hidden();
        let dlogits = seeds.logits_grad;
        let mut dx = Matrix::zeros(n, d);
        for t in 0..n {
            let g = dlogits.row(t);
            if full {
                grads.head_w.add_outer(hidden.row(t), g);
            }
            crate::numkit::axpy(&mut grads.head_b, 1.0, g);
            dx.row_mut(t).copy_from_slice(&p.head_w.mul_vec(g));
        }

        for (l, lt) in trace.layers.iter().enumerate().rev() {
            let layer = &p.layers[l];
            let gl = &mut grads.layers[l];
            let extra = seeds.router_logit_grads.map(|rg| &rg[l]);
            let mut dx_in = dx.clone();
            for t in 0..n {
                let upstream = dx.row(t);
                let h = lt.normed.row(t);
                let dec = &lt.decisions[t];
                let mut dh = vec![0.0; d];
                let mut dw = vec![0.0; dec.k()];
                for (slot, act) in lt.activations[t].iter().enumerate() {
                    let Some(act) = act else { continue };
                    let e = dec.topk_ids[slot];
                    let expert = &layer.experts[e];
                    let (g1, g2) = expert.bias_grads(act, dec.topk_weights[slot], upstream);
                    let ge = &mut gl.experts[e];
                    crate::numkit::axpy(&mut ge.b2, 1.0, &g2);
                    crate::numkit::axpy(&mut ge.b1, 1.0, &g1);
                    if full {
                        ge.w2.add_outer(&act.post, &g2);
                        ge.w1.add_outer(h, &g1);
                    }
                    crate::numkit::axpy(&mut dh, 1.0, &expert.w1.mul_vec(&g1));
                    dw[slot] = crate::numkit::dot(upstream, &act.out);
                    if mode == BackwardMode::Capture {
                        records.push(TokenGradRecord {
                            token_index: t,
                            layer_index: l,
                            expert_id: e,
                            g1,
                            g2,
                        });
                    }
                }
                // softmax over the selected logits
                let mut dz = match extra {
                    Some(m) => m.row(t).to_vec(),
                    None => vec![0.0; self.config.num_experts],
                };
                let wdw: f64 = dec.topk_weights.iter().zip(&dw).map(|(w, g)| w * g).sum();
                for (slot, &e) in dec.topk_ids.iter().enumerate() {
                    dz[e] += dec.topk_weights[slot] * (dw[slot] - wdw);
                }
                if full {
                    gl.router_w.add_outer(h, &dz);
                }
                crate::numkit::axpy(&mut dh, 1.0, &layer.router_w.mul_vec(&dz));
                let dxi = layer_norm_backward(
                    &dh,
                    &lt.ln_caches[t],
                    &layer.ln_gain,
                    &mut gl.ln_gain,
                    &mut gl.ln_bias,
                );
                crate::numkit::axpy(dx_in.row_mut(t), 1.0, &dxi);
            }
            dx = dx_in;
        }

        if full {
            for t in 0..n {
                grads.input_w.add_outer(trace.features.row(t), dx.row(t));
            }
        }
        for t in 0..n {
            crate::numkit::axpy(&mut grads.input_b, 1.0, dx.row(t));
        }
        Ok((grads, records))
    }

    /// Full per-token weight gradients `(∂/∂w1, ∂/∂w2)` for a captured record:
    /// outer products of the cached expert input / hidden activation with the
    /// record's bias gradients.
    pub fn token_weight_grads(
        &self,
        trace: &ForwardTrace,
        record: &TokenGradRecord,
    ) -> Result<(Matrix, Matrix)> {
        let lt = trace
            .layers
            .get(record.layer_index)
            .ok_or_else(|| StgcError::Shape("record layer out of range".into()))?;
        let dec = &lt.decisions[record.token_index];
        let slot = dec.slot_of(record.expert_id).ok_or_else(|| {
            StgcError::Shape("record expert was not selected for this token".into())
        })?;
        let act = lt.activations[record.token_index][slot]
            .as_ref()
            .ok_or_else(|| StgcError::Shape("record refers to a dropped assignment".into()))?;
        let (d, dp) = (self.config.hidden_size, self.config.intermediate_size);
        let mut w1 = Matrix::zeros(d, dp);
        w1.add_outer(lt.normed.row(record.token_index), &record.g1);
        let mut w2 = Matrix::zeros(dp, d);
        w2.add_outer(&act.post, &record.g2);
        Ok((w1, w2))
    }
}
