//! Optimizers, the two-phase training step and the experiment loop.
//!
//! A step runs one forward pass per micro-batch. Phase 1 backpropagates the
//! main loss into per-token bias gradients only and flags conflicting
//! tokens; parameters are untouched. Phase 2 reuses the same trace to build
//! `main + α·aux + β·cel`, backpropagates it fully and updates.

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{consistency_from_records, MetricsSnapshot};
use crate::conflict::{identify_conflicting, TokenGradRecord};
use crate::error::{Result, StgcError};
use crate::losses::{
    aux_loss_with_grad, cel_with_grad, load_statistics, main_loss, FlaggedLogits, LossBreakdown,
};
use crate::model::{BackwardSeeds, Model, ModelConfig, ParamGrads, Params};
use crate::numkit::{Matrix, Rng};
use crate::routing::CapacityPolicy;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = StgcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::default()),
            other => Err(StgcError::Config(format!(
                "unknown optimizer '{other}' (expected sgd or adam)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub cosine_decay: bool,
    pub seed: u64,
    pub stgc_enabled: bool,
    /// Only `β·cel` drives the update.
    pub verify_mode: bool,
    /// Micro-batches per update; conflicts are identified per micro-batch.
    pub grad_accum: usize,
    /// Steps between gradient-consistency measurements (0 disables them).
    pub consistency_stride: usize,
    /// Pool records of all micro-batches for the consistency statistic.
    pub pool_accum: bool,
    pub include_diagonal: bool,
    pub per_layer_consistency: bool,
    /// Steps between validation passes (0 disables; the last step always runs one).
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Apply the model's capacity policy while training.
    pub train_capacity: bool,
    /// Put per-step wall time into the metrics.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 64,
            lr: 3e-3,
            optimizer: OptimizerKind::default(),
            cosine_decay: false,
            seed: 7,
            stgc_enabled: true,
            verify_mode: false,
            grad_accum: 1,
            consistency_stride: 10,
            pool_accum: false,
            include_diagonal: false,
            per_layer_consistency: false,
            eval_every: 100,
            eval_batch: 256,
            train_capacity: false,
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StgcError::Config(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.eval_batch == 0 {
            return bad("batch_size, grad_accum and eval_batch must be >= 1".into());
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 {
                return bad("adam needs 0 <= beta1, beta2 < 1 and eps > 0".into());
            }
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_decay {
            let frac = step as f64 / self.steps as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.lr
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    m: Option<Params>,
    v: Option<Params>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &Params) -> Self {
        let moments = matches!(kind, OptimizerKind::Adam { .. });
        OptimizerState {
            kind,
            step: 0,
            m: moments.then(|| params.zeros_like()),
            v: moments.then(|| params.zeros_like()),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &ParamGrads, lr: f64) -> Result<()> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => params.add_scaled(grads, -lr),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (m, v) = (
                    self.m.as_mut().expect("adam m"),
                    self.v.as_mut().expect("adam v"),
                );
                let bc1 = 1.0 - beta1.powi(self.step as i32);
                let bc2 = 1.0 - beta2.powi(self.step as i32);
                let mut pt = params.tensors_mut();
                let gt = grads.tensors();
                let mut mt = m.tensors_mut();
                let mut vt = v.tensors_mut();
                if pt.len() != gt.len() {
                    return Err(StgcError::Shape(
                        "gradient layout differs from parameters".into(),
                    ));
                }
                for i in 0..pt.len() {
                    for j in 0..pt[i].len() {
                        let g = gt[i][j];
                        mt[i][j] = beta1 * mt[i][j] + (1.0 - beta1) * g;
                        vt[i][j] = beta2 * vt[i][j] + (1.0 - beta2) * g * g;
                        let mh = mt[i][j] / bc1;
                        let vh = vt[i][j] / bc2;
                        pt[i][j] -= lr * mh / (vh.sqrt() + eps);
                    }
                }
                Ok(())
            }
        }
    }
}

/// One micro-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Self {
        Batch {
            features: ds.features(indices),
            labels: ds.labels(indices),
        }
    }
}

/// Seeded shuffling without replacement, reshuffled every epoch.
#[derive(Debug, Clone)]
pub struct Batcher {
    rng: Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Batcher {
    pub fn new(len: usize, rng: Rng) -> Result<Self> {
        if len == 0 {
            return Err(StgcError::Empty("training set"));
        }
        let mut b = Batcher {
            rng,
            order: (0..len).collect(),
            pos: 0,
        };
        b.rng.shuffle(&mut b.order);
        Ok(b)
    }

    pub fn next_indices(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Phase-1 result for one micro-batch.
#[derive(Debug, Clone)]
pub struct CaptureResult {
    pub records: Vec<TokenGradRecord>,
    pub report: crate::conflict::ConflictReport,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub conflicting_ratio: f64,
    pub num_conflicting: usize,
    pub per_layer_conflicting_ratio: Vec<f64>,
    pub consistency: Option<(f64, f64)>,
    pub per_layer_consistency: Option<Vec<Option<f64>>>,
    pub load_fractions: Vec<Vec<f64>>,
    pub mean_scores: Vec<Vec<f64>>,
    pub phase1_ms: f64,
    pub total_ms: f64,
}

/// What a step should measure beyond the losses.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepRequest {
    pub consistency: bool,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Phase 1 on an existing trace: main-loss bias-gradient capture and
/// conflict identification. Parameters are not modified.
pub fn capture_phase(
    model: &Model,
    trace: &crate::model::ForwardTrace,
    main_grad: &Matrix,
) -> Result<CaptureResult> {
    let records = model.capture_token_bias_grads(trace, main_grad)?;
    let report = identify_conflicting(&records, model.config.tau, model.config.num_layers)?;
    Ok(CaptureResult { records, report })
}

type ConsistencyPart = (f64, f64, Option<Vec<Option<f64>>>);

/// One optimizer update over `batches` (gradient accumulation when more
/// than one).
pub fn train_step(
    model: &mut Model,
    opt: &mut OptimizerState,
    batches: &[Batch],
    cfg: &TrainConfig,
    lr: f64,
    request: StepRequest,
) -> Result<StepResult> {
    if batches.is_empty() || batches.iter().any(|b| b.labels.is_empty()) {
        return Err(StgcError::Empty("training batch"));
    }
    let start = Instant::now();
    let mc = model.config.clone();
    let layers = mc.num_layers;
    let e = mc.num_experts;
    let capacity: Option<CapacityPolicy> = if cfg.train_capacity {
        mc.capacity_policy()
    } else {
        None
    };
    let use_cel = cfg.stgc_enabled || cfg.verify_mode;
    let mut total_grads = model.params.zeros_like();
    let mut sums = [0.0f64; 3];
    let mut flagged_total = 0usize;
    let mut records_total = 0usize;
    let mut layer_counts = vec![(0usize, 0usize); layers];
    let mut load_fractions = vec![vec![0.0; e]; layers];
    let mut mean_scores = vec![vec![0.0; e]; layers];
    let mut pooled: Vec<TokenGradRecord> = Vec::new();
    // (mean, std, per-layer) of each measured micro-batch
    let mut consistency_parts: Vec<ConsistencyPart> = Vec::new();
    let mut phase1_ms = 0.0;
    let scale = 1.0 / batches.len() as f64;

    let mut token_offset = 0usize;
    for batch in batches {
        let trace = model.forward(&batch.features, capacity.as_ref())?;
        let (main, main_grad) = main_loss(&trace.logits, &batch.labels)?;

        // phase 1
        let p1 = Instant::now();
        let cap = capture_phase(model, &trace, &main_grad)?;
        phase1_ms += ms(p1);

        flagged_total += cap.report.num_conflicting;
        records_total += cap.report.num_records;
        for rec in &cap.records {
            layer_counts[rec.layer_index].1 += 1;
        }
        for f in &cap.report.flagged {
            layer_counts[f.layer_index].0 += 1;
        }
        if request.consistency {
            if cfg.pool_accum {
                pooled.extend(cap.records.iter().cloned().map(|mut r| {
                    r.token_index += token_offset;
                    r
                }));
            } else if let Ok(stats) = consistency_from_records(&cap.records, cfg.include_diagonal) {
                let pl = cfg.per_layer_consistency.then(|| stats.per_layer(layers));
                consistency_parts.push((stats.mean, stats.std, pl));
            }
        }

        // phase 2 on the same trace
        let n = batch.labels.len();
        let mut router_seeds: Vec<Matrix> = vec![Matrix::zeros(n, e); layers];
        let mut any_router_seed = false;
        let mut aux = 0.0;
        for (l, lt) in trace.layers.iter().enumerate() {
            let (a, g) = aux_loss_with_grad(&lt.decisions, e)?;
            aux += a / layers as f64;
            let (f, p) = load_statistics(&lt.decisions, e)?;
            crate::numkit::axpy(&mut load_fractions[l], scale, &f);
            crate::numkit::axpy(&mut mean_scores[l], scale, &p);
            if mc.alpha != 0.0 && !cfg.verify_mode {
                router_seeds[l].add_scaled(&g, mc.alpha / layers as f64)?;
                any_router_seed = true;
            }
        }
        let mut cel = 0.0;
        if use_cel && !cap.report.flagged.is_empty() {
            let flagged: Vec<FlaggedLogits> = cap
                .report
                .flagged
                .iter()
                .map(|f| FlaggedLogits {
                    logits: trace.layers[f.layer_index].router_logits.row(f.token_index),
                    expert_id: f.expert_id,
                })
                .collect();
            let (value, grads) = cel_with_grad(mc.cel_kind, mc.cel_literal_sign, &flagged, e)?;
            cel = value;
            if mc.beta != 0.0 {
                for (f, g) in cap.report.flagged.iter().zip(&grads) {
                    crate::numkit::axpy(
                        router_seeds[f.layer_index].row_mut(f.token_index),
                        mc.beta,
                        g,
                    );
                }
                any_router_seed = true;
            }
        }
        let loss = LossBreakdown::new(main, aux, cel, mc.alpha, mc.beta);
        if !loss.is_finite() {
            return Err(StgcError::NonFiniteLoss {
                main: loss.main,
                aux: loss.aux,
                cel: loss.cel,
                total: loss.total,
            });
        }
        sums[0] += main;
        sums[1] += aux;
        sums[2] += cel;

        let zero_logits;
        let logits_grad = if cfg.verify_mode {
            zero_logits = Matrix::zeros(main_grad.rows(), main_grad.cols());
            &zero_logits
        } else {
            &main_grad
        };
        let seeds = BackwardSeeds {
            logits_grad,
            router_logit_grads: any_router_seed.then_some(router_seeds.as_slice()),
        };
        let grads = model.backward(&trace, seeds)?;
        token_offset += n;
        if batches.len() == 1 {
            total_grads = grads;
        } else {
            total_grads.add_scaled(&grads, scale)?;
        }
    }

    if request.consistency && cfg.pool_accum {
        if let Ok(stats) = consistency_from_records(&pooled, cfg.include_diagonal) {
            let pl = cfg.per_layer_consistency.then(|| stats.per_layer(layers));
            consistency_parts.push((stats.mean, stats.std, pl));
        }
    }
    if !total_grads.is_finite() {
        return Err(StgcError::NonFinite {
            layer: usize::MAX,
            token: usize::MAX,
            stage: "parameter gradients",
        });
    }
    opt.update(&mut model.params, &total_grads, lr)?;

    let k = batches.len() as f64;
    let cel_logged = if use_cel { sums[2] / k } else { 0.0 };
    let loss = LossBreakdown::new(sums[0] / k, sums[1] / k, cel_logged, mc.alpha, mc.beta);
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let consistency = (!consistency_parts.is_empty()).then(|| {
        let c = consistency_parts.len() as f64;
        (
            consistency_parts.iter().map(|p| p.0).sum::<f64>() / c,
            consistency_parts.iter().map(|p| p.1).sum::<f64>() / c,
        )
    });
    let per_layer_consistency = consistency_parts.first().and_then(|p| p.2.clone());
    Ok(StepResult {
        loss,
        conflicting_ratio: ratio(flagged_total, records_total),
        num_conflicting: flagged_total,
        per_layer_conflicting_ratio: layer_counts.iter().map(|&(a, b)| ratio(a, b)).collect(),
        consistency,
        per_layer_consistency,
        load_fractions,
        mean_scores,
        phase1_ms,
        total_ms: ms(start),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_task_accuracy: Vec<f64>,
    pub samples: usize,
    pub capacity_factor: Option<f64>,
    pub bpr: bool,
    /// Per-expert capacity of each evaluated batch (largest seen).
    pub capacity: Option<usize>,
    /// `[layer][expert]` dropped assignments over the whole set.
    pub dropped: Vec<Vec<usize>>,
    /// Largest per-batch admitted count seen for any expert.
    pub max_admitted: usize,
}

/// Accuracy over `ds` in fixed, ordered batches of `batch` samples.
pub fn evaluate(
    model: &Model,
    ds: &Dataset,
    batch: usize,
    capacity: Option<&CapacityPolicy>,
) -> Result<EvalReport> {
    if ds.is_empty() {
        return Err(StgcError::Empty("evaluation set"));
    }
    let batch = batch.max(1);
    let (l, e) = (model.config.num_layers, model.config.num_experts);
    let mut correct = 0usize;
    let mut task_hits = vec![(0usize, 0usize); ds.num_tasks];
    let mut dropped = vec![vec![0usize; e]; l];
    let mut cap_seen: Option<usize> = None;
    let mut max_admitted = 0usize;
    let idx = ds.all_indices();
    for chunk in idx.chunks(batch) {
        let x = ds.features(chunk);
        let trace = model.forward(&x, capacity)?;
        for (li, lt) in trace.layers.iter().enumerate() {
            let mut admitted = vec![0usize; e];
            for d in &lt.decisions {
                for (slot, &ex) in d.topk_ids.iter().enumerate() {
                    if d.dropped[slot] {
                        dropped[li][ex] += 1;
                    } else {
                        admitted[ex] += 1;
                    }
                }
            }
            max_admitted = max_admitted.max(admitted.into_iter().max().unwrap_or(0));
            if let Some(c) = lt.capacity.as_ref().and_then(|c| c.capacity) {
                cap_seen = Some(cap_seen.map_or(c, |s: usize| s.max(c)));
            }
        }
        for (row, &i) in chunk.iter().enumerate() {
            let pred = crate::numkit::argtopk(trace.logits.row(row), 1)[0];
            let s = &ds.samples[i];
            let hit = (pred == s.label) as usize;
            correct += hit;
            task_hits[s.task_id].0 += hit;
            task_hits[s.task_id].1 += 1;
        }
    }
    Ok(EvalReport {
        accuracy: correct as f64 / ds.len() as f64,
        per_task_accuracy: task_hits
            .iter()
            .map(|&(h, n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
        samples: ds.len(),
        capacity_factor: capacity.map(|c| c.capacity_factor),
        bpr: capacity.is_some_and(|c| c.bpr),
        capacity: cap_seen,
        dropped,
        max_admitted,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub steps: usize,
    pub total_ms: f64,
    pub phase1_ms: f64,
    /// Phase-1 time relative to the rest of the step.
    pub overhead_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub model: Model,
    pub snapshots: Vec<MetricsSnapshot>,
    pub timing: TimingSummary,
    pub final_eval: Option<EvalReport>,
}

/// Initial model for a training seed.
pub fn init_model(model_cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(model_cfg.clone(), &mut Rng::new(seed).derive(0x1417))
}

/// Trains from a fresh model, calling `on_step` after every step.
pub fn run_experiment(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    on_step: &mut dyn FnMut(&MetricsSnapshot) -> Result<()>,
) -> Result<ExperimentOutput> {
    let model = init_model(model_cfg, cfg.seed)?;
    run_from(model, cfg, train, val, on_step)
}

/// Trains an existing model.
pub fn run_from(
    mut model: Model,
    cfg: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    on_step: &mut dyn FnMut(&MetricsSnapshot) -> Result<()>,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    model.config.validate()?;
    train.validate()?;
    if train.input_dim != model.config.input_dim || train.num_classes > model.config.num_classes {
        return Err(StgcError::Config(format!(
            "dataset (dim {}, {} classes) does not fit the model (dim {}, {} classes)",
            train.input_dim, train.num_classes, model.config.input_dim, model.config.num_classes
        )));
    }
    let mut opt = OptimizerState::new(cfg.optimizer, &model.params);
    let mut batcher = Batcher::new(train.len(), Rng::new(cfg.seed).derive(0xba7c))?;
    let eval_policy = model.config.capacity_policy();
    let mut snapshots = Vec::with_capacity(cfg.steps);
    let (mut total_ms, mut phase1_ms) = (0.0, 0.0);
    let mut final_eval = None;
    for step in 0..cfg.steps {
        let batches: Vec<Batch> = (0..cfg.grad_accum)
            .map(|_| Batch::from_dataset(train, &batcher.next_indices(cfg.batch_size)))
            .collect();
        let request = StepRequest {
            consistency: cfg.consistency_stride > 0 && step % cfg.consistency_stride == 0,
        };
        let r = train_step(
            &mut model,
            &mut opt,
            &batches,
            cfg,
            cfg.lr_at(step),
            request,
        )?;
        total_ms += r.total_ms;
        phase1_ms += r.phase1_ms;
        let last = step + 1 == cfg.steps;
        let val_acc = match val {
            Some(v)
                if !v.is_empty()
                    && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) =>
            {
                let rep = evaluate(&model, v, cfg.eval_batch, eval_policy.as_ref())?;
                let acc = rep.accuracy;
                if last {
                    final_eval = Some(rep);
                }
                Some(acc)
            }
            _ => None,
        };
        let snap = MetricsSnapshot {
            step,
            loss: r.loss,
            grad_consistency: r.consistency.map(|c| c.0),
            grad_consistency_std: r.consistency.map(|c| c.1),
            per_layer_consistency: r.per_layer_consistency,
            conflicting_ratio: r.conflicting_ratio,
            num_conflicting: r.num_conflicting,
            per_layer_conflicting_ratio: r.per_layer_conflicting_ratio,
            load_fractions: r.load_fractions,
            mean_scores: r.mean_scores,
            val_acc,
            wall_ms: cfg.timing.then_some(r.total_ms),
        };
        on_step(&snap)?;
        snapshots.push(snap);
    }
    let rest = (total_ms - phase1_ms).max(1e-9);
    Ok(ExperimentOutput {
        model,
        snapshots,
        timing: TimingSummary {
            steps: cfg.steps,
            total_ms,
            phase1_ms,
            overhead_fraction: phase1_ms / rest,
        },
        final_eval,
    })
}

/// Mean of `values` over `[lo, hi)`, skipping `None`.
pub fn window_mean(values: &[Option<f64>], lo: usize, hi: usize) -> Option<f64> {
    let v: Vec<f64> = values[lo.min(values.len())..hi.min(values.len())]
        .iter()
        .flatten()
        .copied()
        .collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}
