//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero when a criterion fails that is not listed in
//! `KNOWN_UNATTAINABLE`. Tolerances and thresholds are pinned below.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use stgc::analysis::{
    descent_trial, pair_lipschitz, pairwise_mean_similarity, proxy_validation, DescentVerdict,
    Quadratic,
};
use stgc::conflict::{token_similarity, TokenGradRecord};
use stgc::losses::{aux_loss, cel_ce, cel_mse, main_loss, FlaggedLogits};
use stgc::model::{BackwardSeeds, ForwardTrace, Model, ModelConfig};
use stgc::numkit::{dot, norm, Matrix, Rng};
use stgc::routing::{apply_capacity, CapacityPolicy, RoutingDecision};
use stgc::synthdata::{generate, Dataset, SynthSpec};
use stgc::train::{
    evaluate, init_model, run_experiment, window_mean, ExperimentOutput, TrainConfig,
};

// criterion 1
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const FD_SEEDS: u64 = 10;
const FD_MAX_SKIPPED: usize = 4;
const FD_TIME_LIMIT: Duration = Duration::from_secs(30);
// criterion 2
const LINEARITY_TOL: f64 = 1e-10;
const LINEARITY_BATCHES: u64 = 20;
// criterion 3
const EQ_TOL: f64 = 1e-6;
// criteria 4-6, 9
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_SEEDS: usize = 4;
const RUN_STEPS: usize = 2000;
const CONSISTENCY_GAIN: f64 = 0.05;
const CONFLICT_DROP: f64 = 0.30;
const EDGE_WINDOW: usize = 50;
const AUX_WINDOW: usize = 100;
const VERIFY_TIME_LIMIT: Duration = Duration::from_secs(600);
// criterion 7
const PROXY_MIN_R: f64 = 0.8;
const PROXY_CONTROL_MAX: f64 = 0.2;
const PROXY_SEED: u64 = 7;
const PROXY_TOKENS: usize = 256;
// criterion 8
const DESCENT_INSTANCES: usize = 1000;
// criterion 9
const BPR_CAPACITY: f64 = 0.5;
const EVAL_BATCH: usize = 256;
const EXHAUSTIVE_MAX_TOKENS: usize = 6;
const EXHAUSTIVE_MAX_EXPERTS: usize = 3;
// criterion 10
const SWEEP_STEPS: usize = 200;
// criterion 11
const DETERMINISM_STEPS: usize = 60;

/// Criteria that cannot hold as written; they are run and reported but do
/// not fail the suite. The analysis is in the README.
const KNOWN_UNATTAINABLE: &[&str] = &["8b"];

struct Outcome {
    id: &'static str,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "criterion {:<4} {:<34} {}  {}",
        o.id,
        o.name,
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    let _ = out.flush();
}

fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.normal()).collect()).unwrap()
}

/// Random model with non-trivial biases and LN parameters.
fn randomized_model(seed: u64, input_dim: usize, classes: usize) -> Model {
    let cfg = ModelConfig {
        input_dim,
        hidden_size: 8,
        intermediate_size: 16,
        num_experts: 4,
        top_k: 2,
        num_layers: 2,
        num_classes: classes,
        ..Default::default()
    };
    let mut rng = Rng::new(seed);
    let mut m = Model::new(cfg, &mut rng).unwrap();
    for layer in &mut m.params.layers {
        layer
            .ln_gain
            .iter_mut()
            .for_each(|v| *v = 1.0 + 0.3 * rng.normal());
        layer
            .ln_bias
            .iter_mut()
            .for_each(|v| *v = 0.3 * rng.normal());
        for ex in &mut layer.experts {
            ex.b1.iter_mut().for_each(|v| *v = 0.2 * rng.normal());
            ex.b2.iter_mut().for_each(|v| *v = 0.2 * rng.normal());
        }
    }
    m.params
        .input_b
        .iter_mut()
        .for_each(|v| *v = 0.2 * rng.normal());
    m.params
        .head_b
        .iter_mut()
        .for_each(|v| *v = 0.2 * rng.normal());
    m
}

fn same_routing(a: &ForwardTrace, b: &ForwardTrace) -> bool {
    a.layers.iter().zip(&b.layers).all(|(x, y)| {
        x.decisions
            .iter()
            .zip(&y.decisions)
            .all(|(p, q)| p.topk_ids == q.topk_ids)
    })
}

fn c1_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut max_skipped = 0;
    for seed in 0..FD_SEEDS {
        let model = randomized_model(1000 + seed, 6, 5);
        let mut rng = Rng::new(2000 + seed);
        let n = 5;
        let x = random_matrix(&mut rng, n, 6);
        // linear probe on logits and every layer's router logits
        let wl = random_matrix(&mut rng, n, 5);
        let wr: Vec<Matrix> = (0..2).map(|_| random_matrix(&mut rng, n, 4)).collect();
        let probe = |t: &ForwardTrace| {
            dot(t.logits.data(), wl.data())
                + t.layers
                    .iter()
                    .zip(&wr)
                    .map(|(l, w)| dot(l.router_logits.data(), w.data()))
                    .sum::<f64>()
        };
        let trace = model.forward(&x, None).unwrap();
        let grads = model
            .backward(
                &trace,
                BackwardSeeds {
                    logits_grad: &wl,
                    router_logit_grads: Some(&wr),
                },
            )
            .unwrap();
        let names = model.params.names();
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let mut skipped = 0;
        for (ti, name) in names.iter().enumerate() {
            let mut ana = analytic[ti].clone();
            let mut num = vec![0.0; ana.len()];
            for i in 0..ana.len() {
                let mut plus = model.clone();
                plus.params.tensors_mut()[ti][i] += FD_STEP;
                let mut minus = model.clone();
                minus.params.tensors_mut()[ti][i] -= FD_STEP;
                let tp = plus.forward(&x, None).unwrap();
                let tm = minus.forward(&x, None).unwrap();
                if !same_routing(&tp, &trace) || !same_routing(&tm, &trace) {
                    skipped += 1;
                    ana[i] = 0.0;
                    continue;
                }
                num[i] = (probe(&tp) - probe(&tm)) / (2.0 * FD_STEP);
            }
            let diff: Vec<f64> = ana.iter().zip(&num).map(|(a, b)| a - b).collect();
            let scale = norm(&ana).max(norm(&num));
            let rel = if scale == 0.0 {
                0.0
            } else {
                norm(&diff) / scale
            };
            if rel > worst {
                worst = rel;
                worst_at = format!("seed {seed} {name}");
            }
        }
        max_skipped = max_skipped.max(skipped);
    }
    let elapsed = t0.elapsed();
    Outcome {
        id: "1",
        name: "gradient correctness",
        pass: worst <= FD_REL_TOL && max_skipped <= FD_MAX_SKIPPED && elapsed < FD_TIME_LIMIT,
        detail: format!(
            "max rel err {worst:.2e} ({worst_at}), routing-switch skips <= {max_skipped}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

fn c2_linearity() -> Outcome {
    let mut worst = 0.0f64;
    for b in 0..LINEARITY_BATCHES {
        let model = randomized_model(3000 + b, 6, 5);
        let mut rng = Rng::new(4000 + b);
        let n = 3 + (b as usize % 10);
        let x = random_matrix(&mut rng, n, 6);
        let g = random_matrix(&mut rng, n, 5);
        let trace = model.forward(&x, None).unwrap();
        let records = model.capture_token_bias_grads(&trace, &g).unwrap();
        let batch = model
            .backward(
                &trace,
                BackwardSeeds {
                    logits_grad: &g,
                    router_logit_grads: None,
                },
            )
            .unwrap();
        for (l, layer) in batch.layers.iter().enumerate() {
            for (e, ex) in layer.experts.iter().enumerate() {
                let mut s1 = vec![0.0; ex.b1.len()];
                let mut s2 = vec![0.0; ex.b2.len()];
                for r in records
                    .iter()
                    .filter(|r| r.layer_index == l && r.expert_id == e)
                {
                    s1.iter_mut().zip(&r.g1).for_each(|(a, v)| *a += v);
                    s2.iter_mut().zip(&r.g2).for_each(|(a, v)| *a += v);
                }
                for (a, v) in s1.iter().zip(&ex.b1).chain(s2.iter().zip(&ex.b2)) {
                    worst = worst.max((a - v).abs());
                }
            }
        }
    }
    Outcome {
        id: "2",
        name: "per-token linearity",
        pass: worst <= LINEARITY_TOL,
        detail: format!("max |sum_n g_n - g_batch| = {worst:.2e} over {LINEARITY_BATCHES} batches"),
    }
}

#[allow(clippy::approx_constant)]
fn c3_equations() -> Outcome {
    let mut checks: Vec<(&str, f64, f64, f64)> = Vec::new();
    // (name, computed, literal, closed-form oracle)
    let d = RoutingDecision::from_logits(&[2.0, 1.0, 0.0, -1.0], 2).unwrap();
    let sig = 1.0 / (1.0 + (-1.0f64).exp());
    checks.push(("top-2 weight 0", d.topk_weights[0], 0.731059, sig));
    checks.push(("top-2 weight 1", d.topk_weights[1], 0.268941, 1.0 - sig));
    let z = [2.0, 0.0];
    let flagged = [FlaggedLogits {
        logits: &z,
        expert_id: 0,
    }];
    checks.push((
        "cel ce",
        cel_ce(&flagged, 2).unwrap(),
        1.063464,
        (1.0 + 2.0f64.exp()).ln() / 2.0,
    ));
    checks.push((
        "cel mse",
        cel_mse(&flagged, 2).unwrap(),
        0.880797,
        1.0 / (1.0 + (-2.0f64).exp()),
    ));
    let p = vec![0.9, 0.1 / 3.0, 0.1 / 3.0, 0.1 / 3.0];
    let decisions: Vec<RoutingDecision> = (0..8)
        .map(|_| RoutingDecision {
            scores: p.clone(),
            topk_ids: vec![0],
            topk_weights: vec![1.0],
            dropped: vec![false],
        })
        .collect();
    checks.push((
        "aux",
        aux_loss(&decisions, 4).unwrap(),
        3.6,
        4.0 * 1.0 * 0.9,
    ));
    let h = std::f64::consts::FRAC_1_SQRT_2;
    let grads = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![h, h]];
    let cons = pairwise_mean_similarity(&grads, false).unwrap();
    checks.push(("consistency", cons, 0.4714, (0.0 + h + h) / 3.0));
    let rec = TokenGradRecord {
        token_index: 0,
        layer_index: 0,
        expert_id: 0,
        g1: vec![-1.0, 0.0],
        g2: vec![-1.0, 0.0],
    };
    let s = token_similarity(&rec, &[0.5, 0.5], &[0.5, 0.5]).unwrap();
    checks.push(("token cosine", s, -0.707107, -h));
    let mut failed = Vec::new();
    for (name, got, literal, oracle) in &checks {
        // the literal is printed to 4 or 6 decimals
        let literal_tol = if *name == "consistency" { 5e-5 } else { EQ_TOL };
        if (got - oracle).abs() > EQ_TOL || (got - literal).abs() > literal_tol {
            failed.push(format!("{name}={got}"));
        }
    }
    Outcome {
        id: "3",
        name: "equation unit values",
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} values within {EQ_TOL:e}", checks.len())
        } else {
            format!("mismatch: {}", failed.join(", "))
        },
    }
}

fn default_data() -> (Dataset, Dataset) {
    generate(&SynthSpec::default()).unwrap().split(0.2)
}

fn train_cfg(seed: u64, stgc: bool, verify: bool) -> TrainConfig {
    TrainConfig {
        steps: RUN_STEPS,
        seed,
        stgc_enabled: stgc,
        verify_mode: verify,
        eval_every: 0,
        ..Default::default()
    }
}

fn column(
    out: &ExperimentOutput,
    f: impl Fn(&stgc::analysis::MetricsSnapshot) -> Option<f64>,
) -> Vec<Option<f64>> {
    out.snapshots.iter().map(f).collect()
}

fn c4_verify(train: &Dataset) -> Outcome {
    let t0 = Instant::now();
    let mut ok = 0;
    let mut parts = Vec::new();
    for &seed in &SEEDS {
        let out = run_experiment(
            &ModelConfig::default(),
            &train_cfg(seed, true, true),
            train,
            None,
            &mut |_| Ok(()),
        )
        .unwrap();
        let n = out.snapshots.len();
        let gc = column(&out, |s| s.grad_consistency);
        let cr = column(&out, |s| Some(s.conflicting_ratio));
        let (g0, g1) = (
            window_mean(&gc, 0, EDGE_WINDOW).unwrap(),
            window_mean(&gc, n - EDGE_WINDOW, n).unwrap(),
        );
        let (r0, r1) = (
            window_mean(&cr, 0, EDGE_WINDOW).unwrap(),
            window_mean(&cr, n - EDGE_WINDOW, n).unwrap(),
        );
        let drop = (r0 - r1) / r0;
        let good = g1 - g0 >= CONSISTENCY_GAIN && drop >= CONFLICT_DROP;
        ok += good as usize;
        parts.push(format!(
            "s{seed}: gc {g0:.3}->{g1:.3}, cr -{:.0}%",
            100.0 * drop
        ));
    }
    let elapsed = t0.elapsed();
    Outcome {
        id: "4",
        name: "statistical verification",
        pass: ok >= MIN_SEEDS && elapsed < VERIFY_TIME_LIMIT,
        detail: format!(
            "{ok}/{} seeds [{}], {:.0}s",
            SEEDS.len(),
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    }
}

struct PairedRuns {
    off: Vec<ExperimentOutput>,
    on: Vec<ExperimentOutput>,
}

fn paired_runs(train: &Dataset, val: &Dataset) -> PairedRuns {
    let run = |seed, stgc| {
        run_experiment(
            &ModelConfig::default(),
            &train_cfg(seed, stgc, false),
            train,
            Some(val),
            &mut |_| Ok(()),
        )
        .unwrap()
    };
    PairedRuns {
        off: SEEDS.iter().map(|&s| run(s, false)).collect(),
        on: SEEDS.iter().map(|&s| run(s, true)).collect(),
    }
}

fn final_aux(out: &ExperimentOutput) -> f64 {
    let n = out.snapshots.len();
    window_mean(&column(out, |s| Some(s.loss.aux)), n - AUX_WINDOW, n).unwrap()
}

fn c5_load_balance(runs: &PairedRuns) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for ((off, on), seed) in runs.off.iter().zip(&runs.on).zip(SEEDS) {
        let (a, b) = (final_aux(off), final_aux(on));
        ok += (b <= a) as usize;
        parts.push(format!("s{seed}: {a:.4}->{b:.4}"));
    }
    Outcome {
        id: "5",
        name: "load-balance direction",
        pass: ok >= MIN_SEEDS,
        detail: format!(
            "aux off->on, {ok}/{} seeds [{}]",
            SEEDS.len(),
            parts.join("; ")
        ),
    }
}

fn c6_task_benefit(runs: &PairedRuns) -> Outcome {
    let acc = |v: &[ExperimentOutput]| {
        v.iter()
            .map(|o| o.final_eval.as_ref().unwrap().accuracy)
            .sum::<f64>()
            / v.len() as f64
    };
    let (off, on) = (acc(&runs.off), acc(&runs.on));
    Outcome {
        id: "6",
        name: "task benefit",
        pass: on > off,
        detail: format!(
            "mean val acc off {off:.5}, on {on:.5} (margin {:+.5})",
            on - off
        ),
    }
}

fn c7_proxy() -> Outcome {
    let data = generate(&SynthSpec::default()).unwrap();
    let model = init_model(&ModelConfig::default(), PROXY_SEED).unwrap();
    let idx: Vec<usize> = (0..PROXY_TOKENS).collect();
    let trace = model.forward(&data.features(&idx), None).unwrap();
    let (_, g) = main_loss(&trace.logits, &data.labels(&idx)).unwrap();
    let rep = proxy_validation(&model, &trace, &g, PROXY_SEED).unwrap();
    Outcome {
        id: "7",
        name: "proxy validity",
        pass: rep.pearson >= PROXY_MIN_R && rep.shuffled_pearson.abs() < PROXY_CONTROL_MAX,
        detail: format!(
            "r = {:.4}, permutation control r = {:.4}, {} tokens",
            rep.pearson, rep.shuffled_pearson, rep.points
        ),
    }
}

fn random_quadratic(rng: &mut Rng, dim: usize) -> Quadratic {
    Quadratic {
        curvature: (0..dim).map(|_| 0.1 + 2.0 * rng.uniform()).collect(),
        center: (0..dim).map(|_| 2.0 * rng.normal()).collect(),
    }
}

fn c8a_descent() -> Outcome {
    let mut rng = Rng::new(8);
    let (mut positive, mut violations) = (0, 0);
    for i in 0..DESCENT_INSTANCES {
        let dim = 2 + i % 5;
        let a = random_quadratic(&mut rng, dim);
        let b = random_quadratic(&mut rng, dim);
        let theta: Vec<f64> = (0..dim).map(|_| 2.0 * rng.normal()).collect();
        let t = (0.05 + 0.95 * rng.uniform()) / pair_lipschitz(&a, &b);
        let trial = descent_trial(&a, &b, &theta, t).unwrap();
        if trial.cosine > 0.0 {
            positive += 1;
            if trial.verdict != DescentVerdict::GuaranteedDecrease || !trial.total_decreased() {
                violations += 1;
            }
        }
    }
    Outcome {
        id: "8a",
        name: "descent oracle (cos > 0)",
        pass: violations == 0 && positive > 0,
        detail: format!("{positive} of {DESCENT_INSTANCES} instances with cos > 0, {violations} without strict decrease"),
    }
}

/// Searches constructed opposing pairs for one with cos below the bound
/// whose total loss actually rises after a step with t <= 1/L.
fn c8b_bound_violation() -> Outcome {
    let mut found = None;
    let mut min_gap = f64::INFINITY;
    let mut tried = 0;
    for &ratio in &[1.0, 1.5, 2.0, 4.0, 10.0] {
        for &spread in &[0.0, 0.01, 0.1] {
            for &frac in &[0.25, 0.5, 1.0] {
                tried += 1;
                // opposing centers on either side of theta = 0
                let a = Quadratic {
                    curvature: vec![1.0, 1.0],
                    center: vec![1.0, spread],
                };
                let b = Quadratic {
                    curvature: vec![1.0, 1.0],
                    center: vec![-ratio, 0.0],
                };
                let t = frac / pair_lipschitz(&a, &b);
                let trial = descent_trial(&a, &b, &[0.0, 0.0], t).unwrap();
                min_gap = min_gap.min(trial.cosine - trial.cosine_bound);
                if trial.violates_bound() && !trial.total_decreased() {
                    found = Some(trial);
                }
            }
        }
    }
    Outcome {
        id: "8b",
        name: "descent bound counterexample",
        pass: found.is_some(),
        detail: match found {
            Some(t) => format!("cos {:.4} < bound {:.4}, loss {:.4} -> {:.4}", t.cosine, t.cosine_bound, t.total_before, t.total_after),
            None => format!(
                "no instance among {tried} has cos < bound (min cos - bound = {min_gap:.3}); the bound is <= -1 and a step t <= 1/L never raises the total"
            ),
        },
    }
}

/// The effect the bound argument is about: with opposing per-token
/// gradients the shared step raises one of the two objectives.
fn c8_supplementary() -> Outcome {
    let a = Quadratic {
        curvature: vec![1.0, 1.0],
        center: vec![1.0, 0.0],
    };
    let b = Quadratic {
        curvature: vec![1.0, 1.0],
        center: vec![-2.0, 0.5],
    };
    let trial = descent_trial(&a, &b, &[0.0, 0.0], 0.5).unwrap();
    Outcome {
        id: "8s",
        name: "opposing tokens (supplementary)",
        pass: trial.cosine < 0.0 && trial.some_objective_increased() && trial.total_decreased(),
        detail: format!(
            "cos {:.4}: first {:.3}->{:.3}, second {:.3}->{:.3}, total {:.3}->{:.3}",
            trial.cosine,
            trial.first_before,
            trial.first_after,
            trial.second_before,
            trial.second_after,
            trial.total_before,
            trial.total_after
        ),
    }
}

/// Every top-k pattern for every token, N <= 6, E <= 3: BPR admits the
/// highest-scoring tokens of each expert, up to capacity.
fn bpr_exhaustive() -> Result<usize, String> {
    let mut rng = Rng::new(99);
    let mut cases = 0;
    for e in 1..=EXHAUSTIVE_MAX_EXPERTS {
        let perms = permutations(e);
        for k in 1..=e {
            for n in 1..=EXHAUSTIVE_MAX_TOKENS {
                let total = perms.len().pow(n as u32);
                for code in 0..total {
                    let mut c = code;
                    let mut decisions = Vec::with_capacity(n);
                    for _ in 0..n {
                        let perm = &perms[c % perms.len()];
                        c /= perms.len();
                        let mut vals: Vec<f64> = (0..e).map(|_| rng.uniform() + 1e-3).collect();
                        vals.sort_by(|x, y| y.partial_cmp(x).unwrap());
                        let sum: f64 = vals.iter().sum();
                        let mut scores = vec![0.0; e];
                        for (rank, &ex) in perm.iter().enumerate() {
                            scores[ex] = vals[rank] / sum;
                        }
                        let ids: Vec<usize> = perm[..k].to_vec();
                        let wsum: f64 = ids.iter().map(|&i| scores[i]).sum();
                        decisions.push(RoutingDecision {
                            topk_weights: ids.iter().map(|&i| scores[i] / wsum).collect(),
                            scores,
                            topk_ids: ids,
                            dropped: vec![false; k],
                        });
                    }
                    for &cf in &[0.25, 0.5, 1.0] {
                        let mut d = decisions.clone();
                        let policy = CapacityPolicy::new(cf, true).unwrap();
                        let stats = apply_capacity(&mut d, e, &policy).unwrap();
                        let cap = stats.capacity.unwrap();
                        cases += 1;
                        for ex in 0..e {
                            let (mut adm, mut drop) = (Vec::new(), Vec::new());
                            for t in &d {
                                if let Some(s) = t.slot_of(ex) {
                                    if t.dropped[s] {
                                        drop.push(t.scores[ex])
                                    } else {
                                        adm.push(t.scores[ex])
                                    }
                                }
                            }
                            let assigned = adm.len() + drop.len();
                            let min_adm = adm.iter().copied().fold(f64::INFINITY, f64::min);
                            let max_drop = drop.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                            if adm.len() != assigned.min(cap)
                                || (!drop.is_empty() && min_adm < max_drop)
                            {
                                return Err(format!("n={n} e={e} k={k} cf={cf} expert {ex}"));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cases)
}

fn permutations(e: usize) -> Vec<Vec<usize>> {
    if e == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(e - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, e - 1);
            out.push(q);
        }
    }
    out
}

fn c9_bpr(runs: &PairedRuns, val: &Dataset) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (out, seed) in runs.on.iter().zip(SEEDS) {
        let plain = CapacityPolicy::new(BPR_CAPACITY, false).unwrap();
        let bpr = CapacityPolicy::new(BPR_CAPACITY, true).unwrap();
        let a = evaluate(&out.model, val, EVAL_BATCH, Some(&plain))
            .unwrap()
            .accuracy;
        let b = evaluate(&out.model, val, EVAL_BATCH, Some(&bpr))
            .unwrap()
            .accuracy;
        ok += (b >= a) as usize;
        parts.push(format!("s{seed}: {a:.3}/{b:.3}"));
    }
    let exhaustive = bpr_exhaustive();
    Outcome {
        id: "9",
        name: "capacity / BPR direction",
        pass: ok == SEEDS.len() && exhaustive.is_ok(),
        detail: format!(
            "acc no-BPR/BPR at cf {BPR_CAPACITY} [{}]; exhaustive: {}",
            parts.join("; "),
            match &exhaustive {
                Ok(n) => format!("{n} cases ok"),
                Err(e) => format!("violated at {e}"),
            }
        ),
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_stgc")
}

fn run_cli(args: &[&str]) -> Result<std::process::Output, String> {
    let out = Command::new(bin())
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "stgc {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(out)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn c10_sweep(dir: &Path) -> Outcome {
    let out = dir.join("sweep");
    let steps = SWEEP_STEPS.to_string();
    let result = (|| -> Result<String, String> {
        run_cli(&["sweep", "--out", s(&out), "--steps", &steps])?;
        let text = std::fs::read_to_string(out.join("sweep.json")).map_err(|e| e.to_string())?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let runs = v["runs"].as_array().ok_or("runs missing")?;
        if v["schema"] != 1 || runs.len() != 10 {
            return Err(format!("schema {} with {} runs", v["schema"], runs.len()));
        }
        let fields = [
            "name",
            "stgc",
            "tau",
            "beta",
            "final_val_acc",
            "final_aux",
            "final_conflicting_ratio",
        ];
        for r in runs {
            for f in fields {
                if r.get(f).is_none() {
                    return Err(format!("run without {f}"));
                }
            }
        }
        let mut grid: Vec<(f64, f64)> = runs
            .iter()
            .filter(|r| r["stgc"] == true)
            .map(|r| (r["tau"].as_f64().unwrap(), r["beta"].as_f64().unwrap()))
            .collect();
        grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = Vec::new();
        for t in [-0.1, 0.0, 0.1] {
            for b in [0.5, 1.0, 2.0] {
                want.push((t, b));
            }
        }
        if grid != want {
            return Err(format!("grid {grid:?}"));
        }
        let csv = std::fs::read_to_string(out.join("sweep.csv")).map_err(|e| e.to_string())?;
        let md = std::fs::read_to_string(out.join("sweep.md")).map_err(|e| e.to_string())?;
        if csv.lines().count() != 11 || md.lines().count() != 12 {
            return Err("table row count".into());
        }
        Ok(format!(
            "10 runs x {SWEEP_STEPS} steps, sweep.json/csv/md valid"
        ))
    })();
    Outcome {
        id: "10",
        name: "tau x beta sensitivity harness",
        pass: result.is_ok(),
        detail: result.unwrap_or_else(|e| e),
    }
}

fn c11_determinism(dir: &Path) -> Outcome {
    let steps = DETERMINISM_STEPS.to_string();
    let result = (|| -> Result<String, String> {
        let mut compared = 0;
        let mut same = |a: &PathBuf, b: &PathBuf| -> Result<(), String> {
            let x = std::fs::read(a).map_err(|e| format!("{}: {e}", a.display()))?;
            let y = std::fs::read(b).map_err(|e| format!("{}: {e}", b.display()))?;
            compared += 1;
            if x == y {
                Ok(())
            } else {
                Err(format!("{} differs from {}", a.display(), b.display()))
            }
        };
        let cfg = dir.join("det.cfg");
        std::fs::write(
            &cfg,
            "samples = 2048\nconsistency_stride = 5\neval_every = 20\nseed = 11\n",
        )
        .map_err(|e| e.to_string())?;
        let mut stdouts = Vec::new();
        for rep in ["a", "b"] {
            let d = dir.join(format!("det_{rep}"));
            let data = d.join("data.stgd");
            run_cli(&[
                "gen-data",
                "--config",
                s(&cfg),
                "--out",
                s(&data),
                "--csv",
                s(&d.join("data.csv")),
            ])?;
            run_cli(&[
                "train",
                "--config",
                s(&cfg),
                "--data",
                s(&data),
                "--out",
                s(&d.join("train")),
                "--steps",
                &steps,
            ])?;
            run_cli(&[
                "train",
                "--config",
                s(&cfg),
                "--data",
                s(&data),
                "--out",
                s(&d.join("off")),
                "--steps",
                &steps,
                "--stgc",
                "off",
            ])?;
            run_cli(&[
                "verify",
                "--config",
                s(&cfg),
                "--data",
                s(&data),
                "--out",
                s(&d.join("verify")),
                "--steps",
                &steps,
                "--per-layer",
            ])?;
            let ck = d.join("train").join("model.stgc");
            for which in ["hist", "proxy", "featgrad", "layers", "load"] {
                run_cli(&[
                    "analyze",
                    "--checkpoint",
                    s(&ck),
                    "--data",
                    s(&data),
                    "--which",
                    which,
                    "--out",
                    s(&d.join("analysis")),
                ])?;
            }
            let ev = run_cli(&[
                "eval",
                "--checkpoint",
                s(&ck),
                "--data",
                s(&data),
                "--capacity",
                "0.5",
                "--bpr",
            ])?;
            stdouts.push(ev.stdout);
            run_cli(&[
                "plot",
                "--series",
                "loss_total",
                "--series",
                "conflicting_ratio",
                "--out",
                s(&d.join("plot.svg")),
                s(&d.join("train").join("metrics.jsonl")),
                s(&d.join("off").join("metrics.jsonl")),
            ])?;
        }
        let (a, b) = (dir.join("det_a"), dir.join("det_b"));
        let files = [
            "data.stgd",
            "data.stgd.json",
            "data.csv",
            "train/metrics.jsonl",
            "train/model.stgc",
            "train/init.stgc",
            "off/metrics.jsonl",
            "off/model.stgc",
            "verify/metrics.jsonl",
            "verify/model.stgc",
            "analysis/hist.json",
            "analysis/hist.csv",
            "analysis/proxy.json",
            "analysis/featgrad.json",
            "analysis/layers.json",
            "analysis/load.json",
            "plot.svg",
        ];
        for f in files {
            same(&a.join(f), &b.join(f))?;
        }
        if stdouts[0] != stdouts[1] {
            return Err("eval output differs".into());
        }
        Ok(format!(
            "{compared} artifacts + eval output byte-identical across re-runs"
        ))
    })();
    Outcome {
        id: "11",
        name: "determinism",
        pass: result.is_ok(),
        detail: result.unwrap_or_else(|e| e),
    }
}

fn main() {
    // cargo passes harness flags such as --nocapture or a name filter
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    if let Some(f) = &filter {
        if !"acceptance".contains(f.as_str()) {
            return;
        }
    }
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut outcomes = Vec::new();
    let mut record = |o: Outcome| {
        report(&o);
        outcomes.push(o);
    };
    record(c1_gradients());
    record(c2_linearity());
    record(c3_equations());
    let (train, val) = default_data();
    record(c4_verify(&train));
    let runs = paired_runs(&train, &val);
    record(c5_load_balance(&runs));
    record(c6_task_benefit(&runs));
    record(c7_proxy());
    record(c8a_descent());
    record(c8b_bound_violation());
    record(c8_supplementary());
    record(c9_bpr(&runs, &val));
    record(c10_sweep(tmp.path()));
    record(c11_determinism(tmp.path()));

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    let unexpected: Vec<&str> = failed
        .iter()
        .copied()
        .filter(|id| !KNOWN_UNATTAINABLE.contains(id))
        .collect();
    println!(
        "acceptance: {} of {} checks passed; failing: [{}]; known unattainable: [{}]",
        outcomes.len() - failed.len(),
        outcomes.len(),
        failed.join(", "),
        KNOWN_UNATTAINABLE.join(", ")
    );
    if !unexpected.is_empty() {
        eprintln!("acceptance: unexpected failures: {}", unexpected.join(", "));
        std::process::exit(1);
    }
}
