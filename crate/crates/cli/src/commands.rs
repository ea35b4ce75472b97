use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use stgc::analysis::{
    consistency_from_records, feature_gradient_correlation, feature_gradient_groups, load_report,
    proxy_validation, similarity_histogram,
};
use stgc::conflict::identify_conflicting;
use stgc::losses::main_loss;
use stgc::model::{load_checkpoint, save_checkpoint, CelKind};
use stgc::routing::CapacityPolicy;
use stgc::synthdata::{generate, generate_with_layout, Dataset};
use stgc::train::{init_model, run_from, window_mean, ExperimentOutput};
use stgc::StgcError;

use crate::config::{parse_capacity, RunConfig};
use crate::{
    AnalyzeArgs, EvalArgs, GenDataArgs, RunArgs, Study, SweepArgs, Switch, TrainArgs, UsageError,
    VerifyArgs,
};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "model.stgc";
pub const INIT_CHECKPOINT_FILE: &str = "init.stgc";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const DONE_FILE: &str = "done.json";
pub const TIMING_FILE: &str = "timing.json";
pub const EVAL_FILE: &str = "eval.json";

pub const SWEEP_TAUS: [f64; 3] = [-0.1, 0.0, 0.1];
pub const SWEEP_BETAS: [f64; 3] = [0.5, 1.0, 2.0];

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn apply_overrides(cfg: &mut RunConfig, a: &RunArgs) -> Result<()> {
    if let Some(t) = a.tau {
        cfg.model.tau = t;
    }
    if let Some(v) = a.alpha {
        cfg.model.alpha = v;
    }
    if let Some(v) = a.beta {
        cfg.model.beta = v;
    }
    if let Some(k) = &a.cel_kind {
        cfg.model.cel_kind = CelKind::from_str(k)?;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.train.steps = s;
    }
    if a.timing {
        cfg.train.timing = true;
    }
    if a.cel_literal_sign {
        cfg.model.cel_literal_sign = true;
    }
    cfg.validate().map_err(UsageError)?;
    Ok(())
}

/// Loads `data` or generates the configured dataset, then splits off the
/// validation tail.
fn load_split(cfg: &RunConfig, data: Option<&Path>) -> Result<(Dataset, Dataset)> {
    let ds = match data {
        Some(p) => Dataset::load(p)?,
        None => generate(&cfg.synth)?,
    };
    Ok(ds.split(cfg.val_fraction))
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    started_unix: u64,
    dataset: String,
    config: &'a RunConfig,
    config_text: String,
    outputs: serde_json::Value,
}

fn run_training(cfg: &RunConfig, args: &RunArgs, command: &str) -> Result<()> {
    let (train, val) = load_split(cfg, args.data.as_deref())?;
    let out = &args.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let paths = |f: &str| out.join(f);
    let manifest = RunManifest {
        tool: "stgc",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.train.seed,
        started_unix: unix_now(),
        dataset: args
            .data
            .as_deref()
            .map_or_else(|| "generated from config".to_string(), display_path),
        config: cfg,
        config_text: cfg.to_text(),
        outputs: json!({
            "metrics": display_path(&paths(METRICS_FILE)),
            "checkpoint": display_path(&paths(CHECKPOINT_FILE)),
            "init_checkpoint": display_path(&paths(INIT_CHECKPOINT_FILE)),
            "timing": display_path(&paths(TIMING_FILE)),
            "eval": display_path(&paths(EVAL_FILE)),
            "done": display_path(&paths(DONE_FILE)),
        }),
    };
    write_json(&paths(MANIFEST_FILE), &manifest)?;

    let model = init_model(&cfg.model, cfg.train.seed)?;
    save_checkpoint(&model, &paths(INIT_CHECKPOINT_FILE))?;

    let metrics_path = paths(METRICS_FILE);
    let file = File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut w = BufWriter::new(file);
    let val_ref = (!val.is_empty()).then_some(&val);
    let result: ExperimentOutput = run_from(model, &cfg.train, &train, val_ref, &mut |snap| {
        writeln!(w, "{}", snap.to_json_line()).map_err(|e| StgcError::io(&metrics_path, e))
    })?;
    w.flush()
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    drop(w);

    save_checkpoint(&result.model, &paths(CHECKPOINT_FILE))?;
    write_json(&paths(TIMING_FILE), &result.timing)?;
    if let Some(ev) = &result.final_eval {
        write_json(&paths(EVAL_FILE), ev)?;
    }
    let last = result.snapshots.last();
    let summary = json!({
        "command": command,
        "steps": result.snapshots.len(),
        "finished_unix": unix_now(),
        "final_loss_total": last.map(|s| s.loss.total),
        "final_conflicting_ratio": last.map(|s| s.conflicting_ratio),
        "final_val_acc": result.final_eval.as_ref().map(|e| e.accuracy),
    });
    write_json(&paths(DONE_FILE), &summary)?;
    emit!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.run.config.as_deref())?;
    if let Some(s) = a.stgc {
        cfg.train.stgc_enabled = s == Switch::On;
    }
    apply_overrides(&mut cfg, &a.run)?;
    run_training(&cfg, &a.run, "train")
}

pub fn verify(a: &VerifyArgs) -> Result<()> {
    let mut cfg = load_config(a.run.config.as_deref())?;
    cfg.train.stgc_enabled = true;
    cfg.train.verify_mode = true;
    if a.per_layer {
        cfg.train.per_layer_consistency = true;
    }
    apply_overrides(&mut cfg, &a.run)?;
    run_training(&cfg, &a.run, "verify")
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.synth.seed = s;
    }
    let (ds, layout) = generate_with_layout(&cfg.synth)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    ds.save(&a.out)?;
    let counts = ds.class_counts();
    let expected = ds.len() as f64 / ds.num_classes as f64;
    let max_dev = counts
        .iter()
        .map(|&c| (c as f64 - expected).abs() / expected)
        .fold(0.0, f64::max);
    let pairs: Vec<_> = cfg
        .synth
        .confusion_pairs
        .iter()
        .map(|&(x, y)| {
            json!({
                "tasks": [x, y],
                "center_group": layout.center_group[x],
                "label_maps": [layout.label_maps[x].clone(), layout.label_maps[y].clone()],
            })
        })
        .collect();
    let sidecar = json!({
        "format": "STGD",
        "version": 1,
        "header": {
            "samples": ds.len(),
            "input_dim": ds.input_dim,
            "num_classes": ds.num_classes,
            "num_tasks": ds.num_tasks,
        },
        "spec": cfg.synth,
        "class_counts": counts,
        "class_balance_max_rel_deviation": max_dev,
        "confusion_pairs": pairs,
        "center_group": layout.center_group,
        "label_maps": layout.label_maps,
    });
    let sidecar_path = sidecar_path(&a.out);
    write_json(&sidecar_path, &sidecar)?;
    if let Some(csv) = &a.csv {
        let f = File::create(csv).with_context(|| format!("creating {}", csv.display()))?;
        let mut w = BufWriter::new(f);
        ds.write_csv(&mut w)
            .and_then(|_| w.flush())
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    emit!(
        "wrote {} samples to {} (summary {})",
        ds.len(),
        a.out.display(),
        sidecar_path.display()
    );
    Ok(())
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn analyze(a: &AnalyzeArgs) -> Result<()> {
    if a.batch < 2 {
        return Err(UsageError("--batch must be >= 2".into()).into());
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    if ds.input_dim != model.config.input_dim || ds.num_classes > model.config.num_classes {
        return Err(UsageError(format!(
            "dataset (dim {}, {} classes) does not fit the checkpoint (dim {}, {} classes)",
            ds.input_dim, ds.num_classes, model.config.input_dim, model.config.num_classes
        ))
        .into());
    }
    let idx: Vec<usize> = (0..a.batch.min(ds.len())).collect();
    let x = ds.features(&idx);
    let labels = ds.labels(&idx);
    let trace = model.forward(&x, None)?;
    let (_, logits_grad) = main_loss(&trace.logits, &labels)?;
    let c = &model.config;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let records = model.capture_token_bias_grads(&trace, &logits_grad)?;
    let report = identify_conflicting(&records, c.tau, c.num_layers)?;
    let (name, summary) = match a.which {
        Study::Hist => {
            let hist = similarity_histogram(&report.similarities())?;
            let csv = a.out.join("hist.csv");
            fs::write(&csv, hist.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
            let body = json!({
                "tokens": idx.len(),
                "num_records": report.num_records,
                "conflicting_ratio": report.conflicting_ratio,
                "mass_below_zero": hist.mass_below(0.0),
                "histogram": hist,
            });
            ("hist", body)
        }
        Study::Proxy => {
            let p = proxy_validation(&model, &trace, &logits_grad, a.seed)?;
            ("proxy", serde_json::to_value(p)?)
        }
        Study::Featgrad => {
            let groups = feature_gradient_groups(&trace, &records);
            let r = feature_gradient_correlation(&groups)?;
            ("featgrad", serde_json::to_value(r)?)
        }
        Study::Layers => {
            let stats = consistency_from_records(&records, false)?;
            let l = c.num_layers;
            let quarters: Vec<usize> = [l / 4, l / 2, (3 * l) / 4]
                .iter()
                .map(|&i| i.min(l - 1))
                .collect();
            let body = json!({
                "num_layers": l,
                "per_layer_conflicting_ratio": report.per_layer_conflicting_ratio,
                "per_layer_consistency": stats.per_layer(l),
                "quarter_layers": quarters,
                "grad_consistency": stats.mean,
                "grad_consistency_std": stats.std,
            });
            ("layers", body)
        }
        Study::Load => {
            let layers = load_report(&trace, c.num_experts)?;
            ("load", json!({ "tokens": idx.len(), "layers": layers }))
        }
    };
    let path = a.out.join(format!("{name}.json"));
    write_json(&path, &summary)?;
    emit!("wrote {}", path.display());
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Result<()> {
    if !(0.0..1.0).contains(&a.val_fraction) {
        return Err(UsageError(format!(
            "--val-fraction must be in [0, 1), got {}",
            a.val_fraction
        ))
        .into());
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.data)?;
    let ds = if a.val_fraction > 0.0 {
        ds.split(a.val_fraction).1
    } else {
        ds
    };
    let policy = match &a.capacity {
        None => model.config.capacity_factor,
        Some(s) => parse_capacity(s).map_err(|m| UsageError(format!("--capacity: {m}")))?,
    }
    .map(|cf| CapacityPolicy::new(cf, a.bpr || model.config.bpr))
    .transpose()
    .map_err(|e| UsageError(e.to_string()))?;
    let report = stgc::train::evaluate(&model, &ds, a.batch, policy.as_ref())?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    emit!("{text}");
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub name: String,
    pub stgc: bool,
    pub tau: f64,
    pub beta: f64,
    pub final_val_acc: Option<f64>,
    pub final_aux: Option<f64>,
    pub final_conflicting_ratio: Option<f64>,
    pub final_consistency: Option<f64>,
    pub final_loss_main: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn sweep(a: &SweepArgs) -> Result<()> {
    let mut base = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        base.train.seed = s;
    }
    if let Some(s) = a.steps {
        base.train.steps = s;
    }
    base.validate().map_err(UsageError)?;
    let (train, val) = load_split(&base, a.data.as_deref())?;
    let runs_dir = a.out.join("runs");
    fs::create_dir_all(&runs_dir).with_context(|| format!("creating {}", runs_dir.display()))?;

    let mut grid = vec![(
        "baseline".to_string(),
        false,
        base.model.tau,
        base.model.beta,
    )];
    for &tau in &SWEEP_TAUS {
        for &beta in &SWEEP_BETAS {
            grid.push((format!("tau{tau}_beta{beta}"), true, tau, beta));
        }
    }
    let steps = base.train.steps;
    let window = (steps / 20).max(1);
    let mut rows = Vec::with_capacity(grid.len());
    for (name, stgc_on, tau, beta) in grid {
        let mut cfg = base.clone();
        cfg.train.stgc_enabled = stgc_on;
        cfg.model.tau = tau;
        cfg.model.beta = beta;
        let path = runs_dir.join(format!("{name}.jsonl"));
        let mut w = BufWriter::new(
            File::create(&path).with_context(|| format!("creating {}", path.display()))?,
        );
        let model = init_model(&cfg.model, cfg.train.seed)?;
        let val_ref = (!val.is_empty()).then_some(&val);
        let out = run_from(model, &cfg.train, &train, val_ref, &mut |snap| {
            writeln!(w, "{}", snap.to_json_line()).map_err(|e| StgcError::io(&path, e))
        })?;
        w.flush()?;
        let col =
            |f: &dyn Fn(&stgc::analysis::MetricsSnapshot) -> Option<f64>| -> Vec<Option<f64>> {
                out.snapshots.iter().map(f).collect()
            };
        let lo = steps.saturating_sub(window);
        rows.push(SweepRow {
            name,
            stgc: stgc_on,
            tau,
            beta,
            final_val_acc: out.final_eval.as_ref().map(|e| e.accuracy),
            final_aux: window_mean(&col(&|s| Some(s.loss.aux)), lo, steps),
            final_conflicting_ratio: window_mean(&col(&|s| Some(s.conflicting_ratio)), lo, steps),
            final_consistency: window_mean(&col(&|s| s.grad_consistency), lo, steps),
            final_loss_main: window_mean(&col(&|s| Some(s.loss.main)), lo, steps),
        });
        eprintln!(
            "sweep: {} done",
            rows.last().map_or("", |r| r.name.as_str())
        );
    }

    write_json(
        &a.out.join("sweep.json"),
        &json!({
            "schema": 1,
            "steps": steps,
            "seed": base.train.seed,
            "window": window,
            "taus": SWEEP_TAUS,
            "betas": SWEEP_BETAS,
            "runs": rows,
        }),
    )?;
    let mut csv = String::from("name,stgc,tau,beta,final_val_acc,final_aux,final_conflicting_ratio,final_consistency,final_loss_main\n");
    let mut md = String::from(
        "| run | stgc | tau | beta | val acc | aux | conflicting ratio | consistency | main loss |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    let csv_opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.name,
            r.stgc,
            r.tau,
            r.beta,
            csv_opt(r.final_val_acc),
            csv_opt(r.final_aux),
            csv_opt(r.final_conflicting_ratio),
            csv_opt(r.final_consistency),
            csv_opt(r.final_loss_main),
        ));
        md.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} | {} |\n",
            r.name,
            if r.stgc { "on" } else { "off" },
            r.tau,
            r.beta,
            fmt_opt(r.final_val_acc),
            fmt_opt(r.final_aux),
            fmt_opt(r.final_conflicting_ratio),
            fmt_opt(r.final_consistency),
            fmt_opt(r.final_loss_main),
        ));
    }
    fs::write(a.out.join("sweep.csv"), csv).context("writing sweep.csv")?;
    fs::write(a.out.join("sweep.md"), &md).context("writing sweep.md")?;
    emit!("{}", md.trim_end());
    Ok(())
}
