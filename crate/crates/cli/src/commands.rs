//! Subcommand implementations. Each writes its outputs plus a run manifest
//! into `--out`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use geoward::damage::{
    adversarial_perturbation, node_groups, parse_plan_shorthand, random_ball_perturbation, worst_sign_attack,
    DamagePlan, Perturbation,
};
use geoward::dataset::Dataset;
use geoward::geodesic::{
    default_beta_sweep, reconfigure, recover, MetricSystem, QpSolver, RecoveryConfig, RecoveryData, RecoveryResult,
};
use geoward::metric::{assemble_metric, gaussian_expectation, quadratic_form_matfree};
use geoward::network::{apply_mask, forward, load_checkpoint, save_checkpoint, Activation, OutputMode};
use geoward::paths::{
    naive_linear_path, path_integral, steepest_decline_window, stepwise_deletion_path, trace_path, uniform_times,
    PathKind, PathMeasure, PathTrace, TraceOptions,
};
use geoward::training::{evaluate, train, Loss, TrainConfig};
use geoward::{Error, FlatWeights, NetworkSpec, Result};

use crate::data::{self, metric_batch};
use crate::manifest::{Recorder, RunManifest};

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = fs::File::create(path)?;
    serde_json::to_writer_pretty(f, value)?;
    Ok(())
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn load_data(spec: &str, rec: &mut Recorder) -> Result<Dataset> {
    let loaded = data::load(spec)?;
    for f in loaded.files {
        rec.input(f);
    }
    Ok(loaded.dataset)
}

fn load_net(path: &Path, rec: &mut Recorder) -> Result<(NetworkSpec, FlatWeights)> {
    let (spec, w, manifest) = load_checkpoint(path)?;
    rec.input(path);
    rec.input(path.parent().unwrap_or(Path::new(".")).join(&manifest.blob));
    Ok((spec, w))
}

/// A JSON plan file if `text` names an existing file, otherwise the
/// `layer:nodes` shorthand. `""` and `none` mean no damage.
fn load_plan(spec: &NetworkSpec, text: &str, role: &str, rec: &mut Recorder) -> Result<DamagePlan> {
    let trimmed = text.trim();
    let plan = if trimmed.is_empty() || trimmed == "none" {
        DamagePlan::empty()
    } else if Path::new(trimmed).is_file() {
        rec.input(trimmed);
        DamagePlan::from_json(&fs::read_to_string(trimmed)?)?
    } else {
        parse_plan_shorthand(spec, trimmed)?
    };
    plan.validate(spec.n_weights())?;
    rec.plan(role, &plan);
    Ok(plan)
}

fn check_fits(spec: &NetworkSpec, d: &Dataset) -> Result<()> {
    if spec.input_dim() != d.dim() || spec.output_dim() < d.classes() {
        return Err(invalid(format!(
            "network {} does not fit dataset '{}' (dim {}, {} classes)",
            spec.arch_string(),
            d.name(),
            d.dim(),
            d.classes()
        )));
    }
    Ok(())
}

fn write_points(dir: &Path, spec: &NetworkSpec, trace: &PathTrace, every: usize, fp: &str) -> Result<Vec<String>> {
    let sub = dir.join("points");
    fs::create_dir_all(&sub)?;
    let mut names = Vec::new();
    let last = trace.len() - 1;
    for (k, s) in trace.samples.iter().enumerate() {
        if k % every == 0 || k == last {
            let name = format!("points/point_{k:04}.json");
            save_checkpoint(&dir.join(&name), spec, &s.w, fp)?;
            names.push(name);
        }
    }
    Ok(names)
}

// ---------------------------------------------------------------- train

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training data (synth:..., idx:..., csv:...)
    #[arg(long)]
    pub data: String,
    /// Layer sizes, e.g. 2-16-3
    #[arg(long)]
    pub arch: String,
    #[arg(long, default_value = "tanh", value_parser = ["tanh", "relu", "identity"])]
    pub activation: String,
    #[arg(long, default_value = "softmax", value_parser = ["softmax", "identity"])]
    pub output: String,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// cross_entropy or mse; defaults to the natural loss for --output
    #[arg(long)]
    pub loss: Option<String>,
    /// Held-out data evaluated after training
    #[arg(long)]
    pub eval_data: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn train_cmd(a: &TrainArgs, rec: &mut Recorder) -> Result<()> {
    let activation: Activation = a.activation.parse()?;
    let output: OutputMode = a.output.parse()?;
    let spec = NetworkSpec::parse_arch(&a.arch, activation, output)?;
    let d = load_data(&a.data, rec)?;
    check_fits(&spec, &d)?;
    let loss = match &a.loss {
        Some(l) => l.parse()?,
        None => Loss::default_for(&spec),
    };
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        loss,
    };
    rec.seed("train", a.seed);
    prepare_out(&a.out)?;
    let (w, log) = train(&spec, &d, &cfg)?;
    let fp = d.fingerprint();
    save_checkpoint(&a.out.join("checkpoint.json"), &spec, &w, &fp)?;
    log.write_csv(&a.out.join("train_log.csv"))?;
    let eval = match &a.eval_data {
        Some(s) => {
            let e = load_data(s, rec)?;
            check_fits(&spec, &e)?;
            Some(evaluate(&spec, &w, &e)?)
        }
        None => None,
    };
    let last = log.records.last();
    write_json(
        &a.out.join("train_summary.json"),
        &json!({
            "arch": spec.arch_string(),
            "n_weights": spec.n_weights(),
            "epochs": a.epochs,
            "final_loss": last.map(|r| r.loss),
            "final_accuracy": last.map(|r| r.accuracy),
            "eval_accuracy": eval.map(|e| e.accuracy),
            "eval_loss": eval.map(|e| e.loss),
            "dataset": d.name(),
            "dataset_fingerprint": fp,
        }),
    )?;
    for f in [
        "checkpoint.json",
        "checkpoint.bin",
        "train_log.csv",
        "train_summary.json",
    ] {
        rec.output(f);
    }
    Ok(())
}

// ---------------------------------------------------------------- spectrum

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Examples the metric is averaged over
    #[arg(long)]
    pub data: String,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub batch_seed: u64,
    #[arg(long, default_value_t = geoward::metric::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Also report the Gaussian-perturbation expectation at this sigma
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Write the metric itself (row-major upper triangle, little-endian f64)
    #[arg(long)]
    pub write_metric: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn spectrum_cmd(a: &SpectrumArgs, rec: &mut Recorder) -> Result<()> {
    let (spec, w) = load_net(&a.checkpoint, rec)?;
    let d = load_data(&a.data, rec)?;
    check_fits(&spec, &d)?;
    let batch = metric_batch(&d, a.batch_size, a.batch_seed)?;
    rec.seed("batch", a.batch_seed);
    prepare_out(&a.out)?;
    let g = assemble_metric(&spec, &w, &batch)?;
    let s = g.spectrum(a.threshold)?;
    s.write_csv(&a.out.join("spectrum.csv"))?;
    rec.output("spectrum.csv");
    let gauss = a
        .sigma
        .map(|sigma| gaussian_expectation(&g, sigma).map(|e| (sigma, e)))
        .transpose()?;
    write_json(
        &a.out.join("spectrum_summary.json"),
        &json!({
            "n": g.dim(),
            "batch_size": batch.len(),
            "batch_ids": g.batch_ids(),
            "threshold": a.threshold,
            "rho": s.rho(),
            "vulnerable_count": s.vulnerable_count(),
            "resilient_count": s.resilient_count(),
            "lambda_max": s.lambda_max(),
            "lambda_min": s.eigenvalues().last(),
            "trace": g.matrix().trace(),
            "rho_lambda": s.rho_lambda(),
            "gaussian_sigma": gauss.map(|g| g.0),
            "gaussian_expectation": gauss.map(|g| g.1),
        }),
    )?;
    rec.output("spectrum_summary.json");
    if a.write_metric {
        g.write_blob(&a.out.join("metric.bin"))?;
        rec.output("metric.bin");
    }
    Ok(())
}

// ---------------------------------------------------------------- perturb

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct PerturbArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation data
    #[arg(long)]
    pub data: String,
    /// Data the metric and functional distance are averaged over (default: --data)
    #[arg(long)]
    pub metric_data: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub batch_seed: u64,
    #[arg(long, default_value = "both", value_parser = ["random", "adversarial", "both"])]
    pub mode: String,
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    /// Number of random draws
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leading eigenvectors combined into the adversarial direction
    #[arg(long, default_value_t = 1)]
    pub top_k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

/// `mean_x ‖f(x, w + du) − f(x, w)‖²`
fn functional_distance(spec: &NetworkSpec, w: &FlatWeights, du: &[f64], batch: &Dataset) -> Result<f64> {
    let moved = w.offset(1.0, du);
    let mut total = 0.0;
    for x in batch.inputs() {
        let a = forward(spec, w, x)?;
        let b = forward(spec, &moved, x)?;
        total += a.iter().zip(&b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

pub fn perturb_cmd(a: &PerturbArgs, rec: &mut Recorder) -> Result<()> {
    use std::io::Write;
    if !(a.sigma >= 0.0) || !a.sigma.is_finite() {
        return Err(invalid(format!("sigma must be finite and >= 0, got {}", a.sigma)));
    }
    let (spec, w) = load_net(&a.checkpoint, rec)?;
    let eval = load_data(&a.data, rec)?;
    check_fits(&spec, &eval)?;
    let metric_src = match &a.metric_data {
        Some(s) => load_data(s, rec)?,
        None => eval.clone(),
    };
    let batch = metric_batch(&metric_src, a.batch_size, a.batch_seed)?;
    rec.seed("batch", a.batch_seed);
    rec.seed("perturb", a.seed);
    prepare_out(&a.out)?;
    let base = evaluate(&spec, &w, &eval)?;

    let mut rows: Vec<(usize, &str, f64, Perturbation, f64, f64)> = Vec::new();
    let mut adversarial = None;
    if a.mode != "random" {
        let g = assemble_metric(&spec, &w, &batch)?;
        let s = g.spectrum(geoward::metric::DEFAULT_THRESHOLD)?;
        let p = if a.sigma == 0.0 {
            Perturbation::custom(vec![0.0; spec.n_weights()])
        } else {
            adversarial_perturbation(&s, a.sigma, a.top_k)?
        };
        let att = worst_sign_attack(&spec, &w, &p, &eval)?;
        adversarial = Some((att.accuracy, att.loss, att.sign));
        rows.push((0, "adversarial", att.sign, att.perturbation, att.accuracy, att.loss));
    }
    if a.mode != "adversarial" {
        for t in 0..a.trials {
            let p = random_ball_perturbation(spec.n_weights(), a.sigma, a.seed.wrapping_add(t as u64))?;
            let ev = evaluate(&spec, &w.offset(1.0, &p.du), &eval)?;
            rows.push((t, "random", 1.0, p, ev.accuracy, ev.loss));
        }
    }

    let mut out = std::io::BufWriter::new(fs::File::create(a.out.join("perturbations.csv"))?);
    writeln!(
        out,
        "trial,kind,sign,norm,functional_distance,metric_distance,accuracy,loss"
    )?;
    let mut random_acc = Vec::new();
    let mut random_fd: Vec<f64> = Vec::new();
    let mut adv_fd = None;
    for (t, kind, sign, p, acc, loss) in &rows {
        let fd = functional_distance(&spec, &w, &p.du, &batch)?;
        let md = quadratic_form_matfree(&spec, &w, &batch, &p.du)?;
        writeln!(out, "{t},{kind},{sign:?},{:?},{fd:?},{md:?},{acc:?},{loss:?}", p.norm)?;
        if *kind == "random" {
            random_acc.push(*acc);
            random_fd.push(fd);
        } else {
            adv_fd = Some(fd);
        }
    }
    out.flush()?;
    rec.output("perturbations.csv");
    let random = (!random_acc.is_empty()).then(|| {
        json!({
            "trials": random_acc.len(),
            "min_accuracy": random_acc.iter().cloned().fold(f64::INFINITY, f64::min),
            "mean_accuracy": random_acc.iter().sum::<f64>() / random_acc.len() as f64,
            "max_functional_distance": random_fd.iter().cloned().fold(0.0, f64::max),
        })
    });
    write_json(
        &a.out.join("perturb_summary.json"),
        &json!({
            "sigma": a.sigma,
            "base_accuracy": base.accuracy,
            "base_loss": base.loss,
            "batch_ids": batch.ids(),
            "adversarial": adversarial.map(|(acc, loss, sign)| json!({
                "accuracy": acc,
                "loss": loss,
                "sign": sign,
                "top_k": a.top_k,
                "functional_distance": adv_fd,
            })),
            "random": random,
        }),
    )?;
    rec.output("perturb_summary.json");
    Ok(())
}

// ---------------------------------------------------------------- damage-path

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct DamagePathArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Evaluation data
    #[arg(long)]
    pub data: String,
    /// Data the metric is averaged over (default: --data)
    #[arg(long)]
    pub metric_data: Option<String>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub batch_seed: u64,
    /// JSON plan file or layer:nodes shorthand, e.g. 1:0-7
    #[arg(long)]
    pub plan: String,
    /// Number of path samples (linear mode)
    #[arg(long, default_value_t = 41)]
    pub steps: usize,
    #[arg(long, default_value = "linear", value_parser = ["linear", "stepwise"])]
    pub mode: String,
    /// Also report the square-root (length) integral
    #[arg(long)]
    pub length: bool,
    /// Fixed finite-difference step for the acceleration
    #[arg(long)]
    pub accel_step: Option<f64>,
    /// Write every k-th path point as a checkpoint
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn damage_path_cmd(a: &DamagePathArgs, rec: &mut Recorder) -> Result<()> {
    let (spec, w) = load_net(&a.checkpoint, rec)?;
    let eval = load_data(&a.data, rec)?;
    check_fits(&spec, &eval)?;
    let metric_src = match &a.metric_data {
        Some(s) => load_data(s, rec)?,
        None => eval.clone(),
    };
    let batch = metric_batch(&metric_src, a.batch_size, a.batch_seed)?;
    rec.seed("batch", a.batch_seed);
    let plan = load_plan(&spec, &a.plan, "damage", rec)?;
    if plan.is_empty() {
        return Err(invalid("damage path needs a non-empty plan"));
    }
    prepare_out(&a.out)?;
    let (points, kind) = if a.mode == "linear" {
        (naive_linear_path(&w, &plan, a.steps)?, PathKind::NaiveLinear)
    } else {
        (
            stepwise_deletion_path(&w, &node_groups(&spec, &plan)?)?,
            PathKind::StepwiseDeletion,
        )
    };
    let times = uniform_times(points.len());
    let opts = TraceOptions {
        accel_step: a.accel_step,
    };
    let trace = trace_path(&spec, &batch, &eval, &points, &times, kind, &opts)?;
    trace.write_csv(&a.out.join("path.csv"))?;
    rec.output("path.csv");
    let energy = path_integral(&spec, &batch, &points, &times, PathMeasure::Energy)?;
    let length = if a.length {
        Some(path_integral(&spec, &batch, &points, &times, PathMeasure::Length)?)
    } else {
        None
    };
    let masked = evaluate(&spec, &apply_mask(&w, &plan)?, &eval)?;
    let (peak, peak_t) = trace.peak_acceleration();
    let window = steepest_decline_window(&trace, 0.25);
    write_json(
        &a.out.join("path.json"),
        &json!({
            "kind": kind.name(),
            "plan": {"description": plan.description(), "indices": plan.indices()},
            "samples": trace.len(),
            "batch_seed": a.batch_seed,
            "batch_ids": batch.ids(),
            "energy": energy,
            "length": length,
            "initial_accuracy": trace.samples[0].accuracy,
            "final_accuracy": trace.final_accuracy(),
            "masked_accuracy": masked.accuracy,
            "mean_accuracy": trace.mean_accuracy(),
            "peak_acceleration": peak,
            "peak_acceleration_t": peak_t,
            "decline_window": window.map(|(x, y)| vec![x, y]),
        }),
    )?;
    rec.output("path.json");
    if let Some(k) = a.checkpoint_every {
        if k == 0 {
            return Err(invalid("--checkpoint-every must be at least 1"));
        }
        for n in write_points(&a.out, &spec, &trace, k, &eval.fingerprint())? {
            rec.output(n);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- recover

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Data the per-step metric batches are drawn from
    #[arg(long)]
    pub data: String,
    /// Evaluation data (default: --data)
    #[arg(long)]
    pub eval_data: Option<String>,
    /// Fixed trade-off weight
    #[arg(long, conflicts_with = "beta_sweep")]
    pub beta: Option<f64>,
    /// Comma-separated β values; without values, {0.1,1,10}·2·√cap·λ₁
    #[arg(long, num_args = 0.., value_delimiter = ',')]
    pub beta_sweep: Option<Vec<f64>>,
    /// Bound on θᵀθ per step
    #[arg(long, default_value_t = geoward::geodesic::DEFAULT_STEP_NORM_SQ_CAP)]
    pub cap: f64,
    #[arg(long, default_value_t = geoward::geodesic::DEFAULT_HYPERPLANE_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 64)]
    pub metric_batch: usize,
    #[arg(long, default_value = "auto", value_parser = ["auto", "dense", "gram"])]
    pub solver: String,
    /// Keep the full step radius even close to the hyperplane
    #[arg(long)]
    pub fixed_radius: bool,
    /// Also trace the straight-line deletion path for comparison
    #[arg(long)]
    pub with_naive: bool,
    #[arg(long, default_value_t = 41)]
    pub naive_steps: usize,
    /// Write every k-th network along the recovery path as a checkpoint
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct RecoverArgs {
    /// JSON plan file or layer:nodes shorthand
    #[arg(long)]
    pub plan: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: RecoveryArgs,
}

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ReconfigureArgs {
    /// Plan the checkpoint currently satisfies
    #[arg(long)]
    pub old_plan: String,
    /// Plan to move to
    #[arg(long)]
    pub new_plan: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub common: RecoveryArgs,
}

fn recovery_config(
    a: &RecoveryArgs,
    spec: &NetworkSpec,
    w: &FlatWeights,
    data: &RecoveryData<'_>,
) -> Result<RecoveryConfig> {
    let solver = match a.solver.as_str() {
        "dense" => QpSolver::Dense,
        "gram" => QpSolver::Gram,
        _ => QpSolver::Auto,
    };
    let mut cfg = RecoveryConfig {
        beta: a.beta.unwrap_or(1.0),
        step_norm_sq_cap: a.cap,
        hyperplane_tol: a.tol,
        max_steps: a.max_steps,
        metric_batch: a.metric_batch,
        beta_sweep: None,
        adaptive_radius: !a.fixed_radius,
        solver,
    };
    cfg.validate()?;
    let sweep = match (&a.beta, &a.beta_sweep) {
        (Some(_), _) => None,
        (None, Some(v)) if !v.is_empty() => Some(v.clone()),
        (None, _) => {
            let batch = data.batch(0, a.metric_batch)?;
            let lambda = MetricSystem::build(spec, w, &batch, solver)?.lambda_max();
            Some(default_beta_sweep(lambda, a.cap))
        }
    };
    cfg.beta_sweep = sweep;
    cfg.validate()?;
    Ok(cfg)
}

fn finish_recovery(
    a: &RecoveryArgs,
    spec: &NetworkSpec,
    start: &FlatWeights,
    plan: &DamagePlan,
    data: &RecoveryData<'_>,
    cfg: &RecoveryConfig,
    result: Result<RecoveryResult>,
    kind: &str,
    rec: &mut Recorder,
) -> Result<()> {
    let r = match result {
        Ok(r) => r,
        Err(Error::NonConvergence { steps, reason, partial }) => {
            if let Some(p) = &partial {
                p.write_csv(&a.out.join("recovery_partial.csv"))?;
                rec.output("recovery_partial.csv");
            }
            return Err(Error::NonConvergence { steps, reason, partial });
        }
        Err(e) => return Err(e),
    };
    r.trace.write_csv(&a.out.join("recovery.csv"))?;
    rec.output("recovery.csv");
    let fp = data.eval.fingerprint();
    save_checkpoint(&a.out.join("recovered.json"), spec, &r.trace.final_sample().w, &fp)?;
    rec.output("recovered.json");
    rec.output("recovered.bin");

    let naive = if a.with_naive && !plan.is_empty() {
        let points = naive_linear_path(start, plan, a.naive_steps)?;
        let times = uniform_times(points.len());
        let tb = data.trace_batch(cfg.metric_batch)?;
        let t = trace_path(
            spec,
            &tb,
            data.eval,
            &points,
            &times,
            PathKind::NaiveLinear,
            &TraceOptions::default(),
        )?;
        t.write_csv(&a.out.join("naive.csv"))?;
        rec.output("naive.csv");
        let energy = path_integral(spec, &tb, &points, &times, PathMeasure::Energy)?;
        Some(json!({
            "final_accuracy": t.final_accuracy(),
            "mean_accuracy": t.mean_accuracy(),
            "peak_acceleration": t.peak_acceleration().0,
            "total_energy": energy,
            "samples": t.len(),
        }))
    } else {
        None
    };
    let mut summary = serde_json::to_value(r.summary())?;
    let obj = summary.as_object_mut().expect("summary is an object");
    obj.insert("kind".into(), json!(kind));
    obj.insert(
        "plan".into(),
        json!({"description": plan.description(), "indices": plan.indices()}),
    );
    obj.insert("step_norm_sq_cap".into(), json!(cfg.step_norm_sq_cap));
    obj.insert("hyperplane_tol".into(), json!(cfg.hyperplane_tol));
    obj.insert("metric_batch".into(), json!(cfg.metric_batch));
    obj.insert("naive".into(), naive.unwrap_or(serde_json::Value::Null));
    write_json(&a.out.join("recovery.json"), &summary)?;
    rec.output("recovery.json");
    if let Some(k) = a.checkpoint_every {
        if k == 0 {
            return Err(invalid("--checkpoint-every must be at least 1"));
        }
        for n in write_points(&a.out, spec, &r.trace, k, &fp)? {
            rec.output(n);
        }
    }
    Ok(())
}

pub fn recover_cmd(args: &RecoverArgs, rec: &mut Recorder) -> Result<()> {
    let a = &args.common;
    let (spec, w) = load_net(&a.checkpoint, rec)?;
    let train_d = load_data(&a.data, rec)?;
    check_fits(&spec, &train_d)?;
    let eval = match &a.eval_data {
        Some(s) => load_data(s, rec)?,
        None => train_d.clone(),
    };
    let plan = load_plan(&spec, &args.plan, "damage", rec)?;
    prepare_out(&a.out)?;
    let data = RecoveryData {
        train: &train_d,
        eval: &eval,
    };
    let cfg = recovery_config(a, &spec, &w, &data)?;
    let result = recover(&spec, &w, &plan, &data, &cfg);
    finish_recovery(a, &spec, &w, &plan, &data, &cfg, result, "recover", rec)
}

pub fn reconfigure_cmd(args: &ReconfigureArgs, rec: &mut Recorder) -> Result<()> {
    let a = &args.common;
    let (spec, w) = load_net(&a.checkpoint, rec)?;
    let train_d = load_data(&a.data, rec)?;
    check_fits(&spec, &train_d)?;
    let eval = match &a.eval_data {
        Some(s) => load_data(s, rec)?,
        None => train_d.clone(),
    };
    let old_plan = load_plan(&spec, &args.old_plan, "old", rec)?;
    let new_plan = load_plan(&spec, &args.new_plan, "new", rec)?;
    prepare_out(&a.out)?;
    let data = RecoveryData {
        train: &train_d,
        eval: &eval,
    };
    let start = apply_mask(&w, &old_plan)?;
    let cfg = recovery_config(a, &spec, &start, &data)?;
    let result = reconfigure(&spec, &w, &old_plan, &new_plan, &data, &cfg);
    finish_recovery(a, &spec, &start, &new_plan, &data, &cfg, result, "reconfigure", rec)
}

// ---------------------------------------------------------------- export-data

#[derive(Args, Debug, Clone, Serialize, Deserialize)]
pub struct ExportArgs {
    #[arg(long)]
    pub data: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_cmd(a: &ExportArgs, rec: &mut Recorder) -> Result<()> {
    let d = load_data(&a.data, rec)?;
    prepare_out(&a.out)?;
    d.write_csv(&a.out.join("data.csv"))?;
    rec.output("data.csv");
    Ok(())
}

// ---------------------------------------------------------------- dispatch

#[derive(Debug, Clone)]
pub enum Invocation {
    Train(TrainArgs),
    Spectrum(SpectrumArgs),
    Perturb(PerturbArgs),
    DamagePath(DamagePathArgs),
    Recover(RecoverArgs),
    Reconfigure(ReconfigureArgs),
    ExportData(ExportArgs),
}

impl Invocation {
    pub fn name(&self) -> &'static str {
        match self {
            Invocation::Train(_) => "train",
            Invocation::Spectrum(_) => "spectrum",
            Invocation::Perturb(_) => "perturb",
            Invocation::DamagePath(_) => "damage-path",
            Invocation::Recover(_) => "recover",
            Invocation::Reconfigure(_) => "reconfigure",
            Invocation::ExportData(_) => "export-data",
        }
    }

    fn args_json(&self) -> Result<serde_json::Value> {
        Ok(match self {
            Invocation::Train(a) => serde_json::to_value(a)?,
            Invocation::Spectrum(a) => serde_json::to_value(a)?,
            Invocation::Perturb(a) => serde_json::to_value(a)?,
            Invocation::DamagePath(a) => serde_json::to_value(a)?,
            Invocation::Recover(a) => serde_json::to_value(a)?,
            Invocation::Reconfigure(a) => serde_json::to_value(a)?,
            Invocation::ExportData(a) => serde_json::to_value(a)?,
        })
    }

    fn out(&self) -> &Path {
        match self {
            Invocation::Train(a) => &a.out,
            Invocation::Spectrum(a) => &a.out,
            Invocation::Perturb(a) => &a.out,
            Invocation::DamagePath(a) => &a.out,
            Invocation::Recover(a) => &a.common.out,
            Invocation::Reconfigure(a) => &a.common.out,
            Invocation::ExportData(a) => &a.out,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Invocation::Train(a) => a.out = out,
            Invocation::Spectrum(a) => a.out = out,
            Invocation::Perturb(a) => a.out = out,
            Invocation::DamagePath(a) => a.out = out,
            Invocation::Recover(a) => a.common.out = out,
            Invocation::Reconfigure(a) => a.common.out = out,
            Invocation::ExportData(a) => a.out = out,
        }
    }

    pub fn from_manifest(m: &RunManifest) -> Result<Self> {
        let args = m.args.clone();
        let bad = |e: serde_json::Error| Error::Format(format!("manifest arguments for '{}': {e}", m.command));
        Ok(match m.command.as_str() {
            "train" => Invocation::Train(serde_json::from_value(args).map_err(bad)?),
            "spectrum" => Invocation::Spectrum(serde_json::from_value(args).map_err(bad)?),
            "perturb" => Invocation::Perturb(serde_json::from_value(args).map_err(bad)?),
            "damage-path" => Invocation::DamagePath(serde_json::from_value(args).map_err(bad)?),
            "recover" => Invocation::Recover(serde_json::from_value(args).map_err(bad)?),
            "reconfigure" => Invocation::Reconfigure(serde_json::from_value(args).map_err(bad)?),
            "export-data" => Invocation::ExportData(serde_json::from_value(args).map_err(bad)?),
            other => return Err(Error::Format(format!("unknown command '{other}' in manifest"))),
        })
    }

    /// Runs the command and writes its manifest, also when the command
    /// fails after creating the output directory.
    pub fn run(&self) -> Result<()> {
        let mut rec = Recorder::default();
        let result = match self {
            Invocation::Train(a) => train_cmd(a, &mut rec),
            Invocation::Spectrum(a) => spectrum_cmd(a, &mut rec),
            Invocation::Perturb(a) => perturb_cmd(a, &mut rec),
            Invocation::DamagePath(a) => damage_path_cmd(a, &mut rec),
            Invocation::Recover(a) => recover_cmd(a, &mut rec),
            Invocation::Reconfigure(a) => reconfigure_cmd(a, &mut rec),
            Invocation::ExportData(a) => export_cmd(a, &mut rec),
        };
        if self.out().is_dir() {
            let manifest = rec.finish(self.name(), self.args_json()?, rayon::current_num_threads())?;
            manifest.write(self.out())?;
        }
        result
    }
}

/// Re-runs a recorded command after checking its inputs are unchanged.
pub fn replay(manifest: &Path, out: Option<PathBuf>) -> Result<()> {
    let m = RunManifest::read(manifest)?;
    m.verify_inputs()?;
    let mut inv = Invocation::from_manifest(&m)?;
    if let Some(o) = out {
        inv.set_out(o);
    }
    inv.run()
}
