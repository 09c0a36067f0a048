//! Geodesic recovery: walk a trained network onto a damage hyperplane with a
//! sequence of small steps, each trading functional change under the local
//! metric against progress toward the hyperplane.
//!
//! Every step solves
//!
//! ```text
//! min_θ  θᵀ g θ − β θᵀ v_w    subject to  θᵀθ ≤ cap
//! ```
//!
//! through the stationarity condition `(g + μI) θ = (β/2) v_w` with the
//! multiplier `μ ≥ 0` located by bisection on `‖θ(μ)‖`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::damage::DamagePlan;
use crate::dataset::{round_robin_positions, Dataset};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, sym_eigen, EigenDecomposition, SymMatrix, DENSE_CAP};
use crate::metric::JacobianStack;
use crate::network::{apply_mask, FlatWeights, NetworkSpec};
use crate::paths::{path_integral, trace_path, uniform_times, PathKind, PathMeasure, PathTrace, TraceOptions};
use crate::training::{fine_tune_recovery, FineTuneSetup, TrainConfig};

pub const DEFAULT_STEP_NORM_SQ_CAP: f64 = 0.01;
pub const DEFAULT_HYPERPLANE_TOL: f64 = 1e-6;

/// Tolerance on the stationarity residual, relative to `β/2` and never looser
/// than absolute, unless f64 rounding of the residual terms is larger.
const KKT_TOL: f64 = 1e-8;
const MAX_BETA_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpSolver {
    /// Gram form when the stacked Jacobian has fewer rows than weights.
    #[default]
    Auto,
    Dense,
    Gram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub beta: f64,
    pub step_norm_sq_cap: f64,
    pub hyperplane_tol: f64,
    pub max_steps: usize,
    pub metric_batch: usize,
    /// Run every listed β and keep the lowest-energy path.
    pub beta_sweep: Option<Vec<f64>>,
    /// Shrink the step radius to the remaining distance to the hyperplane.
    pub adaptive_radius: bool,
    pub solver: QpSolver,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            beta: 1.0,
            step_norm_sq_cap: DEFAULT_STEP_NORM_SQ_CAP,
            hyperplane_tol: DEFAULT_HYPERPLANE_TOL,
            max_steps: 500,
            metric_batch: 64,
            beta_sweep: None,
            adaptive_radius: true,
            solver: QpSolver::Auto,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_norm_sq_cap > 0.0) {
            return Err(Error::invalid(format!(
                "step_norm_sq_cap must be > 0, got {}",
                self.step_norm_sq_cap
            )));
        }
        if self.max_steps < 1 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        if self.metric_batch < 1 {
            return Err(Error::invalid("metric_batch must be at least 1"));
        }
        if !(self.hyperplane_tol >= 0.0) {
            return Err(Error::invalid("hyperplane_tol must be >= 0"));
        }
        let betas = self.beta_sweep.clone().unwrap_or_else(|| vec![self.beta]);
        if betas.is_empty() {
            return Err(Error::invalid("beta sweep is empty"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0) || !b.is_finite()) {
            return Err(Error::invalid(format!("beta must be finite and > 0, got {b}")));
        }
        Ok(())
    }
}

/// `{0.1, 1, 10} · 2·√cap·λ₁`
pub fn default_beta_sweep(lambda_max: f64, step_norm_sq_cap: f64) -> Vec<f64> {
    let base = 2.0 * step_norm_sq_cap.sqrt() * lambda_max;
    [0.1, 1.0, 10.0].iter().map(|f| f * base).collect()
}

/// The metric at one point, factored so that `(g + μI)⁻¹` is cheap for any
/// `μ`.
pub enum MetricSystem {
    Dense {
        g: SymMatrix,
        eig: EigenDecomposition,
    },
    /// `g = AᵀA` through the eigenpairs of `AAᵀ`.
    Gram {
        stack: JacobianStack,
        eig: EigenDecomposition,
    },
}

/// Eigen-coordinates of a right-hand side: `(λᵢ, cᵢ²)` pairs plus the squared
/// norm of the part lying in the null space of `g`.
struct Coordinates {
    pairs: Vec<(f64, f64)>,
    null_sq: f64,
}

impl Coordinates {
    fn norm_sq(&self, mu: f64) -> f64 {
        let mut s = 0.0;
        for &(l, c2) in &self.pairs {
            if c2 == 0.0 {
                continue;
            }
            let d = l + mu;
            if d <= 0.0 {
                return f64::INFINITY;
            }
            s += c2 / (d * d);
        }
        if self.null_sq > 0.0 {
            if mu <= 0.0 {
                return f64::INFINITY;
            }
            s += self.null_sq / (mu * mu);
        }
        s
    }
}

fn gram_cutoff(eig: &EigenDecomposition) -> f64 {
    eig.values.first().copied().unwrap_or(0.0).max(0.0) * 1e-12
}

impl MetricSystem {
    pub fn from_matrix(g: SymMatrix) -> Result<Self> {
        let eig = sym_eigen(&g)?;
        Ok(MetricSystem::Dense { g, eig })
    }

    pub fn dense(spec: &NetworkSpec, w: &FlatWeights, batch: &Dataset) -> Result<Self> {
        let n = spec.n_weights();
        if n > DENSE_CAP {
            return Err(Error::Capacity { n, cap: DENSE_CAP });
        }
        Self::from_matrix(JacobianStack::build(spec, w, batch)?.to_dense()?)
    }

    pub fn gram(spec: &NetworkSpec, w: &FlatWeights, batch: &Dataset) -> Result<Self> {
        let stack = JacobianStack::build(spec, w, batch)?;
        let eig = sym_eigen(&stack.gram()?)?;
        Ok(MetricSystem::Gram { stack, eig })
    }

    pub fn build(spec: &NetworkSpec, w: &FlatWeights, batch: &Dataset, solver: QpSolver) -> Result<Self> {
        let rows = batch.len() * spec.output_dim();
        match solver {
            QpSolver::Dense => Self::dense(spec, w, batch),
            QpSolver::Gram => Self::gram(spec, w, batch),
            QpSolver::Auto if rows < spec.n_weights() || spec.n_weights() > DENSE_CAP => Self::gram(spec, w, batch),
            QpSolver::Auto => Self::dense(spec, w, batch),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            MetricSystem::Dense { g, .. } => g.dim(),
            MetricSystem::Gram { stack, .. } => stack.n(),
        }
    }

    pub fn lambda_max(&self) -> f64 {
        let eig = match self {
            MetricSystem::Dense { eig, .. } | MetricSystem::Gram { eig, .. } => eig,
        };
        eig.values.first().copied().unwrap_or(0.0).max(0.0)
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        match self {
            MetricSystem::Dense { g, .. } => g.mul_vec(v),
            MetricSystem::Gram { stack, .. } => stack.apply(v),
        }
    }

    fn coordinates(&self, b: &[f64]) -> Coordinates {
        match self {
            MetricSystem::Dense { eig, .. } => Coordinates {
                pairs: eig
                    .values
                    .iter()
                    .zip(&eig.vectors)
                    .map(|(&l, v)| {
                        let c = dot(v, b);
                        (l.max(0.0), c * c)
                    })
                    .collect(),
                null_sq: 0.0,
            },
            MetricSystem::Gram { stack, eig } => {
                let ab = stack.project(b);
                let cut = gram_cutoff(eig);
                let mut pairs = Vec::new();
                let mut range_sq = 0.0;
                for (&s, u) in eig.values.iter().zip(&eig.vectors) {
                    if s > cut {
                        let p = dot(u, &ab);
                        pairs.push((s, p * p / s));
                        range_sq += p * p / s;
                    }
                }
                Coordinates {
                    pairs,
                    null_sq: (dot(b, b) - range_sq).max(0.0),
                }
            }
        }
    }

    /// `(g + μI)⁻¹ b`. At `μ = 0` the null-space part of `b` is dropped.
    fn solve(&self, b: &[f64], mu: f64) -> Vec<f64> {
        match self {
            MetricSystem::Dense { eig, .. } => {
                let mut x = vec![0.0; b.len()];
                for (&l, v) in eig.values.iter().zip(&eig.vectors) {
                    let d = l.max(0.0) + mu;
                    if d > 0.0 {
                        axpy(dot(v, b) / d, v, &mut x);
                    }
                }
                x
            }
            MetricSystem::Gram { stack, eig } => {
                let ab = stack.project(b);
                let cut = gram_cutoff(eig);
                // range part: Σ rᵢ (rᵢᵀb)/(σᵢ+μ) with rᵢ = Aᵀuᵢ/√σᵢ
                let mut c_range = vec![0.0; ab.len()];
                let mut c_proj = vec![0.0; ab.len()];
                for (&s, u) in eig.values.iter().zip(&eig.vectors) {
                    if s > cut {
                        let p = dot(u, &ab);
                        axpy(p / (s * (s + mu)), u, &mut c_range);
                        axpy(p / s, u, &mut c_proj);
                    }
                }
                let mut x = stack.lift(&c_range);
                if mu > 0.0 {
                    let proj = stack.lift(&c_proj);
                    for ((xi, bi), pi) in x.iter_mut().zip(b).zip(&proj) {
                        *xi += (bi - pi) / mu;
                    }
                }
                x
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpStep {
    pub theta: Vec<f64>,
    pub mu: f64,
    pub norm_sq: f64,
    /// `‖(g + μI)θ − (β/2)v‖`
    pub kkt_residual: f64,
    /// `|θᵀθ − cap| / cap` when `μ > 0`, else 0.
    pub slackness: f64,
    pub constrained: bool,
}

fn residual(sys: &MetricSystem, theta: &[f64], mu: f64, b: &[f64]) -> Vec<f64> {
    let gt = sys.apply(theta);
    gt.iter()
        .zip(theta)
        .zip(b)
        .map(|((g, t), bi)| g + mu * t - bi)
        .collect()
}

/// Solves the step QP for a factored metric.
pub fn solve_qp(sys: &MetricSystem, v_w: &[f64], beta: f64, cap: f64) -> Result<QpStep> {
    if v_w.len() != sys.dim() {
        return Err(Error::invalid(format!(
            "direction has {} entries, metric is {}-dimensional",
            v_w.len(),
            sys.dim()
        )));
    }
    if !(beta > 0.0) || !(cap > 0.0) {
        return Err(Error::invalid(format!("need beta > 0 and cap > 0, got {beta}, {cap}")));
    }
    let half = 0.5 * beta;
    let b: Vec<f64> = v_w.iter().map(|v| half * v).collect();
    let coords = sys.coordinates(&b);

    let (mu, constrained) = if coords.norm_sq(0.0) <= cap {
        (0.0, false)
    } else {
        let mut hi = sys.lambda_max();
        if !(hi > 0.0) {
            hi = norm(&b) / cap.sqrt();
        }
        let mut doublings = 0;
        while !(coords.norm_sq(hi) < cap) {
            hi *= 2.0;
            doublings += 1;
            if doublings > 2000 || !hi.is_finite() {
                return Err(Error::numerical(format!(
                    "could not bracket the multiplier: ‖θ(μ)‖² = {} at μ = {hi}, cap {cap}",
                    coords.norm_sq(hi)
                )));
            }
        }
        let mut lo = 0.0;
        for _ in 0..400 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if coords.norm_sq(mid) < cap {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        (hi, true)
    };

    let mut theta = sys.solve(&b, mu);
    // at huge β the terms of (g+μI)θ − b are ~1e9 and f64 rounding alone
    // exceeds an absolute 1e-8, so never demand better than a few ulps
    let ulp_floor = 4.0 * f64::EPSILON * (mu * norm(&theta) + half * norm(v_w));
    let kkt_bound = (KKT_TOL * half.min(1.0)).max(ulp_floor);
    let mut r = residual(sys, &theta, mu, &b);
    for _ in 0..3 {
        if norm(&r) <= 0.1 * kkt_bound {
            break;
        }
        let delta = sys.solve(&r, mu);
        axpy(-1.0, &delta, &mut theta);
        r = residual(sys, &theta, mu, &b);
    }
    let kkt_residual = norm(&r);
    let mut norm_sq = dot(&theta, &theta);
    if norm_sq > cap {
        // rounding can leave the step a hair outside the ball
        let s = (cap / norm_sq).sqrt();
        theta.iter_mut().for_each(|t| *t *= s);
        norm_sq = dot(&theta, &theta);
    }
    let slackness = if mu > 0.0 { (norm_sq - cap).abs() / cap } else { 0.0 };
    if kkt_residual > kkt_bound || !kkt_residual.is_finite() {
        return Err(Error::numerical(format!(
            "stationarity residual {kkt_residual:e} exceeds {kkt_bound:e} (mu = {mu:e})"
        )));
    }
    if slackness > KKT_TOL {
        return Err(Error::numerical(format!(
            "step norm misses the active bound by {slackness:e} relative (mu = {mu:e}, ‖θ‖² = {norm_sq:e})"
        )));
    }
    Ok(QpStep {
        theta,
        mu,
        norm_sq,
        kkt_residual,
        slackness,
        constrained,
    })
}

/// One QP step at `w` with the metric averaged over `batch`.
pub fn qp_step(
    spec: &NetworkSpec,
    w: &FlatWeights,
    batch: &Dataset,
    v_w: &[f64],
    beta: f64,
    cap: f64,
    solver: QpSolver,
) -> Result<QpStep> {
    let sys = MetricSystem::build(spec, w, batch, solver)?;
    solve_qp(&sys, v_w, beta, cap)
}

/// Largest `|wᵢ|` over damaged coordinates.
pub fn max_damaged(w: &FlatWeights, plan: &DamagePlan) -> f64 {
    plan.indices().iter().map(|&i| w[i].abs()).fold(0.0, f64::max)
}

/// Unit vector with components `−wᵢ` on damaged coordinates. Errors with
/// `Degenerate` when `w` is already within `tol` of the hyperplane.
pub fn hyperplane_direction(w: &FlatWeights, plan: &DamagePlan, tol: f64) -> Result<Vec<f64>> {
    plan.validate(w.len())?;
    if max_damaged(w, plan) <= tol {
        return Err(Error::Degenerate("already on the damage hyperplane".into()));
    }
    let mut v = vec![0.0; w.len()];
    for &i in plan.indices() {
        v[i] = -w[i];
    }
    let len = norm(&v);
    v.iter_mut().for_each(|x| *x /= len);
    Ok(v)
}

/// Datasets used by recovery.
#[derive(Clone, Copy)]
pub struct RecoveryData<'a> {
    /// Source of the round-robin metric batches; also sets the work unit.
    pub train: &'a Dataset,
    pub eval: &'a Dataset,
}

impl<'a> RecoveryData<'a> {
    /// Metric batch for recovery step `step`.
    pub fn batch(&self, step: usize, size: usize) -> Result<Dataset> {
        self.train.select(&round_robin_positions(self.train.len(), step, size))
    }

    /// Batch used for speed, acceleration and energy along traces.
    pub fn trace_batch(&self, size: usize) -> Result<Dataset> {
        self.batch(0, size)
    }

    /// Work units for one metric batch.
    pub fn step_work(&self, size: usize) -> f64 {
        size.min(self.train.len()) as f64 / self.train.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub beta: f64,
    pub mu: f64,
    pub norm_sq: f64,
    pub kkt_residual: f64,
    pub max_damaged: f64,
    pub batch_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub beta: f64,
    pub total_energy: Option<f64>,
    pub steps_used: Option<usize>,
    pub final_accuracy: Option<f64>,
    pub error: Option<String>,
    pub winner: bool,
}

#[derive(Debug, Clone)]
pub struct RecoveryResult {
    pub trace: PathTrace,
    pub total_energy: f64,
    pub steps_used: usize,
    pub beta_used: f64,
    pub steps: Vec<StepRecord>,
    /// One entry per swept β; empty without a sweep.
    pub sweep: Vec<SweepEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySummary {
    pub beta: f64,
    pub steps_used: usize,
    pub total_energy: f64,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub mean_accuracy: f64,
    pub peak_acceleration: f64,
    pub work: f64,
    pub sweep: Vec<SweepEntry>,
    pub steps: Vec<StepRecord>,
}

impl RecoveryResult {
    pub fn summary(&self) -> RecoverySummary {
        RecoverySummary {
            beta: self.beta_used,
            steps_used: self.steps_used,
            total_energy: self.total_energy,
            initial_accuracy: self.trace.samples[0].accuracy,
            final_accuracy: self.trace.final_accuracy(),
            mean_accuracy: self.trace.mean_accuracy(),
            peak_acceleration: self.trace.peak_acceleration().0,
            work: self.trace.final_sample().work,
            sweep: self.sweep.clone(),
            steps: self.steps.clone(),
        }
    }

    /// Trace CSV at `<stem>.csv` and summary JSON at `<stem>.json`.
    pub fn write(&self, stem: &Path) -> Result<()> {
        self.trace.write_csv(&stem.with_extension("csv"))?;
        let f = std::fs::File::create(stem.with_extension("json"))?;
        serde_json::to_writer_pretty(f, &self.summary())?;
        Ok(())
    }
}

fn trace_of(
    spec: &NetworkSpec,
    points: &[FlatWeights],
    data: &RecoveryData<'_>,
    cfg: &RecoveryConfig,
) -> Result<(PathTrace, f64)> {
    let trace_batch = data.trace_batch(cfg.metric_batch)?;
    let times = uniform_times(points.len());
    let mut trace = trace_path(
        spec,
        &trace_batch,
        data.eval,
        points,
        &times,
        PathKind::Geodesic,
        &TraceOptions::default(),
    )?;
    let unit = data.step_work(cfg.metric_batch);
    for (k, s) in trace.samples.iter_mut().enumerate() {
        s.work = k as f64 * unit;
    }
    let energy = if points.len() < 2 {
        0.0
    } else {
        path_integral(spec, &trace_batch, points, &times, PathMeasure::Energy)?
    };
    Ok((trace, energy))
}

fn recover_single(
    spec: &NetworkSpec,
    w_t: &FlatWeights,
    plan: &DamagePlan,
    data: &RecoveryData<'_>,
    cfg: &RecoveryConfig,
    beta: f64,
) -> Result<RecoveryResult> {
    let mut w = w_t.clone();
    let mut points = vec![w.clone()];
    let mut records = Vec::new();
    let mut converged = max_damaged(&w, plan) <= cfg.hyperplane_tol;

    let mut step = 0;
    while !converged && step < cfg.max_steps {
        let current = max_damaged(&w, plan);
        let v_w = hyperplane_direction(&w, plan, cfg.hyperplane_tol)?;
        let batch = data.batch(step, cfg.metric_batch)?;
        let sys = MetricSystem::build(spec, &w, &batch, cfg.solver)?;
        let dist_sq: f64 = plan.indices().iter().map(|&i| w[i] * w[i]).sum();
        let cap = if cfg.adaptive_radius {
            cfg.step_norm_sq_cap.min(dist_sq)
        } else {
            cfg.step_norm_sq_cap
        };

        let mut beta_k = beta;
        let mut accepted = None;
        for _ in 0..=MAX_BETA_DOUBLINGS {
            let qp = solve_qp(&sys, &v_w, beta_k, cap)?;
            let next = w.offset(1.0, &qp.theta);
            if max_damaged(&next, plan) < current {
                accepted = Some((qp, next));
                break;
            }
            beta_k *= 2.0;
        }
        let Some((qp, next)) = accepted else {
            let (trace, _) = trace_of(spec, &points, data, cfg)?;
            return Err(Error::NonConvergence {
                steps: step,
                reason: format!("no step reduces the damaged weights (max |w_i| = {current:e})"),
                partial: Some(Box::new(trace)),
            });
        };
        w = next;
        step += 1;
        let md = max_damaged(&w, plan);
        records.push(StepRecord {
            step,
            beta: beta_k,
            mu: qp.mu,
            norm_sq: qp.norm_sq,
            kkt_residual: qp.kkt_residual,
            max_damaged: md,
            batch_ids: batch.ids().to_vec(),
        });
        points.push(w.clone());
        converged = md <= cfg.hyperplane_tol;
    }

    if !converged {
        let (trace, _) = trace_of(spec, &points, data, cfg)?;
        return Err(Error::NonConvergence {
            steps: step,
            reason: format!(
                "max |w_i| on damaged coordinates is {:e}, tolerance {:e}",
                max_damaged(&w, plan),
                cfg.hyperplane_tol
            ),
            partial: Some(Box::new(trace)),
        });
    }
    let last = points.len() - 1;
    points[last] = apply_mask(&points[last], plan)?;
    let (trace, total_energy) = trace_of(spec, &points, data, cfg)?;
    Ok(RecoveryResult {
        trace,
        total_energy,
        steps_used: step,
        beta_used: beta,
        steps: records,
        sweep: Vec::new(),
    })
}

/// Moves `w_t` onto the hyperplane of `plan`. With a β sweep every value is
/// run independently and the minimum-energy path is returned.
pub fn recover(
    spec: &NetworkSpec,
    w_t: &FlatWeights,
    plan: &DamagePlan,
    data: &RecoveryData<'_>,
    cfg: &RecoveryConfig,
) -> Result<RecoveryResult> {
    cfg.validate()?;
    plan.validate(w_t.len())?;
    if w_t.len() != spec.n_weights() {
        return Err(Error::invalid(format!(
            "weight vector has {} entries, architecture needs {}",
            w_t.len(),
            spec.n_weights()
        )));
    }
    let Some(betas) = &cfg.beta_sweep else {
        return recover_single(spec, w_t, plan, data, cfg, cfg.beta);
    };
    let runs: Vec<Result<RecoveryResult>> = betas
        .par_iter()
        .map(|&b| recover_single(spec, w_t, plan, data, cfg, b))
        .collect();
    let mut winner: Option<usize> = None;
    for (i, r) in runs.iter().enumerate() {
        if let Ok(r) = r {
            let better = match winner {
                None => true,
                Some(j) => r.total_energy < runs[j].as_ref().map(|x| x.total_energy).unwrap_or(f64::INFINITY),
            };
            if better {
                winner = Some(i);
            }
        }
    }
    let sweep: Vec<SweepEntry> = runs
        .iter()
        .zip(betas)
        .enumerate()
        .map(|(i, (r, &beta))| match r {
            Ok(r) => SweepEntry {
                beta,
                total_energy: Some(r.total_energy),
                steps_used: Some(r.steps_used),
                final_accuracy: Some(r.trace.final_accuracy()),
                error: None,
                winner: winner == Some(i),
            },
            Err(e) => SweepEntry {
                beta,
                total_energy: None,
                steps_used: None,
                final_accuracy: None,
                error: Some(e.to_string()),
                winner: false,
            },
        })
        .collect();
    match winner {
        Some(i) => {
            let mut best = runs.into_iter().nth(i).unwrap()?;
            best.sweep = sweep;
            Ok(best)
        }
        None => Err(runs.into_iter().next().unwrap().unwrap_err()),
    }
}

/// Moves a network sitting on `old_plan`'s hyperplane to `new_plan`'s.
/// Coordinates freed by the change start at 0 and move freely with the rest.
pub fn reconfigure(
    spec: &NetworkSpec,
    w_current: &FlatWeights,
    old_plan: &DamagePlan,
    new_plan: &DamagePlan,
    data: &RecoveryData<'_>,
    cfg: &RecoveryConfig,
) -> Result<RecoveryResult> {
    old_plan.validate(w_current.len())?;
    new_plan.validate(w_current.len())?;
    let off = max_damaged(w_current, old_plan);
    if off > cfg.hyperplane_tol {
        return Err(Error::invalid(format!(
            "network is not on the old damage hyperplane (max |w_i| = {off:e})"
        )));
    }
    let start = apply_mask(w_current, old_plan)?;
    recover(spec, &start, new_plan, data, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub final_accuracy: f64,
    pub mean_accuracy: f64,
    pub peak_acceleration: f64,
    pub work: f64,
}

impl StrategySummary {
    pub fn of(trace: &PathTrace) -> Self {
        StrategySummary {
            final_accuracy: trace.final_accuracy(),
            mean_accuracy: trace.mean_accuracy(),
            peak_acceleration: trace.peak_acceleration().0,
            work: trace.final_sample().work,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub geodesic: StrategySummary,
    pub fine_tune: StrategySummary,
    pub geodesic_beta: f64,
    pub geodesic_steps: usize,
    pub fine_tune_epochs_per_step: usize,
    /// Work unit: one pass over the training set.
    pub work_unit: String,
}

/// Fine-tuning baseline settings.
pub struct FineTuneBaseline<'a> {
    pub node_order: &'a [DamagePlan],
    pub epochs_per_step: usize,
    pub cfg: TrainConfig,
}

/// Geodesic recovery and prune/fine-tune on the same damage, with work
/// measured in epochs over the training set.
pub fn compare_recovery(
    spec: &NetworkSpec,
    w_t: &FlatWeights,
    plan: &DamagePlan,
    data: &RecoveryData<'_>,
    cfg: &RecoveryConfig,
    ft: &FineTuneBaseline<'_>,
) -> Result<(ComparisonReport, RecoveryResult, PathTrace)> {
    let geo = recover(spec, w_t, plan, data, cfg)?;
    let trace_batch = data.trace_batch(cfg.metric_batch)?;
    let setup = FineTuneSetup {
        train_set: data.train,
        eval_set: data.eval,
        metric_batch: &trace_batch,
    };
    let ft_trace = fine_tune_recovery(spec, w_t, plan, ft.node_order, ft.epochs_per_step, &ft.cfg, &setup)?;
    let report = ComparisonReport {
        geodesic: StrategySummary::of(&geo.trace),
        fine_tune: StrategySummary::of(&ft_trace),
        geodesic_beta: geo.beta_used,
        geodesic_steps: geo.steps_used,
        fine_tune_epochs_per_step: ft.epochs_per_step,
        work_unit: "epochs".into(),
    };
    Ok((report, geo, ft_trace))
}
