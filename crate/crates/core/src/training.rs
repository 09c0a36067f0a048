//! Mini-batch SGD, evaluation, and the prune/fine-tune recovery baseline.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::damage::DamagePlan;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::network::{
    apply_mask, backward_logits, forward_cache, output_vjp, softmax, FlatWeights, NetworkSpec, OutputMode,
};
use crate::paths::{trace_path, PathKind, PathTrace, TraceOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    Mse,
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_entropy" | "ce" => Ok(Loss::CrossEntropy),
            "mse" => Ok(Loss::Mse),
            other => Err(Error::invalid(format!("unknown loss '{other}'"))),
        }
    }
}

impl Loss {
    pub fn default_for(spec: &NetworkSpec) -> Loss {
        match spec.output_mode() {
            OutputMode::Softmax => Loss::CrossEntropy,
            OutputMode::Identity => Loss::Mse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: Loss,
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid(format!(
                "learning rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.accuracy)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "epoch,loss,accuracy")?;
        for r in &self.records {
            writeln!(out, "{},{:?},{:?}", r.epoch, r.loss, r.accuracy)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn example_loss(loss: Loss, logits: &[f64], output: &[f64], label: usize) -> f64 {
    match loss {
        Loss::CrossEntropy => {
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            lse - logits[label]
        }
        Loss::Mse => output
            .iter()
            .enumerate()
            .map(|(k, f)| {
                let y = if k == label { 1.0 } else { 0.0 };
                (f - y) * (f - y)
            })
            .sum(),
    }
}

/// Mean loss and argmax accuracy. Per-example work runs in parallel; the
/// loss is summed sequentially in example order.
pub fn evaluate_with(spec: &NetworkSpec, w: &FlatWeights, d: &Dataset, loss: Loss) -> Result<Evaluation> {
    if spec.input_dim() != d.dim() {
        return Err(Error::invalid(format!(
            "network input dim {} does not match dataset dim {}",
            spec.input_dim(),
            d.dim()
        )));
    }
    if spec.output_dim() < d.classes() {
        return Err(Error::invalid(format!(
            "network has {} outputs but dataset has {} classes",
            spec.output_dim(),
            d.classes()
        )));
    }
    let per: Vec<(f64, bool)> = (0..d.len())
        .into_par_iter()
        .map(|i| {
            let c = forward_cache(spec, w, d.input(i))?;
            let l = example_loss(loss, c.logits(), c.output(), d.label(i));
            Ok((l, argmax(c.output()) == d.label(i)))
        })
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = per.iter().map(|p| p.0).sum();
    let correct = per.iter().filter(|p| p.1).count();
    Ok(Evaluation {
        loss: total / d.len() as f64,
        accuracy: correct as f64 / d.len() as f64,
        correct,
    })
}

pub fn evaluate(spec: &NetworkSpec, w: &FlatWeights, d: &Dataset) -> Result<Evaluation> {
    evaluate_with(spec, w, d, Loss::default_for(spec))
}

/// Adds the gradient of one example's loss into `acc`.
fn accumulate_gradient(
    spec: &NetworkSpec,
    w: &FlatWeights,
    x: &[f64],
    label: usize,
    loss: Loss,
    scratch: &mut [f64],
    acc: &mut [f64],
) -> Result<()> {
    let cache = forward_cache(spec, w, x)?;
    let grad_logits = match loss {
        Loss::CrossEntropy => {
            let mut p = softmax(cache.logits());
            p[label] -= 1.0;
            p
        }
        Loss::Mse => {
            let g: Vec<f64> = cache
                .output()
                .iter()
                .enumerate()
                .map(|(k, f)| 2.0 * (f - if k == label { 1.0 } else { 0.0 }))
                .collect();
            output_vjp(spec, &cache, &g)
        }
    };
    backward_logits(spec, w, &cache, &grad_logits, scratch);
    crate::linalg::axpy(1.0, scratch, acc);
    Ok(())
}

/// SGD from a given starting point. Coordinates with `frozen[i] == true`
/// receive no updates.
pub fn train_from(
    spec: &NetworkSpec,
    w0: &FlatWeights,
    d: &Dataset,
    cfg: &TrainConfig,
    frozen: Option<&[bool]>,
) -> Result<(FlatWeights, TrainLog)> {
    cfg.validate()?;
    if spec.input_dim() != d.dim() || spec.output_dim() < d.classes() {
        return Err(Error::invalid(format!(
            "architecture {} does not fit dataset (dim {}, {} classes)",
            spec.arch_string(),
            d.dim(),
            d.classes()
        )));
    }
    let n = spec.n_weights();
    let mut w = w0.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..d.len()).collect();
    let mut grad = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                accumulate_gradient(spec, &w, d.input(i), d.label(i), cfg.loss, &mut scratch, &mut grad)
                    .map_err(|e| Error::numerical(format!("training diverged in epoch {epoch}: {e}")))?;
            }
            if let Some(mask) = frozen {
                for (g, &f) in grad.iter_mut().zip(mask) {
                    if f {
                        *g = 0.0;
                    }
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            crate::linalg::axpy(-step, &grad, w.as_mut_slice());
        }
        let ev = evaluate_with(spec, &w, d, cfg.loss)
            .map_err(|e| Error::numerical(format!("training diverged in epoch {epoch}: {e}")))?;
        if !ev.loss.is_finite() {
            return Err(Error::numerical(format!(
                "training loss became non-finite in epoch {epoch}"
            )));
        }
        log.records.push(EpochRecord {
            epoch,
            loss: ev.loss,
            accuracy: ev.accuracy,
        });
    }
    Ok((w, log))
}

/// Trains from the seeded initialization.
pub fn train(spec: &NetworkSpec, d: &Dataset, cfg: &TrainConfig) -> Result<(FlatWeights, TrainLog)> {
    let w0 = FlatWeights::init(spec, cfg.seed);
    train_from(spec, &w0, d, cfg, None)
}

/// Inputs for the prune/fine-tune baseline.
pub struct FineTuneSetup<'a> {
    pub train_set: &'a Dataset,
    pub eval_set: &'a Dataset,
    /// Batch used for speed/acceleration along the trace.
    pub metric_batch: &'a Dataset,
}

/// Prunes one group at a time and retrains the surviving coordinates for
/// `epochs_per_step` epochs after each pruning. Sample `j` of the trace is the
/// network after `j` groups; `work` counts cumulative training epochs.
pub fn fine_tune_recovery(
    spec: &NetworkSpec,
    w_t: &FlatWeights,
    plan: &DamagePlan,
    node_order: &[DamagePlan],
    epochs_per_step: usize,
    cfg: &TrainConfig,
    setup: &FineTuneSetup<'_>,
) -> Result<PathTrace> {
    let n = spec.n_weights();
    plan.validate(n)?;
    let mut covered = DamagePlan::empty();
    for g in node_order {
        if g.indices().iter().any(|&i| covered.contains(i)) {
            return Err(Error::invalid("node_order groups overlap"));
        }
        covered = covered.union(g);
    }
    if covered.indices() != plan.indices() {
        return Err(Error::invalid("node_order does not partition the damage plan"));
    }
    if node_order.is_empty() {
        return Err(Error::invalid("node_order is empty"));
    }

    let mut points = vec![w_t.clone()];
    let mut work = vec![0.0];
    let mut damaged = DamagePlan::empty();
    let mut w = w_t.clone();
    for (step, group) in node_order.iter().enumerate() {
        damaged = damaged.union(group);
        w = apply_mask(&w, &damaged)?;
        if epochs_per_step > 0 {
            let step_cfg = TrainConfig {
                epochs: epochs_per_step,
                seed: cfg.seed.wrapping_add(step as u64),
                ..*cfg
            };
            let mask = damaged.mask(n);
            w = train_from(spec, &w, setup.train_set, &step_cfg, Some(&mask))?.0;
        }
        points.push(w.clone());
        work.push(((step + 1) * epochs_per_step) as f64);
    }
    let times: Vec<f64> = (0..points.len())
        .map(|i| i as f64 / (points.len() - 1) as f64)
        .collect();
    let mut trace = trace_path(
        spec,
        setup.metric_batch,
        setup.eval_set,
        &points,
        &times,
        PathKind::FineTune,
        &TraceOptions::default(),
    )?;
    for (s, wk) in trace.samples.iter_mut().zip(work) {
        s.work = wk;
    }
    Ok(trace)
}
