//! Damage paths through weight space and the quantities measured along them:
//! path energy, break-down speed and break-down acceleration.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::damage::DamagePlan;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::metric::quadratic_form_matfree;
use crate::network::{apply_mask, FlatWeights, NetworkSpec};
use crate::training::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    NaiveLinear,
    StepwiseDeletion,
    Geodesic,
    FineTune,
}

impl PathKind {
    pub fn name(self) -> &'static str {
        match self {
            PathKind::NaiveLinear => "naive_linear",
            PathKind::StepwiseDeletion => "stepwise_deletion",
            PathKind::Geodesic => "geodesic",
            PathKind::FineTune => "fine_tune",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathSample {
    pub t: f64,
    pub w: FlatWeights,
    pub loss: f64,
    pub accuracy: f64,
    pub speed: f64,
    pub acceleration: f64,
    /// Cumulative gradient-equivalent work (epochs over the training set).
    pub work: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathTrace {
    pub kind: PathKind,
    pub samples: Vec<PathSample>,
}

impl PathTrace {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.accuracy).collect()
    }

    pub fn points(&self) -> Vec<FlatWeights> {
        self.samples.iter().map(|s| s.w.clone()).collect()
    }

    pub fn final_sample(&self) -> &PathSample {
        self.samples.last().expect("trace has at least one sample")
    }

    pub fn final_accuracy(&self) -> f64 {
        self.final_sample().accuracy
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.samples.iter().map(|s| s.accuracy).sum::<f64>() / self.samples.len() as f64
    }

    /// Largest `|a(t)|` and the first `t` where it occurs.
    pub fn peak_acceleration(&self) -> (f64, f64) {
        let mut best = (0.0, self.samples[0].t);
        for s in &self.samples {
            if s.acceleration.abs() > best.0 {
                best = (s.acceleration.abs(), s.t);
            }
        }
        best
    }

    /// `t,loss,accuracy,speed,acceleration,work`
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "t,loss,accuracy,speed,acceleration,work")?;
        for s in &self.samples {
            writeln!(
                out,
                "{:?},{:?},{:?},{:?},{:?},{:?}",
                s.t, s.loss, s.accuracy, s.speed, s.acceleration, s.work
            )?;
        }
        out.flush()?;
        Ok(())
    }
}

/// The narrowest `t` interval covering the steepest segments of accuracy
/// decline. Segments are ranked by drop rate and taken until they carry at
/// least `fraction` of the total decline; the interval spans the chosen
/// segments. `None` if accuracy never drops.
pub fn steepest_decline_window(trace: &PathTrace, fraction: f64) -> Option<(f64, f64)> {
    let s = &trace.samples;
    let mut segs: Vec<(usize, f64, f64)> = s
        .windows(2)
        .enumerate()
        .filter_map(|(k, p)| {
            let drop = p[0].accuracy - p[1].accuracy;
            (drop > 0.0).then(|| (k, drop, drop / (p[1].t - p[0].t)))
        })
        .collect();
    let total: f64 = segs.iter().map(|x| x.1).sum();
    if total <= 0.0 {
        return None;
    }
    segs.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let (mut lo, mut hi, mut carried) = (usize::MAX, 0, 0.0);
    for (k, drop, _) in segs {
        lo = lo.min(k);
        hi = hi.max(k + 1);
        carried += drop;
        if carried >= fraction * total {
            break;
        }
    }
    Some((s[lo].t, s[hi].t))
}

/// `steps` points from `w_t` to its masked image, damaged coordinates scaled
/// by `1 − t`.
pub fn naive_linear_path(w_t: &FlatWeights, plan: &DamagePlan, steps: usize) -> Result<Vec<FlatWeights>> {
    if steps < 2 {
        return Err(Error::invalid(format!("a path needs at least 2 points, got {steps}")));
    }
    plan.validate(w_t.len())?;
    let mut points = Vec::with_capacity(steps);
    for k in 0..steps - 1 {
        let t = k as f64 / (steps - 1) as f64;
        let mut w = w_t.clone();
        for &i in plan.indices() {
            w.as_mut_slice()[i] = w_t[i] * (1.0 - t);
        }
        points.push(w);
    }
    points.push(apply_mask(w_t, plan)?);
    Ok(points)
}

/// `w_t` followed by the network after each cumulative group deletion.
pub fn stepwise_deletion_path(w_t: &FlatWeights, groups: &[DamagePlan]) -> Result<Vec<FlatWeights>> {
    if groups.is_empty() {
        return Err(Error::invalid("stepwise deletion needs at least one group"));
    }
    let mut points = vec![w_t.clone()];
    let mut damaged = DamagePlan::empty();
    for g in groups {
        damaged = damaged.union(g);
        points.push(apply_mask(w_t, &damaged)?);
    }
    Ok(points)
}

/// Uniform parameter values `k/(len−1)`.
pub fn uniform_times(len: usize) -> Vec<f64> {
    if len < 2 {
        return vec![0.0; len];
    }
    (0..len).map(|k| k as f64 / (len - 1) as f64).collect()
}

fn check_path(points: &[FlatWeights], times: &[f64]) -> Result<()> {
    if points.len() != times.len() {
        return Err(Error::invalid(format!(
            "{} points but {} times",
            points.len(),
            times.len()
        )));
    }
    if times.windows(2).any(|p| !(p[1] > p[0])) {
        return Err(Error::invalid("path times must be strictly increasing"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != points[0].len()) {
        return Err(Error::invalid(format!(
            "path points have mixed lengths {} and {}",
            points[0].len(),
            p.len()
        )));
    }
    Ok(())
}

/// Integrand applied per segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathMeasure {
    /// `∫ ⟨γ̇, γ̇⟩ dt`
    #[default]
    Energy,
    /// `∫ √⟨γ̇, γ̇⟩ dt`
    Length,
}

/// Midpoint-rule integral over the piecewise-linear path through `points`
/// at parameter values `times`.
pub fn path_integral(
    spec: &NetworkSpec,
    batch: &Dataset,
    points: &[FlatWeights],
    times: &[f64],
    measure: PathMeasure,
) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("a path needs at least 2 points"));
    }
    check_path(points, times)?;
    let terms = (0..points.len() - 1)
        .into_par_iter()
        .map(|k| {
            let dt = times[k + 1] - times[k];
            let a = points[k].as_slice();
            let b = points[k + 1].as_slice();
            let mid = FlatWeights::new(a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect());
            let vel: Vec<f64> = a.iter().zip(b).map(|(x, y)| (y - x) / dt).collect();
            let s = quadratic_form_matfree(spec, &mid, batch, &vel)?;
            Ok(match measure {
                PathMeasure::Energy => s * dt,
                PathMeasure::Length => s.max(0.0).sqrt() * dt,
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum())
}

/// Path energy with uniform parameter values on `[0, 1]`.
pub fn path_energy(spec: &NetworkSpec, batch: &Dataset, points: &[FlatWeights]) -> Result<f64> {
    path_integral(spec, batch, points, &uniform_times(points.len()), PathMeasure::Energy)
}

/// Metric quadratic form of the velocity.
pub fn breakdown_speed(spec: &NetworkSpec, batch: &Dataset, w: &FlatWeights, velocity: &[f64]) -> Result<f64> {
    quadratic_form_matfree(spec, w, batch, velocity)
}

/// `1e-4·‖w‖ / max(‖v‖, 1e-12)`; at `w = 0` the `‖w‖` factor is taken as 1.
pub fn default_accel_step(w: &FlatWeights, velocity: &[f64]) -> f64 {
    let wn = w.norm();
    let wn = if wn > 0.0 { wn } else { 1.0 };
    1e-4 * wn / norm(velocity).max(1e-12)
}

/// Central difference `(s(w + h v) − s(w − h v)) / 2h`: the rate of change of
/// the speed when moving through `w` with velocity `v`.
pub fn breakdown_acceleration(
    spec: &NetworkSpec,
    batch: &Dataset,
    w: &FlatWeights,
    velocity: &[f64],
    h: Option<f64>,
) -> Result<f64> {
    let h = h.unwrap_or_else(|| default_accel_step(w, velocity));
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let plus = quadratic_form_matfree(spec, &w.offset(h, velocity), batch, velocity)?;
    let minus = quadratic_form_matfree(spec, &w.offset(-h, velocity), batch, velocity)?;
    let a = (plus - minus) / (2.0 * h);
    if !a.is_finite() {
        return Err(Error::numerical(format!("non-finite acceleration (step {h})")));
    }
    Ok(a)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TraceOptions {
    /// Fixed finite-difference step; `None` uses [`default_accel_step`].
    pub accel_step: Option<f64>,
}

/// Velocity at sample `k`: central difference inside, one-sided at the ends.
fn sample_velocity(points: &[FlatWeights], times: &[f64], k: usize) -> Vec<f64> {
    let last = points.len() - 1;
    let (a, b) = if k == 0 {
        (0, 1)
    } else if k == last {
        (last - 1, last)
    } else {
        (k - 1, k + 1)
    };
    let dt = times[b] - times[a];
    points[a]
        .as_slice()
        .iter()
        .zip(points[b].as_slice())
        .map(|(x, y)| (y - x) / dt)
        .collect()
}

/// Evaluates every sample of a path: accuracy and loss on `eval_set`, speed
/// and acceleration with the metric averaged over `batch`.
pub fn trace_path(
    spec: &NetworkSpec,
    batch: &Dataset,
    eval_set: &Dataset,
    points: &[FlatWeights],
    times: &[f64],
    kind: PathKind,
    opts: &TraceOptions,
) -> Result<PathTrace> {
    if points.is_empty() {
        return Err(Error::invalid("empty path"));
    }
    check_path(points, times)?;
    if points[0].len() != spec.n_weights() {
        return Err(Error::invalid(format!(
            "path points have {} weights, architecture needs {}",
            points[0].len(),
            spec.n_weights()
        )));
    }
    let samples = (0..points.len())
        .into_par_iter()
        .map(|k| {
            let w = &points[k];
            let ev = evaluate(spec, w, eval_set)?;
            let (speed, acceleration) = if points.len() < 2 {
                (0.0, 0.0)
            } else {
                let v = sample_velocity(points, times, k);
                if v.iter().all(|x| *x == 0.0) {
                    (0.0, 0.0)
                } else {
                    (
                        breakdown_speed(spec, batch, w, &v)?,
                        breakdown_acceleration(spec, batch, w, &v, opts.accel_step)?,
                    )
                }
            };
            Ok(PathSample {
                t: times[k],
                w: w.clone(),
                loss: ev.loss,
                accuracy: ev.accuracy,
                speed,
                acceleration,
                work: 0.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PathTrace { kind, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::damage::node_deletion_plan;
    use crate::dataset::synth_gaussians;
    use crate::metric::assemble_metric;
    use crate::network::{Activation, OutputMode};
    use crate::testutil::{random_unit, tanh_net};

    #[test]
    fn naive_path_endpoints_and_midpoint() {
        let (spec, w) = tanh_net(&[2, 4, 3], 3);
        let plan = node_deletion_plan(&spec, 1, &[0, 2]).unwrap();
        let pts = naive_linear_path(&w, &plan, 3).unwrap();
        assert_eq!(pts[0], w);
        assert_eq!(pts[2], apply_mask(&w, &plan).unwrap());
        for i in 0..w.len() {
            let want = if plan.contains(i) { w[i] / 2.0 } else { w[i] };
            assert_eq!(pts[1][i], want);
        }
        assert!(naive_linear_path(&w, &plan, 1).is_err());
    }

    #[test]
    fn stepwise_path_accumulates_groups() {
        let (spec, w) = tanh_net(&[2, 4, 3], 3);
        let g: Vec<_> = (0..2).map(|k| node_deletion_plan(&spec, 1, &[k]).unwrap()).collect();
        let pts = stepwise_deletion_path(&w, &g).unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[2], apply_mask(&w, &g[0].union(&g[1])).unwrap());
    }

    #[test]
    fn energy_of_constant_and_straight_paths() {
        let (spec, w) = tanh_net(&[2, 3, 2], 0);
        let d = synth_gaussians(2, 2, 5, 1.0, 0).unwrap();
        assert_eq!(path_energy(&spec, &d, &[w.clone(), w.clone(), w.clone()]).unwrap(), 0.0);

        // linear net: the metric does not depend on w
        let lin = NetworkSpec::new(vec![2, 2], Activation::Identity, OutputMode::Identity).unwrap();
        let a = FlatWeights::new(vec![0.1, -0.4, 0.7, 0.2, 0.0, 1.0]);
        let dw = random_unit(6, 4);
        let b = a.offset(1.0, &dw);
        let g = assemble_metric(&lin, &a, &d).unwrap();
        let want = g.quadratic_form(&dw).unwrap();
        let pts = vec![a.clone(), a.offset(0.3, &dw), a.offset(0.5, &dw), b];
        let times = vec![0.0, 0.3, 0.5, 1.0];
        let e = path_integral(&lin, &d, &pts, &times, PathMeasure::Energy).unwrap();
        assert!((e - want).abs() <= 1e-12 * want);
        let l = path_integral(&lin, &d, &pts, &times, PathMeasure::Length).unwrap();
        assert!((l - want.sqrt()).abs() <= 1e-12 * want.sqrt());
    }

    #[test]
    fn energy_refinement_is_stable() {
        let (spec, w) = tanh_net(&[2, 6, 3], 11);
        let d = synth_gaussians(3, 2, 6, 2.0, 2).unwrap();
        let plan = node_deletion_plan(&spec, 1, &[0, 1, 2]).unwrap();
        let coarse = path_energy(&spec, &d, &naive_linear_path(&w, &plan, 17).unwrap()).unwrap();
        let fine = path_energy(&spec, &d, &naive_linear_path(&w, &plan, 33).unwrap()).unwrap();
        assert!((coarse - fine).abs() <= 0.01 * fine, "{coarse} vs {fine}");
    }

    #[test]
    fn energy_is_additive_over_concatenation() {
        let (spec, w) = tanh_net(&[2, 5, 3], 6);
        let d = synth_gaussians(3, 2, 4, 2.0, 5).unwrap();
        let plan = node_deletion_plan(&spec, 1, &[1, 3]).unwrap();
        let pts = naive_linear_path(&w, &plan, 9).unwrap();
        let t = uniform_times(9);
        let whole = path_integral(&spec, &d, &pts, &t, PathMeasure::Energy).unwrap();
        let left = path_integral(&spec, &d, &pts[..5], &t[..5], PathMeasure::Energy).unwrap();
        let right = path_integral(&spec, &d, &pts[4..], &t[4..], PathMeasure::Energy).unwrap();
        assert!((whole - left - right).abs() <= 1e-9 * whole);
        assert!(whole >= 0.0);
    }

    #[test]
    fn speed_matches_dense_metric_at_start_of_naive_path() {
        let (spec, w) = tanh_net(&[2, 5, 3], 8);
        let d = synth_gaussians(3, 2, 5, 2.0, 8).unwrap();
        let plan = node_deletion_plan(&spec, 1, &[0, 4]).unwrap();
        let mut v = vec![0.0; w.len()];
        for &i in plan.indices() {
            v[i] = -w[i];
        }
        let s = breakdown_speed(&spec, &d, &w, &v).unwrap();
        let g = assemble_metric(&spec, &w, &d).unwrap();
        let q = g.quadratic_form(&v).unwrap();
        assert!((s - q).abs() <= 1e-10 * q.max(1.0));
        assert_eq!(breakdown_speed(&spec, &d, &w, &vec![0.0; w.len()]).unwrap(), 0.0);
        let v2: Vec<f64> = v.iter().map(|x| 2.0 * x).collect();
        assert!((breakdown_speed(&spec, &d, &w, &v2).unwrap() - 4.0 * s).abs() <= 1e-12 * s);
    }

    #[test]
    fn acceleration_vanishes_for_linear_networks() {
        let lin = NetworkSpec::new(vec![3, 2], Activation::Identity, OutputMode::Identity).unwrap();
        let d = synth_gaussians(2, 3, 4, 1.0, 1).unwrap();
        let w = FlatWeights::init(&lin, 2);
        let v = random_unit(lin.n_weights(), 3);
        assert!(breakdown_acceleration(&lin, &d, &w, &v, None).unwrap().abs() <= 1e-8);
    }

    #[test]
    fn acceleration_converges_as_step_shrinks() {
        let (spec, w) = tanh_net(&[2, 5, 3], 13);
        let d = synth_gaussians(3, 2, 5, 2.0, 3).unwrap();
        let v = random_unit(spec.n_weights(), 9);
        let a: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&h| breakdown_acceleration(&spec, &d, &w, &v, Some(h)).unwrap())
            .collect();
        // O(h²): each tenfold reduction shrinks the gap roughly a hundredfold
        let d1 = (a[0] - a[1]).abs();
        let d2 = (a[1] - a[2]).abs();
        assert!(d2 <= 0.05 * d1 + 1e-9 * a[2].abs().max(1.0), "{a:?}");
        assert!(breakdown_acceleration(&spec, &d, &w, &v, Some(0.0)).is_err());
    }

    #[test]
    fn constant_path_trace() {
        let (spec, w) = tanh_net(&[2, 4, 3], 1);
        let d = synth_gaussians(3, 2, 4, 3.0, 1).unwrap();
        let pts = vec![w.clone(); 4];
        let tr = trace_path(
            &spec,
            &d,
            &d,
            &pts,
            &uniform_times(4),
            PathKind::NaiveLinear,
            &TraceOptions::default(),
        )
        .unwrap();
        let acc0 = tr.samples[0].accuracy;
        assert!(tr.samples.iter().all(|s| s.accuracy == acc0 && s.speed == 0.0));
    }

    #[test]
    fn naive_trace_endpoint_matches_masked_network() {
        let (spec, w) = tanh_net(&[2, 6, 3], 5);
        let d = synth_gaussians(3, 2, 10, 3.0, 4).unwrap();
        let plan = node_deletion_plan(&spec, 1, &[0, 1, 2, 3]).unwrap();
        let pts = naive_linear_path(&w, &plan, 6).unwrap();
        let tr = trace_path(
            &spec,
            &d,
            &d,
            &pts,
            &uniform_times(6),
            PathKind::NaiveLinear,
            &TraceOptions::default(),
        )
        .unwrap();
        let masked = evaluate(&spec, &apply_mask(&w, &plan).unwrap(), &d).unwrap();
        assert_eq!(tr.final_accuracy(), masked.accuracy);
        assert_eq!(tr.samples[0].t, 0.0);
        assert_eq!(tr.final_sample().t, 1.0);
        assert!(tr.samples.iter().all(|s| s.speed >= -1e-12));
    }

    #[test]
    fn trace_rejects_bad_times() {
        let (spec, w) = tanh_net(&[2, 3, 2], 1);
        let d = synth_gaussians(2, 2, 3, 1.0, 1).unwrap();
        let pts = vec![w.clone(), w];
        let r = trace_path(
            &spec,
            &d,
            &d,
            &pts,
            &[0.0, 0.0],
            PathKind::Geodesic,
            &TraceOptions::default(),
        );
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    fn synthetic_trace(acc: &[f64], accel: &[f64]) -> PathTrace {
        let t = uniform_times(acc.len());
        PathTrace {
            kind: PathKind::NaiveLinear,
            samples: acc
                .iter()
                .zip(accel)
                .zip(t)
                .map(|((&a, &c), t)| PathSample {
                    t,
                    w: FlatWeights::zeros(1),
                    loss: 0.0,
                    accuracy: a,
                    speed: 0.0,
                    acceleration: c,
                    work: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn decline_window_and_peak() {
        let tr = synthetic_trace(&[1.0, 1.0, 0.95, 0.5, 0.4, 0.35], &[0.0, 0.1, 0.5, -2.0, 0.3, 0.0]);
        assert_eq!(steepest_decline_window(&tr, 0.25), Some((0.4, 0.6)));
        assert_eq!(tr.peak_acceleration(), (2.0, 0.6));
        let flat = synthetic_trace(&[0.5, 0.6], &[0.0, 0.0]);
        assert_eq!(steepest_decline_window(&flat, 0.25), None);
        // two equally steep drops far apart: the window spans both once needed
        let two = synthetic_trace(&[1.0, 0.7, 0.7, 0.7, 0.4], &[0.0; 5]);
        assert_eq!(steepest_decline_window(&two, 0.25), Some((0.0, 0.25)));
        assert_eq!(steepest_decline_window(&two, 0.75), Some((0.0, 1.0)));
    }
}
