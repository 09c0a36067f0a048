//! Damage plans and weight perturbations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::norm;
use crate::metric::Spectrum;
use crate::network::{FlatWeights, NetworkSpec};
use crate::training::evaluate;

/// A set of flat-weight indices forced to zero. Together with a weight count
/// it defines the damage hyperplane `{w : w_i = 0 for i in indices}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DamagePlan {
    indices: Vec<usize>,
    description: String,
}

impl DamagePlan {
    pub fn empty() -> Self {
        DamagePlan {
            indices: Vec::new(),
            description: "none".into(),
        }
    }

    /// Sorts and deduplicates `indices`.
    pub fn new(mut indices: Vec<usize>, description: impl Into<String>) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        Ok(DamagePlan {
            indices,
            description: description.into(),
        })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn description(&self) -> &str {
        &self.description
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.indices.binary_search(&i).is_ok()
    }

    /// Checks the sorted-unique invariant and the index range.
    pub fn validate(&self, n: usize) -> Result<()> {
        if !self.indices.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::invalid("damage plan indices must be strictly increasing"));
        }
        if let Some(&last) = self.indices.last() {
            if last >= n {
                return Err(Error::invalid(format!(
                    "damage index {last} out of range for {n} weights"
                )));
            }
        }
        Ok(())
    }

    pub fn union(&self, other: &DamagePlan) -> DamagePlan {
        let mut idx = self.indices.clone();
        idx.extend_from_slice(&other.indices);
        DamagePlan::new(idx, format!("{} + {}", self.description, other.description)).expect("union of valid plans")
    }

    /// Indices in `self` but not in `other`.
    pub fn difference(&self, other: &DamagePlan) -> DamagePlan {
        DamagePlan {
            indices: self.indices.iter().copied().filter(|i| !other.contains(*i)).collect(),
            description: format!("{} - {}", self.description, other.description),
        }
    }

    /// `true` on damaged coordinates.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for &i in &self.indices {
            m[i] = true;
        }
        m
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: DamagePlan = serde_json::from_str(text).map_err(|e| Error::Format(format!("damage plan: {e}")))?;
        // re-normalize so hand-written files need not be sorted
        DamagePlan::new(raw.indices, raw.description)
    }
}

/// Plan zeroing every incoming weight, the bias, and every outgoing weight of
/// the given units in hidden layer `layer` (an index into `layer_sizes`).
pub fn node_deletion_plan(spec: &NetworkSpec, layer: usize, nodes: &[usize]) -> Result<DamagePlan> {
    let sizes = spec.layer_sizes();
    if layer == 0 || layer + 1 >= sizes.len() {
        return Err(Error::invalid(format!(
            "layer {layer} is not a hidden layer (hidden layers are 1..={})",
            sizes.len().saturating_sub(2)
        )));
    }
    let width = sizes[layer];
    let mut idx = Vec::new();
    for &node in nodes {
        if node >= width {
            return Err(Error::invalid(format!(
                "node {node} out of range for hidden layer {layer} of width {width}"
            )));
        }
        // incoming: weight layer `layer - 1`, row `node`
        for c in 0..sizes[layer - 1] {
            idx.push(spec.weight_index(layer - 1, node, c));
        }
        idx.push(spec.bias_index(layer - 1, node));
        // outgoing: weight layer `layer`, column `node`
        for r in 0..sizes[layer + 1] {
            idx.push(spec.weight_index(layer, r, node));
        }
    }
    DamagePlan::new(idx, describe_nodes(layer, nodes))
}

/// Splits a plan into deletion groups: one group per hidden node whose whole
/// deletion plan is contained in `plan` (in layer then node order), then one
/// group with any remaining indices.
pub fn node_groups(spec: &NetworkSpec, plan: &DamagePlan) -> Result<Vec<DamagePlan>> {
    plan.validate(spec.n_weights())?;
    let sizes = spec.layer_sizes();
    let mut groups = Vec::new();
    let mut covered = DamagePlan::empty();
    for layer in 1..sizes.len().saturating_sub(1) {
        for node in 0..sizes[layer] {
            let p = node_deletion_plan(spec, layer, &[node])?;
            if p.indices().iter().all(|&i| plan.contains(i)) {
                let fresh = p.difference(&covered);
                if !fresh.is_empty() {
                    covered = covered.union(&fresh);
                    groups.push(DamagePlan::new(fresh.indices, p.description)?);
                }
            }
        }
    }
    let rest = plan.difference(&covered);
    if !rest.is_empty() {
        groups.push(DamagePlan::new(rest.indices, "remaining coordinates")?);
    }
    Ok(groups)
}

fn describe_nodes(layer: usize, nodes: &[usize]) -> String {
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut parts = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let start = sorted[i];
        let mut end = start;
        while i + 1 < sorted.len() && sorted[i + 1] == end + 1 {
            i += 1;
            end = sorted[i];
        }
        parts.push(if start == end {
            start.to_string()
        } else {
            format!("{start}..{end}")
        });
        i += 1;
    }
    format!("layer{layer} nodes {}", parts.join(","))
}

/// Parses the `layer:nodes` shorthand, e.g. `1:0-7` or `1:0,3,5-6`. Several
/// layers may be joined with `;`.
pub fn parse_plan_shorthand(spec: &NetworkSpec, text: &str) -> Result<DamagePlan> {
    let mut plan: Option<DamagePlan> = None;
    for part in text.split(';').filter(|p| !p.trim().is_empty()) {
        let (layer, nodes) = part
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("plan shorthand '{part}' must look like layer:nodes")))?;
        let layer: usize = layer
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("bad layer index '{layer}'")))?;
        let mut list = Vec::new();
        for tok in nodes.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some((a, b)) = tok.split_once('-') {
                let a: usize = a.parse().map_err(|_| Error::invalid(format!("bad node '{tok}'")))?;
                let b: usize = b.parse().map_err(|_| Error::invalid(format!("bad node '{tok}'")))?;
                if b < a {
                    return Err(Error::invalid(format!("empty node range '{tok}'")));
                }
                list.extend(a..=b);
            } else {
                list.push(tok.parse().map_err(|_| Error::invalid(format!("bad node '{tok}'")))?);
            }
        }
        let p = node_deletion_plan(spec, layer, &list)?;
        plan = Some(match plan {
            None => p,
            Some(prev) => {
                let desc = format!("{}; {}", prev.description, p.description);
                let mut u = prev.union(&p);
                u.description = desc;
                u
            }
        });
    }
    Ok(plan.unwrap_or_else(DamagePlan::empty))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationKind {
    RandomBall,
    Adversarial,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub du: Vec<f64>,
    pub norm: f64,
    pub kind: PerturbationKind,
}

impl Perturbation {
    pub fn custom(du: Vec<f64>) -> Self {
        let norm = norm(&du);
        Perturbation {
            du,
            norm,
            kind: PerturbationKind::Custom,
        }
    }

    pub fn negated(&self) -> Self {
        Perturbation {
            du: self.du.iter().map(|v| -v).collect(),
            norm: self.norm,
            kind: self.kind,
        }
    }
}

/// Uniform direction on the sphere of radius `sigma` (normalized Gaussian draw).
pub fn random_ball_perturbation(n: usize, sigma: f64, seed: u64) -> Result<Perturbation> {
    if n == 0 {
        return Err(Error::invalid("perturbation dimension must be at least 1"));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut du: Vec<f64> = loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        if norm(&v) > 0.0 {
            break v;
        }
    };
    let scale = sigma / norm(&du);
    du.iter_mut().for_each(|v| *v *= scale);
    Ok(Perturbation {
        du,
        norm: sigma,
        kind: PerturbationKind::RandomBall,
    })
}

/// `σ·u` with `u` the normalized `Σ_{i<k} √λᵢ vᵢ` over the `top_k` leading
/// eigenvectors. For `top_k = 1` this is exactly `σ·v₁`.
pub fn adversarial_perturbation(s: &Spectrum, sigma: f64, top_k: usize) -> Result<Perturbation> {
    if top_k == 0 {
        return Err(Error::invalid("top_k must be at least 1"));
    }
    let dec = s.decomposition();
    let k = top_k.min(dec.dim());
    if dec.values[0] <= 0.0 {
        return Err(Error::Degenerate(
            "metric spectrum is identically zero; no vulnerable direction exists".into(),
        ));
    }
    let n = dec.dim();
    let mut u = if k == 1 {
        dec.vectors[0].clone()
    } else {
        let mut acc = vec![0.0; n];
        for i in 0..k {
            let wgt = dec.values[i].max(0.0).sqrt();
            crate::linalg::axpy(wgt, &dec.vectors[i], &mut acc);
        }
        let len = norm(&acc);
        acc.iter_mut().for_each(|v| *v /= len);
        acc
    };
    u.iter_mut().for_each(|v| *v *= sigma);
    Ok(Perturbation {
        norm: sigma.abs(),
        du: u,
        kind: PerturbationKind::Adversarial,
    })
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub perturbation: Perturbation,
    /// +1 or -1: which sign of the adversarial direction was worse.
    pub sign: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Evaluates both signs of an adversarial direction and keeps the one with
/// lower accuracy (then higher loss).
pub fn worst_sign_attack(
    spec: &NetworkSpec,
    w: &FlatWeights,
    p: &Perturbation,
    eval: &Dataset,
) -> Result<AttackOutcome> {
    let plus = evaluate(spec, &w.offset(1.0, &p.du), eval)?;
    let minus = evaluate(spec, &w.offset(-1.0, &p.du), eval)?;
    let take_minus = minus.accuracy < plus.accuracy || (minus.accuracy == plus.accuracy && minus.loss > plus.loss);
    Ok(if take_minus {
        AttackOutcome {
            perturbation: p.negated(),
            sign: -1.0,
            accuracy: minus.accuracy,
            loss: minus.loss,
        }
    } else {
        AttackOutcome {
            perturbation: p.clone(),
            sign: 1.0,
            accuracy: plus.accuracy,
            loss: plus.loss,
        }
    })
}
