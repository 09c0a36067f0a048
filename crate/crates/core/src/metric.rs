//! The pullback metric `g = mean_x J_xᵀ J_x` on weight space.
//!
//! `duᵀ g du` is the mean squared change of the network output caused by a
//! small weight displacement `du`. Its spectrum separates directions the
//! network is resilient to (small eigenvalues) from vulnerable ones.

use std::io::Write;
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{dot, sym_eigen, EigenDecomposition, SymMatrix, DENSE_CAP};
use crate::network::{jacobian, jvp, FlatWeights, NetworkSpec};

/// Eigenvalue threshold separating resilient from vulnerable directions.
pub const DEFAULT_THRESHOLD: f64 = 1e-3;

/// Jacobians of a batch stacked into one `(B·m) × n` matrix `J`, rows
/// ordered by ascending example id and then by output component. With
/// `A = J/√B` the metric is `g = AᵀA`; [`project`](Self::project) and
/// [`lift`](Self::lift) apply `A` and `Aᵀ`.
#[derive(Debug, Clone)]
pub struct JacobianStack {
    rows: Vec<Vec<f64>>,
    n: usize,
    batch: usize,
    batch_ids: Vec<usize>,
}

/// Batch positions ordered by example id (stable).
fn id_order(batch: &Dataset) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..batch.len()).collect();
    pos.sort_by_key(|&p| batch.ids()[p]);
    pos
}

impl JacobianStack {
    pub fn build(spec: &NetworkSpec, w: &FlatWeights, batch: &Dataset) -> Result<Self> {
        let order = id_order(batch);
        let blocks = order
            .par_iter()
            .map(|&p| jacobian(spec, w, batch.input(p), batch.ids()[p]))
            .collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::with_capacity(blocks.len() * spec.output_dim());
        for b in &blocks {
            for i in 0..b.rows {
                rows.push(b.row(i).to_vec());
            }
        }
        Ok(JacobianStack {
            rows,
            n: spec.n_weights(),
            batch: batch.len(),
            batch_ids: order.iter().map(|&p| batch.ids()[p]).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Unscaled Jacobian rows.
    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn scale(&self) -> f64 {
        1.0 / (self.batch as f64).sqrt()
    }

    pub fn batch_ids(&self) -> &[usize] {
        &self.batch_ids
    }

    /// `g v = Jᵀ (J v) / B`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for r in &self.rows {
            let c = dot(r, v);
            if c != 0.0 {
                crate::linalg::axpy(c, r, &mut out);
            }
        }
        let b = self.batch as f64;
        out.iter_mut().for_each(|x| *x /= b);
        out
    }

    /// `A v`
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let s = self.scale();
        self.rows.iter().map(|r| s * dot(r, v)).collect()
    }

    /// `Aᵀ c`
    pub fn lift(&self, c: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, &ci) in self.rows.iter().zip(c) {
            crate::linalg::axpy(ci, r, &mut out);
        }
        let s = self.scale();
        out.iter_mut().for_each(|x| *x *= s);
        out
    }

    /// The small Gram matrix `A Aᵀ`, which shares the nonzero spectrum of `g`.
    pub fn gram(&self) -> Result<SymMatrix> {
        let k = self.rows.len();
        let b = self.batch as f64;
        let mut data = vec![0.0; k * k];
        data.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
            for j in i..k {
                row[j] = dot(&self.rows[i], &self.rows[j]) / b;
            }
        });
        SymMatrix::from_upper(k, data)
    }

    /// Dense `JᵀJ / B`. Row `i` of the result is accumulated over stack rows
    /// in order, independently of how rows are scheduled across threads.
    pub fn to_dense(&self) -> Result<SymMatrix> {
        let n = self.n;
        if n > DENSE_CAP {
            return Err(Error::Capacity { n, cap: DENSE_CAP });
        }
        let mut data = vec![0.0; n * n];
        data.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for r in &self.rows {
                let a = r[i];
                if a == 0.0 {
                    continue;
                }
                for j in i..n {
                    row[j] += a * r[j];
                }
            }
        });
        let b = self.batch as f64;
        data.iter_mut().for_each(|v| *v /= b);
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite metric entry"));
        }
        SymMatrix::from_upper(n, data)
    }
}

#[derive(Debug, Clone)]
pub struct MetricTensor {
    g: SymMatrix,
    base_point: FlatWeights,
    batch_ids: Vec<usize>,
    spec: NetworkSpec,
}

/// Dense metric at `w` averaged over `batch`.
pub fn assemble_metric(spec: &NetworkSpec, w: &FlatWeights, batch: &Dataset) -> Result<MetricTensor> {
    let n = spec.n_weights();
    if n > DENSE_CAP {
        return Err(Error::Capacity { n, cap: DENSE_CAP });
    }
    let stack = JacobianStack::build(spec, w, batch)?;
    Ok(MetricTensor {
        g: stack.to_dense()?,
        base_point: w.clone(),
        batch_ids: stack.batch_ids.clone(),
        spec: spec.clone(),
    })
}

impl MetricTensor {
    /// Wraps an explicit matrix, e.g. for analytic tests.
    pub fn from_matrix(g: SymMatrix, spec: NetworkSpec, base_point: FlatWeights) -> Result<Self> {
        if g.dim() != base_point.len() {
            return Err(Error::invalid("metric dimension does not match the base point"));
        }
        Ok(MetricTensor {
            g,
            base_point,
            batch_ids: Vec::new(),
            spec,
        })
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.g
    }

    pub fn dim(&self) -> usize {
        self.g.dim()
    }

    pub fn base_point(&self) -> &FlatWeights {
        &self.base_point
    }

    pub fn batch_ids(&self) -> &[usize] {
        &self.batch_ids
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// `duᵀ g du`
    pub fn quadratic_form(&self, du: &[f64]) -> Result<f64> {
        if du.len() != self.dim() {
            return Err(Error::invalid(format!(
                "direction has {} entries, metric is {}x{}",
                du.len(),
                self.dim(),
                self.dim()
            )));
        }
        Ok(self.g.quadratic(du))
    }

    pub fn spectrum(&self, threshold: f64) -> Result<Spectrum> {
        Spectrum::from_matrix(&self.g, threshold)
    }

    /// Row-major upper triangle as little-endian f64.
    pub fn write_blob(&self, path: &Path) -> Result<()> {
        let packed = self.g.upper_triangle();
        let mut bytes = Vec::with_capacity(8 * packed.len());
        for v in packed {
            bytes.write_f64::<LittleEndian>(v)?;
        }
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// `mean_x ‖J_x du‖²` by forward-mode directional derivatives; never forms
/// `g`, so it works at any `n`.
pub fn quadratic_form_matfree(spec: &NetworkSpec, w: &FlatWeights, batch: &Dataset, du: &[f64]) -> Result<f64> {
    if du.len() != spec.n_weights() {
        return Err(Error::invalid(format!(
            "direction has {} entries, network has {} weights",
            du.len(),
            spec.n_weights()
        )));
    }
    let order = id_order(batch);
    let terms = order
        .par_iter()
        .map(|&p| {
            let jd = jvp(spec, w, batch.input(p), du)?;
            Ok(dot(&jd, &jd))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(terms.iter().sum::<f64>() / batch.len() as f64)
}

/// Convention for the per-coordinate variance of Gaussian perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GaussianConvention {
    /// Variance `σ²/n`, so that `E‖du‖² = σ²`.
    #[default]
    VarianceSigmaSqOverN,
    /// Variance `σ/n`, the literal form of the expectation `(σ/n)·Σλ`.
    VarianceSigmaOverN,
}

impl GaussianConvention {
    pub fn coordinate_variance(self, sigma: f64, n: usize) -> f64 {
        match self {
            GaussianConvention::VarianceSigmaSqOverN => sigma * sigma / n as f64,
            GaussianConvention::VarianceSigmaOverN => sigma / n as f64,
        }
    }
}

/// Expected `duᵀ g du` for `du` with i.i.d. zero-mean Gaussian coordinates:
/// `variance · trace(g)`.
pub fn gaussian_expectation(gt: &MetricTensor, sigma: f64) -> Result<f64> {
    gaussian_expectation_with(gt, sigma, GaussianConvention::default())
}

pub fn gaussian_expectation_with(gt: &MetricTensor, sigma: f64, convention: GaussianConvention) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::invalid(format!("sigma must be > 0, got {sigma}")));
    }
    Ok(convention.coordinate_variance(sigma, gt.dim()) * gt.matrix().trace())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    decomposition: EigenDecomposition,
    threshold: f64,
    vulnerable_count: usize,
    resilient_count: usize,
    rho: f64,
}

impl Spectrum {
    /// Eigenvalues `>= threshold` count as vulnerable.
    pub fn from_matrix(g: &SymMatrix, threshold: f64) -> Result<Self> {
        let decomposition = sym_eigen(g)?;
        Ok(Self::from_decomposition(decomposition, threshold))
    }

    pub fn from_decomposition(decomposition: EigenDecomposition, threshold: f64) -> Self {
        let vulnerable_count = decomposition.values.iter().filter(|&&l| l >= threshold).count();
        let n = decomposition.dim();
        Spectrum {
            threshold,
            vulnerable_count,
            resilient_count: n - vulnerable_count,
            rho: vulnerable_count as f64 / n as f64,
            decomposition,
        }
    }

    pub fn decomposition(&self) -> &EigenDecomposition {
        &self.decomposition
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.decomposition.values
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn vulnerable_count(&self) -> usize {
        self.vulnerable_count
    }

    pub fn resilient_count(&self) -> usize {
        self.resilient_count
    }

    /// Fraction of vulnerable directions.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn lambda_max(&self) -> f64 {
        self.decomposition.values[0]
    }

    pub fn trace(&self) -> f64 {
        self.decomposition.values.iter().sum()
    }

    /// `Σλ / (n λ₁)`, the spectral mass relative to a flat spectrum at `λ₁`.
    pub fn rho_lambda(&self) -> f64 {
        let l1 = self.lambda_max();
        if l1 <= 0.0 {
            return 0.0;
        }
        self.trace() / (self.decomposition.dim() as f64 * l1)
    }

    /// Coordinates `cᵢ = ⟨du, vᵢ⟩` of `du` in the eigenbasis.
    pub fn coefficients(&self, du: &[f64]) -> Vec<f64> {
        self.decomposition.vectors.iter().map(|v| dot(v, du)).collect()
    }

    /// `Σ cᵢ² λᵢ`
    pub fn quadratic_form(&self, du: &[f64]) -> f64 {
        self.coefficients(du)
            .iter()
            .zip(&self.decomposition.values)
            .map(|(c, l)| c * c * l)
            .sum()
    }

    /// `index,eigenvalue` under a single header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "index,eigenvalue")?;
        for (i, l) in self.decomposition.values.iter().enumerate() {
            writeln!(out, "{i},{l:?}")?;
        }
        out.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth_gaussians;
    use crate::network::{forward, Activation, OutputMode};
    use crate::testutil::{random_unit, tanh_net};

    fn linear_1_1() -> (NetworkSpec, FlatWeights) {
        let spec = NetworkSpec::new(vec![1, 1], Activation::Identity, OutputMode::Identity).unwrap();
        (spec, FlatWeights::new(vec![0.3, -0.8]))
    }

    #[test]
    fn affine_single_example_metric() {
        let (spec, w) = linear_1_1();
        let d = Dataset::new(vec![vec![2.0]], vec![0], 1, "one").unwrap();
        let g = assemble_metric(&spec, &w, &d).unwrap();
        assert_eq!(g.matrix().as_slice(), &[4.0, 2.0, 2.0, 1.0]);
        let rep = Dataset::new(vec![vec![2.0]; 5], vec![0; 5], 1, "rep").unwrap();
        let g5 = assemble_metric(&spec, &w, &rep).unwrap();
        assert_eq!(g5.matrix(), g.matrix());
    }

    #[test]
    fn matches_naive_accumulation() {
        let (spec, w) = tanh_net(&[2, 3, 2], 5);
        let d = synth_gaussians(2, 2, 8, 1.5, 3).unwrap();
        let g = assemble_metric(&spec, &w, &d).unwrap();
        let n = spec.n_weights();
        // oracle: (1/B) Σ_x Σ_k J[k][i] J[k][j] over a separate loop
        let mut naive = vec![0.0; n * n];
        for x in d.inputs() {
            let j = crate::network::jacobian(&spec, &w, x, 0).unwrap();
            for k in 0..j.rows {
                for a in 0..n {
                    for b in 0..n {
                        naive[a * n + b] += j.get(k, a) * j.get(k, b);
                    }
                }
            }
        }
        for v in &mut naive {
            *v /= d.len() as f64;
        }
        let diff = g
            .matrix()
            .as_slice()
            .iter()
            .zip(&naive)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff <= 1e-12, "{diff}");
    }

    #[test]
    fn batch_order_does_not_matter() {
        let (spec, w) = tanh_net(&[2, 4, 3], 8);
        let d = synth_gaussians(3, 2, 5, 2.0, 1).unwrap();
        let shuffled = d.select(&[7, 3, 14, 0, 1, 9, 2, 4, 5, 6, 8, 10, 11, 12, 13]).unwrap();
        let a = assemble_metric(&spec, &w, &d).unwrap();
        let b = assemble_metric(&spec, &w, &shuffled).unwrap();
        assert_eq!(a.matrix(), b.matrix());
        assert_eq!(a.batch_ids(), b.batch_ids());
    }

    #[test]
    fn quadratic_form_examples() {
        let (spec, w) = tanh_net(&[2, 3, 2], 1);
        let d = synth_gaussians(2, 2, 4, 1.0, 1).unwrap();
        let g = assemble_metric(&spec, &w, &d).unwrap();
        assert_eq!(g.quadratic_form(&vec![0.0; spec.n_weights()]).unwrap(), 0.0);
        assert!(g.quadratic_form(&[1.0]).is_err());
        let s = g.spectrum(DEFAULT_THRESHOLD).unwrap();
        for (l, v) in s.eigenvalues().iter().zip(&s.decomposition().vectors).take(4) {
            assert!((g.quadratic_form(v).unwrap() - l).abs() <= 1e-9);
        }
    }

    #[test]
    fn quadratic_form_matches_finite_difference_distance() {
        let (spec, w) = tanh_net(&[2, 5, 3], 21);
        let d = synth_gaussians(3, 2, 6, 2.0, 9).unwrap();
        let g = assemble_metric(&spec, &w, &d).unwrap();
        let eps = 1e-4;
        for s in 0..10 {
            let du = random_unit(spec.n_weights(), 100 + s);
            let q = g.quadratic_form(&du).unwrap();
            let w2 = w.offset(eps, &du);
            let fd: f64 = d
                .inputs()
                .iter()
                .map(|x| {
                    let a = forward(&spec, &w, x).unwrap();
                    let b = forward(&spec, &w2, x).unwrap();
                    a.iter().zip(&b).map(|(p, q)| (q - p) * (q - p)).sum::<f64>()
                })
                .sum::<f64>()
                / d.len() as f64
                / (eps * eps);
            assert!((q - fd).abs() <= 1e-3 * q.max(1e-8), "{q} vs {fd}");
        }
    }

    #[test]
    fn matfree_agrees_with_dense() {
        // 200-weight net: 9-18-1 has (10·18)+(19·1) = 199; use 6-20-4 -> 140+84 = 224
        let (spec, w) = tanh_net(&[6, 20, 4], 2);
        assert!(spec.n_weights() >= 200);
        let d = synth_gaussians(4, 6, 3, 1.0, 2).unwrap();
        let g = assemble_metric(&spec, &w, &d).unwrap();
        let du = random_unit(spec.n_weights(), 7);
        let a = g.quadratic_form(&du).unwrap();
        let b = quadratic_form_matfree(&spec, &w, &d, &du).unwrap();
        assert!((a - b).abs() <= 1e-10 * a.max(1.0));
        assert_eq!(
            quadratic_form_matfree(&spec, &w, &d, &vec![0.0; spec.n_weights()]).unwrap(),
            0.0
        );
        let du2: Vec<f64> = du.iter().map(|v| 2.0 * v).collect();
        let c = quadratic_form_matfree(&spec, &w, &d, &du2).unwrap();
        assert!((c - 4.0 * b).abs() <= 1e-12 * c);
    }

    #[test]
    fn stack_operations_agree_with_dense() {
        let (spec, w) = tanh_net(&[3, 4, 2], 4);
        let d = synth_gaussians(2, 3, 3, 1.0, 4).unwrap();
        let stack = JacobianStack::build(&spec, &w, &d).unwrap();
        let dense = stack.to_dense().unwrap();
        let v = random_unit(spec.n_weights(), 1);
        let a = stack.apply(&v);
        let b = dense.mul_vec(&v);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-13);
        }
        let gram = stack.gram().unwrap();
        let eg = crate::linalg::sym_eigen(&gram).unwrap();
        let ed = crate::linalg::sym_eigen(&dense).unwrap();
        for i in 0..gram.dim().min(dense.dim()) {
            assert!((eg.values[i] - ed.values[i]).abs() <= 1e-12 * ed.values[0].max(1.0));
        }
    }

    #[test]
    fn spectrum_thresholds() {
        let s = Spectrum::from_matrix(&SymMatrix::identity(4).unwrap(), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(s.rho(), 1.0);
        let s = Spectrum::from_matrix(&SymMatrix::zeros(4).unwrap(), DEFAULT_THRESHOLD).unwrap();
        assert_eq!(s.rho(), 0.0);
        let s = Spectrum::from_matrix(&SymMatrix::from_diagonal(&[1e-3, 5e-4, 2.0, 0.0]).unwrap(), 1e-3).unwrap();
        assert_eq!(s.vulnerable_count(), 2);
        assert_eq!(s.resilient_count(), 2);
        assert_eq!(s.rho(), 0.5);
    }

    #[test]
    fn gaussian_expectation_examples() {
        let (spec, _) = tanh_net(&[2, 2, 1], 0);
        let n = spec.n_weights();
        let eye =
            MetricTensor::from_matrix(SymMatrix::identity(n).unwrap(), spec.clone(), FlatWeights::zeros(n)).unwrap();
        assert!((gaussian_expectation(&eye, 1.0).unwrap() - 1.0).abs() < 1e-15);
        let zero = MetricTensor::from_matrix(SymMatrix::zeros(n).unwrap(), spec, FlatWeights::zeros(n)).unwrap();
        assert_eq!(gaussian_expectation(&zero, 0.3).unwrap(), 0.0);
        assert!(gaussian_expectation(&eye, 0.0).is_err());
        assert!(
            (gaussian_expectation_with(&eye, 0.25, GaussianConvention::VarianceSigmaOverN).unwrap() - 0.25).abs()
                < 1e-15
        );
    }

    #[test]
    fn capacity_error_above_cap() {
        let spec = NetworkSpec::new(vec![100, 60, 10], Activation::Tanh, OutputMode::Softmax).unwrap();
        assert!(spec.n_weights() > DENSE_CAP);
        let w = FlatWeights::zeros(spec.n_weights());
        let d = Dataset::new(vec![vec![0.0; 100]], vec![0], 10, "z").unwrap();
        assert!(matches!(assemble_metric(&spec, &w, &d), Err(Error::Capacity { .. })));
        // matrix-free still works
        let du = vec![1e-3; spec.n_weights()];
        assert!(quadratic_form_matfree(&spec, &w, &d, &du).unwrap() >= 0.0);
    }
}
