//! Dense symmetric linear algebra.
//!
//! Everything here is single-threaded and runs in a fixed operation order, so
//! the same input always produces bit-identical output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension for which a dense metric is assembled and decomposed.
pub const DENSE_CAP: usize = 5000;

/// Row-major dense symmetric matrix. Writes go through [`SymMatrix::set`],
/// which mirrors across the diagonal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("matrix dimension must be at least 1"));
        }
        Ok(SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        let mut m = Self::zeros(dim)?;
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        Ok(m)
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let mut m = Self::zeros(diag.len())?;
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * diag.len() + i] = v;
        }
        Ok(m)
    }

    /// Builds from row-major data. Only the upper triangle is read; the lower
    /// triangle is overwritten by its mirror.
    pub fn from_upper(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {dim}x{dim} entries, got {}",
                data.len()
            )));
        }
        let mut m = SymMatrix { dim, data };
        for i in 0..dim {
            for j in 0..i {
                m.data[i * dim + j] = m.data[j * dim + i];
            }
        }
        Ok(m)
    }

    /// Builds from row-major data that must already be exactly symmetric.
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != dim * dim {
            return Err(Error::invalid(format!(
                "expected {dim}x{dim} entries, got {}",
                data.len()
            )));
        }
        for i in 0..dim {
            for j in 0..i {
                if data[i * dim + j] != data[j * dim + i] {
                    return Err(Error::invalid(format!("matrix is not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(SymMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.dim);
        (0..self.dim).map(|i| dot(self.row(i), x)).collect()
    }

    /// `xᵀ A x`.
    pub fn quadratic(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-major upper triangle including the diagonal.
    pub fn upper_triangle(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim * (self.dim + 1) / 2);
        for i in 0..self.dim {
            out.extend_from_slice(&self.row(i)[i..]);
        }
        out
    }

    pub fn from_upper_triangle(dim: usize, packed: &[f64]) -> Result<Self> {
        if packed.len() != dim * (dim + 1) / 2 {
            return Err(Error::invalid(format!(
                "packed upper triangle of dim {dim} needs {} values, got {}",
                dim * (dim + 1) / 2,
                packed.len()
            )));
        }
        let mut m = Self::zeros(dim)?;
        let mut it = packed.iter();
        for i in 0..dim {
            for j in i..dim {
                m.set(i, j, *it.next().unwrap());
            }
        }
        Ok(m)
    }
}

/// Eigenpairs sorted by descending eigenvalue. Each eigenvector has unit norm
/// and its largest-magnitude component (lowest index on ties) is positive.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

impl EigenDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim();
        let mut out = vec![0.0; n * n];
        for (lambda, v) in self.values.iter().zip(&self.vectors) {
            for i in 0..n {
                let li = lambda * v[i];
                for j in i..n {
                    out[i * n + j] += li * v[j];
                }
            }
        }
        SymMatrix::from_upper(n, out).expect("dimension checked at decomposition")
    }
}

const MAX_QL_ITERATIONS: usize = 60;

/// Full eigendecomposition by Householder tridiagonalization followed by
/// implicit QL iterations.
pub fn sym_eigen(a: &SymMatrix) -> Result<EigenDecomposition> {
    let n = a.dim();
    if n == 0 {
        return Err(Error::invalid("cannot decompose a 0x0 matrix"));
    }
    if n > DENSE_CAP {
        return Err(Error::Capacity { n, cap: DENSE_CAP });
    }
    if a.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(format!(
            "non-finite entry in {n}x{n} matrix passed to eigensolver"
        )));
    }

    let mut v = a.as_slice().to_vec();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(n, &mut v, &mut d, &mut e);

    // Column storage makes the rotation sweep in the QL loop contiguous.
    let mut cols = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            cols[c * n + r] = v[r * n + c];
        }
    }
    drop(v);
    ql_implicit(n, &mut d, &mut e, &mut cols)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));

    let mut values = Vec::with_capacity(n);
    let mut vectors = Vec::with_capacity(n);
    for &k in &order {
        values.push(d[k]);
        let mut vec = cols[k * n..(k + 1) * n].to_vec();
        canonical_sign(&mut vec);
        vectors.push(vec);
    }
    Ok(EigenDecomposition { values, vectors })
}

fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

// Householder reduction to tridiagonal form. On exit `v` (row-major) holds
// the orthogonal transform, `d` the diagonal, `e[1..]` the subdiagonal.
fn tridiagonalize(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |r: usize, c: usize| r * n + c;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }

            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

// Implicit QL on the tridiagonal (d, e). `cols` holds eigenvector k in
// cols[k*n..(k+1)*n] and accumulates the rotations.
fn ql_implicit(n: usize, d: &mut [f64], e: &mut [f64], cols: &mut [f64]) -> Result<()> {
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let eps = f64::EPSILON;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n - 1 {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }

        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(Error::numerical(format!(
                        "eigensolver did not converge for {n}x{n} matrix \
                         (eigenvalue {l} exceeded {MAX_QL_ITERATIONS} QL iterations)"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);

                    let (lo, hi) = cols.split_at_mut((i + 1) * n);
                    let ci = &mut lo[i * n..];
                    let ci1 = &mut hi[..n];
                    for (a, b) in ci.iter_mut().zip(ci1.iter_mut()) {
                        let hk = *b;
                        *b = s * *a + c * hk;
                        *a = c * *a - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Solves `(A + μI) x = b`. Cholesky first, partial-pivot LU when the shifted
/// matrix is not positive definite. The residual is checked on every call and
/// refined when it exceeds `1e-9·‖b‖`.
pub fn solve_shifted(a: &SymMatrix, mu: f64, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.dim();
    if b.len() != n {
        return Err(Error::invalid(format!(
            "right-hand side has length {}, matrix is {n}x{n}",
            b.len()
        )));
    }
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::invalid(format!("shift must be finite and >= 0, got {mu}")));
    }
    let mut shifted = a.as_slice().to_vec();
    for i in 0..n {
        shifted[i * n + i] += mu;
    }

    let factor = match cholesky(n, &shifted) {
        Some(l) => Factor::Cholesky(l),
        None => Factor::Lu(
            lu(n, &shifted)
                .ok_or_else(|| Error::Singular(format!("A + {mu}·I ({n}x{n}) is singular to working precision")))?,
        ),
    };

    let mut x = factor.solve(n, b);
    let b_norm = norm(b);
    let tol = 1e-9 * b_norm;
    let mut res = residual(n, &shifted, &x, b);
    let mut rounds = 0;
    while norm(&res) > tol && rounds < 3 {
        let dx = factor.solve(n, &res);
        axpy(1.0, &dx, &mut x);
        res = residual(n, &shifted, &x, b);
        rounds += 1;
    }
    let r = norm(&res);
    if !(r <= tol) {
        return Err(Error::numerical(format!(
            "shifted solve residual {r:.3e} exceeds {tol:.3e} for {n}x{n} system (mu = {mu})"
        )));
    }
    Ok(x)
}

enum Factor {
    Cholesky(Vec<f64>),
    Lu((Vec<f64>, Vec<usize>)),
}

impl Factor {
    fn solve(&self, n: usize, b: &[f64]) -> Vec<f64> {
        match self {
            Factor::Cholesky(l) => {
                let mut y = b.to_vec();
                for i in 0..n {
                    let mut s = y[i];
                    for k in 0..i {
                        s -= l[i * n + k] * y[k];
                    }
                    y[i] = s / l[i * n + i];
                }
                for i in (0..n).rev() {
                    let mut s = y[i];
                    for k in (i + 1)..n {
                        s -= l[k * n + i] * y[k];
                    }
                    y[i] = s / l[i * n + i];
                }
                y
            }
            Factor::Lu((lu, piv)) => {
                let mut y: Vec<f64> = piv.iter().map(|&p| b[p]).collect();
                for i in 0..n {
                    for k in 0..i {
                        y[i] -= lu[i * n + k] * y[k];
                    }
                }
                for i in (0..n).rev() {
                    for k in (i + 1)..n {
                        y[i] -= lu[i * n + k] * y[k];
                    }
                    y[i] /= lu[i * n + i];
                }
                y
            }
        }
    }
}

fn cholesky(n: usize, a: &[f64]) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut s = a[j * n + j];
        for k in 0..j {
            s -= l[j * n + k] * l[j * n + k];
        }
        if !(s > 0.0) {
            return None;
        }
        let ljj = s.sqrt();
        l[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / ljj;
        }
    }
    Some(l)
}

fn lu(n: usize, a: &[f64]) -> Option<(Vec<f64>, Vec<usize>)> {
    let mut m = a.to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    let scale = a.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let tiny = scale * f64::EPSILON * n as f64;
    for k in 0..n {
        let mut p = k;
        for i in (k + 1)..n {
            if m[i * n + k].abs() > m[p * n + k].abs() {
                p = i;
            }
        }
        if m[p * n + k].abs() <= tiny {
            return None;
        }
        if p != k {
            for c in 0..n {
                m.swap(k * n + c, p * n + c);
            }
            piv.swap(k, p);
        }
        for i in (k + 1)..n {
            let f = m[i * n + k] / m[k * n + k];
            m[i * n + k] = f;
            for c in (k + 1)..n {
                m[i * n + c] -= f * m[k * n + c];
            }
        }
    }
    Some((m, piv))
}

fn residual(n: usize, a: &[f64], x: &[f64], b: &[f64]) -> Vec<f64> {
    (0..n).map(|i| b[i] - dot(&a[i * n..(i + 1) * n], x)).collect()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y ← y + alpha·x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
