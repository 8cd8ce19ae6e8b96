//! Dense row-major f64 tensors and the small amount of plain linear algebra
//! the rest of the crate builds on.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

/// Dense tensor of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} holds {} elements but {} values were given",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v], requires_grad: false }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { shape: vec![r, c], data, requires_grad: false }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    /// Standard-normal entries scaled by `std`, drawn from the given stream.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut SeededRng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, data, requires_grad: false }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry; 0.0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data: out, requires_grad: false }
    }
}

/// C = A·B for 2-d tensors. Loops run in i-k-j order so the inner loop walks
/// both operands contiguously.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul {}x{} by {}x{}",
            m, ka, kb, n
        )));
    }
    let mut out = vec![0.0; m * n];
    matmul_into(a.data(), b.data(), m, ka, n, &mut out);
    Ok(Tensor { shape: vec![m, n], data: out, requires_grad: false })
}

pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// y = M·x for an m×n matrix and an n-vector.
pub fn matvec(m: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if m.cols() != x.len() {
        return Err(Error::ShapeMismatch(format!(
            "matvec {}x{} by vector of length {}",
            m.rows(),
            m.cols(),
            x.len()
        )));
    }
    Ok((0..m.rows()).map(|i| dot(m.row(i), x)).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Orthonormalizes the rows of an r×d matrix via modified Gram-Schmidt with a
/// second re-orthogonalization pass. The row span is preserved.
pub fn orthonormalize(m: &Tensor) -> Result<Tensor> {
    let (r, d) = (m.rows(), m.cols());
    if r > d {
        return Err(Error::InvalidArgument(format!(
            "cannot orthonormalize {} rows in dimension {}",
            r, d
        )));
    }
    let mut q = m.clone();
    q.requires_grad = false;
    for _pass in 0..2 {
        for i in 0..r {
            for j in 0..i {
                let proj = dot(q.row(i), q.row(j));
                let (head, tail) = q.data.split_at_mut(i * d);
                let qi = &mut tail[..d];
                let qj = &head[j * d..(j + 1) * d];
                for (x, y) in qi.iter_mut().zip(qj) {
                    *x -= proj * y;
                }
            }
            let norm = q.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-8 {
                return Err(Error::Numerical(format!(
                    "row {} is linearly dependent on earlier rows (residual norm {:.3e})",
                    i, norm
                )));
            }
            for v in &mut q.data[i * d..(i + 1) * d] {
                *v /= norm;
            }
        }
    }
    Ok(q)
}

/// Largest deviation of M·Mᵀ from the identity, used to audit orthonormality.
pub fn gram_identity_deviation(m: &Tensor) -> f64 {
    let r = m.rows();
    let mut worst: f64 = 0.0;
    for i in 0..r {
        for j in 0..r {
            let g = dot(m.row(i), m.row(j));
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g - target).abs());
        }
    }
    worst
}

/// Largest singular value of an m×n matrix, via power iteration on the Gram
/// matrix of the smaller side.
pub fn spectral_norm(m: &Tensor) -> Result<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument("spectral norm of an empty matrix".into()));
    }
    // B = MᵀM (n×n) or MMᵀ (m×m), whichever is smaller.
    let gram = if cols <= rows {
        let mut g = vec![0.0; cols * cols];
        for i in 0..rows {
            let row = m.row(i);
            for a in 0..cols {
                if row[a] == 0.0 {
                    continue;
                }
                for b in 0..cols {
                    g[a * cols + b] += row[a] * row[b];
                }
            }
        }
        Tensor { shape: vec![cols, cols], data: g, requires_grad: false }
    } else {
        let mut g = vec![0.0; rows * rows];
        for a in 0..rows {
            for b in 0..rows {
                g[a * rows + b] = dot(m.row(a), m.row(b));
            }
        }
        Tensor { shape: vec![rows, rows], data: g, requires_grad: false }
    };
    let lambda = dominant_eigenvalue(&gram)?;
    Ok(lambda.max(0.0).sqrt())
}

/// Dominant eigenvalue of a symmetric PSD matrix by power iteration with a
/// deterministic start and Rayleigh-quotient convergence test.
pub(crate) fn dominant_eigenvalue(b: &Tensor) -> Result<f64> {
    let n = b.rows();
    let scale = b.max_abs();
    if scale == 0.0 {
        return Ok(0.0);
    }
    let mut best = 0.0f64;
    // A couple of deterministic starts guards against a start vector that is
    // orthogonal to the dominant eigenspace.
    for start in 0..3u64 {
        let mut v: Vec<f64> = (0..n)
            .map(|i| 1.0 + ((i as u64 + 1) * (start * 7 + 3)) as f64 / (n as f64 + 1.0))
            .collect();
        normalize(&mut v);
        let mut lambda = 0.0f64;
        for _ in 0..20_000 {
            let mut w = matvec(b, &v)?;
            let next = dot(&v, &w);
            let wn = normalize(&mut w);
            if wn == 0.0 {
                lambda = 0.0;
                break;
            }
            v = w;
            if (next - lambda).abs() <= 1e-14 * scale.max(1.0) {
                lambda = next;
                break;
            }
            lambda = next;
        }
        best = best.max(lambda);
    }
    Ok(best)
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}
