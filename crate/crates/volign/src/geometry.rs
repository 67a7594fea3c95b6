//! Gram matrices, parallelotope volumes, kernel functions, and kernelized
//! volumes.
//!
//! The alignment objective measures how well a set of embeddings agrees by
//! the volume of the parallelotope they span: `Vol = sqrt(det(G))` with
//! `G_ij = <v_i, v_j>`, and its kernelized extension `Vol_H = sqrt(det(K))`
//! with `K_ij = kappa(v_i, v_j)`. Smaller volume means closer alignment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;

/// Maximum number of vectors accepted by the volume routines.
pub const MAX_VECTORS: usize = 16;

const SYMMETRY_TOL: f64 = 1e-9;
const ZERO_NORM_TOL: f64 = 1e-15;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("embedding has zero norm")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty vector sequence")]
    EmptySequence,
    #[error("too many vectors: {got} exceeds maximum {max}")]
    TooManyVectors { got: usize, max: usize },
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NonSymmetric(f64),
    #[error("embedding contains a non-finite value")]
    NonFinite,
    #[error("embedding has no components")]
    EmptyEmbedding,
}

/// A fixed-dimension real vector, optionally tagged as unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f64>,
    normalized: bool,
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, GeometryError> {
        if values.is_empty() {
            return Err(GeometryError::EmptyEmbedding);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        Ok(Embedding {
            values,
            normalized: false,
        })
    }

    /// Construct and normalize in one step.
    pub fn unit(values: Vec<f64>) -> Result<Self, GeometryError> {
        Embedding::new(values)?.normalize()
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64, GeometryError> {
        check_dims(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn cosine(&self, other: &Embedding) -> Result<f64, GeometryError> {
        let d = self.dot(other)?;
        let n = self.norm() * other.norm();
        if n < ZERO_NORM_TOL {
            return Err(GeometryError::ZeroVector);
        }
        Ok(d / n)
    }

    /// Rescale to unit L2 norm, preserving direction.
    pub fn normalize(&self) -> Result<Embedding, GeometryError> {
        let n = self.norm();
        if n < ZERO_NORM_TOL {
            return Err(GeometryError::ZeroVector);
        }
        Ok(Embedding {
            values: self.values.iter().map(|v| v / n).collect(),
            normalized: true,
        })
    }
}

fn check_dims(a: &Embedding, b: &Embedding) -> Result<(), GeometryError> {
    if a.dim() != b.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

fn check_sequence(vs: &[Embedding]) -> Result<(), GeometryError> {
    if vs.is_empty() {
        return Err(GeometryError::EmptySequence);
    }
    for v in &vs[1..] {
        check_dims(&vs[0], v)?;
    }
    Ok(())
}

/// Kernel selector for the kernelized volume (linear, polynomial, RBF).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum KernelSpec {
    Linear,
    Polynomial { offset: f64, degree: u32 },
    Rbf { bandwidth: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<(), GeometryError> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Polynomial { offset, degree } => {
                if offset < 0.0 || degree == 0 {
                    Err(GeometryError::NonFinite)
                } else {
                    Ok(())
                }
            }
            KernelSpec::Rbf { bandwidth } => {
                if bandwidth > 0.0 {
                    Ok(())
                } else {
                    Err(GeometryError::NonFinite)
                }
            }
        }
    }
}

impl Default for KernelSpec {
    // Bandwidth 1 on unit-normalized embeddings; configurable everywhere.
    fn default() -> Self {
        KernelSpec::Rbf { bandwidth: 1.0 }
    }
}

/// Symmetric k x k matrix of pairwise (kernel) inner products.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    k: usize,
    entries: Vec<f64>, // row-major
}

impl GramMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, GeometryError> {
        let k = rows.len();
        if k == 0 {
            return Err(GeometryError::EmptySequence);
        }
        let mut entries = Vec::with_capacity(k * k);
        for row in &rows {
            if row.len() != k {
                return Err(GeometryError::DimensionMismatch {
                    expected: k,
                    got: row.len(),
                });
            }
            entries.extend_from_slice(row);
        }
        let m = GramMatrix { k, entries };
        m.check_symmetric()?;
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.k + j]
    }

    fn check_symmetric(&self) -> Result<(), GeometryError> {
        let mut worst = 0.0f64;
        for i in 0..self.k {
            for j in (i + 1)..self.k {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        if worst > SYMMETRY_TOL {
            return Err(GeometryError::NonSymmetric(worst));
        }
        Ok(())
    }

    /// Eigenvalues by cyclic Jacobi rotations. Adequate for k <= 16.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let k = self.k;
        let mut a = self.entries.clone();
        // symmetrize round-off before iterating
        for i in 0..k {
            for j in (i + 1)..k {
                let m = 0.5 * (a[i * k + j] + a[j * k + i]);
                a[i * k + j] = m;
                a[j * k + i] = m;
            }
        }
        for _sweep in 0..64 {
            let mut off = 0.0;
            for i in 0..k {
                for j in (i + 1)..k {
                    off += a[i * k + j] * a[i * k + j];
                }
            }
            if off < 1e-30 {
                break;
            }
            for p in 0..k {
                for q in (p + 1)..k {
                    let apq = a[p * k + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let app = a[p * k + p];
                    let aqq = a[q * k + q];
                    let theta = (aqq - app) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for i in 0..k {
                        let aip = a[i * k + p];
                        let aiq = a[i * k + q];
                        a[i * k + p] = c * aip - s * aiq;
                        a[i * k + q] = s * aip + c * aiq;
                    }
                    for i in 0..k {
                        let api = a[p * k + i];
                        let aqi = a[q * k + i];
                        a[p * k + i] = c * api - s * aqi;
                        a[q * k + i] = s * api + c * aqi;
                    }
                }
            }
        }
        (0..k).map(|i| a[i * k + i]).collect()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    }

    /// Lower-triangular Cholesky factor, or None when the matrix is not
    /// numerically positive definite.
    fn cholesky(&self) -> Option<Vec<f64>> {
        let k = self.k;
        let mut l = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..=i {
                let mut s = self.get(i, j);
                for m in 0..j {
                    s -= l[i * k + m] * l[j * k + m];
                }
                if i == j {
                    if s <= 0.0 {
                        return None;
                    }
                    l[i * k + i] = s.sqrt();
                } else {
                    l[i * k + j] = s / l[j * k + j];
                }
            }
        }
        Some(l)
    }

    /// Inverse via the Cholesky factor; None when not positive definite.
    pub fn inverse_psd(&self) -> Option<GramMatrix> {
        let k = self.k;
        let l = self.cholesky()?;
        // invert L in place (lower triangular)
        let mut linv = vec![0.0; k * k];
        for i in 0..k {
            linv[i * k + i] = 1.0 / l[i * k + i];
            for j in 0..i {
                let mut s = 0.0;
                for m in j..i {
                    s += l[i * k + m] * linv[m * k + j];
                }
                linv[i * k + j] = -s / l[i * k + i];
            }
        }
        // A^{-1} = L^{-T} L^{-1}
        let mut inv = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let mut s = 0.0;
                for m in i.max(j)..k {
                    s += linv[m * k + i] * linv[m * k + j];
                }
                inv[i * k + j] = s;
            }
        }
        Some(GramMatrix { k, entries: inv })
    }
}

/// Unit-normalize an embedding (direction preserved, flag set).
pub fn normalize(e: &Embedding) -> Result<Embedding, GeometryError> {
    e.normalize()
}

/// Gram matrix of pairwise inner products.
pub fn gram(vs: &[Embedding]) -> Result<GramMatrix, GeometryError> {
    check_sequence(vs)?;
    let k = vs.len();
    let mut entries = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let d = vs[i].dot(&vs[j])?;
            entries[i * k + j] = d;
            entries[j * k + i] = d;
        }
    }
    Ok(GramMatrix { k, entries })
}

/// Kernel Gram matrix: entries `kappa(v_i, v_j)`.
pub fn kernel_gram(spec: &KernelSpec, vs: &[Embedding]) -> Result<GramMatrix, GeometryError> {
    check_sequence(vs)?;
    let k = vs.len();
    let mut entries = vec![0.0; k * k];
    for i in 0..k {
        for j in i..k {
            let v = kernel_eval(spec, &vs[i], &vs[j])?;
            entries[i * k + j] = v;
            entries[j * k + i] = v;
        }
    }
    Ok(GramMatrix { k, entries })
}

/// Evaluate the kernel on a pair of embeddings.
pub fn kernel_eval(spec: &KernelSpec, x: &Embedding, z: &Embedding) -> Result<f64, GeometryError> {
    check_dims(x, z)?;
    Ok(kernel_eval_generic(
        spec,
        x.values().iter().copied(),
        z.values().iter().copied(),
    ))
}

fn kernel_eval_generic(
    spec: &KernelSpec,
    x: impl Iterator<Item = f64> + Clone,
    z: impl Iterator<Item = f64> + Clone,
) -> f64 {
    match *spec {
        KernelSpec::Linear => x.zip(z).map(|(a, b)| a * b).sum(),
        KernelSpec::Polynomial { offset, degree } => {
            let d: f64 = x.zip(z).map(|(a, b)| a * b).sum();
            (d + offset).powi(degree as i32)
        }
        KernelSpec::Rbf { bandwidth } => {
            let sq: f64 = x.zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
            (-sq / (2.0 * bandwidth * bandwidth)).exp()
        }
    }
}

/// Generic kernel evaluation usable inside the gradient tape.
pub fn kernel_eval_s<S: Scalar>(spec: &KernelSpec, x: &[S], z: &[S]) -> S {
    let zero = x[0].constant(0.0);
    match *spec {
        KernelSpec::Linear => S::dot(x, z),
        KernelSpec::Polynomial { offset, degree } => {
            (zero.constant(offset) + S::dot(x, z)).powi(degree)
        }
        KernelSpec::Rbf { bandwidth } => {
            (-S::sq_dist(x, z) / zero.constant(2.0 * bandwidth * bandwidth)).exp()
        }
    }
}

/// Kernelized volume of a triplet via the explicit 3x3 determinant
/// expansion, expressed in tape-differentiable scalar ops.
pub fn triplet_kernel_volume_s<S: Scalar>(spec: &KernelSpec, vs: [&[S]; 3]) -> S {
    let k01 = kernel_eval_s(spec, vs[0], vs[1]);
    let k02 = kernel_eval_s(spec, vs[0], vs[2]);
    let k12 = kernel_eval_s(spec, vs[1], vs[2]);
    let k00 = kernel_eval_s(spec, vs[0], vs[0]);
    let k11 = kernel_eval_s(spec, vs[1], vs[1]);
    let k22 = kernel_eval_s(spec, vs[2], vs[2]);
    let det = k00 * (k11 * k22 - k12 * k12) - k01 * (k01 * k22 - k12 * k02)
        + k02 * (k01 * k12 - k11 * k02);
    det.clamp_nonneg().sqrt()
}

/// Determinant of a symmetric PSD matrix: Cholesky product when positive
/// definite, otherwise eigenvalues clamped at zero. Never negative.
pub fn det_psd(m: &GramMatrix) -> Result<f64, GeometryError> {
    m.check_symmetric()?;
    let diag_scale = (0..m.k)
        .map(|i| m.entries[i * m.k + i].abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    if let Some(l) = m.cholesky() {
        let mut det = 1.0;
        let mut near_singular = false;
        for i in 0..m.k {
            let d = l[i * m.k + i];
            // a pivot at round-off scale means the matrix is singular up to
            // noise; defer to the eigenvalue path, which clamps it to zero
            if d * d < 1e-12 * diag_scale {
                near_singular = true;
            }
            det *= d * d;
        }
        if !near_singular {
            return Ok(det);
        }
    }
    // Not numerically positive definite: eigenvalues at round-off scale are
    // noise around an exact zero, so clamp them to zero rather than letting
    // them pollute the product.
    let eigs = m.eigenvalues();
    let scale = eigs.iter().fold(0.0f64, |a, &e| a.max(e.abs())).max(1.0);
    let cutoff = 1e-12 * scale;
    Ok(eigs
        .into_iter()
        .map(|e| if e < cutoff { 0.0 } else { e })
        .product())
}

fn check_count(vs: &[Embedding]) -> Result<(), GeometryError> {
    if vs.len() > MAX_VECTORS {
        return Err(GeometryError::TooManyVectors {
            got: vs.len(),
            max: MAX_VECTORS,
        });
    }
    Ok(())
}

/// Parallelotope volume `sqrt(det(G))`. For a single vector this is its
/// norm; for more vectors than dimensions it vanishes.
pub fn volume(vs: &[Embedding]) -> Result<f64, GeometryError> {
    check_count(vs)?;
    let g = gram(vs)?;
    // more vectors than ambient dimensions are linearly dependent, so the
    // volume is exactly zero; skip the noise floor of the factorization
    if vs.len() > vs[0].dim() {
        return Ok(0.0);
    }
    Ok(det_psd(&g)?.sqrt())
}

/// Kernelized volume `sqrt(det(K))`. Reduces to `volume` for the linear
/// kernel.
pub fn kernel_volume(spec: &KernelSpec, vs: &[Embedding]) -> Result<f64, GeometryError> {
    check_count(vs)?;
    let k = kernel_gram(spec, vs)?;
    Ok(det_psd(&k)?.sqrt())
}
