//! Analytic gradients of kernelized volumes, a central finite-difference
//! oracle, and a gradient-check report.

use thiserror::Error;

use crate::geometry::{kernel_eval, kernel_gram, Embedding, GeometryError, KernelSpec};

/// Central-difference step. Balances truncation against round-off in double
/// precision.
pub const FD_STEP: f64 = 1e-5;

/// Smallest kernel-Gram eigenvalue accepted as non-degenerate. Below this
/// the derivative of sqrt(det) is unbounded and callers must skip.
pub const DEGENERACY_EIG: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("degenerate configuration: kernel Gram min eigenvalue {0:.3e}")]
    DegenerateConfiguration(f64),
    #[error("function evaluated to a non-finite value at component {0}")]
    NonFiniteFunction(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Per-input gradient vectors, same shapes as the inputs they differentiate.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub per_input: Vec<Vec<f64>>,
}

/// Outcome of comparing an analytic gradient against the FD oracle.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub per_component_errors: Vec<f64>,
    pub passed: bool,
    pub tolerance: f64,
}

/// Gradient of the kernelized volume with respect to each input vector.
///
/// Uses d sqrt(det K)/dK = (sqrt(det K)/2) K^{-1} composed with the kernel
/// partials dK_ij/dv_m. Errors on (near-)singular kernel Grams.
pub fn grad_kernel_volume(
    spec: &KernelSpec,
    vs: &[Embedding],
) -> Result<GradientSet, GradError> {
    let kg = kernel_gram(spec, vs)?;
    let min_eig = kg.min_eigenvalue();
    if min_eig <= DEGENERACY_EIG {
        return Err(GradError::DegenerateConfiguration(min_eig));
    }
    let inv = kg
        .inverse_psd()
        .ok_or(GradError::DegenerateConfiguration(min_eig))?;
    let det: f64 = kg.eigenvalues().into_iter().product();
    let vol = det.max(0.0).sqrt();
    let k = vs.len();
    let dim = vs[0].dim();

    // dVol/dv_m = sum_{i,j} (Vol/2) inv_ij dK_ij/dv_m
    //           = Vol * sum_j inv_mj dK_mj/dv_m   (symmetry collapses i<->j)
    let mut per_input = vec![vec![0.0; dim]; k];
    for m in 0..k {
        for j in 0..k {
            let w = vol * inv.get(m, j);
            match *spec {
                KernelSpec::Linear => {
                    for (g, &zj) in per_input[m].iter_mut().zip(vs[j].values()) {
                        *g += w * zj;
                    }
                }
                KernelSpec::Polynomial { offset, degree } => {
                    let d = vs[m].dot(&vs[j])?;
                    let f = degree as f64 * (d + offset).powi(degree as i32 - 1);
                    for (g, &zj) in per_input[m].iter_mut().zip(vs[j].values()) {
                        *g += w * f * zj;
                    }
                }
                KernelSpec::Rbf { bandwidth } => {
                    if m == j {
                        continue; // kappa(v,v) = 1 independent of v
                    }
                    let kmj = kernel_eval(spec, &vs[m], &vs[j])?;
                    let inv_s2 = 1.0 / (bandwidth * bandwidth);
                    for ((g, &xm), &zj) in per_input[m]
                        .iter_mut()
                        .zip(vs[m].values())
                        .zip(vs[j].values())
                    {
                        *g += w * kmj * (zj - xm) * inv_s2;
                    }
                }
            }
        }
    }
    Ok(GradientSet { per_input })
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn finite_diff<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>, GradError>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite_diff step must be positive");
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + h;
        let fp = f(&xp);
        xp[i] = orig - h;
        let fm = f(&xp);
        xp[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(GradError::NonFiniteFunction(i));
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Relative error per component: |a - g| / max(1e-8, |a| + |g|).
pub fn relative_error(analytic: f64, estimate: f64) -> f64 {
    (analytic - estimate).abs() / (1e-8f64).max(analytic.abs() + estimate.abs())
}

/// Compare an analytic gradient against the FD oracle at `x`.
pub fn grad_check<F>(
    f: F,
    analytic: &[f64],
    x: &[f64],
    tolerance: f64,
) -> Result<GradCheckReport, GradError>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(analytic.len(), x.len(), "gradient/parameter length mismatch");
    let fd = finite_diff(f, x, FD_STEP)?;
    let per_component_errors: Vec<f64> = analytic
        .iter()
        .zip(&fd)
        .map(|(&a, &g)| relative_error(a, g))
        .collect();
    let max_relative_error = per_component_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_relative_error,
        per_component_errors,
        passed: max_relative_error <= tolerance,
        tolerance,
    })
}
