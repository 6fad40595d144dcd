//! RBF kernel evaluation, kernel-matrix construction, and kernel derivatives.
//!
//! The kernel is `k(x, y) = s * exp(-(g / 2) * ||x - y||^2)` with signal
//! variance `s` and inverse squared lengthscale `g`. Both hyperparameters are
//! stored in log-space so that unconstrained optimizers keep them positive.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{pairwise_sq_dists, require_finite, sq_dist};

/// Largest admissible diagonal stabilizer.
pub const MAX_JITTER: f64 = 1e-2;

/// RBF hyperparameters plus a fixed diagonal stabilizer.
///
/// The jitter is a plain constant: it does not follow the signal variance
/// once constructed, and it is excluded from hyperparameter gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_signal_var: f64,
    pub log_inv_lengthscale: f64,
    pub jitter: f64,
}

impl KernelParams {
    /// Build from natural-space values, validating positivity.
    pub fn new(signal_var: f64, inv_lengthscale: f64, jitter: f64) -> Result<Self> {
        if !(signal_var.is_finite() && signal_var > 0.0) {
            return Err(Error::parameter(format!(
                "signal variance must be finite and positive, got {signal_var}"
            )));
        }
        if !(inv_lengthscale.is_finite() && inv_lengthscale > 0.0) {
            return Err(Error::parameter(format!(
                "inverse lengthscale must be finite and positive, got {inv_lengthscale}"
            )));
        }
        Self::from_log(signal_var.ln(), inv_lengthscale.ln(), jitter)
    }

    /// Build from log-space values.
    pub fn from_log(log_signal_var: f64, log_inv_lengthscale: f64, jitter: f64) -> Result<Self> {
        if !log_signal_var.exp().is_finite() || !log_inv_lengthscale.exp().is_finite() {
            return Err(Error::parameter(
                "log hyperparameters overflow when exponentiated".to_string(),
            ));
        }
        if !(0.0..=MAX_JITTER).contains(&jitter) {
            return Err(Error::parameter(format!(
                "jitter must lie in [0, {MAX_JITTER}], got {jitter}"
            )));
        }
        Ok(KernelParams {
            log_signal_var,
            log_inv_lengthscale,
            jitter,
        })
    }

    /// Unit signal variance and lengthscale with the default jitter.
    pub fn unit() -> Self {
        KernelParams::new(1.0, 1.0, default_jitter(1.0)).expect("unit params are valid")
    }

    /// Signal variance (the kernel value at zero distance).
    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    /// Inverse squared lengthscale.
    pub fn inv_lengthscale(&self) -> f64 {
        self.log_inv_lengthscale.exp()
    }

    /// Same hyperparameters, different jitter.
    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(0.0..=MAX_JITTER).contains(&jitter) {
            return Err(Error::parameter(format!(
                "jitter must lie in [0, {MAX_JITTER}], got {jitter}"
            )));
        }
        self.jitter = jitter;
        Ok(self)
    }
}

/// Default stabilizer: six orders of magnitude below the signal variance.
pub fn default_jitter(signal_var: f64) -> f64 {
    (1e-6 * signal_var).min(MAX_JITTER)
}

/// A realized kernel matrix together with the parameters that built it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub values: DMatrix<f64>,
    pub params_used: KernelParams,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// Evaluate the RBF kernel between two points.
pub fn rbf(x_i: &[f64], x_j: &[f64], params: &KernelParams) -> Result<f64> {
    if x_i.is_empty() || x_i.len() != x_j.len() {
        return Err(Error::shape(format!(
            "rbf expects equal non-empty lengths, got {} and {}",
            x_i.len(),
            x_j.len()
        )));
    }
    let d2 = sq_dist(x_i, x_j);
    Ok(params.signal_var() * (-0.5 * params.inv_lengthscale() * d2).exp())
}

/// Kernel matrix on the rows of `x`, with jitter added to the diagonal.
pub fn kernel_matrix(x: &DMatrix<f64>, params: &KernelParams) -> Result<KernelMatrix> {
    require_finite(x, "kernel_matrix input")?;
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::shape("kernel_matrix needs at least a 1x1 input"));
    }
    let s = params.signal_var();
    let g = params.inv_lengthscale();
    let mut k = pairwise_sq_dists(x);
    k.apply(|v| *v = s * (-0.5 * g * *v).exp());
    for i in 0..x.nrows() {
        k[(i, i)] = s + params.jitter;
    }
    Ok(KernelMatrix {
        values: k,
        params_used: *params,
    })
}

/// Kernel matrix without the jitter term. Diagonal entries equal the signal
/// variance exactly.
pub fn kernel_matrix_nojitter(x: &DMatrix<f64>, params: &KernelParams) -> Result<DMatrix<f64>> {
    let mut k = kernel_matrix(x, params)?.values;
    for i in 0..x.nrows() {
        k[(i, i)] = params.signal_var();
    }
    Ok(k)
}

/// Derivatives of the kernel matrix with respect to the coordinates of row
/// `i` of `x`.
///
/// Entry `[m][(a, b)]` of the result is `dK[a, b] / dx[i, m]`. Only row and
/// column `i` can be nonzero, so each slice costs O(n) to fill.
pub fn kernel_grad_latent(
    x: &DMatrix<f64>,
    params: &KernelParams,
    i: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let (n, d) = (x.nrows(), x.ncols());
    if i >= n {
        return Err(Error::Index(format!("latent row {i} out of 0..{n}")));
    }
    let k = kernel_matrix_nojitter(x, params)?;
    let g = params.inv_lengthscale();
    let mut out = Vec::with_capacity(d);
    for m in 0..d {
        let mut slice = DMatrix::zeros(n, n);
        for j in 0..n {
            if j == i {
                continue; // self-distance term is stationary
            }
            let v = -g * (x[(i, m)] - x[(j, m)]) * k[(i, j)];
            slice[(i, j)] = v;
            slice[(j, i)] = v;
        }
        out.push(slice);
    }
    Ok(out)
}

/// Derivatives of the kernel matrix with respect to the log hyperparameters,
/// excluding the jitter term.
///
/// Returns `(dK/d log s, dK/d log g)`.
pub fn kernel_grad_hyper(
    x: &DMatrix<f64>,
    params: &KernelParams,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let k = kernel_matrix_nojitter(x, params)?;
    let g = params.inv_lengthscale();
    let d2 = pairwise_sq_dists(x);
    let d_log_g = DMatrix::from_fn(x.nrows(), x.nrows(), |a, b| {
        -0.5 * g * d2[(a, b)] * k[(a, b)]
    });
    Ok((k, d_log_g))
}
