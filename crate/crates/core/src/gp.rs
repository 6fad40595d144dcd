//! Single-view Gaussian process machinery: predictive posterior,
//! multi-output log-likelihood, hyperparameter fitting, and the logistic
//! squashing used by the classification heads.
//!
//! The prior mean is zero everywhere; targets are standardized upstream.

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix_nojitter, rbf, KernelMatrix, KernelParams};
use crate::linalg::{
    chol_solve_mat, chol_solve_vec, cholesky_lower, logdet_from_chol, pairwise_sq_dists,
    require_finite,
};
use crate::optim::{scg_minimize, ScgConfig};

const LN_2PI: f64 = 1.8378770664093453;

/// Gaussian process regression model with a cached Cholesky factor of
/// `K + noise_var * I`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "GpModelData", into = "GpModelData")]
pub struct GpModel {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    params: KernelParams,
    noise_var: f64,
    chol_cache: DMatrix<f64>,
    /// `(K + noise_var I)^{-1} Y`, reused by every posterior query.
    alpha: DMatrix<f64>,
}

/// Serialized form: the factorizations are rebuilt on load, which keeps the
/// file small and reproduces predictions bit-for-bit because the rebuild is
/// deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GpModelData {
    inputs: DMatrix<f64>,
    targets: DMatrix<f64>,
    params: KernelParams,
    noise_var: f64,
}

impl From<GpModel> for GpModelData {
    fn from(m: GpModel) -> Self {
        GpModelData {
            inputs: m.inputs,
            targets: m.targets,
            params: m.params,
            noise_var: m.noise_var,
        }
    }
}

impl TryFrom<GpModelData> for GpModel {
    type Error = Error;

    fn try_from(d: GpModelData) -> Result<Self> {
        GpModel::new(d.inputs, d.targets, d.params, d.noise_var)
    }
}

impl GpModel {
    /// Build a model and factorize `K + noise_var * I`.
    pub fn new(
        inputs: DMatrix<f64>,
        targets: DMatrix<f64>,
        params: KernelParams,
        noise_var: f64,
    ) -> Result<Self> {
        if inputs.nrows() == 0 || targets.ncols() == 0 {
            return Err(Error::shape("GP needs n >= 1 and D >= 1"));
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::shape(format!(
                "{} inputs vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if !(noise_var.is_finite() && noise_var >= 0.0) {
            return Err(Error::parameter(format!(
                "noise variance must be finite and non-negative, got {noise_var}"
            )));
        }
        require_finite(&inputs, "GP inputs")?;
        require_finite(&targets, "GP targets")?;

        let mut m = crate::kernels::kernel_matrix(&inputs, &params)?.values;
        for i in 0..m.nrows() {
            m[(i, i)] += noise_var;
        }
        let chol_cache = cholesky_lower(&m, "GP training kernel")?;
        let alpha = chol_solve_mat(&chol_cache, &targets);
        Ok(GpModel {
            inputs,
            targets,
            params,
            noise_var,
            chol_cache,
            alpha,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn noise_var(&self) -> f64 {
        self.noise_var
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.targets
    }

    /// Number of output columns.
    pub fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    /// Marginal log-likelihood of the model's own training data.
    pub fn log_likelihood(&self) -> f64 {
        let n = self.inputs.nrows() as f64;
        let d = self.targets.ncols() as f64;
        let logdet = logdet_from_chol(&self.chol_cache);
        let data_fit: f64 = (0..self.targets.ncols())
            .map(|c| self.targets.column(c).dot(&self.alpha.column(c)))
            .sum();
        -0.5 * n * d * LN_2PI - 0.5 * d * logdet - 0.5 * data_fit
    }

    /// Predictive mean (one entry per output column) and variance at a
    /// query point.
    pub fn posterior(&self, x_star: &[f64]) -> Result<(DVector<f64>, f64)> {
        if x_star.len() != self.inputs.ncols() {
            return Err(Error::shape(format!(
                "query has {} dims, model expects {}",
                x_star.len(),
                self.inputs.ncols()
            )));
        }
        let n = self.inputs.nrows();
        let mut k_star = DVector::zeros(n);
        for i in 0..n {
            let row: Vec<f64> = self.inputs.row(i).iter().copied().collect();
            k_star[i] = rbf(x_star, &row, &self.params)?;
        }
        let mean = self.alpha.transpose() * &k_star;
        let v = chol_solve_vec(&self.chol_cache, &k_star);
        let mut var = self.params.signal_var() + self.noise_var - k_star.dot(&v);
        if var < 0.0 {
            if var <= -1e-12 {
                log::warn!("posterior variance {var} clamped to 0; kernel is badly conditioned");
            } else {
                log::warn!("posterior variance {var:e} clamped to 0");
            }
            var = 0.0;
        }
        Ok((mean, var))
    }
}

/// Predictive posterior of `model` at `x_star`. Free-function form of
/// [`GpModel::posterior`].
pub fn gp_posterior(model: &GpModel, x_star: &[f64]) -> Result<(DVector<f64>, f64)> {
    model.posterior(x_star)
}

/// Log-likelihood of multi-output data `y` under a zero-mean Gaussian with
/// covariance `k`: `-(nD/2) ln 2pi - (D/2) ln|K| - tr(K^{-1} Y Y^T) / 2`.
pub fn gp_log_likelihood(k: &KernelMatrix, y: &DMatrix<f64>) -> Result<f64> {
    gaussian_log_likelihood(&k.values, y, "likelihood kernel")
}

pub(crate) fn gaussian_log_likelihood(m: &DMatrix<f64>, y: &DMatrix<f64>, view: &str) -> Result<f64> {
    if m.nrows() != y.nrows() {
        return Err(Error::shape(format!(
            "kernel is {}x{} but targets have {} rows",
            m.nrows(),
            m.ncols(),
            y.nrows()
        )));
    }
    let l = cholesky_lower(m, view)?;
    let n = m.nrows() as f64;
    let d = y.ncols() as f64;
    let solved = chol_solve_mat(&l, y);
    let data_fit: f64 = (0..y.ncols()).map(|c| y.column(c).dot(&solved.column(c))).sum();
    Ok(-0.5 * n * d * LN_2PI - 0.5 * d * logdet_from_chol(&l) - 0.5 * data_fit)
}

/// Logistic squashing of a latent function value into (0, 1).
///
/// Branches on the sign so neither exponential can overflow.
pub fn squash(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

/// Negative log-likelihood and its gradient over
/// `x = [log signal_var, log inv_lengthscale, log noise_var]`.
///
/// Returns `None` when the covariance fails to factorize at `x`, which the
/// optimizer treats as a rejected trial.
fn nll_and_grad(
    x: &[f64],
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    sq_dists: &DMatrix<f64>,
) -> Option<(f64, Vec<f64>)> {
    let params = KernelParams::from_log(x[0], x[1], 0.0).ok()?;
    let noise_var = x[2].exp();
    if !noise_var.is_finite() {
        return None;
    }
    let k = kernel_matrix_nojitter(inputs, &params).ok()?;
    let mut m = k.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += noise_var;
    }
    let l = cholesky_lower(&m, "fit").ok()?;
    let n = inputs.nrows();
    let d = targets.ncols() as f64;

    let solved = chol_solve_mat(&l, targets); // M^{-1} Y
    let data_fit: f64 = (0..targets.ncols())
        .map(|c| targets.column(c).dot(&solved.column(c)))
        .sum();
    let nll = 0.5 * (n as f64) * d * LN_2PI + 0.5 * d * logdet_from_chol(&l) + 0.5 * data_fit;

    // A = (D * M^{-1} - M^{-1} Y Y^T M^{-1}) / 2; d nll / d phi = sum(A .* dM/dphi)
    let m_inv = crate::linalg::chol_inverse(&l);
    let a = (&m_inv * d - &solved * solved.transpose()) * 0.5;

    let g = params.inv_lengthscale();
    let mut grad_log_s = 0.0;
    let mut grad_log_g = 0.0;
    for i in 0..n {
        for j in 0..n {
            let dk = k[(i, j)];
            grad_log_s += a[(i, j)] * dk;
            grad_log_g += a[(i, j)] * (-0.5 * g * sq_dists[(i, j)] * dk);
        }
    }
    let grad_log_noise = noise_var * a.trace();
    Some((nll, vec![grad_log_s, grad_log_g, grad_log_noise]))
}

/// Fit kernel hyperparameters and noise variance by maximizing the marginal
/// likelihood with SCG, keeping the best of the initial point plus three
/// seeded random restarts.
pub fn gp_fit_hyper(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    init: KernelParams,
    noise_init: f64,
) -> Result<GpModel> {
    gp_fit_hyper_with(
        inputs,
        targets,
        init,
        noise_init,
        &ScgConfig::default().with_max_iters(100),
    )
}

/// [`gp_fit_hyper`] with explicit optimizer settings.
pub fn gp_fit_hyper_with(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    init: KernelParams,
    noise_init: f64,
    opt: &ScgConfig,
) -> Result<GpModel> {
    gp_fit_hyper_restarts(inputs, targets, init, noise_init, opt, 3)
}

/// Core fit loop: the initial point plus `extra_restarts` seeded random
/// perturbations of it; the best final likelihood wins.
pub(crate) fn gp_fit_hyper_restarts(
    inputs: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    init: KernelParams,
    noise_init: f64,
    opt: &ScgConfig,
    extra_restarts: usize,
) -> Result<GpModel> {
    if inputs.nrows() < 2 {
        return Err(Error::shape("hyperparameter fit needs n >= 2"));
    }
    if !(noise_init.is_finite() && noise_init > 0.0) {
        return Err(Error::parameter(format!(
            "noise init must be positive, got {noise_init}"
        )));
    }
    require_finite(inputs, "fit inputs")?;
    require_finite(targets, "fit targets")?;

    let sq_dists = pairwise_sq_dists(inputs);
    let x_init = vec![init.log_signal_var, init.log_inv_lengthscale, noise_init.ln()];

    let mut rng = ChaCha8Rng::seed_from_u64(0x67_70_66_69_74); // stable restart stream
    let mut best: Option<(f64, Vec<f64>)> = None;
    for restart in 0..=extra_restarts {
        let x0: Vec<f64> = if restart == 0 {
            x_init.clone()
        } else {
            x_init
                .iter()
                .map(|v| v + rng.gen_range(-1.0..1.0))
                .collect()
        };
        let (f, g) = crate::optim::memoized(|x: &[f64]| {
            nll_and_grad(x, inputs, targets, &sq_dists)
                .unwrap_or_else(|| (f64::INFINITY, vec![f64::NAN; 3]))
        });
        let out = scg_minimize(f, g, &x0, opt);
        if !out.value.is_finite() {
            continue;
        }
        match &best {
            Some((v, _)) if *v <= out.value => {}
            _ => best = Some((out.value, out.x)),
        }
    }

    let (_, x) = best.ok_or_else(|| Error::FitFailure {
        message: "every restart produced a non-finite likelihood".to_string(),
        best: None,
    })?;
    let params = KernelParams::from_log(x[0], x[1], 0.0)?;
    GpModel::new(inputs.clone(), targets.clone(), params, x[2].exp())
}
