//! Negative log posterior of the shared-latent-space model and its exact
//! gradients.
//!
//! With latent rows `Q`, each observed view `X` (glucose windows or context
//! features) contributes
//!
//! ```text
//! L_x = (D_x / 2) ln|K_x| + tr(K_x^{-1} X X^T) / 2,       K_x = k(Q, Q)
//! ```
//!
//! and the total objective is `L_v + L_s + ||Q||_F^2 / 2`, the last term
//! being a standard Gaussian prior on the latent coordinates. Note the
//! log-determinant term differentiates into a bracket weighted by the view's
//! output dimension `D_x` (the number of columns it generates), not the
//! number of latent points; the finite-difference suite pins this down.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix, KernelParams};
use crate::linalg::{chol_inverse, chol_solve_mat, cholesky_lower, logdet_from_chol, pairwise_sq_dists};

/// Objective value split into its three terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParts {
    pub view_v: f64,
    pub view_s: f64,
    pub prior: f64,
}

impl ObjectiveParts {
    pub fn total(&self) -> f64 {
        self.view_v + self.view_s + self.prior
    }
}

/// Gradient of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveGrad {
    /// d objective / d Q, one row per latent point.
    pub latent: DMatrix<f64>,
    /// (d/d log signal_var, d/d log inv_lengthscale) for the glucose view.
    pub hyper_v: (f64, f64),
    /// Same for the context view, when present.
    pub hyper_s: Option<(f64, f64)>,
}

struct ViewEval {
    nll: f64,
    grad: Option<ViewGrad>,
}

struct ViewGrad {
    dq: DMatrix<f64>,
    dlog_signal: f64,
    dlog_lengthscale: f64,
}

/// One view's negative log-likelihood and, optionally, its gradients.
fn view_eval(
    q: &DMatrix<f64>,
    params: &KernelParams,
    x: &DMatrix<f64>,
    view: &str,
    want_grad: bool,
) -> Result<ViewEval> {
    if x.nrows() != q.nrows() {
        return Err(Error::shape(format!(
            "{view} has {} rows but Q has {}",
            x.nrows(),
            q.nrows()
        )));
    }
    let d_out = x.ncols() as f64;
    let k = kernel_matrix(q, params)?.values;
    let l = cholesky_lower(&k, view)?;
    let solved = chol_solve_mat(&l, x); // K^{-1} X
    let data_fit: f64 = (0..x.ncols()).map(|c| x.column(c).dot(&solved.column(c))).sum();
    let nll = 0.5 * d_out * logdet_from_chol(&l) + 0.5 * data_fit;

    if !want_grad {
        return Ok(ViewEval { nll, grad: None });
    }

    // dL/dK = (D K^{-1} - K^{-1} X X^T K^{-1}) / 2, symmetric.
    let k_inv = chol_inverse(&l);
    let a = (&k_inv * d_out - &solved * solved.transpose()) * 0.5;

    // Chain through the RBF: dK_ij/dq_i = -g (q_i - q_j) K~_ij, where the
    // no-jitter kernel K~ matches K off the diagonal and the diagonal terms
    // are stationary. With W = A .* K (diagonal cancels in the row form):
    // dL/dq_i = -2g [ (sum_j W_ij) q_i - sum_j W_ij q_j ].
    let g = params.inv_lengthscale();
    let n = q.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] = a[(i, j)] * k[(i, j)];
        }
    }
    // Restore the no-jitter diagonal for the hyperparameter traces.
    let signal = params.signal_var();
    for i in 0..n {
        w[(i, i)] = a[(i, i)] * signal;
    }
    let dlog_signal = w.sum();

    let d2 = pairwise_sq_dists(q);
    let mut dlog_lengthscale = 0.0;
    for i in 0..n {
        for j in 0..n {
            dlog_lengthscale += w[(i, j)] * (-0.5 * g * d2[(i, j)]);
        }
    }

    let wq = &w * q;
    let row_sums: Vec<f64> = (0..n).map(|i| w.row(i).sum()).collect();
    let dq = DMatrix::from_fn(n, q.ncols(), |i, m| {
        -2.0 * g * (row_sums[i] * q[(i, m)] - wq[(i, m)])
    });

    Ok(ViewEval {
        nll,
        grad: Some(ViewGrad {
            dq,
            dlog_signal,
            dlog_lengthscale,
        }),
    })
}

/// Objective split into view and prior terms.
pub fn objective_parts(
    q: &DMatrix<f64>,
    params_v: &KernelParams,
    params_s: &KernelParams,
    v: &DMatrix<f64>,
    s: Option<&DMatrix<f64>>,
) -> Result<ObjectiveParts> {
    let view_v = view_eval(q, params_v, v, "glucose view", false)?.nll;
    let view_s = match s {
        Some(s) if s.ncols() > 0 => view_eval(q, params_s, s, "context view", false)?.nll,
        _ => 0.0,
    };
    let prior = 0.5 * q.iter().map(|v| v * v).sum::<f64>();
    Ok(ObjectiveParts {
        view_v,
        view_s,
        prior,
    })
}

/// Negative log posterior `L_v + L_s + ||Q||_F^2 / 2`.
pub fn objective(
    q: &DMatrix<f64>,
    params_v: &KernelParams,
    params_s: &KernelParams,
    v: &DMatrix<f64>,
    s: Option<&DMatrix<f64>>,
) -> Result<f64> {
    Ok(objective_parts(q, params_v, params_s, v, s)?.total())
}

/// Exact gradient of [`objective`] with respect to the latent matrix and the
/// log hyperparameters of both views.
pub fn objective_grad(
    q: &DMatrix<f64>,
    params_v: &KernelParams,
    params_s: &KernelParams,
    v: &DMatrix<f64>,
    s: Option<&DMatrix<f64>>,
) -> Result<ObjectiveGrad> {
    Ok(objective_value_grad(q, params_v, params_s, v, s)?.1)
}

/// Objective value and gradient in one pass over the Cholesky factors.
pub fn objective_value_grad(
    q: &DMatrix<f64>,
    params_v: &KernelParams,
    params_s: &KernelParams,
    v: &DMatrix<f64>,
    s: Option<&DMatrix<f64>>,
) -> Result<(f64, ObjectiveGrad)> {
    let ev = view_eval(q, params_v, v, "glucose view", true)?;
    let gv = ev.grad.expect("gradient requested");
    let mut latent = gv.dq;
    let hyper_v = (gv.dlog_signal, gv.dlog_lengthscale);
    let mut value = ev.nll;

    let hyper_s = match s {
        Some(s) if s.ncols() > 0 => {
            let es = view_eval(q, params_s, s, "context view", true)?;
            let gs = es.grad.expect("gradient requested");
            latent += gs.dq;
            value += es.nll;
            Some((gs.dlog_signal, gs.dlog_lengthscale))
        }
        _ => None,
    };

    value += 0.5 * q.iter().map(|x| x * x).sum::<f64>();
    latent += q; // prior
    Ok((
        value,
        ObjectiveGrad {
            latent,
            hyper_v,
            hyper_s,
        },
    ))
}

/// Flattened optimization problem over `[Q (row-major), log hypers]`, as fed
/// to the SCG minimizer.
pub(crate) struct LatentProblem<'a> {
    pub v: &'a DMatrix<f64>,
    pub s: Option<&'a DMatrix<f64>>,
    pub n: usize,
    pub latent_dim: usize,
    pub jitter_v: f64,
    pub jitter_s: f64,
}

impl<'a> LatentProblem<'a> {
    pub fn new(
        v: &'a DMatrix<f64>,
        s: Option<&'a DMatrix<f64>>,
        latent_dim: usize,
        jitter_v: f64,
        jitter_s: f64,
    ) -> Self {
        LatentProblem {
            v,
            s,
            n: v.nrows(),
            latent_dim,
            jitter_v,
            jitter_s,
        }
    }

    fn two_views(&self) -> bool {
        self.s.map_or(false, |s| s.ncols() > 0)
    }

    pub fn dim(&self) -> usize {
        self.n * self.latent_dim + 2 + if self.two_views() { 2 } else { 0 }
    }

    pub fn pack(
        &self,
        q: &DMatrix<f64>,
        params_v: &KernelParams,
        params_s: &KernelParams,
    ) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for i in 0..self.n {
            for m in 0..self.latent_dim {
                x.push(q[(i, m)]);
            }
        }
        x.push(params_v.log_signal_var);
        x.push(params_v.log_inv_lengthscale);
        if self.two_views() {
            x.push(params_s.log_signal_var);
            x.push(params_s.log_inv_lengthscale);
        }
        x
    }

    pub fn unpack(&self, x: &[f64]) -> Result<(DMatrix<f64>, KernelParams, KernelParams)> {
        let nq = self.n * self.latent_dim;
        let q = DMatrix::from_fn(self.n, self.latent_dim, |i, m| x[i * self.latent_dim + m]);
        let params_v = KernelParams::from_log(x[nq], x[nq + 1], self.jitter_v)?;
        let params_s = if self.two_views() {
            KernelParams::from_log(x[nq + 2], x[nq + 3], self.jitter_s)?
        } else {
            KernelParams::from_log(0.0, 0.0, self.jitter_s)?
        };
        Ok((q, params_v, params_s))
    }

    /// Objective and packed gradient in one pass. An infeasible point
    /// reports an infinite value (rejected trial); the gradient is NaN so a
    /// caller that needs it there aborts instead of stepping on garbage.
    pub fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let Ok((q, pv, ps)) = self.unpack(x) else {
            return (f64::INFINITY, vec![f64::NAN; self.dim()]);
        };
        match objective_value_grad(&q, &pv, &ps, self.v, self.s) {
            Ok((value, g)) => {
                let mut out = Vec::with_capacity(self.dim());
                for i in 0..self.n {
                    for m in 0..self.latent_dim {
                        out.push(g.latent[(i, m)]);
                    }
                }
                out.push(g.hyper_v.0);
                out.push(g.hyper_v.1);
                if let Some((a, b)) = g.hyper_s {
                    out.push(a);
                    out.push(b);
                }
                (value, out)
            }
            Err(_) => (f64::INFINITY, vec![f64::NAN; self.dim()]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_check;
    use rand::Rng;

    fn params(s: f64, g: f64, jitter: f64) -> KernelParams {
        KernelParams::new(s, g, jitter).unwrap()
    }

    #[test]
    fn all_zero_fixed_point() {
        let q = DMatrix::from_row_slice(1, 1, &[0.0]);
        let v = DMatrix::from_row_slice(1, 1, &[0.0]);
        let s = DMatrix::from_row_slice(1, 1, &[0.0]);
        let p = params(1.0, 1.0, 0.0);
        assert_eq!(objective(&q, &p, &p, &v, Some(&s)).unwrap(), 0.0);
    }

    #[test]
    fn single_point_data_term() {
        let q = DMatrix::from_row_slice(1, 1, &[0.0]);
        let v = DMatrix::from_row_slice(1, 1, &[2.0]);
        let s = DMatrix::from_row_slice(1, 1, &[0.0]);
        let p = params(1.0, 1.0, 0.0);
        assert!((objective(&q, &p, &p, &v, Some(&s)).unwrap() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_context_view_reduces_to_single_view() {
        let mut rng = crate::seeded_rng(17, 1);
        let q = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let v = DMatrix::from_fn(4, 3, |_, _| rng.gen_range(-1.0..1.0));
        let p = params(1.1, 0.9, 1e-6);
        let with_none = objective(&q, &p, &p, &v, None).unwrap();
        let parts = objective_parts(&q, &p, &p, &v, None).unwrap();
        assert_eq!(parts.view_s, 0.0);
        assert!((with_none - (parts.view_v + parts.prior)).abs() < 1e-15);
    }

    #[test]
    fn prior_decomposition() {
        let mut rng = crate::seeded_rng(3, 2);
        let q = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.5..1.5));
        let v = DMatrix::from_fn(5, 3, |_, _| rng.gen_range(-1.0..1.0));
        let s = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let p = params(1.0, 1.0, 1e-6);
        let parts = objective_parts(&q, &p, &p, &v, Some(&s)).unwrap();
        let frob: f64 = 0.5 * q.iter().map(|x| x * x).sum::<f64>();
        assert!((parts.prior - frob).abs() <= 1e-12);
        assert!(
            (parts.total() - (parts.view_v + parts.view_s) - frob).abs() <= 1e-12
        );
    }

    #[test]
    fn gradient_is_zero_at_origin_with_zero_data() {
        let q = DMatrix::zeros(3, 2);
        let v = DMatrix::zeros(3, 2);
        let s = DMatrix::zeros(3, 2);
        let p = params(1.0, 1.0, 1e-6);
        let g = objective_grad(&q, &p, &p, &v, Some(&s)).unwrap();
        // Data traces vanish and the log-det bracket is distance-free at a
        // single clump, so only the prior term q_i = 0 remains.
        assert!(g.latent.iter().all(|v| v.abs() < 1e-12), "{:?}", g.latent);
    }

    #[test]
    fn prior_gradient_alone_equals_q() {
        // A zero-column view carries no data term at all, so only the prior
        // gradient q_i survives, exactly.
        let mut rng = crate::seeded_rng(5, 3);
        let q = DMatrix::from_fn(4, 2, |_, _| rng.gen_range(-1.0..1.0));
        let empty = DMatrix::<f64>::zeros(4, 0);
        let p = params(1.3, 0.7, 1e-6);
        let g = objective_grad(&q, &p, &p, &empty, None).unwrap();
        assert_eq!(g.latent, q);
        assert!((objective(&q, &p, &p, &empty, None).unwrap()
            - 0.5 * q.iter().map(|x| x * x).sum::<f64>())
        .abs()
            < 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // Latent points are spread out and the jitter is generous so the
        // objective stays well conditioned: central differences themselves
        // are the accuracy bottleneck on stiff instances.
        for seed in 0..20u64 {
            let mut rng = crate::seeded_rng(seed, 4);
            let n = rng.gen_range(2..=8);
            let qdim = rng.gen_range(1..=3);
            let dv = rng.gen_range(1..=4);
            let ds = rng.gen_range(1..=5);
            let v = DMatrix::from_fn(n, dv, |_, _| rng.gen_range(-1.5..1.5));
            let s_mat = DMatrix::from_fn(n, ds, |_, _| rng.gen_range(-1.5..1.5));
            let s = if seed % 5 == 4 { None } else { Some(&s_mat) };
            let q0 = DMatrix::from_fn(n, qdim, |_, _| rng.gen_range(-2.5..2.5));
            let pv = params(rng.gen_range(0.5..2.0), rng.gen_range(0.3..0.8), 1e-3);
            let ps = params(rng.gen_range(0.5..2.0), rng.gen_range(0.3..0.8), 1e-3);

            let problem = LatentProblem::new(&v, s, qdim, pv.jitter, ps.jitter);
            let x0 = problem.pack(&q0, &pv, &ps);
            let err = finite_diff_check(
                |x| problem.value_grad(x).0,
                |x| problem.value_grad(x).1,
                &x0,
                1e-6,
            );
            assert!(err <= 1e-4, "seed {seed}: rel err {err}");
        }
    }

    #[test]
    fn cholesky_failure_names_the_view() {
        // Duplicate latent rows with zero jitter: the context view cannot
        // factorize.
        let q = DMatrix::from_row_slice(2, 1, &[0.5, 0.5]);
        let v = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let s = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        let pv = params(1.0, 1.0, 1e-6);
        let ps = params(1.0, 1.0, 0.0);
        match objective(&q, &pv, &ps, &v, Some(&s)) {
            Err(Error::IllConditioned { view }) => assert_eq!(view, "context view"),
            other => panic!("expected ill-conditioned context view, got {other:?}"),
        }
    }
}
