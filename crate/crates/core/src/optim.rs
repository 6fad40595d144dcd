//! Scaled Conjugate Gradient minimizer and finite-difference utilities.
//!
//! The minimizer follows Møller's formulation: curvature along the search
//! direction is probed with a gradient difference instead of a line search,
//! and a Levenberg-style scale parameter handles indefiniteness. It is fully
//! deterministic.

/// Settings for [`scg_minimize`].
#[derive(Debug, Clone, Copy)]
pub struct ScgConfig {
    /// Step used for the curvature-probing gradient difference.
    pub sigma0: f64,
    /// Initial scale (damping) parameter.
    pub lambda_init: f64,
    pub max_iters: usize,
    /// Relative objective decrease under which a step counts as stalled;
    /// three consecutive stalled accepted steps terminate.
    pub rel_tol: f64,
    /// Gradient-norm termination threshold.
    pub grad_tol: f64,
}

impl Default for ScgConfig {
    fn default() -> Self {
        ScgConfig {
            sigma0: 1e-4,
            lambda_init: 1e-6,
            max_iters: 500,
            rel_tol: 1e-6,
            grad_tol: 1e-8,
        }
    }
}

impl ScgConfig {
    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    pub fn with_grad_tol(mut self, grad_tol: f64) -> Self {
        self.grad_tol = grad_tol;
        self
    }
}

/// Why the minimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminationReason {
    /// Relative objective decrease stayed under `rel_tol` for three
    /// consecutive accepted steps.
    Tol,
    /// Gradient norm fell under `grad_tol`.
    Grad,
    MaxIters,
    /// The objective or gradient stopped being finite; the best point seen
    /// so far was returned.
    NonFinite,
}

/// Record of one minimization run.
#[derive(Debug, Clone)]
pub struct OptTrace {
    /// Objective at the start followed by every accepted step; non-increasing.
    pub objective_values: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub termination_reason: TerminationReason,
}

/// Result of [`scg_minimize`].
#[derive(Debug, Clone)]
pub struct ScgOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub trace: OptTrace,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// How many consecutive non-finite trial evaluations are tolerated before
/// aborting. A single overshoot into an infeasible region is recoverable by
/// raising the damping; a persistent one is not.
const NONFINITE_PATIENCE: usize = 10;

/// Minimize `f` starting from `x0`, using the analytic gradient `g`.
///
/// Never returns a point with objective above `f(x0)`. If the objective or
/// gradient turns non-finite the best point seen so far is returned with the
/// [`TerminationReason::NonFinite`] flag.
pub fn scg_minimize<F, G>(mut f: F, mut g: G, x0: &[f64], cfg: &ScgConfig) -> ScgOutcome
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    let n = x0.len();
    let mut x = x0.to_vec();

    let mut fold = f(&x);
    let mut trace_values = vec![fold];
    let finish = |x: Vec<f64>, value: f64, values: Vec<f64>, iters: usize, reason: TerminationReason| {
        ScgOutcome {
            x,
            value,
            trace: OptTrace {
                objective_values: values,
                iterations: iters,
                converged: matches!(reason, TerminationReason::Tol | TerminationReason::Grad),
                termination_reason: reason,
            },
        }
    };

    if !fold.is_finite() {
        return finish(x, fold, trace_values, 0, TerminationReason::NonFinite);
    }
    let mut gradnew = g(&x);
    assert_eq!(gradnew.len(), n, "gradient length must match x");
    if gradnew.iter().any(|v| !v.is_finite()) {
        return finish(x, fold, trace_values, 0, TerminationReason::NonFinite);
    }
    if norm(&gradnew) <= cfg.grad_tol {
        return finish(x, fold, trace_values, 0, TerminationReason::Grad);
    }

    let mut fnow = fold;
    let mut gradold = gradnew.clone();
    let mut d: Vec<f64> = gradnew.iter().map(|v| -v).collect();
    let mut success = true;
    let mut nsuccess = 0usize;
    let mut lambda = cfg.lambda_init;
    let (lambda_min, lambda_max) = (1e-15, 1e100);
    let mut stalled = 0usize;
    let mut nonfinite_streak = 0usize;

    // Directional quantities carried over rejected steps.
    let mut mu = 0.0;
    let mut kappa = 0.0;
    let mut theta = 0.0;

    for iter in 1..=cfg.max_iters {
        if success {
            mu = dot(&d, &gradnew);
            if mu >= 0.0 {
                d = gradnew.iter().map(|v| -v).collect();
                mu = dot(&d, &gradnew);
            }
            kappa = dot(&d, &d);
            // A conjugate direction that collapsed relative to the gradient
            // (cancellation near a minimizer) restarts along the gradient.
            if kappa < f64::EPSILON * dot(&gradnew, &gradnew) {
                d = gradnew.iter().map(|v| -v).collect();
                mu = dot(&d, &gradnew);
                kappa = dot(&d, &d);
                nsuccess = 0;
            }
            if kappa == 0.0 {
                return finish(x, fnow, trace_values, iter, TerminationReason::Grad);
            }
            let sigma = cfg.sigma0 / kappa.sqrt();
            let mut xplus = x.clone();
            axpy(&mut xplus, sigma, &d);
            let gplus = g(&xplus);
            if gplus.iter().any(|v| !v.is_finite()) {
                return finish(x, fnow, trace_values, iter, TerminationReason::NonFinite);
            }
            theta = (0..n).map(|i| d[i] * (gplus[i] - gradnew[i])).sum::<f64>() / sigma;
        }

        // Damp the curvature estimate until the model is positive definite.
        let mut delta = theta + lambda * kappa;
        if delta <= 0.0 {
            delta = lambda * kappa;
            lambda -= theta / kappa;
        }
        let alpha = -mu / delta;

        let mut xnew = x.clone();
        axpy(&mut xnew, alpha, &d);
        let fnew = f(&xnew);

        if !fnew.is_finite() {
            nonfinite_streak += 1;
            if nonfinite_streak >= NONFINITE_PATIENCE {
                return finish(x, fnow, trace_values, iter, TerminationReason::NonFinite);
            }
        } else {
            nonfinite_streak = 0;
        }

        // Comparison ratio between actual and predicted decrease.
        let ratio = 2.0 * (fnew - fold) / (alpha * mu);
        let accepted = ratio.is_finite() && ratio >= 0.0 && fnew.is_finite();
        if accepted {
            success = true;
            nsuccess += 1;
            x = xnew;
            fnow = fnew;
            trace_values.push(fnew);
        } else {
            success = false;
            fnow = fold;
        }

        if accepted {
            if (fold - fnew).abs() < cfg.rel_tol * fold.abs().max(1.0) {
                stalled += 1;
                if stalled >= 3 {
                    return finish(x, fnow, trace_values, iter, TerminationReason::Tol);
                }
            } else {
                stalled = 0;
            }
            fold = fnew;
            std::mem::swap(&mut gradold, &mut gradnew);
            gradnew = g(&x);
            if gradnew.iter().any(|v| !v.is_finite()) {
                return finish(x, fnow, trace_values, iter, TerminationReason::NonFinite);
            }
            if norm(&gradnew) <= cfg.grad_tol {
                return finish(x, fnow, trace_values, iter, TerminationReason::Grad);
            }
        }

        if ratio.is_nan() || ratio < 0.25 {
            lambda = (4.0 * lambda).min(lambda_max);
        } else if ratio > 0.75 {
            lambda = (0.5 * lambda).max(lambda_min);
        }

        // Restart along the gradient every n successes; otherwise the usual
        // conjugate update.
        if nsuccess == n {
            d = gradnew.iter().map(|v| -v).collect();
            nsuccess = 0;
        } else if success {
            let gamma = (dot(&gradold, &gradnew) - dot(&gradnew, &gradnew)) / mu;
            for i in 0..n {
                d[i] = gamma * d[i] - gradnew[i];
            }
        }

        if iter == cfg.max_iters {
            return finish(x, fnow, trace_values, iter, TerminationReason::MaxIters);
        }
    }

    finish(x, fnow, trace_values, 0, TerminationReason::MaxIters)
}

/// Split a combined objective+gradient callable into the `(f, g)` pair that
/// [`scg_minimize`] takes, sharing a one-entry cache. The minimizer
/// evaluates both at the same point on every accepted step, and most
/// objectives here produce the gradient as a byproduct of the value.
pub fn memoized<F>(
    fg: F,
) -> (
    impl FnMut(&[f64]) -> f64,
    impl FnMut(&[f64]) -> Vec<f64>,
)
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    type Cache = Option<(Vec<f64>, f64, Vec<f64>)>;
    let state = std::rc::Rc::new(std::cell::RefCell::new((fg, Cache::None)));
    let for_f = state.clone();
    let for_g = state;
    (
        move |x: &[f64]| {
            let mut st = for_f.borrow_mut();
            if let Some((cx, cf, _)) = &st.1 {
                if cx.as_slice() == x {
                    return *cf;
                }
            }
            let (f, g) = (st.0)(x);
            st.1 = Some((x.to_vec(), f, g));
            f
        },
        move |x: &[f64]| {
            let mut st = for_g.borrow_mut();
            if let Some((cx, _, cg)) = &st.1 {
                if cx.as_slice() == x {
                    return cg.clone();
                }
            }
            let (f, g) = (st.0)(x);
            let out = g.clone();
            st.1 = Some((x.to_vec(), f, g));
            out
        },
    )
}

/// Compare an analytic gradient against central finite differences of `f`.
///
/// Returns the maximum over components of `|fd - g| / max(1, |g|)`.
pub fn finite_diff_check<F, G>(mut f: F, mut g: G, x: &[f64], step: f64) -> f64
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let grad = g(x);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let orig = xp[i];
        xp[i] = orig + step;
        let fp = f(&xp);
        xp[i] = orig - step;
        let fm = f(&xp);
        xp[i] = orig;
        let fd = (fp - fm) / (2.0 * step);
        let err = (fd - grad[i]).abs() / grad[i].abs().max(1.0);
        worst = worst.max(err);
    }
    worst
}
