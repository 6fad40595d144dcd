//! Test-time inference: latent coordinates for a new window, class
//! prediction, and recursive multi-step forecasting.
//!
//! A new window's latent coordinate minimizes the view reconstruction error
//! restricted to that point, with the training latents and hyperparameters
//! frozen: each available view reconstructs the new row through its GP mean
//! `k(q)^T K^{-1} X`, and the summed squared errors are minimized over `q`.
//! The views carry no noise term, so conditional densities degenerate into
//! near-interpolation constraints; the squared error stays bounded and keeps
//! the optimum near the training manifold.

use nalgebra::{DMatrix, DVector};

use crate::data::GlycemicLabel;
use crate::error::{Error, Result};
use crate::gp::squash;
use crate::kernels::KernelParams;
use crate::optim::{scg_minimize, ScgConfig, TerminationReason};

use super::{ContextMode, LatentModel};

/// Latent coordinate inferred for a new window.
#[derive(Debug, Clone)]
pub struct InferredLatent {
    pub coords: DVector<f64>,
    /// True when the optimizer failed and the nearest-neighbor latent was
    /// used instead.
    pub fallback: bool,
}

/// Class decision with renormalized per-class probabilities, ordered
/// [hypo, eu, hyper].
#[derive(Debug, Clone, Copy)]
pub struct Prediction {
    pub label: GlycemicLabel,
    pub probs: [f64; 3],
    pub fallback: bool,
}

/// One step of a recursive forecast, in raw mg/dl units.
#[derive(Debug, Clone, Copy)]
pub struct ForecastStep {
    pub mean_mgdl: f64,
    pub var_mgdl2: f64,
    pub fallback: bool,
}

/// Argmax with the safety-first tie-break (hypo, then hyper, then eu).
pub fn label_from_probs(probs: &[f64; 3]) -> GlycemicLabel {
    let mut best = GlycemicLabel::PRIORITY[0];
    for &label in &GlycemicLabel::PRIORITY[1..] {
        if probs[label.index()] > probs[best.index()] {
            best = label;
        }
    }
    best
}

/// One view's frozen quantities for reconstruction at a new point.
struct ViewRef<'a> {
    q_train: &'a DMatrix<f64>,
    params: &'a KernelParams,
    /// K^{-1} X for the view's standardized training data.
    a_x: &'a DMatrix<f64>,
    x_new: Vec<f64>,
}

impl ViewRef<'_> {
    /// Half the squared reconstruction error of the new row and its gradient
    /// in `q`.
    fn value_grad(&self, q: &[f64]) -> (f64, Vec<f64>) {
        let n = self.q_train.nrows();
        let qdim = self.q_train.ncols();
        let signal = self.params.signal_var();
        let g = self.params.inv_lengthscale();

        let mut k = DVector::zeros(n);
        for j in 0..n {
            let mut d2 = 0.0;
            for m in 0..qdim {
                let diff = q[m] - self.q_train[(j, m)];
                d2 += diff * diff;
            }
            k[j] = signal * (-0.5 * g * d2).exp();
        }
        let x_hat = self.a_x.transpose() * &k; // GP mean reconstruction

        let r: Vec<f64> = self
            .x_new
            .iter()
            .zip(x_hat.iter())
            .map(|(x, h)| x - h)
            .collect();
        let value = 0.5 * r.iter().map(|v| v * v).sum::<f64>();

        let mut grad = vec![0.0; qdim];
        for m in 0..qdim {
            // dk_j/dq_m = -g (q_m - Q_jm) k_j
            let mut dk = DVector::zeros(n);
            for j in 0..n {
                dk[j] = -g * (q[m] - self.q_train[(j, m)]) * k[j];
            }
            let dx_hat = self.a_x.transpose() * &dk;
            grad[m] = -r.iter().zip(dx_hat.iter()).map(|(ri, di)| ri * di).sum::<f64>();
        }
        (value, grad)
    }
}

impl LatentModel {
    /// Standardized primary-view row for a raw window (fusing context first
    /// when the model was trained with early fusion).
    fn primary_input(&self, window_v: &[f64], window_s: Option<&[f64]>) -> Result<Vec<f64>> {
        if window_v.len() != self.raw_v_dim {
            return Err(Error::shape(format!(
                "window has {} values, model expects {}",
                window_v.len(),
                self.raw_v_dim
            )));
        }
        if let Some(s) = window_s {
            if s.len() != self.raw_s_dim {
                return Err(Error::shape(format!(
                    "context row has {} values, model expects {}",
                    s.len(),
                    self.raw_s_dim
                )));
            }
        }
        match self.config.context_mode {
            ContextMode::None | ContextMode::SharedLatent => self.v_scaler.apply_row(window_v),
            ContextMode::EarlyFusion => {
                let s = window_s.ok_or_else(|| {
                    Error::shape("early-fusion model needs the context row at prediction time")
                })?;
                let mut fused = window_v.to_vec();
                fused.extend_from_slice(s);
                self.v_scaler.apply_row(&fused)
            }
        }
    }

    /// Frozen view references for reconstructing a new window.
    fn views_for(&self, window_v: &[f64], window_s: Option<&[f64]>) -> Result<Vec<ViewRef<'_>>> {
        let v_std = self.primary_input(window_v, window_s)?;
        let mut views: Vec<ViewRef> = vec![ViewRef {
            q_train: &self.q_matrix,
            params: &self.params_v,
            a_x: &self.cache.a_v,
            x_new: v_std,
        }];
        if self.config.context_mode == ContextMode::SharedLatent {
            if let (Some(s_row), Some(scaler), Some(a_s), Some(ps)) = (
                window_s,
                self.s_scaler.as_ref(),
                self.cache.a_s.as_ref(),
                self.params_s.as_ref(),
            ) {
                views.push(ViewRef {
                    q_train: &self.q_matrix,
                    params: ps,
                    a_x: a_s,
                    x_new: scaler.apply_row(s_row)?,
                });
            }
        }
        Ok(views)
    }

    /// The reconstruction objective minimized by [`LatentModel::infer_latent`],
    /// evaluated at an arbitrary latent coordinate. Lower is better.
    pub fn reconstruction_score(
        &self,
        coords: &[f64],
        window_v: &[f64],
        window_s: Option<&[f64]>,
    ) -> Result<f64> {
        if coords.len() != self.q_matrix.ncols() {
            return Err(Error::shape(format!(
                "latent point has {} coordinates, model uses {}",
                coords.len(),
                self.q_matrix.ncols()
            )));
        }
        let views = self.views_for(window_v, window_s)?;
        Ok(views.iter().map(|v| v.value_grad(coords).0).sum())
    }

    /// Infer the latent coordinate of a new window by minimizing the view
    /// reconstruction terms, starting from the latent of the nearest
    /// training window in (standardized) glucose space.
    pub fn infer_latent(
        &self,
        window_v: &[f64],
        window_s: Option<&[f64]>,
    ) -> Result<InferredLatent> {
        let v_std = self.primary_input(window_v, window_s)?;

        // Nearest training window in primary-view space.
        let mut nearest = 0;
        let mut best = f64::INFINITY;
        for r in 0..self.v_ref.nrows() {
            let mut d2 = 0.0;
            for c in 0..self.v_ref.ncols() {
                let diff = self.v_ref[(r, c)] - v_std[c];
                d2 += diff * diff;
            }
            if d2 < best {
                best = d2;
                nearest = r;
            }
        }
        let q0: Vec<f64> = self.q_matrix.row(nearest).iter().copied().collect();

        let views = self.views_for(window_v, window_s)?;
        let f = |q: &[f64]| views.iter().map(|v| v.value_grad(q).0).sum::<f64>();
        let g = |q: &[f64]| {
            let mut total = vec![0.0; q.len()];
            for view in &views {
                let (_, grad) = view.value_grad(q);
                for (t, gi) in total.iter_mut().zip(grad) {
                    *t += gi;
                }
            }
            total
        };
        let opt = ScgConfig::default()
            .with_max_iters(100)
            .with_rel_tol(1e-10)
            .with_grad_tol(1e-9);
        let out = scg_minimize(f, g, &q0, &opt);
        if out.trace.termination_reason == TerminationReason::NonFinite {
            log::warn!("latent inference failed; falling back to the nearest training latent");
            return Ok(InferredLatent {
                coords: DVector::from_vec(q0),
                fallback: true,
            });
        }
        Ok(InferredLatent {
            coords: DVector::from_vec(out.x),
            fallback: false,
        })
    }

    /// Predict the glycemic class of the target that follows a window.
    pub fn predict_label(
        &self,
        window_v: &[f64],
        window_s: Option<&[f64]>,
    ) -> Result<Prediction> {
        let latent = self.infer_latent(window_v, window_s)?;
        let coords: Vec<f64> = latent.coords.iter().copied().collect();
        let mut probs = [0.0f64; 3];
        for label in GlycemicLabel::ALL {
            let (mean, _) = self.head_cls[label.index()].posterior(&coords)?;
            probs[label.index()] = squash(mean[0]);
        }
        let total: f64 = probs.iter().sum();
        for p in probs.iter_mut() {
            *p /= total;
        }
        Ok(Prediction {
            label: label_from_probs(&probs),
            probs,
            fallback: latent.fallback,
        })
    }

    /// Predict the next glucose value (mean, variance) in raw mg/dl.
    pub fn predict_value(
        &self,
        window_v: &[f64],
        window_s: Option<&[f64]>,
    ) -> Result<ForecastStep> {
        let latent = self.infer_latent(window_v, window_s)?;
        let coords: Vec<f64> = latent.coords.iter().copied().collect();
        let (mean, var) = self.head_reg.posterior(&coords)?;
        Ok(ForecastStep {
            mean_mgdl: mean[0] * self.y_scaler.std + self.y_scaler.mean,
            var_mgdl2: var * self.y_scaler.std * self.y_scaler.std,
            fallback: latent.fallback,
        })
    }

    /// Forecast `horizon` consecutive targets by feeding each predicted mean
    /// back into the window. The context row is held fixed: future context
    /// is unobservable.
    pub fn recursive_forecast(
        &self,
        window_v: &[f64],
        window_s: Option<&[f64]>,
        horizon: usize,
    ) -> Result<Vec<ForecastStep>> {
        if horizon == 0 {
            return Err(Error::parameter("forecast horizon must be >= 1"));
        }
        let mut window = window_v.to_vec();
        let mut out = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let step = self.predict_value(&window, window_s)?;
            out.push(step);
            window.remove(0);
            window.push(step.mean_mgdl);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::finite_diff_check;
    use rand::Rng;

    #[test]
    fn reconstruction_gradient_matches_finite_differences() {
        let mut rng = crate::seeded_rng(31, 12);
        let n = 6;
        let qdim = 2;
        let q_train = DMatrix::from_fn(n, qdim, |_, _| rng.gen_range(-2.0..2.0));
        let params = KernelParams::new(1.2, 0.8, 1e-4).unwrap();
        let a_x = DMatrix::from_fn(n, 3, |_, _| rng.gen_range(-1.0..1.0));
        let view = ViewRef {
            q_train: &q_train,
            params: &params,
            a_x: &a_x,
            x_new: vec![0.3, -0.7, 1.1],
        };
        let x0 = [0.4, -0.9];
        let err = finite_diff_check(
            |q| view.value_grad(q).0,
            |q| view.value_grad(q).1,
            &x0,
            1e-6,
        );
        assert!(err <= 1e-7, "err = {err}");
    }

    #[test]
    fn argmax_basics() {
        assert_eq!(label_from_probs(&[0.2, 0.5, 0.3]), GlycemicLabel::Eu);
        assert_eq!(label_from_probs(&[0.1, 0.2, 0.7]), GlycemicLabel::Hyper);
        assert_eq!(label_from_probs(&[0.7, 0.2, 0.1]), GlycemicLabel::Hypo);
    }

    #[test]
    fn exact_ties_resolve_by_priority() {
        assert_eq!(label_from_probs(&[0.4, 0.2, 0.4]), GlycemicLabel::Hypo);
        assert_eq!(label_from_probs(&[0.3, 0.35, 0.35]), GlycemicLabel::Hyper);
        let third = 1.0 / 3.0;
        assert_eq!(label_from_probs(&[third, third, third]), GlycemicLabel::Hypo);
    }

    #[test]
    fn monotone_transforms_keep_the_argmax() {
        let mut rng = crate::seeded_rng(2, 9);
        use rand::Rng;
        for _ in 0..100 {
            let f: [f64; 3] = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let to_probs = |scores: [f64; 3]| {
                let mut p = scores.map(squash);
                let total: f64 = p.iter().sum();
                for v in p.iter_mut() {
                    *v /= total;
                }
                p
            };
            let base = label_from_probs(&to_probs(f));
            for (scale, shift) in [(0.5, 0.0), (2.0, 0.0), (1.0, 1.5), (3.0, -2.0)] {
                let t = f.map(|v| scale * v + shift);
                assert_eq!(label_from_probs(&to_probs(t)), base);
            }
        }
    }
}
