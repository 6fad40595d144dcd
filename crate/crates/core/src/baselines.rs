//! Comparison models: multinomial logistic regression on fused features,
//! kernel canonical correlation analysis with projections for a downstream
//! classifier, and the early-fusion feature constructor.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::GlycemicLabel;
use crate::error::{Error, Result};
use crate::kernels::{kernel_matrix_nojitter, rbf, KernelParams};
use crate::linalg::{cholesky_lower, pairwise_sq_dists, require_finite};
use crate::msgp::label_from_probs;
use crate::optim::{memoized, scg_minimize, ScgConfig};

/// Concatenate one glucose window with one context row.
pub fn early_fusion(v_row: &[f64], s_row: &[f64]) -> Vec<f64> {
    let mut fused = Vec::with_capacity(v_row.len() + s_row.len());
    fused.extend_from_slice(v_row);
    fused.extend_from_slice(s_row);
    fused
}

/// Multinomial (softmax) logistic regression over the three glycemic
/// classes. Weights are `(p + 1) x 3` with the bias in row 0.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    weights: DMatrix<f64>,
    l2: f64,
}

fn softmax3(z: [f64; 3]) -> [f64; 3] {
    let m = z[0].max(z[1]).max(z[2]);
    let e = [(z[0] - m).exp(), (z[1] - m).exp(), (z[2] - m).exp()];
    let sum = e[0] + e[1] + e[2];
    [e[0] / sum, e[1] / sum, e[2] / sum]
}

impl LogisticModel {
    /// Class probabilities for one feature row, summing to 1.
    pub fn predict_proba(&self, features: &[f64]) -> Result<[f64; 3]> {
        if features.len() + 1 != self.weights.nrows() {
            return Err(Error::shape(format!(
                "{} features, model expects {}",
                features.len(),
                self.weights.nrows() - 1
            )));
        }
        let mut z = [0.0f64; 3];
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = self.weights[(0, c)];
            for (j, x) in features.iter().enumerate() {
                *zc += self.weights[(j + 1, c)] * x;
            }
        }
        Ok(softmax3(z))
    }

    pub fn predict(&self, features: &[f64]) -> Result<GlycemicLabel> {
        Ok(label_from_probs(&self.predict_proba(features)?))
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }
}

/// Cross-entropy (plus ridge penalty on non-bias weights) and its gradient
/// over the flattened weight matrix.
fn logistic_loss_grad(
    x: &[f64],
    features: &DMatrix<f64>,
    labels: &[GlycemicLabel],
    l2: f64,
) -> (f64, Vec<f64>) {
    let p1 = features.ncols() + 1;
    let n = features.nrows();
    let w = |j: usize, c: usize| x[j * 3 + c];
    let mut loss = 0.0;
    let mut grad = vec![0.0; x.len()];
    for r in 0..n {
        let mut z = [0.0f64; 3];
        for (c, zc) in z.iter_mut().enumerate() {
            *zc = w(0, c);
            for j in 1..p1 {
                *zc += w(j, c) * features[(r, j - 1)];
            }
        }
        let probs = softmax3(z);
        let y = labels[r].index();
        loss -= probs[y].max(1e-300).ln();
        for c in 0..3 {
            let delta = probs[c] - if c == y { 1.0 } else { 0.0 };
            grad[c] += delta; // bias row
            for j in 1..p1 {
                grad[j * 3 + c] += delta * features[(r, j - 1)];
            }
        }
    }
    // ridge on everything but the bias row
    for j in 1..p1 {
        for c in 0..3 {
            let wj = w(j, c);
            loss += 0.5 * l2 * wj * wj;
            grad[j * 3 + c] += l2 * wj;
        }
    }
    (loss, grad)
}

/// Fit the classifier by minimizing the ridge-penalized multinomial
/// cross-entropy with SCG, starting from zero weights.
pub fn logistic_train(
    features: &DMatrix<f64>,
    labels: &[GlycemicLabel],
    l2: f64,
) -> Result<LogisticModel> {
    let n = features.nrows();
    if n < 3 || labels.len() != n {
        return Err(Error::shape(format!(
            "logistic regression needs n >= 3 aligned rows, got {n} features and {} labels",
            labels.len()
        )));
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::parameter(format!("l2 must be >= 0, got {l2}")));
    }
    require_finite(features, "logistic features")?;
    let mut present = [false; 3];
    for l in labels {
        present[l.index()] = true;
    }
    if present.iter().filter(|p| **p).count() < 2 {
        return Err(Error::DegenerateLabels(
            "training labels cover a single class".to_string(),
        ));
    }

    let dim = (features.ncols() + 1) * 3;
    let (f, g) = memoized(|x: &[f64]| logistic_loss_grad(x, features, labels, l2));
    let opt = ScgConfig::default().with_max_iters(300).with_rel_tol(1e-10);
    let out = scg_minimize(f, g, &vec![0.0; dim], &opt);

    let weights = DMatrix::from_fn(features.ncols() + 1, 3, |j, c| out.x[j * 3 + c]);
    Ok(LogisticModel { weights, l2 })
}

/// Kernel choice for canonical correlation analysis. The linear kernel makes
/// the method coincide with classical CCA in the small-regularization limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum KccaKernel {
    Linear,
    Rbf(KernelParams),
}

impl KccaKernel {
    /// Bandwidth from the median pairwise squared distance of `x`.
    pub fn rbf_median_heuristic(x: &DMatrix<f64>) -> KccaKernel {
        let d2 = pairwise_sq_dists(x);
        let mut offdiag: Vec<f64> = Vec::new();
        for i in 0..x.nrows() {
            for j in (i + 1)..x.nrows() {
                offdiag.push(d2[(i, j)]);
            }
        }
        offdiag.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = offdiag.get(offdiag.len() / 2).copied().unwrap_or(1.0);
        let g = if median > 1e-12 { 1.0 / median } else { 1.0 };
        KccaKernel::Rbf(KernelParams::new(1.0, g, 0.0).expect("valid params"))
    }

    fn gram(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            KccaKernel::Linear => Ok(x * x.transpose()),
            KccaKernel::Rbf(p) => kernel_matrix_nojitter(x, p),
        }
    }

    fn cross(&self, x_new: &[f64], train: &DMatrix<f64>) -> Result<DVector<f64>> {
        let n = train.nrows();
        let mut k = DVector::zeros(n);
        for j in 0..n {
            let row: Vec<f64> = train.row(j).iter().copied().collect();
            k[j] = match self {
                KccaKernel::Linear => {
                    if x_new.len() != train.ncols() {
                        return Err(Error::shape(format!(
                            "point has {} dims, kernel expects {}",
                            x_new.len(),
                            train.ncols()
                        )));
                    }
                    x_new.iter().zip(&row).map(|(a, b)| a * b).sum()
                }
                KccaKernel::Rbf(p) => rbf(x_new, &row, p)?,
            };
        }
        Ok(k)
    }
}

/// Per-view quantities carried by a fitted KCCA model.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct KccaView {
    train: DMatrix<f64>,
    kernel: KccaKernel,
    /// Dual coefficients, one column per canonical component.
    proj: DMatrix<f64>,
    /// Column means of the uncentered training Gram matrix.
    gram_col_means: DVector<f64>,
    gram_grand_mean: f64,
}

impl KccaView {
    /// Project one point through the centered kernel map.
    fn project(&self, x_new: &[f64]) -> Result<DVector<f64>> {
        let n = self.train.nrows();
        let k = self.kernel.cross(x_new, &self.train)?;
        let k_mean = k.sum() / n as f64;
        let centered = DVector::from_fn(n, |j, _| {
            k[j] - k_mean - self.gram_col_means[j] + self.gram_grand_mean
        });
        Ok(self.proj.transpose() * centered)
    }
}

/// Regularized kernel CCA over two views.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KccaModel {
    view_v: KccaView,
    view_s: KccaView,
    pub reg: f64,
    pub components: usize,
    /// Canonical correlations, non-increasing, in [0, 1].
    pub correlations: Vec<f64>,
}

/// Fit regularized KCCA: solve the generalized eigenproblem on centered
/// Gram matrices via a Cholesky change of variables and one SVD.
///
/// Maximizes `a' Kv Ks b` under `a' (Kv^2 + reg I) a = 1` (same for `b`),
/// with `Kv`, `Ks` centered.
pub fn kcca_fit(
    v: &DMatrix<f64>,
    s: &DMatrix<f64>,
    kernel_v: KccaKernel,
    kernel_s: KccaKernel,
    reg: f64,
    components: usize,
) -> Result<KccaModel> {
    let n = v.nrows();
    if s.nrows() != n {
        return Err(Error::shape(format!(
            "views disagree on rows: {} vs {}",
            n,
            s.nrows()
        )));
    }
    if components == 0 || n < components + 1 {
        return Err(Error::shape(format!(
            "need n >= components + 1, got n = {n}, components = {components}"
        )));
    }
    if !(reg.is_finite() && reg > 0.0) {
        return Err(Error::parameter(format!("reg must be > 0, got {reg}")));
    }
    require_finite(v, "kcca view v")?;
    require_finite(s, "kcca view s")?;

    let gram_v = kernel_v.gram(v)?;
    let gram_s = kernel_s.gram(s)?;
    let center = |k: &DMatrix<f64>| {
        let n_f = n as f64;
        let col_means = DVector::from_fn(n, |j, _| k.column(j).sum() / n_f);
        let grand = col_means.sum() / n_f;
        let centered = DMatrix::from_fn(n, n, |i, j| {
            k[(i, j)] - col_means[i] - col_means[j] + grand
        });
        (centered, col_means, grand)
    };
    let (kc_v, means_v, grand_v) = center(&gram_v);
    let (kc_s, means_s, grand_s) = center(&gram_s);

    // B = Kc^2 + reg I is positive definite; factor both sides.
    let chol = |kc: &DMatrix<f64>, name: &str| -> Result<DMatrix<f64>> {
        let mut b = kc * kc;
        for i in 0..n {
            b[(i, i)] += reg;
        }
        cholesky_lower(&b, name).map_err(|_| Error::IllConditioned {
            view: format!("{name} (try a larger reg)"),
        })
    };
    let l_v = chol(&kc_v, "kcca view v")?;
    let l_s = chol(&kc_s, "kcca view s")?;

    // C = L_v^{-1} (Kc_v Kc_s) L_s^{-T}; its singular values are the
    // canonical correlations.
    let cross = &kc_v * &kc_s;
    let mut c = cross;
    assert!(l_v.solve_lower_triangular_mut(&mut c));
    let mut ct = c.transpose();
    assert!(l_s.solve_lower_triangular_mut(&mut ct));
    let c = ct.transpose();

    let svd = c.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");

    let mut correlations = Vec::with_capacity(components);
    let mut alpha = DMatrix::zeros(n, components);
    let mut beta = DMatrix::zeros(n, components);
    for k in 0..components {
        correlations.push(svd.singular_values[k].clamp(0.0, 1.0));
        let mut a_col = DVector::from_fn(n, |j, _| u[(j, k)]);
        assert!(l_v.tr_solve_lower_triangular_mut(&mut a_col));
        let mut b_col = DVector::from_fn(n, |j, _| vt[(k, j)]);
        assert!(l_s.tr_solve_lower_triangular_mut(&mut b_col));
        for j in 0..n {
            alpha[(j, k)] = a_col[j];
            beta[(j, k)] = b_col[j];
        }
    }

    Ok(KccaModel {
        view_v: KccaView {
            train: v.clone(),
            kernel: kernel_v,
            proj: alpha,
            gram_col_means: means_v,
            gram_grand_mean: grand_v,
        },
        view_s: KccaView {
            train: s.clone(),
            kernel: kernel_s,
            proj: beta,
            gram_col_means: means_s,
            gram_grand_mean: grand_s,
        },
        reg,
        components,
        correlations,
    })
}

/// Project a new point onto the canonical directions. With both views
/// present the two projections are averaged; with glucose only, the V-side
/// projection is returned alone.
pub fn kcca_project(
    model: &KccaModel,
    v_new: &[f64],
    s_new: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let z_v = model.view_v.project(v_new)?;
    match s_new {
        Some(s) => {
            let z_s = model.view_s.project(s)?;
            Ok((z_v + z_s) * 0.5)
        }
        None => Ok(z_v),
    }
}

impl KccaModel {
    /// Projections of the training rows (used to fit a downstream
    /// classifier on the canonical coordinates).
    pub fn project_training(&self, with_context: bool) -> Result<DMatrix<f64>> {
        let n = self.view_v.train.nrows();
        let mut out = DMatrix::zeros(n, self.components);
        for r in 0..n {
            let v_row: Vec<f64> = self.view_v.train.row(r).iter().copied().collect();
            let s_row: Vec<f64> = self.view_s.train.row(r).iter().copied().collect();
            let z = kcca_project(self, &v_row, if with_context { Some(&s_row) } else { None })?;
            for k in 0..self.components {
                out[(r, k)] = z[k];
            }
        }
        Ok(out)
    }
}
