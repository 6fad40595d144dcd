//! Two-view shared-latent-space Gaussian process model.
//!
//! Training learns one latent coordinate per supervised window jointly with
//! the kernel hyperparameters of each view by minimizing the negative log
//! posterior with Scaled Conjugate Gradient, then fits Gaussian process
//! prediction heads (next value, and one-vs-rest class scores) on the
//! learned coordinates.

mod infer;
mod objective;

pub use infer::{label_from_probs, ForecastStep, InferredLatent, Prediction};
pub use objective::{
    objective, objective_grad, objective_parts, objective_value_grad, ObjectiveGrad,
    ObjectiveParts,
};

use nalgebra::{DMatrix, DVector};
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::data::{standardize_apply, standardize_fit, GlycemicLabel, StandardizationStats};
use crate::error::{Error, Result};
use crate::gp::{gp_fit_hyper_restarts, GpModel};
use crate::kernels::{default_jitter, kernel_matrix, KernelParams};
use crate::linalg::{chol_solve_mat, cholesky_lower};
use crate::optim::{scg_minimize, ScgConfig};
use objective::LatentProblem;

/// Version tag written into serialized model files.
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// How context features enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    /// Glucose windows only.
    None,
    /// Context concatenated onto the glucose window, single view.
    EarlyFusion,
    /// Separate glucose and context views over one latent space.
    SharedLatent,
}

impl ContextMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ContextMode::None => "none",
            ContextMode::EarlyFusion => "early_fusion",
            ContextMode::SharedLatent => "shared_latent",
        }
    }
}

impl std::str::FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(ContextMode::None),
            "early_fusion" => Ok(ContextMode::EarlyFusion),
            "shared_latent" => Ok(ContextMode::SharedLatent),
            other => Err(Error::parameter(format!(
                "unknown context mode `{other}` (expected none | early_fusion | shared_latent)"
            ))),
        }
    }
}

/// Training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub seed: u64,
    pub context_mode: ContextMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            latent_dim: 5,
            max_iters: 200,
            rel_tol: 1e-6,
            seed: 0,
            context_mode: ContextMode::SharedLatent,
        }
    }
}

/// Target scaling captured at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

/// A trained shared-latent model. Immutable once built; inference methods
/// take `&self` and are safe to call concurrently.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "LatentModelData", into = "LatentModelData")]
pub struct LatentModel {
    q_matrix: DMatrix<f64>,
    params_v: KernelParams,
    params_s: Option<KernelParams>,
    /// Standardized primary view (fused when early fusion is active).
    v_ref: DMatrix<f64>,
    /// Standardized context view (shared-latent mode only).
    s_ref: Option<DMatrix<f64>>,
    head_reg: GpModel,
    head_cls: [GpModel; 3],
    v_scaler: StandardizationStats,
    s_scaler: Option<StandardizationStats>,
    y_scaler: TargetScaler,
    config: TrainConfig,
    raw_v_dim: usize,
    raw_s_dim: usize,
    final_objective: f64,
    /// Accepted objective values during training, starting at the initial
    /// point; non-increasing.
    objective_trace: Vec<f64>,
    converged: bool,
    cache: InferCache,
}

/// Per-view solves reused by test-time latent inference. Rebuilt on load,
/// never serialized.
#[derive(Debug, Clone)]
struct InferCache {
    /// K_v^{-1} V_ref.
    a_v: DMatrix<f64>,
    a_s: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LatentModelData {
    format_version: u32,
    q_matrix: DMatrix<f64>,
    params_v: KernelParams,
    params_s: Option<KernelParams>,
    v_ref: DMatrix<f64>,
    s_ref: Option<DMatrix<f64>>,
    head_reg: GpModel,
    head_cls: [GpModel; 3],
    v_scaler: StandardizationStats,
    s_scaler: Option<StandardizationStats>,
    y_scaler: TargetScaler,
    config: TrainConfig,
    raw_v_dim: usize,
    raw_s_dim: usize,
    final_objective: f64,
    objective_trace: Vec<f64>,
    converged: bool,
}

impl From<LatentModel> for LatentModelData {
    fn from(m: LatentModel) -> Self {
        LatentModelData {
            format_version: MODEL_FORMAT_VERSION,
            q_matrix: m.q_matrix,
            params_v: m.params_v,
            params_s: m.params_s,
            v_ref: m.v_ref,
            s_ref: m.s_ref,
            head_reg: m.head_reg,
            head_cls: m.head_cls,
            v_scaler: m.v_scaler,
            s_scaler: m.s_scaler,
            y_scaler: m.y_scaler,
            config: m.config,
            raw_v_dim: m.raw_v_dim,
            raw_s_dim: m.raw_s_dim,
            final_objective: m.final_objective,
            objective_trace: m.objective_trace,
            converged: m.converged,
        }
    }
}

impl TryFrom<LatentModelData> for LatentModel {
    type Error = Error;

    fn try_from(d: LatentModelData) -> Result<Self> {
        if d.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Schema(format!(
                "model format version {} not supported (expected {MODEL_FORMAT_VERSION})",
                d.format_version
            )));
        }
        let cache = InferCache::build(
            &d.q_matrix,
            &d.params_v,
            d.params_s.as_ref(),
            &d.v_ref,
            d.s_ref.as_ref(),
        )?;
        Ok(LatentModel {
            q_matrix: d.q_matrix,
            params_v: d.params_v,
            params_s: d.params_s,
            v_ref: d.v_ref,
            s_ref: d.s_ref,
            head_reg: d.head_reg,
            head_cls: d.head_cls,
            v_scaler: d.v_scaler,
            s_scaler: d.s_scaler,
            y_scaler: d.y_scaler,
            config: d.config,
            raw_v_dim: d.raw_v_dim,
            raw_s_dim: d.raw_s_dim,
            final_objective: d.final_objective,
            objective_trace: d.objective_trace,
            converged: d.converged,
            cache,
        })
    }
}

impl InferCache {
    fn build(
        q: &DMatrix<f64>,
        params_v: &KernelParams,
        params_s: Option<&KernelParams>,
        v_ref: &DMatrix<f64>,
        s_ref: Option<&DMatrix<f64>>,
    ) -> Result<InferCache> {
        let k_v = kernel_matrix(q, params_v)?.values;
        let l_v = cholesky_lower(&k_v, "glucose view")?;
        let a_v = chol_solve_mat(&l_v, v_ref);
        let a_s = match (params_s, s_ref) {
            (Some(ps), Some(s)) => {
                let k_s = kernel_matrix(q, ps)?.values;
                let l_s = cholesky_lower(&k_s, "context view")?;
                Some(chol_solve_mat(&l_s, s))
            }
            _ => None,
        };
        Ok(InferCache { a_v, a_s })
    }
}

/// Principal-component initialization of the latent matrix: project the
/// column-standardized concatenation `[V | S]` onto its top components, then
/// add a seeded jitter of magnitude 1e-4 to break ties.
pub fn init_latent(
    v: &DMatrix<f64>,
    s: Option<&DMatrix<f64>>,
    latent_dim: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let scores = pca_project(v, s, latent_dim)?;
    let mut rng = crate::seeded_rng(seed, 0x696e6974);
    let noise = DMatrix::from_fn(scores.nrows(), scores.ncols(), |_, _| {
        let e: f64 = rand_distr::StandardNormal.sample(&mut rng);
        1e-4 * e
    });
    Ok(scores + noise)
}

/// Deterministic part of [`init_latent`]: the principal-component scores of
/// the column-standardized concatenation, zero when the data has no
/// variance.
pub fn pca_project(
    v: &DMatrix<f64>,
    s: Option<&DMatrix<f64>>,
    latent_dim: usize,
) -> Result<DMatrix<f64>> {
    let n = v.nrows();
    let d_total = v.ncols() + s.map_or(0, |s| s.ncols());
    if latent_dim == 0 || latent_dim > d_total.min(n) {
        return Err(Error::shape(format!(
            "latent dim {latent_dim} must lie in 1..={} for {n} x {d_total} data",
            d_total.min(n)
        )));
    }
    let mut m = DMatrix::zeros(n, d_total);
    for r in 0..n {
        for c in 0..v.ncols() {
            m[(r, c)] = v[(r, c)];
        }
        if let Some(s) = s {
            for c in 0..s.ncols() {
                m[(r, v.ncols() + c)] = s[(r, c)];
            }
        }
    }
    let stats = standardize_fit(&m)?;
    let m_std = standardize_apply(&stats, &m)?;

    let svd = m_std.clone().svd(true, false);
    let u = svd.u.as_ref().expect("u requested");
    let mut scores = DMatrix::zeros(n, latent_dim);
    let rank = svd.singular_values.len();
    let mut any_variance = false;
    for k in 0..latent_dim.min(rank) {
        let sigma = svd.singular_values[k];
        if sigma > 1e-12 {
            any_variance = true;
        }
        for r in 0..n {
            scores[(r, k)] = u[(r, k)] * sigma;
        }
    }
    if !any_variance {
        log::warn!("latent initialization data has no variance; starting from noise alone");
    }
    Ok(scores)
}

impl LatentModel {
    /// Learn latents and hyperparameters, then fit the prediction heads.
    ///
    /// `v` holds raw glucose windows (one row per pair, mg/dl), `s` the raw
    /// context rows, `y_value` the raw targets. Deterministic given
    /// `config.seed`.
    pub fn train(
        v: &DMatrix<f64>,
        s: Option<&DMatrix<f64>>,
        y_value: &DVector<f64>,
        y_label: &[GlycemicLabel],
        config: &TrainConfig,
    ) -> Result<LatentModel> {
        let n = v.nrows();
        if n < 2 {
            return Err(Error::shape("training needs at least two windows"));
        }
        if y_value.len() != n || y_label.len() != n {
            return Err(Error::shape(format!(
                "{n} windows but {} values / {} labels",
                y_value.len(),
                y_label.len()
            )));
        }
        let raw_v_dim = v.ncols();
        let raw_s_dim = s.map_or(0, |s| s.ncols());
        if matches!(config.context_mode, ContextMode::EarlyFusion | ContextMode::SharedLatent)
            && raw_s_dim == 0
        {
            return Err(Error::shape(format!(
                "context mode `{}` needs side features",
                config.context_mode.as_str()
            )));
        }

        // Effective views.
        let v_eff: DMatrix<f64> = match config.context_mode {
            ContextMode::None => v.clone(),
            ContextMode::SharedLatent => v.clone(),
            ContextMode::EarlyFusion => {
                let s = s.expect("checked above");
                DMatrix::from_fn(n, raw_v_dim + raw_s_dim, |r, c| {
                    if c < raw_v_dim {
                        v[(r, c)]
                    } else {
                        s[(r, c - raw_v_dim)]
                    }
                })
            }
        };
        let s_eff: Option<DMatrix<f64>> = match config.context_mode {
            ContextMode::SharedLatent => s.cloned(),
            _ => None,
        };

        let v_scaler = standardize_fit(&v_eff)?;
        let v_std = standardize_apply(&v_scaler, &v_eff)?;
        let (s_scaler, s_std) = match &s_eff {
            Some(s) => {
                let sc = standardize_fit(s)?;
                let std = standardize_apply(&sc, s)?;
                (Some(sc), Some(std))
            }
            None => (None, None),
        };

        let d_total = v_std.ncols() + s_std.as_ref().map_or(0, |s| s.ncols());
        let q_dim = config.latent_dim;
        if q_dim == 0 || q_dim > d_total.min(n - 1) {
            return Err(Error::shape(format!(
                "latent dim {q_dim} must lie in 1..=min({d_total}, {})",
                n - 1
            )));
        }

        let q0 = init_latent(&v_std, s_std.as_ref(), q_dim, config.seed)?;
        let jitter = default_jitter(1.0);
        let params0 = KernelParams::new(1.0, 1.0, jitter)?;

        let problem = LatentProblem::new(&v_std, s_std.as_ref(), q_dim, jitter, jitter);
        let x0 = problem.pack(&q0, &params0, &params0);
        let opt = ScgConfig::default()
            .with_max_iters(config.max_iters)
            .with_rel_tol(config.rel_tol);
        let (f, g) = crate::optim::memoized(|x: &[f64]| problem.value_grad(x));
        let out = scg_minimize(f, g, &x0, &opt);
        if !out.value.is_finite() {
            return Err(Error::IllConditioned {
                view: "latent optimization".to_string(),
            });
        }
        let (q_matrix, params_v, params_s_all) = problem.unpack(&out.x)?;
        let params_s = s_std.as_ref().map(|_| params_s_all);
        let converged = out.trace.converged;
        let final_objective = out.value;
        let objective_trace = out.trace.objective_values;

        // Standardize targets, then fit the heads on the learned latents.
        let y_mean = y_value.sum() / n as f64;
        let y_var = y_value.iter().map(|y| (y - y_mean) * (y - y_mean)).sum::<f64>()
            / (n as f64 - 1.0).max(1.0);
        let y_std = if y_var.sqrt() < 1e-12 { 1.0 } else { y_var.sqrt() };
        let y_scaled = DMatrix::from_fn(n, 1, |r, _| (y_value[r] - y_mean) / y_std);

        // Latents land on a standardized scale, so the unit init is already
        // in the right regime and a single start suffices for the heads.
        let head_opt = ScgConfig::default().with_max_iters(60);
        let head_reg = gp_fit_hyper_restarts(&q_matrix, &y_scaled, KernelParams::unit(), 0.1, &head_opt, 0)?;
        let mut heads = Vec::with_capacity(3);
        for class in GlycemicLabel::ALL {
            let targets = DMatrix::from_fn(n, 1, |r, _| {
                if y_label[r] == class {
                    1.0
                } else {
                    -1.0
                }
            });
            heads.push(gp_fit_hyper_restarts(
                &q_matrix,
                &targets,
                KernelParams::unit(),
                0.1,
                &head_opt,
                0,
            )?);
        }
        let head_cls: [GpModel; 3] = heads.try_into().expect("three heads");

        let cache = InferCache::build(
            &q_matrix,
            &params_v,
            params_s.as_ref(),
            &v_std,
            s_std.as_ref(),
        )?;

        Ok(LatentModel {
            q_matrix,
            params_v,
            params_s,
            v_ref: v_std,
            s_ref: s_std,
            head_reg,
            head_cls,
            v_scaler,
            s_scaler,
            y_scaler: TargetScaler {
                mean: y_mean,
                std: y_std,
            },
            config: *config,
            raw_v_dim,
            raw_s_dim,
            final_objective,
            objective_trace,
            converged,
            cache,
        })
    }

    pub fn latent_matrix(&self) -> &DMatrix<f64> {
        &self.q_matrix
    }

    pub fn params_v(&self) -> &KernelParams {
        &self.params_v
    }

    pub fn params_s(&self) -> Option<&KernelParams> {
        self.params_s.as_ref()
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn final_objective(&self) -> f64 {
        self.final_objective
    }

    /// Accepted objective values during training (initial point first).
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    /// Standardized primary view the model was trained on.
    pub fn view_v(&self) -> &DMatrix<f64> {
        &self.v_ref
    }

    /// Standardized context view, when the model keeps a second view.
    pub fn view_s(&self) -> Option<&DMatrix<f64>> {
        self.s_ref.as_ref()
    }

    /// Recompute the objective at the stored solution.
    pub fn recomputed_objective(&self) -> Result<f64> {
        let fallback = KernelParams::from_log(0.0, 0.0, 0.0)?;
        objective(
            &self.q_matrix,
            &self.params_v,
            self.params_s.as_ref().unwrap_or(&fallback),
            &self.v_ref,
            self.s_ref.as_ref(),
        )
    }

    /// Window length the model was trained on.
    pub fn window_len(&self) -> usize {
        self.raw_v_dim
    }

    /// Context feature count the model was trained on (0 when none).
    pub fn side_dim(&self) -> usize {
        self.raw_s_dim
    }

    /// Serialize to a self-describing JSON model file.
    pub fn save<W: std::io::Write>(&self, writer: W) -> Result<()> {
        serde_json::to_writer(writer, self)?;
        Ok(())
    }

    pub fn save_to_path(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(file))
    }

    pub fn load<R: std::io::Read>(reader: R) -> Result<LatentModel> {
        Ok(serde_json::from_reader(reader)?)
    }

    pub fn load_from_path(path: &std::path::Path) -> Result<LatentModel> {
        let file = std::fs::File::open(path)?;
        LatentModel::load(std::io::BufReader::new(file))
    }
}
