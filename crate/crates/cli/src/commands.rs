//! The seven batch commands. Every command resolves its settings from the
//! merged run configuration, writes only under its output directory, and
//! stamps a MANIFEST.json with the configuration digest so identical
//! configurations produce byte-identical artifacts.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use glycast::data::{
    align_side_to_series, fraction_split, holdout_split, parse_series_csv, parse_text_csv,
    sparsity_filter, synth_generate, unigram_featurize, windowize_with, write_series_csv,
    GlucoseSeries, MissingPolicy, SynthConfig, Thresholds, UserRecord, WindowedDataset,
};
use glycast::eval::{
    compare_models, stepwise_importance, EvalReport, EvalSettings, ImportanceReport, ModelKind,
    SignalGroup, SplitDataset,
};
use glycast::kernels::KernelParams;
use glycast::msgp::{objective_value_grad, ContextMode, LatentModel, TrainConfig};
use glycast::optim::finite_diff_check;

use crate::config::{RunConfig, UsageError};

/// Anything a command can fail with, mapped to an exit code by `main`.
pub enum CmdError {
    Usage(String),
    Lib(glycast::Error),
}

impl From<UsageError> for CmdError {
    fn from(e: UsageError) -> Self {
        CmdError::Usage(e.0)
    }
}

impl From<glycast::Error> for CmdError {
    fn from(e: glycast::Error) -> Self {
        CmdError::Lib(e)
    }
}

type CmdResult = Result<(), CmdError>;

fn digest(cfg: &RunConfig, command: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(cfg.canonical(command).as_bytes());
    let bytes = hasher.finalize();
    bytes.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    config_digest: String,
    files: Vec<String>,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    cfg: &RunConfig,
    files: &[&str],
) -> Result<(), glycast::Error> {
    let manifest = Manifest {
        command: command.to_string(),
        config_digest: digest(cfg, command),
        files: files.iter().map(|s| s.to_string()).collect(),
    };
    let file = std::fs::File::create(out_dir.join("MANIFEST.json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &manifest)
        .map_err(glycast::Error::from)?;
    Ok(())
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf, CmdError> {
    let out = cfg.require_path("out_dir")?;
    std::fs::create_dir_all(&out).map_err(glycast::Error::from)?;
    Ok(out)
}

fn thresholds(cfg: &RunConfig) -> Result<Thresholds, CmdError> {
    let hypo = cfg.parse_or("hypo_mgdl", 70.0)?;
    let hyper = cfg.parse_or("hyper_mgdl", 180.0)?;
    Ok(Thresholds::new(hypo, hyper)?)
}

fn policy(cfg: &RunConfig) -> Result<MissingPolicy, CmdError> {
    match cfg.get("policy") {
        None => Ok(MissingPolicy::Drop),
        Some(raw) => raw.parse().map_err(|_| {
            CmdError::Usage(format!("bad value for `policy`: `{raw}` (drop | forward_fill)"))
        }),
    }
}

fn context_mode(cfg: &RunConfig) -> Result<ContextMode, CmdError> {
    match cfg.get("context_mode") {
        None => Ok(ContextMode::SharedLatent),
        Some(raw) => raw
            .parse()
            .map_err(|_| CmdError::Usage(format!("bad value for `context_mode`: `{raw}`"))),
    }
}

fn eval_settings(cfg: &RunConfig) -> Result<EvalSettings, CmdError> {
    Ok(EvalSettings {
        latent_dim: cfg.parse_or("latent_dim", 5usize)?,
        max_iters: cfg.parse_or("max_iters", 200usize)?,
        rel_tol: cfg.parse_or("rel_tol", 1e-6)?,
        max_train_windows: cfg.parse_or("max_train_windows", 0usize)?,
        pooled: cfg.bool_or("pooled", false)?,
        l2: cfg.parse_or("l2", 1e-4)?,
        kcca_reg: cfg.parse_or("kcca_reg", 1e-3)?,
    })
}

/// Load users and attach side information from a side CSV or, failing that,
/// unigram features built from a text CSV and aggregated onto the glucose
/// observation grid.
fn load_users(cfg: &RunConfig) -> Result<Vec<UserRecord>, CmdError> {
    let glucose = cfg.require_path("glucose_csv")?;
    let side = cfg.path("side_csv");
    let mut users = parse_series_csv(&glucose, side.as_deref())?;

    if side.is_none() {
        if let Some(text_path) = cfg.path("text_csv") {
            let min_count = cfg.parse_or("min_count", 10usize)?;
            let bundles = parse_text_csv(&text_path)?;
            let sides = unigram_featurize(&bundles, min_count)?;
            for user in users.iter_mut() {
                if let Some(side) = sides.iter().find(|s| s.user_id == user.series.user_id) {
                    user.side = Some(align_side_to_series(side, &user.series)?);
                }
            }
        }
    }
    let min_bg = cfg.parse_or("min_bg", 0usize)?;
    Ok(sparsity_filter(users, min_bg))
}

struct WindowPlan {
    window_len: usize,
    horizon: usize,
    policy: MissingPolicy,
    thresholds: Thresholds,
    gap_feature: bool,
}

impl WindowPlan {
    fn from_config(cfg: &RunConfig) -> Result<WindowPlan, CmdError> {
        Ok(WindowPlan {
            window_len: cfg.parse_or("window_len", 6usize)?,
            horizon: cfg.parse_or("horizon", 6usize)?,
            policy: policy(cfg)?,
            thresholds: thresholds(cfg)?,
            gap_feature: cfg.bool_or("gap_feature", false)?,
        })
    }

    fn cut(&self, user: &UserRecord) -> Result<WindowedDataset, glycast::Error> {
        let w = windowize_with(
            &user.series,
            user.side.as_ref(),
            self.window_len,
            self.horizon,
            self.policy,
            &self.thresholds,
        )?;
        Ok(if self.gap_feature { w.with_gap_feature() } else { w })
    }
}

fn build_split(cfg: &RunConfig, users: &[UserRecord]) -> Result<SplitDataset, CmdError> {
    let plan = WindowPlan::from_config(cfg)?;
    let split_kind = cfg.get("split").unwrap_or("fraction");
    let test_fraction = cfg.parse_or("test_fraction", 0.25)?;
    let seed: u64 = cfg.parse_or("seed", 0u64)?;

    let mut trains = Vec::new();
    let mut tests = Vec::new();
    for user in users {
        let windows = plan.cut(user)?;
        if windows.is_empty() {
            continue;
        }
        let (train, test) = match split_kind {
            "fraction" => fraction_split(&windows, test_fraction)?,
            "week" => holdout_split(&user.series, &windows, seed)?,
            other => {
                return Err(CmdError::Usage(format!(
                    "bad value for `split`: `{other}` (fraction | week)"
                )))
            }
        };
        trains.push(train);
        tests.push(test);
    }
    if trains.is_empty() {
        return Err(CmdError::Lib(glycast::Error::Shape(
            "no user produced any windows".into(),
        )));
    }
    Ok(SplitDataset {
        train: WindowedDataset::concat(&trains.iter().collect::<Vec<_>>())?,
        test: WindowedDataset::concat(&tests.iter().collect::<Vec<_>>())?,
    })
}

fn synth_config(cfg: &RunConfig) -> Result<SynthConfig, CmdError> {
    Ok(SynthConfig {
        n_users: cfg.parse_or("users", 5usize)?,
        points_per_user: cfg.parse_or("points", 500usize)?,
        latent_freq: cfg.parse_or("latent_freq", 0.005)?,
        context_informative: cfg.bool_or("context_informative", true)?,
        noise_sd: cfg.parse_or("noise_sd", 12.0)?,
        seed: cfg.parse_or("seed", 0u64)?,
    })
}

pub fn cmd_synth(cfg: &RunConfig) -> CmdResult {
    let out = ensure_out_dir(cfg)?;
    let users = synth_generate(&synth_config(cfg)?)?;
    let records: Vec<UserRecord> = users
        .into_iter()
        .map(|u| UserRecord {
            series: u.series,
            side: Some(u.side),
        })
        .collect();
    write_series_csv(&records, &out.join("glucose.csv"), Some(&out.join("side.csv")))?;
    write_manifest(&out, "synth", cfg, &["glucose.csv", "side.csv"])?;
    Ok(())
}

fn model_filename(user_id: &str) -> String {
    let safe: String = user_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("model.{safe}.json")
}

pub fn cmd_train(cfg: &RunConfig) -> CmdResult {
    let out = ensure_out_dir(cfg)?;
    let users = load_users(cfg)?;
    let plan = WindowPlan::from_config(cfg)?;
    let mode = context_mode(cfg)?;
    let settings = eval_settings(cfg)?;
    let train_cfg = TrainConfig {
        latent_dim: settings.latent_dim,
        max_iters: settings.max_iters,
        rel_tol: settings.rel_tol,
        seed: cfg.parse_or("seed", 0u64)?,
        context_mode: mode,
    };

    let mut files = Vec::new();
    let mut fit = |name: String, windows: &WindowedDataset| -> Result<(), CmdError> {
        let mut w = windows.clone();
        if settings.max_train_windows > 0 {
            w = w.thin(settings.max_train_windows);
        }
        let side = if mode == ContextMode::None || !w.has_side() {
            None
        } else {
            Some(&w.s)
        };
        let model = LatentModel::train(&w.v, side, &w.y_value, &w.y_label, &train_cfg)?;
        model.save_to_path(&out.join(&name))?;
        if !model.converged() {
            log::warn!("{name}: optimizer hit max_iters before the tolerance");
        }
        files.push(name);
        Ok(())
    };

    if settings.pooled {
        let all: Vec<WindowedDataset> = users
            .iter()
            .map(|u| plan.cut(u))
            .collect::<Result<_, _>>()?;
        let nonempty: Vec<&WindowedDataset> = all.iter().filter(|w| !w.is_empty()).collect();
        if nonempty.is_empty() {
            return Err(CmdError::Lib(glycast::Error::Shape(
                "no user produced any windows".into(),
            )));
        }
        let pooled = WindowedDataset::concat(&nonempty)?;
        fit("model.pooled.json".to_string(), &pooled)?;
    } else {
        for user in &users {
            let windows = plan.cut(user)?;
            if windows.is_empty() {
                log::warn!("user `{}` has no usable windows; skipped", user.series.user_id);
                continue;
            }
            fit(model_filename(&user.series.user_id), &windows)?;
        }
        if files.is_empty() {
            return Err(CmdError::Lib(glycast::Error::Shape(
                "no user produced any windows".into(),
            )));
        }
    }

    let file_refs: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
    write_manifest(&out, "train", cfg, &file_refs)?;
    Ok(())
}

/// Latest fully observed window of a series under the missing-value policy.
fn latest_window(
    series: &GlucoseSeries,
    window_len: usize,
    policy: MissingPolicy,
) -> Option<(Vec<f64>, usize)> {
    let mut values = series.values.clone();
    if policy == MissingPolicy::ForwardFill {
        let mut last = None;
        for v in values.iter_mut() {
            if *v == glycast::data::MISSING {
                if let Some(prev) = last {
                    *v = prev;
                }
            } else {
                last = Some(*v);
            }
        }
    }
    if values.len() < window_len {
        return None;
    }
    for start in (0..=values.len() - window_len).rev() {
        let window = &values[start..start + window_len];
        if window.iter().all(|v| *v != glycast::data::MISSING) {
            return Some((window.to_vec(), start + window_len - 1));
        }
    }
    None
}

pub fn cmd_predict(cfg: &RunConfig) -> CmdResult {
    let out = ensure_out_dir(cfg)?;
    let model_dir = cfg.path("model_dir").unwrap_or_else(|| out.clone());
    let users = load_users(cfg)?;
    let steps: usize = cfg.parse_or("steps", 6usize)?;
    let pol = policy(cfg)?;
    let thr = thresholds(cfg)?;

    let pooled_path = model_dir.join("model.pooled.json");
    let mut rows: Vec<String> = Vec::new();
    for user in &users {
        let per_user = model_dir.join(model_filename(&user.series.user_id));
        let model_path = if per_user.exists() {
            per_user
        } else if pooled_path.exists() {
            pooled_path.clone()
        } else {
            return Err(CmdError::Lib(glycast::Error::Schema(format!(
                "no model file for user `{}` under {}",
                user.series.user_id,
                model_dir.display()
            ))));
        };
        let model = LatentModel::load_from_path(&model_path)?;
        let Some((window, end_idx)) = latest_window(&user.series, model.window_len(), pol) else {
            log::warn!(
                "user `{}` has no complete window of length {}; skipped",
                user.series.user_id,
                model.window_len()
            );
            continue;
        };
        let side_row: Option<Vec<f64>> = user.side.as_ref().and_then(|s| {
            if model.side_dim() == s.features.ncols() {
                Some((0..s.features.ncols()).map(|c| s.features[(end_idx, c)]).collect())
            } else {
                None
            }
        });
        let forecast =
            model.recursive_forecast(&window, side_row.as_deref(), steps)?;
        let interval = user.series.sampling_interval();
        let last_ts = user.series.timestamps[end_idx];
        for (k, step) in forecast.iter().enumerate() {
            let ts = last_ts + interval * (k as i64 + 1);
            rows.push(format!(
                "{},{},{},{},{},{}",
                user.series.user_id,
                ts,
                k + 1,
                step.mean_mgdl,
                step.var_mgdl2,
                thr.label_for(step.mean_mgdl).as_str()
            ));
        }
    }

    let mut file = std::io::BufWriter::new(
        std::fs::File::create(out.join("predictions.csv")).map_err(glycast::Error::from)?,
    );
    writeln!(file, "user_id,timestamp_min,step,pred_mean_mgdl,pred_var,pred_label")
        .map_err(glycast::Error::from)?;
    for row in &rows {
        writeln!(file, "{row}").map_err(glycast::Error::from)?;
    }
    file.flush().map_err(glycast::Error::from)?;
    write_manifest(&out, "predict", cfg, &["predictions.csv"])?;
    Ok(())
}

fn parse_models(cfg: &RunConfig) -> Result<Vec<ModelKind>, CmdError> {
    cfg.list_or("models", "lr,kcca,gp,gp_social,gp_context")
        .iter()
        .map(|name| {
            name.parse()
                .map_err(|_| CmdError::Usage(format!("bad model name `{name}`")))
        })
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), glycast::Error> {
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig) -> CmdResult {
    let out = ensure_out_dir(cfg)?;
    let users = load_users(cfg)?;
    let split = build_split(cfg, &users)?;
    let kinds = parse_models(cfg)?;
    let settings = eval_settings(cfg)?;
    let seed: u64 = cfg.parse_or("seed", 0u64)?;
    let reports: Vec<EvalReport> = compare_models(&split, &kinds, &settings, seed)?;
    write_json(&out.join("report.json"), &reports)?;
    write_manifest(&out, "evaluate", cfg, &["report.json"])?;
    for report in &reports {
        match (&report.metrics, report.rmse) {
            (Some(m), Some(r)) => log::info!(
                "{}: overall precision {:.3}, recall {:.3}, rmse {:.1}",
                report.model_name,
                m.overall_precision,
                m.overall_recall,
                r
            ),
            (Some(m), None) => log::info!(
                "{}: overall precision {:.3}, recall {:.3}",
                report.model_name,
                m.overall_precision,
                m.overall_recall
            ),
            _ => log::warn!("{}: failed ({})", report.model_name, report.error),
        }
    }
    Ok(())
}

pub fn cmd_importance(cfg: &RunConfig) -> CmdResult {
    let out = ensure_out_dir(cfg)?;
    let users = load_users(cfg)?;
    let split = build_split(cfg, &users)?;
    let settings = eval_settings(cfg)?;
    let seed: u64 = cfg.parse_or("seed", 0u64)?;
    let names = match cfg.get("signals") {
        Some(_) => cfg.list_or("signals", ""),
        None => split.train.side_names.clone(),
    };
    for name in &names {
        if !split.train.side_names.contains(name) {
            return Err(CmdError::Usage(format!("unknown signal `{name}`")));
        }
    }
    let report: ImportanceReport =
        stepwise_importance(&split, &SignalGroup::per_column(&names), &settings, seed)?;
    write_json(&out.join("importance.json"), &report)?;
    write_manifest(&out, "importance", cfg, &["importance.json"])?;
    Ok(())
}

#[derive(Serialize)]
struct SparsityLevel {
    min_bg: usize,
    users_retained: usize,
    reports: Vec<EvalReport>,
}

pub fn cmd_sparsity(cfg: &RunConfig) -> CmdResult {
    let out = ensure_out_dir(cfg)?;
    let users = load_users(cfg)?;
    let kinds = parse_models(cfg)?;
    let settings = eval_settings(cfg)?;
    let seed: u64 = cfg.parse_or("seed", 0u64)?;
    let levels: Vec<usize> = cfg
        .list_or("min_bg_levels", "0,25,50")
        .iter()
        .map(|raw| {
            raw.parse()
                .map_err(|_| CmdError::Usage(format!("bad min_bg level `{raw}`")))
        })
        .collect::<Result<_, _>>()?;

    let mut results = Vec::new();
    for min_bg in levels {
        let retained = sparsity_filter(users.clone(), min_bg);
        if retained.is_empty() {
            log::warn!("min_bg {min_bg} retains no users; level skipped");
            results.push(SparsityLevel {
                min_bg,
                users_retained: 0,
                reports: Vec::new(),
            });
            continue;
        }
        let split = build_split(cfg, &retained)?;
        let reports = compare_models(&split, &kinds, &settings, seed)?;
        results.push(SparsityLevel {
            min_bg,
            users_retained: retained.len(),
            reports,
        });
    }
    write_json(&out.join("sparsity.json"), &results)?;
    write_manifest(&out, "sparsity", cfg, &["sparsity.json"])?;
    Ok(())
}

/// Finite-difference sweep over seeded latent-model instances; prints the
/// worst relative error. Exits nonzero (numerical failure) above 1e-4.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CmdResult {
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};

    let seed: u64 = cfg.parse_or("seed", 0u64)?;
    let mut worst = 0.0f64;
    for case in 0..20u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(case));
        let n = rng.gen_range(2..=8);
        let qdim = rng.gen_range(1..=3);
        let dv = rng.gen_range(1..=4);
        let ds = rng.gen_range(1..=5);
        let v = DMatrix::from_fn(n, dv, |_, _| rng.gen_range(-1.5..1.5));
        let s_full = DMatrix::from_fn(n, ds, |_, _| rng.gen_range(-1.5..1.5));
        let s = if case % 5 == 4 { None } else { Some(&s_full) };
        let q0 = DMatrix::from_fn(n, qdim, |_, _| rng.gen_range(-2.5..2.5));
        let pv = KernelParams::new(rng.gen_range(0.5..2.0), rng.gen_range(0.3..0.8), 1e-3)
            .expect("valid params");
        let ps = KernelParams::new(rng.gen_range(0.5..2.0), rng.gen_range(0.3..0.8), 1e-3)
            .expect("valid params");
        let dim = n * qdim + 2 + if s.is_some() { 2 } else { 0 };
        let mut x0 = Vec::with_capacity(dim);
        for i in 0..n {
            for m in 0..qdim {
                x0.push(q0[(i, m)]);
            }
        }
        x0.extend_from_slice(&[pv.log_signal_var, pv.log_inv_lengthscale]);
        if s.is_some() {
            x0.extend_from_slice(&[ps.log_signal_var, ps.log_inv_lengthscale]);
        }
        let eval = |x: &[f64]| -> (f64, Vec<f64>) {
            let q = DMatrix::from_fn(n, qdim, |i, m| x[i * qdim + m]);
            let pv_x = KernelParams::from_log(x[n * qdim], x[n * qdim + 1], pv.jitter)
                .expect("valid params");
            let ps_x = if s.is_some() {
                KernelParams::from_log(x[n * qdim + 2], x[n * qdim + 3], ps.jitter)
                    .expect("valid params")
            } else {
                ps
            };
            let (value, grad) =
                objective_value_grad(&q, &pv_x, &ps_x, &v, s).expect("jittered kernel factors");
            let mut packed = Vec::with_capacity(dim);
            for i in 0..n {
                for m in 0..qdim {
                    packed.push(grad.latent[(i, m)]);
                }
            }
            packed.extend_from_slice(&[grad.hyper_v.0, grad.hyper_v.1]);
            if let Some((a, b)) = grad.hyper_s {
                packed.extend_from_slice(&[a, b]);
            }
            (value, packed)
        };
        let err = finite_diff_check(|x| eval(x).0, |x| eval(x).1, &x0, 1e-6);
        worst = worst.max(err);
    }
    println!("max relative error: {worst:e}");
    if worst <= 1e-4 {
        Ok(())
    } else {
        Err(CmdError::Lib(glycast::Error::NonFinite(format!(
            "gradient check failed: max relative error {worst:e} > 1e-4"
        ))))
    }
}
