//! Metrics and experiment harnesses: per-class precision/recall, RMSE,
//! side-by-side model comparison on a shared split, and the forward
//! step-wise contextual-importance procedure.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{kcca_fit, kcca_project, logistic_train, KccaKernel};
use crate::data::{GlycemicLabel, WindowedDataset};
use crate::error::{Error, Result};
use crate::msgp::{ContextMode, LatentModel, TrainConfig};

/// Schema version stamped into every emitted report.
pub const REPORT_VERSION: u32 = 1;

/// Precision/recall for one class. `zero_division` flags a precision whose
/// denominator was empty (no predictions of the class); the value is
/// reported as 0 rather than omitted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub support: usize,
    pub zero_division: bool,
}

/// Per-class and aggregate classification metrics. "Overall" is the
/// support-weighted average; macro averages (over classes with support) are
/// emitted alongside so either aggregation convention can be read off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub hypo: ClassMetrics,
    pub eu: ClassMetrics,
    pub hyper: ClassMetrics,
    pub overall_precision: f64,
    pub overall_recall: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub test_size: usize,
}

impl ClassificationMetrics {
    pub fn class(&self, label: GlycemicLabel) -> &ClassMetrics {
        match label {
            GlycemicLabel::Hypo => &self.hypo,
            GlycemicLabel::Eu => &self.eu,
            GlycemicLabel::Hyper => &self.hyper,
        }
    }
}

/// One model's evaluation on a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub model_name: String,
    pub status: String,
    /// Empty when status is "ok".
    pub error: String,
    pub metrics: Option<ClassificationMetrics>,
    /// Root-mean-square error of next-value predictions, mg/dl; absent for
    /// classification-only models.
    pub rmse: Option<f64>,
    pub config_digest: String,
}

/// Forward step-wise importance of contextual signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub report_version: u32,
    /// RMSE of the glucose-only model.
    pub base_rmse: f64,
    /// One entry per candidate signal, sorted by delta descending.
    pub entries: Vec<ImportanceEntry>,
    pub config_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceEntry {
    pub signal: String,
    pub rmse_after_adding: f64,
    /// `base_rmse - rmse_after_adding`; positive means the signal helped.
    pub delta: f64,
}

/// One candidate signal: a name and the side-feature columns it spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalGroup {
    pub name: String,
    pub columns: Vec<String>,
}

impl SignalGroup {
    /// One single-column group per side feature.
    pub fn per_column(names: &[String]) -> Vec<SignalGroup> {
        names
            .iter()
            .map(|n| SignalGroup {
                name: n.clone(),
                columns: vec![n.clone()],
            })
            .collect()
    }
}

/// Per-class precision and recall with support-weighted and macro
/// aggregates.
pub fn precision_recall(
    preds: &[GlycemicLabel],
    truth: &[GlycemicLabel],
) -> Result<ClassificationMetrics> {
    if preds.len() != truth.len() || preds.is_empty() {
        return Err(Error::shape(format!(
            "need equal non-empty label lists, got {} and {}",
            preds.len(),
            truth.len()
        )));
    }
    let mut confusion = [[0usize; 3]; 3]; // [truth][pred]
    for (p, t) in preds.iter().zip(truth) {
        confusion[t.index()][p.index()] += 1;
    }
    let per_class = |label: GlycemicLabel| {
        let c = label.index();
        let tp = confusion[c][c];
        let fp: usize = (0..3).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fn_: usize = (0..3).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let support = tp + fn_;
        let zero_division = tp + fp == 0;
        let precision = if zero_division {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if support == 0 {
            0.0
        } else {
            tp as f64 / support as f64
        };
        ClassMetrics {
            precision,
            recall,
            support,
            zero_division,
        }
    };
    let hypo = per_class(GlycemicLabel::Hypo);
    let eu = per_class(GlycemicLabel::Eu);
    let hyper = per_class(GlycemicLabel::Hyper);

    let total = truth.len() as f64;
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        [&hypo, &eu, &hyper]
            .iter()
            .map(|m| m.support as f64 * f(m))
            .sum::<f64>()
            / total
    };
    let supported: Vec<&ClassMetrics> = [&hypo, &eu, &hyper]
        .into_iter()
        .filter(|m| m.support > 0)
        .collect();
    let macro_avg = |f: fn(&ClassMetrics) -> f64| {
        supported.iter().map(|m| f(m)).sum::<f64>() / supported.len() as f64
    };

    Ok(ClassificationMetrics {
        hypo,
        eu,
        hyper,
        overall_precision: weighted(|m| m.precision),
        overall_recall: weighted(|m| m.recall),
        macro_precision: macro_avg(|m| m.precision),
        macro_recall: macro_avg(|m| m.recall),
        test_size: truth.len(),
    })
}

/// Root-mean-square error.
pub fn rmse(pred_values: &[f64], truth_values: &[f64]) -> Result<f64> {
    if pred_values.len() != truth_values.len() || pred_values.is_empty() {
        return Err(Error::shape(format!(
            "need equal non-empty value lists, got {} and {}",
            pred_values.len(),
            truth_values.len()
        )));
    }
    let mse = pred_values
        .iter()
        .zip(truth_values)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred_values.len() as f64;
    Ok(mse.sqrt())
}

/// Train/test windows sharing one geometry.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

/// Which pipeline to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Logistic regression on early-fused features.
    Logistic,
    /// Kernel CCA projections with a logistic read-out.
    Kcca,
    /// Latent GP on glucose windows alone.
    Gp,
    /// Latent GP on early-fused features.
    GpSocial,
    /// Two-view shared-latent GP.
    GpContext,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Logistic => "lr",
            ModelKind::Kcca => "kcca",
            ModelKind::Gp => "gp",
            ModelKind::GpSocial => "gp_social",
            ModelKind::GpContext => "gp_context",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lr" => Ok(ModelKind::Logistic),
            "kcca" => Ok(ModelKind::Kcca),
            "gp" => Ok(ModelKind::Gp),
            "gp_social" => Ok(ModelKind::GpSocial),
            "gp_context" => Ok(ModelKind::GpContext),
            other => Err(Error::parameter(format!(
                "unknown model `{other}` (expected lr | kcca | gp | gp_social | gp_context)"
            ))),
        }
    }
}

/// Shared experiment settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub latent_dim: usize,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Cap on latent-model training windows per fit (deterministic
    /// thinning); 0 disables the cap.
    pub max_train_windows: usize,
    /// Fit one latent model per user (the default) or a single pooled one.
    pub pooled: bool,
    pub l2: f64,
    pub kcca_reg: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            latent_dim: 5,
            max_iters: 200,
            rel_tol: 1e-6,
            max_train_windows: 0,
            pooled: false,
            l2: 1e-4,
            kcca_reg: 1e-3,
        }
    }
}

fn digest_for(name: &str, settings: &EvalSettings, seed: u64, split: &SplitDataset) -> String {
    let mut hasher = Sha256::new();
    hasher.update(name.as_bytes());
    hasher.update(format!(
        "|q={}|iters={}|tol={}|cap={}|pooled={}|l2={}|kreg={}|seed={seed}|w={}|h={}|ntrain={}|ntest={}",
        settings.latent_dim,
        settings.max_iters,
        settings.rel_tol,
        settings.max_train_windows,
        settings.pooled,
        settings.l2,
        settings.kcca_reg,
        split.train.window_len,
        split.train.horizon,
        split.train.len(),
        split.test.len(),
    ));
    hex_digest(hasher)
}

fn hex_digest(hasher: Sha256) -> String {
    let bytes = hasher.finalize();
    let mut out = String::with_capacity(16);
    for b in bytes.iter().take(8) {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn row_of(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

/// Labels (and, for the GP family, values) predicted for every test row.
struct TestPredictions {
    labels: Vec<GlycemicLabel>,
    values: Option<Vec<f64>>,
}

fn context_mode_for(kind: ModelKind) -> ContextMode {
    match kind {
        ModelKind::Gp => ContextMode::None,
        ModelKind::GpSocial => ContextMode::EarlyFusion,
        ModelKind::GpContext => ContextMode::SharedLatent,
        _ => unreachable!("only latent-GP kinds carry a context mode"),
    }
}

fn latent_predictions(
    kind: ModelKind,
    split: &SplitDataset,
    settings: &EvalSettings,
    seed: u64,
) -> Result<TestPredictions> {
    let mode = context_mode_for(kind);
    let config = TrainConfig {
        latent_dim: settings.latent_dim,
        max_iters: settings.max_iters,
        rel_tol: settings.rel_tol,
        seed,
        context_mode: mode,
    };
    let needs_side = mode != ContextMode::None;

    // user id -> train rows / test rows
    let fit_groups: Vec<(String, Vec<usize>, Vec<usize>)> = if settings.pooled {
        vec![(
            "pooled".to_string(),
            (0..split.train.len()).collect(),
            (0..split.test.len()).collect(),
        )]
    } else {
        let mut users: Vec<String> = split.test.user_ids.clone();
        users.sort();
        users.dedup();
        users
            .into_iter()
            .map(|u| {
                let train_rows: Vec<usize> = (0..split.train.len())
                    .filter(|&r| split.train.user_ids[r] == u)
                    .collect();
                let test_rows: Vec<usize> = (0..split.test.len())
                    .filter(|&r| split.test.user_ids[r] == u)
                    .collect();
                (u, train_rows, test_rows)
            })
            .collect()
    };

    let mut labels = vec![GlycemicLabel::Eu; split.test.len()];
    let mut values = vec![0.0f64; split.test.len()];
    for (user, train_rows, test_rows) in fit_groups {
        if test_rows.is_empty() {
            continue;
        }
        let mut train = split.train.select(&train_rows);
        if settings.max_train_windows > 0 {
            train = train.thin(settings.max_train_windows);
        }
        if train.len() < settings.latent_dim + 1 {
            return Err(Error::shape(format!(
                "user `{user}` has only {} training windows for latent dim {}",
                train.len(),
                settings.latent_dim
            )));
        }
        let side = if needs_side { Some(&train.s) } else { None };
        let model = LatentModel::train(&train.v, side, &train.y_value, &train.y_label, &config)?;
        for &r in &test_rows {
            let win = row_of(&split.test.v, r);
            let s_row = row_of(&split.test.s, r);
            let s_opt = if needs_side { Some(s_row.as_slice()) } else { None };
            let pred = model.predict_label(&win, s_opt)?;
            labels[r] = pred.label;
            values[r] = model.predict_value(&win, s_opt)?.mean_mgdl;
        }
    }
    Ok(TestPredictions {
        labels,
        values: Some(values),
    })
}

fn logistic_predictions(split: &SplitDataset, settings: &EvalSettings) -> Result<TestPredictions> {
    let fuse = |data: &WindowedDataset| {
        DMatrix::from_fn(data.len(), data.v.ncols() + data.s.ncols(), |r, c| {
            if c < data.v.ncols() {
                data.v[(r, c)]
            } else {
                data.s[(r, c - data.v.ncols())]
            }
        })
    };
    let train_f = fuse(&split.train);
    let model = logistic_train(&train_f, &split.train.y_label, settings.l2)?;
    let test_f = fuse(&split.test);
    let labels = (0..split.test.len())
        .map(|r| model.predict(&row_of(&test_f, r)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TestPredictions {
        labels,
        values: None,
    })
}

fn kcca_predictions(
    split: &SplitDataset,
    settings: &EvalSettings,
) -> Result<TestPredictions> {
    if !split.train.has_side() {
        return Err(Error::shape("kcca needs side features"));
    }
    let kernel_v = KccaKernel::rbf_median_heuristic(&split.train.v);
    let kernel_s = KccaKernel::rbf_median_heuristic(&split.train.s);
    let d = settings.latent_dim.min(split.train.len().saturating_sub(1)).max(1);
    let model = kcca_fit(
        &split.train.v,
        &split.train.s,
        kernel_v,
        kernel_s,
        settings.kcca_reg,
        d,
    )?;
    let train_proj = model.project_training(true)?;
    let classifier = logistic_train(&train_proj, &split.train.y_label, settings.l2)?;
    let labels = (0..split.test.len())
        .map(|r| {
            let v_row = row_of(&split.test.v, r);
            let s_row = row_of(&split.test.s, r);
            let z = kcca_project(&model, &v_row, Some(&s_row))?;
            classifier.predict(z.as_slice())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TestPredictions {
        labels,
        values: None,
    })
}

/// Train every configured pipeline on the same split with the same seed and
/// emit one report per model, in input order. A model failure marks its own
/// report and leaves the rest running.
pub fn compare_models(
    split: &SplitDataset,
    kinds: &[ModelKind],
    settings: &EvalSettings,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::shape("compare_models needs non-empty train and test sets"));
    }
    let mut reports = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let name = kind.as_str().to_string();
        let digest = digest_for(&name, settings, seed, split);
        let outcome = match kind {
            ModelKind::Logistic => logistic_predictions(split, settings),
            ModelKind::Kcca => kcca_predictions(split, settings),
            _ => latent_predictions(*kind, split, settings, seed),
        };
        let report = match outcome {
            Ok(preds) => {
                let metrics = precision_recall(&preds.labels, &split.test.y_label)?;
                let rmse_value = match &preds.values {
                    Some(values) => {
                        let truth: Vec<f64> = split.test.y_value.iter().copied().collect();
                        Some(rmse(values, &truth)?)
                    }
                    None => None,
                };
                EvalReport {
                    report_version: REPORT_VERSION,
                    model_name: name,
                    status: "ok".to_string(),
                    error: String::new(),
                    metrics: Some(metrics),
                    rmse: rmse_value,
                    config_digest: digest,
                }
            }
            Err(err) => EvalReport {
                report_version: REPORT_VERSION,
                model_name: name,
                status: "failed".to_string(),
                error: err.to_string(),
                metrics: None,
                rmse: None,
                config_digest: digest,
            },
        };
        reports.push(report);
    }
    Ok(reports)
}

/// Forward step-wise importance: RMSE of the glucose-only model, then of one
/// retrained model per candidate signal with exactly that signal added.
/// Entries are sorted by improvement, largest first.
pub fn stepwise_importance(
    split: &SplitDataset,
    candidate_signals: &[SignalGroup],
    settings: &EvalSettings,
    seed: u64,
) -> Result<ImportanceReport> {
    let digest = digest_for("importance", settings, seed, split);
    let base = latent_predictions(ModelKind::Gp, split, settings, seed)?;
    let truth: Vec<f64> = split.test.y_value.iter().copied().collect();
    let base_rmse = rmse(&base.values.expect("gp family emits values"), &truth)?;

    let mut entries = Vec::with_capacity(candidate_signals.len());
    for signal in candidate_signals {
        let narrowed = SplitDataset {
            train: split.train.with_side_columns(&signal.columns)?,
            test: split.test.with_side_columns(&signal.columns)?,
        };
        let preds = latent_predictions(ModelKind::GpContext, &narrowed, settings, seed)?;
        let rmse_after = rmse(&preds.values.expect("gp family emits values"), &truth)?;
        entries.push(ImportanceEntry {
            signal: signal.name.clone(),
            rmse_after_adding: rmse_after,
            delta: base_rmse - rmse_after,
        });
    }
    entries.sort_by(|a, b| {
        b.delta
            .partial_cmp(&a.delta)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.signal.cmp(&b.signal))
    });
    Ok(ImportanceReport {
        report_version: REPORT_VERSION,
        base_rmse,
        entries,
        config_digest: digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use GlycemicLabel::{Eu, Hyper, Hypo};

    #[test]
    fn perfect_predictions_score_one() {
        let truth = vec![Hypo, Eu, Hyper, Eu, Hypo];
        let m = precision_recall(&truth, &truth).unwrap();
        for label in GlycemicLabel::ALL {
            assert_eq!(m.class(label).precision, 1.0);
            assert_eq!(m.class(label).recall, 1.0);
        }
        assert_eq!(m.overall_precision, 1.0);
        assert_eq!(m.overall_recall, 1.0);
    }

    #[test]
    fn worked_confusion_example() {
        let truth = vec![Hypo, Hypo, Eu, Hyper];
        let preds = vec![Hypo, Eu, Eu, Hyper];
        let m = precision_recall(&preds, &truth).unwrap();
        assert_eq!(m.hypo.precision, 1.0);
        assert_eq!(m.hypo.recall, 0.5);
        assert_eq!(m.eu.precision, 0.5);
        assert_eq!(m.eu.recall, 1.0);
        assert_eq!(m.hyper.precision, 1.0);
        assert_eq!(m.hyper.recall, 1.0);
        // support-weighted: (2*1.0 + 1*0.5 + 1*1.0) / 4
        assert!((m.overall_precision - 0.875).abs() < 1e-15);
    }

    #[test]
    fn matches_tally_oracle_on_random_labels() {
        let mut rng = crate::seeded_rng(1, 100);
        for _ in 0..100 {
            let n = rng.gen_range(1..60);
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                GlycemicLabel::ALL[rng.gen_range(0..3)]
            };
            let truth: Vec<GlycemicLabel> = (0..n).map(|_| draw(&mut rng)).collect();
            let preds: Vec<GlycemicLabel> = (0..n).map(|_| draw(&mut rng)).collect();
            let m = precision_recall(&preds, &truth).unwrap();

            // independent tally with maps
            use std::collections::BTreeMap;
            let mut tp: BTreeMap<usize, usize> = BTreeMap::new();
            let mut pred_count: BTreeMap<usize, usize> = BTreeMap::new();
            let mut truth_count: BTreeMap<usize, usize> = BTreeMap::new();
            for (p, t) in preds.iter().zip(&truth) {
                *pred_count.entry(p.index()).or_default() += 1;
                *truth_count.entry(t.index()).or_default() += 1;
                if p == t {
                    *tp.entry(p.index()).or_default() += 1;
                }
            }
            let mut support_total = 0usize;
            for label in GlycemicLabel::ALL {
                let i = label.index();
                let tp_i = *tp.get(&i).unwrap_or(&0);
                let pc = *pred_count.get(&i).unwrap_or(&0);
                let tc = *truth_count.get(&i).unwrap_or(&0);
                let c = m.class(label);
                assert_eq!(c.support, tc);
                support_total += tc;
                if pc == 0 {
                    assert!(c.zero_division);
                    assert_eq!(c.precision, 0.0);
                } else {
                    assert_eq!(c.precision, tp_i as f64 / pc as f64);
                }
                if tc > 0 {
                    assert_eq!(c.recall, tp_i as f64 / tc as f64);
                }
            }
            assert_eq!(support_total, n);
            // weighted overall stays inside the per-class hull
            let values: Vec<f64> = GlycemicLabel::ALL
                .iter()
                .filter(|l| m.class(**l).support > 0)
                .map(|l| m.class(*l).precision)
                .collect();
            let (lo, hi) = (
                values.iter().cloned().fold(f64::INFINITY, f64::min),
                values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            );
            assert!(m.overall_precision >= lo - 1e-12 && m.overall_precision <= hi + 1e-12);
        }
    }

    #[test]
    fn rmse_reference_values() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(rmse(&[110.0], &[100.0]).unwrap(), 10.0);
        let mut rng = crate::seeded_rng(2, 200);
        for _ in 0..20 {
            let n = rng.gen_range(1..30);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let direct = (a
                .iter()
                .zip(&b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                / n as f64)
                .sqrt();
            assert!((rmse(&a, &b).unwrap() - direct).abs() < 1e-12);
        }
        // translation detection
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let shifted: Vec<f64> = x.iter().map(|v| v + 7.5).collect();
        assert!((rmse(&shifted, &x).unwrap() - 7.5).abs() < 1e-12);
    }

    #[test]
    fn rmse_rejects_mismatched_lengths() {
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
        assert!(precision_recall(&[Hypo], &[]).is_err());
    }
}
