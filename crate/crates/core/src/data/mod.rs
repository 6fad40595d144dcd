//! Data pipeline: per-user glucose series with an explicit missing-value
//! sentinel, aligned side information, glycemic categorization, windowing,
//! standardization, sparsity filtering, and holdout splitting.
//!
//! A glucose value of `0.0` encodes "not observed". Real readings must be at
//! least 10 mg/dl, so the sentinel is never ambiguous.

mod io;
mod synth;
mod text;

pub use io::{parse_series_csv, parse_text_csv, write_series_csv};
pub use synth::{synth_generate, SynthConfig, SynthUser};
pub use text::{unigram_featurize, TextBundle};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Missing-value sentinel in a glucose series.
pub const MISSING: f64 = 0.0;
/// Physiological floor: observed readings below this are rejected so the
/// sentinel stays unambiguous.
pub const GLUCOSE_FLOOR: f64 = 10.0;
/// Minutes in one week.
pub const WEEK_MINUTES: i64 = 10_080;

/// Glycemic range category.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum GlycemicLabel {
    Hypo,
    Eu,
    Hyper,
}

impl GlycemicLabel {
    /// All labels in storage order (also the probability-vector order).
    pub const ALL: [GlycemicLabel; 3] = [GlycemicLabel::Hypo, GlycemicLabel::Eu, GlycemicLabel::Hyper];
    /// Tie-break priority for argmax decisions: adverse events first.
    pub const PRIORITY: [GlycemicLabel; 3] =
        [GlycemicLabel::Hypo, GlycemicLabel::Hyper, GlycemicLabel::Eu];

    pub fn index(self) -> usize {
        match self {
            GlycemicLabel::Hypo => 0,
            GlycemicLabel::Eu => 1,
            GlycemicLabel::Hyper => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            GlycemicLabel::Hypo => "hypo",
            GlycemicLabel::Eu => "eu",
            GlycemicLabel::Hyper => "hyper",
        }
    }
}

/// Category boundaries in mg/dl. `hypo` is exclusive from below, `hyper`
/// exclusive from above; both boundary values themselves read as normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub hypo_mgdl: f64,
    pub hyper_mgdl: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            hypo_mgdl: 70.0,
            hyper_mgdl: 180.0,
        }
    }
}

impl Thresholds {
    pub fn new(hypo_mgdl: f64, hyper_mgdl: f64) -> Result<Self> {
        if !(hypo_mgdl.is_finite() && hyper_mgdl.is_finite() && hypo_mgdl < hyper_mgdl) {
            return Err(Error::parameter(format!(
                "thresholds must be finite with hypo < hyper, got ({hypo_mgdl}, {hyper_mgdl})"
            )));
        }
        Ok(Thresholds {
            hypo_mgdl,
            hyper_mgdl,
        })
    }

    /// Label any finite value, without the observed-reading floor. Used for
    /// model outputs, which may legitimately fall below the floor.
    pub fn label_for(&self, v: f64) -> GlycemicLabel {
        if v < self.hypo_mgdl {
            GlycemicLabel::Hypo
        } else if v <= self.hyper_mgdl {
            GlycemicLabel::Eu
        } else {
            GlycemicLabel::Hyper
        }
    }
}

/// Categorize an observed glucose reading with the default thresholds.
pub fn categorize(v: f64) -> Result<GlycemicLabel> {
    categorize_with(v, &Thresholds::default())
}

/// Categorize an observed glucose reading. Values under the physiological
/// floor (including the missing sentinel) are errors.
pub fn categorize_with(v: f64, thresholds: &Thresholds) -> Result<GlycemicLabel> {
    if !v.is_finite() || v < GLUCOSE_FLOOR {
        return Err(Error::MissingValue(format!(
            "cannot categorize {v}: below the {GLUCOSE_FLOOR} mg/dl floor"
        )));
    }
    Ok(thresholds.label_for(v))
}

/// Per-user glucose time series on a minute clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlucoseSeries {
    pub user_id: String,
    /// Strictly increasing, non-negative minutes.
    pub timestamps: Vec<i64>,
    /// `MISSING` or values >= `GLUCOSE_FLOOR`.
    pub values: Vec<f64>,
}

impl GlucoseSeries {
    pub fn new(user_id: impl Into<String>, timestamps: Vec<i64>, values: Vec<f64>) -> Result<Self> {
        if timestamps.len() != values.len() {
            return Err(Error::shape(format!(
                "{} timestamps vs {} values",
                timestamps.len(),
                values.len()
            )));
        }
        for w in timestamps.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::parameter(format!(
                    "timestamps must be strictly increasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        for &v in &values {
            if !v.is_finite() || (v != MISSING && v < GLUCOSE_FLOOR) {
                return Err(Error::parameter(format!(
                    "glucose value {v} must be {MISSING} (missing) or >= {GLUCOSE_FLOOR}"
                )));
            }
        }
        Ok(GlucoseSeries {
            user_id: user_id.into(),
            timestamps,
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of non-sentinel readings.
    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| **v != MISSING).count()
    }

    /// Median gap between consecutive timestamps, in minutes.
    pub fn sampling_interval(&self) -> i64 {
        if self.timestamps.len() < 2 {
            return 5;
        }
        let mut gaps: Vec<i64> = self.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
        gaps.sort_unstable();
        gaps[gaps.len() / 2]
    }
}

/// Context features aligned 1:1 with a glucose series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideInfo {
    pub user_id: String,
    pub timestamps: Vec<i64>,
    pub features: DMatrix<f64>,
    pub feature_names: Vec<String>,
}

impl SideInfo {
    pub fn new(
        user_id: impl Into<String>,
        timestamps: Vec<i64>,
        features: DMatrix<f64>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if features.nrows() != timestamps.len() {
            return Err(Error::shape(format!(
                "{} feature rows vs {} timestamps",
                features.nrows(),
                timestamps.len()
            )));
        }
        if features.ncols() != feature_names.len() {
            return Err(Error::shape(format!(
                "{} feature columns vs {} names",
                features.ncols(),
                feature_names.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("duplicate feature name `{name}`")));
            }
        }
        Ok(SideInfo {
            user_id: user_id.into(),
            timestamps,
            features,
            feature_names,
        })
    }
}

/// One user's series plus optional aligned side information.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub series: GlucoseSeries,
    pub side: Option<SideInfo>,
}

/// What to do with missing values when cutting windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingPolicy {
    /// Exclude any window or target that touches the sentinel.
    Drop,
    /// Replace interior sentinels with the previous observed value; windows
    /// touching leading (unfillable) sentinels are still excluded.
    ForwardFill,
}

impl std::str::FromStr for MissingPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "drop" => Ok(MissingPolicy::Drop),
            "forward_fill" => Ok(MissingPolicy::ForwardFill),
            other => Err(Error::parameter(format!(
                "unknown missing-value policy `{other}` (expected drop | forward_fill)"
            ))),
        }
    }
}

/// Supervised window pairs ready for model fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowedDataset {
    /// Glucose history windows, one row per pair, raw mg/dl.
    pub v: DMatrix<f64>,
    /// Side features at each window's final timestamp (0 columns when no
    /// side information was supplied).
    pub s: DMatrix<f64>,
    pub y_value: DVector<f64>,
    pub y_label: Vec<GlycemicLabel>,
    pub window_len: usize,
    pub horizon: usize,
    /// Row provenance, parallel to the rows of `v`.
    pub user_ids: Vec<String>,
    /// Timestamp of each target value.
    pub target_times: Vec<i64>,
    /// Timestamp of each window's final observation.
    pub end_times: Vec<i64>,
    pub side_names: Vec<String>,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.v.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn has_side(&self) -> bool {
        self.s.ncols() > 0
    }

    fn empty(window_len: usize, horizon: usize, side_cols: usize, side_names: Vec<String>) -> Self {
        WindowedDataset {
            v: DMatrix::zeros(0, window_len),
            s: DMatrix::zeros(0, side_cols),
            y_value: DVector::zeros(0),
            y_label: Vec::new(),
            window_len,
            horizon,
            user_ids: Vec::new(),
            target_times: Vec::new(),
            end_times: Vec::new(),
            side_names,
        }
    }

    /// Keep the rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> WindowedDataset {
        let mut out = WindowedDataset::empty(
            self.window_len,
            self.horizon,
            self.s.ncols(),
            self.side_names.clone(),
        );
        out.v = DMatrix::from_fn(indices.len(), self.v.ncols(), |r, c| self.v[(indices[r], c)]);
        out.s = DMatrix::from_fn(indices.len(), self.s.ncols(), |r, c| self.s[(indices[r], c)]);
        out.y_value = DVector::from_fn(indices.len(), |r, _| self.y_value[indices[r]]);
        out.y_label = indices.iter().map(|&i| self.y_label[i]).collect();
        out.user_ids = indices.iter().map(|&i| self.user_ids[i].clone()).collect();
        out.target_times = indices.iter().map(|&i| self.target_times[i]).collect();
        out.end_times = indices.iter().map(|&i| self.end_times[i]).collect();
        out
    }

    /// Keep only the named side-feature columns.
    pub fn with_side_columns(&self, names: &[String]) -> Result<WindowedDataset> {
        let cols: Vec<usize> = names
            .iter()
            .map(|n| {
                self.side_names
                    .iter()
                    .position(|s| s == n)
                    .ok_or_else(|| Error::Schema(format!("unknown side feature `{n}`")))
            })
            .collect::<Result<_>>()?;
        let mut out = self.clone();
        out.s = DMatrix::from_fn(self.len(), cols.len(), |r, c| self.s[(r, cols[c])]);
        out.side_names = names.to_vec();
        Ok(out)
    }

    /// Append the minutes between each window's end and its target as an
    /// extra context column. Useful for irregularly sampled series, where
    /// the gap carries information the index-based window hides.
    pub fn with_gap_feature(&self) -> WindowedDataset {
        let mut out = self.clone();
        out.s = DMatrix::from_fn(self.len(), self.s.ncols() + 1, |r, c| {
            if c < self.s.ncols() {
                self.s[(r, c)]
            } else {
                (self.target_times[r] - self.end_times[r]) as f64
            }
        });
        out.side_names.push("gap_min".to_string());
        out
    }

    /// Drop all side columns.
    pub fn without_side(&self) -> WindowedDataset {
        let mut out = self.clone();
        out.s = DMatrix::zeros(self.len(), 0);
        out.side_names = Vec::new();
        out
    }

    /// Deterministically thin to at most `max_rows` rows (uniform stride).
    pub fn thin(&self, max_rows: usize) -> WindowedDataset {
        if self.len() <= max_rows || max_rows == 0 {
            return self.clone();
        }
        let indices: Vec<usize> = (0..max_rows)
            .map(|k| k * self.len() / max_rows)
            .collect();
        self.select(&indices)
    }

    /// Concatenate datasets with identical window geometry and side schema.
    pub fn concat(parts: &[&WindowedDataset]) -> Result<WindowedDataset> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let mut indices_all = Vec::new();
        for p in parts {
            if p.window_len != first.window_len
                || p.horizon != first.horizon
                || p.side_names != first.side_names
            {
                return Err(Error::shape(
                    "cannot concatenate datasets with different geometry or side schema",
                ));
            }
            indices_all.push(p.len());
        }
        let total: usize = indices_all.iter().sum();
        let mut out = WindowedDataset::empty(
            first.window_len,
            first.horizon,
            first.s.ncols(),
            first.side_names.clone(),
        );
        out.v = DMatrix::zeros(total, first.v.ncols());
        out.s = DMatrix::zeros(total, first.s.ncols());
        out.y_value = DVector::zeros(total);
        let mut row = 0;
        for p in parts {
            for r in 0..p.len() {
                for c in 0..p.v.ncols() {
                    out.v[(row, c)] = p.v[(r, c)];
                }
                for c in 0..p.s.ncols() {
                    out.s[(row, c)] = p.s[(r, c)];
                }
                out.y_value[row] = p.y_value[r];
                out.y_label.push(p.y_label[r]);
                out.user_ids.push(p.user_ids[r].clone());
                out.target_times.push(p.target_times[r]);
                out.end_times.push(p.end_times[r]);
                row += 1;
            }
        }
        Ok(out)
    }
}

/// Cut supervised windows from a series with the default thresholds.
pub fn windowize(
    series: &GlucoseSeries,
    side: Option<&SideInfo>,
    window_len: usize,
    horizon: usize,
    policy: MissingPolicy,
) -> Result<WindowedDataset> {
    windowize_with(series, side, window_len, horizon, policy, &Thresholds::default())
}

/// Cut supervised windows: row `k` holds values
/// `[start .. start + window_len)` and its target sits `horizon` steps past
/// the window end.
pub fn windowize_with(
    series: &GlucoseSeries,
    side: Option<&SideInfo>,
    window_len: usize,
    horizon: usize,
    policy: MissingPolicy,
    thresholds: &Thresholds,
) -> Result<WindowedDataset> {
    if window_len == 0 || horizon == 0 {
        return Err(Error::parameter("window_len and horizon must be >= 1"));
    }
    if let Some(si) = side {
        if si.timestamps != series.timestamps {
            return Err(Error::shape(format!(
                "side info for `{}` is not aligned with the glucose series",
                series.user_id
            )));
        }
    }
    let side_cols = side.map_or(0, |s| s.features.ncols());
    let side_names = side.map_or_else(Vec::new, |s| s.feature_names.clone());

    let needed = window_len + horizon;
    if series.len() < needed {
        log::warn!(
            "series `{}` has {} points, shorter than window {} + horizon {}; emitting empty dataset",
            series.user_id,
            series.len(),
            window_len,
            horizon
        );
        return Ok(WindowedDataset::empty(window_len, horizon, side_cols, side_names));
    }

    // Working copy of values under the chosen policy; entries still equal to
    // the sentinel after filling are unusable.
    let values: Vec<f64> = match policy {
        MissingPolicy::Drop => series.values.clone(),
        MissingPolicy::ForwardFill => {
            let mut filled = series.values.clone();
            let mut last = None;
            for v in filled.iter_mut() {
                if *v == MISSING {
                    if let Some(prev) = last {
                        *v = prev;
                    }
                } else {
                    last = Some(*v);
                }
            }
            filled
        }
    };

    let mut rows: Vec<usize> = Vec::new();
    let last_start = series.len() - needed;
    for start in 0..=last_start {
        let target_idx = start + window_len + horizon - 1;
        let usable = values[start..start + window_len]
            .iter()
            .chain(std::iter::once(&values[target_idx]))
            .all(|v| *v != MISSING);
        if usable {
            rows.push(start);
        }
    }

    let n = rows.len();
    let mut out = WindowedDataset::empty(window_len, horizon, side_cols, side_names);
    out.v = DMatrix::zeros(n, window_len);
    out.s = DMatrix::zeros(n, side_cols);
    out.y_value = DVector::zeros(n);
    for (r, &start) in rows.iter().enumerate() {
        for c in 0..window_len {
            out.v[(r, c)] = values[start + c];
        }
        if let Some(si) = side {
            let side_row = start + window_len - 1;
            for c in 0..side_cols {
                out.s[(r, c)] = si.features[(side_row, c)];
            }
        }
        let target_idx = start + window_len + horizon - 1;
        let target = values[target_idx];
        out.y_value[r] = target;
        out.y_label.push(categorize_with(target, thresholds)?);
        out.user_ids.push(series.user_id.clone());
        out.target_times.push(series.timestamps[target_idx]);
        out.end_times.push(series.timestamps[start + window_len - 1]);
    }
    Ok(out)
}

/// Per-column means and deviations fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    /// Sample standard deviation; zero-variance columns store 1 so they pass
    /// through unchanged.
    pub std: Vec<f64>,
}

/// Fit per-column standardization statistics.
pub fn standardize_fit(train: &DMatrix<f64>) -> Result<StandardizationStats> {
    if train.nrows() == 0 {
        return Err(Error::shape("cannot fit standardization on an empty matrix"));
    }
    let n = train.nrows() as f64;
    let mut mean = Vec::with_capacity(train.ncols());
    let mut std = Vec::with_capacity(train.ncols());
    for c in 0..train.ncols() {
        let col = train.column(c);
        let mu = col.sum() / n;
        let var = if train.nrows() > 1 {
            col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let sd = var.sqrt();
        mean.push(mu);
        std.push(if sd < 1e-12 { 1.0 } else { sd });
    }
    Ok(StandardizationStats { mean, std })
}

/// Apply fitted statistics column-wise.
pub fn standardize_apply(stats: &StandardizationStats, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.ncols() != stats.mean.len() {
        return Err(Error::shape(format!(
            "matrix has {} columns, stats cover {}",
            m.ncols(),
            stats.mean.len()
        )));
    }
    Ok(DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| {
        (m[(r, c)] - stats.mean[c]) / stats.std[c]
    }))
}

impl StandardizationStats {
    pub fn apply_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.mean.len() {
            return Err(Error::shape(format!(
                "row has {} entries, stats cover {}",
                row.len(),
                self.mean.len()
            )));
        }
        Ok(row
            .iter()
            .enumerate()
            .map(|(c, v)| (v - self.mean[c]) / self.std[c])
            .collect())
    }
}

/// Keep users with at least `min_bg` observed (non-sentinel) readings.
pub fn sparsity_filter(users: Vec<UserRecord>, min_bg: usize) -> Vec<UserRecord> {
    users
        .into_iter()
        .filter(|u| u.series.observed_count() >= min_bg)
        .collect()
}

/// Partition windows around a seeded, uniformly chosen one-week interval:
/// windows whose target timestamp falls inside the week are the test set.
pub fn holdout_split(
    series: &GlucoseSeries,
    windows: &WindowedDataset,
    seed: u64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    let (first, last) = match (series.timestamps.first(), series.timestamps.last()) {
        (Some(f), Some(l)) => (*f, *l),
        _ => return Err(Error::Split("series is empty".into())),
    };
    let span = last - first;
    if span < 2 * WEEK_MINUTES {
        return Err(Error::Split(format!(
            "series `{}` spans {span} minutes, need at least two weeks ({}); evaluate pooled instead",
            series.user_id,
            2 * WEEK_MINUTES
        )));
    }
    let mut rng = crate::seeded_rng(seed, 0x686f6c64);
    let start: i64 = rng.gen_range(first..=last - WEEK_MINUTES);
    let end = start + WEEK_MINUTES;

    let (mut test_idx, mut train_idx) = (Vec::new(), Vec::new());
    for (i, &t) in windows.target_times.iter().enumerate() {
        if (start..end).contains(&t) {
            test_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    Ok((windows.select(&train_idx), windows.select(&test_idx)))
}

/// Chronological split: the first `1 - test_fraction` of windows (by target
/// time) train, the rest test. Used when a series is too short for a
/// one-week holdout.
pub fn fraction_split(
    windows: &WindowedDataset,
    test_fraction: f64,
) -> Result<(WindowedDataset, WindowedDataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction <= 0.0 {
        return Err(Error::parameter(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by_key(|&i| windows.target_times[i]);
    let n_test = ((windows.len() as f64) * test_fraction).round() as usize;
    let n_train = windows.len().saturating_sub(n_test);
    Ok((
        windows.select(&order[..n_train]),
        windows.select(&order[n_train..]),
    ))
}

/// Aggregate sparse per-timestamp side rows onto a series' observation
/// grid: each series timestamp receives the column-wise sum of the side
/// rows in the interval since the previous observation (inclusive).
pub fn align_side_to_series(side: &SideInfo, series: &GlucoseSeries) -> Result<SideInfo> {
    let cols = side.features.ncols();
    let mut features = DMatrix::zeros(series.len(), cols);
    let mut cursor = 0usize;
    for (k, &t) in series.timestamps.iter().enumerate() {
        while cursor < side.timestamps.len() && side.timestamps[cursor] <= t {
            for c in 0..cols {
                features[(k, c)] += side.features[(cursor, c)];
            }
            cursor += 1;
        }
    }
    if cursor < side.timestamps.len() {
        log::warn!(
            "{} side rows for `{}` fall after the last glucose observation and were dropped",
            side.timestamps.len() - cursor,
            side.user_id
        );
    }
    SideInfo::new(
        series.user_id.clone(),
        series.timestamps.clone(),
        features,
        side.feature_names.clone(),
    )
}
