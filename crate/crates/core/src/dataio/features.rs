use std::f64::consts::PI;

use chrono::{Datelike, NaiveDateTime, Timelike};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{DataError, IndicatorBounds, RawSchema, N_RAW};

/// Engineered feature count: raw, 6 h moving average, first difference,
/// hour/day cyclic encodings and one interaction term.
pub const N_FEATURES: usize = 3 * N_RAW + 4 + 1;
const MA_HOURS: usize = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSeries {
    pub names: Vec<String>,
    pub data: Array2<f64>,
}

pub fn feature_names(schema: &RawSchema) -> Vec<String> {
    let mut names = Vec::with_capacity(N_FEATURES);
    names.extend(schema.columns.iter().map(|c| c.name.clone()));
    names.extend(schema.columns.iter().map(|c| format!("{}_ma6", c.name)));
    names.extend(schema.columns.iter().map(|c| format!("{}_diff1", c.name)));
    names.extend(["hour_sin", "hour_cos", "dow_sin", "dow_cos"].map(String::from));
    names.push(format!("{}_x_{}", schema.interaction.0, schema.interaction.1));
    names
}

/// Expands `rows x 31` raw variables to `rows x 98` features. The first rows
/// use partial moving-average windows and the first difference at row 0 is 0.
pub fn engineer_features(
    raw: &Array2<f64>,
    timestamps: &[NaiveDateTime],
    schema: &RawSchema,
) -> FeatureSeries {
    engineer_segments(raw, timestamps, schema, &[])
}

/// Like [`engineer_features`], but moving averages and differences restart
/// at every row listed in `starts`, as if the series began there.
pub fn engineer_segments(
    raw: &Array2<f64>,
    timestamps: &[NaiveDateTime],
    schema: &RawSchema,
    starts: &[usize],
) -> FeatureSeries {
    let n = raw.nrows();
    assert_eq!(raw.ncols(), N_RAW);
    assert_eq!(timestamps.len(), n);
    let mut seg_start = vec![0usize; n];
    let mut cur = 0;
    for (t, s) in seg_start.iter_mut().enumerate() {
        if starts.contains(&t) {
            cur = t;
        }
        *s = cur;
    }
    let ia = schema.column_index(&schema.interaction.0).expect("validated schema");
    let ib = schema.column_index(&schema.interaction.1).expect("validated schema");
    let mut data = Array2::zeros((n, N_FEATURES));
    for j in 0..N_RAW {
        let col = raw.column(j);
        for t in 0..n {
            let lo = (t + 1).saturating_sub(MA_HOURS).max(seg_start[t]);
            let window = col.slice(ndarray::s![lo..=t]);
            data[[t, j]] = col[t];
            data[[t, N_RAW + j]] = window.sum() / window.len() as f64;
            data[[t, 2 * N_RAW + j]] = if t == seg_start[t] { 0.0 } else { col[t] - col[t - 1] };
        }
    }
    for (t, ts) in timestamps.iter().enumerate() {
        let hour = ts.hour() as f64;
        let dow = ts.weekday().num_days_from_monday() as f64;
        let base = 3 * N_RAW;
        data[[t, base]] = (2.0 * PI * hour / 24.0).sin();
        data[[t, base + 1]] = (2.0 * PI * hour / 24.0).cos();
        data[[t, base + 2]] = (2.0 * PI * dow / 7.0).sin();
        data[[t, base + 3]] = (2.0 * PI * dow / 7.0).cos();
        data[[t, base + 4]] = raw[[t, ia]] * raw[[t, ib]];
    }
    FeatureSeries {
        names: feature_names(schema),
        data,
    }
}

/// Adjusted Fisher–Pearson sample skewness. Returns 0 for fewer than three
/// values or zero variance.
pub fn skewness(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 3 {
        return 0.0;
    }
    let nf = n as f64;
    let mean = values.iter().sum::<f64>() / nf;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nf;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / nf;
    if m2 <= 0.0 {
        return 0.0;
    }
    let g1 = m3 / m2.powf(1.5);
    g1 * (nf * (nf - 1.0)).sqrt() / (nf - 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Log,
    Sqrt,
    Identity,
}

impl TransformKind {
    /// Skewness above 1 gets a log, 0.5..=1 a square root, anything lower none.
    pub fn for_skewness(skew: f64) -> Self {
        if skew > 1.0 {
            TransformKind::Log
        } else if skew >= 0.5 {
            TransformKind::Sqrt
        } else {
            TransformKind::Identity
        }
    }

    fn apply(self, x: f64, shift: f64) -> f64 {
        match self {
            TransformKind::Log => (1.0 + (x + shift).max(0.0)).ln(),
            TransformKind::Sqrt => (x + shift).max(0.0).sqrt(),
            TransformKind::Identity => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTransform {
    pub name: String,
    pub skewness: f64,
    pub kind: TransformKind,
    pub shift: f64,
    pub mean: f64,
    pub std: f64,
    /// Zero training variance: the column is emitted as constant zero.
    pub dropped: bool,
}

impl FeatureTransform {
    pub fn apply(&self, x: f64) -> f64 {
        if self.dropped {
            return 0.0;
        }
        (self.kind.apply(x, self.shift) - self.mean) / self.std
    }
}

/// Z-score constants for a raw column or target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScale {
    pub name: String,
    pub mean: f64,
    pub std: f64,
}

impl TargetScale {
    fn fit(name: &str, values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        Self {
            name: name.to_string(),
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn standardize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn restore(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

/// Everything fitted on the training split and replayed on unseen rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub schema_hash: String,
    pub features: Vec<FeatureTransform>,
    pub bounds: Vec<IndicatorBounds>,
    pub targets: Vec<TargetScale>,
    /// Training statistics of the cleaned raw process variables.
    pub raw: Vec<TargetScale>,
    pub dropped: Vec<String>,
}

impl TransformSpec {
    /// Standardizes an engineered feature matrix with the frozen constants.
    pub fn transform(&self, features: &Array2<f64>) -> Array2<f64> {
        assert_eq!(features.ncols(), self.features.len());
        let mut out = features.clone();
        for (mut col, ft) in out.axis_iter_mut(Axis(1)).zip(&self.features) {
            col.mapv_inplace(|x| ft.apply(x));
        }
        out
    }

    pub fn standardize_targets(&self, targets: &Array2<f64>) -> Array2<f64> {
        let mut out = targets.clone();
        for (mut col, s) in out.axis_iter_mut(Axis(1)).zip(&self.targets) {
            col.mapv_inplace(|v| s.standardize(v));
        }
        out
    }

    pub fn restore_targets(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut out = z.clone();
        for (mut col, s) in out.axis_iter_mut(Axis(1)).zip(&self.targets) {
            col.mapv_inplace(|v| s.restore(v));
        }
        out
    }

    /// Applies the fitted percentile clipping to raw process variables.
    pub fn clip_raw(&self, raw: &mut Array2<f64>) {
        for (j, mut col) in raw.axis_iter_mut(Axis(1)).enumerate() {
            let name = &self.raw[j].name;
            if let Some(b) = self.bounds.iter().find(|b| &b.name == name) {
                col.mapv_inplace(|v| v.clamp(b.lower, b.upper));
            }
        }
    }

    pub fn raw_index(&self, name: &str) -> Option<usize> {
        self.raw.iter().position(|r| r.name == name)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), DataError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, DataError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// Fits per-feature skew transforms and z-scores on the rows where
/// `train_mask` is true, and returns the standardized matrix.
pub fn fit_transform(
    features: &FeatureSeries,
    train_mask: &[bool],
) -> Result<(Vec<FeatureTransform>, Array2<f64>), DataError> {
    assert_eq!(train_mask.len(), features.data.nrows());
    if !train_mask.iter().any(|m| *m) {
        return Err(DataError::TooShort { rows: 0, needed: 1 });
    }
    let mut fitted = Vec::with_capacity(features.data.ncols());
    for (j, name) in features.names.iter().enumerate() {
        let train: Vec<f64> = features
            .data
            .column(j)
            .iter()
            .zip(train_mask)
            .filter(|(_, m)| **m)
            .map(|(v, _)| *v)
            .collect();
        let skew = skewness(&train);
        let kind = TransformKind::for_skewness(skew);
        let min = train.iter().copied().fold(f64::INFINITY, f64::min);
        let shift = -min.min(0.0);
        let transformed: Vec<f64> = train.iter().map(|&x| kind.apply(x, shift)).collect();
        let n = transformed.len() as f64;
        let mean = transformed.iter().sum::<f64>() / n;
        let var = transformed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let dropped = !(std > 1e-12 * mean.abs().max(1.0));
        fitted.push(FeatureTransform {
            name: name.clone(),
            skewness: skew,
            kind,
            shift,
            mean,
            std: if dropped { 1.0 } else { std },
            dropped,
        });
    }
    let mut out = features.data.clone();
    for (mut col, ft) in out.axis_iter_mut(Axis(1)).zip(&fitted) {
        col.mapv_inplace(|x| ft.apply(x));
    }
    Ok((fitted, out))
}

pub(super) fn fit_scales(names: &[String], data: &Array2<f64>, train_mask: &[bool]) -> Vec<TargetScale> {
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let v: Vec<f64> = data
                .column(j)
                .iter()
                .zip(train_mask)
                .filter(|(_, m)| **m)
                .map(|(v, _)| *v)
                .collect();
            TargetScale::fit(name, &v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::parse_timestamp;
    use chrono::Duration;

    fn stamps(n: usize) -> Vec<NaiveDateTime> {
        let t0 = parse_timestamp("2024-01-01T00:00:00").unwrap();
        (0..n).map(|h| t0 + Duration::hours(h as i64)).collect()
    }

    #[test]
    fn feature_count_is_98() {
        let schema = RawSchema::mswi();
        let raw = Array2::from_shape_fn((10, N_RAW), |(i, j)| (i * j) as f64);
        let f = engineer_features(&raw, &stamps(10), &schema);
        assert_eq!(f.data.ncols(), 98);
        assert_eq!(f.names.len(), 98);
        assert_eq!(N_FEATURES, 98);
    }

    #[test]
    fn constant_column_has_flat_average_and_zero_difference() {
        let schema = RawSchema::mswi();
        let raw = Array2::from_elem((12, N_RAW), 7.5);
        let f = engineer_features(&raw, &stamps(12), &schema);
        for t in 0..12 {
            assert_eq!(f.data[[t, N_RAW]], 7.5);
            assert_eq!(f.data[[t, 2 * N_RAW]], 0.0);
        }
    }

    #[test]
    fn partial_moving_average_at_start() {
        let schema = RawSchema::mswi();
        let raw = Array2::from_shape_fn((8, N_RAW), |(i, _)| i as f64);
        let f = engineer_features(&raw, &stamps(8), &schema);
        assert_eq!(f.data[[0, N_RAW]], 0.0);
        assert_eq!(f.data[[2, N_RAW]], 1.0);
        // full window from t=5 on: mean of 2..=7
        assert_eq!(f.data[[7, N_RAW]], 4.5);
        assert_eq!(f.data[[3, 2 * N_RAW]], 1.0);
    }

    #[test]
    fn segments_restart_lookback() {
        let schema = RawSchema::mswi();
        let raw = Array2::from_shape_fn((10, N_RAW), |(i, _)| (i * i) as f64);
        let whole = engineer_features(&raw, &stamps(10), &schema);
        let split = engineer_segments(&raw, &stamps(10), &schema, &[4]);
        assert_eq!(split.data.slice(ndarray::s![..4, ..]), whole.data.slice(ndarray::s![..4, ..]));
        assert_eq!(split.data[[4, N_RAW]], 16.0);
        assert_eq!(split.data[[4, 2 * N_RAW]], 0.0);
        // rows 4..=6 only: (16 + 25 + 36) / 3
        assert!((split.data[[6, N_RAW]] - 77.0 / 3.0).abs() < 1e-12);
        assert_eq!(split.data[[6, 2 * N_RAW]], 11.0);
        let tail = engineer_features(&raw.slice(ndarray::s![4.., ..]).to_owned(), &stamps(10)[4..], &schema);
        assert_eq!(split.data.slice(ndarray::s![4.., ..N_RAW * 3]), tail.data.slice(ndarray::s![.., ..N_RAW * 3]));
    }

    #[test]
    fn hour_six_encodes_to_unit_sine() {
        let schema = RawSchema::mswi();
        let raw = Array2::zeros((7, N_RAW));
        let f = engineer_features(&raw, &stamps(7), &schema);
        assert!((f.data[[6, 3 * N_RAW]] - 1.0).abs() < 1e-15);
        assert!(f.data[[6, 3 * N_RAW + 1]].abs() < 1e-15);
    }

    #[test]
    fn interaction_is_product_of_primary_air_and_furnace_temperature() {
        let schema = RawSchema::mswi();
        let mut raw = Array2::zeros((2, N_RAW));
        raw[[1, schema.column_index("Q1_primary_air").unwrap()]] = 3.0;
        raw[[1, schema.column_index("T_furn_avg").unwrap()]] = 900.0;
        let f = engineer_features(&raw, &stamps(2), &schema);
        assert_eq!(f.data[[1, N_FEATURES - 1]], 2700.0);
    }

    #[test]
    fn transform_kind_thresholds() {
        assert_eq!(TransformKind::for_skewness(1.5), TransformKind::Log);
        assert_eq!(TransformKind::for_skewness(0.7), TransformKind::Sqrt);
        assert_eq!(TransformKind::for_skewness(0.3), TransformKind::Identity);
        assert_eq!(TransformKind::for_skewness(-2.0), TransformKind::Identity);
    }

    #[test]
    fn zscore_arithmetic() {
        let ft = FeatureTransform {
            name: "x".into(),
            skewness: 0.3,
            kind: TransformKind::Identity,
            shift: 0.0,
            mean: 10.0,
            std: 2.0,
            dropped: false,
        };
        assert_eq!(ft.apply(12.0), 1.0);
    }

    #[test]
    fn skewness_matches_closed_form() {
        // [0, 0, 0, 1]: m2 = 3/16, m3 = 3/32 * ... computed by hand
        let v = [0.0, 0.0, 0.0, 1.0];
        let mean: f64 = 0.25;
        let m2 = (3.0 * mean.powi(2) + 0.75f64.powi(2)) / 4.0;
        let m3 = (3.0 * (-mean).powi(3) + 0.75f64.powi(3)) / 4.0;
        let g1 = m3 / m2.powf(1.5);
        let expected = g1 * (4.0f64 * 3.0).sqrt() / 2.0;
        assert!((skewness(&v) - expected).abs() < 1e-12);
        assert!((expected - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_feature_is_recorded_and_zeroed() {
        let fs = FeatureSeries {
            names: vec!["a".into(), "b".into()],
            data: ndarray::array![[1.0, 5.0], [2.0, 5.0], [4.0, 5.0]],
        };
        let (spec, out) = fit_transform(&fs, &[true, true, true]).unwrap();
        assert!(spec[1].dropped);
        assert!(!spec[0].dropped);
        assert!(out.column(1).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn skewed_column_gets_log_and_replays_identically() {
        let data = Array2::from_shape_fn((200, 1), |(i, _)| ((i as f64) / 20.0).exp());
        let fs = FeatureSeries {
            names: vec!["x".into()],
            data,
        };
        let mask: Vec<bool> = (0..200).map(|i| i < 150).collect();
        let (spec, out) = fit_transform(&fs, &mask).unwrap();
        assert_eq!(spec[0].kind, TransformKind::Log);
        let replay: Vec<f64> = fs.data.column(0).iter().map(|&x| spec[0].apply(x)).collect();
        for (a, b) in replay.iter().zip(out.column(0)) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn refitting_on_more_rows_changes_spec() {
        let data = Array2::from_shape_fn((100, 1), |(i, _)| if i < 80 { (i % 7) as f64 } else { 50.0 + i as f64 });
        let fs = FeatureSeries {
            names: vec!["x".into()],
            data,
        };
        let train: Vec<bool> = (0..100).map(|i| i < 80).collect();
        let all = vec![true; 100];
        let (a, _) = fit_transform(&fs, &train).unwrap();
        let (b, _) = fit_transform(&fs, &all).unwrap();
        assert_ne!(a[0].mean, b[0].mean);
    }
}
