//! Raw plant ingestion, cleaning, feature engineering and windowed datasets.

mod clean;
mod features;
mod window;

pub use clean::{
    clean_percentiles, fit_bounds, percentile, repair_zeros, CleaningRules, IndicatorBounds,
    ZeroRepairReport,
};
pub use features::{
    engineer_features, engineer_segments, feature_names, fit_transform, skewness, FeatureSeries, FeatureTransform, TargetScale,
    TransformKind, TransformSpec, N_FEATURES,
};
pub use window::{
    make_windows, prepare, prepare_with_spec, split_blocks, DatasetManifest, DatasetSplit,
    PreparedDataset, SplitPlan, WindowSample, WindowSet,
};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Window length in hours.
pub const WINDOW: usize = 24;
/// Number of raw process variables.
pub const N_RAW: usize = 31;
/// Number of emission targets.
pub const N_TARGETS: usize = 6;
/// Target order used everywhere.
pub const TARGET_NAMES: [&str; N_TARGETS] = ["PM", "SO2", "NOx", "HCl", "CO", "CO2"];
/// Index of CO in [`TARGET_NAMES`].
pub const CO: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("schema mismatch: missing {missing:?}, unexpected {extra:?}")]
    SchemaMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("timestamps not strictly increasing at {at}")]
    NonMonotonicTime { at: String },
    #[error("timestamp {at} is not on the hourly grid")]
    OffGrid { at: String },
    #[error("cannot parse {what} at line {line}: {value:?}")]
    Parse {
        what: &'static str,
        line: usize,
        value: String,
    },
    #[error("series has {rows} rows, need at least {needed}")]
    TooShort { rows: usize, needed: usize },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("malformed dataset file {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Incineration process phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Drying,
    Pyrolysis,
    Combustion,
    Burnout,
}

impl Phase {
    pub const ALL: [Phase; 4] = [
        Phase::Drying,
        Phase::Pyrolysis,
        Phase::Combustion,
        Phase::Burnout,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Phase> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Drying => "drying",
            Phase::Pyrolysis => "pyrolysis",
            Phase::Combustion => "combustion",
            Phase::Burnout => "burnout",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Self::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub unit: String,
}

fn col(name: &str, unit: &str) -> Column {
    Column {
        name: name.into(),
        unit: unit.into(),
    }
}

/// Column layout of a raw plant CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawSchema {
    pub timestamp: String,
    pub columns: Vec<Column>,
    pub targets: Vec<Column>,
    /// Optional phase label column; rows may leave it empty.
    #[serde(default = "default_phase_column")]
    pub phase_column: String,
    /// The two raw columns multiplied into the interaction feature.
    pub interaction: (String, String),
}

fn default_phase_column() -> String {
    "phase".into()
}

impl Default for RawSchema {
    fn default() -> Self {
        Self::mswi()
    }
}

impl RawSchema {
    /// The grate-furnace layout produced by the synthetic generator.
    pub fn mswi() -> Self {
        let columns = vec![
            col("T_furn_upper", "degC"),
            col("T_furn_middle", "degC"),
            col("T_furn_lower", "degC"),
            col("T_furn_avg", "degC"),
            col("steam_flow", "t/h"),
            col("steam_pressure", "kPa"),
            col("steam_temp", "degC"),
            col("feedwater_flow", "t/h"),
            col("T_furnace_exit", "degC"),
            col("T_econ_out", "degC"),
            col("T_RT", "degC"),
            col("T_BH_out", "degC"),
            col("Q1_primary_air", "m3/h"),
            col("Q2_secondary_air", "m3/h"),
            col("T1_primary_air", "degC"),
            col("T2_secondary_air", "degC"),
            col("grate_speed_dry", "%"),
            col("grate_speed_burn", "%"),
            col("grate_speed_burnout", "%"),
            col("feeder_speed", "%"),
            col("flue_gas_flow", "m3/h"),
            col("flue_gas_velocity", "m/s"),
            col("O2_dry", "vol%"),
            col("O2_furnace_exit", "vol%"),
            col("furnace_pressure", "kPa"),
            col("flue_pressure_econ", "kPa"),
            col("flue_pressure_bh", "kPa"),
            col("lime_slurry_flow", "m3/h"),
            col("urea_flow", "m3/h"),
            col("carbon_feed", "kg/h"),
            col("quench_water_flow", "m3/h"),
        ];
        let targets = vec![
            col("PM", "mg/m3"),
            col("SO2", "mg/m3"),
            col("NOx", "mg/m3"),
            col("HCl", "mg/m3"),
            col("CO", "mg/m3"),
            col("CO2", "vol%"),
        ];
        Self {
            timestamp: "timestamp".into(),
            columns,
            targets,
            phase_column: default_phase_column(),
            interaction: ("Q1_primary_air".into(), "T_furn_avg".into()),
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.columns.len() != N_RAW {
            return Err(DataError::InvalidSchema(format!(
                "expected {N_RAW} feature columns, got {}",
                self.columns.len()
            )));
        }
        if self.targets.len() != N_TARGETS {
            return Err(DataError::InvalidSchema(format!(
                "expected {N_TARGETS} target columns, got {}",
                self.targets.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for c in self.columns.iter().chain(&self.targets) {
            if !seen.insert(c.name.as_str()) {
                return Err(DataError::InvalidSchema(format!("duplicate column {}", c.name)));
            }
        }
        for name in [&self.interaction.0, &self.interaction.1] {
            if self.column_index(name).is_none() {
                return Err(DataError::InvalidSchema(format!(
                    "interaction column {name} not in schema"
                )));
            }
        }
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn column_names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    /// Stable short hash of the column layout.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in self.columns.iter().chain(&self.targets) {
            h.update(c.name.as_bytes());
            h.update([0u8]);
            h.update(c.unit.as_bytes());
            h.update([1u8]);
        }
        h.update(self.interaction.0.as_bytes());
        h.update(self.interaction.1.as_bytes());
        hex::encode(&h.finalize()[..8])
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let s: RawSchema = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        s.validate()?;
        Ok(s)
    }
}

/// Hourly record stream of one plant. Missing values are NaN until imputed.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeries {
    pub plant_id: String,
    pub timestamps: Vec<NaiveDateTime>,
    /// `rows x 31` process variables.
    pub features: Array2<f64>,
    /// `rows x 6` emission targets.
    pub targets: Array2<f64>,
    pub phases: Vec<Option<Phase>>,
}

impl FrameSeries {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn has_missing(&self) -> bool {
        self.features.iter().chain(self.targets.iter()).any(|v| v.is_nan())
    }

    /// Writes the series as CSV in schema column order.
    pub fn write_csv(&self, schema: &RawSchema, path: &Path) -> Result<(), DataError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![schema.timestamp.clone()];
        header.extend(schema.columns.iter().map(|c| c.name.clone()));
        header.extend(schema.targets.iter().map(|c| c.name.clone()));
        header.push(schema.phase_column.clone());
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(header.len());
        for i in 0..self.len() {
            rec.clear();
            rec.push(self.timestamps[i].format("%Y-%m-%dT%H:%M:%S").to_string());
            for v in self.features.row(i).iter().chain(self.targets.row(i).iter()) {
                rec.push(if v.is_nan() {
                    String::new()
                } else {
                    format!("{v}")
                });
            }
            rec.push(self.phases[i].map(|p| p.name().to_string()).unwrap_or_default());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.naive_utc())
}

/// Reads a raw plant CSV. Rows are sorted by time and hourly gaps are filled
/// with all-missing rows.
pub fn load_csv(path: &Path, schema: &RawSchema, plant_id: &str) -> Result<FrameSeries, DataError> {
    schema.validate()?;
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let pos: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();

    let mut expected: Vec<&str> = vec![schema.timestamp.as_str()];
    expected.extend(schema.columns.iter().map(|c| c.name.as_str()));
    expected.extend(schema.targets.iter().map(|c| c.name.as_str()));
    let missing: Vec<String> = expected
        .iter()
        .filter(|n| !pos.contains_key(*n))
        .map(|n| n.to_string())
        .collect();
    let extra: Vec<String> = header
        .iter()
        .filter(|h| !expected.contains(&h.as_str()) && **h != schema.phase_column)
        .cloned()
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(DataError::SchemaMismatch { missing, extra });
    }
    let ts_col = pos[schema.timestamp.as_str()];
    let feat_cols: Vec<usize> = schema.columns.iter().map(|c| pos[c.name.as_str()]).collect();
    let tgt_cols: Vec<usize> = schema.targets.iter().map(|c| pos[c.name.as_str()]).collect();
    let phase_col = pos.get(schema.phase_column.as_str()).copied();

    type Row = (NaiveDateTime, Vec<f64>, Vec<f64>, Option<Phase>);
    let mut rows: Vec<Row> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let raw_ts = rec.get(ts_col).unwrap_or("");
        let ts = parse_timestamp(raw_ts).ok_or_else(|| DataError::Parse {
            what: "timestamp",
            line,
            value: raw_ts.to_string(),
        })?;
        let parse = |c: usize| -> Result<f64, DataError> {
            let v = rec.get(c).unwrap_or("").trim();
            if v.is_empty() || v.eq_ignore_ascii_case("nan") || v.eq_ignore_ascii_case("na") {
                Ok(f64::NAN)
            } else {
                v.parse::<f64>().map_err(|_| DataError::Parse {
                    what: "number",
                    line,
                    value: v.to_string(),
                })
            }
        };
        let f = feat_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>, _>>()?;
        let t = tgt_cols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>, _>>()?;
        let phase = phase_col.and_then(|c| rec.get(c)).and_then(Phase::parse);
        rows.push((ts, f, t, phase));
    }
    rows.sort_by_key(|r| r.0);
    if rows.is_empty() {
        return Err(DataError::TooShort { rows: 0, needed: 1 });
    }
    for w in rows.windows(2) {
        if w[1].0 <= w[0].0 {
            return Err(DataError::NonMonotonicTime {
                at: w[1].0.to_string(),
            });
        }
    }
    let start = rows[0].0;
    let mut slots = Vec::with_capacity(rows.len());
    for r in &rows {
        let delta = r.0 - start;
        if delta.num_seconds() % 3600 != 0 {
            return Err(DataError::OffGrid { at: r.0.to_string() });
        }
        slots.push(delta.num_hours() as usize);
    }
    let n = slots.last().copied().unwrap_or(0) + 1;
    let mut features = Array2::from_elem((n, N_RAW), f64::NAN);
    let mut targets = Array2::from_elem((n, N_TARGETS), f64::NAN);
    let mut phases = vec![None; n];
    for (slot, (_, f, t, p)) in slots.into_iter().zip(rows) {
        features.row_mut(slot).assign(&ndarray::Array1::from(f));
        targets.row_mut(slot).assign(&ndarray::Array1::from(t));
        phases[slot] = p;
    }
    let timestamps = (0..n).map(|h| start + Duration::hours(h as i64)).collect();
    Ok(FrameSeries {
        plant_id: plant_id.to_string(),
        timestamps,
        features,
        targets,
        phases,
    })
}

/// Forward fill, then backward fill, then zero.
pub fn impute_column(col: &mut [f64]) {
    let mut last = f64::NAN;
    for v in col.iter_mut() {
        if v.is_nan() {
            *v = last;
        } else {
            last = *v;
        }
    }
    let mut next = f64::NAN;
    for v in col.iter_mut().rev() {
        if v.is_nan() {
            *v = next;
        } else {
            next = *v;
        }
    }
    for v in col.iter_mut() {
        if v.is_nan() {
            *v = 0.0;
        }
    }
}

fn impute_matrix(m: &mut Array2<f64>) {
    for mut c in m.columns_mut() {
        let mut buf: Vec<f64> = c.to_vec();
        impute_column(&mut buf);
        c.assign(&ndarray::Array1::from(buf));
    }
}

/// Triple imputation over every feature and target column.
pub fn impute(mut series: FrameSeries) -> FrameSeries {
    impute_matrix(&mut series.features);
    impute_matrix(&mut series.targets);
    series
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_rows(dir: &Path, hours: &[i64], drop: Option<&str>) -> std::path::PathBuf {
        let schema = RawSchema::mswi();
        let path = dir.join("raw.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        let mut header = vec![schema.timestamp.clone()];
        header.extend(schema.columns.iter().map(|c| c.name.clone()));
        header.extend(schema.targets.iter().map(|c| c.name.clone()));
        let header: Vec<String> = header.into_iter().filter(|h| Some(h.as_str()) != drop).collect();
        writeln!(f, "{}", header.join(",")).unwrap();
        let base = parse_timestamp("2024-03-01T00:00:00").unwrap();
        for &h in hours {
            let ts = (base + Duration::hours(h)).format("%Y-%m-%dT%H:%M:%S");
            let vals: Vec<String> = (1..header.len()).map(|i| format!("{}", i as i64 + h)).collect();
            writeln!(f, "{ts},{}", vals.join(",")).unwrap();
        }
        path
    }

    #[test]
    fn well_formed_csv_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_rows(dir.path(), &[0, 1, 2], None);
        let s = load_csv(&p, &RawSchema::mswi(), "p1").unwrap();
        assert_eq!(s.len(), 3);
        assert!(!s.has_missing());
        assert_eq!(s.features[[1, 0]], 2.0);
    }

    #[test]
    fn missing_column_is_schema_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_rows(dir.path(), &[0, 1, 2], Some("O2_dry"));
        match load_csv(&p, &RawSchema::mswi(), "p1") {
            Err(DataError::SchemaMismatch { missing, .. }) => assert_eq!(missing, vec!["O2_dry"]),
            other => panic!("expected schema mismatch, got {other:?}"),
        }
    }

    #[test]
    fn hourly_gap_becomes_missing_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_rows(dir.path(), &[0, 1, 3], None);
        let s = load_csv(&p, &RawSchema::mswi(), "p1").unwrap();
        assert_eq!(s.len(), 4);
        assert!(s.features.row(2).iter().all(|v| v.is_nan()));
        assert!(s.targets.row(2).iter().all(|v| v.is_nan()));
    }

    #[test]
    fn duplicate_timestamp_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_rows(dir.path(), &[0, 1, 1], None);
        assert!(matches!(
            load_csv(&p, &RawSchema::mswi(), "p1"),
            Err(DataError::NonMonotonicTime { .. })
        ));
    }

    #[test]
    fn unsorted_rows_are_sorted() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_rows(dir.path(), &[2, 0, 1], None);
        let s = load_csv(&p, &RawSchema::mswi(), "p1").unwrap();
        assert_eq!(s.features[[0, 0]], 1.0);
        assert_eq!(s.features[[2, 0]], 3.0);
    }

    #[test]
    fn impute_rules() {
        let nan = f64::NAN;
        let mut a = [1.0, nan, 3.0];
        impute_column(&mut a);
        assert_eq!(a, [1.0, 1.0, 3.0]);
        let mut b = [nan, 2.0, 2.0];
        impute_column(&mut b);
        assert_eq!(b, [2.0, 2.0, 2.0]);
        let mut c = [nan, nan];
        impute_column(&mut c);
        assert_eq!(c, [0.0, 0.0]);
    }

    #[test]
    fn schema_hash_is_stable_and_sensitive() {
        let a = RawSchema::mswi();
        let mut b = RawSchema::mswi();
        assert_eq!(a.hash(), b.hash());
        b.columns[0].unit = "K".into();
        assert_ne!(a.hash(), b.hash());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn impute_is_idempotent(col in proptest::collection::vec(
                prop_oneof![Just(f64::NAN), -100.0..100.0f64], 0..40)) {
                let mut once = col.clone();
                impute_column(&mut once);
                let mut twice = once.clone();
                impute_column(&mut twice);
                prop_assert!(once.iter().all(|v| v.is_finite()));
                prop_assert_eq!(once, twice);
            }
        }
    }
}
