use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clean::{clean_percentiles, fit_bounds, repair_zeros, CleaningRules, ZeroRepairReport};
use super::features::{engineer_segments, fit_scales, fit_transform, TransformSpec, N_FEATURES};
use super::{impute, DataError, FrameSeries, Phase, RawSchema, N_RAW, N_TARGETS, TARGET_NAMES, WINDOW};

const MAGIC: &[u8; 4] = b"CPMW";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    /// Block length in hours.
    pub block: usize,
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            block: 168,
            train_frac: 0.9,
            seed: 123,
        }
    }
}

/// Window end rows assigned to each split. A window covers rows
/// `end + 1 - WINDOW ..= end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    /// Windows straddling a block boundary.
    pub dropped: usize,
    pub block_is_train: Vec<bool>,
    pub block: usize,
}

impl DatasetSplit {
    pub fn row_is_train(&self, row: usize) -> bool {
        self.block_is_train[row / self.block]
    }

    pub fn train_row_mask(&self, rows: usize) -> Vec<bool> {
        (0..rows).map(|r| self.row_is_train(r)).collect()
    }

    /// Rows where split membership changes from the previous row.
    pub fn segment_starts(&self, rows: usize) -> Vec<usize> {
        (1..rows)
            .filter(|&r| self.row_is_train(r) != self.row_is_train(r - 1))
            .collect()
    }
}

/// End rows of all stride-1 windows over `rows` records.
pub fn make_windows(rows: usize, window: usize) -> Result<Vec<usize>, DataError> {
    if rows < window {
        return Err(DataError::TooShort { rows, needed: window });
    }
    Ok((window - 1..rows).collect())
}

/// Shuffles row blocks by seed, assigns the first `train_frac` of them to
/// training and keeps only windows that sit entirely inside one block.
pub fn split_blocks(rows: usize, window: usize, plan: &SplitPlan) -> Result<DatasetSplit, DataError> {
    let ends = make_windows(rows, window)?;
    let block = plan.block.max(window);
    let n_blocks = rows.div_ceil(block);
    let mut order: Vec<usize> = (0..n_blocks).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(plan.seed));
    let mut n_train = (plan.train_frac * n_blocks as f64).round() as usize;
    if n_blocks >= 2 {
        n_train = n_train.clamp(1, n_blocks - 1);
    } else {
        n_train = n_blocks;
    }
    let mut block_is_train = vec![false; n_blocks];
    for &b in &order[..n_train] {
        block_is_train[b] = true;
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut dropped = 0;
    for end in ends {
        let start = end + 1 - window;
        let b = end / block;
        if start / block != b {
            dropped += 1;
        } else if block_is_train[b] {
            train.push(end);
        } else {
            val.push(end);
        }
    }
    Ok(DatasetSplit {
        train,
        val,
        dropped,
        block_is_train,
        block,
    })
}

/// One model input with its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `WINDOW x 98` standardized features.
    pub features: Array2<f32>,
    /// Targets at the final step, original units.
    pub targets: Array1<f64>,
    pub phase: Option<Phase>,
    /// Cleaned raw process variables at the final step.
    pub raw: Array1<f64>,
}

/// A batch of windows laid out for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub ends: Vec<usize>,
    /// `(B * WINDOW) x 98`, batch-major.
    pub x: Array2<f32>,
    /// `B x 6` standardized targets.
    pub y: Array2<f32>,
    /// `B x 6` targets in original units.
    pub y_raw: Array2<f64>,
    /// `B x 31` raw variables at the final step of each window.
    pub raw_last: Array2<f64>,
    pub phases: Vec<Option<Phase>>,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub plant_id: String,
    pub seed: u64,
    pub rows: usize,
    pub window: usize,
    pub n_features: usize,
    pub start: String,
    pub plan: SplitPlan,
    pub split: DatasetSplit,
    pub zero_repair: Vec<(String, ZeroRepairReport)>,
}

/// A cleaned, standardized and split plant dataset.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub plant_id: String,
    pub spec: TransformSpec,
    pub start: NaiveDateTime,
    /// `rows x 98` standardized features.
    pub features: Array2<f32>,
    /// `rows x 31` cleaned raw variables.
    pub raw: Array2<f64>,
    /// `rows x 6` cleaned targets in original units.
    pub targets: Array2<f64>,
    pub phases: Vec<Option<Phase>>,
    pub plan: SplitPlan,
    pub split: DatasetSplit,
    pub zero_repair: Vec<(String, ZeroRepairReport)>,
}

/// Runs the full pipeline on one plant: impute, block split, fit and apply
/// percentile clipping, CO zero repair, feature engineering and transform
/// fitting. Every statistic is fitted on training rows only.
pub fn prepare(
    series: FrameSeries,
    schema: &RawSchema,
    rules: &CleaningRules,
    plan: &SplitPlan,
) -> Result<PreparedDataset, DataError> {
    schema.validate()?;
    let series = impute(series);
    let rows = series.len();
    let split = split_blocks(rows, WINDOW, plan)?;
    let mask = split.train_row_mask(rows);

    let mut bounds = Vec::new();
    let names: Vec<String> = schema
        .columns
        .iter()
        .chain(&schema.targets)
        .map(|c| c.name.clone())
        .collect();
    for (j, name) in names.iter().enumerate() {
        let Some((lo, hi)) = rules.percentiles_for(name) else {
            continue;
        };
        let col = if j < N_RAW {
            series.features.column(j)
        } else {
            series.targets.column(j - N_RAW)
        };
        let train: Vec<f64> = col.iter().zip(&mask).filter(|(_, m)| **m).map(|(v, _)| *v).collect();
        bounds.push(fit_bounds(name, &train, lo, hi));
    }
    let raw_names = schema.column_names();
    let partial = TransformSpec {
        schema_hash: schema.hash(),
        features: Vec::new(),
        bounds,
        targets: Vec::new(),
        raw: Vec::new(),
        dropped: Vec::new(),
    };
    let (raw, targets, zero_repair) = clean(&series, schema, rules, &partial, plan.seed);

    let fs = engineer_segments(&raw, &series.timestamps, schema, &split.segment_starts(rows));
    let (features, standardized) = fit_transform(&fs, &mask)?;
    let dropped = features.iter().filter(|f| f.dropped).map(|f| f.name.clone()).collect();
    let target_names: Vec<String> = TARGET_NAMES.iter().map(|s| s.to_string()).collect();
    let spec = TransformSpec {
        features,
        targets: fit_scales(&target_names, &targets, &mask),
        raw: fit_scales(&raw_names, &raw, &mask),
        dropped,
        ..partial
    };
    Ok(PreparedDataset {
        plant_id: series.plant_id.clone(),
        spec,
        start: series.timestamps[0],
        features: standardized.mapv(|v| v as f32),
        raw,
        targets,
        phases: series.phases,
        plan: *plan,
        split,
        zero_repair,
    })
}

/// Prepares another plant's data with a frozen spec (no refitting).
pub fn prepare_with_spec(
    series: FrameSeries,
    schema: &RawSchema,
    rules: &CleaningRules,
    spec: &TransformSpec,
    plan: &SplitPlan,
) -> Result<PreparedDataset, DataError> {
    schema.validate()?;
    if schema.hash() != spec.schema_hash {
        return Err(DataError::InvalidSchema(format!(
            "schema hash {} does not match transform spec {}",
            schema.hash(),
            spec.schema_hash
        )));
    }
    let series = impute(series);
    let split = split_blocks(series.len(), WINDOW, plan)?;
    let (raw, targets, zero_repair) = clean(&series, schema, rules, spec, plan.seed);
    let fs = engineer_segments(&raw, &series.timestamps, schema, &split.segment_starts(series.len()));
    let standardized = spec.transform(&fs.data);
    Ok(PreparedDataset {
        plant_id: series.plant_id.clone(),
        spec: spec.clone(),
        start: series.timestamps[0],
        features: standardized.mapv(|v| v as f32),
        raw,
        targets,
        phases: series.phases,
        plan: *plan,
        split,
        zero_repair,
    })
}

type Cleaned = (Array2<f64>, Array2<f64>, Vec<(String, ZeroRepairReport)>);

fn clean(series: &FrameSeries, schema: &RawSchema, rules: &CleaningRules, spec: &TransformSpec, seed: u64) -> Cleaned {
    let mut raw = series.features.clone();
    let mut targets = series.targets.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000_0000_0c0d);
    let mut reports = Vec::new();
    let cols = schema.columns.iter().chain(&schema.targets).enumerate();
    for (j, c) in cols {
        let mut col = if j < N_RAW {
            raw.column(j).to_vec()
        } else {
            targets.column(j - N_RAW).to_vec()
        };
        if let Some(b) = spec.bounds.iter().find(|b| b.name == c.name) {
            clean_percentiles(&mut col, b);
        }
        if rules.zero_repair.iter().any(|z| *z == c.name) {
            reports.push((c.name.clone(), repair_zeros(&mut col, &mut rng)));
        }
        let mut dst = if j < N_RAW {
            raw.column_mut(j)
        } else {
            targets.column_mut(j - N_RAW)
        };
        dst.assign(&Array1::from(col));
    }
    (raw, targets, reports)
}

impl PreparedDataset {
    pub fn rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn timestamp(&self, row: usize) -> NaiveDateTime {
        self.start + Duration::hours(row as i64)
    }

    pub fn standardized_targets(&self) -> Array2<f64> {
        self.spec.standardize_targets(&self.targets)
    }

    pub fn sample(&self, end: usize) -> WindowSample {
        let start = end + 1 - WINDOW;
        WindowSample {
            features: self.features.slice(ndarray::s![start..=end, ..]).to_owned(),
            targets: self.targets.row(end).to_owned(),
            phase: self.phases[end],
            raw: self.raw.row(end).to_owned(),
        }
    }

    /// Raw rows of the window ending at `end`.
    pub fn raw_window(&self, end: usize) -> Array2<f64> {
        self.raw.slice(ndarray::s![end + 1 - WINDOW..=end, ..]).to_owned()
    }

    pub fn gather(&self, ends: &[usize]) -> WindowSet {
        let b = ends.len();
        let mut x = Array2::zeros((b * WINDOW, N_FEATURES));
        let mut y = Array2::zeros((b, N_TARGETS));
        let mut y_raw = Array2::zeros((b, N_TARGETS));
        let mut raw_last = Array2::zeros((b, N_RAW));
        let mut phases = Vec::with_capacity(b);
        for (i, &end) in ends.iter().enumerate() {
            let start = end + 1 - WINDOW;
            x.slice_mut(ndarray::s![i * WINDOW..(i + 1) * WINDOW, ..])
                .assign(&self.features.slice(ndarray::s![start..=end, ..]));
            for k in 0..N_TARGETS {
                let v = self.targets[[end, k]];
                y_raw[[i, k]] = v;
                y[[i, k]] = self.spec.targets[k].standardize(v) as f32;
            }
            raw_last.row_mut(i).assign(&self.raw.row(end));
            phases.push(self.phases[end]);
        }
        WindowSet {
            ends: ends.to_vec(),
            x,
            y,
            y_raw,
            raw_last,
            phases,
        }
    }

    /// Training rows only, used for fitting auxiliary statistics.
    pub fn train_row_mask(&self) -> Vec<bool> {
        self.split.train_row_mask(self.rows())
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            plant_id: self.plant_id.clone(),
            seed: self.plan.seed,
            rows: self.rows(),
            window: WINDOW,
            n_features: N_FEATURES,
            start: self.start.format("%Y-%m-%dT%H:%M:%S").to_string(),
            plan: self.plan,
            split: self.split.clone(),
            zero_repair: self.zero_repair.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        std::fs::create_dir_all(dir)?;
        self.spec.save(&dir.join("spec.json"))?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest())?)?;
        let mut w = BufWriter::new(File::create(dir.join("windows.bin"))?);
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.rows() as u64).to_le_bytes())?;
        for n in [N_FEATURES, N_RAW, N_TARGETS] {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&self.start.and_utc().timestamp().to_le_bytes())?;
        for v in self.features.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.raw.iter().chain(self.targets.iter()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        for p in &self.phases {
            let code = p.map(|p| p.index() as f32).unwrap_or(-1.0);
            w.write_all(&code.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let spec = TransformSpec::load(&dir.join("spec.json"))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        let path = dir.join("windows.bin");
        let malformed = |reason: &str| DataError::Malformed {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut r = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(malformed("bad magic"));
        }
        if read_u32(&mut r)? != FORMAT_VERSION {
            return Err(malformed("unsupported version"));
        }
        let rows = read_u64(&mut r)? as usize;
        let dims = [read_u32(&mut r)?, read_u32(&mut r)?, read_u32(&mut r)?];
        if dims != [N_FEATURES as u32, N_RAW as u32, N_TARGETS as u32] || rows != manifest.rows {
            return Err(malformed("shape header disagrees with manifest"));
        }
        let mut ts = [0u8; 8];
        r.read_exact(&mut ts)?;
        let start = DateTime::from_timestamp(i64::from_le_bytes(ts), 0)
            .ok_or_else(|| malformed("bad start time"))?
            .naive_utc();
        let features = read_block(&mut r, rows, N_FEATURES)?;
        let raw = read_block(&mut r, rows, N_RAW)?.mapv(|v| v as f64);
        let targets = read_block(&mut r, rows, N_TARGETS)?.mapv(|v| v as f64);
        let codes = read_block(&mut r, rows, 1)?;
        let phases = codes
            .index_axis(Axis(1), 0)
            .iter()
            .map(|&c| if c < 0.0 { None } else { Phase::from_index(c as usize) })
            .collect();
        Ok(Self {
            plant_id: manifest.plant_id,
            spec,
            start,
            features,
            raw,
            targets,
            phases,
            plan: manifest.plan,
            split: manifest.split,
            zero_repair: manifest.zero_repair,
        })
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_block(r: &mut impl Read, rows: usize, cols: usize) -> std::io::Result<Array2<f32>> {
    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)?;
    let data = buf
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("sized buffer"))
}
