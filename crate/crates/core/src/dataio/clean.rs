use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Jitter ceiling used when a column has no nonzero value to take a median of.
const ALL_ZERO_EPS: f64 = 1e-3;

/// Percentile pair per indicator. Indicators not listed use `default`;
/// indicators listed in `skip` are left unclipped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleaningRules {
    pub default: (f64, f64),
    pub overrides: BTreeMap<String, (f64, f64)>,
    pub skip: Vec<String>,
    /// Indicators that get zero-run repair.
    pub zero_repair: Vec<String>,
}

impl Default for CleaningRules {
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        overrides.insert("PM".into(), (5.0, 95.0));
        overrides.insert("HCl".into(), (5.0, 95.0));
        overrides.insert("NOx".into(), (2.0, 98.0));
        Self {
            default: (1.0, 99.0),
            overrides,
            skip: vec!["CO".into()],
            zero_repair: vec!["CO".into()],
        }
    }
}

impl CleaningRules {
    pub fn percentiles_for(&self, name: &str) -> Option<(f64, f64)> {
        if self.skip.iter().any(|s| s == name) {
            return None;
        }
        Some(self.overrides.get(name).copied().unwrap_or(self.default))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorBounds {
    pub name: String,
    pub lower_pct: f64,
    pub upper_pct: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Percentile of already-sorted data with linear interpolation between order
/// statistics (`q` in 0..=100).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn fit_bounds(name: &str, train_values: &[f64], lower_pct: f64, upper_pct: f64) -> IndicatorBounds {
    let mut sorted: Vec<f64> = train_values.iter().copied().filter(|v| v.is_finite()).collect();
    sorted.sort_by(f64::total_cmp);
    let (lower, upper) = if sorted.is_empty() {
        (f64::NEG_INFINITY, f64::INFINITY)
    } else {
        (percentile(&sorted, lower_pct), percentile(&sorted, upper_pct))
    };
    IndicatorBounds {
        name: name.to_string(),
        lower_pct,
        upper_pct,
        lower,
        upper,
    }
}

/// Clips values to fitted bounds.
pub fn clean_percentiles(col: &mut [f64], bounds: &IndicatorBounds) {
    for v in col.iter_mut() {
        *v = v.clamp(bounds.lower, bounds.upper);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZeroRepairReport {
    pub interpolated: usize,
    pub jittered: usize,
    /// Long zero runs that had no nonzero neighbour on one side.
    pub fallback_runs: usize,
    pub all_zero: bool,
}

/// Zero-run repair: runs of three or more zeros between nonzero neighbours
/// are linearly interpolated; shorter runs become uniform draws in `(0, eps]`
/// with `eps` one percent of the nonzero median.
pub fn repair_zeros<R: Rng>(col: &mut [f64], rng: &mut R) -> ZeroRepairReport {
    let mut report = ZeroRepairReport::default();
    let mut nonzero: Vec<f64> = col.iter().copied().filter(|v| *v != 0.0).collect();
    let eps = if nonzero.is_empty() {
        report.all_zero = !col.is_empty();
        if report.all_zero {
            log::warn!("zero repair: column is entirely zero, falling back to jitter");
        }
        ALL_ZERO_EPS
    } else {
        nonzero.sort_by(f64::total_cmp);
        0.01 * percentile(&nonzero, 50.0).abs()
    };
    let eps = if eps > 0.0 { eps } else { ALL_ZERO_EPS };
    let jitter = |rng: &mut R| eps * (1.0 - rng.random::<f64>());

    let n = col.len();
    let mut i = 0;
    while i < n {
        if col[i] != 0.0 {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && col[i] == 0.0 {
            i += 1;
        }
        let end = i; // exclusive
        let len = end - start;
        let has_left = start > 0;
        let has_right = end < n;
        if len >= 3 && has_left && has_right {
            let a = col[start - 1];
            let b = col[end];
            let span = (len + 1) as f64;
            for (k, v) in col[start..end].iter_mut().enumerate() {
                *v = a + (b - a) * (k + 1) as f64 / span;
            }
            report.interpolated += len;
        } else {
            if len >= 3 {
                report.fallback_runs += 1;
                log::warn!("zero repair: run of {len} zeros at {start} has no bracketing values");
            }
            for v in col[start..end].iter_mut() {
                *v = jitter(rng);
            }
            report.jittered += len;
        }
    }
    report
}
