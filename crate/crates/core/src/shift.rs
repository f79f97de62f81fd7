//! Between-plant shift of pollutant means.

use serde::{Deserialize, Serialize};

use crate::dataio::{N_TARGETS, TARGET_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShiftCategory {
    Low,
    Medium,
    High,
    /// Source mean is zero, so the relative shift is undefined.
    Undefined,
}

impl ShiftCategory {
    /// Below 15 % is low, 15 % to 30 % inclusive is medium, above is high.
    pub fn of(delta_pct: f64) -> Self {
        if !delta_pct.is_finite() {
            ShiftCategory::Undefined
        } else if delta_pct < 15.0 {
            ShiftCategory::Low
        } else if delta_pct <= 30.0 {
            ShiftCategory::Medium
        } else {
            ShiftCategory::High
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PollutantShift {
    pub name: String,
    pub mu_source: f64,
    pub mu_target: f64,
    pub delta_pct: f64,
    pub category: ShiftCategory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftReport {
    pub pollutants: Vec<PollutantShift>,
}

impl ShiftReport {
    pub fn get(&self, name: &str) -> Option<&PollutantShift> {
        self.pollutants.iter().find(|p| p.name == name)
    }
}

/// Relative mean shift in percent, `|mu_t - mu_s| / mu_s * 100`.
pub fn delta_pct(mu_source: f64, mu_target: f64) -> f64 {
    if mu_source == 0.0 {
        return f64::NAN;
    }
    (mu_target - mu_source).abs() / mu_source.abs() * 100.0
}

/// Per-pollutant shift between two target matrices (`rows x 6`).
pub fn domain_shift(source: &ndarray::Array2<f64>, target: &ndarray::Array2<f64>) -> ShiftReport {
    assert!(source.nrows() > 0 && target.nrows() > 0, "empty target sets");
    let pollutants = (0..N_TARGETS)
        .map(|k| {
            let mu_s = source.column(k).mean().unwrap_or(0.0);
            let mu_t = target.column(k).mean().unwrap_or(0.0);
            let d = delta_pct(mu_s, mu_t);
            PollutantShift {
                name: TARGET_NAMES[k].to_string(),
                mu_source: mu_s,
                mu_target: mu_t,
                delta_pct: d,
                category: ShiftCategory::of(d),
            }
        })
        .collect();
    ShiftReport { pollutants }
}
