//! Digital twin over a trained checkpoint: what-if evaluation of control
//! deltas and constrained one-step navigation toward lower CPSI.

use std::collections::BTreeMap;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataio::{engineer_features, Phase, RawSchema, N_RAW, TARGET_NAMES, WINDOW};
use crate::eval::{cpsi, CpsiConfig, RegimeClusters};
use crate::model::{Checkpoint, ExpertKind, GateTrace, ModelError};
use crate::physics::{row_penalty, BoundColumns, PhysicsError, PhysicsNorm};

#[derive(Debug, thiserror::Error)]
pub enum TwinError {
    #[error("schema hash {found} does not match checkpoint {expected}")]
    SchemaMismatch { expected: String, found: String },
    #[error("unknown variable {0}")]
    UnknownVariable(String),
    #[error("unknown control module {0}")]
    UnknownModule(String),
    #[error("variable {0} belongs to more than one module")]
    OverlappingModules(String),
    #[error("window needs at least {need} rows of {cols} values, got {rows} rows")]
    WindowShape { need: usize, cols: usize, rows: usize },
    #[error("window contains non-finite values")]
    NonFinite,
    #[error("no control modules selected")]
    NoModules,
    #[error("top_n must be at least 1")]
    TopN,
    #[error("invalid twin config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

impl TwinError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            TwinError::SchemaMismatch { .. } => "schema_mismatch",
            TwinError::UnknownVariable(_) => "unknown_variable",
            TwinError::UnknownModule(_) => "unknown_module",
            TwinError::OverlappingModules(_) => "overlapping_modules",
            TwinError::WindowShape { .. } => "bad_window_shape",
            TwinError::NonFinite => "non_finite_window",
            TwinError::NoModules => "no_modules",
            TwinError::TopN => "bad_top_n",
            TwinError::Config(_) => "bad_config",
            TwinError::Model(_) => "model_error",
            TwinError::Physics(_) => "physics_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlModule {
    pub name: String,
    pub variables: Vec<String>,
}

/// Linear response of dependent variables to an action on another variable.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CoAdjust {
    /// action variable -> [(dependent variable, slope)]
    pub map: BTreeMap<String, Vec<(String, f64)>>,
}

impl CoAdjust {
    /// Least-squares slopes of first differences, `d dep = slope * d action`,
    /// fitted on rows of `raw`.
    pub fn fit(raw: &Array2<f64>, names: &[String], pairs: &[(String, String)]) -> Result<Self, TwinError> {
        let idx = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| TwinError::UnknownVariable(n.to_string()))
        };
        let mut map: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
        for (a, d) in pairs {
            let (ia, id) = (idx(a)?, idx(d)?);
            let (mut sxy, mut sxx) = (0.0, 0.0);
            for t in 1..raw.nrows() {
                let dx = raw[[t, ia]] - raw[[t - 1, ia]];
                let dy = raw[[t, id]] - raw[[t - 1, id]];
                sxy += dx * dy;
                sxx += dx * dx;
            }
            let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
            map.entry(a.clone()).or_default().push((d.clone(), slope));
        }
        Ok(Self { map })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    pub modules: Vec<ControlModule>,
    pub cpsi: CpsiConfig,
    /// Action bound as a fraction of each variable's training std.
    pub bound_fraction: f64,
    /// Grid points per variable, including zero.
    pub grid_steps: usize,
    pub action_weight: f64,
    pub physics_weight: f64,
    pub coadjust: Option<CoAdjust>,
}

impl Default for TwinConfig {
    fn default() -> Self {
        let m = |name: &str, vars: &[&str]| ControlModule {
            name: name.to_string(),
            variables: vars.iter().map(|v| v.to_string()).collect(),
        };
        Self {
            modules: vec![
                m("thermal_steam", &["feeder_speed", "steam_flow"]),
                m(
                    "air_grate",
                    &[
                        "Q1_primary_air",
                        "Q2_secondary_air",
                        "grate_speed_dry",
                        "grate_speed_burn",
                        "grate_speed_burnout",
                    ],
                ),
                m("o2_pressure", &["O2_dry", "furnace_pressure"]),
            ],
            cpsi: CpsiConfig::default(),
            bound_fraction: 0.5,
            grid_steps: 5,
            action_weight: 0.1,
            physics_weight: 1.0,
            coadjust: None,
        }
    }
}

/// Raw process rows, oldest first. Extra leading rows serve as history for
/// moving averages; the model sees the final `WINDOW` rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawWindow {
    pub rows: Vec<Vec<f64>>,
    /// Timestamp of the first row; hourly spacing.
    #[serde(default)]
    pub start: Option<NaiveDateTime>,
}

impl RawWindow {
    pub fn from_array(raw: &Array2<f64>, start: Option<NaiveDateTime>) -> Self {
        Self {
            rows: raw.rows().into_iter().map(|r| r.to_vec()).collect(),
            start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pollutants: BTreeMap<String, f64>,
    pub cpsi: f64,
    pub phase_probs: BTreeMap<String, f64>,
    pub gate_weights: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavScenario {
    pub action: BTreeMap<String, f64>,
    pub prediction: Prediction,
    pub action_penalty: f64,
    pub physics_penalty: f64,
    pub score: f64,
    pub feasible: bool,
    /// Variables whose delta exceeds its bound.
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavResult {
    pub baseline: NavScenario,
    /// Ascending by score.
    pub ranked: Vec<NavScenario>,
    pub candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub schema_hash: String,
    pub variables: Vec<String>,
    pub pollutants: Vec<String>,
    pub window: usize,
    pub modules: Vec<ControlModule>,
    pub bounds: BTreeMap<String, f64>,
    pub cpsi: CpsiConfig,
    pub experts: Vec<String>,
    pub phases: Vec<String>,
}

/// Immutable twin state; safe to share across request handlers.
#[derive(Debug, Clone)]
pub struct Twin {
    ck: Checkpoint,
    schema: RawSchema,
    config: TwinConfig,
    bounds: BTreeMap<String, f64>,
    stds: BTreeMap<String, f64>,
    bound: BoundColumns,
    norm: PhysicsNorm,
    clusters: Option<RegimeClusters>,
}

fn default_start() -> NaiveDateTime {
    NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date")
}

impl Twin {
    pub fn new(ck: Checkpoint, schema: RawSchema, config: TwinConfig) -> Result<Self, TwinError> {
        if schema.hash() != ck.spec.schema_hash {
            return Err(TwinError::SchemaMismatch {
                expected: ck.spec.schema_hash.clone(),
                found: schema.hash(),
            });
        }
        if !(config.bound_fraction > 0.0) || config.grid_steps < 2 {
            return Err(TwinError::Config("bound_fraction must be positive and grid_steps >= 2".into()));
        }
        config.cpsi.validate().map_err(|e| TwinError::Config(e.to_string()))?;
        let mut seen = std::collections::BTreeSet::new();
        let mut bounds = BTreeMap::new();
        let mut stds = BTreeMap::new();
        for m in &config.modules {
            for v in &m.variables {
                let s = ck
                    .spec
                    .raw
                    .iter()
                    .find(|r| &r.name == v)
                    .ok_or_else(|| TwinError::UnknownVariable(v.clone()))?;
                if !seen.insert(v.clone()) {
                    return Err(TwinError::OverlappingModules(v.clone()));
                }
                let sd = if s.std > 0.0 { s.std } else { 1.0 };
                stds.insert(v.clone(), sd);
                bounds.insert(v.clone(), config.bound_fraction * sd);
            }
        }
        let names = schema.column_names();
        let bound = ck.physics_config.binding.resolve_names(&names)?;
        let norm = ck.physics_norm.unwrap_or_default();
        Ok(Self {
            ck,
            schema,
            config,
            bounds,
            stds,
            bound,
            norm,
            clusters: None,
        })
    }

    pub fn with_clusters(mut self, clusters: RegimeClusters) -> Self {
        self.clusters = Some(clusters);
        self
    }

    pub fn clusters(&self) -> Option<&RegimeClusters> {
        self.clusters.as_ref()
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ck
    }

    pub fn config(&self) -> &TwinConfig {
        &self.config
    }

    pub fn bounds(&self) -> &BTreeMap<String, f64> {
        &self.bounds
    }

    pub fn meta(&self) -> Meta {
        Meta {
            schema_hash: self.ck.spec.schema_hash.clone(),
            variables: self.schema.column_names(),
            pollutants: TARGET_NAMES.iter().map(|s| s.to_string()).collect(),
            window: WINDOW,
            modules: self.config.modules.clone(),
            bounds: self.bounds.clone(),
            cpsi: self.config.cpsi.clone(),
            experts: self.ck.model.config.experts.iter().map(|k| k.name().to_string()).collect(),
            phases: Phase::ALL.iter().map(|p| p.name().to_string()).collect(),
        }
    }

    fn raw_matrix(&self, w: &RawWindow) -> Result<Array2<f64>, TwinError> {
        let rows = w.rows.len();
        if rows < WINDOW || w.rows.iter().any(|r| r.len() != N_RAW) {
            return Err(TwinError::WindowShape {
                need: WINDOW,
                cols: N_RAW,
                rows,
            });
        }
        let flat: Vec<f64> = w.rows.iter().flatten().copied().collect();
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(TwinError::NonFinite);
        }
        Ok(Array2::from_shape_vec((rows, N_RAW), flat).expect("checked shape"))
    }

    fn column(&self, name: &str) -> Result<usize, TwinError> {
        self.schema
            .column_index(name)
            .ok_or_else(|| TwinError::UnknownVariable(name.to_string()))
    }

    /// Raw rows with `action` added to the final row, including co-adjusted
    /// dependents.
    fn apply(&self, raw: &Array2<f64>, action: &BTreeMap<String, f64>) -> Result<Array2<f64>, TwinError> {
        let mut out = raw.clone();
        let last = out.nrows() - 1;
        for (name, delta) in action {
            let j = self.column(name)?;
            out[[last, j]] += delta;
            if let Some(co) = &self.config.coadjust {
                for (dep, slope) in co.map.get(name).into_iter().flatten() {
                    let k = self.column(dep)?;
                    out[[last, k]] += slope * delta;
                }
            }
        }
        Ok(out)
    }

    fn model_input(&self, raw: &Array2<f64>, start: NaiveDateTime) -> Array2<f32> {
        let ts: Vec<NaiveDateTime> = (0..raw.nrows()).map(|i| start + Duration::hours(i as i64)).collect();
        let fs = engineer_features(raw, &ts, &self.schema);
        let x = self.ck.spec.transform(&fs.data);
        x.slice(ndarray::s![x.nrows() - WINDOW.., ..]).mapv(|v| v as f32)
    }

    fn prediction(&self, y: ndarray::ArrayView1<f64>, trace: &GateTrace) -> Prediction {
        let conc: Vec<f64> = y.to_vec();
        Prediction {
            pollutants: TARGET_NAMES.iter().map(|n| n.to_string()).zip(conc.iter().copied()).collect(),
            cpsi: cpsi(&conc, &self.config.cpsi),
            phase_probs: Phase::ALL
                .iter()
                .map(|p| (p.name().to_string(), trace.phase_probs[p.index()]))
                .collect(),
            gate_weights: ExpertKind::ALL
                .iter()
                .map(|k| (k.name().to_string(), trace.weights[k.index()]))
                .collect(),
        }
    }

    /// Runs the model on modified copies of one window, one per action.
    fn run(&self, window: &RawWindow, actions: &[BTreeMap<String, f64>]) -> Result<Vec<(Prediction, Array2<f64>)>, TwinError> {
        let raw = self.raw_matrix(window)?;
        let start = window.start.unwrap_or_else(default_start);
        let mut xs = Vec::with_capacity(actions.len());
        let mut raws = Vec::with_capacity(actions.len());
        for a in actions {
            let r = self.apply(&raw, a)?;
            xs.push(self.model_input(&r, start));
            raws.push(r);
        }
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let x = ndarray::concatenate(Axis(0), &views).expect("equal widths");
        let (y, traces) = self.ck.model.predict(&self.ck.store, &x)?;
        let y = self.ck.spec.restore_targets(&y.mapv(|v| v as f64));
        Ok(raws
            .into_iter()
            .enumerate()
            .map(|(i, r)| (self.prediction(y.row(i), &traces[i]), r))
            .collect())
    }

    pub fn predict(&self, window: &RawWindow) -> Result<Prediction, TwinError> {
        Ok(self.run(window, &[BTreeMap::new()])?.remove(0).0)
    }

    fn scenario(&self, action: BTreeMap<String, f64>, prediction: Prediction, raw: &Array2<f64>) -> NavScenario {
        let mut violations = Vec::new();
        let mut action_penalty = 0.0;
        for (name, d) in &action {
            let b = self.bounds.get(name).copied().unwrap_or(0.0);
            if !(d.abs() <= b) {
                violations.push(name.clone());
            }
            let sd = self
                .stds
                .get(name)
                .copied()
                .or_else(|| self.ck.spec.raw.iter().find(|r| &r.name == name).map(|r| r.std))
                .filter(|s| *s > 0.0)
                .unwrap_or(1.0);
            action_penalty += (d / sd).powi(2);
        }
        let conc: Vec<f64> = TARGET_NAMES.iter().map(|n| prediction.pollutants[*n]).collect();
        let last = raw.row(raw.nrows() - 1);
        let vars = self.bound.vars(last, self.bound.c_tot(ndarray::ArrayView1::from(&conc)));
        let physics_penalty = row_penalty(&vars, &self.ck.scalars(), &self.norm, &self.ck.physics_config.weights)
            .unwrap_or(0.0);
        let score = prediction.cpsi + self.config.action_weight * action_penalty + self.config.physics_weight * physics_penalty;
        NavScenario {
            action,
            prediction,
            action_penalty,
            physics_penalty,
            score,
            feasible: violations.is_empty(),
            violations,
        }
    }

    /// Evaluates one action. Out-of-bounds deltas give an infeasible scenario.
    pub fn whatif(&self, window: &RawWindow, action: &BTreeMap<String, f64>) -> Result<NavScenario, TwinError> {
        let clean: BTreeMap<String, f64> = action.iter().filter(|(_, d)| **d != 0.0).map(|(k, v)| (k.clone(), *v)).collect();
        for (name, d) in &clean {
            self.column(name)?;
            if !d.is_finite() {
                return Err(TwinError::NonFinite);
            }
        }
        let (p, raw) = self.run(window, std::slice::from_ref(&clean))?.remove(0);
        Ok(self.scenario(clean, p, &raw))
    }

    /// Nonzero grid points of one variable, ascending.
    pub fn grid(&self, variable: &str) -> Vec<f64> {
        let b = self.bounds.get(variable).copied().unwrap_or(0.0);
        let n = self.config.grid_steps;
        (0..n)
            .map(|i| -b + 2.0 * b * i as f64 / (n - 1) as f64)
            .filter(|v| v.abs() > 1e-12 * b.max(1.0))
            .collect()
    }

    /// Scores the zero action and every single-variable grid move of the
    /// selected modules; returns the best `top_n` by score.
    pub fn navigate(&self, window: &RawWindow, modules: &[String], top_n: usize) -> Result<NavResult, TwinError> {
        if modules.is_empty() {
            return Err(TwinError::NoModules);
        }
        if top_n == 0 {
            return Err(TwinError::TopN);
        }
        let mut actions = vec![BTreeMap::new()];
        for name in modules {
            let m = self
                .config
                .modules
                .iter()
                .find(|m| &m.name == name)
                .ok_or_else(|| TwinError::UnknownModule(name.clone()))?;
            for v in &m.variables {
                for d in self.grid(v) {
                    actions.push(BTreeMap::from([(v.clone(), d)]));
                }
            }
        }
        let runs = self.run(window, &actions)?;
        let mut scenarios: Vec<(usize, NavScenario)> = actions
            .into_iter()
            .zip(runs)
            .map(|(a, (p, raw))| self.scenario(a, p, &raw))
            .enumerate()
            .collect();
        let baseline = scenarios[0].1.clone();
        let candidates = scenarios.len();
        scenarios.retain(|(_, s)| s.feasible);
        scenarios.sort_by(|a, b| a.1.score.total_cmp(&b.1.score).then(a.0.cmp(&b.0)));
        scenarios.truncate(top_n);
        Ok(NavResult {
            baseline,
            ranked: scenarios.into_iter().map(|(_, s)| s).collect(),
            candidates,
        })
    }
}
