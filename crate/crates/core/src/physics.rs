//! Conservation residuals (excess air, pollutant mass, energy) with
//! trainable positive lumped scalars.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};
use crate::dataio::{RawSchema, TargetScale, N_TARGETS};
use crate::optim::AdamW;

#[derive(Debug, thiserror::Error)]
pub enum PhysicsError {
    #[error("physics field {field} is bound to unknown column {column}")]
    UnknownColumn { field: String, column: String },
    #[error("physics field {0} is not bound")]
    Unbound(String),
    #[error("unknown physics field {0}")]
    UnknownField(String),
}

/// Physics fields read from raw process columns.
pub const FIELDS: [&str; 11] = [
    "Q1", "Q2", "Q_s", "O2_dry", "Q_fg", "T1", "T2", "v_fg", "T_furn_avg", "T_RT", "T_BH_out",
];

/// Raw-unit state of one row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhysicsVars {
    pub q1: f64,
    pub q2: f64,
    pub q_s: f64,
    pub o2_dry: f64,
    pub q_fg: f64,
    pub c_poll_tot: f64,
    pub t1: f64,
    pub t2: f64,
    pub v_fg: f64,
    pub t_furn_avg: f64,
    pub t_rt: f64,
    pub t_bh_out: f64,
}

/// Lumped constants of the three balances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scalars {
    pub k_af: f64,
    pub b_poll: f64,
    pub c_poll: f64,
    pub alpha_s: f64,
    pub alpha_1: f64,
    pub alpha_2: f64,
    pub beta_fg: f64,
    pub beta_rt: f64,
    pub beta_bh: f64,
}

impl Scalars {
    pub const NAMES: [&'static str; 9] = [
        "k_af", "b_poll", "c_poll", "alpha_s", "alpha_1", "alpha_2", "beta_fg", "beta_rt", "beta_bh",
    ];
    /// Indices held fixed during training. Each balance is homogeneous in its
    /// scalars, so one scalar per balance sets the scale.
    pub const ANCHORS: [usize; 2] = [1, 6];

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.k_af,
            self.b_poll,
            self.c_poll,
            self.alpha_s,
            self.alpha_1,
            self.alpha_2,
            self.beta_fg,
            self.beta_rt,
            self.beta_bh,
        ]
    }

    pub fn from_array(a: [f64; 9]) -> Self {
        Self {
            k_af: a[0],
            b_poll: a[1],
            c_poll: a[2],
            alpha_s: a[3],
            alpha_1: a[4],
            alpha_2: a[5],
            beta_fg: a[6],
            beta_rt: a[7],
            beta_bh: a[8],
        }
    }

    pub fn is_positive(&self) -> bool {
        self.to_array().iter().all(|v| *v > 0.0 && v.is_finite())
    }

    /// Moment-based starting point: each balance is matched on average with
    /// the anchors taken from `anchors`.
    pub fn warm_start(vars: &[PhysicsVars], norm: &PhysicsNorm, anchors: &Scalars) -> Self {
        let rows: Vec<&PhysicsVars> = vars.iter().filter(|v| !norm.is_degenerate(v)).collect();
        let n = rows.len().max(1) as f64;
        let mean = |f: &dyn Fn(&PhysicsVars) -> f64| rows.iter().map(|v| f(v)).sum::<f64>() / n;
        let positive = |x: f64, fallback: f64| if x > 0.0 && x.is_finite() { x } else { fallback };
        let k_af = positive(
            mean(&|v| v.q1 + v.q2) / mean(&|v| lambda_stack(v) * v.q_s),
            1.0,
        );
        let b = anchors.b_poll;
        let c_poll = positive(b * mean(&|v| v.q_fg * v.c_poll_tot) / mean(&|v| v.q_s), 1.0);
        let e_fg = anchors.beta_fg * mean(&|v| v.v_fg * v.t_furn_avg);
        let beta_rt = positive(0.05 * e_fg / mean(&|v| v.t_rt), 1.0);
        let beta_bh = positive(0.05 * e_fg / mean(&|v| v.t_bh_out), 1.0);
        let e_in = 1.1 * e_fg / 3.0;
        Self {
            k_af,
            b_poll: b,
            c_poll,
            alpha_s: positive(e_in / mean(&|v| v.q_s), 1.0),
            alpha_1: positive(e_in / mean(&|v| v.q1 * v.t1), 1.0),
            alpha_2: positive(e_in / mean(&|v| v.q2 * v.t2), 1.0),
            beta_fg: anchors.beta_fg,
            beta_rt,
            beta_bh,
        }
    }
}

/// Intake-side excess air ratio.
pub fn lambda_in(v: &PhysicsVars, s: &Scalars) -> f64 {
    (v.q1 + v.q2) / (s.k_af * v.q_s)
}

/// Stack-side excess air ratio from dry-basis oxygen.
pub fn lambda_stack(v: &PhysicsVars) -> f64 {
    1.0 + v.o2_dry / (21.0 - v.o2_dry)
}

pub fn mass_residual(v: &PhysicsVars, s: &Scalars) -> f64 {
    s.b_poll * v.q_fg * v.c_poll_tot - s.c_poll * v.q_s
}

pub fn energy_residual(v: &PhysicsVars, s: &Scalars) -> f64 {
    let e_in = s.alpha_s * v.q_s + s.alpha_1 * v.q1 * v.t1 + s.alpha_2 * v.q2 * v.t2;
    let e_out = s.beta_fg * v.v_fg * v.t_furn_avg + s.beta_rt * v.t_rt + s.beta_bh * v.t_bh_out;
    e_in - e_out
}

/// Maps physics fields to raw column names, plus the concentration weights
/// that form the total pollutant load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsBinding {
    pub columns: BTreeMap<String, String>,
    /// Weights over PM, SO2, NOx, HCl, CO, CO2.
    pub weights: [f64; N_TARGETS],
}

impl Default for PhysicsBinding {
    fn default() -> Self {
        let pairs = [
            ("Q1", "Q1_primary_air"),
            ("Q2", "Q2_secondary_air"),
            ("Q_s", "steam_flow"),
            ("O2_dry", "O2_dry"),
            ("Q_fg", "flue_gas_flow"),
            ("T1", "T1_primary_air"),
            ("T2", "T2_secondary_air"),
            ("v_fg", "flue_gas_velocity"),
            ("T_furn_avg", "T_furn_avg"),
            ("T_RT", "T_RT"),
            ("T_BH_out", "T_BH_out"),
        ];
        Self {
            columns: pairs
                .iter()
                .map(|(f, c)| (f.to_string(), c.to_string()))
                .collect(),
            weights: [1.0, 1.0, 1.0, 1.0, 1.0, 0.0],
        }
    }
}

impl PhysicsBinding {
    pub fn resolve(&self, schema: &RawSchema) -> Result<BoundColumns, PhysicsError> {
        self.resolve_names(&schema.column_names())
    }

    /// Resolves against an ordered list of raw column names.
    pub fn resolve_names(&self, names: &[String]) -> Result<BoundColumns, PhysicsError> {
        for f in self.columns.keys() {
            if !FIELDS.contains(&f.as_str()) {
                return Err(PhysicsError::UnknownField(f.clone()));
            }
        }
        let mut idx = [0usize; 11];
        for (i, field) in FIELDS.iter().enumerate() {
            let col = self
                .columns
                .get(*field)
                .ok_or_else(|| PhysicsError::Unbound(field.to_string()))?;
            idx[i] = names.iter().position(|n| n == col).ok_or_else(|| PhysicsError::UnknownColumn {
                field: field.to_string(),
                column: col.clone(),
            })?;
        }
        Ok(BoundColumns {
            idx,
            weights: self.weights,
        })
    }
}

/// A binding resolved against a schema.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundColumns {
    pub idx: [usize; 11],
    pub weights: [f64; N_TARGETS],
}

impl BoundColumns {
    pub fn c_tot(&self, concentrations: ArrayView1<f64>) -> f64 {
        self.weights.iter().zip(concentrations).map(|(w, c)| w * c).sum()
    }

    pub fn vars(&self, raw: ArrayView1<f64>, c_poll_tot: f64) -> PhysicsVars {
        let g = |i: usize| raw[self.idx[i]];
        PhysicsVars {
            q1: g(0),
            q2: g(1),
            q_s: g(2),
            o2_dry: g(3),
            q_fg: g(4),
            c_poll_tot,
            t1: g(5),
            t2: g(6),
            v_fg: g(7),
            t_furn_avg: g(8),
            t_rt: g(9),
            t_bh_out: g(10),
        }
    }

    /// Physics state for each row of `raw` with the given concentrations.
    pub fn vars_batch(&self, raw: &Array2<f64>, concentrations: &Array2<f64>) -> Vec<PhysicsVars> {
        raw.rows()
            .into_iter()
            .zip(concentrations.rows())
            .map(|(r, c)| self.vars(r, self.c_tot(c)))
            .collect()
    }

    /// Index of the raw column bound to `field`.
    pub fn column_of(&self, field: &str) -> Option<usize> {
        FIELDS.iter().position(|f| *f == field).map(|i| self.idx[i])
    }
}

/// Fixed scales that bring the mass and energy residuals to order one, and
/// the degenerate-row thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsNorm {
    pub s_mass: f64,
    pub s_energy: f64,
    pub delta_s: f64,
    pub delta_o: f64,
}

impl Default for PhysicsNorm {
    fn default() -> Self {
        Self {
            s_mass: 1.0,
            s_energy: 1.0,
            delta_s: 0.0,
            delta_o: 0.0,
        }
    }
}

impl PhysicsNorm {
    /// Fits scales on training rows. `anchors` supplies the fixed
    /// `b_poll` and `beta_fg`.
    pub fn fit(vars: &[PhysicsVars], anchors: &Scalars) -> Self {
        let n = vars.len().max(1) as f64;
        let mean = |f: &dyn Fn(&PhysicsVars) -> f64| vars.iter().map(f).sum::<f64>() / n;
        let std = |f: &dyn Fn(&PhysicsVars) -> f64| {
            let m = mean(f);
            (vars.iter().map(|v| (f(v) - m).powi(2)).sum::<f64>() / n).sqrt()
        };
        let nonzero = |x: f64| if x.abs() > 0.0 && x.is_finite() { x.abs() } else { 1.0 };
        Self {
            s_mass: nonzero(anchors.b_poll * mean(&|v| v.q_fg * v.c_poll_tot)),
            s_energy: nonzero(anchors.beta_fg * mean(&|v| v.v_fg * v.t_furn_avg)),
            delta_s: 0.01 * std(&|v| v.q_s),
            delta_o: 0.01 * std(&|v| v.o2_dry),
        }
    }

    pub fn is_degenerate(&self, v: &PhysicsVars) -> bool {
        v.q_s <= self.delta_s || v.o2_dry >= 21.0 - self.delta_o
    }
}

/// Penalty weights for the excess-air, mass and energy terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for PhysicsWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysicsConfig {
    pub binding: PhysicsBinding,
    pub weights: PhysicsWeights,
    /// Use predicted concentrations in the mass balance; measured ones otherwise.
    pub use_predictions: bool,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            binding: PhysicsBinding::default(),
            weights: PhysicsWeights::default(),
            use_predictions: true,
        }
    }
}

/// Penalty of one row, or `None` when the row is degenerate.
pub fn row_penalty(v: &PhysicsVars, s: &Scalars, norm: &PhysicsNorm, w: &PhysicsWeights) -> Option<f64> {
    if norm.is_degenerate(v) {
        return None;
    }
    let d = lambda_in(v, s) - lambda_stack(v);
    let m = mass_residual(v, s) / norm.s_mass;
    let e = energy_residual(v, s) / norm.s_energy;
    Some(w.lambda1 * d * d + w.lambda2 * m * m + w.lambda3 * e * e)
}

/// Summary of the penalty over a set of rows.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhysicsReport {
    /// Mean penalty; degenerate rows contribute zero but are counted.
    pub loss: f64,
    pub rows: usize,
    pub masked: usize,
    pub mean_abs_lambda: f64,
    pub mean_abs_mass: f64,
    pub mean_abs_energy: f64,
}

impl PhysicsReport {
    pub fn masked_fraction(&self) -> f64 {
        if self.rows == 0 {
            0.0
        } else {
            self.masked as f64 / self.rows as f64
        }
    }

    /// Combines two reports as a row-count weighted mean.
    pub fn merge(&self, other: &PhysicsReport) -> PhysicsReport {
        let n = self.rows + other.rows;
        if n == 0 {
            return *self;
        }
        let w = |a: f64, b: f64| (a * self.rows as f64 + b * other.rows as f64) / n as f64;
        PhysicsReport {
            loss: w(self.loss, other.loss),
            rows: n,
            masked: self.masked + other.masked,
            mean_abs_lambda: w(self.mean_abs_lambda, other.mean_abs_lambda),
            mean_abs_mass: w(self.mean_abs_mass, other.mean_abs_mass),
            mean_abs_energy: w(self.mean_abs_energy, other.mean_abs_energy),
        }
    }
}

pub fn physics_report(vars: &[PhysicsVars], s: &Scalars, norm: &PhysicsNorm, w: &PhysicsWeights) -> PhysicsReport {
    let mut r = PhysicsReport {
        rows: vars.len(),
        ..Default::default()
    };
    if vars.is_empty() {
        return r;
    }
    for v in vars {
        match row_penalty(v, s, norm, w) {
            None => r.masked += 1,
            Some(p) => {
                r.loss += p;
                r.mean_abs_lambda += (lambda_in(v, s) - lambda_stack(v)).abs();
                r.mean_abs_mass += (mass_residual(v, s) / norm.s_mass).abs();
                r.mean_abs_energy += (energy_residual(v, s) / norm.s_energy).abs();
            }
        }
    }
    let n = vars.len() as f64;
    r.loss /= n;
    r.mean_abs_lambda /= n;
    r.mean_abs_mass /= n;
    r.mean_abs_energy /= n;
    r
}

/// Mean penalty over rows.
pub fn physics_loss(vars: &[PhysicsVars], s: &Scalars, norm: &PhysicsNorm, w: &PhysicsWeights) -> f64 {
    physics_report(vars, s, norm, w).loss
}

/// The nine scalars as `exp(theta)` parameters in a store.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhysicsParams {
    pub ids: [ParamId; 9],
}

impl PhysicsParams {
    pub const PREFIX: &'static str = "physics.log_";

    pub fn register<F: Real>(store: &mut ParamStore<F>, init: &Scalars) -> Self {
        let vals = init.to_array();
        let ids = std::array::from_fn(|i| {
            store.add(
                format!("{}{}", Self::PREFIX, Scalars::NAMES[i]),
                Array2::from_elem((1, 1), F::lit(vals[i].ln())),
            )
        });
        for a in Scalars::ANCHORS {
            store.set_frozen(ids[a], true);
        }
        Self { ids }
    }

    pub fn from_store<F: Real>(store: &ParamStore<F>) -> Option<Self> {
        let mut ids = [ParamId(0); 9];
        for (i, n) in Scalars::NAMES.iter().enumerate() {
            ids[i] = store.id(&format!("{}{}", Self::PREFIX, n))?;
        }
        Some(Self { ids })
    }

    pub fn values<F: Real>(&self, store: &ParamStore<F>) -> Scalars {
        Scalars::from_array(std::array::from_fn(|i| store.get(self.ids[i])[[0, 0]].as_f64().exp()))
    }

    pub fn set<F: Real>(&self, store: &mut ParamStore<F>, s: &Scalars) {
        for (id, v) in self.ids.iter().zip(s.to_array()) {
            store.get_mut(*id)[[0, 0]] = F::lit(v.ln());
        }
    }
}

/// Per-batch constants of the differentiable penalty. Degenerate rows are
/// zeroed so they contribute nothing while still counting in the mean.
#[derive(Debug, Clone)]
pub struct PhysicsBatch<F> {
    pub rows: usize,
    pub masked: usize,
    air_ratio: Array2<F>,
    lambda_stack: Array2<F>,
    q_fg: Array2<F>,
    q_s: Array2<F>,
    energy: Array2<F>,
}

impl<F: Real> PhysicsBatch<F> {
    pub fn new(vars: &[PhysicsVars], norm: &PhysicsNorm) -> Self {
        let n = vars.len();
        let mut air_ratio = Array2::zeros((n, 1));
        let mut lam = Array2::zeros((n, 1));
        let mut q_fg = Array2::zeros((n, 1));
        let mut q_s = Array2::zeros((n, 1));
        let mut energy = Array2::zeros((n, 6));
        let mut masked = 0;
        for (i, v) in vars.iter().enumerate() {
            if norm.is_degenerate(v) {
                masked += 1;
                continue;
            }
            air_ratio[[i, 0]] = F::lit((v.q1 + v.q2) / v.q_s);
            lam[[i, 0]] = F::lit(lambda_stack(v));
            q_fg[[i, 0]] = F::lit(v.q_fg / norm.s_mass);
            q_s[[i, 0]] = F::lit(v.q_s / norm.s_mass);
            let e = [
                v.q_s,
                v.q1 * v.t1,
                v.q2 * v.t2,
                -v.v_fg * v.t_furn_avg,
                -v.t_rt,
                -v.t_bh_out,
            ];
            for (j, x) in e.iter().enumerate() {
                energy[[i, j]] = F::lit(x / norm.s_energy);
            }
        }
        Self {
            rows: n,
            masked,
            air_ratio,
            lambda_stack: lam,
            q_fg,
            q_s,
            energy,
        }
    }

    /// Mean penalty as a graph node. `c_tot` is a `B x 1` node of total
    /// pollutant concentration in raw units.
    pub fn loss(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        params: &PhysicsParams,
        c_tot: Var,
        w: &PhysicsWeights,
    ) -> Var {
        let mut s = [None; 9];
        for (i, id) in params.ids.iter().enumerate() {
            let p = g.param(store, *id);
            s[i] = Some(g.exp(p));
        }
        let s = s.map(|v| v.expect("all scalars set"));

        let air = g.constant(self.air_ratio.clone());
        let lam_in = g.div(air, s[0]);
        let lam_stack = g.constant(self.lambda_stack.clone());
        let d = g.sub(lam_in, lam_stack);
        let t1 = g.square(d);

        let q_fg = g.constant(self.q_fg.clone());
        let out = g.mul(q_fg, c_tot);
        let out = g.mul(out, s[1]);
        let q_s = g.constant(self.q_s.clone());
        let inp = g.mul(q_s, s[2]);
        let m = g.sub(out, inp);
        let t2 = g.square(m);

        let coefs = g.concat_rows(&[s[3], s[4], s[5], s[6], s[7], s[8]]);
        let regs = g.constant(self.energy.clone());
        let e = g.matmul(regs, coefs);
        let t3 = g.square(e);

        let t1 = g.scale(t1, F::lit(w.lambda1));
        let t2 = g.scale(t2, F::lit(w.lambda2));
        let t3 = g.scale(t3, F::lit(w.lambda3));
        let sum = g.add(t1, t2);
        let sum = g.add(sum, t3);
        g.mean_all(sum)
    }
}

/// `B x 1` node of weighted total concentration from standardized
/// predictions `y` (`B x 6`).
pub fn c_tot_from_standardized<F: Real>(
    g: &mut Graph<F>,
    y: Var,
    scales: &[TargetScale],
    weights: &[f64; N_TARGETS],
) -> Var {
    let coef = Array2::from_shape_fn((N_TARGETS, 1), |(k, _)| F::lit(weights[k] * scales[k].std));
    let offset: f64 = (0..N_TARGETS).map(|k| weights[k] * scales[k].mean).sum();
    let c = g.constant(coef);
    let lin = g.matmul(y, c);
    g.add_scalar(lin, F::lit(offset))
}

/// Fits the non-anchor scalars to fixed rows (concentrations taken from
/// `c_poll_tot`) by full-batch gradient descent in log space.
pub fn fit_scalars(
    vars: &[PhysicsVars],
    norm: &PhysicsNorm,
    weights: &PhysicsWeights,
    init: &Scalars,
    steps: usize,
    lr: f64,
) -> Scalars {
    let mut store = ParamStore::<f64>::new();
    let params = PhysicsParams::register(&mut store, init);
    let batch = PhysicsBatch::<f64>::new(vars, norm);
    let c_tot = Array2::from_shape_fn((vars.len(), 1), |(i, _)| vars[i].c_poll_tot);
    let mut opt = AdamW::new(&store, 0.0, |_| false);
    for _ in 0..steps {
        let mut g = Graph::new();
        let c = g.constant(c_tot.clone());
        let loss = batch.loss(&mut g, &store, &params, c, weights);
        let grads = g.backward(loss, store.len());
        opt.step(&mut store, &grads, lr);
    }
    params.values(&store)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> PhysicsVars {
        PhysicsVars {
            q1: 55_000.0,
            q2: 35_000.0,
            q_s: 50.0,
            o2_dry: 21.0 * 0.8 / 1.8,
            q_fg: 100_000.0,
            c_poll_tot: 250.0,
            t1: 190.0,
            t2: 150.0,
            v_fg: 10.0,
            t_furn_avg: 950.0,
            t_rt: 200.0,
            t_bh_out: 150.0,
        }
    }

    fn scalars() -> Scalars {
        Scalars {
            k_af: 1000.0,
            b_poll: 1e-6,
            c_poll: 0.5,
            alpha_s: 60.0,
            alpha_1: 2.8e-4,
            alpha_2: 8e-4,
            beta_fg: 1.0,
            beta_rt: 2.0,
            beta_bh: 2.0,
        }
    }

    #[test]
    fn excess_air_arithmetic() {
        let mut v = row();
        v.o2_dry = 10.5;
        assert_eq!(lambda_stack(&v), 2.0);
        v.o2_dry = 0.0;
        assert_eq!(lambda_stack(&v), 1.0);
        let s = scalars();
        v.q1 = 60_000.0;
        v.q2 = 40_000.0;
        assert_eq!(lambda_in(&v, &s), 2.0);
    }

    #[test]
    fn mass_out_term_is_linear_in_concentration() {
        let s = scalars();
        let v = row();
        let mut v2 = v;
        v2.c_poll_tot *= 2.0;
        let out = |v: &PhysicsVars| mass_residual(v, &s) + s.c_poll * v.q_s;
        assert!((out(&v2) - 2.0 * out(&v)).abs() < 1e-9);
    }

    #[test]
    fn all_zero_state_has_zero_residuals() {
        let v = PhysicsVars::default();
        assert_eq!(mass_residual(&v, &scalars()), 0.0);
        assert_eq!(energy_residual(&v, &scalars()), 0.0);
    }

    #[test]
    fn zero_weights_give_zero_loss() {
        let w = PhysicsWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let vars = vec![row(); 4];
        assert_eq!(physics_loss(&vars, &scalars(), &PhysicsNorm::default(), &w), 0.0);
    }

    #[test]
    fn single_row_excess_air_gap() {
        let s = scalars();
        let mut v = row();
        // lambda_stack = 1.8; make lambda_in = 2.3
        v.q1 = 2.3 * s.k_af * v.q_s;
        v.q2 = 0.0;
        v.q_fg = s.c_poll * v.q_s / (s.b_poll * v.c_poll_tot);
        v.t2 = 0.0;
        let e_in = s.alpha_s * v.q_s + s.alpha_1 * v.q1 * v.t1;
        v.t_furn_avg = (e_in - s.beta_rt * v.t_rt - s.beta_bh * v.t_bh_out) / (s.beta_fg * v.v_fg);
        let w = PhysicsWeights {
            lambda1: 1.0,
            lambda2: 0.0,
            lambda3: 0.0,
        };
        let loss = physics_loss(&[v], &s, &PhysicsNorm::default(), &w);
        assert!((loss - 0.25).abs() < 1e-12, "{loss}");
        assert!(energy_residual(&v, &s).abs() < 1e-9);
    }

    #[test]
    fn degenerate_rows_count_but_contribute_zero() {
        let s = scalars();
        let norm = PhysicsNorm {
            delta_s: 1.0,
            ..PhysicsNorm::default()
        };
        let good = row();
        let mut bad = row();
        bad.q_s = 0.5;
        let w = PhysicsWeights::default();
        let single = physics_loss(&[good], &s, &norm, &w);
        let both = physics_report(&[good, bad], &s, &norm, &w);
        assert_eq!(both.masked, 1);
        assert!((both.loss - single / 2.0).abs() < 1e-15);
    }

    #[test]
    fn graph_loss_matches_direct_evaluation() {
        let s = scalars();
        let mut vars = Vec::new();
        for i in 0..5 {
            let mut v = row();
            v.q1 += 1000.0 * i as f64;
            v.t_rt += 3.0 * i as f64;
            v.c_poll_tot += 7.0 * i as f64;
            vars.push(v);
        }
        let norm = PhysicsNorm::fit(&vars, &s);
        let w = PhysicsWeights {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 2.0,
        };
        let direct = physics_loss(&vars, &s, &norm, &w);
        let mut store = ParamStore::<f64>::new();
        let params = PhysicsParams::register(&mut store, &s);
        let batch = PhysicsBatch::<f64>::new(&vars, &norm);
        let mut g = Graph::new();
        let c = g.constant(Array2::from_shape_fn((5, 1), |(i, _)| vars[i].c_poll_tot));
        let l = batch.loss(&mut g, &store, &params, c, &w);
        assert!((g.scalar(l) - direct).abs() < 1e-12 * direct.max(1.0));
    }

    #[test]
    fn anchors_are_frozen() {
        let mut store = ParamStore::<f64>::new();
        let p = PhysicsParams::register(&mut store, &scalars());
        assert!(store.is_frozen(p.ids[1]));
        assert!(store.is_frozen(p.ids[6]));
        assert!(!store.is_frozen(p.ids[0]));
        let back = p.values(&store);
        for (a, b) in back.to_array().iter().zip(scalars().to_array()) {
            assert!((a / b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binding_resolves_against_default_schema() {
        let b = PhysicsBinding::default().resolve(&RawSchema::mswi()).unwrap();
        assert_eq!(b.column_of("Q_s"), RawSchema::mswi().column_index("steam_flow"));
        let mut bad = PhysicsBinding::default();
        bad.columns.insert("Q_s".into(), "nope".into());
        assert!(matches!(
            bad.resolve(&RawSchema::mswi()),
            Err(PhysicsError::UnknownColumn { .. })
        ));
    }
}
