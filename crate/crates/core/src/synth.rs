//! Regime-switching synthetic incineration plant whose flows, oxygen and
//! temperatures satisfy the three conservation balances exactly before
//! measurement noise.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{parse_timestamp, FrameSeries, Phase, RawSchema, N_RAW, N_TARGETS};
use crate::physics::Scalars;
use crate::shift::ShiftCategory;

/// Minimum series length accepted by [`gen_plant`].
pub const MIN_HOURS: usize = 24 * 30;
/// Concentration weights of the generator's own mass balance.
pub const LOAD_WEIGHTS: [f64; N_TARGETS] = [1.0, 1.0, 1.0, 1.0, 1.0, 0.0];

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid plant config: {0}")]
    InvalidConfig(String),
    #[error("infeasible shift: {0}")]
    InfeasibleShift(String),
    #[error("need at least {needed} hours, got {hours}")]
    TooShort { hours: usize, needed: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Saturating response of one pollutant to the four drivers (excess air,
/// furnace temperature, steam load, secondary-air share):
/// `base * (1 + sum_j coefs[j] * tanh(u_j))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionMap {
    pub base: f64,
    pub coefs: [f64; 4],
}

impl EmissionMap {
    pub fn eval(&self, u: &[f64; 4]) -> f64 {
        let s: f64 = self.coefs.iter().zip(u).map(|(a, x)| a * x.tanh()).sum();
        self.base * (1.0 + s)
    }
}

fn em(base: f64, coefs: [f64; 4]) -> EmissionMap {
    EmissionMap { base, coefs }
}

/// Operating point of one hidden regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    /// Mean residence time in hours.
    pub dwell_hours: f64,
    pub steam_flow: f64,
    pub excess_air: f64,
    pub primary_share: f64,
    pub t_primary_air: f64,
    pub t_secondary_air: f64,
    /// Drying, burning and burnout grate speeds (%).
    pub grate: [f64; 3],
    pub feeder: f64,
    /// Emission maps in target order.
    pub emissions: [EmissionMap; N_TARGETS],
}

/// Slow process variability around the regime operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessConfig {
    /// AR(1) coefficient of hourly deviations.
    pub ar: f64,
    /// Fraction of the gap to a new regime's operating point closed per hour.
    pub approach: f64,
    pub steam_sd: f64,
    pub excess_air_sd: f64,
    pub share_sd: f64,
    pub air_temp_sd: f64,
    pub t_rt_mean: f64,
    pub t_rt_sd: f64,
    pub t_bh_mean: f64,
    pub t_bh_sd: f64,
    /// Flue duct cross section (m2) linking air volume to gas velocity.
    pub duct_area: f64,
    /// Centers and scales that turn raw drivers into emission inputs.
    pub driver_center: [f64; 4],
    pub driver_scale: [f64; 4],
}

impl Default for ProcessConfig {
    fn default() -> Self {
        Self {
            ar: 0.95,
            approach: 0.25,
            steam_sd: 3.5,
            excess_air_sd: 0.07,
            share_sd: 0.02,
            air_temp_sd: 4.0,
            t_rt_mean: 200.0,
            t_rt_sd: 5.0,
            t_bh_mean: 150.0,
            t_bh_sd: 4.0,
            duct_area: 2.8,
            driver_center: [1.75, 1000.0, 50.0, 0.42],
            driver_scale: [0.15, 70.0, 6.0, 0.04],
        }
    }
}

/// Measurement noise. `scale = 0` gives exact balances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub scale: f64,
    /// Log-normal sigma on flows.
    pub flow_sigma: f64,
    /// Gaussian sigma on temperatures (degC).
    pub temp_sigma: f64,
    pub o2_sigma: f64,
    pub pressure_sigma: f64,
    /// Log-normal sigma on pollutant measurements.
    pub target_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            scale: 1.0,
            flow_sigma: 0.01,
            temp_sigma: 2.0,
            o2_sigma: 0.1,
            pressure_sigma: 0.002,
            target_sigma: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub plant_id: String,
    pub start: String,
    pub regimes: Vec<RegimeConfig>,
    /// Full row-stochastic transition matrix. When absent it is built from
    /// the dwell times with uniform exits.
    #[serde(default)]
    pub transitions: Option<Vec<Vec<f64>>>,
    pub scalars: Scalars,
    #[serde(default)]
    pub process: ProcessConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default = "unit_multipliers")]
    pub target_multipliers: [f64; N_TARGETS],
}

fn unit_multipliers() -> [f64; N_TARGETS] {
    [1.0; N_TARGETS]
}

impl PlantConfig {
    /// Ground-truth scalars of the default plant.
    pub fn default_scalars() -> Scalars {
        Scalars {
            k_af: 1000.0,
            b_poll: 1e-6,
            c_poll: 0.55,
            alpha_s: 60.0,
            alpha_1: 2.8e-4,
            alpha_2: 8e-4,
            beta_fg: 1.0,
            beta_rt: 2.0,
            beta_bh: 2.0,
        }
    }

    /// Default plant with 2 to 4 regimes.
    pub fn with_regimes(plant_id: &str, n_regimes: usize) -> Self {
        let all = default_regimes();
        let n = n_regimes.clamp(2, all.len());
        Self {
            plant_id: plant_id.to_string(),
            start: "2024-01-01T00:00:00".into(),
            regimes: all.into_iter().take(n).collect(),
            transitions: None,
            scalars: Self::default_scalars(),
            process: ProcessConfig::default(),
            noise: NoiseConfig::default(),
            target_multipliers: unit_multipliers(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let c: PlantConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if !(2..=4).contains(&self.regimes.len()) {
            return bad(format!("regime count {} outside 2..=4", self.regimes.len()));
        }
        if !self.scalars.is_positive() {
            return bad("physics scalars must be positive".into());
        }
        if parse_timestamp(&self.start).is_none() {
            return bad(format!("bad start time {:?}", self.start));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if r.dwell_hours < 1.0 {
                return bad(format!("regime {i}: dwell below one hour"));
            }
            if r.excess_air <= 1.0 || r.steam_flow <= 0.0 {
                return bad(format!("regime {i}: excess air must exceed 1 and steam be positive"));
            }
            if !(0.0..1.0).contains(&r.primary_share) || r.primary_share == 0.0 {
                return bad(format!("regime {i}: primary share outside (0, 1)"));
            }
            for (k, e) in r.emissions.iter().enumerate() {
                if e.base <= 0.0 || e.coefs.iter().map(|a| a.abs()).sum::<f64>() >= 1.0 {
                    return bad(format!(
                        "regime {i} pollutant {k}: base must be positive and coefficient mass below 1"
                    ));
                }
            }
        }
        if self.target_multipliers.iter().any(|m| *m <= 0.0) {
            return bad("target multipliers must be positive".into());
        }
        let p = self.transition_matrix();
        for (i, row) in p.iter().enumerate() {
            if row.len() != self.regimes.len()
                || row.iter().any(|v| *v < 0.0)
                || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9
            {
                return bad(format!("transition row {i} is not stochastic"));
            }
        }
        Ok(())
    }

    pub fn transition_matrix(&self) -> Vec<Vec<f64>> {
        if let Some(t) = &self.transitions {
            return t.clone();
        }
        let n = self.regimes.len();
        (0..n)
            .map(|i| {
                let stay = 1.0 - 1.0 / self.regimes[i].dwell_hours;
                (0..n)
                    .map(|j| if i == j { stay } else { (1.0 - stay) / (n - 1) as f64 })
                    .collect()
            })
            .collect()
    }
}

fn default_regimes() -> Vec<RegimeConfig> {
    vec![
        RegimeConfig {
            dwell_hours: 30.0,
            steam_flow: 44.0,
            excess_air: 1.90,
            primary_share: 0.62,
            t_primary_air: 175.0,
            t_secondary_air: 150.0,
            grate: [62.0, 45.0, 30.0],
            feeder: 40.0,
            emissions: [
                em(9.0, [0.15, -0.10, 0.25, 0.05]),
                em(45.0, [0.10, 0.20, 0.20, 0.0]),
                em(140.0, [0.20, 0.15, 0.10, -0.10]),
                em(11.0, [0.0, 0.15, 0.25, 0.0]),
                em(22.0, [-0.35, -0.20, 0.05, -0.20]),
                em(9.5, [-0.12, 0.02, 0.05, 0.0]),
            ],
        },
        RegimeConfig {
            dwell_hours: 20.0,
            steam_flow: 50.0,
            excess_air: 1.75,
            primary_share: 0.58,
            t_primary_air: 190.0,
            t_secondary_air: 155.0,
            grate: [48.0, 58.0, 35.0],
            feeder: 48.0,
            emissions: [
                em(12.0, [0.30, 0.10, 0.15, -0.10]),
                em(60.0, [-0.15, 0.30, 0.10, 0.10]),
                em(160.0, [0.10, 0.25, 0.05, -0.15]),
                em(14.0, [0.20, -0.10, 0.20, 0.0]),
                em(35.0, [-0.45, -0.10, 0.10, -0.30]),
                em(10.5, [-0.10, 0.03, 0.03, 0.0]),
            ],
        },
        RegimeConfig {
            dwell_hours: 40.0,
            steam_flow: 56.0,
            excess_air: 1.60,
            primary_share: 0.55,
            t_primary_air: 205.0,
            t_secondary_air: 160.0,
            grate: [42.0, 52.0, 50.0],
            feeder: 55.0,
            emissions: [
                em(10.0, [-0.10, 0.25, 0.30, 0.0]),
                em(55.0, [0.05, -0.20, 0.35, 0.0]),
                em(190.0, [0.05, 0.40, 0.10, -0.05]),
                em(12.0, [-0.10, 0.20, 0.25, 0.05]),
                em(15.0, [-0.20, -0.35, 0.15, -0.10]),
                em(11.5, [-0.15, 0.04, 0.02, 0.0]),
            ],
        },
        RegimeConfig {
            dwell_hours: 15.0,
            steam_flow: 40.0,
            excess_air: 2.05,
            primary_share: 0.60,
            t_primary_air: 185.0,
            t_secondary_air: 150.0,
            grate: [35.0, 40.0, 65.0],
            feeder: 35.0,
            emissions: [
                em(7.0, [0.10, 0.0, 0.10, 0.10]),
                em(35.0, [0.20, 0.10, 0.15, 0.0]),
                em(120.0, [0.25, 0.10, 0.05, 0.0]),
                em(9.0, [0.10, 0.10, 0.20, 0.0]),
                em(28.0, [-0.25, -0.25, 0.0, -0.15]),
                em(8.5, [-0.10, 0.02, 0.06, 0.0]),
            ],
        },
    ]
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[j] += pi[i] * p[i][j];
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    pi
}

fn draw_from<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Samples the hidden regime chain, starting from the stationary law.
pub fn sample_regimes<R: Rng>(config: &PlantConfig, hours: usize, rng: &mut R) -> Vec<usize> {
    let p = config.transition_matrix();
    let mut r = draw_from(rng, &stationary_distribution(&p));
    let mut out = Vec::with_capacity(hours);
    for _ in 0..hours {
        out.push(r);
        r = draw_from(rng, &p[r]);
    }
    out
}

/// Generated plant data together with the hidden state that produced it.
#[derive(Debug, Clone)]
pub struct SyntheticPlant {
    pub series: FrameSeries,
    pub regimes: Vec<usize>,
    /// Noise-free pollutant concentrations.
    pub true_targets: Array2<f64>,
}

struct Ar1 {
    rho: f64,
    innov: f64,
    value: f64,
}

impl Ar1 {
    fn new(rho: f64, sd: f64) -> Self {
        Self {
            rho,
            innov: sd * (1.0 - rho * rho).sqrt(),
            value: 0.0,
        }
    }

    fn step<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let e: f64 = rng.sample(StandardNormal);
        self.value = self.rho * self.value + self.innov * e;
        self.value
    }
}

/// Column positions in the default layout.
mod col {
    pub const T_UPPER: usize = 0;
    pub const T_MIDDLE: usize = 1;
    pub const T_LOWER: usize = 2;
    pub const T_AVG: usize = 3;
    pub const STEAM: usize = 4;
    pub const STEAM_P: usize = 5;
    pub const STEAM_T: usize = 6;
    pub const FEEDWATER: usize = 7;
    pub const T_EXIT: usize = 8;
    pub const T_ECON: usize = 9;
    pub const T_RT: usize = 10;
    pub const T_BH: usize = 11;
    pub const Q1: usize = 12;
    pub const Q2: usize = 13;
    pub const T1: usize = 14;
    pub const T2: usize = 15;
    pub const GRATE_DRY: usize = 16;
    pub const GRATE_BURN: usize = 17;
    pub const GRATE_OUT: usize = 18;
    pub const FEEDER: usize = 19;
    pub const Q_FG: usize = 20;
    pub const V_FG: usize = 21;
    pub const O2: usize = 22;
    pub const O2_EXIT: usize = 23;
    pub const P_FURN: usize = 24;
    pub const P_ECON: usize = 25;
    pub const P_BH: usize = 26;
    pub const LIME: usize = 27;
    pub const UREA: usize = 28;
    pub const CARBON: usize = 29;
    pub const QUENCH: usize = 30;
}

/// Hourly driver vector `[excess air, furnace temperature, steam, secondary share]`.
fn drivers(p: &ProcessConfig, lambda: f64, t_furn: f64, q_s: f64, s2: f64) -> [f64; 4] {
    let raw = [lambda, t_furn, q_s, s2];
    std::array::from_fn(|j| (raw[j] - p.driver_center[j]) / p.driver_scale[j])
}

/// Generates `hours` of plant data. Deterministic for a given seed.
pub fn gen_plant(config: &PlantConfig, hours: usize, seed: u64) -> Result<SyntheticPlant, SynthError> {
    config.validate()?;
    if hours < MIN_HOURS {
        return Err(SynthError::TooShort {
            hours,
            needed: MIN_HOURS,
        });
    }
    let schema = RawSchema::mswi();
    debug_assert_eq!(schema.column_index("T_furn_avg"), Some(col::T_AVG));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let regimes = sample_regimes(config, hours, &mut rng);
    let pc = &config.process;
    let s = &config.scalars;
    let nz = &config.noise;
    let kappa = 1.1 / (3600.0 * pc.duct_area);

    let mut ar_steam = Ar1::new(pc.ar, pc.steam_sd);
    let mut ar_lambda = Ar1::new(pc.ar, pc.excess_air_sd);
    let mut ar_share = Ar1::new(pc.ar, pc.share_sd);
    let mut ar_t1 = Ar1::new(pc.ar, pc.air_temp_sd);
    let mut ar_t2 = Ar1::new(pc.ar, pc.air_temp_sd);
    let mut ar_rt = Ar1::new(pc.ar, pc.t_rt_sd);
    let mut ar_bh = Ar1::new(pc.ar, pc.t_bh_sd);
    let mut ar_grate: [Ar1; 3] = std::array::from_fn(|_| Ar1::new(0.9, 2.0));
    let mut ar_press = Ar1::new(0.9, 20.0);
    let mut ar_tu = Ar1::new(0.8, 6.0);
    let mut ar_tl = Ar1::new(0.8, 6.0);
    let mut ar_econ = Ar1::new(0.9, 3.0);
    let mut ar_o2x = Ar1::new(0.8, 0.1);
    let mut ar_pf = Ar1::new(0.7, 0.005);
    let mut ar_carbon = Ar1::new(0.95, 0.8);

    let r0 = &config.regimes[regimes[0]];
    let mut lvl = [
        r0.steam_flow,
        r0.excess_air,
        r0.primary_share,
        r0.t_primary_air,
        r0.t_secondary_air,
        r0.grate[0],
        r0.grate[1],
        r0.grate[2],
        r0.feeder,
    ];

    let mut features = Array2::zeros((hours, N_RAW));
    let mut targets = Array2::zeros((hours, N_TARGETS));
    let mut true_targets = Array2::zeros((hours, N_TARGETS));
    let mut history: Vec<[f64; 4]> = Vec::with_capacity(hours);
    let mut prev_measured = [0.0; N_TARGETS];

    for t in 0..hours {
        let r = &config.regimes[regimes[t]];
        let goal = [
            r.steam_flow,
            r.excess_air,
            r.primary_share,
            r.t_primary_air,
            r.t_secondary_air,
            r.grate[0],
            r.grate[1],
            r.grate[2],
            r.feeder,
        ];
        for (l, g) in lvl.iter_mut().zip(goal) {
            *l += pc.approach * (g - *l);
        }
        let q_s = (lvl[0] + ar_steam.step(&mut rng)).max(5.0);
        let lambda = (lvl[1] + ar_lambda.step(&mut rng)).clamp(1.1, 3.0);
        let s1 = (lvl[2] + ar_share.step(&mut rng)).clamp(0.3, 0.85);
        let s2 = 1.0 - s1;
        let t1 = lvl[3] + ar_t1.step(&mut rng);
        let t2 = lvl[4] + ar_t2.step(&mut rng);
        let t_rt = pc.t_rt_mean + ar_rt.step(&mut rng);
        let t_bh = pc.t_bh_mean + ar_bh.step(&mut rng);

        // Excess-air closure.
        let air = lambda * s.k_af * q_s;
        let q1 = s1 * air;
        let q2 = s2 * air;
        let o2 = 21.0 * (lambda - 1.0) / lambda;
        // Energy closure.
        let v_fg = kappa * air;
        let e_in = s.alpha_s * q_s + s.alpha_1 * q1 * t1 + s.alpha_2 * q2 * t2;
        let t_furn = (e_in - s.beta_rt * t_rt - s.beta_bh * t_bh) / (s.beta_fg * v_fg);

        let d = drivers(pc, lambda, t_furn, q_s, s2);
        history.push(d);
        let lag = &history[t.saturating_sub(3)..t];
        let u: [f64; 4] = std::array::from_fn(|j| {
            if lag.is_empty() {
                d[j]
            } else {
                0.5 * d[j] + 0.5 * lag.iter().map(|h| h[j]).sum::<f64>() / lag.len() as f64
            }
        });
        let mut conc = [0.0; N_TARGETS];
        for k in 0..N_TARGETS {
            conc[k] = config.target_multipliers[k] * r.emissions[k].eval(&u);
        }
        let c_tot: f64 = conc.iter().zip(LOAD_WEIGHTS).map(|(c, w)| c * w).sum();
        // Mass closure.
        let q_fg = s.c_poll * q_s / (s.b_poll * c_tot);

        let mut gauss = |sd: f64| -> f64 {
            let e: f64 = rng.sample(StandardNormal);
            nz.scale * sd * e
        };
        let flow = |v: f64, e: f64| v * e.exp();

        let mut row = [0.0; N_RAW];
        let t_up = t_furn + 35.0 + ar_tu.value;
        let t_lo = t_furn - 40.0 + ar_tl.value;
        row[col::T_AVG] = t_furn + gauss(nz.temp_sigma);
        row[col::T_UPPER] = t_up + gauss(nz.temp_sigma);
        row[col::T_LOWER] = t_lo + gauss(nz.temp_sigma);
        row[col::T_MIDDLE] = 3.0 * t_furn - t_up - t_lo + gauss(nz.temp_sigma);
        row[col::STEAM] = flow(q_s, gauss(nz.flow_sigma));
        row[col::STEAM_P] = 4000.0 + 15.0 * (q_s - 50.0) + ar_press.value + gauss(nz.pressure_sigma * 1000.0);
        row[col::STEAM_T] = 400.0 + 0.4 * (q_s - 50.0) + 0.05 * (t_furn - 950.0) + gauss(nz.temp_sigma);
        row[col::FEEDWATER] = flow(1.02 * q_s, gauss(nz.flow_sigma));
        row[col::T_EXIT] = 0.85 * t_furn + 60.0 + gauss(nz.temp_sigma);
        let t_econ = 190.0 + 0.04 * (t_furn - 950.0) + ar_econ.value;
        row[col::T_ECON] = t_econ + gauss(nz.temp_sigma);
        row[col::T_RT] = t_rt + gauss(nz.temp_sigma);
        row[col::T_BH] = t_bh + gauss(nz.temp_sigma);
        row[col::Q1] = flow(q1, gauss(nz.flow_sigma));
        row[col::Q2] = flow(q2, gauss(nz.flow_sigma));
        row[col::T1] = t1 + gauss(nz.temp_sigma);
        row[col::T2] = t2 + gauss(nz.temp_sigma);
        for g in 0..3 {
            row[col::GRATE_DRY + g] = (lvl[5 + g] + ar_grate[g].value).max(0.0);
        }
        row[col::FEEDER] = (lvl[8] * q_s / r.steam_flow).max(0.0);
        row[col::Q_FG] = flow(q_fg, gauss(nz.flow_sigma));
        row[col::V_FG] = flow(v_fg, gauss(nz.flow_sigma));
        row[col::O2] = o2 + gauss(nz.o2_sigma);
        row[col::O2_EXIT] = o2 - 0.6 + ar_o2x.value + gauss(nz.o2_sigma);
        row[col::P_FURN] = -0.08 - 0.03 * (lambda - 1.7) + ar_pf.value + gauss(nz.pressure_sigma);
        row[col::P_ECON] = -1.2 - 0.05 * (v_fg - 10.0) + gauss(nz.pressure_sigma);
        row[col::P_BH] = -2.8 - 0.09 * (v_fg - 10.0) + gauss(nz.pressure_sigma);
        let prev = if t == 0 { conc } else { prev_measured };
        row[col::LIME] = flow(0.5 + 0.01 * (prev[1] + prev[3]), gauss(nz.flow_sigma));
        row[col::UREA] = flow(0.1 + 0.002 * prev[2], gauss(nz.flow_sigma));
        row[col::CARBON] = (5.0 + ar_carbon.value).max(0.0);
        row[col::QUENCH] = flow((2.0 + 0.03 * (t_econ - 190.0) + 0.01 * q_s).max(0.1), gauss(nz.flow_sigma));

        let mut measured = [0.0; N_TARGETS];
        for k in 0..N_TARGETS {
            measured[k] = flow(conc[k], gauss(nz.target_sigma));
        }
        // Slow auxiliary processes advance after the row is written.
        for a in ar_grate.iter_mut() {
            a.step(&mut rng);
        }
        for a in [&mut ar_press, &mut ar_tu, &mut ar_tl, &mut ar_econ, &mut ar_o2x, &mut ar_pf, &mut ar_carbon] {
            a.step(&mut rng);
        }

        features.row_mut(t).assign(&ndarray::ArrayView1::from(&row));
        targets.row_mut(t).assign(&ndarray::ArrayView1::from(&measured));
        true_targets.row_mut(t).assign(&ndarray::ArrayView1::from(&conc));
        prev_measured = measured;
    }

    let start = parse_timestamp(&config.start).expect("validated start");
    let timestamps: Vec<NaiveDateTime> = (0..hours).map(|h| start + Duration::hours(h as i64)).collect();
    let phases = regimes.iter().map(|&r| Phase::from_index(r)).collect();
    Ok(SyntheticPlant {
        series: FrameSeries {
            plant_id: config.plant_id.clone(),
            timestamps,
            features,
            targets,
            phases,
        },
        regimes,
        true_targets,
    })
}

/// Ground-truth sensitivity of pollutant `k` in regime `r` to the current
/// hour's secondary air flow, holding primary air, steam and the lagged
/// drivers fixed. Returned as the sign of the derivative.
pub fn secondary_air_response(config: &PlantConfig, regime: usize, k: usize, base: &SecondaryAirProbe) -> f64 {
    let s = &config.scalars;
    let pc = &config.process;
    let eval = |q2: f64| {
        let air = base.q1 + q2;
        let lambda = air / (s.k_af * base.q_s);
        let s2 = q2 / air;
        let v_fg = 1.1 / (3600.0 * pc.duct_area) * air;
        let e_in = s.alpha_s * base.q_s + s.alpha_1 * base.q1 * base.t1 + s.alpha_2 * q2 * base.t2;
        let t_furn = (e_in - s.beta_rt * base.t_rt - s.beta_bh * base.t_bh) / (s.beta_fg * v_fg);
        let d = drivers(pc, lambda, t_furn, base.q_s, s2);
        let u: [f64; 4] = std::array::from_fn(|j| 0.5 * d[j] + 0.5 * base.lagged[j]);
        config.regimes[regime].emissions[k].eval(&u)
    };
    let h = 1e-3 * base.q2;
    (eval(base.q2 + h) - eval(base.q2 - h)) / (2.0 * h)
}

/// Operating state used by [`secondary_air_response`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SecondaryAirProbe {
    pub q_s: f64,
    pub q1: f64,
    pub q2: f64,
    pub t1: f64,
    pub t2: f64,
    pub t_rt: f64,
    pub t_bh: f64,
    /// Mean normalized drivers over the previous hours.
    pub lagged: [f64; 4],
}

/// Mean and covariate shift used to derive a target plant from a source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub target_multipliers: [f64; N_TARGETS],
    /// Multipliers on regime operating points, keyed by field name
    /// (`steam_flow`, `excess_air`, `primary_share`, `t_primary_air`,
    /// `t_secondary_air`, `feeder`).
    #[serde(default)]
    pub covariates: BTreeMap<String, f64>,
}

impl Default for ShiftSpec {
    /// A high CO shift with a mild load change.
    fn default() -> Self {
        let mut covariates = BTreeMap::new();
        covariates.insert("steam_flow".into(), 1.05);
        let mut m = [1.0; N_TARGETS];
        m[crate::dataio::CO] = 1.6;
        Self {
            target_multipliers: m,
            covariates,
        }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            target_multipliers: [1.0; N_TARGETS],
            covariates: BTreeMap::new(),
        }
    }

    /// Category each pollutant is meant to land in.
    pub fn intended(&self) -> [ShiftCategory; N_TARGETS] {
        self.target_multipliers
            .map(|m| ShiftCategory::of((m - 1.0).abs() * 100.0))
    }
}

/// Derives a target-plant config. Fails when a multiplier would make
/// concentrations or operating points non-physical.
pub fn shift_plant(base: &PlantConfig, spec: &ShiftSpec, plant_id: &str) -> Result<PlantConfig, SynthError> {
    base.validate()?;
    let mut out = base.clone();
    out.plant_id = plant_id.to_string();
    for (k, m) in spec.target_multipliers.iter().enumerate() {
        if *m <= 0.0 || !m.is_finite() {
            return Err(SynthError::InfeasibleShift(format!(
                "multiplier {m} on pollutant {k} would make concentrations non-positive"
            )));
        }
        out.target_multipliers[k] *= m;
    }
    for (name, m) in &spec.covariates {
        if *m <= 0.0 || !m.is_finite() {
            return Err(SynthError::InfeasibleShift(format!("covariate {name} multiplier {m}")));
        }
        for r in out.regimes.iter_mut() {
            let field = match name.as_str() {
                "steam_flow" => &mut r.steam_flow,
                "excess_air" => &mut r.excess_air,
                "primary_share" => &mut r.primary_share,
                "t_primary_air" => &mut r.t_primary_air,
                "t_secondary_air" => &mut r.t_secondary_air,
                "feeder" => &mut r.feeder,
                other => return Err(SynthError::InfeasibleShift(format!("unknown covariate {other}"))),
            };
            *field *= m;
        }
    }
    out.validate().map_err(|e| SynthError::InfeasibleShift(e.to_string()))?;
    Ok(out)
}

/// Threshold labeler for plants without a recorded phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRules {
    /// Furnace temperature (degC) below which the bed is drying.
    pub drying_below: f64,
    pub pyrolysis_below: f64,
    /// Temperature at or above which burnout is assumed.
    pub burnout_from: f64,
    /// Burnout grate share of total grate speed that marks burnout.
    pub burnout_share: f64,
}

impl Default for PhaseRules {
    fn default() -> Self {
        Self {
            drying_below: 400.0,
            pyrolysis_below: 700.0,
            burnout_from: 1000.0,
            burnout_share: 0.5,
        }
    }
}

impl PhaseRules {
    pub fn label(&self, t_furn: f64, grate: [f64; 3]) -> Phase {
        let total: f64 = grate.iter().sum();
        let share = if total > 0.0 { grate[2] / total } else { 0.0 };
        if t_furn < self.drying_below {
            Phase::Drying
        } else if t_furn < self.pyrolysis_below {
            Phase::Pyrolysis
        } else if t_furn >= self.burnout_from || share >= self.burnout_share {
            Phase::Burnout
        } else {
            Phase::Combustion
        }
    }
}

/// One phase per row. Recorded labels are kept; missing ones come from the
/// rules applied to furnace temperature and grate speeds.
pub fn label_phases(series: &FrameSeries, schema: &RawSchema, rules: &PhaseRules) -> Vec<Phase> {
    let t = schema.column_index("T_furn_avg").unwrap_or(col::T_AVG);
    let g = [
        schema.column_index("grate_speed_dry").unwrap_or(col::GRATE_DRY),
        schema.column_index("grate_speed_burn").unwrap_or(col::GRATE_BURN),
        schema.column_index("grate_speed_burnout").unwrap_or(col::GRATE_OUT),
    ];
    (0..series.len())
        .map(|i| {
            series.phases[i].unwrap_or_else(|| {
                let f = series.features.row(i);
                rules.label(f[t], g.map(|c| f[c]))
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::{lambda_in, lambda_stack, mass_residual, energy_residual, PhysicsBinding};

    fn quiet(id: &str) -> PlantConfig {
        let mut c = PlantConfig::with_regimes(id, 3);
        c.noise.scale = 0.0;
        c
    }

    #[test]
    fn zero_noise_rows_satisfy_all_balances() {
        let c = quiet("p");
        let p = gen_plant(&c, MIN_HOURS, 5).unwrap();
        let b = PhysicsBinding::default().resolve(&RawSchema::mswi()).unwrap();
        let vars = b.vars_batch(&p.series.features, &p.series.targets);
        let s = &c.scalars;
        for v in &vars {
            assert!((lambda_in(v, s) - lambda_stack(v)).abs() <= 1e-9);
            assert!((mass_residual(v, s) / (s.c_poll * v.q_s)).abs() <= 1e-9);
            assert!((energy_residual(v, s) / (s.alpha_s * v.q_s)).abs() <= 1e-9);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let c = PlantConfig::with_regimes("p", 3);
        let a = gen_plant(&c, MIN_HOURS, 11).unwrap();
        let b = gen_plant(&c, MIN_HOURS, 11).unwrap();
        assert_eq!(a.series, b.series);
        let d = gen_plant(&c, MIN_HOURS, 12).unwrap();
        assert_ne!(a.series.features, d.series.features);
    }

    #[test]
    fn synthetic_labels_follow_hidden_chain() {
        let c = PlantConfig::with_regimes("p", 4);
        let p = gen_plant(&c, MIN_HOURS, 3).unwrap();
        let labels = label_phases(&p.series, &RawSchema::mswi(), &PhaseRules::default());
        for (l, r) in labels.iter().zip(&p.regimes) {
            assert_eq!(l.index(), *r);
        }
    }

    #[test]
    fn rule_labeler_on_heating_ramp() {
        let rules = PhaseRules::default();
        let labels: Vec<Phase> = (0..10)
            .map(|i| {
                let t = 300.0 + 100.0 * i as f64;
                let share = 0.1 + 0.05 * i as f64;
                rules.label(t, [1.0 - share, 0.0, share])
            })
            .collect();
        // Hand application: <400 drying, <700 pyrolysis, >=1000 burnout.
        let expect = [0, 1, 1, 1, 2, 2, 2, 3, 3, 3];
        for (l, e) in labels.iter().zip(expect) {
            assert_eq!(l.index(), e);
        }
        assert!(labels.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cold_series_is_drying() {
        let rules = PhaseRules::default();
        assert!((0..5).all(|_| rules.label(25.0, [10.0, 10.0, 10.0]) == Phase::Drying));
    }

    #[test]
    fn shift_rejects_nonpositive_multiplier() {
        let c = PlantConfig::with_regimes("p", 3);
        let mut s = ShiftSpec::identity();
        s.target_multipliers[1] = -0.2;
        assert!(matches!(shift_plant(&c, &s, "t"), Err(SynthError::InfeasibleShift(_))));
        let mut s = ShiftSpec::identity();
        s.covariates.insert("excess_air".into(), 0.5);
        assert!(matches!(shift_plant(&c, &s, "t"), Err(SynthError::InfeasibleShift(_))));
    }

    #[test]
    fn transition_matrix_is_row_stochastic() {
        let c = PlantConfig::with_regimes("p", 4);
        for row in c.transition_matrix() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let pi = stationary_distribution(&c.transition_matrix());
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn config_json_round_trip() {
        let c = PlantConfig::with_regimes("p", 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plant.json");
        c.save(&path).unwrap();
        assert_eq!(PlantConfig::load(&path).unwrap(), c);
    }

    #[test]
    fn secondary_air_lowers_co_in_every_default_regime() {
        let c = quiet("p");
        for r in 0..3 {
            let reg = &c.regimes[r];
            let air = reg.excess_air * c.scalars.k_af * reg.steam_flow;
            let probe = SecondaryAirProbe {
                q_s: reg.steam_flow,
                q1: reg.primary_share * air,
                q2: (1.0 - reg.primary_share) * air,
                t1: reg.t_primary_air,
                t2: reg.t_secondary_air,
                t_rt: 200.0,
                t_bh: 150.0,
                lagged: [0.0; 4],
            };
            assert!(secondary_air_response(&c, r, crate::dataio::CO, &probe) < 0.0);
        }
    }
}
