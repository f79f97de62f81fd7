//! Regression metrics, the synergistic risk index, expert utilization and
//! correlation clustering of raw process variables.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::dataio::{N_TARGETS, TARGET_NAMES};
use crate::model::{GateTrace, N_EXPERTS};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EvalError {
    #[error("series lengths differ ({0} vs {1})")]
    Length(usize, usize),
    #[error("need at least {need} rows, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("no traces")]
    Empty,
    #[error("invalid CPSI config: {0}")]
    Cpsi(String),
    #[error("fewer than two variables with nonzero variance")]
    TooFewVariables,
}

/// Error metrics of one series. `r2` is `None` when the truth is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesMetrics {
    pub name: String,
    pub r2: Option<f64>,
    pub mae: f64,
    pub rmse: f64,
}

pub fn metrics(name: &str, y: ArrayView1<f64>, y_hat: ArrayView1<f64>) -> Result<SeriesMetrics, EvalError> {
    if y.len() != y_hat.len() {
        return Err(EvalError::Length(y.len(), y_hat.len()));
    }
    if y.len() < 2 {
        return Err(EvalError::TooShort { need: 2, got: y.len() });
    }
    let n = y.len() as f64;
    let mean = y.sum() / n;
    let (mut sse, mut sst, mut sae) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(y_hat.iter()) {
        let e = a - b;
        sse += e * e;
        sae += e.abs();
        sst += (a - mean) * (a - mean);
    }
    Ok(SeriesMetrics {
        name: name.to_string(),
        r2: (sst > 0.0).then(|| 1.0 - sse / sst),
        mae: sae / n,
        rmse: (sse / n).sqrt(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pollutants: Vec<SeriesMetrics>,
    /// Mean over pollutants with defined R².
    pub avg_r2: f64,
    pub avg_mae: f64,
    pub avg_rmse: f64,
    pub cpsi: SeriesMetrics,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<&SeriesMetrics> {
        self.pollutants.iter().find(|p| p.name == name)
    }
}

/// Scores raw-unit predictions (`rows x 6`) per pollutant and on CPSI.
pub fn metric_report(y: &Array2<f64>, y_hat: &Array2<f64>, cpsi_cfg: &CpsiConfig) -> Result<MetricReport, EvalError> {
    if y.dim() != y_hat.dim() {
        return Err(EvalError::Length(y.nrows(), y_hat.nrows()));
    }
    let pollutants = (0..N_TARGETS)
        .map(|k| metrics(TARGET_NAMES[k], y.column(k), y_hat.column(k)))
        .collect::<Result<Vec<_>, _>>()?;
    let r2: Vec<f64> = pollutants.iter().filter_map(|p| p.r2).collect();
    let avg = |f: &dyn Fn(&SeriesMetrics) -> f64| pollutants.iter().map(f).sum::<f64>() / N_TARGETS as f64;
    let c_true = cpsi_rows(y, cpsi_cfg);
    let c_pred = cpsi_rows(y_hat, cpsi_cfg);
    Ok(MetricReport {
        avg_r2: if r2.is_empty() { f64::NAN } else { r2.iter().sum::<f64>() / r2.len() as f64 },
        avg_mae: avg(&|p| p.mae),
        avg_rmse: avg(&|p| p.rmse),
        cpsi: metrics("CPSI", c_true.view(), c_pred.view())?,
        pollutants,
    })
}

/// Limit-normalized weighted sum `scale * sum_k w_k c_k / L_k`.
///
/// The default limits are daily-average style reference values in the units
/// of the targets (mg/Nm³, CO2 in vol-%). They are a configurable stand-in,
/// not a regulatory table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpsiConfig {
    pub weights: [f64; N_TARGETS],
    pub limits: [f64; N_TARGETS],
    pub scale: f64,
}

impl Default for CpsiConfig {
    fn default() -> Self {
        Self {
            weights: [1.0 / N_TARGETS as f64; N_TARGETS],
            limits: [10.0, 50.0, 200.0, 10.0, 50.0, 15.0],
            scale: 10.0,
        }
    }
}

impl CpsiConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.weights.iter().any(|w| !(*w >= 0.0)) || self.weights.iter().sum::<f64>() <= 0.0 {
            return Err(EvalError::Cpsi("weights must be nonnegative with a positive sum".into()));
        }
        if self.limits.iter().any(|l| !(*l > 0.0)) {
            return Err(EvalError::Cpsi("limits must be positive".into()));
        }
        if !(self.scale > 0.0) {
            return Err(EvalError::Cpsi("scale must be positive".into()));
        }
        Ok(())
    }
}

/// CPSI of one concentration vector. Negative inputs count as zero.
pub fn cpsi(c: &[f64], cfg: &CpsiConfig) -> f64 {
    cfg.scale
        * c.iter()
            .zip(cfg.weights.iter().zip(&cfg.limits))
            .map(|(c, (w, l))| w * c.max(0.0) / l)
            .sum::<f64>()
}

pub fn cpsi_rows(c: &Array2<f64>, cfg: &CpsiConfig) -> ndarray::Array1<f64> {
    c.rows().into_iter().map(|r| cpsi(&r.to_vec(), cfg)).collect()
}

/// Expert utilization: mean renormalized gate weight per expert, in percent.
pub fn eur(traces: &[GateTrace]) -> Result<[f64; N_EXPERTS], EvalError> {
    if traces.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = [0.0; N_EXPERTS];
    for t in traces {
        for (o, w) in out.iter_mut().zip(t.weights) {
            *o += w;
        }
    }
    Ok(out.map(|v| 100.0 * v / traces.len() as f64))
}

/// Share of samples in which each expert is in the kept top-K, in percent.
pub fn eur_frequency(traces: &[GateTrace]) -> Result<[f64; N_EXPERTS], EvalError> {
    if traces.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut out = [0.0; N_EXPERTS];
    for t in traces {
        for &i in &t.active {
            out[i] += 1.0;
        }
    }
    Ok(out.map(|v| 100.0 * v / traces.len() as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub members: Vec<String>,
    /// Mean pairwise correlation inside the cluster (1 for singletons).
    pub mean_corr: f64,
    /// Mean correlation between members and all variables outside.
    pub mean_corr_outside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeClusters {
    pub k: usize,
    pub silhouette: f64,
    /// Silhouette for every evaluated cut, as `(k, score)`.
    pub scores: Vec<(usize, f64)>,
    /// Clusters ordered by their lexicographically smallest member.
    pub clusters: Vec<Cluster>,
    /// Zero-variance variables left out of the analysis.
    pub excluded: Vec<String>,
}

impl RegimeClusters {
    pub fn cluster_of(&self, name: &str) -> Option<usize> {
        self.clusters.iter().position(|c| c.members.iter().any(|m| m == name))
    }
}

/// Pearson correlation of the columns of `x` (`rows x n`); columns are
/// assumed to have nonzero variance.
pub fn correlation(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows() as f64;
    let mut z = x.clone();
    for mut col in z.columns_mut() {
        let m = col.sum() / n;
        let sd = (col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        col.mapv_inplace(|v| (v - m) / sd);
    }
    let mut r = z.t().dot(&z) / n;
    for i in 0..r.nrows() {
        r[[i, i]] = 1.0;
    }
    r.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    r
}

/// Average-linkage merge sequence on a distance matrix. Returns the
/// partition (cluster label per item) for every cluster count in `ks`.
fn average_linkage(d: &Array2<f64>, ks: &[usize]) -> Vec<(usize, Vec<usize>)> {
    let n = d.nrows();
    let mut clusters: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    let snapshot = |clusters: &[Vec<usize>]| {
        let mut labels = vec![0; n];
        for (c, members) in clusters.iter().enumerate() {
            for &m in members {
                labels[m] = c;
            }
        }
        labels
    };
    while clusters.len() > 1 {
        if ks.contains(&clusters.len()) {
            out.push((clusters.len(), snapshot(&clusters)));
        }
        let mut best = (f64::INFINITY, 0, 0);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut s = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        s += d[[i, j]];
                    }
                }
                let avg = s / (clusters[a].len() * clusters[b].len()) as f64;
                if avg < best.0 - 1e-12 {
                    best = (avg, a, b);
                }
            }
        }
        let (_, a, b) = best;
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
    }
    out
}

/// Mean silhouette with precomputed distances. Singletons score 0, as does
/// a point whose intra and nearest-cluster distances are both 0.
pub fn silhouette(d: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = labels.len();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        let mut counts = vec![0usize; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += d[[i, j]];
                counts[labels[j]] += 1;
            }
        }
        let own = labels[i];
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 && b.is_finite() {
            total += (b - a) / m;
        }
    }
    total / n as f64
}

/// Agglomerative clustering of raw variables on `1 - rho` with the cut
/// chosen by maximum silhouette over 2..=6 clusters (smallest k on ties).
pub fn cluster_features(raw: &Array2<f64>, names: &[String]) -> Result<RegimeClusters, EvalError> {
    if raw.nrows() < 100 {
        return Err(EvalError::TooShort {
            need: 100,
            got: raw.nrows(),
        });
    }
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    for (j, name) in names.iter().enumerate() {
        let col = raw.column(j);
        let m = col.mean().unwrap_or(0.0);
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>();
        if var > 1e-12 * (1.0 + m * m) * raw.nrows() as f64 && col.iter().all(|v| v.is_finite()) {
            keep.push(j);
        } else {
            excluded.push(name.clone());
        }
    }
    if keep.len() < 2 {
        return Err(EvalError::TooFewVariables);
    }
    keep.sort_by(|a, b| names[*a].cmp(&names[*b]));
    let sub = Array2::from_shape_fn((raw.nrows(), keep.len()), |(r, c)| raw[[r, keep[c]]]);
    let rho = correlation(&sub);
    let d = rho.mapv(|r| 1.0 - r);
    let ks: Vec<usize> = (2..=6).filter(|k| *k <= keep.len()).collect();
    let parts = average_linkage(&d, &ks);
    let mut scores = Vec::new();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for (k, labels) in parts.into_iter().rev() {
        let s = silhouette(&d, &labels);
        scores.push((k, s));
        if best.as_ref().is_none_or(|b| s > b.1 + 1e-12) {
            best = Some((k, s, labels));
        }
    }
    let (k, sil, labels) = best.expect("at least one cut");
    let mut clusters: Vec<Cluster> = (0..k)
        .map(|c| {
            let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let outside: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != c).collect();
            let mut inside_sum = 0.0;
            let mut pairs = 0;
            for (a, &i) in idx.iter().enumerate() {
                for &j in &idx[a + 1..] {
                    inside_sum += rho[[i, j]];
                    pairs += 1;
                }
            }
            let mut out_sum = 0.0;
            for &i in &idx {
                for &j in &outside {
                    out_sum += rho[[i, j]];
                }
            }
            let cross = idx.len() * outside.len();
            Cluster {
                members: idx.iter().map(|&i| names[keep[i]].clone()).collect(),
                mean_corr: if pairs == 0 { 1.0 } else { inside_sum / pairs as f64 },
                mean_corr_outside: if cross == 0 { 0.0 } else { out_sum / cross as f64 },
            }
        })
        .collect();
    clusters.sort_by(|a, b| a.members[0].cmp(&b.members[0]));
    Ok(RegimeClusters {
        k,
        silhouette: sil,
        scores,
        clusters,
        excluded,
    })
}
