//! Source-domain training and physics-regularized cross-plant transfer.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Real, Var};
use crate::dataio::{PreparedDataset, WindowSet, N_TARGETS, TARGET_NAMES};
use crate::eval::{eur, metric_report, CpsiConfig, EvalError, MetricReport};
use crate::model::{task_loss, Checkpoint, GateTrace, ModelError, N_EXPERTS};
use crate::nn::Ctx;
use crate::optim::{clip_grad_norm, AdamW};
use crate::physics::{
    c_tot_from_standardized, fit_scalars, physics_report, BoundColumns, PhysicsBatch, PhysicsError, PhysicsNorm,
    PhysicsReport, PhysicsVars, Scalars,
};
use crate::shift::{domain_shift, ShiftReport};

pub use crate::shift::{delta_pct, PollutantShift, ShiftCategory};

/// RBF bandwidths of the multi-scale discrepancy.
pub const MMD_SIGMAS: [f64; 3] = [0.1, 1.0, 10.0];

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}; parameters restored to the last finite state")]
    Diverged { epoch: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset was prepared with a different transform spec than the model")]
    SpecMismatch,
    #[error("no {0} windows")]
    Empty(&'static str),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("history csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    /// Weight of the discrepancy term during transfer.
    pub gamma: f64,
    /// Weight of the physics penalty.
    pub delta: f64,
    pub physics: crate::physics::PhysicsConfig,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub seed: u64,
    /// Cap on training windows per epoch (seeded subsample).
    pub max_train_windows: Option<usize>,
    pub eval_batch: usize,
    /// Fraction of source training windows retained for transfer batches.
    pub source_fraction: f64,
    /// Fraction of target training windows available for adaptation.
    pub target_fraction: f64,
    /// Adds the source-domain task loss during transfer.
    pub source_supervised: bool,
    pub probe_size: usize,
    /// Full-batch steps used to pre-fit the physics scalars before training.
    pub physics_prefit_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::source()
    }
}

impl TrainConfig {
    pub fn source() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 2e-4,
            batch_size: 32,
            max_epochs: 400,
            patience: 50,
            warmup_epochs: 10,
            gamma: 0.1,
            delta: 0.01,
            physics: Default::default(),
            clip_norm: 5.0,
            seed: 123,
            max_train_windows: None,
            eval_batch: 256,
            source_fraction: 0.1,
            target_fraction: 1.0,
            source_supervised: false,
            probe_size: 128,
            physics_prefit_steps: 1500,
        }
    }

    pub fn transfer() -> Self {
        Self {
            lr: 6e-5,
            weight_decay: 1e-4,
            max_epochs: 550,
            patience: 70,
            warmup_epochs: 0,
            ..Self::source()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return bad("lr must be finite and nonnegative");
        }
        if self.batch_size == 0 || self.eval_batch == 0 || self.max_epochs == 0 {
            return bad("batch sizes and max_epochs must be positive");
        }
        if self.patience >= self.max_epochs {
            return bad("patience must be below max_epochs");
        }
        for (name, f) in [("source_fraction", self.source_fraction), ("target_fraction", self.target_fraction)] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(TrainError::Config(format!("{name} must be in (0, 1]")));
            }
        }
        if self.gamma < 0.0 || self.delta < 0.0 || self.weight_decay < 0.0 {
            return bad("loss weights and weight decay must be nonnegative");
        }
        Ok(())
    }

    /// Learning rate of `epoch` (0-based) with linear warm-up.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.warmup_epochs {
            self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64
        } else {
            self.lr
        }
    }
}

/// Biased multi-scale RBF discrepancy between the rows of `zs` and `zt`.
pub fn mmd<F: Real>(g: &mut Graph<F>, zs: Var, zt: Var, sigmas: &[f64]) -> Var {
    let dss = sq_dists(g, zs, zs);
    let dtt = sq_dists(g, zt, zt);
    let dst = sq_dists(g, zs, zt);
    let mut total: Option<Var> = None;
    for &s in sigmas {
        let c = F::lit(-1.0 / (2.0 * s * s));
        let mut k = |d: Var| {
            let e = g.scale(d, c);
            let e = g.exp(e);
            g.mean_all(e)
        };
        let kss = k(dss);
        let ktt = k(dtt);
        let kst = k(dst);
        let kst2 = g.scale(kst, F::lit(2.0));
        let sum = g.add(kss, ktt);
        let term = g.sub(sum, kst2);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    let total = total.expect("at least one bandwidth");
    g.scale(total, F::lit(1.0 / sigmas.len() as f64))
}

fn sq_dists<F: Real>(g: &mut Graph<F>, a: Var, b: Var) -> Var {
    let bt = g.transpose(b);
    let ab = g.matmul(a, bt);
    let a2 = g.square(a);
    let a2 = g.sum_cols(a2);
    let b2 = g.square(b);
    let b2 = g.sum_cols(b2);
    let b2 = g.transpose(b2);
    let s = g.add(a2, b2);
    let ab2 = g.scale(ab, F::lit(2.0));
    g.sub(s, ab2)
}

/// Discrepancy of two fixed sample sets, computed directly.
pub fn mmd_value(zs: &Array2<f64>, zt: &Array2<f64>, sigmas: &[f64]) -> f64 {
    let mean_k = |a: &Array2<f64>, b: &Array2<f64>, s: f64| {
        let mut sum = 0.0;
        for ra in a.rows() {
            for rb in b.rows() {
                let d: f64 = ra.iter().zip(rb.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
                sum += (-d / (2.0 * s * s)).exp();
            }
        }
        sum / (a.nrows() * b.nrows()) as f64
    };
    sigmas
        .iter()
        .map(|&s| mean_k(zs, zs, s) + mean_k(zt, zt, s) - 2.0 * mean_k(zs, zt, s))
        .sum::<f64>()
        / sigmas.len() as f64
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub task: f64,
    pub physics: f64,
    pub mmd: f64,
    pub masked_fraction: f64,
    pub val_avg_r2: f64,
    pub val_r2: [f64; N_TARGETS],
    pub eur: [f64; N_EXPERTS],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = [
            "epoch",
            "lr",
            "loss",
            "task",
            "physics",
            "mmd",
            "masked_fraction",
            "val_avg_r2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(TARGET_NAMES.iter().map(|n| format!("val_r2_{n}")));
        header.extend(crate::model::ExpertKind::ALL.iter().map(|k| format!("eur_{}", k.name())));
        w.write_record(&header)?;
        for r in &self.epochs {
            let mut row = vec![
                r.epoch.to_string(),
                r.lr.to_string(),
                r.loss.to_string(),
                r.task.to_string(),
                r.physics.to_string(),
                r.mmd.to_string(),
                r.masked_fraction.to_string(),
                r.val_avg_r2.to_string(),
            ];
            row.extend(r.val_r2.iter().map(|v| v.to_string()));
            row.extend(r.eur.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_avg_r2: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

/// Predictions and scores of a model on a set of windows.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    /// `rows x 6` predictions in original units.
    pub predictions: Array2<f64>,
    pub truth: Array2<f64>,
    pub traces: Vec<GateTrace>,
    pub eur: [f64; N_EXPERTS],
    pub physics: PhysicsReport,
}

fn bound_columns(ck: &Checkpoint) -> Result<BoundColumns, TrainError> {
    let names: Vec<String> = ck.spec.raw.iter().map(|r| r.name.clone()).collect();
    Ok(ck.physics_config.binding.resolve_names(&names)?)
}

fn check_spec(ck: &Checkpoint, data: &PreparedDataset) -> Result<(), TrainError> {
    if ck.spec != data.spec {
        return Err(TrainError::SpecMismatch);
    }
    Ok(())
}

/// Runs the model over `ends` in evaluation mode.
pub fn evaluate(
    ck: &Checkpoint,
    data: &PreparedDataset,
    ends: &[usize],
    cpsi: &CpsiConfig,
    batch: usize,
) -> Result<Evaluation, TrainError> {
    if ends.is_empty() {
        return Err(TrainError::Empty("evaluation"));
    }
    let bound = bound_columns(ck)?;
    let mut predictions = Array2::zeros((ends.len(), N_TARGETS));
    let mut truth = Array2::zeros((ends.len(), N_TARGETS));
    let mut raw_last = Array2::zeros((ends.len(), data.raw.ncols()));
    let mut traces = Vec::with_capacity(ends.len());
    for (c, chunk) in ends.chunks(batch.max(1)).enumerate() {
        let ws = data.gather(chunk);
        let (y, tr) = ck.model.predict(&ck.store, &ws.x)?;
        let y = ck.spec.restore_targets(&y.mapv(|v| v as f64));
        let off = c * batch.max(1);
        predictions.slice_mut(ndarray::s![off..off + chunk.len(), ..]).assign(&y);
        truth.slice_mut(ndarray::s![off..off + chunk.len(), ..]).assign(&ws.y_raw);
        raw_last.slice_mut(ndarray::s![off..off + chunk.len(), ..]).assign(&ws.raw_last);
        traces.extend(tr);
    }
    let physics = match &ck.physics_norm {
        Some(norm) => {
            let conc = if ck.physics_config.use_predictions { &predictions } else { &truth };
            let vars = bound.vars_batch(&raw_last, conc);
            physics_report(&vars, &ck.scalars(), norm, &ck.physics_config.weights)
        }
        None => PhysicsReport::default(),
    };
    Ok(Evaluation {
        report: metric_report(&truth, &predictions, cpsi)?,
        eur: eur(&traces)?,
        predictions,
        truth,
        traces,
        physics,
    })
}

fn measured_vars(bound: &BoundColumns, data: &PreparedDataset, rows: &[usize]) -> Vec<PhysicsVars> {
    rows.iter()
        .map(|&r| bound.vars(data.raw.row(r), bound.c_tot(data.targets.row(r))))
        .collect()
}

/// Fits the physics scales on `rows` and, when `prefit` is set, fits the
/// non-anchor scalars to the measured balances.
fn calibrate_physics(
    ck: &mut Checkpoint,
    data: &PreparedDataset,
    rows: &[usize],
    cfg: &TrainConfig,
    prefit: bool,
) -> Result<PhysicsNorm, TrainError> {
    let bound = bound_columns(ck)?;
    let step = (rows.len() / 4000).max(1);
    let sample: Vec<usize> = rows.iter().step_by(step).copied().collect();
    let vars = measured_vars(&bound, data, &sample);
    let current = ck.scalars();
    let norm = PhysicsNorm::fit(&vars, &current);
    if prefit && cfg.physics_prefit_steps > 0 {
        let init = Scalars::warm_start(&vars, &norm, &current);
        let fitted = fit_scalars(&vars, &norm, &ck.physics_config.weights, &init, cfg.physics_prefit_steps, 0.05);
        if fitted.is_positive() {
            ck.physics.set(&mut ck.store, &fitted);
        }
    }
    ck.physics_norm = Some(norm);
    Ok(norm)
}

struct StepLosses {
    total: Var,
    task: f64,
    physics: f64,
    masked: usize,
    rows: usize,
}

/// Task loss plus weighted physics penalty for one batch.
fn supervised_loss(
    g: &mut Graph<f32>,
    ck: &Checkpoint,
    ctx: &mut Ctx,
    ws: &WindowSet,
    bound: &BoundColumns,
    norm: &PhysicsNorm,
    delta: f64,
) -> Result<(StepLosses, Var), TrainError> {
    let x = g.constant(ws.x.clone());
    let out = ck.model.forward(g, &ck.store, ctx, x)?;
    let labels: Vec<Option<usize>> = ws.phases.iter().map(|p| p.map(|p| p.index())).collect();
    let task = task_loss(g, out.y, &ws.y, out.phase_logp, &labels);
    let task_v = g.scalar(task) as f64;
    let (total, physics_v, masked) = if delta > 0.0 {
        let vars = bound.vars_batch(&ws.raw_last, &ws.y_raw);
        let pb = PhysicsBatch::<f32>::new(&vars, norm);
        let c_tot = if ck.physics_config.use_predictions {
            c_tot_from_standardized(g, out.y, &ck.spec.targets, &bound.weights)
        } else {
            let m = Array2::from_shape_fn((vars.len(), 1), |(i, _)| vars[i].c_poll_tot as f32);
            g.constant(m)
        };
        let phy = pb.loss(g, &ck.store, &ck.physics, c_tot, &ck.physics_config.weights);
        let pv = g.scalar(phy) as f64;
        let w = g.scale(phy, delta as f32);
        (g.add(task, w), pv, pb.masked)
    } else {
        (task, 0.0, 0)
    };
    Ok((
        StepLosses {
            total,
            task: task_v,
            physics: physics_v,
            masked,
            rows: ws.len(),
        },
        out.z_share,
    ))
}

fn subsample(ends: &[usize], fraction: f64, cap: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = ends.to_vec();
    let n = ((ends.len() as f64 * fraction).round() as usize).clamp(1.min(ends.len()), ends.len());
    let n = cap.map_or(n, |c| n.min(c));
    if n < v.len() {
        v.shuffle(rng);
        v.truncate(n);
        v.sort_unstable();
    }
    v
}

fn decays(name: &str) -> bool {
    name.ends_with(".weight")
}

fn val_record(e: &Evaluation) -> ([f64; N_TARGETS], [f64; N_EXPERTS]) {
    let r2 = std::array::from_fn(|k| e.report.pollutants[k].r2.unwrap_or(f64::NAN));
    (r2, e.eur)
}

/// Trains on the dataset's training split and selects the epoch with the
/// best validation average R².
pub fn train_source(ck: &mut Checkpoint, data: &PreparedDataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let train = subsample(&data.split.train, 1.0, cfg.max_train_windows, &mut rng);
    train_on(ck, data, &train, &data.split.val.clone(), cfg)
}

/// Training loop over explicit window lists.
pub fn train_on(
    ck: &mut Checkpoint,
    data: &PreparedDataset,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    check_spec(ck, data)?;
    if train.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let bound = bound_columns(ck)?;
    let norm = calibrate_physics(ck, data, train, cfg, true)?;
    let cpsi = CpsiConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut opt = AdamW::new(&ck.store, cfg.weight_decay, decays);
    let mut order = train.to_vec();
    let mut history = History::default();
    let mut best = (f64::NEG_INFINITY, 0usize, ck.store.clone());
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let last_finite = ck.store.clone();
        let (mut loss_sum, mut task_sum, mut phy_sum) = (0.0, 0.0, 0.0);
        let (mut masked, mut rows, mut batches) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let ws = data.gather(chunk);
            let mut g = Graph::<f32>::new();
            let mut ctx = Ctx::train(ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng)));
            let (l, _) = supervised_loss(&mut g, ck, &mut ctx, &ws, &bound, &norm, cfg.delta)?;
            let total = g.scalar(l.total) as f64;
            if !total.is_finite() {
                ck.store = last_finite;
                return Err(TrainError::Diverged { epoch });
            }
            let mut grads = g.backward(l.total, ck.store.len());
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            opt.step(&mut ck.store, &grads, lr);
            loss_sum += total;
            task_sum += l.task;
            phy_sum += l.physics;
            masked += l.masked;
            rows += l.rows;
            batches += 1;
        }
        let ev = evaluate(ck, data, val, &cpsi, cfg.eval_batch)?;
        let (val_r2, eur) = val_record(&ev);
        let nb = batches.max(1) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / nb,
            task: task_sum / nb,
            physics: phy_sum / nb,
            mmd: 0.0,
            masked_fraction: masked as f64 / rows.max(1) as f64,
            val_avg_r2: ev.report.avg_r2,
            val_r2,
            eur,
        });
        log::info!(
            "epoch {epoch} lr {lr:.2e} loss {:.4} val R2 {:.4}",
            loss_sum / nb,
            ev.report.avg_r2
        );
        if ev.report.avg_r2 > best.0 {
            best = (ev.report.avg_r2, epoch, ck.store.clone());
        } else if epoch - best.1 >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    let epochs_run = history.epochs.len();
    ck.store = best.2;
    ck.metrics.insert("val_avg_r2".into(), best.0);
    ck.metrics.insert("best_epoch".into(), best.1 as f64);
    Ok(TrainReport {
        history,
        best_epoch: best.1,
        best_val_avg_r2: best.0,
        epochs_run,
        stopped_early,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub shift: ShiftReport,
    pub zero_shot: MetricReport,
    pub final_metrics: MetricReport,
    pub probe_mmd_before: f64,
    pub probe_mmd_after: f64,
    pub history: History,
    pub best_epoch: usize,
    pub epochs_run: usize,
    /// Target training windows used for adaptation.
    pub target_windows: usize,
}

/// Shared representation of `ends` in evaluation mode.
pub fn representations(ck: &Checkpoint, data: &PreparedDataset, ends: &[usize]) -> Result<Array2<f64>, TrainError> {
    let ws = data.gather(ends);
    let mut g = Graph::<f32>::new();
    let x = g.constant(ws.x);
    let out = ck.model.forward(&mut g, &ck.store, &mut Ctx::eval(), x)?;
    Ok(g.value(out.z_share).mapv(|v| v as f64))
}

fn spread(ends: &[usize], n: usize) -> Vec<usize> {
    if ends.len() <= n {
        return ends.to_vec();
    }
    (0..n).map(|i| ends[i * ends.len() / n]).collect()
}

/// Adapts a source-trained model to a target plant. Both datasets must be
/// prepared with the model's transform spec.
pub fn finetune_transfer(
    ck: &mut Checkpoint,
    source: &PreparedDataset,
    target: &PreparedDataset,
    cfg: &TrainConfig,
) -> Result<TransferReport, TrainError> {
    cfg.validate()?;
    check_spec(ck, source)?;
    check_spec(ck, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_616e);
    let src = subsample(&source.split.train, cfg.source_fraction, None, &mut rng);
    let tgt = subsample(&target.split.train, cfg.target_fraction, cfg.max_train_windows, &mut rng);
    let val = target.split.val.clone();
    if src.is_empty() || tgt.is_empty() {
        return Err(TrainError::Empty("training"));
    }
    if val.is_empty() {
        return Err(TrainError::Empty("validation"));
    }
    let shift = domain_shift(
        &source.targets.select(ndarray::Axis(0), &src),
        &target.targets.select(ndarray::Axis(0), &tgt),
    );
    let probe_s = spread(&source.split.val, cfg.probe_size);
    let probe_t = spread(&val, cfg.probe_size);
    let probe = |ck: &Checkpoint| -> Result<f64, TrainError> {
        Ok(mmd_value(
            &representations(ck, source, &probe_s)?,
            &representations(ck, target, &probe_t)?,
            &MMD_SIGMAS,
        ))
    };
    let bound = bound_columns(ck)?;
    let norm = calibrate_physics(ck, target, &tgt, cfg, false)?;
    let cpsi = CpsiConfig::default();
    let zero = evaluate(ck, target, &val, &cpsi, cfg.eval_batch)?;
    let probe_mmd_before = probe(ck)?;

    let mut opt = AdamW::new(&ck.store, cfg.weight_decay, decays);
    let mut order = tgt.clone();
    let mut history = History::default();
    let mut best = (zero.report.avg_r2, 0usize, ck.store.clone());
    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let last_finite = ck.store.clone();
        let (mut loss_sum, mut task_sum, mut phy_sum, mut mmd_sum) = (0.0, 0.0, 0.0, 0.0);
        let (mut masked, mut rows, mut batches) = (0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let s_ends: Vec<usize> = (0..chunk.len())
                .map(|_| src[rand::Rng::random_range(&mut rng, 0..src.len())])
                .collect();
            let wt = target.gather(chunk);
            let wsrc = source.gather(&s_ends);
            let mut g = Graph::<f32>::new();
            let mut ctx = Ctx::train(ChaCha8Rng::seed_from_u64(rand::Rng::random(&mut rng)));
            let (lt, zt) = supervised_loss(&mut g, ck, &mut ctx, &wt, &bound, &norm, cfg.delta)?;
            let xs = g.constant(wsrc.x.clone());
            let out_s = ck.model.forward(&mut g, &ck.store, &mut ctx, xs)?;
            let mut total = lt.total;
            if cfg.source_supervised {
                let labels: Vec<Option<usize>> = wsrc.phases.iter().map(|p| p.map(|p| p.index())).collect();
                let ls = task_loss(&mut g, out_s.y, &wsrc.y, out_s.phase_logp, &labels);
                total = g.add(total, ls);
            }
            let m = mmd(&mut g, out_s.z_share, zt, &MMD_SIGMAS);
            let mv = g.scalar(m) as f64;
            if cfg.gamma > 0.0 {
                let wm = g.scale(m, cfg.gamma as f32);
                total = g.add(total, wm);
            }
            let tv = g.scalar(total) as f64;
            if !tv.is_finite() {
                ck.store = last_finite;
                return Err(TrainError::Diverged { epoch });
            }
            let mut grads = g.backward(total, ck.store.len());
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            opt.step(&mut ck.store, &grads, lr);
            loss_sum += tv;
            task_sum += lt.task;
            phy_sum += lt.physics;
            mmd_sum += mv;
            masked += lt.masked;
            rows += lt.rows;
            batches += 1;
        }
        let ev = evaluate(ck, target, &val, &cpsi, cfg.eval_batch)?;
        let (val_r2, eur) = val_record(&ev);
        let nb = batches.max(1) as f64;
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            loss: loss_sum / nb,
            task: task_sum / nb,
            physics: phy_sum / nb,
            mmd: mmd_sum / nb,
            masked_fraction: masked as f64 / rows.max(1) as f64,
            val_avg_r2: ev.report.avg_r2,
            val_r2,
            eur,
        });
        log::info!(
            "transfer epoch {epoch} loss {:.4} mmd {:.4} val R2 {:.4}",
            loss_sum / nb,
            mmd_sum / nb,
            ev.report.avg_r2
        );
        if ev.report.avg_r2 > best.0 {
            best = (ev.report.avg_r2, epoch + 1, ck.store.clone());
        } else if epoch + 1 - best.1 > cfg.patience {
            break;
        }
    }
    let epochs_run = history.epochs.len();
    ck.store = best.2;
    let fin = evaluate(ck, target, &val, &cpsi, cfg.eval_batch)?;
    let probe_mmd_after = probe(ck)?;
    ck.metrics.insert("val_avg_r2".into(), fin.report.avg_r2);
    ck.metrics.insert("zero_shot_avg_r2".into(), zero.report.avg_r2);
    Ok(TransferReport {
        shift,
        zero_shot: zero.report,
        final_metrics: fin.report,
        probe_mmd_before,
        probe_mmd_after,
        history,
        best_epoch: best.1,
        epochs_run,
        target_windows: tgt.len(),
    })
}

/// Store snapshot helper for callers that compare parameter states.
pub fn same_params(a: &ParamStore<f32>, b: &ParamStore<f32>) -> bool {
    a.len() == b.len() && a.ids().all(|id| a.get(id) == b.get(id))
}
