use std::collections::BTreeMap;
use std::sync::OnceLock;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use cpmoe::autograd::{Graph, ParamStore, Var};
use cpmoe::dataio::{
    feature_names, impute, prepare, prepare_with_spec, CleaningRules, PreparedDataset, RawSchema, SplitPlan,
    TargetScale, TransformSpec, CO, N_FEATURES, N_TARGETS, WINDOW,
};
use cpmoe::eval::{eur, metric_report, CpsiConfig};
use cpmoe::learn::{
    delta_pct, finetune_transfer, mmd, mmd_value, train_on, train_source, ShiftCategory, TrainConfig, TrainReport,
    TransferReport, MMD_SIGMAS,
};
use cpmoe::model::{task_loss, Checkpoint, Cpmoe, ExpertKind, ModelConfig};
use cpmoe::nn::Ctx;
use cpmoe::physics::{
    c_tot_from_standardized, fit_scalars, lambda_stack, PhysicsBatch, PhysicsBinding, PhysicsNorm, PhysicsParams,
    PhysicsVars, PhysicsWeights, Scalars,
};
use cpmoe::synth::{gen_plant, shift_plant, PlantConfig, ShiftSpec, LOAD_WEIGHTS};
use cpmoe::twin::{RawWindow, Twin, TwinConfig};
use cpmoe_validation::{filters_from_args, run_all, Check};

type Outcome = Result<String, String>;

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- units

fn equation_units() -> Outcome {
    let v = PhysicsVars {
        o2_dry: 10.5,
        ..PhysicsVars::default()
    };
    let lam = lambda_stack(&v);

    let d = delta_pct(100.0, 120.0);
    let cat = ShiftCategory::of(d);

    let hand = ((2.0 - 2.0 * (-50.0f64).exp()) + (2.0 - 2.0 * (-0.5f64).exp()) + (2.0 - 2.0 * (-0.005f64).exp())) / 3.0;
    let m = mmd_value(&ndarray::array![[0.0]], &ndarray::array![[1.0]], &MMD_SIGMAS);

    let mut g = Graph::<f64>::new();
    let y = Array2::from_shape_fn((3, N_TARGETS), |(i, j)| (i * 7 + j) as f64 * 0.1);
    let y_hat = g.constant(y.clone());
    let lp = g.constant(Array2::from_elem((3, 4), (0.25f64).ln()));
    let loss = task_loss(&mut g, y_hat, &y, Some(lp), &[Some(0), Some(3), Some(1)]);
    let ce = g.scalar(loss);

    let ok = lam == 2.0
        && (d - 20.0).abs() < 1e-12
        && cat == ShiftCategory::Medium
        && (m - hand).abs() < 1e-12
        && (m - 0.9323).abs() < 1e-4
        && (ce - 4f64.ln()).abs() < 1e-9;
    verdict(
        ok,
        format!("lambda_stack {lam}, delta {d:.6}% {cat:?}, mmd {m:.6}, uniform CE {ce:.12} (ln 4 = {:.12})", 4f64.ln()),
    )
}

// ------------------------------------------------------------ gradients

const T: usize = 4;
const F: usize = 6;
const D: usize = 8;
const B: usize = 3;

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize), scale: f64) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Largest per-tensor relative error between the analytic gradient and a
/// central difference over every trainable entry.
fn grad_check(store: &ParamStore<f64>, loss: &dyn Fn(&ParamStore<f64>, bool) -> (f64, Vec<Option<Array2<f64>>>)) -> (f64, String, usize) {
    let (_, analytic) = loss(store, true);
    let eps = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut work = store.clone();
    for id in store.ids() {
        if store.is_frozen(id) {
            continue;
        }
        let base = store.get(id).clone();
        let mut numeric = Array2::zeros(base.dim());
        for idx in ndarray::indices(base.dim()) {
            work.get_mut(id)[idx] = base[idx] + eps;
            let up = loss(&work, false).0;
            work.get_mut(id)[idx] = base[idx] - eps;
            let down = loss(&work, false).0;
            work.get_mut(id)[idx] = base[idx];
            numeric[idx] = (up - down) / (2.0 * eps);
            checked += 1;
        }
        let a = analytic[id.0].clone().unwrap_or_else(|| Array2::zeros(base.dim()));
        let diff = (&a - &numeric).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(numeric.mapv(|v| v * v).sum().sqrt());
        let rel = if scale < 1e-9 { diff } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, store.name(id).to_string());
        }
    }
    (worst.0, worst.1, checked)
}

fn grads_of(g: &Graph<f64>, loss: Var, store: &ParamStore<f64>) -> Vec<Option<Array2<f64>>> {
    let grads = g.backward(loss, store.len());
    store.ids().map(|id| grads.get(id).cloned()).collect()
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let config = ModelConfig::tiny(T, F, D);
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(config, &mut store, 5).map_err(|e| e.to_string())?;
    let x = normal(&mut rng, (B * T, F), 1.0);
    let xt = normal(&mut rng, (B * T, F), 1.3).mapv(|v| v + 0.4);
    let y = normal(&mut rng, (B, N_TARGETS), 1.0);
    let labels = [Some(1), None, Some(3)];

    let task = |st: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, st, &mut Ctx::eval(), xv).expect("forward");
        let l = task_loss(&mut g, out.y, &y, out.phase_logp, &labels);
        let v = g.scalar(l);
        (v, if want { grads_of(&g, l, st) } else { Vec::new() })
    };
    let (task_err, task_at, n_task) = grad_check(&store, &task);

    let vars: Vec<PhysicsVars> = (0..B)
        .map(|i| {
            let u = i as f64;
            PhysicsVars {
                q1: 52_000.0 + 3_000.0 * u,
                q2: 33_000.0 - 1_000.0 * u,
                q_s: 48.0 + 2.0 * u,
                o2_dry: 7.0 + 0.6 * u,
                q_fg: 98_000.0 + 2_500.0 * u,
                c_poll_tot: 0.0,
                t1: 185.0 + 4.0 * u,
                t2: 150.0 + 3.0 * u,
                v_fg: 9.5 + 0.4 * u,
                t_furn_avg: 940.0 + 15.0 * u,
                t_rt: 205.0 - 3.0 * u,
                t_bh_out: 148.0 + 2.0 * u,
            }
        })
        .collect();
    let anchors = PlantConfig::default_scalars();
    let norm = PhysicsNorm {
        delta_s: 0.0,
        delta_o: 0.0,
        ..PhysicsNorm::fit(
            &vars
                .iter()
                .map(|v| PhysicsVars {
                    c_poll_tot: 300.0,
                    ..*v
                })
                .collect::<Vec<_>>(),
            &anchors,
        )
    };
    let mut phy_store = store.clone();
    let init = Scalars {
        k_af: 1100.0,
        c_poll: 0.5,
        alpha_s: 55.0,
        alpha_1: 3.0e-4,
        alpha_2: 7.5e-4,
        beta_rt: 2.2,
        beta_bh: 1.8,
        ..anchors
    };
    let params = PhysicsParams::register(&mut phy_store, &init);
    let scales: Vec<TargetScale> = (0..N_TARGETS)
        .map(|k| TargetScale {
            name: format!("t{k}"),
            mean: 40.0 + 10.0 * k as f64,
            std: 5.0 + k as f64,
        })
        .collect();
    let batch = PhysicsBatch::<f64>::new(&vars, &norm);
    let weights = PhysicsWeights::default();
    let physics = |st: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, st, &mut Ctx::eval(), xv).expect("forward");
        let c = c_tot_from_standardized(&mut g, out.y, &scales, &LOAD_WEIGHTS);
        let l = batch.loss(&mut g, st, &params, c, &weights);
        let v = g.scalar(l);
        (v, if want { grads_of(&g, l, st) } else { Vec::new() })
    };
    let (phy_err, phy_at, n_phy) = grad_check(&phy_store, &physics);

    let disc = |st: &ParamStore<f64>, want: bool| {
        let mut g = Graph::new();
        let xs = g.constant(x.clone());
        let xv = g.constant(xt.clone());
        let a = model.forward(&mut g, st, &mut Ctx::eval(), xs).expect("forward");
        let b = model.forward(&mut g, st, &mut Ctx::eval(), xv).expect("forward");
        let l = mmd(&mut g, a.z_share, b.z_share, &MMD_SIGMAS);
        let v = g.scalar(l);
        (v, if want { grads_of(&g, l, st) } else { Vec::new() })
    };
    let (mmd_err, mmd_at, n_mmd) = grad_check(&store, &disc);

    let tol = 1e-4;
    verdict(
        task_err <= tol && phy_err <= tol && mmd_err <= tol,
        format!(
            "max rel err task {task_err:.2e} ({task_at}), physics {phy_err:.2e} ({phy_at}), mmd {mmd_err:.2e} ({mmd_at}); {} entries",
            n_task + n_phy + n_mmd
        ),
    )
}

// --------------------------------------------------------------- physics

fn physics_recovery() -> Outcome {
    let mut cfg = PlantConfig::with_regimes("quiet", 3);
    cfg.noise.scale = 0.0;
    let truth = cfg.scalars;
    let plant = gen_plant(&cfg, 2_000, 8).map_err(|e| e.to_string())?;
    let bound = PhysicsBinding::default().resolve(&RawSchema::mswi()).map_err(|e| e.to_string())?;
    // Ground-truth concentrations stand in for frozen predictions.
    let vars = bound.vars_batch(&plant.series.features, &plant.true_targets);
    let weights = PhysicsWeights::default();
    let ratio = |s: &Scalars| s.b_poll / s.c_poll;

    let mut report = Vec::new();
    let mut ok = true;
    // A second anchor at twice the true b_poll checks that the ratio, not
    // the scale, is what the data identifies.
    for b_anchor in [truth.b_poll, 2.0 * truth.b_poll] {
        let anchors = Scalars {
            b_poll: b_anchor,
            ..truth
        };
        let norm = PhysicsNorm::fit(&vars, &anchors);
        let init = Scalars::from_array(std::array::from_fn(|i| {
            let v = anchors.to_array()[i];
            if Scalars::ANCHORS.contains(&i) {
                v
            } else {
                v * [1.6, 1.0, 0.55, 1.4, 0.7, 1.3, 1.0, 0.75, 1.35][i]
            }
        }));
        let fit = fit_scalars(&vars, &norm, &weights, &init, 4_000, 0.02);
        let k_err = (fit.k_af / truth.k_af - 1.0).abs();
        let r_err = (ratio(&fit) / ratio(&truth) - 1.0).abs();
        ok &= k_err < 0.01 && r_err < 0.01;
        report.push(format!(
            "b anchor x{:.0}: k_AF {:.3} (err {:.2e}), b/c {:.4e} (err {:.2e})",
            b_anchor / truth.b_poll,
            fit.k_af,
            k_err,
            ratio(&fit),
            r_err
        ));
    }
    verdict(ok, report.join("; "))
}

// --------------------------------------------------------------- routing

fn routing_invariants() -> Outcome {
    let config = ModelConfig::desk();
    let mut store = ParamStore::<f32>::new();
    let model = Cpmoe::new(config.clone(), &mut store, 3).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut traces = Vec::new();
    let (mut bad_simplex, mut bad_k) = (0usize, 0usize);
    for _ in 0..20 {
        let n = 500;
        let mut x = Array2::<f32>::zeros((n * WINDOW, N_FEATURES));
        for w in 0..n {
            let scale = 10f64.powf(rng.random_range(-1.0..1.0));
            let shift = rng.random_range(-2.0..2.0);
            for v in x.slice_mut(s![w * WINDOW..(w + 1) * WINDOW, ..]).iter_mut() {
                *v = (shift + scale * rng.sample::<f64, _>(StandardNormal)) as f32;
            }
        }
        let (_, tr) = model.predict(&store, &x).map_err(|e| e.to_string())?;
        for t in &tr {
            let sum: f64 = t.weights.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || t.weights.iter().any(|w| *w < 0.0) {
                bad_simplex += 1;
            }
            let nz = t.weights.iter().filter(|w| **w != 0.0).count();
            if nz != config.top_k || t.active.len() != config.top_k {
                bad_k += 1;
            }
        }
        traces.extend(tr);
    }
    let e = eur(&traces).map_err(|e| e.to_string())?;
    let eur_sum: f64 = e.iter().sum();

    let mut leaks = 0usize;
    let mut checked = 0usize;
    for i in 0..50 {
        let x = Array2::from_shape_fn((WINDOW, N_FEATURES), |_| rng.sample::<f32, _>(StandardNormal));
        let y = Array2::from_shape_fn((1, N_TARGETS), |_| rng.sample::<f32, _>(StandardNormal));
        let mut g = Graph::<f32>::new();
        let mut ctx = Ctx::train(ChaCha8Rng::seed_from_u64(i));
        let xv = g.constant(x);
        let out = model.forward(&mut g, &store, &mut ctx, xv).map_err(|e| e.to_string())?;
        let l = task_loss(&mut g, out.y, &y, out.phase_logp, &[Some((i % 4) as usize)]);
        let grads = g.backward(l, store.len());
        let active = &out.traces[0].active;
        for (j, kind) in config.experts.iter().enumerate() {
            if active.contains(&kind.index()) {
                continue;
            }
            let prefix = model.expert_prefix(j);
            for id in store.ids().filter(|id| store.name(*id).starts_with(&prefix)) {
                checked += 1;
                if grads.get(id).is_some_and(|a| a.iter().any(|v| *v != 0.0)) {
                    leaks += 1;
                }
            }
        }
    }
    verdict(
        traces.len() == 10_000 && bad_simplex == 0 && bad_k == 0 && (eur_sum - 100.0).abs() <= 1e-6 && leaks == 0 && checked > 0,
        format!(
            "{} inputs: {bad_simplex} off-simplex, {bad_k} without exactly {} nonzeros; EUR {:?} sums to {eur_sum:.9}; {leaks} nonzero inactive-expert tensors of {checked}",
            traces.len(),
            config.top_k,
            e.map(|v| (v * 100.0).round() / 100.0)
        ),
    )
}

// -------------------------------------------------------- source domain

const SOURCE_HOURS: usize = 23_200;
const SOURCE_EPOCHS: usize = 12;

struct SourceRun {
    base: PlantConfig,
    data: PreparedDataset,
    ceiling_r2: f64,
    ck: Checkpoint,
    report: TrainReport,
}

fn source_config() -> TrainConfig {
    TrainConfig {
        max_epochs: SOURCE_EPOCHS,
        patience: SOURCE_EPOCHS - 1,
        ..TrainConfig::source()
    }
}

fn source_run() -> &'static SourceRun {
    static RUN: OnceLock<SourceRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let base = PlantConfig::with_regimes("source", 3);
        let plant = gen_plant(&base, SOURCE_HOURS, 1).expect("source plant");
        let data = prepare(plant.series, &RawSchema::mswi(), &CleaningRules::default(), &SplitPlan::default())
            .expect("prepare source");
        let val = &data.split.val;
        let measured = data.targets.select(Axis(0), val);
        let clean = plant.true_targets.select(Axis(0), val);
        let ceiling_r2 = metric_report(&measured, &clean, &CpsiConfig::default())
            .expect("ceiling")
            .avg_r2;
        let mut ck = Checkpoint::init(
            ModelConfig::desk(),
            1,
            data.spec.clone(),
            Default::default(),
            &PlantConfig::default_scalars(),
        )
        .expect("init");
        let report = train_source(&mut ck, &data, &source_config()).expect("train source");
        SourceRun {
            base,
            data,
            ceiling_r2,
            ck,
            report,
        }
    })
}

fn source_analogue() -> Outcome {
    let run = source_run();
    let windows = run.data.split.train.len() + run.data.split.val.len();
    let moe = run.report.best_val_avg_r2;
    let mut ok = windows >= 20_000 && moe >= 0.90;
    let mut parts = vec![format!(
        "{windows} windows, {SOURCE_EPOCHS} epochs each; CPMoE val avg R2 {moe:.4} (noise ceiling {:.4})",
        run.ceiling_r2
    )];
    for kind in ExpertKind::ALL {
        let mut ck = Checkpoint::init(
            ModelConfig::desk().single_expert(kind),
            1,
            run.data.spec.clone(),
            Default::default(),
            &PlantConfig::default_scalars(),
        )
        .map_err(|e| e.to_string())?;
        let r = train_source(&mut ck, &run.data, &source_config()).map_err(|e| e.to_string())?;
        let margin = moe - r.best_val_avg_r2;
        ok &= margin >= 0.02;
        parts.push(format!("{} {:.4} (margin {margin:+.4})", kind.name(), r.best_val_avg_r2));
    }
    verdict(ok, parts.join("; "))
}

// -------------------------------------------------------------- transfer

const TARGET_HOURS: usize = 23_200;
const TRANSFER_EPOCHS: usize = 20;
const SCRATCH_EPOCHS: usize = 20;

fn transfer_analogue() -> Outcome {
    let run = source_run();
    let spec = ShiftSpec::default();
    let cfg = shift_plant(&run.base, &spec, "target").map_err(|e| e.to_string())?;
    let plant = gen_plant(&cfg, TARGET_HOURS, 2).map_err(|e| e.to_string())?;
    let plan = SplitPlan {
        seed: 7,
        ..SplitPlan::default()
    };
    let target = prepare_with_spec(plant.series, &RawSchema::mswi(), &CleaningRules::default(), &run.data.spec, &plan)
        .map_err(|e| e.to_string())?;

    let mut ck = run.ck.clone();
    let tc = TrainConfig {
        max_epochs: TRANSFER_EPOCHS,
        patience: TRANSFER_EPOCHS - 1,
        target_fraction: 0.1,
        ..TrainConfig::transfer()
    };
    let r: TransferReport = finetune_transfer(&mut ck, &run.data, &target, &tc).map_err(|e| e.to_string())?;
    let co_cat = r.shift.get("CO").map(|p| p.category);

    let budget = r.target_windows;
    let mut scratch = Checkpoint::init(
        ModelConfig::desk(),
        3,
        target.spec.clone(),
        Default::default(),
        &PlantConfig::default_scalars(),
    )
    .map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut ends = target.split.train.clone();
    ends.shuffle(&mut rng);
    ends.truncate(budget);
    ends.sort_unstable();
    let sc = TrainConfig {
        max_epochs: SCRATCH_EPOCHS,
        patience: SCRATCH_EPOCHS - 1,
        ..TrainConfig::source()
    };
    train_on(&mut scratch, &target, &ends, &target.split.val, &sc).map_err(|e| e.to_string())?;
    let scratch_eval =
        cpmoe::learn::evaluate(&scratch, &target, &target.split.val, &CpsiConfig::default(), 256).map_err(|e| e.to_string())?;

    let zero = r.zero_shot.pollutants[CO].mae;
    let post = r.final_metrics.pollutants[CO].mae;
    let from_scratch = scratch_eval.report.pollutants[CO].mae;
    let drop = 1.0 - post / zero;
    let a = drop >= 0.30;
    let b = post < from_scratch;
    let c = r.probe_mmd_after < r.probe_mmd_before;
    verdict(
        a && b && c && co_cat == Some(ShiftCategory::High),
        format!(
            "CO shift {:?}; {budget} target windows; CO MAE zero-shot {zero:.3} -> transfer {post:.3} ({:.1}% lower) vs scratch {from_scratch:.3}; probe MMD {:.5} -> {:.5} [a {} b {} c {}]",
            co_cat,
            100.0 * drop,
            r.probe_mmd_before,
            r.probe_mmd_after,
            a,
            b,
            c
        ),
    )
}

// -------------------------------------------------------------- pipeline

fn pipeline_golden() -> Outcome {
    let schema = RawSchema::mswi();
    let plant = gen_plant(&PlantConfig::with_regimes("golden", 3), 3_000, 4).map_err(|e| e.to_string())?;
    let plan = SplitPlan::default();
    let rules = CleaningRules::default();
    let data = prepare(plant.series.clone(), &schema, &rules, &plan).map_err(|e| e.to_string())?;
    let n_features = data.features.ncols();
    let names = feature_names(&schema).len();
    let count_ok = N_FEATURES == 98 && n_features == 98 && names == 98;

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut holey = plant.series.clone();
    let (rows, cols) = holey.features.dim();
    for _ in 0..rows * cols / 20 {
        holey.features[[rng.random_range(0..rows), rng.random_range(0..cols)]] = f64::NAN;
    }
    for _ in 0..rows / 10 {
        holey.targets[[rng.random_range(0..rows), rng.random_range(0..N_TARGETS)]] = f64::NAN;
    }
    for j in 0..3 {
        holey.features.slice_mut(s![100..130, j]).fill(f64::NAN);
    }
    let once = impute(holey);
    let twice = impute(once.clone());
    let impute_ok = !once.has_missing() && once == twice;

    let span = |e: usize| e + 1 - WINDOW..=e;
    let train_rows = data.train_row_mask();
    let mut leaks = 0;
    for &v in &data.split.val {
        leaks += span(v).filter(|r| train_rows[*r]).count();
    }
    for &t in &data.split.train {
        leaks += span(t).filter(|r| !train_rows[*r]).count();
    }
    let mut poisoned = plant.series.clone();
    for r in 0..rows {
        if !train_rows[r] {
            poisoned.features.row_mut(r).mapv_inplace(|v| v * 3.0 + 50.0);
            poisoned.targets.row_mut(r).mapv_inplace(|v| v * 5.0);
        }
    }
    let refit = prepare(poisoned, &schema, &rules, &plan).map_err(|e| e.to_string())?;
    let split_ok = leaks == 0 && refit.spec == data.spec && refit.split == data.split;

    let text = serde_json::to_string(&data.spec).map_err(|e| e.to_string())?;
    let frozen: TransformSpec = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let replay = prepare_with_spec(plant.series.clone(), &schema, &rules, &frozen, &plan).map_err(|e| e.to_string())?;
    let held: Vec<usize> = (0..rows).filter(|r| !train_rows[*r]).collect();
    let mut mismatched = 0;
    for &r in &held {
        let a = data.features.row(r);
        let b = replay.features.row(r);
        mismatched += a.iter().zip(b.iter()).filter(|(x, y)| x.to_bits() != y.to_bits()).count();
    }
    let replay_ok = frozen == data.spec && !held.is_empty() && mismatched == 0;

    verdict(
        count_ok && impute_ok && split_ok && replay_ok,
        format!(
            "features {n_features} (names {names}); impute idempotent {impute_ok}; split leaks {leaks}, held-out poisoning changes spec {}; replay over {} held-out rows: {mismatched} differing values",
            refit.spec != data.spec,
            held.len()
        ),
    )
}

// ------------------------------------------------------------------ twin

fn twin_soundness() -> Outcome {
    let run = source_run();
    let twin = Twin::new(run.ck.clone(), RawSchema::mswi(), TwinConfig::default()).map_err(|e| e.to_string())?;
    let modules: Vec<String> = twin.config().modules.iter().map(|m| m.name.clone()).collect();
    let ends = &run.data.split.val;
    let window = |end: usize| {
        RawWindow::from_array(&run.data.raw_window(end), Some(run.data.timestamp(end + 1 - WINDOW)))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut out_of_bounds, mut above_baseline, mut unsorted, mut recommendations) = (0usize, 0usize, 0usize, 0usize);
    for _ in 0..1_000 {
        let end = ends[rng.random_range(0..ends.len())];
        let mut picked: Vec<String> = modules.iter().filter(|_| rng.random_bool(0.5)).cloned().collect();
        if picked.is_empty() {
            picked.push(modules[rng.random_range(0..modules.len())].clone());
        }
        let top_n = rng.random_range(1..=8);
        let r = twin.navigate(&window(end), &picked, top_n).map_err(|e| e.to_string())?;
        recommendations += r.ranked.len();
        if r.ranked[0].score > r.baseline.score {
            above_baseline += 1;
        }
        if r.ranked.windows(2).any(|p| p[0].score > p[1].score) {
            unsorted += 1;
        }
        for sc in &r.ranked {
            let inside = sc
                .action
                .iter()
                .all(|(v, d)| d.abs() <= twin.bounds()[v] && picked.iter().any(|m| twin.config().modules.iter().any(|c| &c.name == m && c.variables.contains(v))));
            if !inside || !sc.feasible || !sc.violations.is_empty() {
                out_of_bounds += 1;
            }
        }
    }
    let mut byte_mismatch = 0;
    for &end in ends.iter().step_by((ends.len() / 100).max(1)).take(100) {
        let w = window(end);
        let p = serde_json::to_vec(&twin.predict(&w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let z = twin.whatif(&w, &BTreeMap::new()).map_err(|e| e.to_string())?;
        if serde_json::to_vec(&z.prediction).map_err(|e| e.to_string())? != p {
            byte_mismatch += 1;
        }
    }
    verdict(
        out_of_bounds == 0 && above_baseline == 0 && unsorted == 0 && byte_mismatch == 0,
        format!(
            "1000 navigate calls, {recommendations} recommendations: {out_of_bounds} out of bounds, {above_baseline} above baseline, {unsorted} unsorted; zero-action whatif vs predict: {byte_mismatch} byte mismatches in 100"
        ),
    )
}

fn main() {
    let checks: [(&'static str, Check); 8] = [
        ("equation-units", equation_units),
        ("gradient-suite", gradient_suite),
        ("physics-recovery", physics_recovery),
        ("routing-invariants", routing_invariants),
        ("pipeline-golden", pipeline_golden),
        ("twin-soundness", twin_soundness),
        ("source-analogue", source_analogue),
        ("transfer-analogue", transfer_analogue),
    ];
    let filters = filters_from_args(std::env::args());
    if std::env::args().any(|a| a == "--list") {
        for (name, _) in &checks {
            println!("{name}: test");
        }
        return;
    }
    let outcomes = run_all(&checks, &filters);
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("\nacceptance: {} passed, {failed} failed", outcomes.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
