use super::*;
use crate::nn::Ctx;
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};

fn tiny() -> ModelConfig {
    ModelConfig::tiny(4, 6, 8)
}

fn random_x(b: usize, cfg: &ModelConfig, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((b * cfg.seq_len, cfg.n_features), |_| rng.random_range(-2.0..2.0))
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

#[test]
fn sparse_softmax_keeps_top_three() {
    let w = sparse_softmax(&[2.0, 1.0, 0.0, -1.0], 3);
    let expect = [0.665241, 0.244728, 0.090031, 0.0];
    for (a, b) in w.iter().zip(expect) {
        assert!((a - b).abs() < 1e-6, "{w:?}");
    }
    assert_eq!(w[3], 0.0);
}

#[test]
fn ties_go_to_lower_index() {
    assert_eq!(top_k_indices(&[1.0, 1.0, 1.0, 1.0], 3), vec![0, 1, 2]);
    assert_eq!(top_k_indices(&[0.0, 5.0, 0.0, 0.0], 2), vec![0, 1]);
    let w = sparse_softmax(&[1.0; 4], 3);
    assert!((w[0] - 1.0 / 3.0).abs() < 1e-12 && w[3] == 0.0);
}

#[test]
fn graph_routing_matches_reference() {
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(tiny(), &mut store, 1).unwrap();
    let logits = Array2::from_shape_vec((2, 4), vec![2.0, 1.0, 0.0, -1.0, 0.3, 0.3, 0.3, 0.3]).unwrap();
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let (w, _) = model.route(&mut g, &mut Ctx::eval(), l);
    for r in 0..2 {
        let reference = sparse_softmax(&logits.row(r).to_vec(), 3);
        for i in 0..4 {
            assert!((g.value(w)[[r, i]] - reference[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_shapes_and_traces() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(cfg.clone(), &mut store, 3).unwrap();
    let x = random_x(5, &cfg, 9);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = model.forward(&mut g, &store, &mut Ctx::eval(), xv).unwrap();
    assert_eq!(g.shape(out.y), (5, 6));
    assert_eq!(g.shape(out.z_share), (5, 8));
    assert_eq!(g.shape(out.attention.unwrap()), (5, 4));
    for t in &out.traces {
        assert_eq!(t.active.len(), 3);
        assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((t.phase_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_shapes_and_configs() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(cfg.clone(), &mut store, 3).unwrap();
    let x = Array2::<f64>::zeros((7, cfg.n_features));
    assert!(matches!(model.predict(&store, &x), Err(ModelError::Shape { .. })));
    let bad = ModelConfig { top_k: 5, ..tiny() };
    assert!(Cpmoe::new(bad, &mut ParamStore::<f64>::new(), 0).is_err());
    let dup = ModelConfig {
        experts: vec![ExpertKind::Cnn, ExpertKind::Cnn],
        top_k: 1,
        ..tiny()
    };
    assert!(dup.validate().is_err());
}

#[test]
fn inactive_expert_gets_no_gradient() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(cfg.clone(), &mut store, 4).unwrap();
    let x = random_x(1, &cfg, 2);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let out = model.forward(&mut g, &store, &mut Ctx::eval(), xv).unwrap();
    let inactive = (0..4).find(|i| !out.traces[0].active.contains(i)).unwrap();
    let loss = g.sum_all(out.y);
    let grads = g.backward(loss, store.len());
    let prefix = format!("expert.{}.", ExpertKind::ALL[inactive].name());
    let mut checked = 0;
    for id in store.ids() {
        if store.name(id).starts_with(&prefix) {
            checked += 1;
            if let Some(gr) = grads.get(id) {
                assert!(gr.iter().all(|v| *v == 0.0), "{}", store.name(id));
            }
        } else if store.name(id).starts_with("head.") {
            assert!(grads.get(id).is_some());
        }
    }
    assert!(checked > 0);
}

#[test]
fn attention_is_uniform_over_identical_states() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(cfg.clone(), &mut store, 5).unwrap();
    let h_dim = 2 * cfg.state_hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut h = Array2::zeros((3 * cfg.seq_len, h_dim));
    for b in 0..3 {
        let row: Vec<f64> = (0..h_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for t in 0..cfg.seq_len {
            for (c, v) in row.iter().enumerate() {
                h[[b * cfg.seq_len + t, c]] = *v;
            }
        }
    }
    let mut g = Graph::new();
    let hv = g.constant(h);
    let (_, alpha) = model.attention_pool(&mut g, &store, hv).unwrap();
    for v in g.value(alpha).iter() {
        assert!((v - 1.0 / cfg.seq_len as f64).abs() < 1e-12);
    }
}

#[test]
fn expert_order_permutation_leaves_output_unchanged() {
    let cfg = tiny();
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(cfg.clone(), &mut store, 6).unwrap();
    let perm = [3usize, 1, 0, 2];
    let pcfg = ModelConfig {
        experts: perm.iter().map(|&i| cfg.experts[i]).collect(),
        ..cfg.clone()
    };
    let mut pstore = ParamStore::<f64>::new();
    let pmodel = Cpmoe::new(pcfg, &mut pstore, 99).unwrap();
    for id in pstore.ids().collect::<Vec<_>>() {
        let name = pstore.name(id).to_string();
        let src = store.get(store.id(&name).unwrap()).clone();
        let value = if name.starts_with("gate.l2.") {
            Array2::from_shape_fn(src.dim(), |(r, c)| src[[r, perm[c]]])
        } else {
            src
        };
        *pstore.get_mut(id) = value;
    }
    let x = random_x(6, &cfg, 11);
    let (a, ta) = model.predict(&store, &x).unwrap();
    let (b, tb) = pmodel.predict(&pstore, &x).unwrap();
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    for (x, y) in ta.iter().zip(&tb) {
        assert_eq!(x.active, y.active);
        assert!(x.weights.iter().zip(y.weights).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}

#[test]
fn single_expert_has_unit_weight() {
    let cfg = tiny().single_expert(ExpertKind::Lstm);
    let mut store = ParamStore::<f64>::new();
    let model = Cpmoe::new(cfg.clone(), &mut store, 2).unwrap();
    assert!(store.ids().all(|id| !store.name(id).starts_with("state.")));
    let (_, traces) = model.predict(&store, &random_x(3, &cfg, 1)).unwrap();
    for t in traces {
        assert_eq!(t.weights, [0.0, 0.0, 1.0, 0.0]);
    }
}

#[test]
fn task_loss_matches_reference() {
    let mut g = Graph::<f64>::new();
    let yhat = g.constant(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, 0.0, -1.0]).unwrap());
    let y = Array2::from_shape_vec((2, 2), vec![0.0, 2.0, 1.0, 1.0]).unwrap();
    let logits = [[0.5, 0.1, -0.3, 0.0], [0.0, 0.0, 0.0, 0.0]];
    let lp = Array2::from_shape_fn((2, 4), |(r, c)| softmax(&logits[r])[c].ln());
    let lpv = g.constant(lp);
    let loss = task_loss(&mut g, yhat, &y, Some(lpv), &[Some(0), None]);
    let sse = (1.0 + 0.0 + 1.0 + 4.0) / 2.0;
    let ce = -softmax(&logits[0])[0].ln();
    assert!((g.scalar(loss) - (sse + ce)).abs() < 1e-12);
    let no_labels = task_loss(&mut g, yhat, &y, Some(lpv), &[None, None]);
    assert!((g.scalar(no_labels) - sse).abs() < 1e-12);
}

#[test]
fn checkpoint_round_trip() {
    let spec = crate::dataio::TransformSpec {
        schema_hash: "h".into(),
        features: vec![],
        bounds: vec![],
        targets: vec![],
        raw: vec![],
        dropped: vec![],
    };
    let cfg = ModelConfig::tiny(4, 6, 8);
    let ck = Checkpoint::init(
        cfg.clone(),
        7,
        spec,
        Default::default(),
        &crate::synth::PlantConfig::default_scalars(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    ck.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    let x = random_x(3, &cfg, 4).mapv(|v| v as f32);
    let (a, _) = ck.model.predict(&ck.store, &x).unwrap();
    let (b, _) = back.model.predict(&back.store, &x).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.scalars(), ck.scalars());
    for i in crate::physics::Scalars::ANCHORS {
        assert!(back.store.is_frozen(back.physics.ids[i]));
    }

    let p = dir.path().join("params").join("head.PM.l1.weight.bin");
    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(Checkpoint::load(dir.path()), Err(CheckpointError::Checksum(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weights_are_a_sparse_simplex(seed in 0u64..10_000, b in 1usize..5) {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let model = Cpmoe::new(cfg.clone(), &mut store, seed).unwrap();
        let x = random_x(b, &cfg, seed.wrapping_mul(31));
        let (_, traces) = model.predict(&store, &x).unwrap();
        for t in traces {
            prop_assert!(t.weights.iter().all(|w| *w >= 0.0));
            prop_assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert_eq!(t.weights.iter().filter(|w| **w > 0.0).count(), cfg.top_k);
        }
    }

    #[test]
    fn sparse_softmax_is_simplex(logits in proptest::collection::vec(-20.0f64..20.0, 4), k in 1usize..=4) {
        let w = sparse_softmax(&logits, k);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(w.iter().filter(|v| **v > 0.0).count(), k);
    }
}
