//! The carbon-pollutant mixture-of-experts network: process-state
//! recognition, sparse top-K gating over four heterogeneous experts,
//! residual fusion and one head per pollutant.

mod checkpoint;

pub use checkpoint::{Checkpoint, CheckpointError, ParamEntry, CHECKPOINT_SCHEMA_VERSION};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamStore, Real, Var};
use crate::dataio::{N_FEATURES, N_TARGETS, WINDOW};
use crate::nn::{dropout, positional_encoding, BiGru, BiLstm, Conv1d, Ctx, EncoderLayer, LayerNorm, Linear};

/// Number of expert architectures.
pub const N_EXPERTS: usize = 4;
/// Number of process phases.
pub const N_PHASES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertKind {
    Transformer,
    Cnn,
    Lstm,
    Mlp,
}

impl ExpertKind {
    pub const ALL: [ExpertKind; N_EXPERTS] = [
        ExpertKind::Transformer,
        ExpertKind::Cnn,
        ExpertKind::Lstm,
        ExpertKind::Mlp,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpertKind::Transformer => "transformer",
            ExpertKind::Cnn => "cnn",
            ExpertKind::Lstm => "lstm",
            ExpertKind::Mlp => "mlp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub feedforward: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub n_features: usize,
    /// Shared hidden width of every expert output and of the fused vector.
    pub hidden: usize,
    /// Convolution width and per-direction GRU width of state recognition.
    pub state_hidden: usize,
    pub transformer: TransformerConfig,
    pub cnn_channels: (usize, usize),
    pub cnn_kernel: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Experts in gate order.
    pub experts: Vec<ExpertKind>,
    pub top_k: usize,
    pub gate_noise: f64,
    pub n_targets: usize,
    /// Single linear layer per head instead of a two-layer network.
    pub linear_heads: bool,
    /// Phase recognition branch; when off, the gate sees only pooled input.
    pub state_recognition: bool,
    /// Pooled-input residual added to the fused representation.
    pub residual: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            seq_len: WINDOW,
            n_features: N_FEATURES,
            hidden: 352,
            state_hidden: 176,
            transformer: TransformerConfig {
                d_model: 192,
                heads: 4,
                layers: 1,
                feedforward: 768,
            },
            cnn_channels: (176, 352),
            cnn_kernel: 3,
            lstm_hidden: 352,
            lstm_layers: 2,
            mlp_hidden: 352,
            dropout: 0.15,
            experts: ExpertKind::ALL.to_vec(),
            top_k: 3,
            gate_noise: 0.01,
            n_targets: N_TARGETS,
            linear_heads: false,
            state_recognition: true,
            residual: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("input shape {got:?} does not match (batch * {seq_len}, {features})")]
    Shape {
        got: (usize, usize),
        seq_len: usize,
        features: usize,
    },
}

impl ModelConfig {
    /// Reduced widths for single-core experiments.
    pub fn desk() -> Self {
        Self {
            hidden: 32,
            state_hidden: 16,
            transformer: TransformerConfig {
                d_model: 32,
                heads: 4,
                layers: 1,
                feedforward: 64,
            },
            cnn_channels: (16, 32),
            lstm_hidden: 16,
            lstm_layers: 2,
            mlp_hidden: 32,
            ..Self::default()
        }
    }

    /// Tiny dimensions for finite-difference checks.
    pub fn tiny(seq_len: usize, n_features: usize, hidden: usize) -> Self {
        Self {
            seq_len,
            n_features,
            hidden,
            state_hidden: 4,
            transformer: TransformerConfig {
                d_model: 8,
                heads: 2,
                layers: 1,
                feedforward: 8,
            },
            cnn_channels: (4, hidden),
            lstm_hidden: 4,
            lstm_layers: 2,
            mlp_hidden: hidden,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// One expert with its heads only, trained without phase supervision.
    pub fn single_expert(&self, kind: ExpertKind) -> Self {
        Self {
            experts: vec![kind],
            top_k: 1,
            state_recognition: false,
            residual: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.experts.is_empty() || self.top_k == 0 || self.top_k > self.experts.len() {
            return bad("need 1 <= top_k <= number of experts");
        }
        let mut seen = self.experts.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.experts.len() {
            return bad("duplicate expert kind");
        }
        let dims = [
            self.seq_len,
            self.n_features,
            self.hidden,
            self.state_hidden,
            self.transformer.d_model,
            self.transformer.heads,
            self.transformer.layers,
            self.transformer.feedforward,
            self.cnn_channels.0,
            self.cnn_channels.1,
            self.lstm_hidden,
            self.lstm_layers,
            self.mlp_hidden,
            self.n_targets,
        ];
        if dims.iter().any(|d| *d == 0) {
            return bad("all dimensions must be positive");
        }
        if self.transformer.d_model % self.transformer.heads != 0 {
            return bad("transformer d_model must be divisible by heads");
        }
        if self.cnn_kernel % 2 == 0 {
            return bad("cnn kernel must be odd");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct StateRecognition {
    conv: Conv1d,
    ln: LayerNorm,
    gru: BiGru,
    att_proj: Linear,
    att_score: Linear,
    phase: Linear,
}

#[derive(Debug, Clone)]
enum Expert {
    Transformer {
        input: Linear,
        layers: Vec<EncoderLayer>,
        out: Linear,
    },
    Cnn {
        conv1: Conv1d,
        conv2: Conv1d,
        out: Option<Linear>,
    },
    Lstm {
        lstm: BiLstm,
        out: Linear,
    },
    Mlp {
        l1: Linear,
        l2: Linear,
    },
}

#[derive(Debug, Clone)]
enum Head {
    Linear(Linear),
    Mlp(Linear, Linear),
}

/// Per-sample routing record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    /// Renormalized weights indexed by [`ExpertKind::index`].
    pub weights: [f64; N_EXPERTS],
    pub phase_probs: [f64; N_PHASES],
    /// Kept experts by [`ExpertKind::index`], ascending.
    pub active: Vec<usize>,
}

/// Nodes and values produced by one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `B x M` standardized predictions.
    pub y: Var,
    /// `B x P` phase log-probabilities, when state recognition is on.
    pub phase_logp: Option<Var>,
    /// `B x E` gate weights in config expert order.
    pub weights: Var,
    /// `B x D` fused representation.
    pub z_share: Var,
    /// `B x T` attention weights over time, when state recognition is on.
    pub attention: Option<Var>,
    pub traces: Vec<GateTrace>,
}

/// Top-K selection with ties going to the lower index. Returns kept indices
/// in ascending order.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    kept
}

/// Softmax over the kept logits with every other weight exactly zero.
pub fn sparse_softmax(logits: &[f64], k: usize) -> Vec<f64> {
    let kept = top_k_indices(logits, k);
    let m = kept.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let mut w = vec![0.0; logits.len()];
    let mut sum = 0.0;
    for &i in &kept {
        w[i] = (logits[i] - m).exp();
        sum += w[i];
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// CPMoE layer layout. Parameters live in a separate [`ParamStore`] so the
/// same layout drives both single and double precision.
#[derive(Debug, Clone)]
pub struct Cpmoe {
    pub config: ModelConfig,
    state: Option<StateRecognition>,
    gate_pool: Linear,
    gate_l1: Linear,
    gate_l2: Linear,
    experts: Vec<Expert>,
    residual: Option<Linear>,
    heads: Vec<Head>,
}

impl Cpmoe {
    pub fn new<F: Real>(config: ModelConfig, store: &mut ParamStore<F>, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (f, d) = (c.n_features, c.hidden);
        let state = c.state_recognition.then(|| {
            let sh = c.state_hidden;
            StateRecognition {
                conv: Conv1d::new(store, "state.conv", f, sh, 3, &mut rng),
                ln: LayerNorm::new(store, "state.ln", sh),
                gru: BiGru::new(store, "state.gru", sh, sh, &mut rng),
                att_proj: Linear::new(store, "state.att.proj", 2 * sh, d, true, &mut rng),
                att_score: Linear::new(store, "state.att.score", d, 1, false, &mut rng),
                phase: Linear::new(store, "state.phase", 2 * sh, N_PHASES, true, &mut rng),
            }
        });
        let cond = if c.state_recognition { N_PHASES } else { 0 };
        let gate_pool = Linear::new(store, "gate.pool", f, d, true, &mut rng);
        let gate_l1 = Linear::new(store, "gate.l1", d + cond, d, true, &mut rng);
        let gate_l2 = Linear::new(store, "gate.l2", d, c.experts.len(), true, &mut rng);
        let mut experts = Vec::with_capacity(c.experts.len());
        for kind in &c.experts {
            let p = format!("expert.{}", kind.name());
            experts.push(match kind {
                ExpertKind::Transformer => {
                    let t = &c.transformer;
                    Expert::Transformer {
                        input: Linear::new(store, &format!("{p}.input"), f, t.d_model, true, &mut rng),
                        layers: (0..t.layers)
                            .map(|i| {
                                EncoderLayer::new(
                                    store,
                                    &format!("{p}.layer{i}"),
                                    t.d_model,
                                    t.heads,
                                    t.feedforward,
                                    c.dropout,
                                    &mut rng,
                                )
                            })
                            .collect(),
                        out: Linear::new(store, &format!("{p}.out"), t.d_model, d, true, &mut rng),
                    }
                }
                ExpertKind::Cnn => {
                    let (c1, c2) = c.cnn_channels;
                    Expert::Cnn {
                        conv1: Conv1d::new(store, &format!("{p}.conv1"), f, c1, c.cnn_kernel, &mut rng),
                        conv2: Conv1d::new(store, &format!("{p}.conv2"), c1, c2, c.cnn_kernel, &mut rng),
                        out: (c2 != d).then(|| Linear::new(store, &format!("{p}.out"), c2, d, true, &mut rng)),
                    }
                }
                ExpertKind::Lstm => Expert::Lstm {
                    lstm: BiLstm::new(
                        store,
                        &format!("{p}.lstm"),
                        f,
                        c.lstm_hidden,
                        c.lstm_layers,
                        c.dropout,
                        &mut rng,
                    ),
                    out: Linear::new(store, &format!("{p}.out"), 2 * c.lstm_hidden, d, true, &mut rng),
                },
                ExpertKind::Mlp => Expert::Mlp {
                    l1: Linear::new(store, &format!("{p}.l1"), f, c.mlp_hidden, true, &mut rng),
                    l2: Linear::new(store, &format!("{p}.l2"), c.mlp_hidden, d, true, &mut rng),
                },
            });
        }
        let residual = c
            .residual
            .then(|| Linear::new(store, "fuse.residual", f + cond, d, false, &mut rng));
        let heads = crate::dataio::TARGET_NAMES
            .iter()
            .take(c.n_targets)
            .map(|name| {
                let p = format!("head.{name}");
                if c.linear_heads {
                    Head::Linear(Linear::new(store, &p, d, 1, true, &mut rng))
                } else {
                    Head::Mlp(
                        Linear::new(store, &format!("{p}.l1"), d, (d / 2).max(1), true, &mut rng),
                        Linear::new(store, &format!("{p}.l2"), (d / 2).max(1), 1, true, &mut rng),
                    )
                }
            })
            .collect();
        Ok(Self {
            config,
            state,
            gate_pool,
            gate_l1,
            gate_l2,
            experts,
            residual,
            heads,
        })
    }

    /// Names of the parameters of the expert at config position `i`.
    pub fn expert_prefix(&self, i: usize) -> String {
        format!("expert.{}.", self.config.experts[i].name())
    }

    /// Recurrent weights of the state-recognition GRU.
    pub fn state_recurrent_weights(&self) -> Option<[crate::autograd::ParamId; 2]> {
        self.state.as_ref().map(|s| s.gru.recurrent_weights())
    }

    pub fn check_input(&self, shape: (usize, usize)) -> Result<usize, ModelError> {
        let t = self.config.seq_len;
        if shape.0 == 0 || shape.0 % t != 0 || shape.1 != self.config.n_features {
            return Err(ModelError::Shape {
                got: shape,
                seq_len: t,
                features: self.config.n_features,
            });
        }
        Ok(shape.0 / t)
    }

    /// Tanh attention pooling of per-step states `h` (`B*T x H`). Returns the
    /// context vectors (`B x H`) and the weights (`B x T`).
    pub fn attention_pool<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, h: Var) -> Option<(Var, Var)> {
        let s = self.state.as_ref()?;
        let t = self.config.seq_len;
        let b = g.shape(h).0 / t;
        let proj = s.att_proj.forward(g, store, h);
        let proj = g.tanh(proj);
        let score = s.att_score.forward(g, store, proj);
        let score = g.reshape(score, b, t);
        let alpha = g.softmax_rows(score);
        let a_col = g.reshape(alpha, b * t, 1);
        let weighted = g.mul(h, a_col);
        let z = g.group_sum(weighted, t);
        Some((z, alpha))
    }

    /// Phase log-probabilities and attention weights.
    fn recognize<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Option<(Var, Var)> {
        let s = self.state.as_ref()?;
        let t = self.config.seq_len;
        let c = s.conv.forward(g, store, x, t);
        let c = g.relu(c);
        let c = s.ln.forward(g, store, c);
        let h = s.gru.forward(g, store, c, t);
        let (z, alpha) = self.attention_pool(g, store, h)?;
        let logits = s.phase.forward(g, store, z);
        Some((g.log_softmax_rows(logits), alpha))
    }

    fn expert_forward<F: Real>(
        &self,
        i: usize,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut Ctx,
        x: Var,
    ) -> Var {
        let t = self.config.seq_len;
        match &self.experts[i] {
            Expert::Transformer { input, layers, out } => {
                let n = g.shape(x).0 / t;
                let dm = self.config.transformer.d_model;
                let mut h = input.forward(g, store, x);
                let pe: Array2<F> = positional_encoding(t, dm);
                let tiled = Array2::from_shape_fn((n * t, dm), |(r, c)| pe[[r % t, c]]);
                let pe = g.constant(tiled);
                h = g.add(h, pe);
                for l in layers {
                    h = l.forward(g, store, ctx, h, t);
                }
                let pooled = g.group_mean(h, t);
                out.forward(g, store, pooled)
            }
            Expert::Cnn { conv1, conv2, out } => {
                let h = conv1.forward(g, store, x, t);
                let h = g.relu(h);
                let h = conv2.forward(g, store, h, t);
                let h = g.relu(h);
                let pooled = g.group_mean(h, t);
                match out {
                    Some(o) => o.forward(g, store, pooled),
                    None => pooled,
                }
            }
            Expert::Lstm { lstm, out } => {
                let h = lstm.forward_final(g, store, ctx, x, t);
                out.forward(g, store, h)
            }
            Expert::Mlp { l1, l2 } => {
                let m = g.group_mean(x, t);
                let h = l1.forward(g, store, m);
                let h = g.relu(h);
                let h = dropout(g, ctx, h, self.config.dropout);
                l2.forward(g, store, h)
            }
        }
    }

    /// Runs one expert on a full batch, for tests and diagnostics.
    pub fn expert_output<F: Real>(
        &self,
        kind: ExpertKind,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut Ctx,
        x: Var,
    ) -> Option<Var> {
        let i = self.config.experts.iter().position(|k| *k == kind)?;
        Some(self.expert_forward(i, g, store, ctx, x))
    }

    /// Gate logits (`B x E`) before noise and masking.
    pub fn gate_logits<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        gap: Var,
        phase_probs: Option<Var>,
    ) -> Var {
        let pooled = self.gate_pool.forward(g, store, gap);
        let input = match phase_probs {
            Some(p) => g.concat_cols(&[pooled, p]),
            None => pooled,
        };
        let h = self.gate_l1.forward(g, store, input);
        let h = g.relu(h);
        self.gate_l2.forward(g, store, h)
    }

    /// Applies noise (training only), top-K masking and softmax to logits.
    /// Returns the weights and the kept expert positions of each sample.
    pub fn route<F: Real>(&self, g: &mut Graph<F>, ctx: &mut Ctx, logits: Var) -> (Var, Vec<Vec<usize>>) {
        let (b, e) = g.shape(logits);
        let logits = if ctx.training && self.config.gate_noise > 0.0 {
            let normal = Normal::new(0.0, self.config.gate_noise).expect("positive std");
            let noise = Array2::from_shape_fn((b, e), |_| F::lit(normal.sample(&mut ctx.rng)));
            let n = g.constant(noise);
            g.add(logits, n)
        } else {
            logits
        };
        let vals = g.value(logits).clone();
        let mut mask = Array2::from_elem((b, e), F::neg_infinity());
        let mut kept = Vec::with_capacity(b);
        for r in 0..b {
            let row: Vec<f64> = vals.row(r).iter().map(|v| v.as_f64()).collect();
            let k = top_k_indices(&row, self.config.top_k);
            for &i in &k {
                mask[[r, i]] = F::zero();
            }
            kept.push(k);
        }
        let m = g.constant(mask);
        let masked = g.add(logits, m);
        (g.softmax_rows(masked), kept)
    }

    /// Full forward pass over `x` (`B*T x F`, batch-major).
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut Ctx,
        x: Var,
    ) -> Result<ForwardOut, ModelError> {
        let b = self.check_input(g.shape(x))?;
        let t = self.config.seq_len;
        let recognized = self.recognize(g, store, x);
        let (phase_logp, attention) = match recognized {
            Some((lp, a)) => (Some(lp), Some(a)),
            None => (None, None),
        };
        let phase_probs = phase_logp.map(|lp| g.exp(lp));
        let gap = g.group_mean(x, t);
        let logits = self.gate_logits(g, store, gap, phase_probs);
        let (weights, kept) = self.route(g, ctx, logits);

        let wv = g.value(weights).clone();
        let mut z_fuse: Option<Var> = None;
        for i in 0..self.experts.len() {
            let rows: Vec<usize> = (0..b).filter(|&r| kept[r].contains(&i)).collect();
            if rows.is_empty() {
                continue;
            }
            let seq_rows: Vec<usize> = rows.iter().flat_map(|&r| r * t..(r + 1) * t).collect();
            let xi = g.gather_rows(x, &seq_rows);
            let zi = self.expert_forward(i, g, store, ctx, xi);
            let zi = if rows.len() == b {
                zi
            } else {
                g.scatter_rows(zi, &rows, b)
            };
            let wi = g.slice_cols(weights, i, i + 1);
            let term = g.mul(zi, wi);
            z_fuse = Some(match z_fuse {
                Some(acc) => g.add(acc, term),
                None => term,
            });
        }
        let z_fuse = z_fuse.expect("top_k >= 1 keeps at least one expert");
        let z_share = match &self.residual {
            Some(w) => {
                let cond = match phase_probs {
                    Some(p) => g.concat_cols(&[gap, p]),
                    None => gap,
                };
                let r = w.forward(g, store, cond);
                g.add(z_fuse, r)
            }
            None => z_fuse,
        };

        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let h = dropout(g, ctx, z_share, self.config.dropout);
            outs.push(match head {
                Head::Linear(l) => l.forward(g, store, h),
                Head::Mlp(l1, l2) => {
                    let h = l1.forward(g, store, h);
                    let h = g.relu(h);
                    l2.forward(g, store, h)
                }
            });
        }
        let y = g.concat_cols(&outs);

        let pp = phase_probs.map(|p| g.value(p).clone());
        let traces = (0..b)
            .map(|r| {
                let mut w = [0.0; N_EXPERTS];
                for (i, kind) in self.config.experts.iter().enumerate() {
                    w[kind.index()] = wv[[r, i]].as_f64();
                }
                let phase_probs = match &pp {
                    Some(p) => std::array::from_fn(|j| p[[r, j]].as_f64()),
                    None => [1.0 / N_PHASES as f64; N_PHASES],
                };
                let mut active: Vec<usize> = kept[r].iter().map(|&i| self.config.experts[i].index()).collect();
                active.sort_unstable();
                GateTrace {
                    weights: w,
                    phase_probs,
                    active,
                }
            })
            .collect();
        Ok(ForwardOut {
            y,
            phase_logp,
            weights,
            z_share,
            attention,
            traces,
        })
    }

    /// Evaluation-mode predictions for a batch, without recording gradients
    /// beyond the one graph. Returns (`B x M` standardized predictions, traces).
    pub fn predict<F: Real>(
        &self,
        store: &ParamStore<F>,
        x: &Array2<F>,
    ) -> Result<(Array2<F>, Vec<GateTrace>), ModelError> {
        let mut g = Graph::new();
        let mut ctx = Ctx::eval();
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, store, &mut ctx, xv)?;
        Ok((g.value(out.y).clone(), out.traces))
    }
}

/// Squared error summed over targets and averaged over the batch, plus the
/// phase cross-entropy averaged over labeled samples. Unlabeled samples get
/// zero cross-entropy weight.
pub fn task_loss<F: Real>(
    g: &mut Graph<F>,
    y_hat: Var,
    y: &Array2<F>,
    phase_logp: Option<Var>,
    labels: &[Option<usize>],
) -> Var {
    let b = g.shape(y_hat).0;
    let yt = g.constant(y.clone());
    let diff = g.sub(y_hat, yt);
    let sq = g.square(diff);
    let sse = g.sum_all(sq);
    let mse = g.scale(sse, F::lit(1.0 / b as f64));
    let labeled = labels.iter().filter(|l| l.is_some()).count();
    match phase_logp {
        Some(lp) if labeled > 0 => {
            let p = g.shape(lp).1;
            let mut onehot = Array2::zeros((b, p));
            for (r, l) in labels.iter().enumerate() {
                if let Some(c) = l {
                    onehot[[r, *c]] = F::one();
                }
            }
            let oh = g.constant(onehot);
            let picked = g.mul(lp, oh);
            let s = g.sum_all(picked);
            let ce = g.scale(s, F::lit(-1.0 / labeled as f64));
            g.add(mse, ce)
        }
        _ => mse,
    }
}

#[cfg(test)]
mod tests;
