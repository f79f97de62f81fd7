//! Network building blocks recorded onto an autograd [`Graph`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Real, Var};

/// Per-forward execution context: train/eval flag plus the RNG used for
/// dropout masks and gate noise.
pub struct Ctx {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        use rand::SeedableRng;
        Self {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self {
            training: true,
            rng,
        }
    }
}

fn uniform<F: Real>(rng: &mut ChaCha8Rng, shape: (usize, usize), bound: f64) -> Array2<F> {
    Array2::from_shape_fn(shape, |_| F::lit(rng.random_range(-bound..bound)))
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, (fan_in, fan_out), bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), uniform(rng, (1, fan_out), bound)));
        Self { w, b }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add(y, b)
            }
            None => y,
        }
    }
}

pub fn dropout<F: Real>(g: &mut Graph<F>, ctx: &mut Ctx, x: Var, p: f64) -> Var {
    if !ctx.training || p <= 0.0 {
        return x;
    }
    let keep = 1.0 - p;
    let scale = F::lit(1.0 / keep);
    let shape = g.shape(x);
    let mask = Array2::from_shape_fn(shape, |_| {
        if ctx.rng.random::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// Same-padded 1-D convolution over `(N*T, C_in)` batch-major sequences.
#[derive(Debug, Clone)]
pub struct Conv1d {
    lin: Linear,
    kernel: usize,
}

impl Conv1d {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, c_in * kernel, c_out, true, rng),
            kernel,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        seq_len: usize,
    ) -> Var {
        let patches = g.unfold(x, seq_len, self.kernel);
        self.lin.forward(g, store, patches)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Var {
        let n = g.layer_norm(x, F::lit(1e-5));
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let y = g.mul(n, gain);
        g.add(y, bias)
    }
}

/// Row indices selecting time step `t` of every sequence in batch-major layout.
fn step_rows(n: usize, seq_len: usize, t: usize) -> Vec<usize> {
    (0..n).map(|b| b * seq_len + t).collect()
}

/// Stacks per-step `(N, H)` outputs (indexed by time) back into `(N*T, H)`.
fn stack_steps<F: Real>(g: &mut Graph<F>, steps: &[Var], n: usize) -> Var {
    let seq_len = steps.len();
    let time_major = g.concat_rows(steps);
    let idx: Vec<usize> = (0..n * seq_len)
        .map(|r| (r % seq_len) * n + r / seq_len)
        .collect();
    g.gather_rows(time_major, &idx)
}

#[derive(Debug, Clone)]
struct GruDir {
    ih: Linear,
    hh: Linear,
    hidden: usize,
}

impl GruDir {
    fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        seq_len: usize,
        reverse: bool,
    ) -> Var {
        let n = g.shape(x).0 / seq_len;
        let xp = self.ih.forward(g, store, x);
        let mut h = g.constant(Array2::zeros((n, self.hidden)));
        let mut outs = vec![h; seq_len];
        let order: Vec<usize> = if reverse {
            (0..seq_len).rev().collect()
        } else {
            (0..seq_len).collect()
        };
        for t in order {
            let xt = g.gather_rows(xp, &step_rows(n, seq_len, t));
            let hp = self.hh.forward(g, store, h);
            h = g.gru_cell(xt, hp, h);
            outs[t] = h;
        }
        stack_steps(g, &outs, n)
    }
}

/// Single-layer bidirectional GRU returning `[forward || backward]` states per step.
#[derive(Debug, Clone)]
pub struct BiGru {
    fwd: GruDir,
    bwd: GruDir,
}

impl BiGru {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mk = |store: &mut ParamStore<F>, dir: &str, rng: &mut ChaCha8Rng| GruDir {
            ih: Linear::new(store, &format!("{name}.{dir}.ih"), input, 3 * hidden, true, rng),
            hh: Linear::new(store, &format!("{name}.{dir}.hh"), hidden, 3 * hidden, true, rng),
            hidden,
        };
        let fwd = mk(store, "fwd", rng);
        let bwd = mk(store, "bwd", rng);
        Self { fwd, bwd }
    }

    /// Recurrent weights, for tests that need step-independent states.
    pub fn recurrent_weights(&self) -> [ParamId; 2] {
        [self.fwd.hh.w, self.bwd.hh.w]
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        seq_len: usize,
    ) -> Var {
        let f = self.fwd.run(g, store, x, seq_len, false);
        let b = self.bwd.run(g, store, x, seq_len, true);
        g.concat_cols(&[f, b])
    }
}

#[derive(Debug, Clone)]
struct LstmDir {
    ih: Linear,
    hh: Linear,
    hidden: usize,
}

impl LstmDir {
    /// Returns (per-step outputs `(N*T, H)`, final hidden state `(N, H)`).
    fn run<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        x: Var,
        seq_len: usize,
        reverse: bool,
    ) -> (Var, Var) {
        let n = g.shape(x).0 / seq_len;
        let xp = self.ih.forward(g, store, x);
        let zero = g.constant(Array2::zeros((n, self.hidden)));
        let (mut h, mut c) = (zero, zero);
        let mut outs = vec![zero; seq_len];
        let order: Vec<usize> = if reverse {
            (0..seq_len).rev().collect()
        } else {
            (0..seq_len).collect()
        };
        for t in order {
            let xt = g.gather_rows(xp, &step_rows(n, seq_len, t));
            let hp = self.hh.forward(g, store, h);
            let pre = g.add(xt, hp);
            let hc = g.lstm_cell(pre, c);
            h = g.slice_cols(hc, 0, self.hidden);
            c = g.slice_cols(hc, self.hidden, 2 * self.hidden);
            outs[t] = h;
        }
        (stack_steps(g, &outs, n), h)
    }
}

/// Stacked bidirectional LSTM.
#[derive(Debug, Clone)]
pub struct BiLstm {
    layers: Vec<(LstmDir, LstmDir)>,
    dropout: f64,
}

impl BiLstm {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut out = Vec::with_capacity(layers);
        for l in 0..layers {
            let in_dim = if l == 0 { input } else { 2 * hidden };
            let mut mk = |dir: &str| LstmDir {
                ih: Linear::new(store, &format!("{name}.l{l}.{dir}.ih"), in_dim, 4 * hidden, true, rng),
                hh: Linear::new(store, &format!("{name}.l{l}.{dir}.hh"), hidden, 4 * hidden, true, rng),
                hidden,
            };
            let f = mk("fwd");
            let b = mk("bwd");
            out.push((f, b));
        }
        Self {
            layers: out,
            dropout,
        }
    }

    /// Final states of the last layer: forward at the last step, backward at
    /// the first step, concatenated `(N, 2H)`.
    pub fn forward_final<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut Ctx,
        x: Var,
        seq_len: usize,
    ) -> Var {
        let mut input = x;
        let mut last = None;
        for (i, (f, b)) in self.layers.iter().enumerate() {
            if i > 0 {
                input = dropout(g, ctx, input, self.dropout);
            }
            let (fo, fh) = f.run(g, store, input, seq_len, false);
            let (bo, bh) = b.run(g, store, input, seq_len, true);
            input = g.concat_cols(&[fo, bo]);
            last = Some(g.concat_cols(&[fh, bh]));
        }
        last.expect("at least one layer")
    }
}

/// Post-norm transformer encoder layer with ReLU feed-forward.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
    heads: usize,
    dropout: f64,
}

impl EncoderLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        d_model: usize,
        heads: usize,
        ff: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(d_model % heads == 0, "d_model must be divisible by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, true, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d_model),
            ff1: Linear::new(store, &format!("{name}.ff1"), d_model, ff, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ff, d_model, true, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d_model),
            heads,
            dropout,
        }
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        ctx: &mut Ctx,
        x: Var,
        seq_len: usize,
    ) -> Var {
        let q = self.q.forward(g, store, x);
        let k = self.k.forward(g, store, x);
        let v = self.v.forward(g, store, x);
        let a = g.attention(q, k, v, seq_len, self.heads);
        let a = self.o.forward(g, store, a);
        let a = dropout(g, ctx, a, self.dropout);
        let x = g.add(x, a);
        let x = self.ln1.forward(g, store, x);
        let h = self.ff1.forward(g, store, x);
        let h = g.relu(h);
        let h = dropout(g, ctx, h, self.dropout);
        let h = self.ff2.forward(g, store, h);
        let h = dropout(g, ctx, h, self.dropout);
        let x = g.add(x, h);
        self.ln2.forward(g, store, x)
    }
}

/// Sinusoidal position table `(seq_len, d)`.
pub fn positional_encoding<F: Real>(seq_len: usize, d: usize) -> Array2<F> {
    Array2::from_shape_fn((seq_len, d), |(t, i)| {
        let pair = (i / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
        F::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}
