//! Adaptive-moment optimizer with decoupled weight decay.

use ndarray::{Array2, Zip};

use crate::autograd::{Gradients, ParamStore, Real};

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decay: Vec<bool>,
    m: Vec<Option<Array2<F>>>,
    v: Vec<Option<Array2<F>>>,
    t: u64,
}

impl<F: Real> AdamW<F> {
    /// `decays(name)` selects the parameters that receive weight decay.
    pub fn new(store: &ParamStore<F>, weight_decay: f64, decays: impl Fn(&str) -> bool) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay: store.ids().map(|id| decays(store.name(id))).collect(),
            m: vec![None; store.len()],
            v: vec![None; store.len()],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &Gradients<F>, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let step = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(self.eps);
        let decay = F::lit(1.0 - lr * self.weight_decay);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.is_frozen(id) {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let i = id.0;
            let m = self.m[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let v = self.v[i].get_or_insert_with(|| Array2::zeros(g.dim()));
            let p = store.get_mut(id);
            if self.decay[i] && self.weight_decay > 0.0 {
                p.mapv_inplace(|x| x * decay);
            }
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (F::one() - b1) * g;
                *v = b2 * *v + (F::one() - b2) * g * g;
                *p -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            });
        }
    }
}

/// Scales gradients so their global norm does not exceed `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let n = grads.norm();
    if n > max_norm && n.is_finite() {
        grads.scale(F::lit(max_norm / n));
    }
    n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use ndarray::array;

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", array![[3.0, -2.0]]);
        let mut opt = AdamW::new(&store, 0.0, |_| true);
        for _ in 0..2000 {
            let mut g = Graph::new();
            let p = g.param(&store, w);
            let sq = g.square(p);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss, store.len());
            opt.step(&mut store, &grads, 0.01);
        }
        assert!(store.get(w).iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", array![[1.0]]);
        let mut opt = AdamW::new(&store, 0.0, |_| true);
        let mut g = Graph::new();
        let p = g.param(&store, w);
        let loss = g.sum_all(p);
        let grads = g.backward(loss, store.len());
        opt.step(&mut store, &grads, 0.1);
        assert!((store.get(w)[[0, 0]] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn frozen_and_decay_masks() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", array![[1.0]]);
        let b = store.add("b", array![[1.0]]);
        store.set_frozen(a, true);
        let mut opt = AdamW::new(&store, 0.5, |n| n == "b");
        let mut g = Graph::new();
        let pa = g.param(&store, a);
        let pb = g.param(&store, b);
        let s = g.add(pa, pb);
        let loss = g.scale(s, 0.0);
        let grads = g.backward(loss, store.len());
        opt.step(&mut store, &grads, 0.1);
        assert_eq!(store.get(a)[[0, 0]], 1.0);
        assert!((store.get(b)[[0, 0]] - 0.95).abs() < 1e-12);
    }
}
