//! Parameter storage, initializers, layers, and the Adam optimizer shared by
//! the landmark detector and the texture transformer.

use crate::tensor::{Scalar, Tensor};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Named parameter set. Ids double as gradient keys in the autodiff tape.
pub struct ParamStore<S: Scalar> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<S>>>,
    index: HashMap<String, usize>,
}

pub type ParamId = usize;

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, value: ArrayD<S>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.values[id]
    }

    pub fn set_value(&mut self, id: ParamId, value: ArrayD<S>) {
        assert_eq!(self.values[id].shape(), value.shape(), "shape change for {}", self.names[id]);
        self.values[id] = Arc::new(value);
    }

    /// Trainable view: gradients land under the parameter id.
    pub fn leaf(&self, id: ParamId) -> Tensor<S> {
        Tensor::leaf(Arc::clone(&self.values[id]), id as u64)
    }

    /// Frozen view: participates in the forward pass, receives no gradient.
    pub fn frozen(&self, id: ParamId) -> Tensor<S> {
        Tensor::constant_shared(Arc::clone(&self.values[id]))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<S>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// In-place update; clones the buffer only if an old tape still holds it.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut ArrayD<S>)) {
        f(Arc::make_mut(&mut self.values[id]));
    }
}

pub fn init_normal<S: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<S> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let v: S = S::std_normal(rng);
        v * S::from_f64(std)
    })
}

pub fn init_zeros<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn init_ones<S: Scalar>(shape: &[usize]) -> ArrayD<S> {
    ArrayD::from_elem(IxDyn(shape), S::one())
}

/// Dense layer [in, out] applied to token-major [n, in] inputs.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        ps: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
    ) -> Self {
        let w = ps.register(&format!("{name}.w"), init_normal(rng, &[d_in, d_out], std));
        let b = ps.register(&format!("{name}.b"), init_zeros(&[d_out]));
        Linear { w, b }
    }

    /// Same shape registration but zero-filled; used for output heads so the
    /// initial prediction is exactly zero.
    pub fn new_zeroed<S: Scalar>(ps: &mut ParamStore<S>, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = ps.register(&format!("{name}.w"), init_zeros(&[d_in, d_out]));
        let b = ps.register(&format!("{name}.b"), init_zeros(&[d_out]));
        Linear { w, b }
    }

    pub fn fwd<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let (w, b) = if train {
            (ps.leaf(self.w), ps.leaf(self.b))
        } else {
            (ps.frozen(self.w), ps.frozen(self.b))
        };
        x.matmul(&w).add_rowvec(&b)
    }
}

/// Layer norm with learned scale and shift over the last (feature) axis.
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<S: Scalar>(ps: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = ps.register(&format!("{name}.g"), init_ones(&[dim]));
        let beta = ps.register(&format!("{name}.b"), init_zeros(&[dim]));
        LayerNorm { gamma, beta }
    }

    pub fn fwd<S: Scalar>(&self, ps: &ParamStore<S>, x: &Tensor<S>, train: bool) -> Tensor<S> {
        let (g, b) = if train {
            (ps.leaf(self.gamma), ps.leaf(self.beta))
        } else {
            (ps.frozen(self.gamma), ps.frozen(self.beta))
        };
        x.layernorm_rows(S::from_f64(1e-5)).mul_rowvec(&g).add_rowvec(&b)
    }
}

/// Gradient accumulator aligned with a ParamStore.
pub struct GradBuf<S: Scalar> {
    pub grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> GradBuf<S> {
    pub fn new(n: usize) -> Self {
        GradBuf { grads: (0..n).map(|_| None).collect() }
    }

    pub fn absorb(&mut self, mut grads: crate::tensor::Gradients<S>, n_params: usize) {
        for id in 0..n_params {
            if let Some(g) = grads.take(id as u64) {
                match &mut self.grads[id] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
    }

    pub fn scale(&mut self, c: S) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * c);
        }
    }

    /// Global L2 norm across all gradients, in f64 for stability.
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        for g in self.grads.iter().flatten() {
            for &v in g.iter() {
                let v = v.to_f64();
                acc += v * v;
            }
        }
        acc.sqrt()
    }

    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n > 0.0 {
            let s = S::from_f64(max_norm / n);
            self.scale(s);
        }
    }
}

/// Adam with bias correction. Moments live in f64 so checkpoint resumes stay
/// exact regardless of the training element type.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(ps: &ParamStore<S>) -> Self {
        let m = (0..ps.len()).map(|i| ArrayD::zeros(ps.value(i).raw_dim())).collect();
        let v = (0..ps.len()).map(|i| ArrayD::zeros(ps.value(i).raw_dim())).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }

    pub fn apply<S: Scalar>(&mut self, ps: &mut ParamStore<S>, grads: &GradBuf<S>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in 0..ps.len() {
            let Some(g) = &grads.grads[id] else { continue };
            let m = &mut self.m[id];
            let v = &mut self.v[id];
            ndarray::Zip::from(m).and(v).and(g).for_each(|m, v, &gv| {
                let gv = gv.to_f64();
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
            });
            let m = &self.m[id];
            let v = &self.v[id];
            let (beta_eps, b1, b2) = (self.eps, bc1, bc2);
            ps.update(id, |p| {
                ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                    let upd = lr * (m / b1) / ((v / b2).sqrt() + beta_eps);
                    *p = *p - S::from_f64(upd);
                });
            });
        }
    }
}

/// Cosine decay from `base` to ~0 with a short linear warmup.
pub fn cosine_lr(step: u64, total: u64, base: f64, warmup: u64) -> f64 {
    if total == 0 {
        return base;
    }
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let p = (step - warmup) as f64 / (total.saturating_sub(warmup)).max(1) as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn adam_reduces_quadratic() {
        // Minimize ||x - c||^2 for a fixed target c.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::<f32>::new();
        let x = ps.register("x", init_normal(&mut rng, &[8], 1.0));
        let c = Tensor::constant(init_normal::<f32, _>(&mut rng, &[8], 1.0));
        let mut opt = Adam::new(&ps);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            let loss = ps.leaf(x).sub(&c).mul(&ps.leaf(x).sub(&c)).sum_all();
            last = loss.value();
            first.get_or_insert(last);
            let mut gb = GradBuf::new(ps.len());
            gb.absorb(loss.backward(), ps.len());
            opt.apply(&mut ps, &gb, 0.05);
        }
        assert!(last < first.unwrap() * 1e-3, "first={:?} last={last}", first);
    }

    #[test]
    fn clip_bounds_global_norm() {
        let mut gb = GradBuf::<f32>::new(2);
        gb.grads[0] = Some(ArrayD::from_elem(IxDyn(&[3]), 10.0f32));
        gb.grads[1] = Some(ArrayD::from_elem(IxDyn(&[1]), -10.0f32));
        gb.clip_global_norm(1.0);
        assert!((gb.global_norm() - 1.0).abs() < 1e-5);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0, 1000, 3e-4, 50) - 3e-4 / 50.0).abs() < 1e-12);
        assert!(cosine_lr(999, 1000, 3e-4, 50) < 3e-6);
        assert!((cosine_lr(50, 1000, 3e-4, 50) - 3e-4).abs() < 1e-9);
    }
}
