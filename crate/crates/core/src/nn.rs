//! Parameters, layers and optimization.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{relative_error, GradProbe, GradReport};
use crate::tensor::{Graph, Real, Tensor, Var};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    grad: Vec<T>,
}

/// Named parameter tensors with gradient accumulators.
#[derive(Debug)]
pub struct ParamStore<T> {
    uid: u64,
    params: Vec<Param<T>>,
}

impl<T: Real> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: self.params.clone() }
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let shape = t.shape().to_vec();
        let n = t.len();
        self.params.push(Param { name: name.into(), shape, data: Arc::new(t.into_data()), grad: vec![T::zero(); n] });
        ParamId(self.params.len() - 1)
    }

    /// Uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| T::lit(rng.random_range(-bound..bound))).collect();
        self.add(name, Tensor::new(vec![fan_in, fan_out], data).expect("consistent shape"))
    }

    pub fn add_filled(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape.to_vec(), vec![T::lit(value); n]).expect("consistent shape"))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.params[id.0].shape
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].data
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        Arc::make_mut(&mut self.params[id.0].data).as_mut_slice()
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Inserts (once per graph) the parameter as a gradient-tracking leaf.
    pub fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        g.bind_param(self.uid, id.0, &p.shape, &p.data)
    }

    /// Adds the gradients computed on `g` into this store's accumulators.
    pub fn absorb_grads(&mut self, g: &Graph<T>) {
        for (i, p) in self.params.iter_mut().enumerate() {
            if let Some(v) = g.param_var(self.uid, i) {
                if let Some(d) = g.grad(v) {
                    p.grad.iter_mut().zip(d).for_each(|(a, &b)| *a = *a + b);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.params.iter().flat_map(|p| p.grad.iter()).map(|&x| x * x).sum::<T>().sqrt()
    }

    /// Scales gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
    pub fn clip_grad_norm(&mut self, max_norm: T) -> T {
        let norm = self.grad_norm();
        if norm > max_norm && norm > T::zero() {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|x| *x = *x * s);
            }
        }
        norm
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Vec<T>) {
        assert_eq!(grad.len(), self.params[id.0].grad.len());
        self.params[id.0].grad = grad;
    }

    /// Copies values from a store with identical layout (names and shapes).
    pub fn copy_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Config("parameter layouts differ".into()));
        }
        for (p, q) in self.params.iter_mut().zip(&other.params) {
            if p.name != q.name || p.shape != q.shape {
                return Err(Error::Config(format!("parameter {} does not match {}", p.name, q.name)));
            }
            p.data = q.data.clone();
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            let data = p.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect();
            out.add(p.name.clone(), Tensor::new(p.shape.clone(), data).expect("consistent shape"));
        }
        out
    }

    pub(crate) fn set_value(&mut self, id: ParamId, data: Vec<T>) {
        assert_eq!(data.len(), self.params[id.0].data.len());
        self.params[id.0].data = Arc::new(data);
    }
}

/// Central finite differences for a loss over a parameter store, probing the
/// listed `(param, element)` pairs. The loss closure must be deterministic.
pub fn check_param_gradients<F>(store: &mut ParamStore<f64>, probes: &[(ParamId, usize)], eps: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    store.absorb_grads(&g);
    let frozen = g.detached_values();
    let analytic: Vec<f64> = probes.iter().map(|&(id, j)| store.grad(id)[j]).collect();

    let mut report = GradReport::default();
    for (&(id, j), &a) in probes.iter().zip(&analytic) {
        let base = store.value(id)[j];
        let eval = |x: f64, store: &mut ParamStore<f64>| -> Result<f64> {
            store.value_mut(id)[j] = x;
            let mut h = Graph::replaying(frozen.clone());
            let l = f(&mut h, store)?;
            Ok(h.scalar(l))
        };
        let up = eval(base + eps, store)?;
        let down = eval(base - eps, store)?;
        store.value_mut(id)[j] = base;
        let numeric = (up - down) / (2.0 * eps);
        report.probes.push(GradProbe { input: id.0, index: j, analytic: a, numeric, rel_error: relative_error(a, numeric) });
    }
    Ok(report)
}

/// `x · W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = bias.then(|| store.add_filled(format!("{name}.b"), &[fan_out], 0.0));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn zeroed<T: Real>(store: &mut ParamStore<T>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add_filled(format!("{name}.w"), &[fan_in, fan_out], 0.0);
        let b = Some(store.add_filled(format!("{name}.b"), &[fan_out], 0.0));
        Linear { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = store.bind(g, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = store.bind(g, b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

pub const RMS_EPS: f64 = 1e-6;

/// Inverted dropout: zeroes each entry with probability `rate` and rescales
/// the survivors by `1 / (1 - rate)`.
pub fn dropout<T: Real>(g: &mut Graph<T>, x: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep }).collect();
    let m = g.constant_from(g.shape(x).to_vec(), mask)?;
    g.mul(x, m)
}

/// Hidden layers of `Linear -> RMSNorm -> SiLU`, then a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    hidden: Vec<(Linear, ParamId)>,
    out: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut width = input;
        let mut hs = Vec::with_capacity(layers);
        for i in 0..layers {
            let lin = Linear::new(store, &format!("{name}.h{i}"), width, hidden, true, rng);
            let gain = store.add_filled(format!("{name}.h{i}.norm"), &[hidden], 1.0);
            hs.push((lin, gain));
            width = hidden;
        }
        let out = Linear::new(store, &format!("{name}.out"), width, output, true, rng);
        Mlp { hidden: hs, out }
    }

    pub fn output_layer(&self) -> &Linear {
        &self.out
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (lin, gain) in &self.hidden {
            h = lin.forward(g, store, h)?;
            let gv = store.bind(g, *gain);
            h = g.rms_norm(h, gv, T::lit(RMS_EPS))?;
            h = g.silu(h);
        }
        self.out.forward(g, store, h)
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the accumulated gradients. A zero learning
    /// rate leaves every parameter bit-identical.
    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if self.m.is_empty() {
            self.m = store.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != store.params.len() || self.m.iter().zip(&store.params).any(|(m, p)| m.len() != p.data.len()) {
            return Err(Error::shape("adamw", "optimizer state does not match the parameter store"));
        }
        self.step += 1;
        if self.lr == 0.0 {
            return Ok(());
        }
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in store.params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let data = Arc::make_mut(&mut p.data);
            for i in 0..data.len() {
                let gi = p.grad[i].to_f64().unwrap_or(0.0);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                let x = data[i].to_f64().unwrap_or(0.0);
                data[i] = T::lit(x - self.lr * (upd + self.weight_decay * x));
            }
        }
        Ok(())
    }
}

/// Linear warm-up over `warmup` steps, then cosine decay to `floor · base`
/// at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize, floor: f64) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    base * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(1.0, 0, 100, 10, 0.1) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 9, 100, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 10, 100, 10, 0.1) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 55, 100, 10, 0.1) - 0.55).abs() < 1e-12);
        assert!((cosine_lr(1.0, 500, 100, 10, 0.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let mlp = Mlp::new(&mut store, "m", 4, 6, 2, 3, &mut rng);
        let x = Tensor::from_f64(vec![2, 4], &[0.1, -0.4, 0.9, 0.3, -1.0, 0.2, 0.5, -0.7]).unwrap();
        let probes: Vec<_> = store.ids().flat_map(|id| [(id, 0)]).collect();
        let report = check_param_gradients(&mut store, &probes, 1e-4, |g, s| {
            let xv = g.constant(x.clone());
            let y = mlp.forward(g, s, xv)?;
            g.cross_entropy(y, &[1, 2], None)
        })
        .unwrap();
        assert!(report.max_rel_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn clipping_bounds_the_global_norm() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_filled("p", &[4], 0.0);
        store.set_grad(id, vec![500.0, 500.0, 500.0, 500.0]);
        let pre = store.clip_grad_norm(100.0);
        assert_eq!(pre, 1000.0);
        assert!(store.grad_norm() <= 100.0 + 1e-9);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let id = store.add_xavier("w", 3, 3, &mut rng);
        let before = store.value(id).to_vec();
        store.set_grad(id, vec![1.0; 9]);
        let mut opt = AdamW::new(0.0, 1e-4);
        opt.step(&mut store).unwrap();
        assert_eq!(store.value(id), before.as_slice());
    }

    #[test]
    fn binding_twice_reuses_the_node() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_filled("p", &[2], 1.5);
        let mut g = Graph::new();
        let a = store.bind(&mut g, id);
        let b = store.bind(&mut g, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        store.absorb_grads(&g);
        assert_eq!(store.grad(id), &[3.0, 3.0]);
    }
}
