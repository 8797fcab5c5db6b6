use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::Arc;

use super::{numel, split_axis, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// An operation with a hand-written vector-Jacobian product, recorded as a
/// single tape node. Used for kernels (such as the SSD scan) whose
/// decomposition into primitive ops would be prohibitively large.
pub trait FusedOp<T: Real>: Debug {
    fn name(&self) -> &'static str;

    /// Returns one gradient per input (`None` when the input receives none).
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

#[derive(Debug)]
pub(crate) enum Op<T: Real> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    AddScalar { a: Var },
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Silu(Var),
    Softplus(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    SumLast { a: Var, cols: usize },
    MaxLast { a: Var, cols: usize, argmax: Vec<usize> },
    Softmax { a: Var, cols: usize },
    LogSoftmax { a: Var, cols: usize },
    CrossEntropy { logits: Var, cols: usize, targets: Vec<usize>, weights: Vec<T> },
    Concat { parts: Vec<Var>, axis_lens: Vec<usize>, outer: usize, inner: usize },
    Slice { a: Var, outer: usize, extent: usize, inner: usize, start: usize, len: usize },
    Reshape(Var),
    RmsNorm { a: Var, gain: Var, cols: usize, eps: T },
    Embedding { table: Var, ids: Vec<usize>, dim: usize },
    CumProd { a: Var, outer: usize, extent: usize, inner: usize },
    ClampMin { a: Var, c: T },
    Fused { inputs: Vec<Var>, op: Box<dyn FusedOp<T>> },
}

#[derive(Debug)]
pub(crate) struct Node<T: Real> {
    pub(crate) value: Arc<Vec<T>>,
    pub(crate) shape: Vec<usize>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Recording tape. Values are computed eagerly; gradients on demand.
///
/// A graph built with gradients disabled records nothing that requires a
/// gradient, which makes it a cheap inference context.
#[derive(Debug)]
pub struct Graph<T: Real> {
    pub(crate) nodes: Vec<Node<T>>,
    grad_enabled: bool,
    pub(crate) leaf_grads: HashMap<usize, Vec<T>>,
    params: HashMap<(u64, usize), Var>,
    detached: Vec<Arc<Vec<T>>>,
    replay: Option<Vec<Arc<Vec<T>>>>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    pub fn inference() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Graph { nodes: Vec::new(), grad_enabled, leaf_grads: HashMap::new(), params: HashMap::new(), detached: Vec::new(), replay: None }
    }

    /// A graph whose `detach` calls return, in order, the values recorded by
    /// an earlier graph instead of their live inputs. Finite-difference
    /// checks use this to hold stop-gradient targets fixed while parameters
    /// are perturbed, so the numerical derivative matches the analytic one.
    pub fn replaying(detached: Vec<Arc<Vec<T>>>) -> Self {
        let mut g = Self::new();
        g.replay = Some(detached);
        g
    }

    /// Values produced by every `detach` call so far, in call order.
    pub fn detached_values(&self) -> Vec<Arc<Vec<T>>> {
        self.detached.clone()
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn value_arc(&self, v: Var) -> Arc<Vec<T>> {
        self.nodes[v.0].value.clone()
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor { shape: n.shape.clone(), data: n.value.as_ref().clone() }
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    pub(crate) fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        self.push_arc(Arc::new(value), shape, op, inputs)
    }

    fn push_arc(&mut self, value: Arc<Vec<T>>, shape: Vec<usize>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    // ----- leaves -----

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: Arc::new(t.data), shape: t.shape, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    /// A leaf that receives gradients (when the graph records them).
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.leaf_shared(t.shape, Arc::new(t.data))
    }

    pub(crate) fn leaf_shared(&mut self, shape: Vec<usize>, data: Arc<Vec<T>>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: data, shape, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter owned by a store; repeated binds return the same node.
    pub(crate) fn bind_param(&mut self, store_uid: u64, idx: usize, shape: &[usize], data: &Arc<Vec<T>>) -> Var {
        if let Some(v) = self.params.get(&(store_uid, idx)) {
            return *v;
        }
        let v = self.leaf_shared(shape.to_vec(), data.clone());
        self.params.insert((store_uid, idx), v);
        v
    }

    pub(crate) fn param_var(&self, store_uid: u64, idx: usize) -> Option<Var> {
        self.params.get(&(store_uid, idx)).copied()
    }

    /// Stop-gradient: same value, no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = match &self.replay {
            Some(rec) if self.detached.len() < rec.len() => rec[self.detached.len()].clone(),
            _ => self.nodes[a.0].value.clone(),
        };
        self.detached.push(value.clone());
        let shape = self.nodes[a.0].shape.clone();
        self.nodes.push(Node { value, shape, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a fused kernel whose forward value was computed by the caller.
    pub fn fused(&mut self, inputs: &[Var], shape: Vec<usize>, value: Vec<T>, op: Box<dyn FusedOp<T>>) -> Result<Var> {
        if value.len() != numel(&shape) {
            return Err(Error::shape(op.name(), format!("output {shape:?} vs {} values", value.len())));
        }
        Ok(self.push(value, shape, Op::Fused { inputs: inputs.to_vec(), op }, inputs))
    }

    // ----- linear algebra -----

    /// `[..., m, k] x [k, n] -> [..., m, n]`; leading axes of `a` are folded into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let out = super::matmul_into(self.value(a), self.value(b), m, k, n);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        Ok(self.push(out, shape, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    // ----- elementwise -----

    fn check_suffix(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape(op, format!("{sa:?} with {sb:?} (rhs must be a suffix of lhs)")));
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Vec<T>> {
        self.check_suffix(op, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.len();
        Ok(va.iter().enumerate().map(|(i, &x)| f(x, vb[i % nb])).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Mul { a, b }, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(out, shape, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    /// `max(c, a)` elementwise. The gradient reaches `a` only where `a > c`;
    /// ties go to the constant.
    pub fn clamp_min(&mut self, a: Var, c: T) -> Var {
        self.unary(a, |x| if x > c { x } else { c }, Op::ClampMin { a, c })
    }

    // ----- reductions -----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![s], vec![], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::lit(v.len().max(1) as f64);
        self.push(vec![s], vec![], Op::Mean(a), &[a])
    }

    fn last_dim(&self, op: &'static str, a: Var) -> Result<(usize, Vec<usize>)> {
        let s = self.shape(a);
        match s.last() {
            Some(&c) if c > 0 => Ok((c, s[..s.len() - 1].to_vec())),
            _ => Err(Error::shape(op, format!("needs a non-empty last axis, got {s:?}"))),
        }
    }

    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let (cols, shape) = self.last_dim("sum_last", a)?;
        let out = self.value(a).chunks(cols).map(|r| r.iter().copied().sum()).collect();
        Ok(self.push(out, shape, Op::SumLast { a, cols }, &[a]))
    }

    /// Max over the last axis; ties resolve to the lowest index.
    pub fn max_last(&mut self, a: Var) -> Result<Var> {
        let (cols, shape) = self.last_dim("max_last", a)?;
        let mut argmax = Vec::new();
        let mut out = Vec::new();
        for r in self.value(a).chunks(cols) {
            let (i, m) = argmax_first(r);
            argmax.push(i);
            out.push(m);
        }
        Ok(self.push(out, shape, Op::MaxLast { a, cols, argmax }, &[a]))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (cols, _) = self.last_dim("softmax", a)?;
        let mut out = self.value(a).to_vec();
        out.chunks_mut(cols).for_each(softmax_in_place);
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::Softmax { a, cols }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (cols, _) = self.last_dim("log_softmax", a)?;
        let mut out = self.value(a).to_vec();
        for r in out.chunks_mut(cols) {
            let lse = log_sum_exp(r);
            r.iter_mut().for_each(|x| *x = *x - lse);
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::LogSoftmax { a, cols }, &[a]))
    }

    /// Weighted categorical cross-entropy summed over rows:
    /// `sum_i w_i * -log softmax(logits_i)[target_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[T]>) -> Result<Var> {
        let (cols, lead) = self.last_dim("cross_entropy", logits)?;
        let rows = numel(&lead);
        if targets.len() != rows || weights.is_some_and(|w| w.len() != rows) {
            return Err(Error::shape("cross_entropy", format!("{rows} rows vs {} targets", targets.len())));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::shape("cross_entropy", format!("target {t} outside {cols} classes")));
        }
        let weights = weights.map(|w| w.to_vec()).unwrap_or_else(|| vec![T::one(); rows]);
        let mut total = T::zero();
        for ((r, &t), &w) in self.value(logits).chunks(cols).zip(targets).zip(&weights) {
            if w != T::zero() {
                total = total + w * (log_sum_exp(r) - r[t]);
            }
        }
        let op = Op::CrossEntropy { logits, cols, targets: targets.to_vec(), weights };
        Ok(self.push(vec![total], vec![], op, &[logits]))
    }

    // ----- structure -----

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shape(a))));
        }
        let value = self.nodes[a.0].value.clone();
        Ok(self.push_arc(value, shape, Op::Reshape(a), &[a]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut axis_lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same {
                return Err(Error::shape("concat", format!("{first:?} with {s:?} along axis {axis}")));
            }
            axis_lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = axis_lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&axis_lens) {
                let v = self.value(p);
                out.extend_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        Ok(self.push(out, shape, Op::Concat { parts: parts.to_vec(), axis_lens, outer, inner }, parts))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", format!("[{start}..{}] on axis {axis} of {s:?}", start + len)));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let v = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&v[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.push(out, shape, Op::Slice { a, outer, extent, inner, start, len }, &[a]))
    }

    /// `x / sqrt(mean(x^2) + eps) * gain` over the last axis.
    pub fn rms_norm(&mut self, a: Var, gain: Var, eps: T) -> Result<Var> {
        let (cols, _) = self.last_dim("rms_norm", a)?;
        if self.shape(gain) != [cols] {
            return Err(Error::shape("rms_norm", format!("gain {:?} for width {cols}", self.shape(gain))));
        }
        let g = self.value(gain);
        let mut out = Vec::with_capacity(self.value(a).len());
        for r in self.value(a).chunks(cols) {
            let inv = rms_inv(r, eps);
            out.extend(r.iter().zip(g).map(|(&x, &gi)| x * inv * gi));
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Op::RmsNorm { a, gain, cols, eps }, &[a, gain]))
    }

    /// Rows of `table: [vocab, dim]` gathered by `ids`; output `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("embedding", format!("table must be 2-D, got {s:?}")));
        }
        let (vocab, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding", format!("id {bad} outside vocabulary {vocab}")));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&t[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(out, vec![ids.len(), dim], Op::Embedding { table, ids: ids.to_vec(), dim }, &[table]))
    }

    /// Inclusive cumulative product along `axis`.
    pub fn cumprod(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(Error::shape("cumprod", format!("axis {axis} for {s:?}")));
        }
        let (outer, extent, inner) = split_axis(&s, axis);
        let mut out = self.value(a).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                for k in 1..extent {
                    let cur = (o * extent + k) * inner + i;
                    out[cur] = out[cur] * out[cur - inner];
                }
            }
        }
        Ok(self.push(out, s, Op::CumProd { a, outer, extent, inner }, &[a]))
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

// ----- scalar helpers shared with the kernels -----

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
    }
}

pub(crate) fn rms_inv<T: Real>(r: &[T], eps: T) -> T {
    let ms = r.iter().map(|&x| x * x).sum::<T>() / T::lit(r.len() as f64);
    T::one() / (ms + eps).sqrt()
}

pub(crate) fn argmax_first<T: Real>(r: &[T]) -> (usize, T) {
    let mut best = 0;
    for (i, &x) in r.iter().enumerate() {
        if x > r[best] {
            best = i;
        }
    }
    (best, r[best])
}

pub(crate) fn log_sum_exp<T: Real>(r: &[T]) -> T {
    let m = r.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + r.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(r: &mut [T]) {
    let m = r.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for x in r.iter_mut() {
        *x = (*x - m).exp();
        s = s + *x;
    }
    r.iter_mut().for_each(|x| *x = *x / s);
}
