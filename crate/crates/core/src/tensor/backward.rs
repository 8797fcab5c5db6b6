use super::graph::{rms_inv, sigmoid, Graph, Node, Op, Var};
use super::Real;
use crate::error::{Error, Result};

struct Grads<'a, T: Real> {
    nodes: &'a [Node<T>],
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<'_, T> {
    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add(&mut self, v: Var, g: Vec<T>) {
        match &mut self.slots[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    /// Adds `g` into the `[outer, start..start + len, inner]` window of a
    /// `[outer, extent, inner]` gradient without touching the rest.
    fn add_window(&mut self, v: Var, (outer, extent, inner): (usize, usize, usize), start: usize, len: usize, g: &[T]) {
        if !self.wants(v) {
            return;
        }
        let acc = self.slots[v.0].get_or_insert_with(|| vec![T::zero(); outer * extent * inner]);
        for o in 0..outer {
            let dst = (o * extent + start) * inner;
            let src = o * len * inner;
            for (a, &b) in acc[dst..dst + len * inner].iter_mut().zip(&g[src..src + len * inner]) {
                *a = *a + b;
            }
        }
    }

    fn add_with(&mut self, v: Var, f: impl FnOnce() -> Vec<T>) {
        if self.wants(v) {
            let g = f();
            self.add(v, g);
        }
    }
}

/// Sums a gradient of lhs shape down to a (suffix-shaped) rhs.
fn reduce_to<T: Real>(g: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n];
    for (i, &x) in g.iter().enumerate() {
        out[i % n] = out[i % n] + x;
    }
    out
}

impl<T: Real> Graph<T> {
    /// Backpropagates from a scalar `loss`, accumulating into leaf gradients.
    /// Calling it again without [`Graph::zero_grad`] adds to the existing values.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut leaf_out: Vec<(usize, Vec<T>)> = Vec::new();
        {
            let nodes = &self.nodes;
            let mut grads = Grads { nodes, slots: vec![None; loss.0 + 1] };
            grads.slots[loss.0] = Some(vec![T::one()]);
            for i in (0..=loss.0).rev() {
                let Some(g) = grads.slots[i].take() else { continue };
                let node = &nodes[i];
                if !node.requires_grad {
                    continue;
                }
                propagate(node, i, g, &mut grads, &mut leaf_out);
            }
        }
        for (i, g) in leaf_out {
            match self.leaf_grads.get_mut(&i) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                None => {
                    self.leaf_grads.insert(i, g);
                }
            }
        }
        Ok(())
    }
}

fn propagate<T: Real>(node: &Node<T>, index: usize, g: Vec<T>, grads: &mut Grads<'_, T>, leaves: &mut Vec<(usize, Vec<T>)>) {
    let nodes = grads.nodes;
    let val = |v: Var| -> &[T] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => leaves.push((index, g)),
        &Op::MatMul { a, b, m, k, n } => {
            if grads.wants(a) {
                // dA = dC · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, &g, n as isize, 1, val(b), 1, n as isize, T::zero(), &mut da, k as isize, 1);
                grads.add(a, da);
            }
            if grads.wants(b) {
                // dB = Aᵀ · dC
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, val(a), 1, k as isize, &g, n as isize, 1, T::zero(), &mut db, n as isize, 1);
                grads.add(b, db);
            }
        }
        &Op::Add { a, b } => {
            let nb = val(b).len();
            grads.add_with(b, || reduce_to(&g, nb));
            grads.add_with(a, || g);
        }
        &Op::Sub { a, b } => {
            let nb = val(b).len();
            grads.add_with(b, || reduce_to(&g, nb).into_iter().map(|x| -x).collect());
            grads.add_with(a, || g);
        }
        &Op::Mul { a, b } => {
            let (va, vb) = (val(a), val(b));
            let nb = vb.len();
            grads.add_with(b, || {
                let prod: Vec<T> = g.iter().zip(va).map(|(&x, &y)| x * y).collect();
                reduce_to(&prod, nb)
            });
            grads.add_with(a, || g.iter().enumerate().map(|(i, &x)| x * vb[i % nb]).collect());
        }
        &Op::Scale { a, c } => grads.add_with(a, || g.iter().map(|&x| x * c).collect()),
        &Op::AddScalar { a } => grads.add_with(a, || g),
        &Op::Exp(a) => grads.add_with(a, || g.iter().zip(node.value.iter()).map(|(&x, &y)| x * y).collect()),
        &Op::Log(a) => grads.add_with(a, || g.iter().zip(val(a)).map(|(&x, &y)| x / y).collect()),
        &Op::Sigmoid(a) => grads.add_with(a, || g.iter().zip(node.value.iter()).map(|(&x, &s)| x * s * (T::one() - s)).collect()),
        &Op::Silu(a) => grads.add_with(a, || {
            g.iter()
                .zip(val(a))
                .map(|(&x, &u)| {
                    let s = sigmoid(u);
                    x * s * (T::one() + u * (T::one() - s))
                })
                .collect()
        }),
        &Op::Softplus(a) => grads.add_with(a, || g.iter().zip(val(a)).map(|(&x, &u)| x * sigmoid(u)).collect()),
        &Op::Tanh(a) => grads.add_with(a, || g.iter().zip(node.value.iter()).map(|(&x, &t)| x * (T::one() - t * t)).collect()),
        &Op::ClampMin { a, c } => grads.add_with(a, || g.iter().zip(val(a)).map(|(&x, &u)| if u > c { x } else { T::zero() }).collect()),
        &Op::Sum(a) => grads.add_with(a, || vec![g[0]; val(a).len()]),
        &Op::Mean(a) => {
            let n = val(a).len();
            grads.add_with(a, || vec![g[0] / T::lit(n.max(1) as f64); n]);
        }
        &Op::SumLast { a, cols } => grads.add_with(a, || g.iter().flat_map(|&x| std::iter::repeat_n(x, cols)).collect()),
        Op::MaxLast { a, cols, argmax } => grads.add_with(*a, || {
            let mut d = vec![T::zero(); g.len() * cols];
            for (r, (&x, &i)) in g.iter().zip(argmax).enumerate() {
                d[r * cols + i] = x;
            }
            d
        }),
        &Op::Softmax { a, cols } => grads.add_with(a, || {
            let mut d = Vec::with_capacity(g.len());
            for (gr, sr) in g.chunks(cols).zip(node.value.chunks(cols)) {
                let dot: T = gr.iter().zip(sr).map(|(&x, &s)| x * s).sum();
                d.extend(gr.iter().zip(sr).map(|(&x, &s)| s * (x - dot)));
            }
            d
        }),
        &Op::LogSoftmax { a, cols } => grads.add_with(a, || {
            let mut d = Vec::with_capacity(g.len());
            for (gr, lr) in g.chunks(cols).zip(node.value.chunks(cols)) {
                let total: T = gr.iter().copied().sum();
                d.extend(gr.iter().zip(lr).map(|(&x, &l)| x - l.exp() * total));
            }
            d
        }),
        Op::CrossEntropy { logits, cols, targets, weights } => grads.add_with(*logits, || {
            let cols = *cols;
            let mut d = val(*logits).to_vec();
            for (r, (&t, &w)) in d.chunks_mut(cols).zip(targets.iter().zip(weights)) {
                if w == T::zero() {
                    r.iter_mut().for_each(|x| *x = T::zero());
                    continue;
                }
                super::graph::softmax_in_place(r);
                r[t] = r[t] - T::one();
                r.iter_mut().for_each(|x| *x = *x * w * g[0]);
            }
            d
        }),
        Op::Concat { parts, axis_lens, outer, inner } => {
            let total: usize = axis_lens.iter().sum();
            let mut offset = 0;
            for (&p, &len) in parts.iter().zip(axis_lens) {
                if grads.wants(p) {
                    let mut d = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        d.extend_from_slice(&g[base..base + len * inner]);
                    }
                    grads.add(p, d);
                }
                offset += len;
            }
        }
        &Op::Slice { a, outer, extent, inner, start, len } => grads.add_window(a, (outer, extent, inner), start, len, &g),
        &Op::Reshape(a) => grads.add_with(a, || g),
        &Op::RmsNorm { a, gain, cols, eps } => {
            let (x, w) = (val(a), val(gain));
            let n = T::lit(cols as f64);
            if grads.wants(gain) {
                let mut dg = vec![T::zero(); cols];
                for (xr, gr) in x.chunks(cols).zip(g.chunks(cols)) {
                    let inv = rms_inv(xr, eps);
                    for j in 0..cols {
                        dg[j] = dg[j] + gr[j] * xr[j] * inv;
                    }
                }
                grads.add(gain, dg);
            }
            grads.add_with(a, || {
                let mut dx = Vec::with_capacity(x.len());
                for (xr, gr) in x.chunks(cols).zip(g.chunks(cols)) {
                    let inv = rms_inv(xr, eps);
                    let dot: T = (0..cols).map(|j| gr[j] * w[j] * xr[j]).sum();
                    let c = inv * inv * inv * dot / n;
                    dx.extend((0..cols).map(|j| gr[j] * w[j] * inv - xr[j] * c));
                }
                dx
            });
        }
        Op::Embedding { table, ids, dim } => grads.add_with(*table, || {
            let dim = *dim;
            let mut d = vec![T::zero(); val(*table).len()];
            for (r, &i) in ids.iter().enumerate() {
                for j in 0..dim {
                    d[i * dim + j] = d[i * dim + j] + g[r * dim + j];
                }
            }
            d
        }),
        &Op::CumProd { a, outer, extent, inner } => grads.add_with(a, || {
            // dx_j = (prod_{m<j} x_m) * Q_j with Q_j = dy_j + x_{j+1} Q_{j+1}; exact when x contains zeros.
            let x = val(a);
            let mut d = vec![T::zero(); x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |k: usize| (o * extent + k) * inner + i;
                    let mut q = T::zero();
                    let mut qs = vec![T::zero(); extent];
                    for k in (0..extent).rev() {
                        q = g[at(k)] + if k + 1 < extent { x[at(k + 1)] * q } else { T::zero() };
                        qs[k] = q;
                    }
                    let mut prefix = T::one();
                    for (k, &qk) in qs.iter().enumerate() {
                        d[at(k)] = prefix * qk;
                        prefix = prefix * x[at(k)];
                    }
                }
            }
            d
        }),
        Op::Fused { inputs, op } => {
            let ins: Vec<&[T]> = inputs.iter().map(|&v| val(v)).collect();
            let outs = op.backward(&ins, &node.value, &g);
            for (&v, d) in inputs.iter().zip(outs) {
                if let Some(d) = d {
                    if grads.wants(v) {
                        grads.add(v, d);
                    }
                }
            }
        }
    }
}
