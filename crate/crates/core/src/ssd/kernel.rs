//! Scalar-decay selective scan in three execution modes.
//!
//! Per head the recurrence is
//!
//! ```text
//!   H_t = a_t · H_{t-1} + x_t B_tᵀ        H ∈ ℝ^{p×n}, a_t = exp(log_a_t) ∈ (0, 1]
//!   y_t = H_t C_t
//! ```
//!
//! which unrolls to `y = M x` with `M = L ∘ C Bᵀ` and
//! `L[j, i] = a_j · … · a_{i+1}` for `j ≥ i` (zero above the diagonal).
//!
//! * [`ScanMode::Recurrent`] runs the recurrence step by step. It keeps the
//!   state every [`CHECKPOINT_EVERY`] steps and the backward pass replays the
//!   steps in between.
//! * [`ScanMode::Quadratic`] materializes `L` and `C Bᵀ` (`l × l` per head).
//! * [`ScanMode::Chunked`] evaluates `q × q` diagonal blocks in quadratic form
//!   and carries the state across chunk boundaries. Only boundary states are
//!   kept; the backward pass recomputes the states inside each chunk.
//!
//! Layouts (row-major): `x, y: [b, l, h, p]`, `log_a: [b, l, h]`,
//! `B, C: [b, l, n]` (shared by all heads), states `[b, h, p, n]`.
//!
//! Decay products are formed from segment sums of `log_a` taken directly
//! over each segment, never as differences of a long prefix sum.

use crate::error::{Error, Result};
use crate::tensor::Real;

/// Upper bound on `l` for the materialized mode.
pub const DEFAULT_QUADRATIC_CAP: usize = 4096;

/// Spacing of the states the recurrent mode keeps for its backward pass.
pub const CHECKPOINT_EVERY: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanMode {
    Recurrent,
    Quadratic,
    Chunked(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub state: usize,
}

impl ScanDims {
    pub fn x_len(&self) -> usize {
        self.batch * self.len * self.heads * self.head_dim
    }
    pub fn a_len(&self) -> usize {
        self.batch * self.len * self.heads
    }
    pub fn bc_len(&self) -> usize {
        self.batch * self.len * self.state
    }
    pub fn state_len(&self) -> usize {
        self.batch * self.heads * self.head_dim * self.state
    }
    fn head_state(&self) -> usize {
        self.head_dim * self.state
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ScanInputs<'a, T> {
    pub x: &'a [T],
    pub log_a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub h0: Option<&'a [T]>,
}

/// Forward residuals needed by the backward pass of each mode.
#[derive(Clone, Debug)]
pub enum Saved<T> {
    None,
    /// State entering each segment of [`CHECKPOINT_EVERY`] steps, `[b, h, segments, p, n]`.
    Checkpoints(Vec<T>),
    /// State entering each chunk, `[b, chunks, h, p, n]`.
    Boundaries {
        q: usize,
        states: Vec<T>,
    },
    /// `L: [b, h, l, l]` and `C Bᵀ: [b, l, l]`.
    Materialized {
        decay: Vec<T>,
        cb: Vec<T>,
    },
}

impl<T> Saved<T> {
    pub fn len(&self) -> usize {
        match self {
            Saved::None => 0,
            Saved::Checkpoints(s) | Saved::Boundaries { states: s, .. } => s.len(),
            Saved::Materialized { decay, cb } => decay.len() + cb.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct ScanOutput<T> {
    pub y: Vec<T>,
    pub state: Vec<T>,
    pub saved: Saved<T>,
}

#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub dx: Vec<T>,
    pub dlog_a: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dh0: Option<Vec<T>>,
}

fn validate<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>) -> Result<()> {
    let checks =
        [("x", inp.x.len(), d.x_len()), ("log_a", inp.log_a.len(), d.a_len()), ("B", inp.b.len(), d.bc_len()), ("C", inp.c.len(), d.bc_len())];
    for (name, got, want) in checks {
        if got != want {
            return Err(Error::shape("ssd_scan", format!("{name} has {got} values, expected {want} for {d:?}")));
        }
    }
    if let Some(h0) = inp.h0 {
        if h0.len() != d.state_len() {
            return Err(Error::shape("ssd_scan", format!("initial state has {} values, expected {}", h0.len(), d.state_len())));
        }
    }
    if d.len == 0 || d.state == 0 || d.head_dim == 0 || d.heads == 0 {
        return Err(Error::shape("ssd_scan", format!("empty extent in {d:?}")));
    }
    let finite = |s: &[T]| s.iter().all(|v| v.is_finite());
    if !finite(inp.x) || !finite(inp.b) || !finite(inp.c) || inp.h0.is_some_and(|h| !finite(h)) {
        return Err(Error::NonFinite("ssd_scan input".into()));
    }
    if inp.log_a.iter().any(|v| v.is_nan() || *v > T::zero()) {
        return Err(Error::NonFinite("ssd_scan decay (log a must be <= 0)".into()));
    }
    Ok(())
}

/// Runs the scan in `mode`. With `save` the residuals for [`scan_backward`] are kept.
pub fn scan<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, mode: ScanMode, save: bool) -> Result<ScanOutput<T>> {
    validate(d, inp)?;
    match mode {
        ScanMode::Recurrent | ScanMode::Chunked(1) => Ok(recurrent(d, inp, save)),
        ScanMode::Chunked(0) => Err(Error::Config("chunk size must be >= 1".into())),
        ScanMode::Chunked(q) => Ok(chunked(d, inp, q, save)),
        ScanMode::Quadratic => {
            if d.len > DEFAULT_QUADRATIC_CAP {
                return Err(Error::MaterializationCap { len: d.len, cap: DEFAULT_QUADRATIC_CAP });
            }
            Ok(quadratic(d, inp, save))
        }
    }
}

/// Vector-Jacobian product of [`scan`] with respect to `x, log_a, B, C` and
/// the initial state. The final state is treated as a non-differentiable output.
pub fn scan_backward<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, saved: &Saved<T>, dy: &[T]) -> ScanGrads<T> {
    match saved {
        Saved::Checkpoints(states) => recurrent_backward(d, inp, states, dy),
        Saved::Boundaries { q, states } => chunked_backward(d, inp, *q, states, dy),
        Saved::Materialized { decay, cb } => quadratic_backward(d, inp, decay, cb, dy),
        Saved::None => panic!("scan_backward called without saved residuals"),
    }
}

#[inline]
fn xi(d: &ScanDims, bi: usize, t: usize, hh: usize) -> usize {
    ((bi * d.len + t) * d.heads + hh) * d.head_dim
}
#[inline]
fn ai(d: &ScanDims, bi: usize, t: usize, hh: usize) -> usize {
    (bi * d.len + t) * d.heads + hh
}
#[inline]
fn bi_(d: &ScanDims, bi: usize, t: usize) -> usize {
    (bi * d.len + t) * d.state
}
#[inline]
fn si(d: &ScanDims, bi: usize, hh: usize) -> usize {
    (bi * d.heads + hh) * d.head_state()
}

/// One recurrence update on a single head state.
#[inline]
fn step_head<T: Real>(h: &mut [T], a: T, x: &[T], b: &[T], c: &[T], y: &mut [T]) {
    let n = b.len();
    for (pi, (&xv, yv)) in x.iter().zip(y.iter_mut()).enumerate() {
        let row = &mut h[pi * n..(pi + 1) * n];
        let mut acc = T::zero();
        for ((hv, &bv), &cv) in row.iter_mut().zip(b).zip(c) {
            *hv = a * *hv + xv * bv;
            acc = acc + *hv * cv;
        }
        *yv = acc;
    }
}

fn recurrent<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, save: bool) -> ScanOutput<T> {
    let hs = d.head_state();
    let mut y = vec![T::zero(); d.x_len()];
    let mut state = inp.h0.map_or_else(|| vec![T::zero(); d.state_len()], |h| h.to_vec());
    let segs = d.len.div_ceil(CHECKPOINT_EVERY);
    let mut states = if save { vec![T::zero(); d.batch * d.heads * segs * hs] } else { Vec::new() };
    for bi in 0..d.batch {
        for hh in 0..d.heads {
            let h = &mut state[si(d, bi, hh)..si(d, bi, hh) + hs];
            for t in 0..d.len {
                if save && t % CHECKPOINT_EVERY == 0 {
                    let so = ((bi * d.heads + hh) * segs + t / CHECKPOINT_EVERY) * hs;
                    states[so..so + hs].copy_from_slice(h);
                }
                let a = inp.log_a[ai(d, bi, t, hh)].exp();
                let xo = xi(d, bi, t, hh);
                let bo = bi_(d, bi, t);
                step_head(h, a, &inp.x[xo..xo + d.head_dim], &inp.b[bo..bo + d.state], &inp.c[bo..bo + d.state], &mut y[xo..xo + d.head_dim]);
            }
        }
    }
    let saved = if save { Saved::Checkpoints(states) } else { Saved::None };
    ScanOutput { y, state, saved }
}

/// Reverse sweep over `t in range` for one `(batch, head)`, given the state
/// at each step (`state_at(t)`) and the state before the range.
#[allow(clippy::too_many_arguments)]
fn reverse_sweep<'s, T: Real>(
    d: &ScanDims,
    inp: &ScanInputs<'_, T>,
    bi: usize,
    hh: usize,
    range: std::ops::Range<usize>,
    state_at: &dyn Fn(usize) -> &'s [T],
    before: &'s [T],
    dy: &[T],
    dh: &mut [T],
    g: &mut ScanGrads<T>,
) {
    let (p, n) = (d.head_dim, d.state);
    for t in range.clone().rev() {
        let xo = xi(d, bi, t, hh);
        let bo = bi_(d, bi, t);
        let (x, b, c) = (&inp.x[xo..xo + p], &inp.b[bo..bo + n], &inp.c[bo..bo + n]);
        let dyt = &dy[xo..xo + p];
        let ht = state_at(t);
        for pi in 0..p {
            let row = &mut dh[pi * n..(pi + 1) * n];
            for ni in 0..n {
                row[ni] = row[ni] + dyt[pi] * c[ni];
                g.dc[bo + ni] = g.dc[bo + ni] + ht[pi * n + ni] * dyt[pi];
            }
        }
        for pi in 0..p {
            let row = &dh[pi * n..(pi + 1) * n];
            let mut acc = T::zero();
            for ni in 0..n {
                acc = acc + row[ni] * b[ni];
                g.db[bo + ni] = g.db[bo + ni] + row[ni] * x[pi];
            }
            g.dx[xo + pi] = acc;
        }
        let prev = if t == range.start { before } else { state_at(t - 1) };
        let a = inp.log_a[ai(d, bi, t, hh)].exp();
        let dot: T = dh.iter().zip(prev).map(|(&u, &v)| u * v).sum();
        g.dlog_a[ai(d, bi, t, hh)] = a * dot;
        dh.iter_mut().for_each(|v| *v = *v * a);
    }
}

fn empty_grads<T: Real>(d: &ScanDims, with_h0: bool) -> ScanGrads<T> {
    ScanGrads {
        dx: vec![T::zero(); d.x_len()],
        dlog_a: vec![T::zero(); d.a_len()],
        db: vec![T::zero(); d.bc_len()],
        dc: vec![T::zero(); d.bc_len()],
        dh0: with_h0.then(|| vec![T::zero(); d.state_len()]),
    }
}

fn recurrent_backward<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, checkpoints: &[T], dy: &[T]) -> ScanGrads<T> {
    let hs = d.head_state();
    let segs = d.len.div_ceil(CHECKPOINT_EVERY);
    let mut g = empty_grads(d, inp.h0.is_some());
    // States inside the current segment, `[steps, p, n]`, and a scratch output.
    let mut seg = vec![T::zero(); CHECKPOINT_EVERY * hs];
    let mut y = vec![T::zero(); d.head_dim];
    for bi in 0..d.batch {
        for hh in 0..d.heads {
            let mut dh = vec![T::zero(); hs];
            for s in (0..segs).rev() {
                let t0 = s * CHECKPOINT_EVERY;
                let t1 = (t0 + CHECKPOINT_EVERY).min(d.len);
                let co = ((bi * d.heads + hh) * segs + s) * hs;
                let before = &checkpoints[co..co + hs];
                let mut h = before.to_vec();
                for t in t0..t1 {
                    let xo = xi(d, bi, t, hh);
                    let bo = bi_(d, bi, t);
                    let a = inp.log_a[ai(d, bi, t, hh)].exp();
                    step_head(&mut h, a, &inp.x[xo..xo + d.head_dim], &inp.b[bo..bo + d.state], &inp.c[bo..bo + d.state], &mut y);
                    seg[(t - t0) * hs..(t - t0 + 1) * hs].copy_from_slice(&h);
                }
                let state_at = |t: usize| &seg[(t - t0) * hs..(t - t0 + 1) * hs];
                reverse_sweep(d, inp, bi, hh, t0..t1, &state_at, before, dy, &mut dh, &mut g);
            }
            if let Some(dh0) = &mut g.dh0 {
                dh0[si(d, bi, hh)..si(d, bi, hh) + hs].copy_from_slice(&dh);
            }
        }
    }
    g
}

/// `L[j, i] = exp(sum_{k=i+1..=j} log_a[k])` for `j >= i`, zero otherwise,
/// over positions `t0..t0+m` of one `(batch, head)`.
fn decay_block<T: Real>(d: &ScanDims, log_a: &[T], bi: usize, hh: usize, t0: usize, m: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for i in 0..m {
        out[i * m + i] = T::one();
        let mut s = T::zero();
        for j in i + 1..m {
            s = s + log_a[ai(d, bi, t0 + j, hh)];
            out[j * m + i] = s.exp();
        }
    }
}

/// `exp(sum_{k=t0..=t0+j} log_a[k])` for each `j < m`: decay from the state entering the block.
fn decay_from_start<T: Real>(d: &ScanDims, log_a: &[T], bi: usize, hh: usize, t0: usize, m: usize) -> Vec<T> {
    let mut s = T::zero();
    (0..m)
        .map(|j| {
            s = s + log_a[ai(d, bi, t0 + j, hh)];
            s.exp()
        })
        .collect()
}

/// `exp(sum_{k=t0+i+1..t0+m} log_a[k])` for each `i < m`: decay to the end of the block.
fn decay_to_end<T: Real>(d: &ScanDims, log_a: &[T], bi: usize, hh: usize, t0: usize, m: usize) -> Vec<T> {
    let mut w = vec![T::zero(); m];
    let mut s = T::zero();
    for i in (0..m).rev() {
        w[i] = s.exp();
        s = s + log_a[ai(d, bi, t0 + i, hh)];
    }
    w
}

/// Output and end state of one block of `m` steps starting at `t0`, given
/// `C Bᵀ` for the block and the state entering it.
#[allow(clippy::too_many_arguments)]
fn block_forward<T: Real>(
    d: &ScanDims,
    inp: &ScanInputs<'_, T>,
    bi: usize,
    hh: usize,
    t0: usize,
    m: usize,
    cb: &[T],
    decay: &mut [T],
    h: &mut [T],
    y: &mut [T],
) {
    let (p, n) = (d.head_dim, d.state);
    let hp = (d.heads * p) as isize;
    decay_block(d, inp.log_a, bi, hh, t0, m, decay);
    let mut mm: Vec<T> = decay.iter().zip(cb).map(|(&l, &g)| l * g).collect();
    let x0 = xi(d, bi, t0, hh);
    // y_blk = M · x_blk
    T::gemm(m, m, p, &mm, m as isize, 1, &inp.x[x0..], hp, 1, T::zero(), &mut y[x0..], hp, 1);
    // y_j += e_j · H C_j
    let e = decay_from_start(d, inp.log_a, bi, hh, t0, m);
    let b0 = bi_(d, bi, t0);
    let mut from_state = vec![T::zero(); m * p];
    T::gemm(m, n, p, &inp.c[b0..], n as isize, 1, h, 1, n as isize, T::zero(), &mut from_state, p as isize, 1);
    for j in 0..m {
        let yo = x0 + j * d.heads * p;
        for pi in 0..p {
            y[yo + pi] = y[yo + pi] + e[j] * from_state[j * p + pi];
        }
    }
    // H_end = e_last · H + Σ_i w_i x_i B_iᵀ
    let w = decay_to_end(d, inp.log_a, bi, hh, t0, m);
    let e_last = e[m - 1];
    h.iter_mut().for_each(|v| *v = *v * e_last);
    mm.resize(m * p, T::zero());
    for i in 0..m {
        let xo = x0 + i * d.heads * p;
        for pi in 0..p {
            mm[i * p + pi] = w[i] * inp.x[xo + pi];
        }
    }
    T::gemm(p, m, n, &mm, 1, p as isize, &inp.b[b0..], n as isize, 1, T::one(), h, n as isize, 1);
}

fn cb_block<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, bi: usize, t0: usize, m: usize) -> Vec<T> {
    let n = d.state;
    let b0 = bi_(d, bi, t0);
    let mut cb = vec![T::zero(); m * m];
    T::gemm(m, n, m, &inp.c[b0..], n as isize, 1, &inp.b[b0..], 1, n as isize, T::zero(), &mut cb, m as isize, 1);
    cb
}

fn chunked<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, q: usize, save: bool) -> ScanOutput<T> {
    let hs = d.head_state();
    let chunks = d.len.div_ceil(q);
    let mut y = vec![T::zero(); d.x_len()];
    let mut state = inp.h0.map_or_else(|| vec![T::zero(); d.state_len()], |h| h.to_vec());
    let mut bounds = if save { vec![T::zero(); d.batch * chunks * d.heads * hs] } else { Vec::new() };
    let mut decay = vec![T::zero(); q * q];
    for bi in 0..d.batch {
        for ch in 0..chunks {
            let t0 = ch * q;
            let m = q.min(d.len - t0);
            let cb = cb_block(d, inp, bi, t0, m);
            for hh in 0..d.heads {
                let h = &mut state[si(d, bi, hh)..si(d, bi, hh) + hs];
                if save {
                    let o = ((bi * chunks + ch) * d.heads + hh) * hs;
                    bounds[o..o + hs].copy_from_slice(h);
                }
                block_forward(d, inp, bi, hh, t0, m, &cb, &mut decay[..m * m], h, &mut y);
            }
        }
    }
    let saved = if save { Saved::Boundaries { q, states: bounds } } else { Saved::None };
    ScanOutput { y, state, saved }
}

fn chunked_backward<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, q: usize, bounds: &[T], dy: &[T]) -> ScanGrads<T> {
    let hs = d.head_state();
    let chunks = d.len.div_ceil(q);
    let mut g = empty_grads(d, inp.h0.is_some());
    let mut local = vec![T::zero(); q * hs];
    let mut scratch_y = vec![T::zero(); d.head_dim];
    for bi in 0..d.batch {
        for hh in 0..d.heads {
            let mut dh = vec![T::zero(); hs];
            for ch in (0..chunks).rev() {
                let t0 = ch * q;
                let m = q.min(d.len - t0);
                let o = ((bi * chunks + ch) * d.heads + hh) * hs;
                let start = &bounds[o..o + hs];
                // Recompute the states inside the chunk.
                let mut h = start.to_vec();
                for j in 0..m {
                    let t = t0 + j;
                    let xo = xi(d, bi, t, hh);
                    let bo = bi_(d, bi, t);
                    let a = inp.log_a[ai(d, bi, t, hh)].exp();
                    step_head(&mut h, a, &inp.x[xo..xo + d.head_dim], &inp.b[bo..bo + d.state], &inp.c[bo..bo + d.state], &mut scratch_y);
                    local[j * hs..(j + 1) * hs].copy_from_slice(&h);
                }
                let state_at = |t: usize| &local[(t - t0) * hs..(t - t0 + 1) * hs];
                reverse_sweep(d, inp, bi, hh, t0..t0 + m, &state_at, start, dy, &mut dh, &mut g);
            }
            if let Some(dh0) = &mut g.dh0 {
                dh0[si(d, bi, hh)..si(d, bi, hh) + hs].copy_from_slice(&dh);
            }
        }
    }
    g
}

fn quadratic<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, save: bool) -> ScanOutput<T> {
    let (l, hs) = (d.len, d.head_state());
    let mut y = vec![T::zero(); d.x_len()];
    let mut state = inp.h0.map_or_else(|| vec![T::zero(); d.state_len()], |h| h.to_vec());
    let mut decay_all = if save { vec![T::zero(); d.batch * d.heads * l * l] } else { Vec::new() };
    let mut cb_all = if save { vec![T::zero(); d.batch * l * l] } else { Vec::new() };
    let mut decay = vec![T::zero(); l * l];
    for bi in 0..d.batch {
        let cb = cb_block(d, inp, bi, 0, l);
        for hh in 0..d.heads {
            let h = &mut state[si(d, bi, hh)..si(d, bi, hh) + hs];
            block_forward(d, inp, bi, hh, 0, l, &cb, &mut decay, h, &mut y);
            if save {
                let o = (bi * d.heads + hh) * l * l;
                decay_all[o..o + l * l].copy_from_slice(&decay);
            }
        }
        if save {
            cb_all[bi * l * l..(bi + 1) * l * l].copy_from_slice(&cb);
        }
    }
    let saved = if save { Saved::Materialized { decay: decay_all, cb: cb_all } } else { Saved::None };
    ScanOutput { y, state, saved }
}

fn quadratic_backward<T: Real>(d: &ScanDims, inp: &ScanInputs<'_, T>, decay_all: &[T], cb_all: &[T], dy: &[T]) -> ScanGrads<T> {
    let (l, p, n, hs) = (d.len, d.head_dim, d.state, d.head_state());
    let hp = (d.heads * p) as isize;
    let mut g = empty_grads(d, inp.h0.is_some());
    let mut dm = vec![T::zero(); l * l];
    for bi in 0..d.batch {
        let cb = &cb_all[bi * l * l..(bi + 1) * l * l];
        let mut dcb = vec![T::zero(); l * l];
        for hh in 0..d.heads {
            let decay = &decay_all[(bi * d.heads + hh) * l * l..(bi * d.heads + hh + 1) * l * l];
            let mm: Vec<T> = decay.iter().zip(cb).map(|(&a, &b)| a * b).collect();
            let x0 = xi(d, bi, 0, hh);
            // dM = dy · xᵀ
            T::gemm(l, p, l, &dy[x0..], hp, 1, &inp.x[x0..], 1, hp, T::zero(), &mut dm, l as isize, 1);
            for j in 0..l {
                for i in j + 1..l {
                    dm[j * l + i] = T::zero();
                }
            }
            // dx = Mᵀ · dy
            T::gemm(l, l, p, &mm, 1, l as isize, &dy[x0..], hp, 1, T::zero(), &mut g.dx[x0..], hp, 1);
            // d log_a_k = Σ_{j >= k} Σ_{i < k} dM[j,i] · M[j,i]
            let mut dla = vec![T::zero(); l];
            for j in 0..l {
                let mut prefix = T::zero();
                for k in 1..=j {
                    prefix = prefix + dm[j * l + k - 1] * mm[j * l + k - 1];
                    dla[k] = dla[k] + prefix;
                }
                for i in 0..=j {
                    dcb[j * l + i] = dcb[j * l + i] + dm[j * l + i] * decay[j * l + i];
                }
            }
            if let Some(h0) = inp.h0 {
                let h = &h0[si(d, bi, hh)..si(d, bi, hh) + hs];
                let e = decay_from_start(d, inp.log_a, bi, hh, 0, l);
                let mut suffix = T::zero();
                let mut per_step = vec![T::zero(); l];
                for j in 0..l {
                    let bo = bi_(d, bi, j);
                    let dyj = &dy[x0 + j * d.heads * p..x0 + j * d.heads * p + p];
                    let c = &inp.c[bo..bo + n];
                    let mut s = T::zero();
                    for pi in 0..p {
                        for ni in 0..n {
                            let hv = h[pi * n + ni];
                            s = s + dyj[pi] * hv * c[ni];
                            g.dc[bo + ni] = g.dc[bo + ni] + e[j] * hv * dyj[pi];
                        }
                    }
                    per_step[j] = s * e[j];
                    if let Some(dh0) = &mut g.dh0 {
                        let dh = &mut dh0[si(d, bi, hh)..si(d, bi, hh) + hs];
                        for pi in 0..p {
                            for ni in 0..n {
                                dh[pi * n + ni] = dh[pi * n + ni] + e[j] * dyj[pi] * c[ni];
                            }
                        }
                    }
                }
                for k in (0..l).rev() {
                    suffix = suffix + per_step[k];
                    dla[k] = dla[k] + suffix;
                }
            }
            for (t, v) in dla.into_iter().enumerate() {
                g.dlog_a[ai(d, bi, t, hh)] = v;
            }
        }
        let b0 = bi_(d, bi, 0);
        // dC += dCB · B ; dB += dCBᵀ · C
        T::gemm(l, l, n, &dcb, l as isize, 1, &inp.b[b0..], n as isize, 1, T::one(), &mut g.dc[b0..], n as isize, 1);
        T::gemm(l, l, n, &dcb, 1, l as isize, &inp.c[b0..], n as isize, 1, T::one(), &mut g.db[b0..], n as isize, 1);
    }
    g
}

/// `y = (CBᵀ masked to j >= i) · x` per head: causal linear attention with no decay.
pub fn causal_linear_attention<T: Real>(d: &ScanDims, x: &[T], b: &[T], c: &[T]) -> Vec<T> {
    let (l, p, n) = (d.len, d.head_dim, d.state);
    let mut y = vec![T::zero(); d.x_len()];
    for bi in 0..d.batch {
        for hh in 0..d.heads {
            for j in 0..l {
                for i in 0..=j {
                    let (cj, bi_v) = (&c[bi_(d, bi, j)..bi_(d, bi, j) + n], &b[bi_(d, bi, i)..bi_(d, bi, i) + n]);
                    let w: T = cj.iter().zip(bi_v).map(|(&u, &v)| u * v).sum();
                    let (yo, xo) = (xi(d, bi, j, hh), xi(d, bi, i, hh));
                    for pi in 0..p {
                        y[yo + pi] = y[yo + pi] + w * x[xo + pi];
                    }
                }
            }
        }
    }
    y
}
