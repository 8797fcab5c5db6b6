use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, ParamId, ParamStore, RMS_EPS};
use crate::tensor::{Graph, Real, Var};

/// Recurrent reference block with the same residual scaffold as
/// [`super::SsdLayer`]: RMSNorm, a GRU over time, output projection.
#[derive(Clone, Debug)]
pub struct GruLayer {
    pub d: usize,
    pub hidden: usize,
    norm: ParamId,
    input: Linear,
    recur: Linear,
    out_proj: Linear,
}

impl GruLayer {
    /// Largest hidden width whose parameter count does not exceed `budget`.
    pub fn hidden_for_budget(d: usize, budget: usize) -> usize {
        let count = |hd: usize| d + (d + 1) * 3 * hd + 3 * hd * hd + (hd + 1) * d;
        let mut hd = 1;
        while count(hd + 1) <= budget {
            hd += 1;
        }
        hd
    }

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, hidden: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        let norm = store.add_filled(format!("{name}.norm"), &[d], 1.0);
        let input = Linear::new(store, &format!("{name}.in"), d, 3 * hidden, true, rng);
        let recur = Linear::new(store, &format!("{name}.rec"), hidden, 3 * hidden, false, rng);
        let out_proj = if zero_out {
            Linear::zeroed(store, &format!("{name}.out"), hidden, d)
        } else {
            Linear::new(store, &format!("{name}.out"), hidden, d, true, rng)
        };
        GruLayer { d, hidden, norm, input, recur, out_proj }
    }

    pub fn state_len(&self, batch: usize) -> usize {
        batch * self.hidden
    }

    /// `x: [b, l, d]`; `h0: [b, hidden]`.
    pub fn forward<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h0: Option<&[T]>,
        drop: Option<(f64, &mut R)>,
    ) -> Result<(Var, Vec<T>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.d {
            return Err(Error::shape("gru_block", format!("input {s:?}, expected [b, l, {}]", self.d)));
        }
        let (b, l, hd) = (s[0], s[1], self.hidden);
        let gain = store.bind(g, self.norm);
        let xn = g.rms_norm(x, gain, T::lit(RMS_EPS))?;
        let xi = self.input.forward(g, store, xn)?;
        let mut h = g.constant_from(vec![b, hd], h0.map_or_else(|| vec![T::zero(); b * hd], |v| v.to_vec()))?;
        let mut outs = Vec::with_capacity(l);
        for t in 0..l {
            let xt = g.slice(xi, 1, t, 1)?;
            let xt = g.reshape(xt, vec![b, 3 * hd])?;
            let hr = self.recur.forward(g, store, h)?;
            let (xz, xr, xc) = (g.slice(xt, 1, 0, hd)?, g.slice(xt, 1, hd, hd)?, g.slice(xt, 1, 2 * hd, hd)?);
            let (hz, hrr) = (g.slice(hr, 1, 0, hd)?, g.slice(hr, 1, hd, hd)?);
            let zt = g.add(xz, hz)?;
            let zt = g.sigmoid(zt);
            let rt = g.add(xr, hrr)?;
            let rt = g.sigmoid(rt);
            // Candidate uses the reset-gated state through the third block of the recurrent weights.
            let rh = g.mul(rt, h)?;
            let w = store.bind(g, self.recur.w);
            let wc = g.slice(w, 1, 2 * hd, hd)?;
            let hc = g.matmul(rh, wc)?;
            let c = g.add(xc, hc)?;
            let c = g.tanh(c);
            // h = h + z ⊙ (c − h)
            let diff = g.sub(c, h)?;
            let upd = g.mul(zt, diff)?;
            h = g.add(h, upd)?;
            outs.push(g.reshape(h, vec![b, 1, hd])?);
        }
        let state = g.value(h).to_vec();
        let seq = if outs.len() == 1 { outs[0] } else { g.concat(&outs, 1)? };
        let mut y = self.out_proj.forward(g, store, seq)?;
        if let Some((rate, rng)) = drop {
            y = dropout(g, y, rate, rng)?;
        }
        Ok((g.add(x, y)?, state))
    }
}
