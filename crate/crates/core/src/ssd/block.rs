use rand::Rng;

use super::{scan, ScanMode};
use crate::error::{Error, Result};
use crate::nn::{dropout, Linear, ParamId, ParamStore, RMS_EPS};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsdConfig {
    pub d: usize,
    pub head_dim: usize,
    pub state: usize,
    pub chunk: usize,
}

impl Default for SsdConfig {
    fn default() -> Self {
        SsdConfig { d: 128, head_dim: 32, state: 16, chunk: 16 }
    }
}

impl SsdConfig {
    pub fn heads(&self) -> usize {
        self.d / self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.d.is_multiple_of(self.head_dim) {
            return Err(Error::Config(format!("d={} is not a multiple of head_dim={}", self.d, self.head_dim)));
        }
        if self.state == 0 || self.chunk == 0 {
            return Err(Error::Config("state size and chunk size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Pre-norm residual block: RMSNorm, input projection to `(x, z, B, C, Δ)`,
/// multi-head scan over `SiLU(x)`, gate by `SiLU(z)`, output projection.
#[derive(Clone, Debug)]
pub struct SsdLayer {
    pub cfg: SsdConfig,
    norm: ParamId,
    in_proj: Linear,
    /// `log α` per head; the decay is `a = exp(-Δ · α)`.
    a_log: ParamId,
    out_proj: Linear,
}

impl SsdLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: SsdConfig, zero_out: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, n, h) = (cfg.d, cfg.state, cfg.heads());
        let norm = store.add_filled(format!("{name}.norm"), &[d], 1.0);
        let in_proj = Linear::new(store, &format!("{name}.in"), d, 2 * d + 2 * n + h, true, rng);
        // Δ bias so that softplus(bias) spans roughly [1e-3, 1e-1] across heads.
        let bias = store.value_mut(in_proj.b.expect("bias"));
        for k in 0..h {
            let dt = (1e-3f64.ln() + (1e-1f64.ln() - 1e-3f64.ln()) * k as f64 / h.max(2).saturating_sub(1) as f64).exp();
            bias[2 * d + 2 * n + k] = T::lit(dt.exp_m1().ln());
        }
        let a_log =
            store.add(format!("{name}.a_log"), crate::tensor::Tensor::from_f64(vec![h], &(1..=h).map(|k| (k as f64).ln()).collect::<Vec<_>>())?);
        let out_proj =
            if zero_out { Linear::zeroed(store, &format!("{name}.out"), d, d) } else { Linear::new(store, &format!("{name}.out"), d, d, true, rng) };
        Ok(SsdLayer { cfg, norm, in_proj, a_log, out_proj })
    }

    pub fn state_len(&self, batch: usize) -> usize {
        batch * self.cfg.d * self.cfg.state
    }

    /// `x: [b, l, d]`. Returns the block output and the final scan state.
    pub fn forward<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h0: Option<&[T]>,
        mode: ScanMode,
        drop: Option<(f64, &mut R)>,
    ) -> Result<(Var, Vec<T>)> {
        let s = g.shape(x).to_vec();
        let (d, n, h, p) = (self.cfg.d, self.cfg.state, self.cfg.heads(), self.cfg.head_dim);
        if s.len() != 3 || s[2] != d {
            return Err(Error::shape("ssd_block", format!("input {s:?}, expected [b, l, {d}]")));
        }
        let (b, l) = (s[0], s[1]);
        let gain = store.bind(g, self.norm);
        let xn = g.rms_norm(x, gain, T::lit(RMS_EPS))?;
        let proj = self.in_proj.forward(g, store, xn)?;
        let xs = g.slice(proj, 2, 0, d)?;
        let z = g.slice(proj, 2, d, d)?;
        let bm = g.slice(proj, 2, 2 * d, n)?;
        let cm = g.slice(proj, 2, 2 * d + n, n)?;
        let dt = g.slice(proj, 2, 2 * d + 2 * n, h)?;
        let xs = g.silu(xs);
        let delta = g.softplus(dt);
        let a_log = store.bind(g, self.a_log);
        let alpha = g.exp(a_log);
        let rate = g.mul(delta, alpha)?;
        let log_a = g.neg(rate);
        let xh = g.reshape(xs, vec![b, l, h, p])?;
        let (y, state) = scan(g, xh, log_a, bm, cm, h0, mode)?;
        let y = g.reshape(y, vec![b, l, d])?;
        let gate = g.silu(z);
        let y = g.mul(y, gate)?;
        let mut y = self.out_proj.forward(g, store, y)?;
        if let Some((rate, rng)) = drop {
            y = dropout(g, y, rate, rng)?;
        }
        Ok((g.add(x, y)?, state))
    }
}
