use rand::Rng;

use super::{GruLayer, ScanMode, SsdConfig, SsdLayer};
use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore, RMS_EPS};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    Ssd,
    Gru,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Ssd(SsdLayer),
    Gru(GruLayer),
}

/// Carried recurrent state: one buffer per layer plus the number of steps
/// consumed so far. Its size does not depend on sequence length.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceState<T> {
    pub batch: usize,
    pub layers: Vec<Vec<T>>,
    pub position: usize,
}

impl<T: Real> SequenceState<T> {
    pub fn num_values(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }

    /// Keeps only the batch rows in `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|s| {
                let w = s.len() / self.batch;
                rows.iter().flat_map(|&r| s[r * w..(r + 1) * w].iter().copied()).collect()
            })
            .collect();
        SequenceState { batch: rows.len(), layers, position: self.position }
    }
}

/// A stack of residual sequence layers followed by a final RMSNorm.
#[derive(Clone, Debug)]
pub struct SequenceModel {
    pub backbone: Backbone,
    pub cfg: SsdConfig,
    pub mode: ScanMode,
    pub dropout: f64,
    pub layers: Vec<Layer>,
    norm: ParamId,
}

impl SequenceModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, backbone: Backbone, cfg: SsdConfig, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            let lname = format!("{name}.l{i}");
            layers.push(match backbone {
                Backbone::Ssd => Layer::Ssd(SsdLayer::new(store, &lname, cfg, false, rng)?),
                Backbone::Gru => {
                    let hidden = GruLayer::hidden_for_budget(cfg.d, ssd_layer_params(cfg));
                    Layer::Gru(GruLayer::new(store, &lname, cfg.d, hidden, false, rng))
                }
            });
        }
        let norm = store.add_filled(format!("{name}.norm"), &[cfg.d], 1.0);
        let mode = ScanMode::Chunked(cfg.chunk);
        Ok(SequenceModel { backbone, cfg, mode, dropout: 0.1, layers, norm })
    }

    pub fn zero_state<T: Real>(&self, batch: usize) -> SequenceState<T> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Ssd(s) => vec![T::zero(); s.state_len(batch)],
                Layer::Gru(r) => vec![T::zero(); r.state_len(batch)],
            })
            .collect();
        SequenceState { batch, layers, position: 0 }
    }

    /// `x: [b, l, d] -> [b, l, d]`, starting from `state` (zero when absent).
    /// Dropout is applied when an rng is supplied.
    pub fn forward<T: Real, R: Rng>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        state: Option<&SequenceState<T>>,
        mut rng: Option<&mut R>,
    ) -> Result<(Var, SequenceState<T>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::shape("sequence_model", format!("input {s:?}, expected [b, l, d]")));
        }
        if let Some(st) = state {
            if st.batch != s[0] || st.layers.len() != self.layers.len() {
                return Err(Error::shape("sequence_model", format!("state for batch {} does not match input {s:?}", st.batch)));
            }
        }
        let mut h = x;
        let mut next = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let h0 = state.map(|st| st.layers[i].as_slice());
            let drop = rng.as_deref_mut().map(|r| (self.dropout, r));
            let (y, st) = match layer {
                Layer::Ssd(b) => b.forward(g, store, h, h0, self.mode, drop)?,
                Layer::Gru(b) => b.forward(g, store, h, h0, drop)?,
            };
            h = y;
            next.push(st);
        }
        let gain = store.bind(g, self.norm);
        let out = g.rms_norm(h, gain, T::lit(RMS_EPS))?;
        let position = state.map_or(0, |st| st.position) + s[1];
        Ok((out, SequenceState { batch: s[0], layers: next, position }))
    }

    /// One recurrent update on `x_t: [b, d]`.
    pub fn step<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, state: &SequenceState<T>) -> Result<(Var, SequenceState<T>)> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.cfg.d {
            return Err(Error::shape("sequence_step", format!("input {s:?}, expected [b, {}]", self.cfg.d)));
        }
        let x3 = g.reshape(x, vec![s[0], 1, s[1]])?;
        let stepper = SequenceModel { mode: ScanMode::Recurrent, ..self.clone() };
        let (y, next) = stepper.forward::<T, rand_chacha::ChaCha8Rng>(g, store, x3, Some(state), None)?;
        Ok((g.reshape(y, s)?, next))
    }
}

/// Parameter count of one SSD layer with configuration `cfg`.
pub fn ssd_layer_params(cfg: SsdConfig) -> usize {
    let (d, n, h) = (cfg.d, cfg.state, cfg.heads());
    let width = 2 * d + 2 * n + h;
    d + (d + 1) * width + h + (d + 1) * d
}
