//! Discrete latent autoencoder: observations to `K × C` one-hot codes and back.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Mlp, ParamStore};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSpec {
    pub categories: usize,
    pub classes: usize,
}

impl LatentSpec {
    pub fn width(&self) -> usize {
        self.categories * self.classes
    }
}

/// A batch of codes: one-hot rows plus the logits they were drawn from.
#[derive(Clone, Debug)]
pub struct LatentCode<T> {
    pub spec: LatentSpec,
    /// `[n, K, C]` one-hot.
    pub onehot: Vec<T>,
    /// `[n, K]` class indices.
    pub index: Vec<usize>,
    pub logits: Vec<T>,
}

impl<T: Real> LatentCode<T> {
    pub fn is_valid(&self) -> bool {
        self.onehot
            .chunks(self.spec.classes)
            .all(|row| row.iter().all(|&v| v == T::zero() || v == T::one()) && row.iter().copied().sum::<T>() == T::one())
    }
}

/// Categorical probabilities mixed with `mix` of the uniform distribution.
pub fn unimix<T: Real>(g: &mut Graph<T>, logits: Var, classes: usize, mix: f64) -> Result<Var> {
    let p = g.softmax(logits)?;
    if mix <= 0.0 {
        return Ok(p);
    }
    let p = g.scale(p, T::lit(1.0 - mix));
    Ok(g.add_scalar(p, T::lit(mix / classes as f64)))
}

/// Draws one class per row of `probs` (rows of length `classes`), or takes the
/// lowest-index argmax when `rng` is `None`.
pub fn sample_rows<T: Real, R: Rng>(probs: &[T], classes: usize, rng: Option<&mut R>) -> Vec<usize> {
    match rng {
        Some(rng) => probs
            .chunks(classes)
            .map(|row| {
                let u = rng.random::<f64>() * row.iter().map(|p| p.to_f64().unwrap()).sum::<f64>();
                let mut acc = 0.0;
                for (i, p) in row.iter().enumerate() {
                    acc += p.to_f64().unwrap();
                    if u < acc {
                        return i;
                    }
                }
                classes - 1
            })
            .collect(),
        None => probs
            .chunks(classes)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect(),
    }
}

pub fn one_hot<T: Real>(index: &[usize], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); index.len() * classes];
    for (r, &i) in index.iter().enumerate() {
        out[r * classes + i] = T::one();
    }
    out
}

/// `sample + (probs − sg(probs))`: the forward value is exactly `sample`, the
/// gradient is that of `probs`.
pub fn straight_through<T: Real>(g: &mut Graph<T>, probs: Var, sample: Var) -> Result<Var> {
    let frozen = g.detach(probs);
    let delta = g.sub(probs, frozen)?;
    g.add(sample, delta)
}

/// Output of [`Codec::encode`].
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[n, K, C]`.
    pub logits: Var,
    /// Unimix probabilities, `[n, K, C]`.
    pub probs: Var,
    /// Straight-through code, `[n, K·C]`.
    pub z: Var,
    pub index: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Codec {
    pub spec: LatentSpec,
    pub obs_dim: usize,
    pub unimix: f64,
    pub encoder: Mlp,
    pub decoder: Mlp,
}

impl Codec {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        obs_dim: usize,
        spec: LatentSpec,
        hidden: usize,
        layers: usize,
        unimix: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = Mlp::new(store, &format!("{name}.enc"), obs_dim, hidden, layers, spec.width(), rng);
        let decoder = Mlp::new(store, &format!("{name}.dec"), spec.width(), hidden, layers, obs_dim, rng);
        Codec { spec, obs_dim, unimix, encoder, decoder }
    }

    /// `obs: [n, obs_dim]` with values in `[0, 1]`. Samples when `rng` is given,
    /// otherwise takes the argmax.
    pub fn encode<T: Real, R: Rng>(&self, g: &mut Graph<T>, store: &ParamStore<T>, obs: Var, rng: Option<&mut R>) -> Result<Encoded> {
        let s = g.shape(obs).to_vec();
        if s.len() != 2 || s[1] != self.obs_dim {
            return Err(Error::shape("encode", format!("observation batch {s:?}, expected [n, {}]", self.obs_dim)));
        }
        let n = s[0];
        let (k, c) = (self.spec.categories, self.spec.classes);
        let flat = self.encoder.forward(g, store, obs)?;
        let logits = g.reshape(flat, vec![n, k, c])?;
        let probs = unimix(g, logits, c, self.unimix)?;
        let index = sample_rows(g.value(probs), c, rng);
        let sample = g.constant_from(vec![n, k, c], one_hot(&index, c))?;
        let z = straight_through(g, probs, sample)?;
        let z = g.reshape(z, vec![n, k * c])?;
        Ok(Encoded { logits, probs, z, index })
    }

    /// `z: [n, K·C] -> [n, obs_dim]`.
    pub fn decode<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var) -> Result<Var> {
        let s = g.shape(z);
        if s.len() != 2 || s[1] != self.spec.width() {
            return Err(Error::Latent(format!("code batch {s:?}, expected [n, {}]", self.spec.width())));
        }
        self.decoder.forward(g, store, z)
    }

    /// Eval-mode code for a batch of observations.
    pub fn code<T: Real>(&self, store: &ParamStore<T>, obs: &[T]) -> Result<LatentCode<T>> {
        let n = obs.len() / self.obs_dim;
        let mut g = Graph::inference();
        let o = g.constant_from(vec![n, self.obs_dim], obs.to_vec())?;
        let e = self.encode::<T, rand_chacha::ChaCha8Rng>(&mut g, store, o, None)?;
        Ok(LatentCode { spec: self.spec, onehot: one_hot(&e.index, self.spec.classes), index: e.index, logits: g.value(e.logits).to_vec() })
    }
}
