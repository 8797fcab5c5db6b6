//! Token-mode path for symbolic environments: an embedding table in place of
//! the codec, the shared sequence model, and a vocabulary head trained with
//! cross-entropy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridworld::{self, Cell, Frame, GridErrors, CELL_TOKENS, VOCAB};
use crate::nn::{AdamW, Linear, ParamId, ParamStore};
use crate::ssd::{Backbone, ScanMode, SequenceModel, SequenceState, SsdConfig};
use crate::tensor::{Graph, Real, Tensor, Var};

/// One cell grid per frame.
pub type CellFrames = Vec<Vec<Cell>>;

#[derive(Clone, Debug, PartialEq)]
pub struct TokenModelConfig {
    pub vocab: usize,
    pub seq: SsdConfig,
    pub layers: usize,
    pub backbone: Backbone,
    pub mode: ScanMode,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl Default for TokenModelConfig {
    fn default() -> Self {
        TokenModelConfig {
            vocab: VOCAB,
            seq: SsdConfig::default(),
            layers: 2,
            backbone: Backbone::Ssd,
            mode: ScanMode::Chunked(16),
            dropout: 0.1,
            lr: 1e-3,
            weight_decay: 1e-4,
            grad_clip: 100.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TokenModel {
    pub cfg: TokenModelConfig,
    pub seq: SequenceModel,
    embed: ParamId,
    head: Linear,
}

/// Rows of a token batch: `batch` sequences of `len` inputs, each with its
/// next-token target and a loss weight.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub weights: Vec<f64>,
}

impl TokenBatch {
    /// Shifted input/target pairs from sequences of `len + 1` tokens. Only
    /// targets that are grid cells carry loss: actions are random and
    /// unpredictable by construction.
    pub fn from_sequences(seqs: &[Vec<usize>], len: usize) -> Result<Self> {
        if let Some(s) = seqs.iter().find(|s| s.len() < len + 1) {
            return Err(Error::Length(format!("sequence of {} tokens, need {}", s.len(), len + 1)));
        }
        let mut b = TokenBatch { batch: seqs.len(), len, inputs: vec![], targets: vec![], weights: vec![] };
        for s in seqs {
            b.inputs.extend_from_slice(&s[..len]);
            b.targets.extend_from_slice(&s[1..=len]);
        }
        let cells = b.targets.iter().filter(|&&t| t < CELL_TOKENS).count().max(1) as f64;
        b.weights = b.targets.iter().map(|&t| if t < CELL_TOKENS { 1.0 / cells } else { 0.0 }).collect();
        Ok(b)
    }

    /// Random-walk grid sequences of `frames` frames covering `len + 1` tokens.
    pub fn random_grid(batch: usize, len: usize, size: usize, rng: &mut impl Rng) -> Result<Self> {
        let frames = (len + 1).div_ceil(size * size + 1);
        let seqs: Vec<Vec<usize>> = (0..batch).map(|_| gridworld::tokenize(&gridworld::random_trajectory(size, frames, rng))).collect();
        Self::from_sequences(&seqs, len)
    }
}

impl TokenModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: TokenModelConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.vocab == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let d = cfg.seq.d;
        let data = (0..cfg.vocab * d).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        let embed = store.add(format!("{name}.embed"), Tensor::new(vec![cfg.vocab, d], data)?);
        let mut seq = SequenceModel::new(store, &format!("{name}.seq"), cfg.backbone, cfg.seq, cfg.layers, rng)?;
        seq.mode = cfg.mode;
        seq.dropout = cfg.dropout;
        let head = Linear::new(store, &format!("{name}.head"), d, cfg.vocab, true, rng);
        Ok(TokenModel { cfg, seq, embed, head })
    }

    /// Next-token logits `[b·l, vocab]` for `tokens` laid out as `[b, l]`.
    pub fn logits<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        tokens: &[usize],
        batch: usize,
        state: Option<&SequenceState<T>>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, SequenceState<T>)> {
        if batch == 0 || !tokens.len().is_multiple_of(batch) {
            return Err(Error::Length(format!("{} tokens for batch {batch}", tokens.len())));
        }
        let l = tokens.len() / batch;
        let table = store.bind(g, self.embed);
        let x = g.embedding(table, tokens)?;
        let x = g.reshape(x, vec![batch, l, self.cfg.seq.d])?;
        let (h, next) = self.seq.forward(g, store, x, state, rng)?;
        let h = g.reshape(h, vec![batch * l, self.cfg.seq.d])?;
        Ok((self.head.forward(g, store, h)?, next))
    }

    /// Weighted mean cross-entropy of a batch.
    pub fn loss<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, batch: &TokenBatch, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        let (logits, _) = self.logits(g, store, &batch.inputs, batch.batch, None, rng)?;
        let w: Vec<T> = batch.weights.iter().map(|&w| T::lit(w)).collect();
        g.cross_entropy(logits, &batch.targets, Some(&w))
    }

    /// One optimizer step; returns `(loss, gradient norm before clipping)`.
    pub fn train_step<T: Real>(&self, store: &mut ParamStore<T>, opt: &mut AdamW, batch: &TokenBatch, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let loss = self.loss(&mut g, store, batch, Some(rng))?;
        let value = g.scalar(loss).to_f64().unwrap();
        if !value.is_finite() {
            return Err(Error::NonFinite("token loss".into()));
        }
        g.backward(loss)?;
        store.zero_grads();
        store.absorb_grads(&g);
        let norm = store.clip_grad_norm(T::lit(self.cfg.grad_clip)).to_f64().unwrap();
        opt.step(store)?;
        Ok((value, norm))
    }

    /// Most likely grid cell in each of `rows` logit rows.
    fn greedy_cells<T: Real>(g: &Graph<T>, logits: Var, rows: impl Iterator<Item = usize>) -> Vec<usize> {
        let v = g.value(logits);
        let cols = g.shape(logits)[1];
        rows.map(|r| {
            let row = &v[r * cols..r * cols + CELL_TOKENS];
            (0..CELL_TOKENS).fold(0, |best, k| if row[k] > row[best] { k } else { best })
        })
        .collect()
    }

    /// Predicts every frame after the first from the true prefix up to and
    /// including the preceding action, generating cells greedily one token at
    /// a time. Returns predicted and true cell frames.
    pub fn rollout_frames<T: Real>(&self, store: &ParamStore<T>, trajectories: &[Vec<Frame>], size: usize) -> Result<(CellFrames, CellFrames)> {
        let b = trajectories.len();
        let frames = trajectories.first().map_or(0, Vec::len);
        if trajectories.iter().any(|t| t.len() != frames) {
            return Err(Error::Length("evaluation trajectories differ in length".into()));
        }
        let cells = size * size;
        let lf = cells + 1;
        let tokens: Vec<Vec<usize>> = trajectories.iter().map(|t| gridworld::tokenize(t)).collect();
        let (mut pred, mut truth) = (vec![], vec![]);
        let mut state = self.seq.zero_state::<T>(b);
        let table_rows = |k: usize| -> Vec<usize> { tokens.iter().flat_map(|t| t[k * lf..(k + 1) * lf].iter().copied()).collect() };
        for k in 0..frames.saturating_sub(1) {
            let mut g = Graph::inference();
            let (logits, next) = self.logits(&mut g, store, &table_rows(k), b, Some(&state), None)?;
            state = next;
            let mut cur = Self::greedy_cells(&g, logits, (0..b).map(|r| r * lf + lf - 1));
            let mut gen: Vec<Vec<usize>> = cur.iter().map(|&c| vec![c]).collect();
            let mut fork = state.clone();
            for _ in 1..cells {
                let mut g = Graph::inference();
                let table = store.bind(&mut g, self.embed);
                let x = g.embedding(table, &cur)?;
                let (h, next) = self.seq.step(&mut g, store, x, &fork)?;
                fork = next;
                let logits = self.head.forward(&mut g, store, h)?;
                cur = Self::greedy_cells(&g, logits, 0..b);
                for (row, &c) in gen.iter_mut().zip(&cur) {
                    row.push(c);
                }
            }
            for (r, row) in gen.into_iter().enumerate() {
                pred.push(row.into_iter().map(|t| Cell::from_token(t).expect("cell token")).collect());
                truth.push(trajectories[r][k + 1].cells.clone());
            }
        }
        Ok((pred, truth))
    }

    pub fn evaluate<T: Real>(&self, store: &ParamStore<T>, trajectories: &[Vec<Frame>], size: usize) -> Result<GridErrors> {
        let (pred, truth) = self.rollout_frames(store, trajectories, size)?;
        gridworld::grid_errors(&pred, &truth, size)
    }
}
