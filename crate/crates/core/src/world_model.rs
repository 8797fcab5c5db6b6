//! Latent world model: codec, sequence model over `(z, a, is_first)` tokens,
//! and prior / reward / termination heads.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{one_hot, unimix, Codec, Encoded, LatentSpec};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Linear, Mlp, ParamId, ParamStore};
use crate::replay::TrajectoryBatch;
use crate::ssd::{Backbone, ScanMode, SequenceModel, SequenceState, SsdConfig};
use crate::tensor::{Graph, Real, Var};

pub mod token;

pub const REWARD_BINS: usize = 41;
const BIN_LIMIT: f64 = 20.0;

pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

pub fn symexp(x: f64) -> f64 {
    x.signum() * x.abs().exp_m1()
}

/// Bin centres in reward space: `symexp` of an even grid on `[-20, 20]`.
pub fn reward_bins() -> Vec<f64> {
    (0..REWARD_BINS).map(|i| symexp(-BIN_LIMIT + 2.0 * BIN_LIMIT * i as f64 / (REWARD_BINS - 1) as f64)).collect()
}

/// Two-hot encoding of `r` over the bins, interpolated in symlog space.
pub fn two_hot(r: f64) -> [(usize, f64); 2] {
    let step = 2.0 * BIN_LIMIT / (REWARD_BINS - 1) as f64;
    let pos = ((symlog(r).clamp(-BIN_LIMIT, BIN_LIMIT) + BIN_LIMIT) / step).min((REWARD_BINS - 1) as f64);
    let lo = (pos.floor() as usize).min(REWARD_BINS - 2);
    let w = pos - lo as f64;
    [(lo, 1.0 - w), (lo + 1, w)]
}

/// Expected reward under bin probabilities `p` (one row of `REWARD_BINS`).
pub fn reward_mean<T: Real>(p: &[T]) -> f64 {
    p.iter().zip(reward_bins()).map(|(p, b)| p.to_f64().unwrap() * b).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldModelConfig {
    pub obs_dim: usize,
    pub actions: usize,
    pub latent: LatentSpec,
    pub codec_hidden: usize,
    pub codec_layers: usize,
    pub head_hidden: usize,
    pub action_embed: usize,
    pub seq: SsdConfig,
    pub layers: usize,
    pub backbone: Backbone,
    pub mode: ScanMode,
    pub dropout: f64,
    pub unimix: f64,
    pub free_bits: f64,
    pub rep_scale: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl WorldModelConfig {
    pub fn new(obs_dim: usize, actions: usize) -> Self {
        WorldModelConfig {
            obs_dim,
            actions,
            latent: LatentSpec { categories: 16, classes: 16 },
            codec_hidden: 256,
            codec_layers: 2,
            head_hidden: 256,
            action_embed: 32,
            seq: SsdConfig::default(),
            layers: 2,
            backbone: Backbone::Ssd,
            mode: ScanMode::Chunked(16),
            dropout: 0.1,
            unimix: 0.01,
            free_bits: 1.0,
            rep_scale: 0.1,
            lr: 4e-5,
            weight_decay: 1e-4,
            grad_clip: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.seq.validate()?;
        if !(self.unimix > 0.0 && self.unimix < 1.0) {
            return Err(Error::Config(format!("unimix must lie in (0, 1), got {}", self.unimix)));
        }
        if self.obs_dim == 0 || self.actions == 0 || self.latent.width() == 0 {
            return Err(Error::Config("observation, action and latent sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Scalar loss terms of one batch, averaged over positions.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon: f64,
    pub dyn_loss: f64,
    pub rep_loss: f64,
    pub kl: f64,
    pub reward: f64,
    pub term: f64,
    pub grad_norm: f64,
}

/// Graph nodes of the individual loss terms.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon: Var,
    pub dyn_loss: Var,
    pub rep_loss: Var,
    pub reward: Var,
    pub term: Var,
}

pub struct Observed<T> {
    pub post: Encoded,
    /// `[b, l, d]`.
    pub deter: Var,
    pub state: SequenceState<T>,
}

#[derive(Clone, Debug)]
pub struct WorldModel {
    pub cfg: WorldModelConfig,
    pub codec: Codec,
    pub seq: SequenceModel,
    action_embed: ParamId,
    token: Linear,
    prior: Linear,
    reward: Mlp,
    term: Mlp,
}

fn ensure_finite<T: Real>(g: &Graph<T>, v: Var, what: &str) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("world model: {what}")))
    }
}

/// `Σ p (log p − log q)` over the last axis, then over categories: `[n, K, C] -> [n]`.
pub fn categorical_kl<T: Real>(g: &mut Graph<T>, p: Var, q: Var) -> Result<Var> {
    let lp = g.log(p);
    let lq = g.log(q);
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let per_row = g.sum_last(terms)?;
    g.sum_last(per_row)
}

impl WorldModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: WorldModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (kc, d) = (cfg.latent.width(), cfg.seq.d);
        let codec = Codec::new(store, "wm.codec", cfg.obs_dim, cfg.latent, cfg.codec_hidden, cfg.codec_layers, cfg.unimix, rng);
        let action_embed = store.add_xavier("wm.action_embed", cfg.actions, cfg.action_embed, rng);
        let token = Linear::new(store, "wm.token", kc + cfg.action_embed + 1, d, true, rng);
        let mut seq = SequenceModel::new(store, "wm.seq", cfg.backbone, cfg.seq, cfg.layers, rng)?;
        seq.mode = cfg.mode;
        seq.dropout = cfg.dropout;
        let prior = Linear::new(store, "wm.prior", d, kc, true, rng);
        let reward = Mlp::new(store, "wm.reward", d, cfg.head_hidden, 1, REWARD_BINS, rng);
        let out_w = reward.output_layer().w;
        store.value_mut(out_w).iter_mut().for_each(|v| *v = T::zero());
        let term = Mlp::new(store, "wm.term", d, cfg.head_hidden, 1, 1, rng);
        Ok(WorldModel { cfg, codec, seq, action_embed, token, prior, reward, term })
    }

    fn kc(&self) -> usize {
        self.cfg.latent.width()
    }

    /// Sequence-model input from a (gradient-free) code, action ids and first flags.
    /// `z: [n, K·C]`; returns `[n, d]`.
    pub fn tokens<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, z: Var, actions: &[usize], is_first: &[bool]) -> Result<Var> {
        let n = actions.len();
        if g.shape(z) != [n, self.kc()] || is_first.len() != n {
            return Err(Error::shape("tokens", format!("code {:?} for {n} actions", g.shape(z))));
        }
        if let Some(&a) = actions.iter().find(|&&a| a >= self.cfg.actions) {
            return Err(Error::shape("tokens", format!("action {a} outside 0..{}", self.cfg.actions)));
        }
        let table = store.bind(g, self.action_embed);
        let emb = g.embedding(table, actions)?;
        let flags = g.constant_from(vec![n, 1], is_first.iter().map(|&f| if f { T::one() } else { T::zero() }).collect())?;
        let cat = g.concat(&[z, emb, flags], 1)?;
        self.token.forward(g, store, cat)
    }

    /// Encodes a batch and runs the sequence model over it.
    pub fn observe<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &TrajectoryBatch,
        mut rng: Option<&mut ChaCha8Rng>,
        state: Option<&SequenceState<T>>,
    ) -> Result<Observed<T>> {
        let (b, l) = (batch.batch, batch.len);
        if batch.obs_dim != self.cfg.obs_dim {
            return Err(Error::shape("observe", format!("obs_dim {} vs model {}", batch.obs_dim, self.cfg.obs_dim)));
        }
        let obs = g.constant_from(vec![b * l, batch.obs_dim], batch.obs.iter().map(|&v| T::lit(v as f64)).collect())?;
        let post = self.codec.encode(g, store, obs, rng.as_deref_mut())?;
        ensure_finite(g, post.logits, "encoder logits")?;
        let zd = g.detach(post.z);
        let tok = self.tokens(g, store, zd, &batch.actions, &batch.is_first)?;
        let tok = g.reshape(tok, vec![b, l, self.cfg.seq.d])?;
        let (deter, state) = self.seq.forward(g, store, tok, state, rng)?;
        ensure_finite(g, deter, "sequence model output")?;
        Ok(Observed { post, deter, state })
    }

    /// Prior probabilities for the next code, `[n, K, C]`, from `d: [n, d]` (or `[b, l, d]`).
    pub fn prior_probs<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, deter: Var) -> Result<Var> {
        let n: usize = g.shape(deter)[..g.shape(deter).len() - 1].iter().product();
        let flat = g.reshape(deter, vec![n, self.cfg.seq.d])?;
        let logits = self.prior.forward(g, store, flat)?;
        let logits = g.reshape(logits, vec![n, self.cfg.latent.categories, self.cfg.latent.classes])?;
        unimix(g, logits, self.cfg.latent.classes, self.cfg.unimix)
    }

    /// Reward-bin logits `[n, 41]`.
    pub fn reward_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, deter: Var) -> Result<Var> {
        self.reward.forward(g, store, deter)
    }

    /// Termination logits `[n, 1]`.
    pub fn term_logits<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, deter: Var) -> Result<Var> {
        self.term.forward(g, store, deter)
    }

    /// Full training objective on a batch.
    pub fn loss<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        batch: &TrajectoryBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossVars, LossReport)> {
        let (b, l) = (batch.batch, batch.len);
        let (k, c) = (self.cfg.latent.categories, self.cfg.latent.classes);
        let n = b * l;
        if l < 2 {
            return Err(Error::Length("world-model loss needs sequences of length >= 2".into()));
        }
        let obs_t = g.constant_from(vec![n, batch.obs_dim], batch.obs.iter().map(|&v| T::lit(v as f64)).collect())?;
        let obs = self.observe(g, store, batch, rng, None)?;

        // Reconstruction from the encoder's own code.
        let recon = self.codec.decode(g, store, obs.post.z)?;
        let err = g.sub(recon, obs_t)?;
        let sq = g.mul(err, err)?;
        let sq = g.sum(sq);
        let recon_loss = g.scale(sq, T::lit(1.0 / n as f64));

        // Prior at t against posterior at t + 1.
        let deter_flat = g.reshape(obs.deter, vec![n, self.cfg.seq.d])?;
        let prior = self.prior_probs(g, store, deter_flat)?;
        let prior = g.reshape(prior, vec![b, l, k, c])?;
        let prior = g.slice(prior, 1, 0, l - 1)?;
        let post = g.reshape(obs.post.probs, vec![b, l, k, c])?;
        let post = g.slice(post, 1, 1, l - 1)?;
        let m = b * (l - 1);
        let prior = g.reshape(prior, vec![m, k, c])?;
        let post = g.reshape(post, vec![m, k, c])?;
        let post_sg = g.detach(post);
        let prior_sg = g.detach(prior);
        let kl_dyn = categorical_kl(g, post_sg, prior)?;
        let kl_rep = categorical_kl(g, post, prior_sg)?;
        let raw_kl = g.value(kl_dyn).iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m as f64;
        let fb = T::lit(self.cfg.free_bits);
        let dyn_c = g.clamp_min(kl_dyn, fb);
        let dyn_loss = g.mean(dyn_c);
        let rep_c = g.clamp_min(kl_rep, fb);
        let rep_loss = g.mean(rep_c);

        // Reward: two-hot cross-entropy; termination: Bernoulli NLL.
        let rl = self.reward_logits(g, store, deter_flat)?;
        ensure_finite(g, rl, "reward head")?;
        let lsm = g.log_softmax(rl)?;
        let mut target = vec![T::zero(); n * REWARD_BINS];
        for (i, &r) in batch.rewards.iter().enumerate() {
            for (bin, w) in two_hot(r as f64) {
                target[i * REWARD_BINS + bin] = target[i * REWARD_BINS + bin] + T::lit(w);
            }
        }
        let tv = g.constant_from(vec![n, REWARD_BINS], target)?;
        let ll = g.mul(lsm, tv)?;
        let ll = g.sum(ll);
        let reward_loss = g.scale(ll, T::lit(-1.0 / n as f64));

        let tl = self.term_logits(g, store, deter_flat)?;
        ensure_finite(g, tl, "termination head")?;
        let sp = g.softplus(tl);
        let ev = g.constant_from(vec![n, 1], batch.dones.iter().map(|&d| if d { T::one() } else { T::zero() }).collect())?;
        let ex = g.mul(tl, ev)?;
        let bce = g.sub(sp, ex)?;
        let term_loss = g.mean(bce);

        let rep_scaled = g.scale(rep_loss, T::lit(self.cfg.rep_scale));
        let mut total = g.add(recon_loss, dyn_loss)?;
        for t in [rep_scaled, reward_loss, term_loss] {
            total = g.add(total, t)?;
        }
        let f = |v: Var| g.scalar(v).to_f64().unwrap();
        let report = LossReport {
            total: f(total),
            recon: f(recon_loss),
            dyn_loss: f(dyn_loss),
            rep_loss: f(rep_loss),
            kl: raw_kl,
            reward: f(reward_loss),
            term: f(term_loss),
            grad_norm: 0.0,
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite("world model: total loss".into()));
        }
        let vars = LossVars { total, recon: recon_loss, dyn_loss, rep_loss, reward: reward_loss, term: term_loss };
        Ok((vars, report))
    }

    /// One clipped AdamW step on all world-model parameters.
    pub fn train_step<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        opt: &mut AdamW,
        batch: &TrajectoryBatch,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossReport> {
        let mut g = Graph::new();
        let (vars, mut report) = self.loss(&mut g, store, batch, Some(rng))?;
        g.backward(vars.total)?;
        store.zero_grads();
        store.absorb_grads(&g);
        report.grad_norm = store.clip_grad_norm(T::lit(self.cfg.grad_clip)).to_f64().unwrap();
        opt.step(store)?;
        Ok(report)
    }

    /// One recurrent step from a code `z: [b, K·C]` (no gradient), returning `d: [b, d]`.
    pub fn step<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        actions: &[usize],
        is_first: &[bool],
        state: &SequenceState<T>,
    ) -> Result<(Var, SequenceState<T>)> {
        let tok = self.tokens(g, store, z, actions, is_first)?;
        let (d, next) = self.seq.step(g, store, tok, state)?;
        ensure_finite(g, d, "sequence step")?;
        Ok((d, next))
    }

    /// Posterior codes for a flat observation batch in eval mode.
    pub fn encode_eval<T: Real>(&self, store: &ParamStore<T>, obs: &[f32]) -> Result<Vec<T>> {
        let data: Vec<T> = obs.iter().map(|&v| T::lit(v as f64)).collect();
        let code = self.codec.code(store, &data)?;
        Ok(one_hot(&code.index, self.cfg.latent.classes))
    }
}
