//! Imagined rollouts inside the world model and actor-critic learning on them.
//!
//! Policy features are `concat(z_t, d_{t-1})`: the current code and the
//! sequence-model output that predicted it. Everything taken from the world
//! model enters the behaviour graphs as a constant.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{one_hot, sample_rows};
use crate::error::{Error, Result};
use crate::nn::{AdamW, Mlp, ParamStore};
use crate::replay::TrajectoryBatch;
use crate::tensor::{Graph, Real, Var};
use crate::world_model::{reward_mean, WorldModel};

#[derive(Clone, Debug, PartialEq)]
pub struct BehaviourConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub entropy: f64,
    pub actor_hidden: usize,
    pub critic_hidden: usize,
    pub layers: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
    pub norm_decay: f64,
}

impl Default for BehaviourConfig {
    fn default() -> Self {
        BehaviourConfig {
            horizon: 16,
            gamma: 0.985,
            lambda: 0.95,
            entropy: 3e-4,
            actor_hidden: 256,
            critic_hidden: 512,
            layers: 2,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            grad_clip: 100.0,
            norm_decay: 0.99,
        }
    }
}

/// Time-major rollout: `features` is `[h + 1, b, F]`, the per-step vectors
/// are `[h, b]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImaginedRollout<T> {
    pub batch: usize,
    pub horizon: usize,
    pub feat_dim: usize,
    pub features: Vec<T>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub continues: Vec<f64>,
    /// First flag of the seed step, fed with the first imagined token.
    pub seed_first: Vec<bool>,
}

impl<T: Real> ImaginedRollout<T> {
    pub fn feature(&self, t: usize, row: usize) -> &[T] {
        let f = self.feat_dim;
        let at = (t * self.batch + row) * f;
        &self.features[at..at + f]
    }
}

fn argmax<T: PartialOrd>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

/// Chooses one action per row of a `[n, F]` feature block.
pub trait Policy<T> {
    fn act(&mut self, feat: &[T], n: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<usize>>;
}

impl<T, F> Policy<T> for F
where
    F: FnMut(&[T], usize) -> Vec<usize>,
{
    fn act(&mut self, feat: &[T], n: usize, _rng: Option<&mut ChaCha8Rng>) -> Result<Vec<usize>> {
        Ok(self(feat, n))
    }
}

/// An [`Actor`] bound to its parameters.
pub struct ActorPolicy<'a, T> {
    pub actor: &'a Actor,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Policy<T> for ActorPolicy<'_, T> {
    fn act(&mut self, feat: &[T], n: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<usize>> {
        self.actor.act(self.store, feat, n, rng)
    }
}

/// Categorical policy over a discrete action set.
#[derive(Clone, Debug)]
pub struct Actor {
    pub net: Mlp,
    pub actions: usize,
}

impl Actor {
    pub fn new<T: Real>(store: &mut ParamStore<T>, feat: usize, actions: usize, cfg: &BehaviourConfig, rng: &mut impl Rng) -> Self {
        Actor { net: Mlp::new(store, "actor", feat, cfg.actor_hidden, cfg.layers, actions, rng), actions }
    }

    /// Action per row of `feat: [n, F]`: sampled with an rng, argmax without.
    pub fn act<T: Real>(&self, store: &ParamStore<T>, feat: &[T], n: usize, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<usize>> {
        let mut g = Graph::inference();
        let x = g.constant_from(vec![n, feat.len() / n.max(1)], feat.to_vec())?;
        let logits = self.net.forward(&mut g, store, x)?;
        let p = g.softmax(logits)?;
        let probs = g.value(p);
        Ok(match rng {
            Some(r) => sample_rows(probs, self.actions, Some(r)),
            None => probs.chunks(self.actions).map(argmax).collect(),
        })
    }
}

/// Scalar state-value regressor.
#[derive(Clone, Debug)]
pub struct Critic {
    pub net: Mlp,
}

impl Critic {
    pub fn new<T: Real>(store: &mut ParamStore<T>, feat: usize, cfg: &BehaviourConfig, rng: &mut impl Rng) -> Self {
        let net = Mlp::new(store, "critic", feat, cfg.critic_hidden, cfg.layers, 1, rng);
        let w = net.output_layer().w;
        store.value_mut(w).iter_mut().for_each(|v| *v = T::zero());
        Critic { net }
    }

    pub fn values<T: Real>(&self, store: &ParamStore<T>, feat: &[T], n: usize) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let x = g.constant_from(vec![n, feat.len() / n.max(1)], feat.to_vec())?;
        let v = self.net.forward(&mut g, store, x)?;
        Ok(g.value(v).iter().map(|v| v.to_f64().unwrap()).collect())
    }
}

/// Runs `ctx.len − 1` real steps to warm the sequence state, then rolls the
/// policy forward for `horizon` imagined steps from the last context frame.
/// With `rng = None` every draw is an argmax, so the rollout is deterministic.
pub fn imagine<T: Real>(
    wm: &WorldModel,
    wm_store: &ParamStore<T>,
    policy: &mut impl Policy<T>,
    ctx: &TrajectoryBatch,
    horizon: usize,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ImaginedRollout<T>> {
    let (b, l) = (ctx.batch, ctx.len);
    if l == 0 || b == 0 {
        return Err(Error::Length("imagination needs a non-empty context".into()));
    }
    let (kc, d) = (wm.cfg.latent.width(), wm.cfg.seq.d);
    let classes = wm.cfg.latent.classes;

    // Posterior codes of the whole context.
    let mut g = Graph::inference();
    let obs = g.constant_from(vec![b * l, ctx.obs_dim], ctx.obs.iter().map(|&v| T::lit(v as f64)).collect())?;
    let post = wm.codec.encode(&mut g, wm_store, obs, rng.as_deref_mut())?;
    let codes: Vec<T> = g.value(post.z).to_vec();
    let row = |bi: usize, t: usize| &codes[(bi * l + t) * kc..(bi * l + t + 1) * kc];

    let mut state = wm.seq.zero_state::<T>(b);
    let mut d_prev = vec![T::zero(); b * d];
    if l > 1 {
        let warm = l - 1;
        let mut z = Vec::with_capacity(b * warm * kc);
        let (mut acts, mut firsts) = (vec![], vec![]);
        for bi in 0..b {
            for t in 0..warm {
                z.extend_from_slice(row(bi, t));
                acts.push(ctx.actions[bi * l + t]);
                firsts.push(ctx.is_first[bi * l + t]);
            }
        }
        let zv = g.constant_from(vec![b * warm, kc], z)?;
        let tok = wm.tokens(&mut g, wm_store, zv, &acts, &firsts)?;
        let tok = g.reshape(tok, vec![b, warm, d])?;
        let (deter, next) = wm.seq.forward::<T, ChaCha8Rng>(&mut g, wm_store, tok, None, None)?;
        state = next;
        let dv = g.value(deter);
        for bi in 0..b {
            let at = (bi * warm + warm - 1) * d;
            d_prev[bi * d..(bi + 1) * d].copy_from_slice(&dv[at..at + d]);
        }
    }

    let feat_dim = kc + d;
    let mut z: Vec<T> = (0..b).flat_map(|bi| row(bi, l - 1).to_vec()).collect();
    let seed_first: Vec<bool> = (0..b).map(|bi| ctx.is_first[bi * l + l - 1]).collect();
    let mut first = seed_first.clone();
    let mut out = ImaginedRollout {
        batch: b,
        horizon,
        feat_dim,
        features: Vec::with_capacity((horizon + 1) * b * feat_dim),
        actions: Vec::with_capacity(horizon * b),
        rewards: Vec::with_capacity(horizon * b),
        continues: Vec::with_capacity(horizon * b),
        seed_first,
    };
    let push_features = |out: &mut ImaginedRollout<T>, z: &[T], dp: &[T]| {
        for bi in 0..b {
            out.features.extend_from_slice(&z[bi * kc..(bi + 1) * kc]);
            out.features.extend_from_slice(&dp[bi * d..(bi + 1) * d]);
        }
    };
    for t in 0..=horizon {
        let start = out.features.len();
        push_features(&mut out, &z, &d_prev);
        if t == horizon {
            break;
        }
        let acts = policy.act(&out.features[start..], b, rng.as_deref_mut())?;
        if acts.len() != b || acts.iter().any(|&a| a >= wm.cfg.actions) {
            return Err(Error::Length(format!("policy returned {} actions for {b} rows", acts.len())));
        }
        let mut g = Graph::inference();
        let zv = g.constant_from(vec![b, kc], z.clone())?;
        let (dt, next) = wm.step(&mut g, wm_store, zv, &acts, &first, &state)?;
        state = next;
        if !state.all_finite() {
            return Err(Error::NonFinite("imagined state".into()));
        }
        let rl = wm.reward_logits(&mut g, wm_store, dt)?;
        let rp = g.softmax(rl)?;
        let tl = wm.term_logits(&mut g, wm_store, dt)?;
        let prior = wm.prior_probs(&mut g, wm_store, dt)?;
        let rp = g.value(rp);
        for bi in 0..b {
            out.rewards.push(reward_mean(&rp[bi * rp.len() / b..(bi + 1) * rp.len() / b]));
            let x = g.value(tl)[bi].to_f64().unwrap();
            out.continues.push(1.0 / (1.0 + x.exp()));
        }
        let idx = sample_rows(g.value(prior), classes, rng.as_deref_mut());
        z = one_hot(&idx, classes);
        d_prev = g.value(dt).to_vec();
        out.actions.extend(acts);
        first = vec![false; b];
    }
    Ok(out)
}

/// `R_t = r_t + γ c_t ((1 − λ) V_{t+1} + λ R_{t+1})` with `R_h = V_h`;
/// `values` is `[h + 1, b]`, the result `[h, b]`.
pub fn lambda_returns(rewards: &[f64], continues: &[f64], values: &[f64], batch: usize, gamma: f64, lambda: f64) -> Vec<f64> {
    let h = rewards.len() / batch.max(1);
    assert_eq!(values.len(), (h + 1) * batch, "values must cover h + 1 steps");
    let mut out = vec![0.0; h * batch];
    for bi in 0..batch {
        let mut next = values[h * batch + bi];
        for t in (0..h).rev() {
            let i = t * batch + bi;
            next = rewards[i] + gamma * continues[i] * ((1.0 - lambda) * values[i + batch] + lambda * next);
            out[i] = next;
        }
    }
    out
}

/// Linearly interpolated percentile of unsorted data, `q ∈ [0, 1]`.
pub fn percentile(data: &[f64], q: f64) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let mut s = data.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

/// Moving 5th–95th percentile range of returns; advantages are divided by
/// `max(1, range)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnNormalizer {
    pub decay: f64,
    pub range: f64,
}

impl ReturnNormalizer {
    pub fn new(decay: f64) -> Self {
        ReturnNormalizer { decay, range: 0.0 }
    }

    pub fn update(&mut self, returns: &[f64]) -> f64 {
        let r = percentile(returns, 0.95) - percentile(returns, 0.05);
        self.range = self.decay * self.range + (1.0 - self.decay) * r;
        self.scale()
    }

    pub fn scale(&self) -> f64 {
        self.range.max(1.0)
    }
}

/// Weighted policy-gradient loss
/// `−Σ w_t (A_t log π(a_t|s_t) + η H(π(·|s_t))) / n` over `feat: [n, F]`.
#[allow(clippy::too_many_arguments)]
pub fn actor_loss<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    actor: &Actor,
    feat: &[T],
    actions: &[usize],
    advantages: &[f64],
    weights: &[f64],
    entropy: f64,
) -> Result<(Var, f64)> {
    let n = actions.len();
    let x = g.constant_from(vec![n, feat.len() / n.max(1)], feat.to_vec())?;
    let logits = actor.net.forward(g, store, x)?;
    let lp = g.log_softmax(logits)?;
    let p = g.exp(lp);
    let a = actor.actions;
    let mut pick = vec![T::zero(); n * a];
    let mut ent_w = vec![T::zero(); n * a];
    for i in 0..n {
        pick[i * a + actions[i]] = T::lit(-weights[i] * advantages[i] / n as f64);
        for j in 0..a {
            // −η H = η Σ p log p
            ent_w[i * a + j] = T::lit(entropy * weights[i] / n as f64);
        }
    }
    let pick = g.constant_from(vec![n, a], pick)?;
    let pg = g.mul(lp, pick)?;
    let pg = g.sum(pg);
    let plogp = g.mul(p, lp)?;
    let ent_w = g.constant_from(vec![n, a], ent_w)?;
    let ent = g.mul(plogp, ent_w)?;
    let ent = g.sum(ent);
    let mean_entropy = -g.value(plogp).iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / n as f64;
    Ok((g.add(pg, ent)?, mean_entropy))
}

/// Weighted squared error `Σ w_t (V(s_t) − R_t)² / 2n`.
pub fn critic_loss<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, critic: &Critic, feat: &[T], targets: &[f64], weights: &[f64]) -> Result<Var> {
    let n = targets.len();
    let x = g.constant_from(vec![n, feat.len() / n.max(1)], feat.to_vec())?;
    let v = critic.net.forward(g, store, x)?;
    let t = g.constant_from(vec![n, 1], targets.iter().map(|&r| T::lit(r)).collect())?;
    let err = g.sub(v, t)?;
    let w = g.constant_from(vec![n, 1], weights.iter().map(|&w| T::lit(w / (2.0 * n as f64))).collect())?;
    let sq = g.mul(err, err)?;
    let wsq = g.mul(sq, w)?;
    Ok(g.sum(wsq))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BehaviourReport {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub mean_return: f64,
    pub mean_reward: f64,
    pub return_scale: f64,
    pub actor_grad_norm: f64,
    pub critic_grad_norm: f64,
}

/// Actor, critic, their parameters and optimizers, and the return normalizer.
#[derive(Clone, Debug)]
pub struct Behaviour<T: Real> {
    pub cfg: BehaviourConfig,
    pub actor: Actor,
    pub critic: Critic,
    pub actor_store: ParamStore<T>,
    pub critic_store: ParamStore<T>,
    pub actor_opt: AdamW,
    pub critic_opt: AdamW,
    pub norm: ReturnNormalizer,
}

fn apply_step<T: Real>(g: &mut Graph<T>, loss: Var, store: &mut ParamStore<T>, opt: &mut AdamW, clip: f64) -> Result<f64> {
    g.backward(loss)?;
    store.zero_grads();
    store.absorb_grads(g);
    let norm = store.clip_grad_norm(T::lit(clip)).to_f64().unwrap();
    opt.step(store)?;
    Ok(norm)
}

impl<T: Real> Behaviour<T> {
    pub fn new(feat_dim: usize, actions: usize, cfg: BehaviourConfig, rng: &mut impl Rng) -> Self {
        let mut actor_store = ParamStore::new();
        let mut critic_store = ParamStore::new();
        let actor = Actor::new(&mut actor_store, feat_dim, actions, &cfg, rng);
        let critic = Critic::new(&mut critic_store, feat_dim, &cfg, rng);
        Behaviour {
            actor_opt: AdamW::new(cfg.actor_lr, 0.0),
            critic_opt: AdamW::new(cfg.critic_lr, 0.0),
            norm: ReturnNormalizer::new(cfg.norm_decay),
            cfg,
            actor,
            critic,
            actor_store,
            critic_store,
        }
    }

    /// Feature width expected from a world model.
    pub fn feat_dim(wm: &WorldModel) -> usize {
        wm.cfg.latent.width() + wm.cfg.seq.d
    }

    pub fn imagine(
        &self,
        wm: &WorldModel,
        wm_store: &ParamStore<T>,
        ctx: &TrajectoryBatch,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ImaginedRollout<T>> {
        let mut policy = ActorPolicy { actor: &self.actor, store: &self.actor_store };
        imagine(wm, wm_store, &mut policy, ctx, self.cfg.horizon, rng)
    }

    /// One actor and one critic step on a rollout.
    pub fn update(&mut self, ro: &ImaginedRollout<T>) -> Result<BehaviourReport> {
        let (b, h) = (ro.batch, ro.horizon);
        if h == 0 {
            return Err(Error::Length("actor-critic update needs a horizon of at least one step".into()));
        }
        let values = self.critic.values(&self.critic_store, &ro.features, (h + 1) * b)?;
        let returns = lambda_returns(&ro.rewards, &ro.continues, &values, b, self.cfg.gamma, self.cfg.lambda);
        // Discounted probability that the imagined episode is still running.
        let mut weights = vec![1.0; h * b];
        for t in 1..h {
            for bi in 0..b {
                weights[t * b + bi] = weights[(t - 1) * b + bi] * self.cfg.gamma * ro.continues[(t - 1) * b + bi];
            }
        }
        let scale = self.norm.update(&returns);
        let adv: Vec<f64> = returns.iter().zip(&values).map(|(r, v)| (r - v) / scale).collect();
        let feat = &ro.features[..h * b * ro.feat_dim];

        let mut g = Graph::new();
        let (al, entropy) = actor_loss(&mut g, &self.actor_store, &self.actor, feat, &ro.actions, &adv, &weights, self.cfg.entropy)?;
        let actor_loss_v = g.scalar(al).to_f64().unwrap();
        let actor_grad_norm = apply_step(&mut g, al, &mut self.actor_store, &mut self.actor_opt, self.cfg.grad_clip)?;

        let mut g = Graph::new();
        let cl = critic_loss(&mut g, &self.critic_store, &self.critic, feat, &returns, &weights)?;
        let critic_loss_v = g.scalar(cl).to_f64().unwrap();
        let critic_grad_norm = apply_step(&mut g, cl, &mut self.critic_store, &mut self.critic_opt, self.cfg.grad_clip)?;

        let n = (h * b) as f64;
        Ok(BehaviourReport {
            actor_loss: actor_loss_v,
            critic_loss: critic_loss_v,
            entropy,
            mean_return: returns.iter().sum::<f64>() / n,
            mean_reward: ro.rewards.iter().sum::<f64>() / n,
            return_scale: scale,
            actor_grad_norm,
            critic_grad_norm,
        })
    }
}

#[cfg(test)]
mod tests;
