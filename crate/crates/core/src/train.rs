//! Training loops: the token-mode grid-world benchmark and the full agent
//! loop (collect, world-model update, imagination update) on the pixel grid.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{sampler_name, RunConfig};
use crate::error::Result;
use crate::gridworld::{self, Action, GridErrors, PixelGridEnv, ACTIONS};
use crate::imagination::Behaviour;
use crate::metrics::MetricsWriter;
use crate::nn::{cosine_lr, AdamW, ParamStore};
use crate::replay::{Purpose, ReplayBuffer, Transition, DEFAULT_CAPACITY};
use crate::ssd::SequenceState;
use crate::tensor::Graph;
use crate::world_model::token::{TokenBatch, TokenModel};
use crate::world_model::WorldModel;

/// Seeds a sub-stream so that adding draws in one part of a run does not
/// shift another.
fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(tag);
    r
}

fn over_budget(start: &Instant, budget: u64) -> bool {
    budget > 0 && start.elapsed().as_secs() >= budget
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOutcome {
    pub steps: usize,
    pub seconds: f64,
    pub initial: GridErrors,
    pub final_errors: GridErrors,
    /// `(step, errors)` at every evaluation.
    pub history: Vec<(usize, GridErrors)>,
}

pub const GRID_COLUMNS: &[&str] = &["loss", "grad_norm", "lr", "e_g", "e_l", "combined", "ms_per_step", "seconds"];

/// Token-mode sequence training on random-walk grid trajectories with
/// periodic autoregressive evaluation on a held-out set.
pub fn train_gridworld(cfg: &RunConfig, out: Option<&Path>) -> Result<GridOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut init_rng = stream(cfg.seed, 1);
    let mut data_rng = stream(cfg.seed, 2);
    let mut drop_rng = stream(cfg.seed, 3);
    let mut eval_rng = stream(cfg.seed, 4);
    let mut store = ParamStore::<f32>::new();
    let model = TokenModel::new(&mut store, "tok", cfg.token_model(), &mut init_rng)?;
    let mut opt = AdamW::new(cfg.token_lr, cfg.weight_decay);
    let size = cfg.grid_size;
    let len = cfg.grid_frames * (size * size + 1);
    let held_out: Vec<_> = (0..cfg.eval_sequences).map(|_| gridworld::random_trajectory(size, cfg.grid_frames, &mut eval_rng)).collect();
    let mut metrics = match out {
        Some(dir) => Some(MetricsWriter::create(&dir.join("gridworld.csv"), cfg, GRID_COLUMNS)?),
        None => None,
    };

    let evaluate = |store: &ParamStore<f32>| model.evaluate(store, &held_out, size);
    let initial = evaluate(&store)?;
    let mut history = vec![(0, initial)];
    if let Some(m) = metrics.as_mut() {
        m.record(0, &[("e_g", initial.geometric), ("e_l", initial.logic), ("combined", initial.combined())])?;
    }
    let mut steps = 0;
    let mut last = initial;
    for step in 0..cfg.token_steps {
        if over_budget(&start, cfg.time_budget) {
            break;
        }
        opt.lr = cosine_lr(cfg.token_lr, step, cfg.token_steps, cfg.token_warmup, 0.1);
        let t0 = Instant::now();
        let batch = TokenBatch::random_grid(cfg.token_batch, len, size, &mut data_rng)?;
        let (loss, norm) = model.train_step(&mut store, &mut opt, &batch, &mut drop_rng)?;
        steps = step + 1;
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        let mut row = vec![("loss", loss), ("grad_norm", norm), ("lr", opt.lr), ("ms_per_step", ms)];
        if steps % cfg.eval_every.max(1) == 0 || steps == cfg.token_steps {
            last = evaluate(&store)?;
            history.push((steps, last));
            row.extend([("e_g", last.geometric), ("e_l", last.logic), ("combined", last.combined())]);
            row.push(("seconds", start.elapsed().as_secs_f64()));
        }
        if let Some(m) = metrics.as_mut() {
            m.record(steps as u64, &row)?;
        }
    }
    if history.last().map(|h| h.0) != Some(steps) {
        last = evaluate(&store)?;
        history.push((steps, last));
        if let Some(m) = metrics.as_mut() {
            m.record(steps as u64, &[("e_g", last.geometric), ("e_l", last.logic), ("combined", last.combined())])?;
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&store, &dir.join("token_model.bin"))?;
    }
    Ok(GridOutcome { steps, seconds: start.elapsed().as_secs_f64(), initial, final_errors: last, history })
}

/// A few training steps at an arbitrary length; used to check that long
/// sequences fit in memory. Returns the losses.
pub fn token_steps_at_length(cfg: &RunConfig, len: usize, batch: usize, steps: usize) -> Result<Vec<f64>> {
    let mut rng = stream(cfg.seed, 5);
    let mut store = ParamStore::<f32>::new();
    let model = TokenModel::new(&mut store, "tok", cfg.token_model(), &mut rng)?;
    let mut opt = AdamW::new(cfg.token_lr, cfg.weight_decay);
    (0..steps)
        .map(|_| {
            let b = TokenBatch::random_grid(batch, len, cfg.grid_size, &mut rng)?;
            Ok(model.train_step(&mut store, &mut opt, &b, &mut rng)?.0)
        })
        .collect()
}

/// Online filter state: feeds real observations through the world model and
/// acts on `concat(z_t, d_{t-1})`.
pub struct AgentState {
    state: SequenceState<f32>,
    d_prev: Vec<f32>,
}

impl AgentState {
    pub fn new(wm: &WorldModel) -> Self {
        AgentState { state: wm.seq.zero_state(1), d_prev: vec![0.0; wm.cfg.seq.d] }
    }

    pub fn act(
        &mut self,
        wm: &WorldModel,
        wm_store: &ParamStore<f32>,
        behaviour: &Behaviour<f32>,
        obs: &[u8],
        is_first: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<usize> {
        let pixels: Vec<f32> = obs.iter().map(|&p| p as f32 / 255.0).collect();
        let z = wm.encode_eval(wm_store, &pixels)?;
        let feat: Vec<f32> = z.iter().chain(&self.d_prev).copied().collect();
        let a = behaviour.actor.act(&behaviour.actor_store, &feat, 1, rng)?[0];
        let mut g = Graph::inference();
        let zv = g.constant_from(vec![1, z.len()], z)?;
        let (d, next) = wm.step(&mut g, wm_store, zv, &[a], &[is_first], &self.state)?;
        self.state = next;
        self.d_prev = g.value(d).to_vec();
        Ok(a)
    }
}

/// Mean episodic return of the greedy policy over `episodes` episodes.
pub fn evaluate_agent(
    wm: &WorldModel,
    wm_store: &ParamStore<f32>,
    behaviour: &Behaviour<f32>,
    cfg: &RunConfig,
    episodes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut env = PixelGridEnv::new(cfg.env_size, cfg.time_limit, rng);
    let mut agent = AgentState::new(wm);
    let (mut obs, mut first) = (env.observe(), true);
    let (mut total, mut done) = (0.0, 0);
    while done < episodes {
        let a = agent.act(wm, wm_store, behaviour, &obs, first, None)?;
        let r = env.step(Action::from_index(a), rng);
        total += r.reward as f64;
        first = r.done || r.truncated;
        done += first as usize;
        obs = r.obs;
    }
    Ok(total / episodes as f64)
}

/// Monte-Carlo mean return of the uniform random policy.
pub fn random_baseline(cfg: &RunConfig, episodes: usize, seed: u64) -> f64 {
    let mut rng = stream(seed, 6);
    gridworld::mean_return(cfg.env_size, cfg.time_limit, episodes, &mut rng, |_, r| Action::from_index(r.random_range(0..ACTIONS)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentOutcome {
    pub env_steps: usize,
    pub updates: usize,
    pub seconds: f64,
    pub random_return: f64,
    pub final_return: f64,
    /// `(env step, greedy return)` at every evaluation.
    pub history: Vec<(usize, f64)>,
    pub world_count_total: u64,
    pub behaviour_count_total: u64,
    /// Buffer counters equal the coverage implied by every sampling call.
    pub counters_consistent: bool,
}

pub const AGENT_COLUMNS: &[&str] = &[
    "wm_loss",
    "recon",
    "kl",
    "reward_loss",
    "term_loss",
    "actor_loss",
    "critic_loss",
    "entropy",
    "imagined_return",
    "return_scale",
    "episode_return",
    "eval_return",
    "random_return",
    "v_total",
    "b_total",
    "ms_per_update",
];

/// The full loop: collect with the current policy, train the world model on
/// `sampler`-drawn windows, then train the actor-critic in imagination.
pub fn train_agent(cfg: &RunConfig, out: Option<&Path>) -> Result<AgentOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut init_rng = stream(cfg.seed, 11);
    let mut env_rng = stream(cfg.seed, 12);
    let mut act_rng = stream(cfg.seed, 13);
    let mut replay_rng = stream(cfg.seed, 14);
    let mut train_rng = stream(cfg.seed, 15);
    let mut eval_rng = stream(cfg.seed, 16);

    let mut env = PixelGridEnv::new(cfg.env_size, cfg.time_limit, &mut env_rng);
    let obs_dim = env.obs_dim();
    let mut wm_store = ParamStore::<f32>::new();
    let wm = WorldModel::new(&mut wm_store, cfg.world_model(obs_dim, ACTIONS), &mut init_rng)?;
    let mut wm_opt = AdamW::new(cfg.wm_lr, cfg.weight_decay);
    let mut beh = Behaviour::<f32>::new(Behaviour::<f32>::feat_dim(&wm), ACTIONS, cfg.behaviour(), &mut init_rng);
    let mut replay = ReplayBuffer::new(obs_dim, DEFAULT_CAPACITY.max(cfg.env_steps));
    let random_return = random_baseline(cfg, 4000, cfg.seed);

    let mut metrics = match out {
        Some(dir) => Some(MetricsWriter::create(&dir.join(format!("agent_{}.csv", sampler_name(cfg.sampler))), cfg, AGENT_COLUMNS)?),
        None => None,
    };
    let (mut v_expected, mut b_expected) = (Vec::<u64>::new(), Vec::<u64>::new());
    let tally = |counts: &mut Vec<u64>, starts: &[usize], len: usize, n: usize| {
        counts.resize(n, 0);
        for &s in starts {
            for c in &mut counts[s..s + len] {
                *c += 1;
            }
        }
    };

    let mut obs = env.observe();
    let mut first = true;
    let mut episode_return = 0.0;
    let mut updates = 0;
    let mut history = vec![];
    let mut steps = 0;
    let mut agent = AgentState::new(&wm);
    for step in 0..cfg.env_steps {
        if over_budget(&start, cfg.time_budget) {
            break;
        }
        // Phase 1: one environment step.
        let action =
            if step < cfg.prefill { act_rng.random_range(0..ACTIONS) } else { agent.act(&wm, &wm_store, &beh, &obs, first, Some(&mut act_rng))? };
        let r = env.step(Action::from_index(action), &mut env_rng);
        replay.append(Transition { obs: obs.clone(), action, reward: r.reward, done: r.done, is_first: first })?;
        episode_return += r.reward as f64;
        let mut row: Vec<(&str, f64)> = vec![];
        if r.done || r.truncated {
            row.push(("episode_return", episode_return));
            episode_return = 0.0;
        }
        first = r.done || r.truncated;
        obs = r.obs;
        steps = step + 1;

        let ready = replay.len() >= cfg.wm_len.max(cfg.l_img);
        if step + 1 >= cfg.prefill && ready && (step + 1) % cfg.train_every == 0 {
            let t0 = Instant::now();
            // Phase 2: world model.
            let batch = replay.sample(cfg.wm_batch, cfg.wm_len, Purpose::World, cfg.sampler, &mut replay_rng)?;
            tally(&mut v_expected, &batch.starts, cfg.wm_len, replay.len());
            let rep = wm.train_step(&mut wm_store, &mut wm_opt, &batch, &mut train_rng)?;
            row.extend([("wm_loss", rep.total), ("recon", rep.recon), ("kl", rep.kl), ("reward_loss", rep.reward), ("term_loss", rep.term)]);
            // Phase 3: behaviour in imagination, once the model has had `ac_warmup` updates.
            if updates >= cfg.ac_warmup {
                let ctx = replay.sample(cfg.b_img, cfg.l_img, Purpose::Imagination, cfg.sampler, &mut replay_rng)?;
                tally(&mut b_expected, &ctx.starts, cfg.l_img, replay.len());
                let ro = beh.imagine(&wm, &wm_store, &ctx, Some(&mut train_rng))?;
                let brep = beh.update(&ro)?;
                row.extend([
                    ("actor_loss", brep.actor_loss),
                    ("critic_loss", brep.critic_loss),
                    ("entropy", brep.entropy),
                    ("imagined_return", brep.mean_return),
                    ("return_scale", brep.return_scale),
                ]);
            }
            updates += 1;
            row.push(("ms_per_update", t0.elapsed().as_secs_f64() * 1e3));
        }
        let eval_now = cfg.agent_eval_every > 0 && steps % cfg.agent_eval_every == 0;
        if eval_now {
            let ret = evaluate_agent(&wm, &wm_store, &beh, cfg, cfg.eval_episodes, &mut eval_rng)?;
            history.push((steps, ret));
            row.push(("eval_return", ret));
            row.push(("random_return", random_return));
        }
        if cfg.checkpoint_every > 0 && steps % cfg.checkpoint_every == 0 {
            if let Some(dir) = out {
                save_agent(dir, &wm_store, &beh)?;
            }
        }
        if let Some(m) = metrics.as_mut() {
            if !row.is_empty() {
                let v: u64 = replay.world_counts().iter().sum();
                let b: u64 = replay.behaviour_counts().iter().sum();
                row.extend([("v_total", v as f64), ("b_total", b as f64)]);
                m.record(steps as u64, &row)?;
            }
        }
    }
    let final_return = match history.last() {
        Some(&(s, r)) if s == steps => r,
        _ => {
            let r = evaluate_agent(&wm, &wm_store, &beh, cfg, cfg.eval_episodes, &mut eval_rng)?;
            history.push((steps, r));
            if let Some(m) = metrics.as_mut() {
                m.record(steps as u64, &[("eval_return", r), ("random_return", random_return)])?;
            }
            r
        }
    };
    v_expected.resize(replay.len(), 0);
    b_expected.resize(replay.len(), 0);
    let counters_consistent = replay.world_counts() == v_expected.as_slice() && replay.behaviour_counts() == b_expected.as_slice();
    if let Some(dir) = out {
        save_agent(dir, &wm_store, &beh)?;
        replay.save(&dir.join("replay.log"))?;
    }
    Ok(AgentOutcome {
        env_steps: steps,
        updates,
        seconds: start.elapsed().as_secs_f64(),
        random_return,
        final_return,
        history,
        world_count_total: replay.world_counts().iter().sum(),
        behaviour_count_total: replay.behaviour_counts().iter().sum(),
        counters_consistent,
    })
}

fn save_agent(dir: &Path, wm_store: &ParamStore<f32>, beh: &Behaviour<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    checkpoint::save(wm_store, &dir.join("world_model.bin"))?;
    checkpoint::save(&beh.actor_store, &dir.join("actor.bin"))?;
    checkpoint::save(&beh.critic_store, &dir.join("critic.bin"))
}
