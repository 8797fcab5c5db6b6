//! Named self-checks over the invariants of every component, with timing.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::LatentSpec;
use crate::error::{Error, Result};
use crate::gridworld::{detokenize, dump, parse_dump, random_trajectory, tokenize};
use crate::nn::{check_param_gradients, ParamStore};
use crate::replay::{imagination_score, Purpose, ReplayBuffer, Sampler, TrajectoryBatch, Transition};
use crate::ssd::kernel::{causal_linear_attention, scan, ScanDims, ScanInputs, ScanMode};
use crate::ssd::SsdConfig;
use crate::tensor::{Graph, Real};
use crate::world_model::{WorldModel, WorldModelConfig};

/// Deliberate defects for checking that the suite catches them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Leave the decays as drawn instead of forcing `a = 1` in the
    /// linear-attention check.
    pub skip_unit_decay: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Runs every check in a fixed order.
pub fn run_all(faults: Faults) -> Vec<CheckResult> {
    let mut out = vec![];
    let checks: [(&'static str, &dyn Fn() -> Result<String>); 10] = [
        ("mode_equivalence", &|| mode_equivalence(100, 0)),
        ("linear_attention", &|| linear_attention(faults)),
        ("world_model_gradients", &|| world_model_gradients(24, 0)),
        ("dfs_laws", &dfs_laws),
        ("dfs_sampling_frequencies", &|| dfs_sampling_frequencies(100_000, 0)),
        ("free_bits", &free_bits),
        ("stop_gradients", &stop_gradients),
        ("causality", &causality),
        ("tokenizer_round_trip", &tokenizer_round_trip),
        ("checkpoint_round_trip", &checkpoint_round_trip),
    ];
    for (name, f) in checks {
        let t0 = Instant::now();
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(e) => (false, e.to_string()),
        };
        out.push(CheckResult { name, passed, detail, seconds: t0.elapsed().as_secs_f64() });
    }
    out
}

fn fail(msg: String) -> Error {
    Error::Verify(msg)
}

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(fail(msg()))
    }
}

/// Random scan problem in `f64`: `log a` in `[-1, -0.01]`, everything else in `[-1, 1]`.
pub struct ScanProblem {
    pub dims: ScanDims,
    pub x: Vec<f64>,
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub h0: Option<Vec<f64>>,
}

impl ScanProblem {
    pub fn random(dims: ScanDims, with_h0: bool, rng: &mut impl Rng) -> Self {
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
        ScanProblem {
            dims,
            x: v(dims.x_len(), -1.0, 1.0),
            log_a: v(dims.a_len(), -1.0, -0.01),
            b: v(dims.bc_len(), -1.0, 1.0),
            c: v(dims.bc_len(), -1.0, 1.0),
            h0: with_h0.then(|| v(dims.state_len(), -1.0, 1.0)),
        }
    }

    /// Output and final state in precision `T`.
    pub fn run<T: Real>(&self, mode: ScanMode) -> Result<(Vec<T>, Vec<T>)> {
        let cast = |v: &[f64]| v.iter().map(|&x| T::lit(x)).collect::<Vec<T>>();
        let (x, la, b, c) = (cast(&self.x), cast(&self.log_a), cast(&self.b), cast(&self.c));
        let h0 = self.h0.as_deref().map(cast);
        let out = scan(&self.dims, &ScanInputs { x: &x, log_a: &la, b: &b, c: &c, h0: h0.as_deref() }, mode, false)?;
        Ok((out.y, out.state))
    }
}

fn max_abs_diff<T: Real, U: Real>(a: &[T], b: &[U]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap() - y.to_f64().unwrap()).abs()).fold(0.0, f64::max)
}

/// `instances` random problems (`l ≤ 256`, `d ≤ 64`, `n ≤ 16`); every mode
/// against the recurrent reference within 1e-10 in `f64` and 1e-5 in `f32`.
pub fn mode_equivalence(instances: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let head_dim = rng.random_range(1..=16);
        let heads = rng.random_range(1..=64 / head_dim).min(4);
        let dims = ScanDims { batch: rng.random_range(1..=2), len: rng.random_range(1..=256), heads, head_dim, state: rng.random_range(1..=16) };
        let p = ScanProblem::random(dims, rng.random_bool(0.5), &mut rng);
        let (r64, s64) = p.run::<f64>(ScanMode::Recurrent)?;
        let (r32, _) = p.run::<f32>(ScanMode::Recurrent)?;
        let l = dims.len;
        for mode in [ScanMode::Quadratic, ScanMode::Chunked(1), ScanMode::Chunked(4), ScanMode::Chunked(16), ScanMode::Chunked(l)] {
            let (y, s) = p.run::<f64>(mode)?;
            let e = max_abs_diff(&y, &r64).max(max_abs_diff(&s, &s64));
            worst64 = worst64.max(e);
            ensure(e <= 1e-10, || format!("instance {i} {dims:?} {mode:?}: f64 diff {e:.3e}"))?;
            let (y32, _) = p.run::<f32>(mode)?;
            let e = max_abs_diff(&y32, &r32);
            worst32 = worst32.max(e);
            ensure(e <= 1e-5, || format!("instance {i} {dims:?} {mode:?}: f32 diff {e:.3e}"))?;
        }
    }
    Ok(format!("{instances} instances, max diff f64 {worst64:.2e}, f32 {worst32:.2e}"))
}

/// With every `a_t = 1` each mode reproduces causally masked `C Bᵀ` attention.
pub fn linear_attention(faults: Faults) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dims = ScanDims { batch: 2, len: 40, heads: 3, head_dim: 4, state: 5 };
    let mut p = ScanProblem::random(dims, false, &mut rng);
    if !faults.skip_unit_decay {
        p.log_a.iter_mut().for_each(|v| *v = 0.0);
    }
    let want = causal_linear_attention(&dims, &p.x, &p.b, &p.c);
    let mut worst = 0.0f64;
    for mode in [ScanMode::Recurrent, ScanMode::Quadratic, ScanMode::Chunked(8)] {
        let (y, _) = p.run::<f64>(mode)?;
        let e = max_abs_diff(&y, &want);
        worst = worst.max(e);
        ensure(e <= 1e-6, || format!("{mode:?}: differs from causal linear attention by {e:.3e}"))?;
    }
    Ok(format!("max diff {worst:.2e}"))
}

/// `d = 16`, `K = C = 4` world model on a small observation space.
pub fn tiny_world_model() -> WorldModelConfig {
    let mut cfg = WorldModelConfig::new(12, 3);
    cfg.latent = LatentSpec { categories: 4, classes: 4 };
    cfg.codec_hidden = 16;
    cfg.codec_layers = 1;
    cfg.head_hidden = 16;
    cfg.action_embed = 4;
    cfg.seq = SsdConfig { d: 16, head_dim: 8, state: 4, chunk: 4 };
    cfg
}

/// Random windows with episode boundaries, rewards and terminations.
pub fn random_trajectories(batch: usize, len: usize, obs_dim: usize, actions: usize, rng: &mut impl Rng) -> TrajectoryBatch {
    let n = batch * len;
    let dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
    TrajectoryBatch {
        batch,
        len,
        obs_dim,
        obs: (0..n * obs_dim).map(|_| rng.random_range(0..=255u8) as f32 / 255.0).collect(),
        actions: (0..n).map(|_| rng.random_range(0..actions)).collect(),
        rewards: (0..n).map(|_| if rng.random_bool(0.2) { 1.0 } else { 0.0 }).collect(),
        is_first: (0..n).map(|i| i % len == 0 || dones[i - 1]).collect(),
        dones,
        starts: vec![0; batch],
    }
}

/// Analytic gradient of the full world-model loss against central finite
/// differences at `probes` random parameter elements (`l = 8`, 64-bit).
pub fn world_model_gradients(probes: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let wm = WorldModel::new(&mut store, tiny_world_model(), &mut rng)?;
    let batch = random_trajectories(2, 8, 12, 3, &mut rng);
    let ids: Vec<_> = store.ids().collect();
    let picks: Vec<_> = (0..probes)
        .map(|_| {
            let id = ids[rng.random_range(0..ids.len())];
            (id, rng.random_range(0..store.value(id).len()))
        })
        .collect();
    let stream = rng.random::<u64>();
    let report = check_param_gradients(&mut store, &picks, 1e-6, |g, s| {
        let mut r = ChaCha8Rng::seed_from_u64(stream);
        Ok(wm.loss(g, s, &batch, Some(&mut r))?.0.total)
    })?;
    let e = report.max_rel_error();
    ensure(e <= 1e-4, || format!("max relative error {e:.3e} over {probes} probes"))?;
    Ok(format!("{probes} probes, max relative error {e:.2e}"))
}

fn buffer_with(v: &[u64], b: &[u64]) -> Result<ReplayBuffer> {
    let mut buf = ReplayBuffer::new(1, v.len());
    for _ in v {
        buf.append(Transition { obs: vec![0], action: 0, reward: 0.0, done: false, is_first: false })?;
    }
    buf.with_counts(v.to_vec(), b.to_vec())
}

/// Normalization, the sign rule of `f(v, b)` and the two worked pairs,
/// exhaustively over small buffers.
pub fn dfs_laws() -> Result<String> {
    let mut cases = 0;
    for n in 1..=4usize {
        let total = 5usize.pow(n as u32);
        for code in 0..total {
            let v: Vec<u64> = (0..n).map(|i| (code / 5usize.pow(i as u32) % 5) as u64).collect();
            let b: Vec<u64> = v.iter().rev().map(|x| (x * 2) % 7).collect();
            let buf = buffer_with(&v, &b)?;
            for purpose in [Purpose::World, Purpose::Imagination] {
                let p = buf.probabilities(1, purpose, Sampler::Dfs)?;
                let s: f64 = p.iter().sum();
                ensure((s - 1.0).abs() <= 1e-12, || format!("v={v:?} b={b:?}: probabilities sum to {s}"))?;
            }
            cases += 1;
        }
    }
    for v in 0..12u64 {
        for b in 0..12u64 {
            let f = imagination_score(v, b);
            ensure((f == 0) == (v >= b), || format!("f({v}, {b}) = {f}"))?;
            ensure(v >= b || f == v as i64 - b as i64, || format!("f({v}, {b}) = {f}, expected {}", v as i64 - b as i64))?;
        }
    }
    let e = std::f64::consts::E;
    let (lo, hi) = (1.0 / (1.0 + e), e / (1.0 + e));
    let pw = buffer_with(&[1, 0], &[0, 0])?.probabilities(1, Purpose::World, Sampler::Dfs)?;
    let pi = buffer_with(&[2, 0], &[0, 1])?.probabilities(1, Purpose::Imagination, Sampler::Dfs)?;
    for (got, want) in [(pw[0], lo), (pw[1], hi), (pi[0], hi), (pi[1], lo)] {
        ensure((got - want).abs() <= 1e-4, || format!("worked pair: {got} vs {want}"))?;
    }
    Ok(format!("{cases} counter vectors, worked pairs ({:.4}, {:.4}) and ({:.4}, {:.4})", pw[0], pw[1], pi[0], pi[1]))
}

/// Empirical start frequencies of `draws` single-window samples against the
/// softmax law, each within three multinomial standard deviations.
pub fn dfs_sampling_frequencies(draws: usize, seed: u64) -> Result<String> {
    let v = [0u64, 1, 2, 0, 3, 1];
    let b = [1u64, 0, 4, 0, 1, 2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for purpose in [Purpose::World, Purpose::Imagination] {
        let base = buffer_with(&v, &b)?;
        let probs = base.probabilities(1, purpose, Sampler::Dfs)?;
        let mut counts = vec![0usize; v.len()];
        for _ in 0..draws {
            // Fresh counters each draw so the law under test stays fixed.
            let mut buf = base.clone();
            let s = buf.sample(1, 1, purpose, Sampler::Dfs, &mut rng)?;
            counts[s.starts[0]] += 1;
        }
        for (i, (&c, &p)) in counts.iter().zip(&probs).enumerate() {
            let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
            let z = (c as f64 - draws as f64 * p).abs() / sigma;
            worst = worst.max(z);
            ensure(z <= 3.0, || format!("{purpose:?} start {i}: {c} draws vs expected {:.1} ({z:.2} sigma)", draws as f64 * p))?;
        }
    }
    Ok(format!("{draws} draws per law, worst deviation {worst:.2} sigma"))
}

fn zero_params(store: &mut ParamStore<f64>, prefixes: &[&str]) {
    let ids: Vec<_> = store.ids().filter(|&id| prefixes.iter().any(|p| store.name(id).starts_with(p))).collect();
    for id in ids {
        store.value_mut(id).iter_mut().for_each(|v| *v = 0.0);
    }
}

fn group_grad(store: &ParamStore<f64>, prefix: &str) -> f64 {
    store.ids().filter(|&id| store.name(id).starts_with(prefix)).flat_map(|id| store.grad(id).to_vec()).map(f64::abs).sum()
}

/// With encoder and prior both emitting uniform codes the two KL terms sit
/// on the one-nat floor exactly and send no gradient anywhere.
pub fn free_bits() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let wm = WorldModel::new(&mut store, tiny_world_model(), &mut rng)?;
    zero_params(&mut store, &["wm.codec.enc", "wm.prior"]);
    let batch = random_trajectories(2, 6, 12, 3, &mut rng);
    for (name, pick) in [("dyn", 0usize), ("rep", 1)] {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let (vars, report) = wm.loss(&mut g, &store, &batch, Some(&mut r))?;
        let (value, var) = if pick == 0 { (report.dyn_loss, vars.dyn_loss) } else { (report.rep_loss, vars.rep_loss) };
        ensure(value == 1.0, || format!("L_{name} = {value}, expected exactly 1"))?;
        g.backward(var)?;
        store.zero_grads();
        store.absorb_grads(&g);
        let total: f64 = store.ids().flat_map(|id| store.grad(id).to_vec()).map(f64::abs).sum();
        ensure(total == 0.0, || format!("L_{name} at the floor still sends gradient {total:e}"))?;
    }
    Ok("L_dyn = L_rep = 1 with zero gradient".into())
}

/// Each KL term reaches only its own side of the stop-gradient.
pub fn stop_gradients() -> Result<String> {
    let mut cfg = tiny_world_model();
    cfg.free_bits = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let wm = WorldModel::new(&mut store, cfg, &mut rng)?;
    let batch = random_trajectories(2, 6, 12, 3, &mut rng);
    let mut grads = |pick: usize| -> Result<[f64; 3]> {
        let mut g = Graph::new();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (vars, _) = wm.loss(&mut g, &store, &batch, Some(&mut r))?;
        g.backward(if pick == 0 { vars.dyn_loss } else { vars.rep_loss })?;
        store.zero_grads();
        store.absorb_grads(&g);
        Ok([group_grad(&store, "wm.codec.enc"), group_grad(&store, "wm.prior"), group_grad(&store, "wm.seq")])
    };
    let [enc, prior, seq] = grads(0)?;
    ensure(enc == 0.0 && prior > 0.0 && seq > 0.0, || format!("L_dyn gradients: encoder {enc:e}, prior {prior:e}, sequence {seq:e}"))?;
    let [enc, prior, seq] = grads(1)?;
    ensure(enc > 0.0 && prior == 0.0 && seq == 0.0, || format!("L_rep gradients: encoder {enc:e}, prior {prior:e}, sequence {seq:e}"))?;
    Ok("L_dyn trains prior and sequence only; L_rep trains the encoder only".into())
}

/// Changing observations and actions from step 5 on leaves the first five
/// deterministic states bit-identical in every mode.
pub fn causality() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let base = random_trajectories(1, 8, 12, 3, &mut rng);
    let mut pert = base.clone();
    pert.obs[5 * 12..].iter_mut().for_each(|v| *v = 1.0 - *v);
    pert.actions[5] = (pert.actions[5] + 1) % 3;
    for mode in [ScanMode::Recurrent, ScanMode::Quadratic, ScanMode::Chunked(4)] {
        let mut cfg = tiny_world_model();
        cfg.mode = mode;
        let mut store = ParamStore::<f64>::new();
        let wm = WorldModel::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(7))?;
        let run = |b: &TrajectoryBatch| -> Result<Vec<f64>> {
            let mut g = Graph::inference();
            let o = wm.observe(&mut g, &store, b, None, None)?;
            Ok(g.value(o.deter).to_vec())
        };
        let (a, b) = (run(&base)?, run(&pert)?);
        let d = wm.cfg.seq.d;
        ensure(a[..5 * d] == b[..5 * d], || format!("{mode:?}: a later input changed an earlier state"))?;
        ensure(a[5 * d..] != b[5 * d..], || format!("{mode:?}: the perturbation had no effect at all"))?;
    }
    Ok("recurrent, quadratic and chunked".into())
}

pub fn tokenizer_round_trip() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for (size, frames) in [(5, 8), (5, 64), (6, 3), (9, 2)] {
        let traj = random_trajectory(size, frames, &mut rng);
        let tokens = tokenize(&traj);
        ensure(tokens.len() == frames * (size * size + 1), || format!("{size}x{size} x {frames}: {} tokens", tokens.len()))?;
        ensure(detokenize(&tokens, size)? == traj, || "token round trip changed the trajectory".into())?;
        ensure(parse_dump(&dump(&traj))? == traj, || "text dump round trip changed the trajectory".into())?;
    }
    Ok("token and text forms for 4 grid sizes".into())
}

pub fn checkpoint_round_trip() -> Result<String> {
    let mut store = ParamStore::<f32>::new();
    WorldModel::new(&mut store, tiny_world_model(), &mut ChaCha8Rng::seed_from_u64(9))?;
    let dir = std::env::temp_dir().join(format!("ssdwm-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let bin = dir.join("wm.bin");
    let result = (|| {
        crate::checkpoint::save(&store, &bin)?;
        let mut back = ParamStore::<f32>::new();
        WorldModel::new(&mut back, tiny_world_model(), &mut ChaCha8Rng::seed_from_u64(10))?;
        crate::checkpoint::load(&mut back, &bin)?;
        let same = store.ids().all(|id| store.value(id).iter().zip(back.value(id)).all(|(a, b)| a.to_bits() == b.to_bits()));
        ensure(same, || "reloaded parameters differ".into())?;
        let mut bytes = std::fs::read(&bin)?;
        bytes[0] ^= 1;
        std::fs::write(&bin, bytes)?;
        ensure(crate::checkpoint::load(&mut back, &bin).is_err(), || "corrupted checkpoint was accepted".into())?;
        Ok(format!("{} tensors bit-exact, corruption detected", store.len()))
    })();
    std::fs::remove_dir_all(&dir).ok();
    result
}
