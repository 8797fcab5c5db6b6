use proptest::prelude::*;
use rand::{Rng, SeedableRng};

use super::*;
use crate::codec::LatentSpec;
use crate::ssd::SsdConfig;
use crate::world_model::tests::{random_batch, tiny_config};
use crate::world_model::WorldModelConfig;

fn small_behaviour() -> BehaviourConfig {
    BehaviourConfig { actor_hidden: 16, critic_hidden: 16, ..BehaviourConfig::default() }
}

fn setup<T: Real>(seed: u64) -> (WorldModel, ParamStore<T>, Behaviour<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let wm = WorldModel::new(&mut store, tiny_config(), &mut rng).unwrap();
    let beh = Behaviour::new(Behaviour::<T>::feat_dim(&wm), 3, BehaviourConfig { horizon: 6, ..small_behaviour() }, &mut rng);
    (wm, store, beh)
}

/// Explicit mixture of n-step returns, independent of the recursion.
fn lambda_oracle(r: &[f64], c: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = r.len();
    let nstep = |t: usize, n: usize| {
        let (mut g, mut disc) = (0.0, 1.0);
        for k in t..t + n {
            g += disc * r[k];
            disc *= gamma * c[k];
        }
        g + disc * v[t + n]
    };
    (0..h)
        .map(|t| {
            let m = h - t;
            let mixed: f64 = (1..m).map(|n| (1.0 - lambda) * lambda.powi(n as i32 - 1) * nstep(t, n)).sum();
            mixed + lambda.powi(m as i32 - 1) * nstep(t, m)
        })
        .collect()
}

#[test]
fn lambda_returns_special_cases() {
    let r = [1.0, 2.0, 3.0];
    let c = [1.0; 3];
    let mc = lambda_returns(&r, &c, &[0.0; 4], 1, 0.5, 1.0);
    assert_eq!(mc, vec![1.0 + 0.5 * 2.0 + 0.25 * 3.0, 2.0 + 0.5 * 3.0, 3.0]);
    let v = [0.3, -0.2, 0.7, 1.1];
    let cc = [1.0, 0.5, 0.0];
    let td = lambda_returns(&r, &cc, &v, 1, 0.9, 0.0);
    for t in 0..3 {
        assert!((td[t] - (r[t] + 0.9 * cc[t] * v[t + 1])).abs() < 1e-15);
    }
}

#[test]
fn lambda_returns_match_nstep_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..50 {
        let h = 6;
        let r: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let c: Vec<f64> = (0..h).map(|_| rng.random_range(0.0..1.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = lambda_returns(&r, &c, &v, 1, 0.985, 0.95);
        let want = lambda_oracle(&r, &c, &v, 0.985, 0.95);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn lambda_returns_are_per_row() {
    // Interleaved batch rows are independent recursions.
    let r = [1.0, 10.0, 2.0, 20.0];
    let c = [1.0; 4];
    let v = [0.0, 0.0, 0.0, 0.0, 5.0, 50.0];
    let both = lambda_returns(&r, &c, &v, 2, 0.9, 0.8);
    let a = lambda_returns(&[1.0, 2.0], &[1.0; 2], &[0.0, 0.0, 5.0], 1, 0.9, 0.8);
    let b = lambda_returns(&[10.0, 20.0], &[1.0; 2], &[0.0, 0.0, 50.0], 1, 0.9, 0.8);
    assert_eq!(both, vec![a[0], b[0], a[1], b[1]]);
}

#[test]
fn percentile_and_normalizer() {
    let d: Vec<f64> = (0..=100).map(f64::from).collect();
    assert_eq!(percentile(&d, 0.05), 5.0);
    assert_eq!(percentile(&d, 0.95), 95.0);
    assert_eq!(percentile(&[1.0, 3.0], 0.5), 2.0);
    let mut n = ReturnNormalizer::new(0.5);
    assert_eq!(n.update(&[0.0, 0.1]), 1.0);
    let s = n.update(&d);
    assert!((n.range - (0.5 * (0.5 * 0.09) + 0.5 * 90.0)).abs() < 1e-12);
    assert_eq!(s, n.range);
}

#[test]
fn zero_horizon_holds_only_the_seed() {
    let (wm, store, beh) = setup::<f64>(1);
    let ctx = random_batch(2, 8, 12, 3, 2);
    let mut policy = ActorPolicy { actor: &beh.actor, store: &beh.actor_store };
    let ro = imagine(&wm, &store, &mut policy, &ctx, 0, None).unwrap();
    assert_eq!(ro.features.len(), 2 * ro.feat_dim);
    assert!(ro.actions.is_empty() && ro.rewards.is_empty());
}

#[test]
fn eval_rollouts_are_reproducible() {
    let (wm, store, beh) = setup::<f32>(3);
    let ctx = random_batch(3, 8, 12, 3, 4);
    let a = beh.imagine(&wm, &store, &ctx, None).unwrap();
    let b = beh.imagine(&wm, &store, &ctx, None).unwrap();
    assert_eq!(a, b);
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(9);
    let a = beh.imagine(&wm, &store, &ctx, Some(&mut r1)).unwrap();
    let b = beh.imagine(&wm, &store, &ctx, Some(&mut r2)).unwrap();
    assert_eq!(a, b);
    assert!(a.continues.iter().all(|c| (0.0..=1.0).contains(c)));
}

#[test]
fn stepped_rollout_matches_full_scan() {
    let (wm, store, beh) = setup::<f64>(5);
    let ctx = random_batch(2, 8, 12, 3, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ro = beh.imagine(&wm, &store, &ctx, Some(&mut rng)).unwrap();
    let (b, l, h) = (2, 8, ro.horizon);
    let (kc, d) = (wm.cfg.latent.width(), wm.cfg.seq.d);

    // Realized token sequence: the warm-up context, then the imagined steps.
    let mut g = Graph::inference();
    let obs = g.constant_from(vec![b * l, 12], ctx.obs.iter().map(|&v| v as f64).collect()).unwrap();
    let mut prng = ChaCha8Rng::seed_from_u64(7);
    let post = wm.codec.encode(&mut g, &store, obs, Some(&mut prng)).unwrap();
    let codes = g.value(post.z).to_vec();
    let total = l - 1 + h;
    let (mut z, mut acts, mut firsts) = (vec![], vec![], vec![]);
    for bi in 0..b {
        for t in 0..l - 1 {
            z.extend_from_slice(&codes[(bi * l + t) * kc..(bi * l + t + 1) * kc]);
            acts.push(ctx.actions[bi * l + t]);
            firsts.push(ctx.is_first[bi * l + t]);
        }
        for k in 0..h {
            z.extend_from_slice(&ro.feature(k, bi)[..kc]);
            acts.push(ro.actions[k * b + bi]);
            firsts.push(k == 0 && ro.seed_first[bi]);
        }
    }
    let zv = g.constant_from(vec![b * total, kc], z).unwrap();
    let tok = wm.tokens(&mut g, &store, zv, &acts, &firsts).unwrap();
    let tok = g.reshape(tok, vec![b, total, d]).unwrap();
    let (deter, _) = wm.seq.forward::<f64, ChaCha8Rng>(&mut g, &store, tok, None, None).unwrap();
    let dv = g.value(deter);
    let mut worst: f64 = 0.0;
    for bi in 0..b {
        for k in 0..=h {
            let at = (bi * total + l - 2 + k) * d;
            for (x, y) in ro.feature(k, bi)[kc..].iter().zip(&dv[at..at + d]) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    assert!(worst <= 1e-5, "{worst}");
}

#[test]
fn behaviour_update_leaves_world_model_untouched() {
    let (wm, store, mut beh) = setup::<f64>(8);
    let before = store.clone();
    let ctx = random_batch(4, 8, 12, 3, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ro = beh.imagine(&wm, &store, &ctx, Some(&mut rng)).unwrap();
    let rep = beh.update(&ro).unwrap();
    assert!(rep.actor_loss.is_finite() && rep.critic_loss.is_finite());
    for id in store.ids() {
        assert_eq!(store.value(id), before.value(id));
        assert!(store.grad(id).iter().all(|&g| g == 0.0));
    }
}

fn actor_grads(beh: &Behaviour<f64>, feat: &[f64], actions: &[usize], adv: &[f64], entropy: f64) -> Vec<Vec<f64>> {
    let mut store = beh.actor_store.clone();
    let mut g = Graph::new();
    let w = vec![1.0; actions.len()];
    let (loss, _) = actor_loss(&mut g, &store, &beh.actor, feat, actions, adv, &w, entropy).unwrap();
    g.backward(loss).unwrap();
    store.zero_grads();
    store.absorb_grads(&g);
    store.ids().map(|id| store.grad(id).to_vec()).collect()
}

#[test]
fn zero_advantage_gives_pure_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let beh = Behaviour::<f64>::new(5, 3, small_behaviour(), &mut rng);
    let n = 7;
    let feat: Vec<f64> = (0..n * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
    let got = actor_grads(&beh, &feat, &actions, &[0.0; 7], 0.3);

    // Entropy-only loss built directly: 0.3 · mean Σ p log p.
    let mut store = beh.actor_store.clone();
    let mut g = Graph::new();
    let x = g.constant_from(vec![n, 5], feat.clone()).unwrap();
    let logits = beh.actor.net.forward(&mut g, &store, x).unwrap();
    let lp = g.log_softmax(logits).unwrap();
    let p = g.softmax(logits).unwrap();
    let plogp = g.mul(p, lp).unwrap();
    let s = g.sum(plogp);
    let loss = g.scale(s, 0.3 / n as f64);
    g.backward(loss).unwrap();
    store.zero_grads();
    store.absorb_grads(&g);
    for (id, want) in store.ids().zip(&got) {
        for (a, b) in store.grad(id).iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn dominant_advantage_raises_its_action() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut beh = Behaviour::<f64>::new(4, 3, BehaviourConfig { entropy: 0.0, ..small_behaviour() }, &mut rng);
    let n = 6;
    let feat: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let actions = vec![2; n];
    let prob2 = |beh: &Behaviour<f64>| {
        let mut g = Graph::inference();
        let x = g.constant_from(vec![n, 4], feat.clone()).unwrap();
        let l = beh.actor.net.forward(&mut g, &beh.actor_store, x).unwrap();
        let p = g.softmax(l).unwrap();
        g.value(p).chunks(3).map(|r| r[2]).sum::<f64>()
    };
    let before = prob2(&beh);
    let mut g = Graph::new();
    let (loss, _) = actor_loss(&mut g, &beh.actor_store, &beh.actor, &feat, &actions, &[5.0; 6], &[1.0; 6], 0.0).unwrap();
    apply_step(&mut g, loss, &mut beh.actor_store, &mut beh.actor_opt, 100.0).unwrap();
    assert!(prob2(&beh) > before);
}

#[test]
fn clipping_bounds_applied_norm() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut beh = Behaviour::<f64>::new(4, 3, small_behaviour(), &mut rng);
    let ids: Vec<_> = beh.actor_store.ids().collect();
    let total: usize = ids.iter().map(|&id| beh.actor_store.value(id).len()).sum();
    let each = 1000.0 / (total as f64).sqrt();
    for id in ids {
        let len = beh.actor_store.value(id).len();
        beh.actor_store.set_grad(id, vec![each; len]);
    }
    let pre = beh.actor_store.clip_grad_norm(100.0);
    assert!((pre - 1000.0).abs() < 1e-6);
    assert!(beh.actor_store.grad_norm() <= 100.0 + 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn positive_scaling_keeps_update_direction(seed in 0u64..1000, scale in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beh = Behaviour::<f64>::new(4, 3, small_behaviour(), &mut rng);
        let n = 5;
        let feat: Vec<f64> = (0..n * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
        let adv: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scaled: Vec<f64> = adv.iter().map(|a| a / scale).collect();
        // The output bias gradient is the summed logit gradient.
        let bias = beh.actor.net.output_layer().b.unwrap();
        let pos = beh.actor_store.ids().position(|id| id == bias).unwrap();
        let ga = &actor_grads(&beh, &feat, &actions, &adv, 0.0)[pos];
        let gb = &actor_grads(&beh, &feat, &actions, &scaled, 0.0)[pos];
        let best = |g: &[f64]| (0..g.len()).fold(0, |b, i| if -g[i] > -g[b] { i } else { b });
        prop_assert_eq!(best(ga), best(gb));
        for (a, b) in ga.iter().zip(gb) {
            prop_assert!((a / scale - b).abs() <= 1e-9 * a.abs().max(1e-3));
        }
    }
}

#[test]
fn overfit_toy_mdp_predicts_rewards_exactly() {
    // States {0, 1}; the action picks the next state; reward 1 for leaving state 1.
    let reward = |s: usize, a: usize| if s == 1 && a == 0 { 1.0 } else { 0.0 };
    let mut cfg = WorldModelConfig::new(2, 2);
    cfg.latent = LatentSpec { categories: 2, classes: 4 };
    cfg.codec_hidden = 32;
    cfg.codec_layers = 1;
    cfg.head_hidden = 32;
    cfg.action_embed = 4;
    cfg.seq = SsdConfig { d: 16, head_dim: 8, state: 4, chunk: 4 };
    cfg.dropout = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::<f32>::new();
    let wm = WorldModel::new(&mut store, cfg, &mut rng).unwrap();
    let mut opt = AdamW::new(3e-3, 0.0);

    let episode = |rng: &mut ChaCha8Rng, b: usize, l: usize| {
        let mut batch = TrajectoryBatch {
            batch: b,
            len: l,
            obs_dim: 2,
            obs: vec![],
            actions: vec![],
            rewards: vec![],
            dones: vec![false; b * l],
            is_first: (0..b * l).map(|i| i % l == 0).collect(),
            starts: vec![0; b],
        };
        for _ in 0..b {
            let mut s = rng.random_range(0..2);
            for _ in 0..l {
                let a = rng.random_range(0..2);
                batch.obs.extend(if s == 0 { [1.0, 0.0] } else { [0.0, 1.0] });
                batch.actions.push(a);
                batch.rewards.push(reward(s, a) as f32);
                s = a;
            }
        }
        batch
    };
    for _ in 0..400 {
        let batch = episode(&mut rng, 16, 8);
        wm.train_step(&mut store, &mut opt, &batch, &mut rng).unwrap();
    }

    let script = [0usize, 1, 1, 0, 1];
    let ctx = episode(&mut rng, 8, 8);
    let mut step = 0;
    let mut policy = |_: &[f32], n: usize| {
        let a = script[step % script.len()];
        step += 1;
        vec![a; n]
    };
    let ro = imagine(&wm, &store, &mut policy, &ctx, 5, None).unwrap();
    for bi in 0..8 {
        let mut s = if ctx.obs[(bi * 8 + 7) * 2 + 1] > 0.5 { 1 } else { 0 };
        for (t, &a) in script.iter().enumerate() {
            assert_eq!(ro.actions[t * 8 + bi], a);
            let got = ro.rewards[t * 8 + bi];
            assert_eq!(got.round(), reward(s, a), "row {bi} step {t}: {got}");
            s = a;
        }
    }
}
