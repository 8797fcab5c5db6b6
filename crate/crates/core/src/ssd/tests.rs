use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernel::{self, causal_linear_attention, Saved, ScanInputs};
use super::*;
use crate::nn::{check_param_gradients, ParamStore};
use crate::tensor::{Graph, Real, Tensor};

struct Instance {
    d: ScanDims,
    x: Vec<f64>,
    log_a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    h0: Option<Vec<f64>>,
}

impl Instance {
    fn random(d: ScanDims, with_h0: bool, seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
        let x = v(d.x_len(), -1.0, 1.0);
        let log_a = v(d.a_len(), -1.0, -0.01);
        let b = v(d.bc_len(), -1.0, 1.0);
        let c = v(d.bc_len(), -1.0, 1.0);
        let h0 = with_h0.then(|| v(d.state_len(), -1.0, 1.0));
        Instance { d, x, log_a, b, c, h0 }
    }

    fn inputs(&self) -> ScanInputs<'_, f64> {
        ScanInputs { x: &self.x, log_a: &self.log_a, b: &self.b, c: &self.c, h0: self.h0.as_deref() }
    }

    fn cast<T: Real>(v: &[f64]) -> Vec<T> {
        v.iter().map(|&x| T::lit(x)).collect()
    }

    fn run<T: Real>(&self, mode: ScanMode) -> (Vec<T>, Vec<T>) {
        let (x, la, b, c) = (Self::cast::<T>(&self.x), Self::cast::<T>(&self.log_a), Self::cast::<T>(&self.b), Self::cast::<T>(&self.c));
        let h0 = self.h0.as_ref().map(|h| Self::cast::<T>(h));
        let inp = ScanInputs { x: &x, log_a: &la, b: &b, c: &c, h0: h0.as_deref() };
        let out = kernel::scan(&self.d, &inp, mode, false).unwrap();
        (out.y, out.state)
    }
}

/// Plain per-element loop over the recurrence.
fn loop_oracle(inst: &Instance) -> (Vec<f64>, Vec<f64>) {
    let d = inst.d;
    let (p, n) = (d.head_dim, d.state);
    let mut y = vec![0.0; d.x_len()];
    let mut hs = inst.h0.clone().unwrap_or_else(|| vec![0.0; d.state_len()]);
    for bi in 0..d.batch {
        for hh in 0..d.heads {
            for t in 0..d.len {
                let a = inst.log_a[(bi * d.len + t) * d.heads + hh].exp();
                for pi in 0..p {
                    let xv = inst.x[((bi * d.len + t) * d.heads + hh) * p + pi];
                    let mut acc = 0.0;
                    for ni in 0..n {
                        let k = ((bi * d.heads + hh) * p + pi) * n + ni;
                        hs[k] = a * hs[k] + xv * inst.b[(bi * d.len + t) * n + ni];
                        acc += hs[k] * inst.c[(bi * d.len + t) * n + ni];
                    }
                    y[((bi * d.len + t) * d.heads + hh) * p + pi] = acc;
                }
            }
        }
    }
    (y, hs)
}

fn max_diff<T: Real>(a: &[T], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.to_f64().unwrap() - y).abs()).fold(0.0, f64::max)
}

fn all_modes(l: usize) -> Vec<ScanMode> {
    vec![ScanMode::Recurrent, ScanMode::Quadratic, ScanMode::Chunked(1), ScanMode::Chunked(4), ScanMode::Chunked(16), ScanMode::Chunked(l)]
}

#[test]
fn unit_decay_gives_prefix_sums() {
    let d = ScanDims { batch: 1, len: 3, heads: 1, head_dim: 1, state: 1 };
    let inst = Instance { d, x: vec![1.0, 2.0, 3.0], log_a: vec![0.0; 3], b: vec![1.0; 3], c: vec![1.0; 3], h0: None };
    for mode in all_modes(3) {
        let (y, state) = inst.run::<f64>(mode);
        assert_eq!(y, vec![1.0, 3.0, 6.0], "{mode:?}");
        assert_eq!(state, vec![6.0]);
    }
}

#[test]
fn zero_decay_is_memoryless() {
    let d = ScanDims { batch: 1, len: 5, heads: 2, head_dim: 3, state: 2 };
    let mut inst = Instance::random(d, false, 1);
    inst.log_a = vec![f64::NEG_INFINITY; d.a_len()];
    for mode in all_modes(5) {
        let (y, _) = inst.run::<f64>(mode);
        for t in 0..d.len {
            let bc: f64 = (0..d.state).map(|k| inst.b[t * d.state + k] * inst.c[t * d.state + k]).sum();
            for hp in 0..d.heads * d.head_dim {
                let i = t * d.heads * d.head_dim + hp;
                assert!((y[i] - inst.x[i] * bc).abs() < 1e-14, "{mode:?}");
            }
        }
    }
}

#[test]
fn decay_matrix_is_cumulative_product() {
    let d = ScanDims { batch: 1, len: 3, heads: 1, head_dim: 1, state: 3 };
    let half = 0.5f64.ln();
    let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let inst = Instance { d, x: vec![1.0; 3], log_a: vec![-0.3, half, half], b: eye.clone(), c: eye, h0: None };
    let out = kernel::scan(&d, &inst.inputs(), ScanMode::Quadratic, true).unwrap();
    let Saved::Materialized { decay, .. } = out.saved else { panic!("quadratic mode saves L") };
    let want = [1.0, 0.0, 0.0, 0.5, 1.0, 0.0, 0.25, 0.5, 1.0];
    for (a, b) in decay.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn recurrent_matches_loop_oracle() {
    let d = ScanDims { batch: 2, len: 16, heads: 2, head_dim: 4, state: 4 };
    let inst = Instance::random(d, false, 7);
    let (want_y, want_h) = loop_oracle(&inst);
    let (y, h) = inst.run::<f64>(ScanMode::Recurrent);
    assert!(max_diff(&y, &want_y) <= 1e-10);
    assert!(max_diff(&h, &want_h) <= 1e-10);
}

#[test]
fn chunked_l208_q16_matches_recurrent() {
    let d = ScanDims { batch: 2, len: 208, heads: 4, head_dim: 8, state: 16 };
    let inst = Instance::random(d, false, 11);
    let (r32, _) = inst.run::<f32>(ScanMode::Recurrent);
    let (c32, _) = inst.run::<f32>(ScanMode::Chunked(16));
    let r: Vec<f64> = r32.iter().map(|&v| v as f64).collect();
    assert!(max_diff(&c32, &r) <= 1e-5);
}

#[test]
fn quadratic_mode_enforces_cap() {
    let d = ScanDims { batch: 1, len: kernel::DEFAULT_QUADRATIC_CAP + 1, heads: 1, head_dim: 1, state: 1 };
    let inst = Instance::random(d, false, 0);
    let err = kernel::scan(&d, &inst.inputs(), ScanMode::Quadratic, false).unwrap_err();
    assert!(matches!(err, crate::Error::MaterializationCap { .. }));
}

#[test]
fn rejects_non_finite_input() {
    let d = ScanDims { batch: 1, len: 4, heads: 1, head_dim: 2, state: 2 };
    let mut inst = Instance::random(d, false, 0);
    inst.x[3] = f64::NAN;
    assert!(kernel::scan(&d, &inst.inputs(), ScanMode::Recurrent, false).is_err());
}

#[test]
fn unit_decay_reduces_to_causal_linear_attention() {
    // Small integers keep every product and sum exact in floating point.
    let d = ScanDims { batch: 2, len: 12, heads: 3, head_dim: 2, state: 3 };
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut ints = |n: usize| (0..n).map(|_| r.random_range(-3i32..=3) as f64).collect::<Vec<f64>>();
    let inst = Instance { d, x: ints(d.x_len()), log_a: vec![0.0; d.a_len()], b: ints(d.bc_len()), c: ints(d.bc_len()), h0: None };
    let want = causal_linear_attention(&d, &inst.x, &inst.b, &inst.c);
    for mode in [ScanMode::Quadratic, ScanMode::Recurrent, ScanMode::Chunked(4)] {
        assert_eq!(inst.run::<f64>(mode).0, want, "{mode:?}");
    }
}

#[test]
fn perturbing_later_input_leaves_earlier_outputs_unchanged() {
    let d = ScanDims { batch: 1, len: 20, heads: 2, head_dim: 3, state: 4 };
    let base = Instance::random(d, true, 3);
    for t in [0usize, 7, 19] {
        let mut pert = Instance::random(d, true, 3);
        let row = d.heads * d.head_dim;
        for v in &mut pert.x[t * row..(t + 1) * row] {
            *v += 0.5;
        }
        pert.b[t * d.state] += 1.0;
        pert.log_a[t * d.heads] -= 0.2;
        for mode in all_modes(d.len) {
            let (y0, _) = base.run::<f64>(mode);
            let (y1, _) = pert.run::<f64>(mode);
            assert_eq!(y0[..t * row], y1[..t * row], "{mode:?} t={t}");
        }
    }
}

fn field_mut(i: &mut Instance, field: usize, j: usize) -> &mut f64 {
    match field {
        0 => &mut i.x[j],
        1 => &mut i.log_a[j],
        2 => &mut i.b[j],
        3 => &mut i.c[j],
        _ => &mut i.h0.as_mut().unwrap()[j],
    }
}

fn kernel_fd(mode: ScanMode, with_h0: bool) -> f64 {
    let d = ScanDims { batch: 2, len: 9, heads: 2, head_dim: 3, state: 2 };
    let inst = Instance::random(d, with_h0, 21);
    let mut r = ChaCha8Rng::seed_from_u64(99);
    let w: Vec<f64> = (0..d.x_len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let loss = |inst: &Instance| -> f64 {
        let out = kernel::scan(&d, &inst.inputs(), mode, false).unwrap();
        out.y.iter().zip(&w).map(|(a, b)| a * b).sum()
    };
    let out = kernel::scan(&d, &inst.inputs(), mode, true).unwrap();
    let g = kernel::scan_backward(&d, &inst.inputs(), &out.saved, &w);
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = |field: usize, analytic: &[f64]| {
        for (j, &a) in analytic.iter().enumerate() {
            let mut pert = Instance { d, x: inst.x.clone(), log_a: inst.log_a.clone(), b: inst.b.clone(), c: inst.c.clone(), h0: inst.h0.clone() };
            let base = *field_mut(&mut pert, field, j);
            *field_mut(&mut pert, field, j) = base + eps;
            let f1 = loss(&pert);
            *field_mut(&mut pert, field, j) = base - eps;
            let f0 = loss(&pert);
            worst = worst.max(crate::tensor::gradcheck::relative_error(a, (f1 - f0) / (2.0 * eps)));
        }
    };
    probe(0, &g.dx);
    probe(1, &g.dlog_a);
    probe(2, &g.db);
    probe(3, &g.dc);
    if let Some(dh0) = &g.dh0 {
        probe(4, dh0);
    }
    worst
}

#[test]
fn kernel_gradients_match_finite_differences() {
    for mode in [ScanMode::Recurrent, ScanMode::Quadratic, ScanMode::Chunked(2), ScanMode::Chunked(4), ScanMode::Chunked(9)] {
        for h0 in [false, true] {
            let e = kernel_fd(mode, h0);
            assert!(e <= 1e-6, "{mode:?} h0={h0}: {e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn modes_agree(
        batch in 1usize..3,
        len in 1usize..=256,
        heads in 1usize..4,
        head_dim in 1usize..5,
        state in 1usize..5,
        with_h0 in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let d = ScanDims { batch, len, heads, head_dim, state };
        let inst = Instance::random(d, with_h0, seed);
        let (r64, h64) = inst.run::<f64>(ScanMode::Recurrent);
        let (r32, _) = inst.run::<f32>(ScanMode::Recurrent);
        for mode in all_modes(len) {
            let (y64, s64) = inst.run::<f64>(mode);
            prop_assert!(max_diff(&y64, &r64) <= 1e-10, "{:?} f64 {}", mode, max_diff(&y64, &r64));
            prop_assert!(max_diff(&s64, &h64) <= 1e-10);
            let (y32, _) = inst.run::<f32>(mode);
            let r32_64: Vec<f64> = r32.iter().map(|&v| v as f64).collect();
            prop_assert!(max_diff(&y32, &r32_64) <= 1e-5, "{:?} f32 {}", mode, max_diff(&y32, &r32_64));
        }
    }

    #[test]
    fn decays_stay_in_unit_interval(raw in proptest::collection::vec(-30.0f64..30.0, 1..64), alpha in -5.0f64..5.0) {
        // a = exp(-softplus(raw) * exp(alpha)) must lie in (0, 1] up to underflow.
        for r in raw {
            let a = (-crate::tensor::softplus(r) * alpha.exp()).exp();
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}

// ----- blocks -----

fn small_cfg() -> SsdConfig {
    SsdConfig { d: 8, head_dim: 4, state: 3, chunk: 4 }
}

fn rand_input<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::lit(r.random_range(-1.0..1.0))).collect()).unwrap()
}

type NoRng = Option<(f64, &'static mut ChaCha8Rng)>;

#[test]
fn zero_output_projection_gives_identity_block() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let layer = SsdLayer::new(&mut store, "b", small_cfg(), true, &mut rng).unwrap();
    let mut g = Graph::inference();
    let x = rand_input::<f64>(&[2, 5, 8], 1);
    let xv = g.constant(x.clone());
    let (y, _) = layer.forward(&mut g, &store, xv, None, ScanMode::Chunked(4), None as NoRng).unwrap();
    assert_eq!(g.value(y), x.data());
}

#[test]
fn head_order_does_not_change_output() {
    let cfg = SsdConfig { d: 12, head_dim: 4, state: 3, chunk: 4 };
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let layer = SsdLayer::new(&mut store, "b", cfg, false, &mut rng).unwrap();
    let x = rand_input::<f64>(&[2, 7, 12], 2);
    let run = |store: &ParamStore<f64>| {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (y, _) = layer.forward(&mut g, store, xv, None, ScanMode::Chunked(4), None as NoRng).unwrap();
        g.value(y).to_vec()
    };
    let before = run(&store);

    // Permute heads: columns of the x and z projections, the Δ columns,
    // per-head decay constants and the rows of the output projection.
    let perm = [2usize, 0, 1];
    let (d, p, n, h) = (12, 4, 3, 3);
    let width = 2 * d + 2 * n + h;
    let col_map = |c: usize| -> usize {
        if c < 2 * d {
            let (half, within) = (c / d, c % d);
            half * d + perm[within / p] * p + within % p
        } else if c >= 2 * d + 2 * n {
            2 * d + 2 * n + perm[c - 2 * d - 2 * n]
        } else {
            c
        }
    };
    let mut permuted = store.clone();
    let id = |s: &ParamStore<f64>, name: &str| s.find(name).unwrap();
    let (w, b) = (id(&store, "b.in.w"), id(&store, "b.in.b"));
    for c in 0..width {
        let dst = col_map(c);
        for r in 0..d {
            permuted.value_mut(w)[r * width + dst] = store.value(w)[r * width + c];
        }
        permuted.value_mut(b)[dst] = store.value(b)[c];
    }
    let al = id(&store, "b.a_log");
    for (k, &pk) in perm.iter().enumerate() {
        permuted.value_mut(al)[pk] = store.value(al)[k];
    }
    let ow = id(&store, "b.out.w");
    for r in 0..d {
        let dst = perm[r / p] * p + r % p;
        for c in 0..d {
            permuted.value_mut(ow)[dst * d + c] = store.value(ow)[r * d + c];
        }
    }
    let after = run(&permuted);
    let diff = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
}

#[test]
fn block_gradients_match_finite_differences() {
    for backbone in [Backbone::Ssd, Backbone::Gru] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = SequenceModel::new(&mut store, "m", backbone, small_cfg(), 2, &mut rng).unwrap();
        let x = rand_input::<f64>(&[2, 6, 8], 3);
        let w = rand_input::<f64>(&[2, 6, 8], 4);
        for mode in [ScanMode::Recurrent, ScanMode::Quadratic, ScanMode::Chunked(4)] {
            model.mode = mode;
            let probes: Vec<_> = store
                .ids()
                .flat_map(|id| {
                    let n = store.value(id).len();
                    [0, n / 2, n - 1].into_iter().map(move |j| (id, j))
                })
                .collect();
            let report = check_param_gradients(&mut store, &probes, 1e-5, |g, s| {
                let xv = g.constant(x.clone());
                let (y, _) = model.forward(g, s, xv, None, None::<&mut ChaCha8Rng>)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(y, wv)?;
                Ok(g.sum(prod))
            })
            .unwrap();
            assert!(report.max_rel_error() <= 1e-4, "{backbone:?} {mode:?}: {}", report.max_rel_error());
            if backbone == Backbone::Gru {
                break;
            }
        }
    }
}

fn stepwise(model: &SequenceModel, store: &ParamStore<f64>, x: &Tensor<f64>, state: SequenceState<f64>) -> (Vec<f64>, SequenceState<f64>) {
    let (b, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut st = state;
    let mut out = vec![0.0; b * l * d];
    for t in 0..l {
        let mut g = Graph::inference();
        let row: Vec<f64> = (0..b).flat_map(|bi| x.data()[(bi * l + t) * d..(bi * l + t + 1) * d].to_vec()).collect();
        let xt = g.constant_from(vec![b, d], row).unwrap();
        let (y, next) = model.step(&mut g, store, xt, &st).unwrap();
        for bi in 0..b {
            out[(bi * l + t) * d..(bi * l + t + 1) * d].copy_from_slice(&g.value(y)[bi * d..(bi + 1) * d]);
        }
        st = next;
    }
    (out, st)
}

#[test]
fn iterated_steps_match_scan() {
    for backbone in [Backbone::Ssd, Backbone::Gru] {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cfg = SsdConfig { d: 16, head_dim: 8, state: 4, chunk: 16 };
        let model = SequenceModel::new(&mut store, "m", backbone, cfg, 2, &mut rng).unwrap();
        let l = if backbone == Backbone::Ssd { 208 } else { 40 };
        let x = rand_input::<f64>(&[2, l, 16], 5);
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (y, st) = model.forward(&mut g, &store, xv, None, None::<&mut ChaCha8Rng>).unwrap();
        let (ys, st2) = stepwise(&model, &store, &x, model.zero_state(2));
        let diff = g.value(y).iter().zip(&ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-6, "{backbone:?}: {diff}");
        assert_eq!(st2.position, l);
        assert_eq!(st.position, l);
        assert_eq!(st.num_values(), model.zero_state::<f64>(2).num_values());
    }
}

#[test]
fn warm_state_then_step_matches_longer_scan() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = SequenceModel::new(&mut store, "m", Backbone::Ssd, small_cfg(), 2, &mut rng).unwrap();
    let x = rand_input::<f64>(&[1, 11, 8], 6);
    let prefix = Tensor::new(vec![1, 10, 8], x.data()[..80].to_vec()).unwrap();
    let last = Tensor::new(vec![1, 1, 8], x.data()[80..].to_vec()).unwrap();

    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let (full, _) = model.forward(&mut g, &store, xv, None, None::<&mut ChaCha8Rng>).unwrap();
    let pv = g.constant(prefix);
    let (_, warm) = model.forward(&mut g, &store, pv, None, None::<&mut ChaCha8Rng>).unwrap();
    let (ys, _) = stepwise(&model, &store, &last, warm);
    let want = &g.value(full)[80..];
    let diff = want.iter().zip(&ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff <= 1e-10, "{diff}");
}

#[test]
fn state_size_is_independent_of_length() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = SequenceModel::new(&mut store, "m", Backbone::Ssd, small_cfg(), 2, &mut rng).unwrap();
    let sizes: Vec<usize> = [3usize, 30, 300]
        .iter()
        .map(|&l| {
            let mut g = Graph::inference();
            let xv = g.constant(rand_input::<f32>(&[1, l, 8], 0));
            model.forward(&mut g, &store, xv, None, None::<&mut ChaCha8Rng>).unwrap().1.num_values()
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn gru_is_sized_to_the_ssd_layer() {
    let cfg = SsdConfig::default();
    let hd = GruLayer::hidden_for_budget(cfg.d, model::ssd_layer_params(cfg));
    let mut s1 = ParamStore::<f32>::new();
    let mut s2 = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    SsdLayer::new(&mut s1, "a", cfg, false, &mut rng).unwrap();
    GruLayer::new(&mut s2, "b", cfg.d, hd, false, &mut rng);
    assert_eq!(s1.num_scalars(), model::ssd_layer_params(cfg));
    let ratio = s2.num_scalars() as f64 / s1.num_scalars() as f64;
    assert!((0.95..=1.0).contains(&ratio), "{ratio}");
}

#[test]
fn dropout_only_with_rng() {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = SequenceModel::new(&mut store, "m", Backbone::Ssd, small_cfg(), 1, &mut rng).unwrap();
    let x = rand_input::<f32>(&[1, 4, 8], 1);
    let eval = |r: Option<&mut ChaCha8Rng>| {
        let mut g = Graph::inference();
        let xv = g.constant(x.clone());
        let (y, _) = model.forward(&mut g, &store, xv, None, r).unwrap();
        g.value(y).to_vec()
    };
    assert_eq!(eval(None), eval(None));
    assert_ne!(eval(None), eval(Some(&mut rng)));
}
