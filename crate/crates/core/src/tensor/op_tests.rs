use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::check;
use super::{Graph, Tensor, Var};
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

fn positive(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(0.3..2.0)).collect()).unwrap()
}

fn assert_fd(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>) {
    let report = check(inputs, 1e-4, None, f).unwrap();
    assert!(
        report.max_rel_error() <= 1e-4,
        "max relative error {} ({:?})",
        report.max_rel_error(),
        report.probes.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    );
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe_sum(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let n = g.value(y).len();
    let shape = g.shape(y).to_vec();
    let w = g.constant_from(shape, (0..n).map(|i| 0.3 + (i as f64 * 0.37).sin()).collect())?;
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![3]));
    let s = g.softmax(x).unwrap();
    for &p in g.value(s) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn rms_norm_of_constant_vector_is_one() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(vec![4], vec![2.5; 4]).unwrap());
    let gain = g.constant(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
    let y = g.rms_norm(x, gain, 1e-12).unwrap();
    for &v in g.value(y) {
        assert!((v - 1.0).abs() < 1e-10);
    }
}

#[test]
fn matmul_by_identity_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 3]);
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_f64(vec![3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap());
    let av = g.constant(a.clone());
    let y = g.matmul(eye, av).unwrap();
    assert_eq!(g.value(y), a.data());
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![3], &[0.5, -2.0, 7.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn gradient_of_sum_of_squares() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0]);
}

#[test]
fn repeated_backward_accumulates_and_zero_grad_resets() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let s = g.sum(x);
    g.backward(s).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    g.zero_grad();
    assert!(g.grad(x).is_none());
}

#[test]
fn shared_use_sums_both_paths() {
    // y = x*3 + exp(x): dy/dx = 3 + exp(x)
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![1], &[0.7]).unwrap());
    let a = g.scale(x, 3.0);
    let b = g.exp(x);
    let y = g.add(a, b).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert!((g.grad(x).unwrap()[0] - (3.0 + 0.7f64.exp())).abs() < 1e-14);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros(vec![2]));
    assert!(matches!(g.backward(x), Err(crate::Error::NonScalarLoss(_))));
}

#[test]
fn shape_errors_name_the_op() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(vec![2, 3]));
    let b = g.leaf(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    let c = g.leaf(Tensor::zeros(vec![2]));
    assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
}

#[test]
fn max_ties_route_gradient_to_lowest_index() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![1, 4], &[1.0, 3.0, 3.0, 0.0]).unwrap());
    let m = g.max_last(x).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn clamp_min_tie_goes_to_constant() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![3], &[1.0, 0.5, 2.0]).unwrap());
    let y = g.clamp_min(x, 1.0);
    assert_eq!(g.value(y), &[1.0, 1.0, 2.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap());
    let d = g.detach(x);
    let y = g.mul(x, d).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn inference_graph_records_no_gradients() {
    let mut g = Graph::<f64>::inference();
    let x = g.leaf(Tensor::zeros(vec![2]));
    let s = g.sum(x);
    assert!(!g.requires_grad(s));
    g.backward(s).unwrap();
    assert!(g.grad(x).is_none());
}

#[test]
fn cumprod_values_and_zero_safe_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::from_f64(vec![4], &[2.0, 0.0, 3.0, 0.5]).unwrap());
    let y = g.cumprod(x, 0).unwrap();
    assert_eq!(g.value(y), &[2.0, 0.0, 0.0, 0.0]);
    let s = g.sum(y);
    g.backward(s).unwrap();
    // d/dx1 of (x0 + x0x1 + x0x1x2 + x0x1x2x3) at x1 = 0: x0 + x0x2 + x0x2x3 = 2 + 6 + 3
    assert_eq!(g.grad(x).unwrap()[1], 11.0);
}

#[test]
fn finite_differences_elementwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let shape = [rng.random_range(1..4), rng.random_range(1..5)];
        let x = rand_tensor(&mut rng, &shape);
        let y = rand_tensor(&mut rng, &shape);
        let p = positive(&mut rng, &shape);
        let bias = rand_tensor(&mut rng, &shape[1..]);
        assert_fd(&[x.clone(), y.clone(), bias.clone()], |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.sub(a, v[2])?;
            let c = g.add(b, v[0])?;
            let d = g.mul(c, v[2])?;
            probe_sum(g, d)
        });
        assert_fd(std::slice::from_ref(&x), |g, v| {
            let e = g.exp(v[0]);
            let s = g.sigmoid(v[0]);
            let si = g.silu(v[0]);
            let sp = g.softplus(v[0]);
            let th = g.tanh(v[0]);
            let sc = g.scale(v[0], -0.7);
            let sa = g.add_scalar(sc, 0.2);
            let parts = [e, s, si, sp, th, sa];
            let cat = g.concat(&parts, 1)?;
            probe_sum(g, cat)
        });
        assert_fd(std::slice::from_ref(&p), |g, v| {
            let l = g.log(v[0]);
            probe_sum(g, l)
        });
        assert_fd(&[p], |g, v| {
            let c = g.cumprod(v[0], 1)?;
            probe_sum(g, c)
        });
    }
}

#[test]
fn finite_differences_structural_and_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..5 {
        let (r, c) = (rng.random_range(1..4), rng.random_range(2..6));
        let x = rand_tensor(&mut rng, &[2, r, c]);
        let w = rand_tensor(&mut rng, &[c, 3]);
        let gain = rand_tensor(&mut rng, &[c]);
        assert_fd(&[x.clone(), w.clone()], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y)
        });
        assert_fd(&[x.clone(), gain.clone()], |g, v| {
            let y = g.rms_norm(v[0], v[1], 1e-6)?;
            probe_sum(g, y)
        });
        assert_fd(std::slice::from_ref(&x), |g, v| {
            let s = g.softmax(v[0])?;
            let l = g.log_softmax(v[0])?;
            let m = g.sum_last(v[0])?;
            let mx = g.max_last(v[0])?;
            let a = probe_sum(g, s)?;
            let b = probe_sum(g, l)?;
            let c = probe_sum(g, m)?;
            let d = probe_sum(g, mx)?;
            let mean = g.mean(v[0]);
            let ab = g.add(a, b)?;
            let cd = g.add(c, d)?;
            let t = g.add(ab, cd)?;
            g.add(t, mean)
        });
        assert_fd(std::slice::from_ref(&x), |g, v| {
            let s = g.slice(v[0], 2, 1, c - 1)?;
            let s2 = g.slice(v[0], 1, 0, 1)?;
            let rs = g.reshape(s, vec![2 * r, c - 1])?;
            let a = probe_sum(g, rs)?;
            let b = probe_sum(g, s2)?;
            g.add(a, b)
        });
        let targets: Vec<usize> = (0..2 * r).map(|i| i % c).collect();
        let weights: Vec<f64> = (0..2 * r).map(|i| 0.5 + i as f64).collect();
        assert_fd(std::slice::from_ref(&x), |g, v| g.cross_entropy(v[0], &targets, Some(&weights)));
        let table = rand_tensor(&mut rng, &[5, c]);
        assert_fd(&[table], |g, v| {
            let e = g.embedding(v[0], &[0, 3, 3, 1])?;
            probe_sum(g, e)
        });
        assert_fd(&[x], |g, v| {
            let c1 = g.clamp_min(v[0], 0.1);
            probe_sum(g, c1)
        });
    }
}

#[test]
fn composed_network_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_tensor(&mut rng, &[4, 5]);
    let w1 = rand_tensor(&mut rng, &[5, 6]);
    let b1 = rand_tensor(&mut rng, &[6]);
    let gain = positive(&mut rng, &[6]);
    let w2 = rand_tensor(&mut rng, &[6, 3]);
    assert_fd(&[x, w1, b1, gain, w2], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.add(h, v[2])?;
        let h = g.rms_norm(h, v[3], 1e-6)?;
        let h = g.silu(h);
        let o = g.matmul(h, v[4])?;
        g.cross_entropy(o, &[0, 2, 1, 2], None)
    });
}

#[test]
fn same_seed_same_ops_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[4, 4]);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x);
        let wv = g.leaf(w);
        let h = g.matmul(xv, wv).unwrap();
        let h = g.silu(h);
        let s = g.softmax(h).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        (g.value(h).to_vec(), g.grad(wv).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}
