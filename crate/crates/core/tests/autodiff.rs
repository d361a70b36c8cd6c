use deaan::gradcheck::{check_inputs, DEFAULT_STEP};
use deaan::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar with non-uniform weights so that every
/// element's gradient is distinct.
fn weighted_sum(g: &mut Graph, x: Var) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(shape, (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect()).unwrap();
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn assert_grad<F>(inputs: &[Tensor], f: F)
where
    F: Fn(&mut Graph, &[Var]) -> deaan::Result<Var>,
{
    let report = check_inputs(inputs, DEFAULT_STEP, |g, v| {
        let y = f(g, v)?;
        Ok(weighted_sum(g, y))
    })
    .unwrap();
    assert!(report.passes(1e-5), "{report:?}");
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[3, 4]);
    assert_grad(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    assert_grad(&[a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    assert_grad(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    assert_grad(&[a.clone()], |g, v| Ok(g.tanh(v[0])));
    assert_grad(&[a.clone()], |g, v| Ok(g.sigmoid(v[0])));
    assert_grad(&[a.clone()], |g, v| Ok(g.exp(v[0])));
    assert_grad(&[a.clone()], |g, v| Ok(g.softplus(v[0])));
    assert_grad(&[a.clone()], |g, v| Ok(g.leaky_relu(v[0], 0.2)));
    assert_grad(&[a.clone()], |g, v| Ok(g.relu(v[0])));
    assert_grad(&[a.clone()], |g, v| Ok(g.one_minus(v[0])));
    assert_grad(&[a.map(|x| x.abs() + 0.5)], |g, v| Ok(g.log(v[0])));
    assert_grad(&[a.clone()], |g, v| Ok(g.clamp(v[0], -0.5, 0.5)));
}

#[test]
fn reductions_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[4, 5]);
    assert_grad(&[a.clone()], |g, v| g.mean(v[0]));
    assert_grad(&[a.clone()], |g, v| g.logsumexp(v[0]));
    assert_grad(&[a.clone()], |g, v| g.log_softmax_rows(v[0]));
    assert_grad(&[a.clone()], |g, v| g.softmax_rows(v[0]));
    assert_grad(&[a.clone()], |g, v| g.pick_cols(v[0], &[0, 4, 2, 2]));
}

#[test]
fn linear_algebra_and_layout() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let bias = rand_tensor(&mut rng, &[2]);
    assert_grad(&[a.clone(), b.clone()], |g, v| g.matmul(v[0], v[1]));
    assert_grad(&[b.clone(), bias.clone()], |g, v| g.add_bias(v[0], v[1]));
    let x3 = rand_tensor(&mut rng, &[2, 3, 4]);
    let cb = rand_tensor(&mut rng, &[3]);
    assert_grad(&[x3.clone(), cb], |g, v| g.add_channel_bias(v[0], v[1]));
    assert_grad(&[x3.clone()], |g, v| g.swap_last2(v[0]));
    assert_grad(&[x3.clone()], |g, v| g.reshape(v[0], &[6, 4]));
    assert_grad(&[x3.clone()], |g, v| g.slice_rows(v[0], 1, 2));
    assert_grad(&[x3.clone()], |g, v| g.gather_rows(v[0], &[1, 0, 1]));
    assert_grad(&[a.clone(), b.clone()], |g, v| {
        let bt = g.reshape(v[1], &[2, 4])?;
        g.concat_rows(&[v[0], bt])
    });
    assert_grad(&[a.clone(), rand_tensor(&mut rng, &[3, 2])], |g, v| {
        g.concat_cols(&[v[0], v[1]])
    });
}

#[test]
fn convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 9]);
    let w = rand_tensor(&mut rng, &[4, 3, 3]);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0), (3, 2)] {
        assert_grad(&[x.clone(), w.clone()], |g, v| g.conv1d(v[0], v[1], stride, pad));
    }
    let wt = rand_tensor(&mut rng, &[3, 2, 4]);
    for (stride, pad) in [(2, 1), (1, 0), (3, 1)] {
        assert_grad(&[x.clone(), wt.clone()], |g, v| {
            g.conv_transpose1d(v[0], v[1], stride, pad)
        });
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    // <conv(x), y> == <x, conv_t(y)> with the same weights.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[1, 3, 8]);
    let w = rand_tensor(&mut rng, &[2, 3, 4]);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(w.clone());
    let y = g.conv1d(xv, wv, 2, 1).unwrap();
    let y_len = g.shape(y)[2];
    let probe = rand_tensor(&mut rng, &[1, 2, y_len]);
    let lhs: f64 = g.value(y).data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
    let pv = g.constant(probe);
    let wt = g.constant(w.reshape(vec![2, 3, 4]).unwrap());
    // conv weight [Cout, Cin, K] doubles as conv_t weight [Cin', Cout', K].
    let back = g.conv_transpose1d(pv, wt, 2, 1).unwrap();
    assert_eq!(g.shape(back), &[1, 3, 8]);
    let rhs: f64 = g.value(back).data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn batch_norm_both_modes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[3, 2, 5]);
    let gamma = rand_tensor(&mut rng, &[2]);
    let beta = rand_tensor(&mut rng, &[2]);
    assert_grad(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
    });
    let x2 = rand_tensor(&mut rng, &[4, 2]);
    assert_grad(&[x2, gamma.clone(), beta.clone()], |g, v| {
        Ok(g.batch_norm(v[0], v[1], v[2], 1e-5)?.0)
    });
    assert_grad(&[x, gamma, beta], |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5)
    });
}

#[test]
fn attention_pool() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = rand_tensor(&mut rng, &[2, 4, 3]);
    let w = rand_tensor(&mut rng, &[2, 4]);
    assert_grad(&[h, w], |g, v| g.attn_pool(v[0], v[1]));
}

#[test]
fn scale_grad_is_identity_forward_and_scales_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[3, 3]);
    for lambda in [0.0, 0.3, 1.0, 2.5] {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let r = g.scale_grad(xv, -lambda);
        assert_eq!(g.value(r), &x);
        let t = g.tanh(r);
        let loss = weighted_sum(&mut g, t);
        let with = g.backward(loss).unwrap().get(xv).unwrap().clone();

        let mut g2 = Graph::new();
        let xv2 = g2.input(x.clone());
        let t2 = g2.tanh(xv2);
        let loss2 = weighted_sum(&mut g2, t2);
        let without = g2.backward(loss2).unwrap().get(xv2).unwrap().clone();
        for (a, b) in with.data().iter().zip(without.data()) {
            let want = -lambda * b;
            assert!((a - want).abs() <= 1e-6 * want.abs().max(1e-12) || (a - want).abs() < 1e-15);
        }
    }
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn shape_errors_are_reported() {
    let mut g = Graph::new();
    let a = g.input(Tensor::zeros(vec![2, 3]));
    let b = g.input(Tensor::zeros(vec![2, 3]));
    assert!(g.matmul(a, b).is_err());
    let x = g.input(Tensor::zeros(vec![1, 3, 2]));
    let w = g.input(Tensor::zeros(vec![4, 3, 5]));
    assert!(g.conv1d(x, w, 1, 0).is_err());
    assert!(g.pick_cols(a, &[0, 3]).is_err());
}
