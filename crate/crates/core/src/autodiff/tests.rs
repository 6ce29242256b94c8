use super::*;
use crate::gradcheck::{check_inputs, weighted_sum};
use crate::rng::stream;

fn rand_t(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut stream(seed, &[]))
}

fn assert_grad_ok(r: crate::gradcheck::GradCheckReport) {
    assert!(r.passed(), "gradient check failed: {}", r.worst);
}

#[test]
fn matmul_identity_and_hand_case() {
    let mut g = Graph::new();
    let a = rand_t(&[3, 3], 1);
    let i = g.constant(Tensor::identity(3));
    let av = g.constant(a.clone());
    let out = g.matmul(i, av).unwrap();
    assert_eq!(g.value(out), &a);

    let x = g.constant(Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
    let y = g.constant(Tensor::new(vec![2, 1], vec![1., 1.]).unwrap());
    let out = g.matmul(x, y).unwrap();
    assert_eq!(g.value(out).data(), &[3.0, 7.0]);
    assert_eq!(g.shape(out), &[2, 1]);
}

#[test]
fn matmul_shape_errors() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[4, 2]));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("inner dimensions"), "{err}");
    let c = g.constant(Tensor::zeros(&[2, 2, 3]));
    let d = g.constant(Tensor::zeros(&[3, 3, 2]));
    assert!(g.matmul(c, d).is_err());
}

#[test]
fn matmul_gradient() {
    let r = check_inputs(&[rand_t(&[4, 5], 2), rand_t(&[5, 2], 3)], None, |g, v| {
        let m = g.matmul(v[0], v[1])?;
        Ok(g.sum(m))
    })
    .unwrap();
    assert_grad_ok(r);
}

#[test]
fn batched_matmul_gradient() {
    for (sa, sb) in [(vec![2, 3, 4], vec![4, 2]), (vec![2, 3, 4], vec![2, 4, 5]), (vec![3, 4], vec![2, 4, 3])] {
        let r = check_inputs(&[rand_t(&sa, 4), rand_t(&sb, 5)], None, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            weighted_sum(g, m, 1)
        })
        .unwrap();
        assert_grad_ok(r);
    }
}

#[test]
fn conv1d_identity_kernel() {
    let mut g = Graph::new();
    let x = rand_t(&[2, 5, 3], 6);
    let xv = g.constant(x.clone());
    let w = g.constant(Tensor::identity(3).reshape(&[1, 3, 3]).unwrap());
    let y = g.conv1d(xv, w, None, Padding::Same).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn conv1d_impulse_response() {
    let mut g = Graph::new();
    let mut x = Tensor::zeros(&[1, 6, 1]);
    x.set(&[0, 2, 0], 1.0);
    let xv = g.constant(x);
    let kernel = [0.5, -2.0, 3.0];
    let w = g.constant(Tensor::new(vec![3, 1, 1], kernel.to_vec()).unwrap());
    let y = g.conv1d(xv, w, None, Padding::Same).unwrap();
    // cross-correlation: output around t = 2 is the kernel reversed
    assert_eq!(g.value(y).data(), &[0.0, 3.0, -2.0, 0.5, 0.0, 0.0]);
}

#[test]
fn conv1d_padding_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 1]));
    let w = g.constant(Tensor::zeros(&[3, 1, 1]));
    assert!(g.conv1d(x, w, None, Padding::Valid).is_err());
    let w2 = g.constant(Tensor::zeros(&[2, 1, 1]));
    assert!(g.conv1d(x, w2, None, Padding::Same).is_err());
    let y = g.conv1d(x, w2, None, Padding::Causal).unwrap();
    assert_eq!(g.shape(y), &[1, 2, 1]);
}

#[test]
fn conv1d_gradients_all_paddings() {
    for pad in [Padding::Same, Padding::Causal, Padding::Valid] {
        let r = check_inputs(&[rand_t(&[2, 6, 3], 7), rand_t(&[3, 3, 4], 8), rand_t(&[4], 9)], None, |g, v| {
            let y = g.conv1d(v[0], v[1], Some(v[2]), pad)?;
            weighted_sum(g, y, 2)
        })
        .unwrap();
        assert_grad_ok(r);
        let r = check_inputs(&[rand_t(&[2, 6, 3], 10), rand_t(&[3, 3], 11), rand_t(&[3], 12)], None, |g, v| {
            let y = g.depthwise_conv1d(v[0], v[1], Some(v[2]), pad)?;
            weighted_sum(g, y, 3)
        })
        .unwrap();
        assert_grad_ok(r);
    }
}

#[test]
fn softmax_cases() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::new(vec![2, 1], vec![5.0, -3.0]).unwrap());
    let s = g.softmax_lastdim(one);
    assert_eq!(g.value(s).data(), &[1.0, 1.0]);

    let z = g.constant(Tensor::zeros(&[3]));
    let s = g.softmax_lastdim(z);
    for v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let big = g.constant(Tensor::new(vec![3], vec![1000.0, 0.0, 0.0]).unwrap());
    let s = g.softmax_lastdim(big);
    let d = g.value(s).data();
    assert!(d.iter().all(|v| v.is_finite()));
    // shifted oracle: exp(-1000) underflows to zero
    assert_eq!(d[0], 1.0);
    assert!(d[1] < 1e-300 && d[2] < 1e-300);
}

#[test]
fn softmax_rows_sum_to_one_and_gradient() {
    let mut g = Graph::new();
    let x = g.constant(rand_t(&[7, 11], 13).map(|v| v * 20.0));
    let s = g.softmax_lastdim(x);
    for row in g.value(s).data().chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
    let r = check_inputs(&[rand_t(&[3, 5], 14)], None, |g, v| {
        let s = g.softmax_lastdim(v[0]);
        weighted_sum(g, s, 4)
    })
    .unwrap();
    assert_grad_ok(r);
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::full(&[2, 4], 3.7));
    let y = g.layer_norm(c, None, None).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
    let gamma = g.constant(Tensor::ones(&[2]));
    let beta = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, Some(gamma), Some(beta)).unwrap();
    let expect = 1.0 / (1.0 + LN_EPS).sqrt();
    assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
    assert!((g.value(y).data()[1] - expect).abs() < 1e-15);
}

#[test]
fn layer_norm_gradient() {
    let r = check_inputs(&[rand_t(&[3, 6], 15), rand_t(&[6], 16), rand_t(&[6], 17)], None, |g, v| {
        let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]))?;
        weighted_sum(g, y, 5)
    })
    .unwrap();
    assert_grad_ok(r);
}

#[test]
fn activations_values_and_gradients() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::zeros(&[1]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).data(), &[0.5]);
    let x = rand_t(&[4, 3], 18);
    let xv = g.constant(x.clone());
    let ones = g.constant(Tensor::ones(&[4, 3]));
    let p = g.mul(xv, ones).unwrap();
    assert_eq!(g.value(p), &x);
    let bad = g.constant(Tensor::ones(&[4, 2]));
    assert!(g.mul(xv, bad).is_err());

    type UnaryOp = fn(&mut Graph, Var) -> Var;
    let unary: [(&str, UnaryOp); 4] = [
        ("sigmoid", Graph::sigmoid),
        ("silu", Graph::silu),
        ("exp", Graph::exp),
        ("softplus", Graph::softplus),
    ];
    for (name, op) in unary {
        let r = check_inputs(&[rand_t(&[3, 4], 19)], None, |g, v| {
            let y = op(g, v[0]);
            weighted_sum(g, y, 6)
        })
        .unwrap();
        assert!(r.passed(), "{name}: {}", r.worst);
    }
    for shape_b in [vec![3, 4], vec![4]] {
        let r = check_inputs(&[rand_t(&[3, 4], 20), rand_t(&shape_b, 21)], None, |g, v| {
            let a = g.mul(v[0], v[1])?;
            let b = g.add(a, v[1])?;
            let c = g.sub(b, v[0])?;
            let d = g.scale(c, -1.5);
            weighted_sum(g, d, 7)
        })
        .unwrap();
        assert_grad_ok(r);
    }
}

#[test]
fn shape_plumbing_gradients() {
    let r = check_inputs(&[rand_t(&[2, 3, 4], 22), rand_t(&[2, 2, 4], 23)], None, |g, v| {
        let c = g.concat(&[v[0], v[1]], 1)?;
        let p = g.permute(c, &[2, 0, 1])?;
        let r = g.reshape(p, &[4, 10])?;
        let s = g.slice_axis(r, 1, 2, 5)?;
        let m = g.max_axis(s, 1)?;
        let e = g.expand_axis(m, 1, 3)?;
        let mu = g.mean_axis(c, 1)?;
        let sel = g.index_select(mu, 1, &[3, 0, 3])?;
        let gb = g.gather_batched(c, &[vec![4, 0], vec![1, 1]])?;
        let t = g.transpose_last2(gb)?;
        let s1 = weighted_sum(g, e, 1)?;
        let s2 = weighted_sum(g, sel, 2)?;
        let s3 = weighted_sum(g, t, 3)?;
        let tot = g.add(s1, s2)?;
        let tot = g.add(tot, s3)?;
        let m = g.mean(c);
        g.add(tot, m)
    })
    .unwrap();
    assert_grad_ok(r);
}

#[test]
fn cross_entropy_gradient() {
    let r = check_inputs(&[rand_t(&[4, 3], 24)], None, |g, v| g.cross_entropy(v[0], &[0, 2, 1, 2])).unwrap();
    assert_grad_ok(r);
}

#[test]
fn backward_linear_and_quadratic() {
    let x = rand_t(&[3, 2], 25);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let s = g.sum(xv);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), Tensor::ones(&[3, 2]));

    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let sq = g.mul(xv, xv).unwrap();
    let s = g.sum(sq);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), x.map(|v| 2.0 * v));
}

#[test]
fn backward_accumulates_two_branches() {
    // f = sum(sigmoid(x)) + sum(3x): df/dx = s(1-s) + 3
    let x = rand_t(&[5], 26);
    let mut g = Graph::new();
    let xv = g.leaf(x.clone(), true);
    let a = g.sigmoid(xv);
    let sa = g.sum(a);
    let b = g.scale(xv, 3.0);
    let sb = g.sum(b);
    let f = g.add(sa, sb).unwrap();
    g.backward(f).unwrap();
    let expect = x.map(|v| {
        let s = 1.0 / (1.0 + (-v).exp());
        s * (1.0 - s) + 3.0
    });
    assert!(g.grad(xv).unwrap().max_abs_diff(&expect) < 1e-15);
}

#[test]
fn backward_errors() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::ones(&[2]), true);
    let y = g.scale(x, 2.0);
    assert!(g.backward(y).is_err(), "non-scalar root");
    let s = g.sum(y);
    g.backward(s).unwrap();
    let again = g.backward(s).unwrap_err().to_string();
    assert!(again.contains("reset_grads"), "{again}");
    g.reset_grads();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let c = g.constant(Tensor::ones(&[2]));
    let x = g.leaf(Tensor::ones(&[2]), true);
    let p = g.mul(c, x).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert!(g.grad(c).is_none());
}
