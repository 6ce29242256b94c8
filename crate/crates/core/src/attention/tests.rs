use super::*;
use crate::gradcheck::{check_inputs, check_params, randomized, weighted_sum};

fn small_cfg() -> AttentionConfig {
    AttentionConfig {
        kind: AttentionKind::Pmla,
        heads: 2,
        head_dim: 3,
        latent_dim: 4,
        q_kernel: 3,
        ffn_mult: 2,
    }
}

fn x_rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut stream(seed, &[]))
}

/// Row-major `[rows, k] × [k, cols]` plus optional bias.
fn dense(x: &[f64], rows: usize, w: &Tensor, bias: Option<&Tensor>) -> Vec<f64> {
    let (k, cols) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut acc = bias.map_or(0.0, |b| b.data()[c]);
            for j in 0..k {
                acc += x[r * k + j] * w.data()[j * cols + c];
            }
            out[r * cols + c] = acc;
        }
    }
    out
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

fn sig(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Per-head softmax attention over `[T, h·d]` inputs; returns `[T, h·d]` and
/// the weights `[h][T][T]`.
fn attend(q: &[f64], k: &[f64], v: &[f64], t: usize, heads: usize, d: usize, scale: f64) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let hd = heads * d;
    let mut out = vec![0.0; t * hd];
    let mut weights = vec![vec![vec![0.0; t]; t]; heads];
    for h in 0..heads {
        for i in 0..t {
            let s: Vec<f64> = (0..t)
                .map(|j| (0..d).map(|e| q[i * hd + h * d + e] * k[j * hd + h * d + e]).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for j in 0..t {
                let w = (s[j] - m).exp() / z;
                weights[h][i][j] = w;
                for e in 0..d {
                    out[i * hd + h * d + e] += w * v[j * hd + h * d + e];
                }
            }
        }
    }
    (out, weights)
}

/// Direct transcription of the PMLA forward pass for a single sequence.
fn pmla_oracle(m: &Pmla, ps: &ParamStore, x: &[f64], t: usize, gated: bool) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let d = m.dim;
    let p = |n: String| ps.get(&n).unwrap();
    let (cw, cb) = m.q_conv_names();
    let (cw, cb) = (p(cw), p(cb));
    let half = (m.q_kernel / 2) as isize;
    let mut conv = vec![0.0; t * d];
    for i in 0..t {
        for c in 0..d {
            let mut acc = cb.data()[c];
            for j in 0..m.q_kernel {
                let src = i as isize + j as isize - half;
                if (0..t as isize).contains(&src) {
                    acc += cw.data()[j * d + c] * x[src as usize * d + c];
                }
            }
            conv[i * d + c] = acc;
        }
    }
    let lin = |l: &Linear, inp: &[f64]| dense(inp, t, p(l.weight_name()), l.bias.then(|| p(l.bias_name())));
    let q = lin(&m.q_proj, &conv);
    let mlp = |mm: &Mlp| {
        let h: Vec<f64> = lin(&mm.fc1, x).into_iter().map(silu).collect();
        lin(&mm.fc2, &h)
    };
    let gate = |l: &Linear| -> Vec<f64> { lin(l, x).into_iter().map(|v| if gated { sig(v) } else { 1.0 }).collect() };
    let kl: Vec<f64> = mlp(&m.k_mlp).iter().zip(gate(&m.k_gate)).map(|(a, b)| a * b).collect();
    let vl: Vec<f64> = mlp(&m.v_mlp).iter().zip(gate(&m.v_gate)).map(|(a, b)| a * b).collect();
    let k = lin(&m.k_up, &kl);
    let v = lin(&m.v_up, &vl);
    let (o, w) = attend(&q, &k, &v, t, m.heads, m.head_dim, 1.0 / (m.latent as f64).sqrt());
    (lin(&m.out, &o), w)
}

fn pmla_setup(seed: u64) -> (Pmla, ParamStore) {
    let m = Pmla::new("pm", 5, &small_cfg());
    let mut ps = ParamStore::new();
    m.init(&mut ps, seed).unwrap();
    (m, randomized(&ps, seed + 100))
}

fn run_pmla(m: &Pmla, ps: &ParamStore, x: &Tensor) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let a = m.forward(&mut g, ps, v).unwrap();
    (g.value(a.out).clone(), g.value(a.weights).clone())
}

#[test]
fn pmla_matches_dense_oracle() {
    let (m, ps) = pmla_setup(1);
    let (b, t) = (2, 6);
    let x = x_rand(&[b, t, 5], 2);
    let (out, w) = run_pmla(&m, &ps, &x);
    for bi in 0..b {
        let xs = &x.data()[bi * t * 5..(bi + 1) * t * 5];
        let (o, ow) = pmla_oracle(&m, &ps, xs, t, true);
        for (a, e) in out.data()[bi * t * 5..(bi + 1) * t * 5].iter().zip(&o) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
        for h in 0..2 {
            for i in 0..t {
                for j in 0..t {
                    assert!((w.at(&[bi, h, i, j]) - ow[h][i][j]).abs() <= 1e-12);
                }
            }
        }
    }
    for row in w.data().chunks(t) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn pmla_gate_open_limit() {
    let (m, mut ps) = pmla_setup(3);
    for l in [&m.k_gate, &m.v_gate] {
        ps.set(l.weight_name(), Tensor::zeros(&[5, 4]));
        ps.set(l.bias_name(), Tensor::full(&[4], 50.0));
    }
    let x = x_rand(&[1, 7, 5], 4);
    let (out, _) = run_pmla(&m, &ps, &x);
    let (o, _) = pmla_oracle(&m, &ps, x.data(), 7, false);
    for (a, e) in out.data().iter().zip(&o) {
        assert!((a - e).abs() <= 1e-6);
    }
}

#[test]
fn pmla_gate_closed_limit() {
    let (m, mut ps) = pmla_setup(5);
    for l in [&m.k_gate, &m.v_gate] {
        ps.set(l.weight_name(), Tensor::zeros(&[5, 4]));
        ps.set(l.bias_name(), Tensor::full(&[4], -800.0));
    }
    let x = x_rand(&[2, 4, 5], 6);
    let (out, w) = run_pmla(&m, &ps, &x);
    assert!(w.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let bias = ps.get(&m.out.bias_name()).unwrap();
    for row in out.data().chunks(5) {
        assert_eq!(row, bias.data());
    }
}

#[test]
fn pmla_query_locality() {
    let (m, ps) = pmla_setup(7);
    let x = x_rand(&[1, 9, 5], 8);
    let q_of = |x: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let q = m.queries(&mut g, &ps, v).unwrap();
        g.value(q).clone()
    };
    let base = q_of(&x);
    let hd = 6;
    for t in 0..9 {
        let mut xp = x.clone();
        for c in 0..5 {
            xp.set(&[0, t, c], x.at(&[0, t, c]) + 0.3);
        }
        let q = q_of(&xp);
        for s in 0..9 {
            let changed = (0..hd).any(|e| q.at(&[0, s, e]) != base.at(&[0, s, e]));
            assert_eq!(changed, s.abs_diff(t) <= 1, "t={t} s={s}");
        }
    }
}

#[test]
fn pmla_gradients() {
    let (m, ps) = pmla_setup(9);
    let x = x_rand(&[2, 4, 5], 10);
    let r = check_params(&ps, None, |g, ps| {
        let v = g.constant(x.clone());
        let a = m.forward(g, ps, v)?;
        weighted_sum(g, a.out, 11)
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
    let r = check_inputs(std::slice::from_ref(&x), None, |g, v| {
        let a = m.forward(g, &ps, v[0])?;
        weighted_sum(g, a.out, 12)
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

fn mla(dim: usize, rank: usize) -> MlaReference {
    MlaReference {
        name: "mla".into(),
        dim,
        heads: 2,
        head_dim: 3,
        rank,
    }
}

#[test]
fn mla_single_token() {
    let m = mla(5, 2);
    let mut ps = ParamStore::new();
    m.init(&mut ps, 13).unwrap();
    let x = x_rand(&[1, 1, 5], 14);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let a = m.forward(&mut g, &ps, v).unwrap();
    assert!(g.value(a.weights).data().iter().all(|&w| w == 1.0));
    let p = |n: &str| ps.get(&m.p(n)).unwrap();
    let vv = dense(&dense(x.data(), 1, p("w_va"), None), 1, p("w_vb"), None);
    let expect = dense(&vv, 1, p("w_o"), None);
    for (a, e) in g.value(a.out).data().iter().zip(&expect) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn mla_full_rank_matches_plain_attention() {
    let (d, t) = (6, 5);
    let m = mla(d, d);
    let mut ps = ParamStore::new();
    m.init(&mut ps, 15).unwrap();
    // W^a = I, W^b = the standard projection
    ps.set(m.p("w_ka"), Tensor::identity(d));
    ps.set(m.p("w_va"), Tensor::identity(d));
    let x = x_rand(&[1, t, d], 16);
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let a = m.forward(&mut g, &ps, v).unwrap();
    let p = |n: &str| ps.get(&m.p(n)).unwrap();
    let q = dense(x.data(), t, p("w_q"), None);
    let k = dense(x.data(), t, p("w_kb"), None);
    let vv = dense(x.data(), t, p("w_vb"), None);
    let (o, _) = attend(&q, &k, &vv, t, 2, 3, 1.0 / 3f64.sqrt());
    let expect = dense(&o, t, p("w_o"), None);
    for (a, e) in g.value(a.out).data().iter().zip(&expect) {
        assert!((a - e).abs() <= 1e-10);
    }
}

#[test]
fn mla_gradients() {
    let m = mla(5, 2);
    let mut ps = ParamStore::new();
    m.init(&mut ps, 17).unwrap();
    let ps = randomized(&ps, 18);
    let x = x_rand(&[2, 3, 5], 19);
    let r = check_params(&ps, None, |g, ps| {
        let v = g.constant(x.clone());
        let a = m.forward(g, ps, v)?;
        weighted_sum(g, a.out, 20)
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

fn block(kind: AttentionKind, seed: u64) -> (LatentBlock, ParamStore) {
    let cfg = AttentionConfig { kind, ..small_cfg() };
    let b = LatentBlock::new("lb", 5, &cfg);
    let mut ps = ParamStore::new();
    b.init(&mut ps, seed).unwrap();
    (b, ps)
}

fn run_block(b: &LatentBlock, ps: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let y = b.forward(&mut g, ps, v).unwrap();
    g.value(y).clone()
}

#[test]
fn block_zero_params_is_identity() {
    let (b, ps) = block(AttentionKind::Pmla, 21);
    let zero: ParamStore = ps.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
    let x = x_rand(&[2, 7, 5], 22);
    assert_eq!(run_block(&b, &zero, &x), x);
}

#[test]
fn block_shapes_and_param_count() {
    for kind in [AttentionKind::Pmla, AttentionKind::Mha] {
        let (b, ps) = block(kind, 23);
        assert_eq!(b.param_count(), ps.num_scalars());
        for t in [1usize, 7, 128] {
            let x = x_rand(&[1, t, 5], 24);
            assert_eq!(run_block(&b, &ps, &x).shape(), &[1, t, 5]);
        }
    }
}

#[test]
fn block_is_order_sensitive() {
    let (b, ps) = block(AttentionKind::Pmla, 25);
    let ps = randomized(&ps, 26);
    let x = x_rand(&[1, 6, 5], 27);
    let perm = [3usize, 0, 5, 1, 4, 2];
    let mut xs = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..5 {
            xs.set(&[0, i, c], x.at(&[0, p, c]));
        }
    }
    let (y, ys) = (run_block(&b, &ps, &x), run_block(&b, &ps, &xs));
    let max = (0..6)
        .flat_map(|i| (0..5).map(move |c| (i, c)))
        .map(|(i, c)| (ys.at(&[0, i, c]) - y.at(&[0, perm[i], c])).abs())
        .fold(0.0, f64::max);
    assert!(max > 1e-6, "shuffled output equals permuted output");
}

#[test]
fn block_gradients() {
    for kind in [AttentionKind::Pmla, AttentionKind::Mha] {
        let (b, ps) = block(kind, 28);
        let ps = randomized(&ps, 29);
        let x = x_rand(&[2, 4, 5], 30);
        let r = check_params(&ps, None, |g, ps| {
            let v = g.constant(x.clone());
            let y = b.forward(g, ps, v)?;
            weighted_sum(g, y, 31)
        })
        .unwrap();
        assert!(r.passed(), "{kind:?}: {r:?}");
    }
}

#[test]
fn default_pmla_smaller_than_mha() {
    let cfg = AttentionConfig::default();
    let p = Pmla::new("p", 384, &cfg);
    let m = Mha::new("m", 384, &cfg);
    let (d, h, r) = (384usize, 384usize, cfg.latent_dim);
    assert!(r < d * h / (d + h));
    assert_eq!(p.param_count(), 412_704);
    assert_eq!(m.param_count(), 590_976);
    assert!(p.param_count() < m.param_count());
    let mut ps = ParamStore::new();
    p.init(&mut ps, 0).unwrap();
    assert_eq!(ps.num_scalars(), p.param_count());
}

#[test]
fn probe_reports() {
    let (b, ps) = block(AttentionKind::Pmla, 32);
    let zero = Tensor::zeros(&[1, 5, 5]);
    let rep = gate_state_probe(&b, &ps, &zero, &zero).unwrap();
    assert_eq!(rep.correlations, vec![0.0; 4]);
    assert_eq!(rep.tokens, 5);

    let x = x_rand(&[2, 8, 5], 33);
    let s = x_rand(&[2, 8, 5], 34);
    let rep = gate_state_probe(&b, &ps, &x, &s).unwrap();
    assert!(rep.correlations.iter().all(|c| (-1.0..=1.0).contains(c)));
    assert!(serde_json::to_string(&rep).is_ok());

    let (mb, mps) = block(AttentionKind::Mha, 35);
    assert!(gate_state_probe(&mb, &mps, &x, &s).is_err());
}
