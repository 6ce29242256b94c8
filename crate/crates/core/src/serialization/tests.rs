use std::collections::HashSet;

use proptest::prelude::*;

use super::*;
use super::Strategy;
use rand::Rng;
use crate::gradcheck::{check_params, randomized, weighted_sum};

fn all_cells(p: u32) -> impl Iterator<Item = [u32; 3]> {
    let n = 1u32 << p;
    (0..n).flat_map(move |x| (0..n).flat_map(move |y| (0..n).map(move |z| [x, y, z])))
}

fn l1(a: [u32; 3], b: [u32; 3]) -> u32 {
    (0..3).map(|i| a[i].abs_diff(b[i])).sum()
}

#[test]
fn curve_origin() {
    assert_eq!(hilbert_index([0, 0, 0], 1).unwrap(), 0);
    assert_eq!(trans_hilbert_index([0, 0, 0], 1).unwrap(), 0);
    for p in 1..=4 {
        assert_eq!(hilbert_index_inverse(0, p).unwrap(), [0, 0, 0]);
    }
}

#[test]
fn exhaustive_bijection_and_adjacency() {
    type Encode = fn([u32; 3], u32) -> Result<u64>;
    type Decode = fn(u64, u32) -> Result<[u32; 3]>;
    let curves: [(Encode, Decode); 2] = [
        (hilbert_index, hilbert_index_inverse),
        (trans_hilbert_index, trans_hilbert_index_inverse),
    ];
    for (enc, dec) in curves {
        for p in 1..=3u32 {
            let total = 1u64 << (3 * p);
            let mut seen = vec![false; total as usize];
            for c in all_cells(p) {
                let h = enc(c, p).unwrap();
                assert!(!seen[h as usize], "duplicate index {h} at p={p}");
                seen[h as usize] = true;
                assert_eq!(dec(h, p).unwrap(), c);
            }
            assert!(seen.iter().all(|&s| s));
            for i in 1..total {
                let (a, b) = (dec(i - 1, p).unwrap(), dec(i, p).unwrap());
                assert_eq!(l1(a, b), 1, "p={p} step {i}: {a:?} -> {b:?}");
            }
        }
    }
}

#[test]
fn trans_hilbert_differs() {
    let witness = all_cells(2).find(|&c| hilbert_index(c, 2).unwrap() != trans_hilbert_index(c, 2).unwrap());
    assert!(witness.is_some());
}

#[test]
fn injective_at_p10() {
    let mut r = stream(11, &[]);
    let mut cells = HashSet::new();
    let mut idx = HashSet::new();
    for _ in 0..100_000 {
        let c = [r.random_range(0..1024), r.random_range(0..1024), r.random_range(0..1024)];
        if cells.insert(c) {
            assert!(idx.insert(hilbert_index(c, 10).unwrap()));
        }
    }
}

#[test]
fn range_errors() {
    assert!(hilbert_index([2, 0, 0], 1).is_err());
    assert!(hilbert_index([0, 0, 0], 0).is_err());
    assert!(hilbert_index([0, 0, 0], 21).is_err());
    assert!(hilbert_index_inverse(8, 1).is_err());
}

fn random_centers(n: usize, seed: u64) -> Vec<Point> {
    let mut r = stream(seed, &[]);
    (0..n)
        .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
        .collect()
}

fn seq_of(centers: &[Point]) -> TokenSequence {
    let n = centers.len();
    TokenSequence::raw(Tensor::from_fn(&[n, 2], |i| (i / 2) as f64 + 0.5 * (i % 2) as f64), centers.to_vec()).unwrap()
}

#[test]
fn classification_serialization() {
    let cfg = HilbertConfig { bits: 4, variant: CurveVariant::Hilbert };
    let one = vec![[0.3, 0.1, -0.2]];
    assert_eq!(curve_order(&one, &cfg).unwrap(), vec![0]);

    let centers = random_centers(16, 12);
    // oracle: quantize by hand, index, argsort
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for c in &centers {
        for a in 0..3 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    let ext = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    let mut keyed: Vec<(u64, usize)> = centers
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let cell = [0, 1, 2].map(|a| ((c[a] - lo[a]) / ext * 15.0).floor() as u32);
            (hilbert_index(cell, 4).unwrap(), i)
        })
        .collect();
    keyed.sort();
    let oracle: Vec<usize> = keyed.iter().map(|k| k.1).collect();
    assert_eq!(curve_order(&centers, &cfg).unwrap(), oracle);

    let sorted: Vec<Point> = oracle.iter().map(|&i| centers[i]).collect();
    assert_eq!(curve_order(&sorted, &cfg).unwrap(), (0..16).collect::<Vec<_>>());

    let cloud = crate::pointcloud::PointCloud::new(random_centers(64, 13)).unwrap();
    let patches = crate::pointcloud::group(&cloud, 16, 4, crate::pointcloud::FpsStart::Centroid).unwrap();
    let seq = seq_of(&patches.centers);
    let (p2, s2) = serialize_classification(&patches, &seq, &cfg).unwrap();
    for i in 0..16 {
        assert_eq!(p2.centers[i], s2.centers[i]);
        let src = patches.centers.iter().position(|c| *c == p2.centers[i]).unwrap();
        assert_eq!(p2.neighborhoods[i], patches.neighborhoods[src]);
        assert_eq!(s2.tokens.data()[2 * i..2 * i + 2], seq.tokens.data()[2 * src..2 * src + 2]);
    }
}

#[test]
fn segmentation_serialization() {
    let line: Vec<Point> = [0.7, -0.2, 0.4, 0.1].iter().map(|&x| [x, 0.0, 0.0]).collect();
    let s = serialize_segmentation(&seq_of(&line)).unwrap();
    assert_eq!(s.len(), 12);
    let xs: Vec<f64> = s.centers[..4].iter().map(|c| c[0]).collect();
    assert_eq!(xs, vec![-0.2, 0.1, 0.4, 0.7]);
    assert_eq!(s.order_ids[0], OrderId::AxisX);
    assert_eq!(s.order_ids[4], OrderId::AxisY);
    assert_eq!(s.order_ids[11], OrderId::AxisZ);

    let centers = random_centers(20, 14);
    let s = serialize_segmentation(&seq_of(&centers)).unwrap();
    for a in 0..3 {
        let mut oracle: Vec<usize> = (0..20).collect();
        oracle.sort_by(|&i, &j| centers[i][a].partial_cmp(&centers[j][a]).unwrap().then(i.cmp(&j)));
        let got: Vec<Point> = s.centers[20 * a..20 * (a + 1)].to_vec();
        assert_eq!(got, oracle.iter().map(|&i| centers[i]).collect::<Vec<_>>());
    }
}

#[test]
fn masking() {
    let seq = seq_of(&random_centers(10, 15));
    let (vis, m) = apply_mask(&seq, 0.0, MaskMode::Random, 1).unwrap();
    assert_eq!(m.count(), 0);
    assert_eq!(vis, seq);

    let (vis, m) = apply_mask(&seq, 0.5, MaskMode::Block, 2).unwrap();
    assert_eq!(m.count(), 5);
    assert_eq!(vis.len(), 5);
    let start = (0..10).find(|&i| m.masked[i] && !m.masked[(i + 9) % 10]).unwrap();
    assert!((0..5).all(|j| m.masked[(start + j) % 10]));

    let a = mask_positions(10, 0.6, MaskMode::Random, 3).unwrap();
    assert_eq!(a, mask_positions(10, 0.6, MaskMode::Random, 3).unwrap());
    assert_eq!(a.count(), 6);

    assert!(apply_mask(&seq, 1.0, MaskMode::Random, 0).is_err());
    assert!(apply_mask(&seq, 0.97, MaskMode::Random, 0).is_err());
}

#[test]
fn locality_single_cloud() {
    let centers = random_centers(128, 16);
    let hil = plan(&centers, Strategy::Hilbert, 10, 0).unwrap();
    let rnd = plan(&centers, Strategy::Random, 10, 5).unwrap();
    assert!(mean_neighbor_distance(&centers, &hil.index) < mean_neighbor_distance(&centers, &rnd.index));
}

#[test]
fn plan_layouts() {
    let centers = random_centers(8, 17);
    let p = plan(&centers, Strategy::HilbertPair, 10, 0).unwrap();
    assert_eq!(p.len(), 16);
    assert_eq!(p.order_ids[7], OrderId::Hilbert);
    assert_eq!(p.order_ids[8], OrderId::TransHilbert);
    let m = MaskRecord { masked: (0..8).map(|i| i % 3 == 0).collect() };
    let prop = m.propagate(&p);
    assert_eq!(prop.count(), 2 * m.count());
    assert_eq!("axis_wise".parse::<Strategy>().unwrap(), Strategy::AxisWise);
    assert!("zigzag".parse::<Strategy>().is_err());
}

fn scale_store(c: usize) -> ParamStore {
    let mut ps = ParamStore::new();
    init_order_scale(&mut ps, "os", c).unwrap();
    ps
}

#[test]
fn order_scale_cases() {
    let mut ps = scale_store(3);
    let x = Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut stream(18, &[]));
    let ids = [OrderId::Hilbert, OrderId::Hilbert, OrderId::TransHilbert, OrderId::TransHilbert];
    let run = |ps: &ParamStore| {
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let y = order_scale(&mut g, ps, "os", v, &ids).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&ps), x);
    ps.set("os.hilbert.gamma", Tensor::zeros(&[3]));
    ps.set("os.hilbert.beta", Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
    let y = run(&ps);
    assert_eq!(&y.data()[..6], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    assert_eq!(&y.data()[6..12], &x.data()[6..12]);

    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let empty = ParamStore::new();
    assert!(order_scale(&mut g, &empty, "os", v, &ids).is_err());
}

#[test]
fn order_scale_gradients() {
    let ps = randomized(&scale_store(3), 19);
    let x = Tensor::uniform(&[2, 4, 3], -1.0, 1.0, &mut stream(20, &[]));
    let ids = [OrderId::AxisX, OrderId::AxisY, OrderId::AxisY, OrderId::AxisZ];
    let r = check_params(&ps, None, |g, ps| {
        let v = g.constant(x.clone());
        let y = order_scale(g, ps, "os", v, &ids)?;
        weighted_sum(g, y, 21)
    })
    .unwrap();
    assert!(r.passed(), "{r:?}");
}

proptest! {
    #[test]
    fn every_strategy_permutes(seed in 0u64..1000, n in 1usize..40) {
        let centers = random_centers(n, seed);
        for s in [Strategy::Raw, Strategy::Random, Strategy::Hilbert, Strategy::TransHilbert, Strategy::HilbertPair, Strategy::AxisWise] {
            let p = plan(&centers, s, 10, seed).unwrap();
            prop_assert_eq!(p.len(), n * s.copies());
            for seg in p.index.chunks(n) {
                let mut sorted = seg.to_vec();
                sorted.sort_unstable();
                prop_assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn visible_order_preserved(seed in 0u64..1000, n in 2usize..50, ratio in 0.0f64..0.9) {
        let seq = seq_of(&random_centers(n, seed));
        for mode in [MaskMode::Random, MaskMode::Block] {
            let Ok((vis, m)) = apply_mask(&seq, ratio, mode, seed) else { continue };
            prop_assert_eq!(m.count(), (ratio * n as f64).round() as usize);
            let idx = m.visible_indices();
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for (k, &i) in idx.iter().enumerate() {
                prop_assert_eq!(vis.centers[k], seq.centers[i]);
            }
        }
    }

    #[test]
    fn round_trip_p10(x in 0u32..1024, y in 0u32..1024, z in 0u32..1024) {
        let h = hilbert_index([x, y, z], 10).unwrap();
        prop_assert_eq!(hilbert_index_inverse(h, 10).unwrap(), [x, y, z]);
    }
}
