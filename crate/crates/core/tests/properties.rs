use proptest::collection::vec;
use proptest::prelude::*;

use pointssm::attention::multi_head_attention;
use pointssm::diffusion::{posterior_step, q_sample, Schedule};
use pointssm::harness::{RunConfig, Task};
use pointssm::patch::{PatchEncoder, PatchEncoderConfig};
use pointssm::pointcloud::{dist2, farthest_point_sample, knn_group, FpsStart, Point, PointCloud};
use pointssm::serialization::{hilbert_index, hilbert_index_inverse, mask_positions, plan, MaskMode, Strategy as Layout};
use pointssm::ssm::{selective_scan_parallel, selective_scan_sequential, ScanDims, ScanInputs};
use pointssm::{Graph, ParamStore, Tensor};

fn point() -> impl Strategy<Value = Point> {
    [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0]
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = PointCloud> {
    vec(point(), min..max).prop_map(|p| PointCloud::new(p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_matches_shape(shape in vec(1usize..5, 1..4), extra in 1usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(shape.clone(), vec![0.0; n]).is_ok());
        prop_assert!(Tensor::new(shape, vec![0.0; n + extra]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..200.0, seed in any::<u64>()) {
        let x = Tensor::uniform(&[rows, cols], -scale, scale, &mut pointssm::rng::stream(seed, &[]));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let s = g.softmax_lastdim(xv);
        for row in g.value(s).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one(t in 1usize..7, heads in 1usize..4, seed in any::<u64>()) {
        let mut rng = pointssm::rng::stream(seed, &[]);
        let mut g = Graph::new();
        let mut qkv = || Tensor::uniform(&[2, t, heads * 3], -3.0, 3.0, &mut rng);
        let (q, k, v) = (g.constant(qkv()), g.constant(qkv()), g.constant(qkv()));
        let out = multi_head_attention(&mut g, q, k, v, heads, 0.5).unwrap();
        for row in g.value(out.weights).data().chunks(t) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn fps_picks_distinct_centers(c in cloud(1, 80), frac in 0.0f64..1.0, seed in 0u64..50) {
        let g = 1 + ((c.len() - 1) as f64 * frac) as usize;
        let idx = farthest_point_sample(&c, g, FpsStart::from_seed(seed)).unwrap();
        prop_assert_eq!(idx.len(), g);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), g);
    }

    #[test]
    fn knn_neighborhoods_come_from_the_cloud(c in cloud(4, 60), seed in 0u64..50) {
        let centers = farthest_point_sample(&c, 3, FpsStart::from_seed(seed)).unwrap();
        let s = c.len().min(5);
        let patches = knn_group(&c, &centers, s).unwrap();
        for (g, hood) in patches.neighborhoods.iter().enumerate() {
            let ctr = patches.centers[g];
            prop_assert_eq!(hood.len(), s);
            for (k, off) in hood.iter().enumerate() {
                let j = patches.neighbor_indices[g][k];
                let back = [off[0] + ctr[0], off[1] + ctr[1], off[2] + ctr[2]];
                prop_assert!(dist2(&back, &c.points[j]) <= 1e-30);
            }
            // the center is its own nearest neighbor
            prop_assert_eq!(dist2(&hood[0], &[0.0; 3]), 0.0);
        }
    }

    #[test]
    fn hilbert_round_trips_at_every_order(p in 1u32..=20, raw in [any::<u32>(), any::<u32>(), any::<u32>()]) {
        let cell = raw.map(|v| v & ((1u32 << p) - 1));
        let h = hilbert_index(cell, p).unwrap();
        prop_assert!(h < 1u64 << (3 * p));
        prop_assert_eq!(hilbert_index_inverse(h, p).unwrap(), cell);
    }

    #[test]
    fn mask_count_is_rounded_ratio(len in 1usize..300, ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let want = (ratio * len as f64).round() as usize;
        let Ok(m) = mask_positions(len, ratio, MaskMode::Random, seed) else {
            prop_assert_eq!(want, len, "only a fully masked sequence is refused");
            return Ok(());
        };
        prop_assert_eq!(m.count(), want);
        prop_assert_eq!(m.masked_indices().len() + m.visible_indices().len(), len);
    }

    #[test]
    fn paired_plans_visit_each_center_twice(centers in vec(point(), 1..40), seed in any::<u64>()) {
        let p = plan(&centers, Layout::HilbertPair, 10, seed).unwrap();
        prop_assert_eq!(p.len(), 2 * centers.len());
        let mut counts = vec![0; centers.len()];
        for &i in &p.index {
            counts[i] += 1;
        }
        prop_assert!(counts.iter().all(|&c| c == 2));
    }

    #[test]
    fn one_oracle_step_inverts_one_corruption(beta in 1e-4f64..0.5, seed in any::<u64>()) {
        let s = Schedule::new(1, beta, beta).unwrap();
        let mut rng = pointssm::rng::stream(seed, &[]);
        let z0 = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let eps = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let noise = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let z1 = q_sample(&z0, 1, &eps, &s).unwrap();
        let back = posterior_step(&z1, 1, &eps, &s, &noise).unwrap();
        prop_assert!(back.max_abs_diff(&z0) <= 1e-12);
    }

    #[test]
    fn schedule_is_strictly_decreasing(steps in 1usize..2000, lo in 1e-5f64..0.01, span in 0.0f64..0.5) {
        let s = Schedule::new(steps, lo, lo + span).unwrap();
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for t in 1..=steps {
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1) && s.alpha_bar(t) > 0.0);
        }
    }

    #[test]
    fn set_overrides_land_in_the_config(lr in 1e-6f64..1.0, steps in 1usize..10_000) {
        let sets = [format!("optim.lr={lr:e}"), format!("train.steps={steps}")];
        let cfg = RunConfig::resolve(None, Task::Pretrain, &sets).unwrap();
        prop_assert_eq!(cfg.optim.lr, lr);
        prop_assert_eq!(cfg.train.steps, steps);
        let text = serde_json::to_string(&cfg).unwrap();
        prop_assert_eq!(RunConfig::resolve(Some(&text), Task::Probe, &[]).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scans_agree_on_random_shapes(
        batch in 1usize..3,
        len in 1usize..70,
        channels in 1usize..4,
        state in 1usize..5,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut r = pointssm::rng::stream(seed, &[]);
        let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| r.random_range(lo..hi)).collect() };
        let (x, delta) = (v(batch * len * channels, -1.0, 1.0), v(batch * len * channels, 0.001, 1.0));
        let a = v(channels * state, -4.0, -0.05);
        let (b, c, d) = (v(batch * len * state, -1.0, 1.0), v(batch * len * state, -1.0, 1.0), v(channels, -1.0, 1.0));
        let inputs = ScanInputs { dims: ScanDims { batch, len, channels, state }, x: &x, delta: &delta, a: &a, b: &b, c: &c, d: &d };
        let (s, p) = (selective_scan_sequential(&inputs), selective_scan_parallel(&inputs));
        for (u, w) in s.iter().zip(&p) {
            prop_assert!((u - w).abs() / u.abs().max(1e-8) <= 1e-10);
        }
    }

    #[test]
    fn patch_embedding_ignores_point_order(seed in any::<u64>(), perm_seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let enc = PatchEncoder::new("pe", &PatchEncoderConfig { hidden1: 6, hidden2: 7, hidden3: 8 }, 5);
        let mut ps = ParamStore::new();
        enc.init(&mut ps, seed).unwrap();
        let (groups, size) = (3, 6);
        let nb = Tensor::uniform(&[1, groups, size, 3], -0.2, 0.2, &mut pointssm::rng::stream(seed, &[1]));
        let mut order: Vec<usize> = (0..size).collect();
        order.shuffle(&mut pointssm::rng::stream(perm_seed, &[]));
        let shuffled = Tensor::from_fn(&[1, groups, size, 3], |i| {
            let (g, rest) = (i / (size * 3), i % (size * 3));
            nb.data()[g * size * 3 + order[rest / 3] * 3 + rest % 3]
        });
        let run = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.constant(t.clone());
            let y = enc.forward(&mut g, &ps, v).unwrap();
            g.value(y).clone()
        };
        prop_assert_eq!(run(&nb), run(&shuffled));
    }
}
