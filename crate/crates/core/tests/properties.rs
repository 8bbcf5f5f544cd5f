use mokt::mixers::{ssm_scan_parallel, ssm_scan_sequential, SplitIndices, SsmParams};
use mokt::tensor::kernels::{concat_last, matmul, mean_axes, permute, softmax, split_last};
use mokt::tensor::{max_rel_error, Graph, Mask, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_then_concat_is_identity(rows in 1usize..5, widths in prop::collection::vec(1usize..6, 1..5), seed in any::<u64>()) {
        let total: usize = widths.iter().sum();
        let x = tensor(vec![rows, total], seed);
        let parts = split_last(&x, &widths).unwrap();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        prop_assert_eq!(concat_last(&refs).unwrap(), x);
    }

    #[test]
    fn graph_split_skips_empty_pieces(rows in 1usize..4, widths in prop::collection::vec(0usize..5, 1..5), seed in any::<u64>()) {
        let total: usize = widths.iter().sum();
        prop_assume!(total > 0);
        let mut g = Graph::new();
        let x = g.constant(tensor(vec![rows, total], seed));
        let parts = g.split_last(x, &widths).unwrap();
        for (p, &w) in parts.iter().zip(&widths) {
            prop_assert_eq!(p.is_some(), w > 0);
        }
        let kept: Vec<_> = parts.into_iter().flatten().collect();
        let y = g.concat_last(&kept).unwrap();
        prop_assert_eq!(g.value(y), g.value(x));
        if widths.contains(&0) {
            prop_assert!(split_last(g.value(x), &widths).is_err());
        }
    }

    #[test]
    fn split_widths_rejects_mismatch(total in 1usize..20, extra in 1usize..4) {
        let x = tensor(vec![2, total], 0);
        prop_assert!(split_last(&x, &[total + extra]).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>(), causal in any::<bool>()) {
        let x = tensor(vec![rows, cols, cols], seed).map(|v| v * scale);
        let mask = causal.then(|| Mask::causal(cols));
        let y = softmax(&x, mask.as_ref()).unwrap();
        for (r, row) in y.data().chunks(cols).enumerate() {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            if causal {
                let i = r % cols;
                prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn permute_inverse_round_trips(a in 1usize..4, b in 1usize..4, c in 1usize..4, d in 1usize..4, seed in any::<u64>()) {
        let x = tensor(vec![a, b, c, d], seed);
        let axes = [2, 0, 3, 1];
        let mut inv = [0; 4];
        for (i, &ax) in axes.iter().enumerate() {
            inv[ax] = i;
        }
        let y = permute(&x, &axes).unwrap();
        prop_assert_eq!(y.shape(), &[c, a, d, b]);
        prop_assert_eq!(permute(&y, &inv).unwrap(), x);
    }

    #[test]
    fn matmul_is_linear(m in 1usize..5, k in 1usize..5, n in 1usize..5, alpha in -3.0f64..3.0, seed in any::<u64>()) {
        let a1 = tensor(vec![m, k], seed);
        let a2 = tensor(vec![m, k], seed ^ 1);
        let b = tensor(vec![k, n], seed ^ 2);
        let lhs = matmul(&a1.zip_map(&a2, |x, y| alpha * x + y).unwrap(), &b).unwrap();
        let rhs = matmul(&a1, &b).unwrap().zip_map(&matmul(&a2, &b).unwrap(), |x, y| alpha * x + y).unwrap();
        prop_assert!(max_rel_error(lhs.data(), rhs.data()) < 1e-12);
    }

    #[test]
    fn mean_over_all_axes_is_global_mean(a in 1usize..4, b in 1usize..5, c in 1usize..5, seed in any::<u64>()) {
        let x = tensor(vec![a, b, c], seed);
        let m = mean_axes(&mean_axes(&x, &[1, 2]).unwrap(), &[0]).unwrap();
        prop_assert!((m.item() - x.sum() / x.numel() as f64).abs() < 1e-12);
    }

    #[test]
    fn parallel_scan_matches_sequential(t in 1usize..80, d in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = SsmParams::<f64>::init(d, n, &mut rng);
        p.a_log = Tensor::randn([d, n], 1.0, &mut rng);
        p.b_w = Tensor::randn([d, n], 0.5, &mut rng);
        p.c_w = Tensor::randn([d, n], 0.5, &mut rng);
        let x = Tensor::randn([2, t, d], 1.0, &mut rng);
        let (s, q) = (ssm_scan_sequential(&x, &p).unwrap(), ssm_scan_parallel(&x, &p).unwrap());
        prop_assert!(max_rel_error(q.data(), s.data()) <= 1e-10);
    }

    #[test]
    fn split_indices_partition_the_expansion(dim in 1usize..200, num in 1u64..5, den in 1u64..4) {
        if let Ok(s) = SplitIndices::new(dim, (8, 3), (num.min(den), den)) {
            let [g, i, c] = s.widths();
            prop_assert_eq!(g, s.hidden());
            prop_assert_eq!(i + c, s.hidden());
            prop_assert_eq!(s.fused_width(), 2 * s.hidden());
        }
    }

    #[test]
    fn replay_is_bitwise_deterministic(rows in 1usize..4, cols in 2usize..6, seed in any::<u64>()) {
        let mut g = Graph::new();
        let x = g.param(tensor(vec![rows, cols], seed));
        let w = g.param(tensor(vec![cols, cols], seed ^ 7));
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h).unwrap();
        let y = g.softmax(h, None).unwrap();
        let _ = g.sum(y).unwrap();
        prop_assert!(g.replay_matches().unwrap());
    }
}
