use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use texstat::attention::{
    comprehensive_attention, comprehensive_attention_terms, window_merge, window_partition,
    WindowAttention,
};
use texstat::ksco::{self, quantization_levels, quantized_intensity, KscoSnapshot};
use texstat::metrics::{self, Confusion, GeMode};
use texstat::nn::{Graph, ParamStore};
use texstat::tensor::{ConvSpec, Tape, Tensor};

fn tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut s = seed
        .wrapping_mul(6364136223846793005)
        .wrapping_add(1442695040888963407);
    Tensor::from_fn(shape, |_| {
        s = s
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((s >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
    })
}

fn extent() -> impl Strategy<Value = usize> {
    1usize..=8
}

fn as_f64(mask: &[bool]) -> Vec<f64> {
    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
}

fn mask_pair(max: usize) -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in extent(), cols in extent(), seed in any::<u64>()) {
        let tape = Tape::new();
        let x = tape.constant(tensor(vec![rows, cols], seed).map(|v| v * 20.0));
        let y = x.softmax(1).unwrap().to_tensor();
        for row in y.data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn reshape_permute_round_trip(a in extent(), b in extent(), c in extent(), seed in any::<u64>()) {
        let tape = Tape::new();
        let t = tensor(vec![a, b, c], seed);
        let x = tape.constant(t.clone());
        let back = x.permute(&[2, 0, 1]).unwrap().permute(&[1, 2, 0]).unwrap();
        prop_assert_eq!(back.to_tensor(), t.clone());
        let flat = x.reshape(&[a * b * c]).unwrap().reshape(&[a, b, c]).unwrap();
        prop_assert_eq!(flat.to_tensor(), t);
    }

    #[test]
    fn identity_pointwise_conv_is_identity(c in extent(), h in extent(), w in extent(), seed in any::<u64>()) {
        let tape = Tape::new();
        let t = tensor(vec![c, h, w], seed);
        let eye = Tensor::<f64>::eye(c).reshape([c, c, 1, 1]).unwrap();
        let y = tape.constant(t.clone()).conv2d(tape.constant(eye), None, ConvSpec::default()).unwrap();
        prop_assert_eq!(y.to_tensor(), t);
    }

    #[test]
    fn data_movement_backward_permutes_upstream(a in extent(), b in extent(), c in extent(), seed in any::<u64>()) {
        let tape = Tape::new();
        let x = tape.leaf(tensor(vec![a, b, c], seed), true);
        let upstream = Tensor::from_fn(vec![c, a, b], |i| i as f64);
        let y = x.permute(&[2, 0, 1]).unwrap();
        y.mul(tape.constant(upstream.clone())).unwrap().sum_all().backward().unwrap();
        let grad = x.grad().unwrap();
        let routed = Tape::new();
        prop_assert_eq!(routed.constant(grad).permute(&[2, 0, 1]).unwrap().to_tensor(), upstream);
    }

    #[test]
    fn broadcast_add_matches_explicit_tiling(a in extent(), b in extent(), seed in any::<u64>()) {
        let tape = Tape::new();
        let (x, row) = (tensor(vec![a, b], seed), tensor(vec![b], seed ^ 1));
        let y = tape.constant(x.clone()).add(tape.constant(row.clone())).unwrap().to_tensor();
        for i in 0..a * b {
            prop_assert_eq!(y.data()[i], x.data()[i] + row.data()[i % b]);
        }
    }

    #[test]
    fn bins_are_exclusive_and_top_level_is_max(h in extent(), w in extent(), n in 1usize..=32, seed in any::<u64>()) {
        let w = w + 1;
        let fa = tensor(vec![1, h, w], seed);
        let snap = ksco::snapshot(&fa, n).unwrap();
        let hi = fa.max_value().unwrap();
        prop_assert_eq!(snap.levels.levels[n - 1], hi);
        let tape = Tape::new();
        let s = quantized_intensity(tape.constant(fa.clone()), &snap, false).unwrap().s.to_tensor();
        let hw = h * w;
        for p in 0..hw {
            let active = (0..n).filter(|&l| s.data()[l * hw + p] != 0.0).count();
            prop_assert!(active <= 1);
            // coverage gap below the first level
            if fa.data()[p] < snap.levels.levels[0] - snap.levels.half_width {
                prop_assert_eq!(active, 0);
            }
        }
    }

    #[test]
    fn boundary_elements_activate_no_level(n in 2usize..=16, picks in prop::collection::vec(0usize..64, 2..30)) {
        // levels at 1..=n, half width 0.5: every k + 0.5 sits between two levels
        let mut values: Vec<f64> = picks.iter().map(|&p| (p % (n - 1)) as f64 + 1.5).collect();
        values.extend([0.0, n as f64]);
        let levels = quantization_levels(&values, n).unwrap();
        prop_assert_eq!(levels.half_width, 0.5);
        let hw = values.len();
        let fa = Tensor::new([1, 1, hw], values.clone()).unwrap();
        let snap = KscoSnapshot { levels, stats: ksco::kurtosis(&values).unwrap() };
        let tape = Tape::new();
        let s = quantized_intensity(tape.constant(fa), &snap, false).unwrap().s.to_tensor();
        for p in 0..picks.len() {
            prop_assert!((0..n).all(|l| s.data()[l * hw + p] == 0.0));
        }
    }

    #[test]
    fn responses_scale_linearly_with_kurtosis(h in extent(), w in extent(), factor in 0.1f64..10.0, seed in any::<u64>()) {
        let fa = tensor(vec![1, h * w + 1, 1], seed);
        let snap = ksco::snapshot(&fa, 8).unwrap();
        prop_assume!(!snap.stats.degenerate);
        let mut scaled = snap.clone();
        scaled.stats.kurtosis *= factor;
        let tape = Tape::new();
        let s1 = quantized_intensity(tape.constant(fa.clone()), &snap, false).unwrap().s.to_tensor();
        let s2 = quantized_intensity(tape.constant(fa), &scaled, false).unwrap().s.to_tensor();
        for (a, b) in s1.data().iter().zip(s2.data()) {
            prop_assert!((a * factor - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn embedding_commutes_with_pixel_permutation(len in 2usize..=40, seed in any::<u64>(), shift in 1usize..40) {
        let fa = tensor(vec![1, 1, len], seed);
        let perm: Vec<usize> = (0..len).map(|i| (i * 7 + shift) % len).collect();
        prop_assume!({ let mut p = perm.clone(); p.sort(); p.dedup(); p.len() == len });
        let permuted = Tensor::new([1, 1, len], perm.iter().map(|&i| fa.data()[i]).collect()).unwrap();
        let snap = ksco::snapshot(&fa, 6).unwrap();
        let snap_p = ksco::snapshot(&permuted, 6).unwrap();
        prop_assert_eq!(&snap.levels, &snap_p.levels);
        prop_assert!((snap.stats.kurtosis - snap_p.stats.kurtosis).abs() <= 1e-12 * snap.stats.kurtosis.abs().max(1.0));
        let tape = Tape::new();
        let s = quantized_intensity(tape.constant(fa), &snap, false).unwrap().s.to_tensor();
        let sp = quantized_intensity(tape.constant(permuted), &snap, false).unwrap().s.to_tensor();
        for l in 0..6 {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert_eq!(sp.data()[l * len + j], s.data()[l * len + i]);
            }
        }
    }

    #[test]
    fn partition_then_merge_is_identity(c in extent(), nh in 1usize..=3, nw in 1usize..=3, k in 1usize..=4, seed in any::<u64>()) {
        let tape = Tape::new();
        let t = tensor(vec![c, nh * k, nw * k], seed);
        let parts = window_partition(tape.constant(t.clone()), k).unwrap();
        prop_assert_eq!(parts.shape(), vec![nh * nw, k * k, c]);
        prop_assert_eq!(window_merge(parts, c, nh * k, nw * k, k).unwrap().to_tensor(), t);
    }

    #[test]
    fn comprehensive_attention_is_input_plus_terms(c in extent(), h in extent(), w in extent(), seed in any::<u64>()) {
        let tape = Tape::new();
        let t = tensor(vec![c, h, w], seed);
        let x = tape.constant(t.clone());
        let out = comprehensive_attention(x).unwrap().to_tensor();
        let (th, tw) = comprehensive_attention_terms(x).unwrap();
        let (th, tw) = (th.to_tensor(), tw.to_tensor());
        for i in 0..t.len() {
            prop_assert_eq!(out.data()[i], (t.data()[i] + th.data()[i]) + tw.data()[i]);
        }
    }

    #[test]
    fn unit_window_attention_is_pixelwise_linear(h in extent(), w in extent(), seed in any::<u64>()) {
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "a", 4, 2, 1).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false);
        let (x1, x2) = (tensor(vec![4, h, w], seed), tensor(vec![4, h, w], !seed));
        let run = |t: &Tensor<f64>| attn.self_attention(&g, tape.constant(t.clone())).unwrap().to_tensor();
        let sum = Tensor::new([4, h, w], x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect()).unwrap();
        let (y1, y2, ys) = (run(&x1), run(&x2), run(&sum));
        for i in 0..ys.len() {
            prop_assert!((ys.data()[i] - y1.data()[i] - y2.data()[i]).abs() <= 1e-12);
        }
        // no mixing: perturbing one pixel changes only that pixel
        let mut bumped = x1.clone();
        bumped.data_mut()[0] += 1.0;
        let yb = run(&bumped);
        let hw = h * w;
        for i in 0..yb.len() {
            if i % hw != 0 {
                prop_assert_eq!(yb.data()[i], y1.data()[i]);
            }
        }
    }

    #[test]
    fn window_attention_commutes_with_window_permutation(nh in 1usize..=3, nw in 1usize..=3, rot in 0usize..9, seed in any::<u64>()) {
        let (k, c) = (2, 4);
        let p = nh * nw;
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut store, &mut ChaCha8Rng::seed_from_u64(seed), "a", c, 2, k).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &store, false);
        let x = tensor(vec![c, nh * k, nw * k], seed);
        let shuffle = |t: &Tensor<f64>| {
            let parts = window_partition(tape.constant(t.clone()), k).unwrap().to_tensor();
            let block = k * k * c;
            let data = (0..p).flat_map(|i| parts.data()[((i + rot) % p) * block..][..block].to_vec()).collect();
            window_merge(tape.constant(Tensor::new([p, k * k, c], data).unwrap()), c, nh * k, nw * k, k).unwrap().to_tensor()
        };
        let direct = shuffle(&attn.self_attention(&g, tape.constant(x.clone())).unwrap().to_tensor());
        let permuted = attn.self_attention(&g, tape.constant(shuffle(&x))).unwrap().to_tensor();
        prop_assert_eq!(direct, permuted);
    }

    #[test]
    fn dice_jaccard_identity(tp in 0u64..500, fp in 0u64..500, tn in 0u64..500, fn_ in 0u64..500) {
        let c = Confusion { tp, fp, tn, fn_ };
        let (dice, ja) = (c.dice().value, c.jaccard().value);
        prop_assert!((dice - 2.0 * ja / (1.0 + ja)).abs() <= 1e-12);
    }

    #[test]
    fn swap_symmetry_of_accuracy_and_ge((h, w, pred, gt) in mask_pair(6)) {
        let flip = |m: &[bool]| m.iter().map(|&v| !v).collect::<Vec<_>>();
        let a = metrics::confusion(&as_f64(&pred), &as_f64(&gt)).unwrap();
        let b = metrics::confusion(&as_f64(&flip(&pred)), &as_f64(&flip(&gt))).unwrap();
        prop_assert_eq!(a.total(), (h * w) as u64);
        prop_assert_eq!(a.accuracy().value, b.accuracy().value);
        for mode in [GeMode::Arithmetic, GeMode::Geometric] {
            prop_assert!((a.ge(mode).value - b.ge(mode).value).abs() <= 1e-15);
        }
    }

    #[test]
    fn hd95_symmetric_and_below_hausdorff((h, w, pred, gt) in mask_pair(12)) {
        let (p, g) = (as_f64(&pred), as_f64(&gt));
        let forward = metrics::hd95(&p, &g, h, w).unwrap();
        prop_assert_eq!(forward, metrics::hd95(&g, &p, h, w).unwrap());
        let full = metrics::hausdorff(&p, &g, h, w).unwrap();
        prop_assert_eq!(forward.is_some(), full.is_some());
        if let (Some(a), Some(b)) = (forward, full) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn mask_decoding_is_binary(pixels in prop::collection::vec(any::<u8>(), 1..64)) {
        let n = pixels.len() as u32;
        let img = image::GrayImage::from_raw(n, 1, pixels.clone()).unwrap();
        let t = texstat::data::mask_to_tensor(&img);
        for (&v, &p) in t.data().iter().zip(&pixels) {
            prop_assert_eq!(v, if p > 127 { 1.0 } else { 0.0 });
        }
    }
}

#[test]
fn dice_and_jaccard_are_not_swap_symmetric() {
    let a = Confusion {
        tp: 1,
        fp: 1,
        tn: 5,
        fn_: 0,
    };
    let swapped = Confusion {
        tp: a.tn,
        fp: a.fn_,
        tn: a.tp,
        fn_: a.fp,
    };
    assert_ne!(a.dice().value, swapped.dice().value);
    assert_ne!(a.jaccard().value, swapped.jaccard().value);
}
