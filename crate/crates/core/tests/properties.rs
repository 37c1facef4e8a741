use drk_core::enhance::{se_fwd, SeParams};
use drk_core::layers::{
    bilinear_sample, conv2d_fwd, upsample_bilinear, uniform_tensor, Conv2dParams,
};
use drk_core::loss::{bce, focal, raf, RafConfig};
use drk_core::metrics::{iou, EvalReport, Mask};
use drk_core::optim::{clip_grads, global_norm};
use drk_core::tensor::{ewise, read_dten, reduce, write_dten, BinaryOp, ReduceOp};
use drk_core::{DType, Rng, Tensor};
use proptest::prelude::*;

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..5, 1..=4)
}

fn tensor_strategy(lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    dims_strategy().prop_flat_map(move |dims| {
        let n = dims.iter().product::<usize>();
        prop::collection::vec(lo..hi, n)
            .prop_map(move |data| Tensor::from_vec(&dims, data).unwrap())
    })
}

fn int_pair() -> impl Strategy<Value = (Tensor, Tensor, Tensor)> {
    dims_strategy().prop_flat_map(|dims| {
        let n = dims.iter().product::<usize>();
        let v = move || prop::collection::vec(-1_000_000i64..1_000_000, n);
        (v(), v(), v()).prop_map(move |(a, b, c)| {
            let t = |x: Vec<i64>| Tensor::from_vec(&dims, x.into_iter().map(|v| v as f64).collect()).unwrap();
            (t(a), t(b), t(c))
        })
    })
}

fn mask_strategy(h: usize, w: usize, density: f64) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::weighted(density), h * w).prop_map(move |bits| {
        Mask::new(h, w, bits.into_iter().map(u8::from).collect()).unwrap()
    })
}

fn probs(n: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (
        prop::collection::vec(0.0f64..1.0, n),
        prop::collection::vec(prop::bool::ANY, n),
    )
        .prop_map(move |(p, y)| {
            (
                Tensor::from_vec(&[1, 1, 1, n], p).unwrap(),
                Tensor::from_vec(&[1, 1, 1, n], y.into_iter().map(|b| b as u8 as f64).collect())
                    .unwrap(),
            )
        })
}

fn bits_eq(a: &Tensor, b: &Tensor) -> bool {
    a.dims() == b.dims()
        && a.dtype() == b.dtype()
        && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dten_round_trip(t in tensor_strategy(-1e6, 1e6), f32 in any::<bool>()) {
        let t = if f32 { t.to_dtype(DType::F32) } else { t };
        let mut bytes = Vec::new();
        write_dten(&t, &mut bytes).unwrap();
        let back = read_dten(&mut bytes.as_slice()).unwrap();
        prop_assert!(bits_eq(&t, &back));
        let mut again = Vec::new();
        write_dten(&back, &mut again).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn ewise_add_exact_on_integers((a, b, c) in int_pair()) {
        let add = |x: &Tensor, y: &Tensor| ewise(BinaryOp::Add, x, y).unwrap();
        prop_assert!(bits_eq(&add(&a, &b), &add(&b, &a)));
        prop_assert!(bits_eq(&add(&add(&a, &b), &c), &add(&a, &add(&b, &c))));
    }

    #[test]
    fn full_sum_is_left_to_right(t in tensor_strategy(-1e3, 1e3)) {
        let axes: Vec<usize> = (0..t.rank()).collect();
        let s = reduce(ReduceOp::Sum, &t, &axes).unwrap();
        let seq = t.data().iter().fold(0.0, |acc, &v| acc + v);
        prop_assert_eq!(s.data()[0].to_bits(), seq.to_bits());
    }

    #[test]
    fn bilinear_is_linear_in_input(
        seed in any::<u64>(),
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
        py in -2.0f64..7.0,
        px in -2.0f64..7.0,
    ) {
        let mut rng = Rng::new(seed);
        let x = uniform_tensor(&mut rng, &[1, 2, 5, 6], -1.0, 1.0).unwrap();
        let y = uniform_tensor(&mut rng, &[1, 2, 5, 6], -1.0, 1.0).unwrap();
        let combo = ewise(BinaryOp::Add, &x.scale(a), &y.scale(b)).unwrap();
        for c in 0..2 {
            let lhs = bilinear_sample(&combo, px, py, 0, c).unwrap();
            let rhs = a * bilinear_sample(&x, px, py, 0, c).unwrap()
                + b * bilinear_sample(&y, px, py, 0, c).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn upsample_stays_within_bounds(
        seed in any::<u64>(),
        h in 1usize..6,
        w in 1usize..6,
        factor in 1usize..4,
    ) {
        let mut rng = Rng::new(seed);
        let x = uniform_tensor(&mut rng, &[2, 2, h, w], -5.0, 5.0).unwrap();
        let y = upsample_bilinear(&x, factor).unwrap();
        prop_assert_eq!(y.dims(), &[2, 2, h * factor, w * factor][..]);
        let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(y.data().iter().all(|&v| v >= lo && v <= hi));
    }

    #[test]
    fn delta_kernel_conv_is_identity(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = Rng::new(seed);
        let x = uniform_tensor(&mut rng, &[2, 3, 6, 5], -2.0, 2.0).unwrap();
        let mut w = vec![0.0; 3 * 3 * k * k];
        for c in 0..3 {
            w[((c * 3 + c) * k + k / 2) * k + k / 2] = 1.0;
        }
        let p = Conv2dParams::new(
            Tensor::from_vec(&[3, 3, k, k], w).unwrap(),
            Tensor::zeros(&[3]).unwrap(),
            1,
            (k - 1) / 2,
        )
        .unwrap();
        prop_assert!(bits_eq(&conv2d_fwd(&x, &p).unwrap(), &x));
    }

    #[test]
    fn se_gate_strictly_inside_unit_interval(seed in any::<u64>(), c in 1usize..12) {
        let mut rng = Rng::new(seed);
        let p = SeParams::init(&mut rng, c, 4).unwrap();
        let x = uniform_tensor(&mut rng, &[2, c, 4, 4], -3.0, 3.0).unwrap();
        let (_, s) = se_fwd(&x, &p).unwrap();
        prop_assert_eq!(s.dims(), &[2, c][..]);
        prop_assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in mask_strategy(7, 9, 0.3), b in mask_strategy(7, 9, 0.3)) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab.to_bits(), iou(&b, &a).unwrap().to_bits());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn prec_nonincreasing_in_k(ious in prop::collection::vec(0.0f64..=1.0, 1..40)) {
        let report = EvalReport::from_ious(
            ious.iter().enumerate().map(|(i, &v)| (i.to_string(), v)).collect(),
        )
        .unwrap();
        for w in report.prec_at.windows(2) {
            prop_assert!(w[0].0 < w[1].0 && w[0].1 >= w[1].1);
        }
    }

    #[test]
    fn clipping_bounds_global_norm(
        seed in any::<u64>(),
        scale in 1e-3f64..1e3,
        max_norm in 1e-3f64..10.0,
    ) {
        let mut rng = Rng::new(seed);
        let mut grads: Vec<Tensor> = [[3usize, 4], [7, 1], [2, 2]]
            .iter()
            .map(|d| uniform_tensor(&mut rng, d, -scale, scale).unwrap())
            .collect();
        let before = global_norm(&grads);
        let reported = clip_grads(&mut grads, max_norm);
        prop_assert_eq!(reported, before);
        let after = global_norm(&grads);
        prop_assert!(after <= max_norm + 1e-9);
        if before <= max_norm {
            prop_assert_eq!(after, before);
        }
    }

    #[test]
    fn loss_components_nonnegative((p, y) in probs(24)) {
        let out = raf(&p, &y, &RafConfig::default()).unwrap();
        prop_assert!(out.bce >= 0.0 && out.focal >= 0.0 && out.dice >= 0.0);
        prop_assert!(out.dice <= 1.0);
    }

    #[test]
    fn bce_gradient_negative_on_foreground(p in prop::collection::vec(1e-6f64..(1.0 - 1e-6), 1..20)) {
        let n = p.len();
        let pt = Tensor::from_vec(&[1, 1, 1, n], p).unwrap();
        let y = Tensor::new(&[1, 1, 1, n], 1.0).unwrap();
        let (_, g) = bce(&pt, &y, 1e-7).unwrap();
        prop_assert!(g.data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn focal_to_bce_ratio_decreases_in_p(
        p1 in 0.01f64..0.98,
        dp in 0.005f64..0.01,
        gamma in 0.5f64..4.0,
    ) {
        let y = Tensor::new(&[1], 1.0).unwrap();
        let ratio = |p: f64| {
            let t = Tensor::new(&[1], p).unwrap();
            focal(&t, &y, 0.25, gamma, 1e-7).unwrap().0 / bce(&t, &y, 1e-7).unwrap().0
        };
        prop_assert!(ratio(p1 + dp) < ratio(p1));
    }
}
