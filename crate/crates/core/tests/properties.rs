use proptest::prelude::*;

use capsnet_core::augment::{adjust_brightness, adjust_contrast, augment_dataset, AugmentConfig};
use capsnet_core::capsule::{route, squash};
use capsnet_core::dataset::{read_binary, write_binary, IMAGE_SIZE};
use capsnet_core::losses::{margin_loss, reconstruction_loss};
use capsnet_core::tensor::{conv2d_forward, softmax, Padding};
use capsnet_core::{Dataset, EvalReport, LossConfig, Split, Tensor};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let len: usize = shape.iter().product();
    proptest::collection::vec(lo..hi, len).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn dataset(max: usize) -> impl Strategy<Value = Dataset> {
    (1..=max, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(n, c)| {
        (
            proptest::collection::vec(0.0f32..=1.0, n * IMAGE_SIZE * IMAGE_SIZE * c),
            proptest::collection::vec(0u16..43, n),
            prop_oneof![Just(Split::Train), Just(Split::Test)],
        )
            .prop_map(move |(img, lab, split)| Dataset::new(img, lab, c, split).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn squash_keeps_direction_and_shrinks(s in tensor(&[4, 5], -50.0, 50.0)) {
        let v = squash(&s);
        for i in 0..4 {
            let (a, b) = (s.outer(i), v.outer(i));
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!(nb < 1.0);
            prop_assert!(nb <= na + 1e-12);
            if na > 1e-6 {
                let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
                prop_assert!((cos - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn routing_output_is_bounded_and_couplings_normalised(
        u in tensor(&[2, 3, 4, 2], -3.0, 3.0),
        r in 1usize..5,
    ) {
        let (v, state) = route(&u, r).unwrap();
        prop_assert_eq!(v.shape(), &[2, 4, 2]);
        for row in v.data().chunks_exact(2) {
            prop_assert!(row.iter().map(|x| x * x).sum::<f64>() < 1.0);
        }
        for it in &state.iterations {
            for row in it.coupling.data().chunks_exact(4) {
                prop_assert!(row.iter().all(|&c| c > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(x in tensor(&[3, 6], -30.0, 30.0)) {
        let y = softmax(&x, 1).unwrap();
        for row in y.data().chunks_exact(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_is_linear_in_the_input(
        a in tensor(&[1, 5, 5, 2], -1.0, 1.0),
        b in tensor(&[1, 5, 5, 2], -1.0, 1.0),
        f in tensor(&[3, 3, 2, 3], -1.0, 1.0),
    ) {
        let zero = Tensor::zeros(&[3]);
        let sum = Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
        let ya = conv2d_forward(&a, &f, &zero, 1, Padding::None).unwrap();
        let yb = conv2d_forward(&b, &f, &zero, 1, Padding::None).unwrap();
        let ys = conv2d_forward(&sum, &f, &zero, 1, Padding::None).unwrap();
        for ((p, q), s) in ya.data().iter().zip(yb.data()).zip(ys.data()) {
            prop_assert!((p + q - s).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_are_nonnegative(
        lengths in tensor(&[3, 5], 0.0, 0.999),
        labels in proptest::collection::vec(0usize..5, 3),
        x in tensor(&[2, 4], 0.0, 1.0),
        y in tensor(&[2, 4], 0.0, 1.0),
    ) {
        let (m, _) = margin_loss(&lengths, &labels, &LossConfig::default()).unwrap();
        prop_assert!(m >= 0.0);
        let (r, _) = reconstruction_loss(&x, &y).unwrap();
        prop_assert!(r >= 0.0);
    }

    #[test]
    fn photometric_jitter_stays_in_range(
        img in proptest::collection::vec(0.0f32..=1.0, 48),
        b in 0.1f64..3.0,
        c in 0.1f64..3.0,
    ) {
        for p in adjust_brightness(&img, b).unwrap() {
            prop_assert!((0.0..=1.0).contains(&p));
        }
        for p in adjust_contrast(&img, 3, c).unwrap() {
            prop_assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn evaluation_counts_are_consistent(
        pairs in proptest::collection::vec((0usize..7, 0usize..7), 1..200),
    ) {
        let (preds, labels): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let report = EvalReport::from_predictions(&preds, &labels, 7).unwrap();
        let trace: usize = (0..7).map(|k| report.confusion[k][k]).sum();
        prop_assert_eq!(report.correct, trace);
        prop_assert_eq!(report.correct + report.misclassifications, labels.len());
        prop_assert!((report.accuracy * 100.0 - report.ccr_percent).abs() < 1e-9);
        for k in 0..7 {
            prop_assert_eq!(report.confusion[k].iter().sum::<usize>(), report.class_count(k));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn binary_format_round_trips(data in dataset(4)) {
        let bytes = write_binary(&data, Vec::new()).unwrap();
        let back = read_binary(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn augmentation_preserves_labels_and_range(data in dataset(3), seed in any::<u64>(), factor in 1usize..4) {
        let cfg = AugmentConfig { seed, replication_factor: factor, ..AugmentConfig::default() };
        let test_split = data.clone().with_split(Split::Test);
        prop_assert!(augment_dataset(&test_split, &cfg).is_err());
        let data = data.with_split(Split::Train);
        let out = augment_dataset(&data, &cfg).unwrap();
        prop_assert_eq!(out.len(), factor * data.len());
        prop_assert!(out.images().iter().all(|p| (0.0..=1.0).contains(p)));
        let mut want: Vec<u16> = data.labels().iter().flat_map(|&l| std::iter::repeat(l).take(factor)).collect();
        let mut got = out.labels().to_vec();
        want.sort_unstable();
        got.sort_unstable();
        prop_assert_eq!(got, want);
    }
}
