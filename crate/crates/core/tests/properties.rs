use ndarray::{Array1, Array2, Array3, Array4, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ultralbm::analysis::{dsc, iou, Overlap};
use ultralbm::data::{generate_synthetic, split_dataset, SynthSpec};
use ultralbm::losses::{
    attention_maps, attention_transfer_loss, bce_dice_loss, distill_loss, dkd_loss, gradient_matching_loss,
    plain_kl_loss, sobel_gradients, DistillWeights,
};
use ultralbm::ssm::{flip_sequence, selective_scan, selective_scan_chunked};
use ultralbm::training::{adamw_step, augment, cosine_lr, AdamState, Schedule, TrainConfig};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn probs(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    let mut r = rng(seed);
    Array4::from_shape_simple_fn(shape, || r.random_range(0.01..0.99))
}

fn map_shape() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=3, 3usize..=9, 3usize..=9).prop_map(|(b, h, w)| (b, 1, h, w))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chunked_scan_matches_sequential(seed in any::<u64>(), n in 1usize..200, d in 1usize..4, s in 1usize..6, chunk in 1usize..64) {
        let mut r = rng(seed);
        let u = Array3::from_shape_simple_fn((1, n, d), || r.random_range(-1.0..1.0));
        let dl = Array3::from_shape_simple_fn((1, n, d), || r.random_range(0.01..0.6));
        let a = Array2::from_shape_simple_fn((d, s), || -r.random_range(0.1..2.0));
        let b = Array3::from_shape_simple_fn((1, n, s), || r.random_range(-1.0..1.0));
        let c = Array3::from_shape_simple_fn((1, n, s), || r.random_range(-1.0..1.0));
        let dd = Array1::from_shape_simple_fn(d, || r.random_range(-1.0..1.0));
        let y0 = selective_scan(&u, &dl, &a, &b, &c, &dd).unwrap();
        let y1 = selective_scan_chunked(&u, &dl, &a, &b, &c, &dd, chunk).unwrap();
        let diff = (&y0 - &y1).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        prop_assert!(diff < 1e-10, "{diff}");
    }

    #[test]
    fn flip_is_an_involution(seed in any::<u64>(), n in 1usize..50) {
        let mut r = rng(seed);
        let x = Array3::from_shape_simple_fn((2, n, 3), || r.random_range(-1.0..1.0f64));
        prop_assert_eq!(flip_sequence(&flip_sequence(&x)), x.clone());
        prop_assert_eq!(flip_sequence(&x)[[0, 0, 1]], x[[0, n - 1, 1]]);
    }

    #[test]
    fn dsc_is_a_function_of_iou(seed in any::<u64>(), h in 1usize..12, w in 1usize..12, dp in 0.0..1.0f64, dg in 0.0..1.0f64) {
        let mut r = rng(seed);
        let p = Array4::from_shape_simple_fn((1, 1, h, w), || if r.random_bool(dp) { 0.8 } else { 0.2 });
        let g = Array4::from_shape_simple_fn((1, 1, h, w), || if r.random_bool(dg) { 1.0 } else { 0.0 });
        let (i, d) = (iou(&p, &g, 0.5).unwrap(), dsc(&p, &g, 0.5).unwrap());
        prop_assert!((0.0..=1.0).contains(&i) && (0.0..=1.0).contains(&d));
        prop_assert!((d - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        prop_assert_eq!(i, iou(&g, &p, 0.5).unwrap());
        prop_assert!(d >= i);
    }

    #[test]
    fn merged_overlap_is_global(seed in any::<u64>()) {
        let a = probs(seed, (1, 1, 5, 5));
        let b = probs(seed ^ 1, (1, 1, 5, 5));
        let ga = a.mapv(|v| (v > 0.3) as u8 as f64);
        let gb = b.mapv(|v| (v > 0.7) as u8 as f64);
        let merged = Overlap::measure(&a, &ga, 0.5).unwrap().merge(Overlap::measure(&b, &gb, 0.5).unwrap());
        let both = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
        let gboth = ndarray::concatenate(Axis(0), &[ga.view(), gb.view()]).unwrap();
        prop_assert_eq!(merged, Overlap::measure(&both, &gboth, 0.5).unwrap());
    }

    #[test]
    fn loss_terms_are_non_negative(seed in any::<u64>(), shape in map_shape(), tau in 0.3..5.0f64) {
        let s = probs(seed, shape);
        let t = probs(seed.wrapping_add(1), shape);
        let y = t.mapv(|v| (v > 0.5) as u8 as f64);
        for v in [
            bce_dice_loss(&s, &y).unwrap().value,
            dkd_loss(&s, &t).unwrap().value,
            attention_transfer_loss(&s, &t, tau).unwrap().value,
            gradient_matching_loss(&s, &t).unwrap().value,
            plain_kl_loss(&s, &t, tau).unwrap().value,
        ] {
            prop_assert!(v >= 0.0 && v.is_finite(), "{v}");
        }
    }

    #[test]
    fn teacher_terms_vanish_at_agreement(seed in any::<u64>(), shape in map_shape(), tau in 0.3..5.0f64) {
        let s = probs(seed, shape);
        for lg in [
            dkd_loss(&s, &s).unwrap(),
            attention_transfer_loss(&s, &s, tau).unwrap(),
            gradient_matching_loss(&s, &s).unwrap(),
            plain_kl_loss(&s, &s, tau).unwrap(),
        ] {
            prop_assert!(lg.value.abs() < 1e-10);
            prop_assert!(lg.grad.iter().all(|g| g.abs() < 1e-9));
        }
    }

    #[test]
    fn attention_is_shift_invariant(seed in any::<u64>(), shape in map_shape(), c in -0.005..0.005f64, tau in 0.5..3.0f64) {
        let s = probs(seed, shape);
        let t = probs(seed ^ 7, shape);
        let (a0, _) = attention_maps(&s, &t, tau).unwrap();
        let (a1, _) = attention_maps(&s.mapv(|v| v + c), &t, tau).unwrap();
        prop_assert!((&a0 - &a1).mapv(f64::abs).sum() < 1e-10);
        for row in a0.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let l0 = attention_transfer_loss(&s, &t, tau).unwrap().value;
        let l1 = attention_transfer_loss(&s.mapv(|v| v + c), &t.mapv(|v| v - c), tau).unwrap().value;
        prop_assert!((l0 - l1).abs() < 1e-8);
    }

    #[test]
    fn sobel_is_translation_blind(seed in any::<u64>(), shape in map_shape(), c in -0.01..0.01f64) {
        let s = probs(seed, shape);
        let (gx, gy) = sobel_gradients(&s).unwrap();
        let (hx, hy) = sobel_gradients(&s.mapv(|v| v + c)).unwrap();
        prop_assert!((&gx - &hx).mapv(f64::abs).sum() < 1e-10);
        prop_assert!((&gy - &hy).mapv(f64::abs).sum() < 1e-10);
    }

    #[test]
    fn distill_total_is_weighted_sum(seed in any::<u64>(), shape in map_shape(), w in prop::array::uniform4(0.0..2.0f64)) {
        let s = probs(seed, shape);
        let t = probs(seed ^ 3, shape);
        let y = t.mapv(|v| (v > 0.5) as u8 as f64);
        let weights = DistillWeights { lambda_h: w[0], lambda_s: w[1], lambda_a: w[2], lambda_g: w[3], tau_a: 1.0 };
        let (br, _) = distill_loss(&s, &t, &y, &weights).unwrap();
        let expect = w[0] * br.hard + w[1] * br.dkd + w[2] * br.attention + w[3] * br.gradient;
        prop_assert!((br.total - expect).abs() < 1e-12);
    }

    #[test]
    fn lr_stays_in_bounds(epoch in 0usize..1000, t_max in 1usize..100, clamp in any::<bool>()) {
        let mode = if clamp { Schedule::Clamp } else { Schedule::Cyclic };
        let lr = cosine_lr(epoch, 1e-3, t_max, 1e-5, mode);
        prop_assert!((1e-5..=1e-3).contains(&lr));
        if clamp && epoch >= t_max {
            prop_assert_eq!(lr, 1e-5);
        }
    }

    #[test]
    fn adamw_without_gradient_or_decay_is_identity(p in prop::collection::vec(-5.0..5.0f64, 1..8), steps in 1usize..5) {
        let mut x = p.clone();
        let mut st = AdamState::default();
        for _ in 0..steps {
            adamw_step(&mut x, &vec![0.0; p.len()], &mut st, 0.1, 0.0).unwrap();
        }
        prop_assert_eq!(x, p);
    }

    #[test]
    fn augmentation_moves_image_and_mask_together(seed in any::<u64>(), n in 1usize..6) {
        let mask = Array3::from_shape_fn((1, 2 * n, 2 * n), |(_, i, j)| ((i * 7 + j * 3) % 5 == 0) as u8 as f64);
        let mut image = Array3::zeros((3, 2 * n, 2 * n));
        image.index_axis_mut(Axis(0), 1).assign(&mask.index_axis(Axis(0), 0));
        let mut r = rng(seed);
        let (img, m) = augment(&image, &mask, &TrainConfig::default(), &mut r);
        prop_assert_eq!(img.index_axis(Axis(0), 1), m.index_axis(Axis(0), 0));
        prop_assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(m.sum(), mask.sum());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn synthetic_masks_are_binary_and_split_partitions(seed in any::<u64>(), count in 2usize..12, ratio in 0.1..0.9f64) {
        let spec = SynthSpec { count, size: 32, seed, ..SynthSpec::default() };
        let data = generate_synthetic(&spec).unwrap();
        prop_assert_eq!(data.len(), count);
        for s in &data {
            prop_assert!(s.validate().is_ok());
            prop_assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let (a, b) = split_dataset(&data, ratio, seed).unwrap();
        prop_assert_eq!(a.len() + b.len(), count);
    }
}
