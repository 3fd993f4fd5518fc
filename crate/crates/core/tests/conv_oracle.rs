mod common;

use common::{conv_oracle, max_rel_diff, uniform};
use eam_core::ops::{conv2d, Conv2dParams, ConvGeometry};
use eam_core::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn conv2d_matches_nested_loops_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let k: usize = [1, 3, 7][case % 3];
        let d: usize = [1, 6, 12, 18][(case / 3) % 4];
        let span = d * (k - 1) + 1;
        let pad = if case % 2 == 0 { d * (k - 1) / 2 } else { rng.random_range(0..=d) };
        let stride = rng.random_range(1..=2);
        let min_side = span.saturating_sub(2 * pad).max(1);
        let h = rng.random_range(min_side..min_side + 6);
        let w = rng.random_range(min_side..min_side + 6);
        let (n, cin, cout) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
        let x = uniform([n, cin, h, w], &mut rng);
        let weight = uniform([cout, cin, k, k], &mut rng);
        let bias = uniform([1, cout, 1, 1], &mut rng);
        let expected = conv_oracle(&x, &weight, &bias, stride, pad, d);
        let p = Conv2dParams {
            weight,
            bias,
            geometry: ConvGeometry::new(stride, pad, d),
        };
        let got = conv2d(&x, &p).unwrap();
        assert_eq!(got.shape(), expected.shape(), "case {case}");
        let err = max_rel_diff(got.data(), expected.data());
        assert!(err <= 1e-6, "case {case} (k={k}, d={d}): rel error {err}");
        worst = worst.max(err);
    }
    assert!(worst <= 1e-6);
}

#[test]
fn single_precision_path_agrees() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = uniform([2, 3, 9, 9], &mut rng);
    let w = uniform([4, 3, 3, 3], &mut rng);
    let b = uniform([1, 4, 1, 1], &mut rng);
    let expected = conv_oracle(&x, &w, &b, 1, 2, 2);
    let p = Conv2dParams {
        weight: w.cast::<f32>(),
        bias: b.cast::<f32>(),
        geometry: ConvGeometry::new(1, 2, 2),
    };
    let got: Tensor4<f64> = conv2d(&x.cast::<f32>(), &p).unwrap().cast();
    assert!(common::max_abs_diff(got.data(), expected.data()) < 1e-5);
}

#[test]
fn kernel_wider_than_padded_input_is_rejected() {
    let x = Tensor4::<f64>::zeros([1, 1, 4, 4]);
    let p = Conv2dParams {
        weight: Tensor4::zeros([1, 1, 3, 3]),
        bias: Tensor4::zeros([1, 1, 1, 1]),
        geometry: ConvGeometry::new(1, 0, 6),
    };
    assert!(conv2d(&x, &p).is_err());
}
