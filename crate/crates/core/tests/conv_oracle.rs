mod common;

use volcam::ops::conv_nd;
use volcam::Tensor;

#[test]
fn ramp_with_ones_kernel() {
    let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| i as f64).unwrap();
    let k = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
    let y = conv_nd(&x, &k, None, &[1, 1], &[0, 0]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2]);
    assert_eq!(y.data(), &[45.0, 54.0, 81.0, 90.0]);
    assert_eq!(y, common::naive_conv(&x, &k, None, &[1, 1], &[0, 0]));
}

#[test]
fn constant_cube() {
    let x = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]).unwrap();
    let k = Tensor::<f64>::ones(&[1, 1, 2, 2, 2]).unwrap();
    let y = conv_nd(&x, &k, None, &[1, 1, 1], &[0, 0, 0]).unwrap();
    assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 8.0));
}

#[test]
fn unit_pointwise_kernel_is_identity() {
    let x = Tensor::<f64>::from_fn(&[2, 1, 3, 5], |i| (i as f64).sin()).unwrap();
    let k = Tensor::<f64>::ones(&[1, 1, 1, 1]).unwrap();
    assert_eq!(conv_nd(&x, &k, None, &[1, 1], &[0, 0]).unwrap(), x);
}

#[test]
fn exhaustive_2d_sweep_matches_oracle() {
    let r = common::conv_sweep(2);
    assert!(r.cases > 1000);
    assert!(r.mismatches.is_empty(), "{:#?}", &r.mismatches[..r.mismatches.len().min(10)]);
}

#[test]
fn exhaustive_3d_sweep_matches_oracle() {
    let r = common::conv_sweep(3);
    assert!(r.cases > 5000);
    assert!(r.mismatches.is_empty(), "{:#?}", &r.mismatches[..r.mismatches.len().min(10)]);
}
