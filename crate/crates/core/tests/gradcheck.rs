//! Finite-difference verification of every differentiable op, plus the full
//! objective through a small hierarchy.

mod common;

use common::{check_op_gradients, CheckInput, ModelLossCheck};
use mipalign_core::field::Window;
use mipalign_core::loss::{mask_planes, PenaltyMask};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[test]
fn grad_conv2d() {
    let mut r = rng(1);
    let inputs = vec![
        CheckInput::random(&[1, 2, 5, 5], -1.0, 1.0, &mut r),
        CheckInput::random(&[3, 2, 3, 3], -0.6, 0.6, &mut r),
        CheckInput::random(&[3], -0.3, 0.3, &mut r),
    ];
    let err = check_op_gradients(
        &inputs,
        &|tape, v| tape.conv2d(v[0], v[1], v[2], 1).unwrap(),
        11,
    );
    assert!(err < TOL, "conv2d rel err {err}");
}

#[test]
fn grad_conv2d_7x7_batched() {
    let mut r = rng(2);
    let inputs = vec![
        CheckInput::random(&[2, 1, 8, 8], -1.0, 1.0, &mut r),
        CheckInput::random(&[2, 1, 7, 7], -0.4, 0.4, &mut r),
        CheckInput::random(&[2], -0.3, 0.3, &mut r),
    ];
    let err = check_op_gradients(
        &inputs,
        &|tape, v| tape.conv2d(v[0], v[1], v[2], 3).unwrap(),
        12,
    );
    assert!(err < TOL, "conv2d 7x7 rel err {err}");
}

#[test]
fn grad_maxpool() {
    // distinct values keep the argmax stable under the probe step
    let mut r = rng(3);
    let inputs = vec![CheckInput::random(&[1, 2, 4, 4], -1.0, 1.0, &mut r)];
    let err = check_op_gradients(&inputs, &|tape, v| tape.maxpool2x2(v[0]).unwrap(), 13);
    assert!(err < TOL, "maxpool rel err {err}");
}

#[test]
fn grad_avgpool() {
    let mut r = rng(4);
    let inputs = vec![CheckInput::random(&[1, 2, 4, 4], -1.0, 1.0, &mut r)];
    let err = check_op_gradients(&inputs, &|tape, v| tape.avgpool2x2(v[0]).unwrap(), 14);
    assert!(err < TOL, "avgpool rel err {err}");
}

#[test]
fn grad_leaky_relu() {
    // inputs held away from the kink at zero
    let mut r = rng(5);
    let mut input = CheckInput::random(&[2, 3, 2, 2], 0.05, 1.0, &mut r);
    for (i, v) in input.data.iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    let err = check_op_gradients(&[input], &|tape, v| tape.leaky_relu(v[0], 0.01).unwrap(), 15);
    assert!(err < TOL, "leaky_relu rel err {err}");
}

#[test]
fn grad_elementwise_and_reductions() {
    let mut r = rng(6);
    let a = CheckInput::random(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = CheckInput::random(&[1, 2, 3, 3], -1.0, 1.0, &mut r);

    let err = check_op_gradients(&[a, b], &|tape, v| tape.add(v[0], v[1]).unwrap(), 16);
    assert!(err < TOL, "add rel err {err}");

    let a = CheckInput::random(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = CheckInput::random(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let err = check_op_gradients(&[a, b], &|tape, v| tape.sub(v[0], v[1]).unwrap(), 17);
    assert!(err < TOL, "sub rel err {err}");

    let a = CheckInput::random(&[2, 2, 2, 2], -1.0, 1.0, &mut r);
    let err = check_op_gradients(&[a], &|tape, v| tape.square(v[0]).unwrap(), 18);
    assert!(err < TOL, "square rel err {err}");

    let a = CheckInput::random(&[2, 2, 2, 2], -1.0, 1.0, &mut r);
    let err = check_op_gradients(&[a], &|tape, v| tape.scale(v[0], -0.37).unwrap(), 19);
    assert!(err < TOL, "scale rel err {err}");

    let a = CheckInput::random(&[1, 1, 4, 4], -1.0, 1.0, &mut r);
    let err = check_op_gradients(&[a], &|tape, v| tape.sum(v[0]).unwrap(), 20);
    assert!(err < TOL, "sum rel err {err}");

    let a = CheckInput::random(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let b = CheckInput::random(&[1, 3, 3, 3], -1.0, 1.0, &mut r);
    let err = check_op_gradients(&[a, b], &|tape, v| tape.concat_channels(v[0], v[1]).unwrap(), 21);
    assert!(err < TOL, "concat rel err {err}");
}

#[test]
fn grad_warp_source_and_field() {
    let mut r = rng(7);
    let source = CheckInput::random(&[1, 2, 5, 5], 0.0, 1.0, &mut r);
    let field = CheckInput::random(&[1, 2, 5, 5], -0.3, 0.3, &mut r);
    let err = check_op_gradients(&[source, field], &|tape, v| tape.warp(v[0], v[1]).unwrap(), 22);
    assert!(err < TOL, "warp rel err {err}");
}

#[test]
fn grad_warp_windowed() {
    let mut r = rng(8);
    let source = CheckInput::random(&[1, 1, 5, 5], 0.0, 1.0, &mut r);
    let field = CheckInput::random(&[1, 2, 5, 5], -0.15, 0.15, &mut r);
    let win = Window { oy: 2, ox: 2, full_h: 9, full_w: 9 };
    let err = check_op_gradients(
        &[source, field],
        &|tape, v| tape.warp_windowed(v[0], v[1], win).unwrap(),
        23,
    );
    assert!(err < TOL, "windowed warp rel err {err}");
}

#[test]
fn grad_upsample() {
    let mut r = rng(9);
    let input = CheckInput::random(&[1, 2, 4, 4], -1.0, 1.0, &mut r);
    let err = check_op_gradients(&[input], &|tape, v| tape.upsample2x(v[0]).unwrap(), 24);
    assert!(err < TOL, "upsample rel err {err}");
}

#[test]
fn grad_smoothness_plain_and_masked() {
    let mut r = rng(10);
    let field = CheckInput::random(&[1, 2, 5, 5], -0.5, 0.5, &mut r);
    let err = check_op_gradients(&[field], &|tape, v| tape.smoothness(v[0], None).unwrap(), 25);
    assert!(err < TOL, "smoothness rel err {err}");

    let field = CheckInput::random(&[1, 2, 5, 5], -0.5, 0.5, &mut r);
    let mut mask = PenaltyMask::empty(5, 5);
    mask.set(2, 2, true);
    mask.set(0, 3, true);
    let planes = mask_planes(&[&mask]).unwrap();
    let err = check_op_gradients(
        &[field],
        &|tape, v| tape.smoothness(v[0], Some(planes.clone())).unwrap(),
        26,
    );
    assert!(err < TOL, "masked smoothness rel err {err}");
}

#[test]
fn grad_full_objective_through_hierarchy() {
    let mut check = ModelLossCheck::new(16, 99);
    let err = check.spot_check(4, 123);
    assert!(err < TOL, "full objective rel err {err}");
}
