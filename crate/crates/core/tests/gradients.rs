mod common;

use common::{gradient_sweep, relative_error, Instance};

#[test]
fn total_loss_gradients_match_central_differences() {
    let worst = gradient_sweep(100, 8, 4, 3, 2);
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn wider_instances_also_match() {
    let worst = gradient_sweep(10, 16, 6, 5, 4);
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn oracle_detects_a_wrong_gradient() {
    let inst = Instance::random(7, 8, 4, 3, 2, 3);
    let mut analytic = inst.analytic();
    analytic.w2[0] += 0.1 * analytic.w2.iter().map(|x| x.abs()).fold(0.0, f64::max) + 1e-3;
    let numeric = inst.numeric(1e-6);
    assert!(relative_error(&analytic.w2, &numeric.w2) > 1e-5);
}
