mod common;

use common::{gradient_suite, supernet_spot_check};

#[test]
fn every_op_matches_central_differences() {
    let reports = gradient_suite(11, 20);
    assert!(reports.len() >= 14);
    for r in &reports {
        assert_eq!(r.instances, 20);
        assert!(r.max_rel < 1e-4, "{}: relative error {:.3e}", r.op, r.max_rel);
    }
}

#[test]
fn supernet_loss_gradient_on_five_parameters() {
    let checks = supernet_spot_check(5);
    assert_eq!(checks.len(), 5);
    for (name, err) in checks {
        assert!(err < 1e-3, "{name}: relative error {err:.3e}");
    }
}
