mod common;

use common::{gradient_suite, FD_TOLERANCE};

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut failed = Vec::new();
    for case in gradient_suite() {
        println!("{:<24} {:>4} instances  worst rel err {:.2e}", case.name, case.instances, case.worst);
        if !(case.worst <= FD_TOLERANCE) {
            failed.push(case.name);
        }
    }
    assert!(failed.is_empty(), "gradient mismatch in {failed:?}");
}
