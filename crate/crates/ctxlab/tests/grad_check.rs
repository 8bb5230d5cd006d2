//! Finite-difference validation of the hand-written backward pass; the
//! oracle itself lives in `common` so the acceptance gate can rerun it.

mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let (worst, name) = common::finite_difference_check();
    println!("worst block ratio: {worst:.2e} ({name})");
}
