//! Property tests: every implemented adjoint against its dense oracle.

mod common;

use common::oracles::{case, CHECKS, TOL};
use proptest::prelude::*;

fn shapes() -> impl Strategy<Value = (usize, usize, bool, u64)> {
    (3usize..=8, 4usize..=8, any::<bool>(), any::<u64>())
}

fn check(k: usize, (nt, nx, one_sided, seed): (usize, usize, bool, u64)) -> Result<(), TestCaseError> {
    let (name, f) = CHECKS[k];
    let err = f(case(nt, nx, one_sided, seed));
    prop_assert!(err <= TOL, "{name}: relative error {err:e} on {nt}x{nx}");
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn residual_state_adjoint(s in shapes()) { check(0, s)?; }

    #[test]
    fn observation_adjoint(s in shapes()) { check(1, s)?; }

    #[test]
    fn parameter_adjoint(s in shapes()) { check(2, s)?; }

    #[test]
    fn reduced_adjoint(s in shapes()) { check(3, s)?; }

    #[test]
    fn riesz_maps(s in shapes()) { check(4, s)?; }

    #[test]
    fn weighted_l2_adjoints(s in shapes()) { check(5, s)?; }
}
