mod common;

#[test]
fn every_op_matches_finite_differences() {
    for c in common::gradient_suite(20) {
        assert!(c.passed(), "{}: worst relative error {:.3e} over {} instances (tol {:.0e})", c.name, c.worst, c.instances, c.tol);
    }
}

#[test]
fn checker_flags_a_wrong_rule() {
    let x = common::rand_tensor(&mut common::rng(1), &[4]);
    let wrong = |g: &mut textspot_core::Graph, v: &[textspot_core::Var]| {
        let t = g.value(v[0]).clone();
        let value = t.data().iter().map(|a| a * a).sum();
        g.fused_scalar(value, vec![(v[0], t)])
    };
    assert!(common::max_grad_error(&wrong, &[x], 64, 0) > 0.1);
}
