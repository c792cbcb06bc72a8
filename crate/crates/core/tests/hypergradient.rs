use sdg_core::bilevel::{self, AuditProblem};

#[test]
fn fd_converges_to_exact_chain_term() {
    let t = bilevel::hypergrad_audit(20, &[1e-1, 1e-2, 1e-3], 0.1, 7).unwrap();
    let med: Vec<f64> = (0..3).map(|k| t.median(k)).collect();
    println!("{med:?}");
    assert!(med[2] <= 1e-2);
    assert!(med[0] >= med[1] && med[1] >= med[2]);
}

#[test]
fn direct_plus_chain_matches_end_to_end() {
    for seed in 0..3 {
        let p = AuditProblem::random(seed).unwrap();
        let alpha = 0.1;
        let inner = p.inner();
        let step = bilevel::inner_step(&inner, &p.params, alpha).unwrap();
        let og = bilevel::outer_grads(&p.outer(), &step.next).unwrap();
        let chain = bilevel::hypergrad_exact(&inner, &p.params, &og.delta, alpha, 10_000).unwrap();
        let total = og.direct.add_scaled(&chain, 1.0).unwrap();
        let e2e = bilevel::total_omega_grad_end_to_end(&inner, &p.outer(), &p.params, alpha, 10_000).unwrap();
        let err = total.add_scaled(&e2e, -1.0).unwrap().norm_l2() / e2e.norm_l2();
        println!("seed {seed}: rel {err:e} |total| {}", e2e.norm_l2());
        assert!(err <= 1e-3);
    }
}
