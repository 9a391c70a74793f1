use std::time::Instant;

use lmmir::solver::{kcl_residuals, solve_static, verify_kcl, Method, SolveError, SolveOptions};
use lmmir::spice::{parse_netlist, NodeRef};
use lmmir::synth::{generate, GenSpec};
use proptest::prelude::*;

mod common;
use common::{dense_reference, scale_currents, spec_for};

#[test]
fn matches_dense_reference_on_generated_grids() {
    for seed in 0..50 {
        let nl = generate(&spec_for(seed)).unwrap();
        assert!(nl.node_count() <= 2000);
        let t = Instant::now();
        let sol = solve_static(&nl, &SolveOptions::default()).unwrap();
        assert!(t.elapsed().as_secs_f64() < 1.0);
        let reference = dense_reference(&nl);
        for (v, r) in sol.voltages.iter().zip(&reference) {
            assert!((v - r).abs() <= 1e-8 * r.abs().max(1e-12), "seed {seed}: {v} vs {r}");
        }
        assert!(verify_kcl(&nl, &sol) < 1e-8);
    }
}

#[test]
fn cg_agrees_with_direct() {
    for seed in [1, 7, 20] {
        let nl = generate(&spec_for(seed)).unwrap();
        let d = solve_static(&nl, &SolveOptions { method: Method::Direct, ..SolveOptions::default() }).unwrap();
        let c = solve_static(&nl, &SolveOptions { method: Method::Cg, tol: 1e-12, ..SolveOptions::default() }).unwrap();
        assert_eq!((d.method, c.method), (Method::Direct, Method::Cg));
        assert!(c.iterations > 0);
        for (a, b) in d.voltages.iter().zip(&c.voltages) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn analytic_two_node_and_chain() {
    let two = parse_netlist(b"V1 n1_m1_0_0 0 1.0\nR1 n1_m1_0_0 n1_m1_1000_0 1\nI1 n1_m1_1000_0 0 0.1\n").unwrap();
    let s = solve_static(&two, &SolveOptions::default()).unwrap();
    let b = two.index_of(&NodeRef::parse("n1_m1_1000_0").unwrap()).unwrap();
    assert!((s.voltages[b] - 0.9).abs() <= 1e-12);
    assert!((s.ir_drop[b] - 0.1).abs() <= 1e-12);
    assert!(verify_kcl(&two, &s) <= 1e-12);

    let chain = parse_netlist(
        b"V1 n1_m1_0_0 0 1.0\nR1 n1_m1_0_0 n1_m1_1000_0 1\nR2 n1_m1_1000_0 n1_m1_2000_0 1\nI1 n1_m1_2000_0 0 0.05\n",
    )
    .unwrap();
    let s = solve_static(&chain, &SolveOptions::default()).unwrap();
    let c = chain.index_of(&NodeRef::parse("n1_m1_2000_0").unwrap()).unwrap();
    assert!((s.voltages[c] - 0.9).abs() <= 1e-12);
    assert!((s.ir_drop[c] - 0.1).abs() <= 1e-12);

    let mut perturbed = s.clone();
    let mid = chain.index_of(&NodeRef::parse("n1_m1_1000_0").unwrap()).unwrap();
    perturbed.voltages[c] += 1e-3;
    let r = kcl_residuals(&chain, &perturbed);
    assert!((r[mid].abs() - 1e-3).abs() < 1e-12, "{}", r[mid]);
}

#[test]
fn superposition_on_random_cases() {
    for seed in 100..110 {
        let nl = generate(&spec_for(seed)).unwrap();
        let base = solve_static(&nl, &SolveOptions::default()).unwrap();
        let tripled = solve_static(&scale_currents(&nl, 3.0), &SolveOptions::default()).unwrap();
        let max = base.max_ir_drop();
        assert!(max > 0.0 && max <= 1.1);
        for (a, b) in base.ir_drop.iter().zip(&tripled.ir_drop) {
            assert!((3.0 * a - b).abs() <= 1e-8 * (3.0 * max), "seed {seed}: {a} {b}");
        }
    }
}

#[test]
fn floating_island_is_reported() {
    let nl = parse_netlist(b"V1 n1_m1_0_0 0 1\nR1 n1_m1_0_0 n1_m1_1000_0 1\nR2 n1_m1_5000_0 n1_m1_6000_0 1\n").unwrap();
    match solve_static(&nl, &SolveOptions::default()) {
        Err(SolveError::FloatingSubgraph(nodes)) => assert_eq!(nodes.len(), 2),
        other => panic!("{other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn maximum_principle(seed in 0u64..10_000, side in prop::sample::select(vec![6.0, 8.0, 12.0])) {
        let spec = GenSpec { side_um: side, n_current_sources: 5, n_voltage_pads: 2, seed, ..GenSpec::default() };
        let nl = generate(&spec).unwrap();
        let sol = solve_static(&nl, &SolveOptions::default()).unwrap();
        prop_assert!(sol.ir_drop.iter().all(|&d| d >= -1e-12 && d <= spec.vdd));
        prop_assert!(sol.max_ir_drop() > 0.0);
        prop_assert!(verify_kcl(&nl, &sol) < 1e-8);
    }
}
