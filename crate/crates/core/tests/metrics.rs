use lmmir::train::{f1_score, mae};
use proptest::prelude::*;

fn map(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len)
}

fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..200).prop_flat_map(|n| (map(n), map(n)))
}

fn dyadic(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..1024).prop_map(|k| k as f64 / 1024.0), len)
}

#[test]
fn hand_confusions() {
    assert_eq!(f1_score(&[3.0, 1.0], &[3.0, 1.0]), Ok(1.0));
    assert_eq!(f1_score(&[0.5, 1.0], &[1.0, 0.5]), Ok(0.0));
    assert_eq!(f1_score(&[1.0, 0.5, 0.95, 0.1], &[1.0, 0.95, 0.5, 0.1]), Ok(0.5));
    assert_eq!(mae(&[1e-4; 64], &[0.0; 64]), Ok(1e-4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn f1_is_invariant_to_a_common_positive_scale((p, t) in pair(), k in prop::sample::select(vec![0.5, 2.0, 4.0, 1024.0, 0.125])) {
        prop_assume!(t.iter().any(|&v| v > 0.0));
        let ps: Vec<f64> = p.iter().map(|v| v * k).collect();
        let ts: Vec<f64> = t.iter().map(|v| v * k).collect();
        prop_assert_eq!(f1_score(&ps, &ts), f1_score(&p, &t));
    }

    #[test]
    fn f1_is_bounded_and_perfect_on_self((p, t) in pair()) {
        prop_assume!(t.iter().any(|&v| v > 0.0));
        let f = f1_score(&p, &t).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(f1_score(&t, &t), Ok(1.0));
    }

    #[test]
    fn mae_translation_and_symmetry(
        (a, b) in (1usize..100).prop_flat_map(|n| (dyadic(n), dyadic(n))),
        shift in (0i32..64).prop_map(|k| k as f64 / 64.0),
    ) {
        let sa: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + shift).collect();
        prop_assert_eq!(mae(&sa, &sb), mae(&a, &b));
        prop_assert_eq!(mae(&a, &b), mae(&b, &a));
        prop_assert_eq!(mae(&a, &a), Ok(0.0));
    }
}
