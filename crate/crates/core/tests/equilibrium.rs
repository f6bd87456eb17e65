use disent_core::equilibrium::{
    conditional_entropy, dependent_scenario, encoder_from_id, expected_cross_entropy, grid_search_responder, induced_joint, independent_scenario,
    optimal_responders, scenario_sweep, train_responder, DiscreteJoint, Target, DEFAULT_SWEEP_BUDGET,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_joint(rng: &mut ChaCha8Rng, z: usize, s: usize, y: usize) -> DiscreteJoint {
    let raw: Vec<f64> = (0..z * s * y).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    let mut prob: Vec<f64> = raw.iter().map(|v| v / total).collect();
    // Put any rounding residue on the first cell so the mass is exactly 1.
    let residue = 1.0 - prob.iter().sum::<f64>();
    prob[0] += residue;
    DiscreteJoint::new(z, s, y, prob).unwrap()
}

#[test]
fn independent_attributes_give_alpha_free_equilibrium() {
    let r = scenario_sweep(&independent_scenario(), 2, &[0.1, 0.5, 0.9], DEFAULT_SWEEP_BUDGET).unwrap();
    assert!(r.argmin_stable);
    // The minimizers are d = y and its relabeling.
    let set = &r.rows[0].argmin;
    assert_eq!(set.len(), 2);
    for &id in set {
        let e = encoder_from_id(id, 4, 2);
        assert!(e == vec![0, 1, 0, 1] || e == vec![1, 0, 1, 0], "{e:?}");
    }
    for row in &r.rows {
        assert!((row.best_objective + row.alpha * 2f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn dependent_attributes_make_the_equilibrium_alpha_dependent() {
    let r = scenario_sweep(&dependent_scenario(), 2, &[0.1, 10.0], DEFAULT_SWEEP_BUDGET).unwrap();
    assert!(!r.argmin_stable);
    assert_ne!(r.rows[0].argmin, r.rows[1].argmin);
}

#[test]
fn gradient_trained_responders_reach_the_conditionals() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let x = rng.random_range(2..=4);
        let ys = rng.random_range(2..=3);
        let q = random_joint(&mut rng, x, 2, ys);
        let encoder: Vec<usize> = (0..x).map(|i| i % 2).collect();
        let qt = induced_joint(&q, &encoder, 2).unwrap();
        let (ey, es) = optimal_responders(&qt).unwrap();
        for (t, exact) in [(Target::Y, ey), (Target::S, es)] {
            let fitted = train_responder(&qt, t, 1500, 0.05).unwrap();
            assert!(fitted.max_total_variation(&exact) <= 0.05);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn entropies_are_bounded_and_mass_is_preserved(seed in any::<u64>(), x in 1usize..=4, y in 1usize..=3, d in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_joint(&mut rng, x, 2, y);
        let encoder: Vec<usize> = (0..x).map(|_| rng.random_range(0..d)).collect();
        let qt = induced_joint(&q, &encoder, d).unwrap();
        // Equal up to summation order.
        prop_assert!((qt.total_mass() - q.total_mass()).abs() <= 4.0 * f64::EPSILON);
        let hy = conditional_entropy(&qt, Target::Y);
        let hs = conditional_entropy(&qt, Target::S);
        prop_assert!(hy >= -1e-15 && hy <= (y as f64).ln() + 1e-12);
        prop_assert!(hs >= -1e-15 && hs <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn merging_codes_never_lowers_conditional_entropy(seed in any::<u64>(), x in 2usize..=4, y in 2usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_joint(&mut rng, x, 2, y);
        let merged: Vec<usize> = (0..x).map(|i| if i == x - 1 { 0 } else { i }).collect();
        let fine = conditional_entropy(&q, Target::Y);
        let coarse = conditional_entropy(&induced_joint(&q, &merged, x).unwrap(), Target::Y);
        prop_assert!(coarse >= fine - 1e-12);
    }

    #[test]
    fn exact_responders_match_grid_search(seed in any::<u64>(), x in 1usize..=4, y in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let q = random_joint(&mut rng, x, 2, y);
        let (ey, es) = optimal_responders(&q).unwrap();
        for (t, exact) in [(Target::Y, ey), (Target::S, es)] {
            let grid = grid_search_responder(&q, t, 12);
            let gap = expected_cross_entropy(&q, &grid, t) - expected_cross_entropy(&q, &exact, t);
            prop_assert!(gap >= -1e-12 && gap <= 1e-6, "gap {}", gap);
        }
    }
}
