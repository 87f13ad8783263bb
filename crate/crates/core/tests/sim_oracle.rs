//! Independent oracles for the similarity primitives: the fast
//! `pairwise_mean_cos` route is checked against an explicit O(N^2) double
//! loop, and the similarity axioms are property-tested.

use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trojvis_core::encoder::sim::{cosine_sim, pairwise_mean_cos};

/// Reference implementation: average cosine over the explicit list of
/// unordered pairs. Deliberately naive.
fn brute_force_pairwise(m: &Array2<f64>) -> f64 {
    let n = m.nrows();
    assert!(n >= 2);
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += cosine_sim(m.row(i), m.row(j));
            count += 1;
        }
    }
    sum / count as f64
}

fn random_matrix(rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = rng.random_range(2..=16);
    let d = rng.random_range(1..=32);
    let mut m = Array2::zeros((n, d));
    for v in m.iter_mut() {
        *v = rng.random_range(-1.0..1.0);
    }
    // Occasionally zero out a row to exercise the norm floor.
    if rng.random_range(0..10) == 0 {
        let row = rng.random_range(0..n);
        m.row_mut(row).fill(0.0);
    }
    m
}

#[test]
fn pairwise_matches_brute_force_on_100_random_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_001);
    for case in 0..100 {
        let m = random_matrix(&mut rng);
        let fast = pairwise_mean_cos(&m).unwrap();
        let slow = brute_force_pairwise(&m);
        assert!(
            (fast - slow).abs() <= 1e-6,
            "case {case}: fast {fast} vs brute-force {slow} on shape {:?}",
            m.shape()
        );
    }
}

#[test]
fn pairwise_of_orthogonal_and_antipodal_rows_is_minus_one_third() {
    // Pairs: (e1,e2)=0, (e1,-e1)=-1, (e2,-e1)=0 -> mean -1/3.
    let m = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
    let v = pairwise_mean_cos(&m).unwrap();
    assert!((v - (-1.0 / 3.0)).abs() < 1e-12, "got {v}");
    assert!((brute_force_pairwise(&m) - v).abs() < 1e-12);
}

#[test]
fn pairwise_of_three_identical_unit_rows_is_one() {
    let m = array![[0.6, 0.8], [0.6, 0.8], [0.6, 0.8]];
    assert!((pairwise_mean_cos(&m).unwrap() - 1.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn cosine_is_symmetric_and_bounded(
        a in prop::collection::vec(-10.0f64..10.0, 1..24),
        b_seed in any::<u64>(),
    ) {
        let d = a.len();
        let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let av = ndarray::ArrayView1::from(&a);
        let bv = ndarray::ArrayView1::from(&b);
        let ab = cosine_sim(av, bv);
        let ba = cosine_sim(bv, av);
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&ab));
    }

    #[test]
    fn cosine_is_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 2..16),
        alpha in 1e-3f64..1e3,
        b_seed in any::<u64>(),
    ) {
        let d = a.len();
        let mut rng = ChaCha8Rng::seed_from_u64(b_seed);
        let b: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let scaled: Vec<f64> = a.iter().map(|v| v * alpha).collect();
        let base = cosine_sim(
            ndarray::ArrayView1::from(&a),
            ndarray::ArrayView1::from(&b),
        );
        let after = cosine_sim(
            ndarray::ArrayView1::from(&scaled),
            ndarray::ArrayView1::from(&b),
        );
        prop_assert!((base - after).abs() < 1e-6, "base {base} vs scaled {after}");
    }

    #[test]
    fn pairwise_fast_route_equals_brute_force(
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng);
        let fast = pairwise_mean_cos(&m).unwrap();
        let slow = brute_force_pairwise(&m);
        prop_assert!((fast - slow).abs() <= 1e-6, "fast {fast} vs slow {slow}");
    }

    #[test]
    fn pairwise_stays_in_cosine_range(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_matrix(&mut rng);
        let v = pairwise_mean_cos(&m).unwrap();
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
    }
}
