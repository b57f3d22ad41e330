mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use storenet::planner::{bound_parts, markov_bound};
use storenet::stochastic::{return_time_moments, MarkovChain};
use storenet::storage::StorageSpec;

#[test]
fn moments_match_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(123);
    for case in 0..10 {
        let n = rng.gen_range(1..=6);
        let chain = common::random_chain(&mut rng, n);
        let (m, s) = return_time_moments(&chain, chain.initial_state).unwrap();
        let (mc_m, mc_s) = common::monte_carlo_return_moments(&mut rng, &chain, 1_000_000);
        assert!((mc_m / m - 1.0).abs() <= 0.01, "case {case}: mean {m} vs {mc_m}");
        assert!((mc_s / s - 1.0).abs() <= 0.01, "case {case}: second {s} vs {mc_s}");
        let pi = chain.stationary_distribution();
        assert!((m - 1.0 / pi[chain.initial_state]).abs() <= 1e-10 * m);
        assert!(s >= m * m * (1.0 - 1e-12));
    }
}

#[test]
fn two_state_closed_forms() {
    let sym = MarkovChain::new(vec![vec![0.5, 0.5], vec![0.5, 0.5]], 0).unwrap();
    let (m, s) = return_time_moments(&sym, 0).unwrap();
    assert!((m - 2.0).abs() <= 1e-10 && (s - 6.0).abs() <= 1e-10);
    let skew = MarkovChain::new(vec![vec![0.5, 0.5], vec![1.0, 0.0]], 0).unwrap();
    let (m, s) = return_time_moments(&skew, 0).unwrap();
    assert!((m - 1.5).abs() <= 1e-10 && (s - 2.5).abs() <= 1e-10);
}

#[test]
fn single_state_identity() {
    let st = StorageSpec::new(0.0, 2.0, -0.3, 0.2, 0.9, 0.95, 0.8).validate().unwrap();
    let single = MarkovChain::new(vec![vec![1.0]], 0).unwrap();
    let (m, s) = return_time_moments(&single, 0).unwrap();
    let (gamma, w) = (-1.2, 0.7);
    let parts = bound_parts(&st, gamma);
    assert_eq!(markov_bound(&st, gamma, w, m, s).unwrap(), (parts.m_s + 3.0 * parts.m_u) / w);
}
