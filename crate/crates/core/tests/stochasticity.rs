mod support;

use support::*;

#[test]
fn keep_rate_within_three_sigma() {
    for (i, p) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let (rate, sigma) = keep_rate(p, 10_000, 11 + i as u64);
        assert!((rate - p).abs() <= 3.0 * sigma, "p {p}: rate {rate}");
    }
}

#[test]
fn adapter_residual_mean_is_p_times_output() {
    for p in [0.1, 0.5, 0.9] {
        let z = adapter_residual_z(p, 10_000, 3);
        assert!(z <= 3.0, "p {p}: deviation {z} sigma");
    }
}

#[test]
fn gate_draws_are_reproducible() {
    let a = puma::peft::draw_gates(&mut rng(5), 0.5, 12);
    let b = puma::peft::draw_gates(&mut rng(5), 0.5, 12);
    assert_eq!(a, b);
}
