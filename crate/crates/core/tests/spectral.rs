use nalgebra::DMatrix;
use sk_tap::ensemble::fit_power_law;
use sk_tap::gibbs::{gibbs_tables, ReducedSpec};
use sk_tap::model::{sample_couplings, substream_seed, CouplingMatrix, ModelParams};
use sk_tap::spectral::{
    build_deformed, resolvent_error, resolvent_error_with, s_prime_at_e0, self_consistent_s, SpectralSample,
};

#[test]
fn fixed_point_holds_at_the_reference_energy() {
    let p = ModelParams::uniform(16, 0.4, 0.3).unwrap();
    let cm = sample_couplings(&p, 3).unwrap();
    let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).unwrap();
    let op = build_deformed(&cm, &p, &tab).unwrap();
    let s = self_consistent_s(&op.lambda_diag, p.t, op.e0, 1e-15).unwrap();
    let rhs = op
        .lambda_diag
        .iter()
        .map(|l| 1.0 / (l - op.e0 - p.t * s))
        .sum::<f64>()
        / 16.0;
    assert!((s - rhs).abs() <= 1e-12, "S = {s}, map(S) = {rhs}");
    assert!(s > 0.0);
}

#[test]
fn s_prime_closed_form_matches_difference() {
    for (n, seed) in [(8, 1), (8, 2), (12, 3), (16, 4)] {
        let p = ModelParams::uniform(n, 0.4, 0.3).unwrap();
        let cm = sample_couplings(&p, seed).unwrap();
        let (fd, closed) = s_prime_at_e0(&cm, &p).unwrap();
        assert!((fd - closed).abs() <= 1e-6, "n = {n}: {fd} vs {closed}");
    }
}

#[test]
fn resolvent_error_against_direct_inverse() {
    let p = ModelParams::uniform(9, 0.4, 0.3).unwrap();
    let cm = sample_couplings(&p, 17).unwrap();
    let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).unwrap();
    let n = 9;
    let q = tab.m.iter().map(|m| m * m).sum::<f64>() / n as f64;
    let e0 = -p.t * (1.0 - q);
    let k = DMatrix::from_fn(n, n, |i, j| {
        let diag = if i == j { 1.0 / (1.0 - tab.m[i] * tab.m[i]) - e0 } else { 0.0 };
        diag - cm.get(i, j) - p.t * 2.0 * tab.m[i] * tab.m[j] / n as f64
    });
    let inv = k.try_inverse().unwrap();
    let m = DMatrix::from_fn(n, n, |i, j| tab.pair(i, j));
    let want = (&m - inv).norm() / m.norm();
    let got = resolvent_error(&cm, &p).unwrap();
    assert!((got - want).abs() <= 1e-12 * want.max(1.0), "{got} vs {want}");
    assert!(got < 1.0);
}

#[test]
fn resolvent_is_exact_without_couplings() {
    for h in [0.0, 0.3, -0.7] {
        let p = ModelParams::uniform(7, 0.0, h).unwrap();
        assert!(resolvent_error(&CouplingMatrix::zeros(7), &p).unwrap() <= 1e-12);
    }
    let p = ModelParams::uniform(7, 0.0, 0.4).unwrap();
    let cm = sample_couplings(&p, 5).unwrap();
    assert!(resolvent_error_with(&cm, &p, false).unwrap() <= 1e-12);
}

#[test]
fn margin_is_mostly_positive_at_high_temperature() {
    let p = ModelParams::uniform(10, 0.25, 0.0).unwrap();
    let positive = (0..40)
        .filter(|&s| {
            let seed = substream_seed(99, s);
            let cm = sample_couplings(&p, seed).unwrap();
            SpectralSample::measure(&cm, &p, seed).unwrap().margin > 0.0
        })
        .count();
    assert!(positive >= 38, "{positive} of 40");
}

#[test]
fn synthetic_inverse_square_fit() {
    let ns = [8.0, 12.0, 16.0, 20.0, 24.0];
    // fixed ±1% perturbations in place of random noise
    let noise = [0.01, -0.01, 0.005, -0.008, 0.01];
    let pts: Vec<(f64, f64)> = ns
        .iter()
        .zip(noise)
        .map(|(&n, e)| (n, 4.0 / (n * n) * (1.0 + e)))
        .collect();
    let fit = fit_power_law(&pts).unwrap();
    assert!((-2.1..=-1.9).contains(&fit.slope), "slope {}", fit.slope);
}
