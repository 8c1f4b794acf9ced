#![allow(clippy::needless_range_loop)]

mod common;

use common::{random_spec, Naive, Picker};
use sk_tap::gibbs::{
    coupling_derivative_residual, delta_op, eps_op, gibbs_tables, gibbs_tables_with,
    key_identity_residual, key_identity_triple_residual, log_partition, susceptibility_fd,
    triple_correlation, Observable, ReducedSpec, Request, DEFAULT_FD_STEP,
};
use sk_tap::model::{sample_couplings, CouplingMatrix, ModelParams};
use sk_tap::tap::{htap1_residuals, htap2_report, tap1_residuals, tap2_report, tap2_residual};

fn assert_tables_match(cm: &CouplingMatrix, p: &ModelParams, spec: &ReducedSpec, tol: f64) {
    let fast = gibbs_tables(cm, p, spec).unwrap();
    let slow = Naive::new(cm, p, spec);
    assert!((fast.log_z - slow.log_z).abs() <= tol * slow.log_z.abs().max(1.0));
    for i in 0..p.n {
        if spec.is_removed(i) {
            assert!(fast.magnetization(i).is_none());
            continue;
        }
        assert!((fast.m[i] - slow.m[i]).abs() <= tol, "m_{i}");
        if !spec.is_active(i) {
            continue;
        }
        for j in 0..p.n {
            if spec.is_active(j) {
                assert!((fast.pair(i, j) - slow.pair(i, j)).abs() <= tol, "m_{i}{j}");
            }
        }
    }
}

#[test]
fn matches_naive_oracle_on_reference_instance() {
    let p = ModelParams::uniform(8, 0.5, 0.3).unwrap();
    let cm = sample_couplings(&p, 1).unwrap();
    assert_tables_match(&cm, &p, &ReducedSpec::full(), 1e-12);
}

#[test]
fn matches_naive_oracle_on_random_reduced_measures() {
    let mut pick = Picker::new(0xA11CE);
    for _ in 0..50 {
        let n = pick.range(2, 10);
        let t = 0.1 + 0.9 * pick.unit();
        let field: Vec<f64> = (0..n).map(|_| pick.unit() - 0.3).collect();
        let p = ModelParams::with_field(n, t, field).unwrap();
        let cm = sample_couplings(&p, pick.next_u64()).unwrap();
        let spec = random_spec(&mut pick, n, &[], 2, 2);
        assert_tables_match(&cm, &p, &spec, 1e-12);
    }
}

#[test]
fn clamped_partition_closed_form() {
    let mut cm = CouplingMatrix::zeros(2);
    cm.set(0, 1, 0.4);
    let p = ModelParams::uniform(2, 0.5, 0.2).unwrap();
    let lz = log_partition(&cm, &p, &ReducedSpec::clamping(ReducedSpec::full(), 0, 1)).unwrap();
    assert!((lz - (2.0 * 0.6f64.cosh()).ln()).abs() < 1e-14);
}

#[test]
fn uncoupled_magnetization_closed_form() {
    for n in [1, 5, 11] {
        let p = ModelParams::uniform(n, 0.0, 0.3).unwrap();
        let tab = gibbs_tables(&CouplingMatrix::zeros(n), &p, &ReducedSpec::full()).unwrap();
        for i in 0..n {
            assert!((tab.m[i] - 0.29131261).abs() < 1e-8);
            assert!((tab.m[i] - 0.3f64.tanh()).abs() < 1e-12);
            for j in 0..n {
                if i != j {
                    assert!(tab.pair(i, j).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn centered_triples_match_raw_moment_expansion() {
    let p = ModelParams::uniform(6, 0.5, 0.3).unwrap();
    let cm = sample_couplings(&p, 2).unwrap();
    let naive = Naive::new(&cm, &p, &ReducedSpec::full());
    for (i, j, k) in [(0, 1, 2), (1, 3, 5), (0, 4, 5), (2, 3, 4)] {
        let fast = triple_correlation(&cm, &p, &ReducedSpec::full(), i, j, k).unwrap();
        assert!((fast - naive.triple(i, j, k)).abs() < 1e-12);
    }
    assert!(triple_correlation(&cm, &p, &ReducedSpec::full(), 0, 0, 1).is_err());
    let spec = ReducedSpec::cavity(3);
    assert!(triple_correlation(&cm, &p, &spec, 0, 1, 3).is_err());
}

#[test]
fn repeated_index_triples_follow_the_variance_derivative() {
    // m_jkk = ∂_{h_k} m_jk = -2 m_k m_jk and m_jjj = -2 m_j (1 - m_j²)
    let p = ModelParams::uniform(6, 0.6, 0.25).unwrap();
    let cm = sample_couplings(&p, 8).unwrap();
    let tab = gibbs_tables_with(
        &cm,
        &p,
        &ReducedSpec::full(),
        &Request::all_pairs().with_triples(vec![[1, 4, 4], [2, 2, 2]]),
    )
    .unwrap();
    let want = -2.0 * tab.m[4] * tab.pair(1, 4);
    assert!((tab.triple(1, 4, 4).unwrap() - want).abs() < 1e-13);
    let want = -2.0 * tab.m[2] * (1.0 - tab.m[2] * tab.m[2]);
    assert!((tab.triple(2, 2, 2).unwrap() - want).abs() < 1e-13);
}

#[test]
fn triples_vanish_by_symmetry() {
    let p = ModelParams::uniform(7, 0.7, 0.0).unwrap();
    let cm = sample_couplings(&p, 4).unwrap();
    assert!(triple_correlation(&cm, &p, &ReducedSpec::full(), 0, 3, 6).unwrap().abs() < 1e-14);
    let p = ModelParams::uniform(7, 0.0, 0.4).unwrap();
    let cm = sample_couplings(&p, 4).unwrap();
    assert!(triple_correlation(&cm, &p, &ReducedSpec::full(), 0, 3, 6).unwrap().abs() < 1e-14);
}

#[test]
fn delta_and_eps_closed_forms() {
    let mut cm = CouplingMatrix::zeros(2);
    cm.set(0, 1, 0.4);
    let p = ModelParams::uniform(2, 0.5, 0.0).unwrap();
    let d = delta_op(&cm, &p, &ReducedSpec::full(), 0, &Observable::Magnetization(1)).unwrap();
    assert!((d - 0.37994896).abs() < 1e-8);
    assert!((d - 0.4f64.tanh()).abs() < 1e-15);
    let e = eps_op(&cm, &p, &ReducedSpec::full(), 0, &Observable::Magnetization(1)).unwrap();
    assert!(e.abs() < 1e-15);
    let p = ModelParams::uniform(6, 0.5, 0.0).unwrap();
    let cm = sample_couplings(&p, 3).unwrap();
    let odd = Observable::product(Observable::Magnetization(2), Observable::Pair(3, 4));
    assert!(eps_op(&cm, &p, &ReducedSpec::full(), 0, &odd).unwrap().abs() < 1e-14);
}

#[test]
fn key_identities_hold_exactly() {
    let p = ModelParams::uniform(8, 0.6, 0.3).unwrap();
    let mut pick = Picker::new(77);
    for _ in 0..50 {
        let cm = sample_couplings(&p, pick.next_u64()).unwrap();
        let ijk = pick.distinct(8, 3);
        let spec = random_spec(&mut pick, 8, &ijk, 3, 0);
        let r2 = key_identity_residual(&cm, &p, &spec, ijk[0], ijk[1]).unwrap();
        let r3 = key_identity_triple_residual(&cm, &p, &spec, ijk[0], ijk[1], ijk[2]).unwrap();
        assert!(r2.abs() < 1e-12, "pair residual {r2}");
        assert!(r3.abs() < 1e-12, "triple residual {r3}");
    }
}

#[test]
fn susceptibility_equals_covariance() {
    let p = ModelParams::uniform(8, 0.5, 0.3).unwrap();
    let cm = sample_couplings(&p, 5).unwrap();
    let tab = gibbs_tables(&cm, &p, &ReducedSpec::full()).unwrap();
    for i in 0..8 {
        for j in 0..8 {
            let fd = susceptibility_fd(&cm, &p, i, j, DEFAULT_FD_STEP).unwrap();
            assert!((fd - tab.pair(i, j)).abs() <= 1e-8, "({i}, {j})");
        }
    }
}

#[test]
fn coupling_derivative_identity() {
    let mut cm = CouplingMatrix::zeros(2);
    cm.set(0, 1, 0.4);
    let p = ModelParams::uniform(2, 0.5, 0.0).unwrap();
    assert!(coupling_derivative_residual(&cm, &p, 0, 1, 1).unwrap().abs() < 1e-8);

    let p = ModelParams::uniform(8, 0.5, 0.3).unwrap();
    let mut pick = Picker::new(31);
    for _ in 0..30 {
        let cm = sample_couplings(&p, pick.next_u64()).unwrap();
        let il = pick.distinct(8, 2);
        let k = pick.range(0, 7);
        let r = coupling_derivative_residual(&cm, &p, il[0], il[1], k).unwrap();
        assert!(r.abs() <= 1e-7, "residual {r}");
    }
}

#[test]
fn tap_residuals_match_hand_expansion() {
    let p = ModelParams::with_field(3, 0.6, vec![0.2, -0.1, 0.35]).unwrap();
    let cm = sample_couplings(&p, 12).unwrap();
    let g = |i: usize, j: usize| cm.get(i, j);
    let h = &p.field;
    let full = Naive::new(&cm, &p, &ReducedSpec::full());
    let cav: Vec<Naive> = (0..3).map(|i| Naive::new(&cm, &p, &ReducedSpec::cavity(i))).collect();

    let htap1 = htap1_residuals(&cm, &p).unwrap();
    for i in 0..3 {
        let (a, b) = ((i + 1) % 3, (i + 2) % 3);
        let want = full.m[i] - (h[i] + g(i, a) * cav[i].m[a] + g(i, b) * cav[i].m[b]).tanh();
        assert!((htap1.entries[i].residual - want).abs() < 1e-14);
    }
    let per_site: f64 = htap1.entries.iter().map(|e| e.residual.powi(2)).sum::<f64>() / 3.0;
    assert!((htap1.mean_square - per_site).abs() < 1e-14);

    let q = full.m.iter().map(|m| m * m).sum::<f64>() / 3.0;
    let tap1 = tap1_residuals(&cm, &p).unwrap();
    for i in 0..3 {
        let (a, b) = ((i + 1) % 3, (i + 2) % 3);
        let local = h[i] + g(i, a) * full.m[a] + g(i, b) * full.m[b] - 0.6 * (1.0 - q) * full.m[i];
        assert!((tap1.entries[i].residual - (full.m[i] - local.tanh())).abs() < 1e-14);
    }

    // pair (0, 1): the cavity of 0 leaves sites 1 and 2
    let hfield = h[0] + g(0, 1) * cav[0].m[1] + g(0, 2) * cav[0].m[2];
    let want = full.pair(0, 1)
        - (1.0 - hfield.tanh().powi(2)) * (g(0, 1) * cav[0].pair(1, 1) + g(0, 2) * cav[0].pair(2, 1));
    let htap2 = htap2_report(&cm, &p).unwrap();
    let got = htap2.entries.iter().find(|e| e.i == 0 && e.j == Some(1)).unwrap();
    assert!((got.residual - want).abs() < 1e-14);

    let mm1: f64 = (0..3).map(|k| full.pair(1, k) * full.m[k]).sum();
    let bracket = g(0, 1) * full.pair(1, 1) + g(0, 2) * full.pair(2, 1) + 2.0 * 0.6 / 3.0 * mm1 * full.m[0]
        - 0.6 * (1.0 - q) * full.pair(0, 1);
    let want = full.pair(0, 1) - (1.0 - full.m[0] * full.m[0]) * bracket;
    let tap2 = tap2_report(&cm, &p).unwrap();
    let got = tap2.entries.iter().find(|e| e.i == 0 && e.j == Some(1)).unwrap();
    assert!((got.residual - want).abs() < 1e-14);
    assert!((tap2_residual(&cm, &p, 0, 1).unwrap() - want).abs() < 1e-14);
}

#[test]
fn removed_site_equals_smaller_system() {
    let p = ModelParams::with_field(6, 0.5, vec![0.1, 0.2, -0.3, 0.4, 0.0, 0.25]).unwrap();
    let cm = sample_couplings(&p, 21).unwrap();
    let masked = gibbs_tables(&cm, &p, &ReducedSpec::cavity(2)).unwrap();
    let keep = [0, 1, 3, 4, 5];
    let mut small = CouplingMatrix::zeros(5);
    for (a, &i) in keep.iter().enumerate() {
        for (b, &j) in keep.iter().enumerate() {
            if a < b {
                small.set(a, b, cm.get(i, j));
            }
        }
    }
    let ps = ModelParams::with_field(5, 0.5, keep.iter().map(|&i| p.field[i]).collect()).unwrap();
    let direct = gibbs_tables(&small, &ps, &ReducedSpec::full()).unwrap();
    assert!((masked.log_z - direct.log_z).abs() < 1e-13);
    for (a, &i) in keep.iter().enumerate() {
        assert!((masked.m[i] - direct.m[a]).abs() < 1e-13);
        for (b, &j) in keep.iter().enumerate() {
            assert!((masked.pair(i, j) - direct.pair(a, b)).abs() < 1e-13);
        }
    }
}
