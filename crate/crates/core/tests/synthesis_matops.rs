use nalgebra::{Complex, DMatrix, DVector};
use proptest::prelude::*;

use switching_consensus::graphs::{Digraph, SpectralConstants, TopologyEnsemble};
use switching_consensus::matops::{
    companion, eigenvalues, poly_from_roots, spd_inverse, sylvester_solve, young_bound_holds,
};
use switching_consensus::synthesis::{
    reduced_certificates, synthesize_full_order, synthesize_reduced_order, verify_full_order,
    FBarSpec, FullOrderOptions, GSpec, Plant, ReducedOrderOptions, SynthesisError,
};

fn m(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, c, v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Diagonal A and F give T_ij = rhs_ij / (a_j - f_i) in closed form.
    #[test]
    fn sylvester_diagonal_closed_form(
        a in prop::collection::vec(-5.0f64..-0.5, 4),
        f in prop::collection::vec(0.5f64..5.0, 2),
        rhs in prop::collection::vec(-3.0f64..3.0, 8),
    ) {
        let am = DMatrix::from_diagonal(&DVector::from_vec(a.clone()));
        let fm = DMatrix::from_diagonal(&DVector::from_vec(f.clone()));
        let r = m(2, 4, &rhs);
        let t = sylvester_solve(&am, &fm, &r).unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let expect = r[(i, j)] / (a[j] - f[i]);
                prop_assert!((t[(i, j)] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
            }
        }
    }

    #[test]
    fn sylvester_residual_vanishes(
        a in prop::collection::vec(-2.0f64..2.0, 9),
        rhs in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let am = m(3, 3, &a) - DMatrix::identity(3, 3) * 10.0;
        let fm = m(2, 2, &[0.0, 1.0, -2.0, -3.0]);
        let r = m(2, 3, &rhs);
        let t = sylvester_solve(&am, &fm, &r).unwrap();
        prop_assert!((&t * &am - &fm * &t - &r).norm() <= 1e-10 * (1.0 + r.norm()));
    }

    #[test]
    fn companion_has_requested_spectrum(
        re in prop::collection::vec(-4.0f64..-0.1, 2),
        im in 0.1f64..2.0,
        real in -3.0f64..-0.2,
    ) {
        let roots = [
            Complex::new(re[0], im), Complex::new(re[0], -im),
            Complex::new(re[1], 0.0), Complex::new(real, 0.0),
        ];
        let c = poly_from_roots(&roots).unwrap();
        let mut got = eigenvalues(&companion(&c));
        for r in roots {
            let (k, d) = got.iter().enumerate()
                .map(|(k, g)| (k, (g - r).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
            prop_assert!(d < 1e-6, "root {r} missing, nearest at {d}");
            got.remove(k);
        }
    }

    #[test]
    fn young_bound_on_scaled_identity(
        p in prop::collection::vec(-10.0f64..10.0, 3),
        q in prop::collection::vec(-10.0f64..10.0, 3),
        s in 1e-3f64..1e3,
    ) {
        let (p, q) = (DVector::from_vec(p), DVector::from_vec(q));
        // With Phi = sI the gap equals |sqrt(s) p - q / sqrt(s)|^2 >= 0.
        let gap = (&p * s.sqrt() - &q / s.sqrt()).norm_squared();
        let direct = s * p.norm_squared() + q.norm_squared() / s - 2.0 * p.dot(&q);
        prop_assert!((gap - direct).abs() <= 1e-9 * (1.0 + gap));
        prop_assert!(young_bound_holds(&p, &q, &(DMatrix::identity(3, 3) * s)).unwrap());
    }
}

#[test]
fn companion_from_benchmark_coefficients() {
    let c = [8.2944, 40.0896, 77.2416, 75.36, 38.92, 10.0];
    let f = companion(&c);
    // Characteristic polynomial via Faddeev-LeVerrier.
    let n = 6;
    let mut mk = DMatrix::<f64>::zeros(n, n);
    let mut coeffs = vec![0.0; n];
    for k in 1..=n {
        let prev = if k == 1 { 1.0 } else { coeffs[n - k + 1] };
        mk = &f * &mk + DMatrix::identity(n, n) * prev;
        let ck = -(&f * &mk).trace() / k as f64;
        coeffs[n - k] = ck;
    }
    for (a, b) in coeffs.iter().zip(c) {
        assert!((a - b).abs() < 1e-9 * b.abs().max(1.0), "{coeffs:?}");
    }
}

fn ring(n: usize) -> TopologyEnsemble {
    let cw: Vec<_> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let ccw: Vec<_> = (0..n).map(|i| ((i + 1) % n, i)).collect();
    TopologyEnsemble::new(vec![
        Digraph::from_edges(n, &cw).unwrap(),
        Digraph::from_edges(n, &ccw).unwrap(),
    ])
    .unwrap()
}

fn stable_plant() -> Plant {
    Plant::new(
        m(3, 3, &[-1.0, 1.0, 0.0, 0.0, -2.0, 1.0, 0.0, 0.0, -0.5]),
        m(3, 1, &[0.0, 0.0, 1.0]),
        m(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
        DMatrix::identity(3, 3),
        m(3, 1, &[0.0, 1.0, 1.0]),
        DMatrix::identity(3, 3),
    )
    .unwrap()
}

fn constants() -> (SpectralConstants, f64) {
    (ring(4).spectral_constants().unwrap(), 0.5)
}

#[test]
fn full_order_gains_reconstruct_from_certificates() {
    let (sc, pi_bar) = constants();
    let p = stable_plant();
    let (proto, _) = synthesize_full_order(&p, &sc, pi_bar, &FullOrderOptions::new(5.0)).unwrap();
    let rep = verify_full_order(&proto, &p, &sc, pi_bar).unwrap();
    assert!(rep.passed, "{rep}");
    let p1i = spd_inverse(&proto.p1).unwrap();
    let p2i = spd_inverse(&proto.p2).unwrap();
    assert!((&proto.k_gain - p.b.transpose() * p1i).norm() <= 1e-8 * proto.k_gain.norm());
    assert!((&proto.l_gain - p2i * &proto.y).norm() <= 1e-8 * proto.l_gain.norm().max(1e-12));
    let (lo, hi) = proto.tau_interval();
    assert!(lo < proto.tau && proto.tau < hi);
}

#[test]
fn larger_gamma_stays_feasible() {
    let (sc, pi_bar) = constants();
    let p = stable_plant();
    for gamma in [5.0, 10.0, 40.0] {
        let (proto, _) =
            synthesize_full_order(&p, &sc, pi_bar, &FullOrderOptions::new(gamma)).unwrap();
        assert!(verify_full_order(&proto, &p, &sc, pi_bar).unwrap().passed, "gamma {gamma}");
    }
}

#[test]
fn vanishing_gamma_is_infeasible() {
    let (sc, pi_bar) = constants();
    let p = stable_plant();
    assert!(matches!(
        synthesize_full_order(&p, &sc, pi_bar, &FullOrderOptions::new(1e-9)),
        Err(SynthesisError::Infeasible(_))
    ));
    assert!(matches!(
        synthesize_full_order(&p, &sc, pi_bar, &FullOrderOptions::new(-1.0)),
        Err(SynthesisError::InvalidParameter(_))
    ));
}

#[test]
fn reduced_order_identities_hold() {
    let (sc, pi_bar) = constants();
    let p = stable_plant();
    let opts = ReducedOrderOptions::new(
        5.0,
        FBarSpec::Eigenvalues(vec![Complex::new(-3.0, 0.0)]),
        GSpec::Random { seed: 5 },
    );
    let (proto, _) = synthesize_reduced_order(&p, &sc, pi_bar, &opts).unwrap();
    let rep = reduced_certificates(&proto, &p, &sc, pi_bar).unwrap();
    assert!(rep.passed, "{rep}");
    let t = &proto.t_map;
    let syl = t * &p.a - &proto.f_bar * t - &proto.g_gain * &p.c1;
    assert!(syl.norm() <= 1e-8 * (t.norm() * p.a.norm()));
    let id = &proto.q1_map * &p.c1 + &proto.q2_map * t;
    assert!((id - DMatrix::identity(3, 3)).norm() <= 1e-8);
    assert!((proto.f_bar[(0, 0)] + 3.0).abs() < 1e-12);
}
