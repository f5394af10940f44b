use super::*;
use crate::geometry::planar;
use crate::optics::{Phantom, PhaseFunction, SupportMode};
use crate::quadrature::{integrate, Tolerance};
use approx::assert_relative_eq;
use std::f64::consts::PI;

fn diameter_acq(dt: f64, horizon: f64) -> Acquisition {
    // Nodes 0 and 2 of a 4-point grid are antipodal.
    Acquisition::full(Dim::Two, 4, TimeGrid::new(dt, horizon).unwrap())
        .unwrap()
        .with_sources(vec![0])
        .unwrap()
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(f)
}

#[test]
fn pulse_has_unit_mass_and_bins_partition_it() {
    for p in [SourcePulse::triangle(0.1, 3.0).unwrap(), SourcePulse::boxcar(0.05, 3.0).unwrap()] {
        let mass = integrate(|t| p.eval(t), 0.0, p.eta, Tolerance::default()).value;
        assert_relative_eq!(mass, 1.0, epsilon = 1e-12);
        let energy = integrate(|t| p.eval(t).powi(2), 0.0, p.eta, Tolerance::default()).value;
        assert_relative_eq!(energy, p.energy(), max_relative = 1e-10);
        let time = TimeGrid::new(0.01, 3.0).unwrap();
        for tau in [0.0, 1.234567, 2.0, 2.5] {
            let s: f64 = p.bin_range(&time, tau).map(|b| p.bin_weight(&time, b, tau) * time.dt).sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-12);
        }
    }
    assert!(SourcePulse::triangle(0.1, 2.0).is_err());
    assert!(SourcePulse::triangle(0.0, 3.0).is_err());
}

#[test]
fn order0_diameter_is_half_the_triangle() {
    let f = OpticalField::vacuum(Dim::Two);
    let pulse = SourcePulse::triangle(0.1, 2.5).unwrap();
    let acq = diameter_acq(0.01, 2.5);
    let m = albedo_truncated(&f, &pulse, 0, &acq, &SynthesisSettings::default()).unwrap();
    let tr = m.trace(Channel::Total, 0, 2).unwrap();
    // Bin averages of 0.5 * tri(t - 2) by the midpoint rule on a fine grid.
    let tri = |t: f64| if (0.0..=0.1).contains(&t) { 20.0 * (1.0 - (t - 0.05).abs() / 0.05) } else { 0.0 };
    for (b, v) in tr.iter().enumerate() {
        let lo = b as f64 * 0.01;
        let n = 2000;
        let avg: f64 = (0..n).map(|i| 0.5 * tri(lo + (i as f64 + 0.5) * 0.01 / n as f64 - 2.0)).sum::<f64>() / n as f64;
        assert!((v - avg).abs() < 1e-6, "bin {b}: {v} vs {avg}");
    }
    let area: f64 = tr.iter().sum::<f64>() * 0.01;
    assert_relative_eq!(area, 0.5, epsilon = 1e-12);
    assert_eq!(m.ballistic_for(0, 2).unwrap().amplitude, 0.5);
}

#[test]
fn without_scattering_only_the_ballistic_channel_is_nonzero() {
    let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::constant(0.4));
    let pulse = SourcePulse::triangle(0.05, 2.3).unwrap();
    let acq = Acquisition::full(Dim::Two, 8, TimeGrid::new(0.01, 2.3).unwrap()).unwrap();
    let m = albedo_truncated(&f, &pulse, 2, &acq, &SynthesisSettings::default()).unwrap();
    for ch in [Channel::Order1, Channel::Order2] {
        assert!(m.channel(ch).unwrap().values.iter().all(|v| *v == 0.0));
    }
    assert_eq!(m.channel(Channel::Total).unwrap().values, m.channel(Channel::Order0).unwrap().values);
    assert_eq!(m.ballistic.len(), 8 * 7);
}

#[test]
fn truncations_are_monotone_and_causal() {
    let f = OpticalField::vacuum(Dim::Two)
        .with_sigma(Phantom::bump(Vec3::new(0.1, 0.0, 0.0), 0.6, 0.5))
        .with_k0(Phantom::constant(0.3));
    let pulse = SourcePulse::triangle(0.05, 2.2).unwrap();
    let acq = Acquisition::full(Dim::Two, 6, TimeGrid::new(0.02, 2.2).unwrap()).unwrap().with_sources(vec![0, 1]).unwrap();
    let s = SynthesisSettings::default();
    let m0 = albedo_truncated(&f, &pulse, 0, &acq, &s).unwrap();
    let m1 = albedo_truncated(&f, &pulse, 1, &acq, &s).unwrap();
    let a = &m0.channel(Channel::Total).unwrap().values;
    let b = &m1.channel(Channel::Total).unwrap().values;
    assert!(a.iter().zip(b).all(|(x, y)| y >= x));
    assert!(b.iter().zip(a).any(|(y, x)| y > x));
    for (si, &sn) in acq.sources.iter().enumerate() {
        for (di, &dn) in acq.detectors.iter().enumerate() {
            let t0 = (acq.nodes[sn].position - acq.nodes[dn].position).norm();
            let tr = m1.trace(Channel::Total, si, di).unwrap();
            for (bin, v) in tr.iter().enumerate() {
                if acq.time.bin_start(bin) + acq.time.dt <= t0 {
                    assert_eq!(*v, 0.0);
                }
                assert!(*v >= 0.0);
            }
        }
    }
    assert!(albedo_truncated(&f, &pulse, 3, &acq, &s).is_err());
}

#[test]
fn ballistic_outflow_equals_emission() {
    // sigma = k0 = 0, S = W = 1: the detected ballistic mass over the circle
    // equals the emitted |nu . v| mass, 2.
    let f = OpticalField::vacuum(Dim::Two);
    let src = BoundaryPoint::at_angle(0.0);
    let amp = |a: f64| {
        if a <= 0.0 || a >= 2.0 * PI {
            return 0.0;
        }
        crate::kernels::gamma0(&f, &src, &BoundaryPoint::at_angle(a)).unwrap().amplitude
    };
    let total = integrate(amp, 0.0, 2.0 * PI, Tolerance::new(1e-14, 1e-12)).value;
    assert!((total - 2.0).abs() < 1e-9);
}

#[test]
fn mc_is_thread_count_invariant() {
    let f = OpticalField::vacuum(Dim::Two)
        .with_sigma(Phantom::constant(0.3))
        .with_k0(Phantom::constant(0.5))
        .with_phase(PhaseFunction::HenyeyGreenstein { asymmetry: 0.3 });
    let pulse = SourcePulse::triangle(0.05, 3.0).unwrap();
    let acq = Acquisition::full(Dim::Two, 8, TimeGrid::new(0.05, 3.0).unwrap()).unwrap().with_sources(vec![0, 3]).unwrap();
    let mc = McConfig { particles: 20_000, seed: 7, ..McConfig::default() };
    let a = in_pool(1, || simulate_albedo_mc(&f, &pulse, &mc, &acq).unwrap());
    let b = in_pool(4, || simulate_albedo_mc(&f, &pulse, &mc, &acq).unwrap());
    assert_eq!(a, b);
    let c = simulate_albedo_mc(&f, &pulse, &McConfig { seed: 8, ..mc }, &acq).unwrap();
    assert_ne!(a, c);
}

#[test]
fn mc_without_scattering_reproduces_the_ballistic_channel() {
    let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::bump(Vec3::zeros(), 0.8, 1.0));
    let pulse = SourcePulse::triangle(0.05, 2.5).unwrap();
    let acq = Acquisition::full(Dim::Two, 12, TimeGrid::new(0.01, 2.5).unwrap()).unwrap();
    let mc = simulate_albedo_mc(&f, &pulse, &McConfig { particles: 10, ..McConfig::default() }, &acq).unwrap();
    let k = albedo_truncated(&f, &pulse, 0, &acq, &SynthesisSettings::default()).unwrap();
    assert_eq!(mc.channel(Channel::Order0).unwrap().values, k.channel(Channel::Order0).unwrap().values);
    for ch in [Channel::Order1, Channel::Order2, Channel::Order3Plus] {
        assert!(mc.channel(ch).unwrap().values.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn mc_conserves_mass_without_absorption() {
    // sigma = sigma_p: every emitted particle eventually leaves.
    let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::constant(0.4)).with_k0(Phantom::constant(0.4));
    let pulse = SourcePulse::boxcar(0.1, 40.0).unwrap();
    let acq = Acquisition::full(Dim::Two, 512, TimeGrid::new(0.1, 40.0).unwrap()).unwrap().with_sources(vec![0]).unwrap();
    let mc = McConfig { particles: 20_000, seed: 3, roulette_threshold: 1e-4, ..McConfig::default() };
    let m = simulate_albedo_mc(&f, &pulse, &mc, &acq).unwrap();
    let dmu = acq.node_measure();
    let dt = acq.time.dt;
    let tot = &m.channel(Channel::Total).unwrap();
    let mass: f64 = tot.values.iter().sum::<f64>() * dt * dmu;
    // Standard error of the mass: bins of one particle are correlated, so
    // bound it by the sum of the bin errors.
    let se: f64 = tot.stderr.as_ref().unwrap().iter().sum::<f64>() * dt * dmu;
    assert!((mass - 2.0).abs() <= 3.0 * se + 0.01, "mass {mass} se {se}");
}

#[test]
fn mc_error_scales_like_inverse_root_n() {
    let f = OpticalField::vacuum(Dim::Two).with_k0(Phantom::constant(0.5));
    let pulse = SourcePulse::triangle(0.05, 2.5).unwrap();
    let acq = diameter_acq(0.05, 2.5);
    let mean_se = |n: u64| {
        let m = simulate_albedo_mc(&f, &pulse, &McConfig { particles: n, seed: 5, ..McConfig::default() }, &acq).unwrap();
        let se = m.trace_stderr(Channel::Order1, 0, 2).unwrap();
        let nz: Vec<f64> = se.iter().copied().filter(|s| *s > 0.0).collect();
        nz.iter().sum::<f64>() / nz.len() as f64
    };
    let (a, b) = (mean_se(20_000), mean_se(80_000));
    assert!((a / b / 2.0 - 1.0).abs() < 0.2, "ratio {}", a / b);
}

/// Fraction of bins where two traces agree within `k` standard errors.
fn agreement(mc: &[f64], se: &[f64], kernel: &[f64], k: f64) -> f64 {
    let ok = mc
        .iter()
        .zip(se)
        .zip(kernel)
        .filter(|((m, s), q)| (*m - *q).abs() <= k * *s + 1e-12 * q.abs().max(1e-300))
        .count();
    ok as f64 / mc.len() as f64
}

#[test]
fn mc_single_scatter_matches_kernel_synthesis() {
    let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::constant(0.5)).with_k0(Phantom::constant(0.3));
    let pulse = SourcePulse::triangle(0.05, 2.6).unwrap();
    let acq = Acquisition::full(Dim::Two, 8, TimeGrid::new(0.02, 2.6).unwrap()).unwrap().with_sources(vec![0]).unwrap();
    let k = albedo_truncated(&f, &pulse, 1, &acq, &SynthesisSettings::default()).unwrap();
    let m = simulate_albedo_mc(&f, &pulse, &McConfig { particles: 400_000, seed: 11, max_order: 1, ..McConfig::default() }, &acq)
        .unwrap();
    let (mv, ms) = (&m.channel(Channel::Order1).unwrap().values, m.channel(Channel::Order1).unwrap().stderr.as_ref().unwrap());
    let kv = &k.channel(Channel::Order1).unwrap().values;
    let frac = agreement(mv, ms, kv, 3.0);
    assert!(frac >= 0.95, "agreement {frac}");
}

#[test]
fn mc_double_scatter_matches_gamma2() {
    // sigma = 0, constant k0, diameter chord: order-2 bin average at tau ~ 2.5.
    let f = OpticalField::vacuum(Dim::Two).with_k0(Phantom::constant(0.5));
    let pulse = SourcePulse::boxcar(0.05, 2.6).unwrap();
    let acq = diameter_acq(0.05, 2.6);
    let m = simulate_albedo_mc(&f, &pulse, &McConfig { particles: 400_000, seed: 2, max_order: 2, ..McConfig::default() }, &acq)
        .unwrap();
    let b = 49; // [2.45, 2.5)
    let (src, det) = (BoundaryPoint::at_angle(0.0), BoundaryPoint::at_angle(PI));
    let q = crate::kernels::Gamma2Quadrature::default();
    // Bin average of the box-convolved gamma2: a tent on [2.40, 2.50].
    let tent = |tau: f64| pulse.bin_weight(&acq.time, b, tau);
    let rule = crate::quadrature::gauss_legendre(6);
    let mut want = 0.0;
    for (lo, hi) in [(2.40, 2.45), (2.45, 2.50)] {
        for (tau, w) in rule.on_interval(lo, hi) {
            want += w * tent(tau) * gamma2(&f, tau, &src, &det, &q).unwrap().value;
        }
    }
    let got = m.trace(Channel::Order2, 0, 2).unwrap()[b];
    let se = m.trace_stderr(Channel::Order2, 0, 2).unwrap()[b];
    assert!((got - want).abs() <= 3.0 * se, "mc {got} +- {se}, kernel {want}");
}

#[test]
fn mc_single_scatter_matches_kernel_in_three_dimensions() {
    let f = OpticalField::vacuum(Dim::Three).with_k0(Phantom::bump(Vec3::zeros(), 0.9, 0.6));
    let pulse = SourcePulse::triangle(0.1, 2.6).unwrap();
    let nodes = vec![
        BoundaryPoint::new(Vec3::new(-1.0, 0.0, 0.0)).unwrap(),
        BoundaryPoint::new(Vec3::new(0.8, 0.6, 0.0)).unwrap(),
        BoundaryPoint::new(Vec3::new(0.6, 0.0, 0.8)).unwrap(),
        BoundaryPoint::new(Vec3::new(-0.2, -0.4, 0.894427190999916)).unwrap(),
    ];
    let acq = Acquisition { dim: Dim::Three, nodes, sources: vec![0], detectors: vec![1, 2, 3], time: TimeGrid::new(0.05, 2.6).unwrap(), rings: None };
    let k = albedo_truncated(&f, &pulse, 1, &acq, &SynthesisSettings::default()).unwrap();
    let m = simulate_albedo_mc(&f, &pulse, &McConfig { particles: 400_000, seed: 4, max_order: 1, ..McConfig::default() }, &acq)
        .unwrap();
    let kv = &k.channel(Channel::Order1).unwrap().values;
    let c = m.channel(Channel::Order1).unwrap();
    let frac = agreement(&c.values, c.stderr.as_ref().unwrap(), kv, 3.0);
    assert!(frac >= 0.95, "agreement {frac}");
    // The scale is pinned: the integrated traces agree to a few percent.
    let (sk, sm): (f64, f64) = (kv.iter().sum(), c.values.iter().sum());
    assert_relative_eq!(sm, sk, max_relative = 0.03);
}

#[test]
fn mc_rejects_bad_configs() {
    let f = OpticalField::vacuum(Dim::Two);
    let pulse = SourcePulse::triangle(0.05, 2.5).unwrap();
    let acq = diameter_acq(0.05, 2.5);
    assert!(simulate_albedo_mc(&f, &pulse, &McConfig { particles: 0, ..McConfig::default() }, &acq).is_err());
    let bad = OpticalField::vacuum(Dim::Two).with_k0(Phantom::constant(1.0)).with_support(SupportMode::H2 { delta: 0.2 });
    // k0 constant violates the H2 margin.
    assert!(simulate_albedo_mc(&bad, &pulse, &McConfig::default(), &acq).is_err());
}

fn operator(f: &OpticalField, acq: &Acquisition) -> AlbedoMatrix {
    let method = OperatorMethod::Kernel { order: 1, settings: SynthesisSettings::default() };
    albedo_matrix(f, acq, &method, 1 << 30).unwrap()
}

#[test]
fn operator_norm_properties() {
    let acq = Acquisition::full(Dim::Two, 16, TimeGrid::new(0.05, 2.2).unwrap()).unwrap().with_sources(vec![0, 5]).unwrap();
    let base = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::constant(0.2)).with_k0(Phantom::constant(0.2));
    let bump = |amp: f64| Phantom::Sum { terms: vec![Phantom::constant(0.2), Phantom::bump(Vec3::new(0.2, 0.1, 0.0), 0.5, amp)] };
    let a = operator(&base, &acq);
    let b = operator(&base.clone().with_sigma(bump(0.1)), &acq);
    let c = operator(&base.clone().with_sigma(bump(0.05)), &acq);
    assert_eq!(a.difference_l1_norm(&a).unwrap(), 0.0);
    assert_eq!(a.difference_l1_norm(&b).unwrap(), b.difference_l1_norm(&a).unwrap());
    let (nb, nc) = (a.difference_l1_norm(&b).unwrap(), a.difference_l1_norm(&c).unwrap());
    assert!((nc / nb - 0.5).abs() < 0.05, "ratio {}", nc / nb);
    // Without scattering the operator norm is the largest detected ballistic mass.
    let vac = operator(&OpticalField::vacuum(Dim::Two), &acq);
    assert!(vac.l1_norm() <= 2.0 && vac.l1_norm() > 1.8, "{}", vac.l1_norm());
}

#[test]
fn operator_respects_memory_budget() {
    let acq = Acquisition::full(Dim::Two, 64, TimeGrid::new(0.01, 2.5).unwrap()).unwrap();
    let method = OperatorMethod::Kernel { order: 1, settings: SynthesisSettings::default() };
    match albedo_matrix(&OpticalField::vacuum(Dim::Two), &acq, &method, 1 << 20) {
        Err(Error::MemoryBudget { required, .. }) => assert_eq!(required, 64 * 64 * 250 * 3 * 8),
        other => panic!("expected a budget error, got {other:?}"),
    }
}

#[test]
fn measurement_files_roundtrip() {
    let f = OpticalField::vacuum(Dim::Two).with_sigma(Phantom::constant(0.2)).with_k0(Phantom::constant(0.3));
    let pulse = SourcePulse::triangle(0.05, 2.2).unwrap();
    let acq = Acquisition::full(Dim::Two, 6, TimeGrid::new(0.02, 2.2).unwrap()).unwrap();
    let m = simulate_albedo_mc(&f, &pulse, &McConfig { particles: 2000, ..McConfig::default() }, &acq).unwrap();
    let dir = std::env::temp_dir().join(format!("avtomo-roundtrip-{}", std::process::id()));
    m.write_dir(&dir, &Provenance::new("abc")).unwrap();
    let (back, prov) = MeasurementSet::read_dir(&dir).unwrap();
    std::fs::remove_dir_all(&dir).ok();
    assert_eq!(prov.config_hash, "abc");
    assert_eq!(back, m);
    let _ = planar(0.0);
}
