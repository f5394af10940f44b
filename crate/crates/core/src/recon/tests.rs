use super::*;
use crate::kernels::gamma1_limit_prediction;
use crate::quadrature::integrate_pieces;
use crate::transport::albedo_truncated;
use approx::assert_relative_eq;

fn h2_field() -> OpticalField {
    OpticalField::vacuum(Dim::Two)
        .with_sigma(Phantom::bump(Vec3::zeros(), 0.6, 1.0))
        .with_k0(Phantom::bump(Vec3::new(0.1, -0.05, 0.0), 0.55, 0.4))
        .with_support(SupportMode::H2 { delta: 0.2 })
}

#[test]
fn sample_fit_recovers_model_coefficients() {
    let eps = log_spaced(1e-7, 1e-3, 8);
    let cases = [
        (Singularity::Power { exponent: -0.5 }, [2.5, 0.7, -0.3]),
        (Singularity::Power { exponent: 0.0 }, [1.25, -4.0, 2.0]),
        (Singularity::Log, [0.8, 3.0, 1.5]),
    ];
    for (s, c) in cases {
        let v: Vec<f64> = eps.iter().map(|e| front_basis(s, *e).iter().zip(&c).map(|(f, a)| f * a).sum()).collect();
        let fit = fit_front_samples(&eps, &v, s).unwrap();
        assert_relative_eq!(fit.coefficient, c[0], max_relative = 1e-9);
        assert!(fit.residual < 1e-10);
    }
    assert!(fit_front_samples(&eps[..2], &[1.0, 2.0], Singularity::Log).is_err());
}

/// (1/dt) int gamma(tau) (CDF(hi - tau) - CDF(lo - tau)) dtau with tau = t0 + u^2.
fn binned_model(pulse: &SourcePulse, time: &TimeGrid, t0: f64, c: [f64; 3]) -> Vec<f64> {
    (0..time.n_bins)
        .map(|b| {
            let lo = time.bin_start(b);
            let hi = lo + time.dt;
            if hi <= t0 {
                return 0.0;
            }
            let umax = (hi - t0).sqrt();
            let mut breaks = vec![0.0];
            for k in [lo - pulse.eta, lo - 0.5 * pulse.eta, lo, hi - pulse.eta, hi - 0.5 * pulse.eta] {
                if k > t0 && k < hi {
                    breaks.push((k - t0).sqrt());
                }
            }
            breaks.push(umax);
            breaks.sort_by(f64::total_cmp);
            let f = |u: f64| {
                let tau = t0 + u * u;
                let g = c[0] + c[1] * u + c[2] * u * u; // gamma * 2u for gamma = c0 / (2u) + ...
                g * (pulse.cdf(hi - tau) - pulse.cdf(lo - tau)) / time.dt
            };
            integrate_pieces(f, &breaks, crate::quadrature::Tolerance::new(1e-15, 1e-12)).value
        })
        .collect()
}

#[test]
fn trace_fit_recovers_leading_coefficient() {
    let pulse = SourcePulse::triangle(0.02, 3.0).unwrap();
    let time = TimeGrid::new(0.005, 3.0).unwrap();
    let t0 = 1.7321;
    // gamma = C eps^{-1/2} + a + b eps^{1/2}; with tau = t0 + u^2 the
    // integrand gamma * 2u is 2C + 2a u + 2b u^2.
    let (cc, a, b) = (0.9, 0.4, -0.2);
    let trace = binned_model(&pulse, &time, t0, [2.0 * cc, 2.0 * a, 2.0 * b]);
    let s = Singularity::Power { exponent: -0.5 };
    let (fit, w) = extract_single_scatter_coeff(&trace, None, &pulse, &time, t0, s, FitWindow::for_trace(t0)).unwrap();
    assert!(fit.points >= 5, "{} bins", fit.points);
    assert_relative_eq!(w.eps2, 0.05 * t0);
    assert_relative_eq!(fit.coefficient, cc, max_relative = 1e-4);
    assert!(fit.residual < 1e-4);
}

#[test]
fn matched_filter_finds_ballistic_pulse() {
    let pulse = SourcePulse::triangle(0.03, 3.0).unwrap();
    let time = TimeGrid::new(0.01, 3.0).unwrap();
    let mut trace = vec![0.0; time.n_bins];
    pulse.deposit(&time, 1.234, 0.37, &mut trace);
    let fit = extract_ballistic(&trace, None, &pulse, &time, 1.234);
    assert!(!fit.flagged);
    assert_relative_eq!(fit.amplitude, 0.37, max_relative = 1e-12);
    assert_relative_eq!(fit.t0, 1.234, epsilon = 1e-12);
    // A shifted arrival is found within the search grid spacing.
    let mut shifted = vec![0.0; time.n_bins];
    pulse.deposit(&time, 1.239, 0.37, &mut shifted);
    let fit = extract_ballistic(&shifted, None, &pulse, &time, 1.234);
    assert!((fit.t0 - 1.239).abs() <= 0.0005 + 1e-12);
    // Noise-dominated data is flagged.
    let se = vec![1e3; time.n_bins];
    let fit = extract_ballistic(&trace, Some(&se), &pulse, &time, 1.234);
    assert!(fit.flagged);
    assert_eq!(fit.amplitude, 0.0);
}

#[test]
fn prefactor_matches_limit_prediction() {
    let field = h2_field().with_phase(PhaseFunction::HenyeyGreenstein { asymmetry: 0.3 });
    let known = KnownOptics::of(&field);
    for (a, b) in [(0.0, PI), (0.4, 2.9), (1.0, 4.0)] {
        let (s, d) = (BoundaryPoint::at_angle(a), BoundaryPoint::at_angle(b));
        let chord = Chord::from_endpoints(&s, &d).unwrap();
        let pred = gamma1_limit_prediction(&field, &s, &d).unwrap();
        let e = (-field.sigma.line_integral(&chord.source, &chord.detector)).exp();
        let pw = crate::xray::weighted_xray(Dim::Two, |y| field.k0_at(y), &chord).value;
        let c = known.front_prefactor(&chord) * e * known.g_forward(&chord) * pw;
        assert_relative_eq!(c, pred.coefficient, max_relative = 1e-9);
    }
}

#[test]
fn planar_reconstruction_from_kernel_samples() {
    let field = h2_field();
    let time = TimeGrid::new(0.05, 3.0).unwrap();
    let acq = Acquisition::full(Dim::Two, 128, time).unwrap();
    let eps = log_spaced(1e-7, 1e-4, 5);
    let data = front_samples_for(&field, &acq, &eps, false, &KernelQuadrature::fast()).unwrap();
    let settings = ReconSettings { n_angles: 90, n_offsets: 128, image_size: 64, ..ReconSettings::default() };
    let known = KnownOptics::of(&field);
    let mut report = reconstruct_samples(&data, &known, &settings).unwrap();
    report.score(&field, &settings);
    let err = report.errors.clone().unwrap();
    assert_eq!(report.counts.chords, 128 * 127 / 2);
    assert_eq!(report.counts.e_excluded, 0);
    assert_eq!(report.counts.fits_rejected, 0);
    let (es, ek) = (err.sigma_relative_l2.unwrap(), err.k0_relative_l2.unwrap());
    assert!(es < 0.1, "sigma error {es}");
    assert!(ek < 0.15, "k0 error {ek}");
    assert!(report.boundary_sums.is_none());
}

#[test]
fn sigma_stage_from_binned_traces() {
    let field = h2_field().with_k0(Phantom::zero());
    let pulse = SourcePulse::triangle(0.04, 2.2).unwrap();
    let time = TimeGrid::new(0.02, 2.2).unwrap();
    let acq = Acquisition::full(Dim::Two, 48, time).unwrap();
    let ms = albedo_truncated(&field, &pulse, 0, &acq, &SynthesisSettings::default()).unwrap();
    let known = KnownOptics::of(&field);
    let settings = ReconSettings { n_angles: 48, n_offsets: 64, image_size: 32, ..ReconSettings::default() };
    let sym = chord_records_from_measurements(&ms, &known, &settings).unwrap();
    let mf = chord_records_from_measurements(
        &ms,
        &known,
        &ReconSettings { ballistic: BallisticMode::MatchedFilter, ..settings.clone() },
    )
    .unwrap();
    assert_eq!(sym.len(), 48 * 47);
    for (a, b) in sym.iter().zip(&mf) {
        assert_relative_eq!(a.ballistic.amplitude, b.ballistic.amplitude, max_relative = 1e-9);
        assert_relative_eq!(a.e_hat.unwrap(), b.e_hat.unwrap(), max_relative = 1e-9);
        let chord = Chord::from_endpoints(&acq.nodes[a.source], &acq.nodes[a.detector]).unwrap();
        let e = (-field.sigma.line_integral(&chord.source, &chord.detector)).exp();
        assert_relative_eq!(a.e_hat.unwrap(), e, max_relative = 1e-9);
    }
}

#[test]
fn front_coefficient_from_binned_single_scatter() {
    let field = h2_field();
    let pulse = SourcePulse::triangle(0.01, 2.2).unwrap();
    let time = TimeGrid::new(0.005, 2.2).unwrap();
    let acq = Acquisition::full(Dim::Two, 24, time).unwrap().with_sources(vec![0]).unwrap();
    let ms = albedo_truncated(&field, &pulse, 1, &acq, &SynthesisSettings::default()).unwrap();
    let known = KnownOptics::of(&field);
    let records = chord_records_from_measurements(&ms, &known, &ReconSettings::default()).unwrap();
    let mut checked = 0;
    for r in &records {
        let Some(fit) = r.fit else { continue };
        let pred = gamma1_limit_prediction(&field, &acq.nodes[r.source], &acq.nodes[r.detector]).unwrap();
        // Chords grazing the support edge are outside the asymptotic regime
        // of a 0.1-wide window.
        let q = Chord::from_endpoints(&acq.nodes[r.source], &acq.nodes[r.detector]).unwrap().q;
        if q.abs() > 0.3 {
            continue;
        }
        assert!(fit.accepted);
        assert_relative_eq!(fit.coefficient, pred.coefficient, max_relative = 0.05);
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} chords through the support");
}

#[test]
fn spatial_reconstruction_on_rings() {
    let field = OpticalField::vacuum(Dim::Three)
        .with_sigma(Phantom::bump(Vec3::zeros(), 0.7, 0.8))
        .with_k0(Phantom::bump(Vec3::zeros(), 0.6, 0.3))
        .with_support(SupportMode::H2 { delta: 0.2 });
    let time = TimeGrid::new(0.05, 3.0).unwrap();
    let acq = Acquisition::rings(3, 64, time).unwrap();
    let data = front_samples_for(&field, &acq, &log_spaced(1e-6, 1e-3, 5), false, &KernelQuadrature::fast()).unwrap();
    let settings = ReconSettings { n_angles: 64, n_offsets: 96, image_size: 48, ..ReconSettings::default() };
    let mut report = reconstruct_samples(&data, &KnownOptics::of(&field), &settings).unwrap();
    assert_eq!(report.sigma.len(), 3);
    assert_eq!(report.counts.chords, 3 * 64 * 63 / 2);
    report.score(&field, &settings);
    let err = report.errors.unwrap();
    assert!(err.sigma_relative_l2.unwrap() < 0.15, "{:?}", err);
    assert!(err.k0_relative_l2.unwrap() < 0.25, "{:?}", err);
    // A full spherical grid has no slices.
    let full = Acquisition::full(Dim::Three, 20, time).unwrap();
    let data = SingularSamples { acquisition: full, ..data };
    assert!(matches!(reconstruct_samples(&data, &KnownOptics::of(&field), &settings), Err(Error::Mismatch(_))));
}

#[test]
fn log_front_reports_boundary_sums() {
    let field = OpticalField::vacuum(Dim::Three).with_k0(Phantom::constant(0.2)).with_support(SupportMode::H1);
    let time = TimeGrid::new(0.05, 3.0).unwrap();
    let acq = Acquisition::rings(1, 16, time).unwrap();
    let data = front_samples_for(&field, &acq, &log_spaced(1e-7, 1e-4, 6), false, &KernelQuadrature::default()).unwrap();
    let settings = ReconSettings { n_angles: 16, n_offsets: 32, image_size: 16, ..ReconSettings::default() };
    let report = reconstruct_samples(&data, &KnownOptics::of(&field), &settings).unwrap();
    assert!(report.k0.is_none());
    let sums = report.boundary_sums.unwrap();
    assert_eq!(sums.len(), 16 * 15 / 2);
    for s in sums {
        assert_relative_eq!(s.value, 0.4, max_relative = 0.05);
    }
}

#[test]
fn report_files_are_written() {
    let field = h2_field();
    let time = TimeGrid::new(0.05, 3.0).unwrap();
    let acq = Acquisition::full(Dim::Two, 16, time).unwrap();
    let data = front_samples_for(&field, &acq, &log_spaced(1e-7, 1e-4, 4), false, &KernelQuadrature::fast()).unwrap();
    let settings = ReconSettings { n_angles: 8, n_offsets: 16, image_size: 8, ..ReconSettings::default() };
    let mut report = reconstruct_samples(&data, &KnownOptics::of(&field), &settings).unwrap();
    report.score(&field, &settings);
    let dir = std::env::temp_dir().join(format!("avtomo-recon-{}", std::process::id()));
    report.write_dir(&dir, &Provenance::new("abc")).unwrap();
    for f in ["image_sigma.csv", "image_k0.csv", "sinogram_sigma.csv", "sinogram_k0.csv", "report.json"] {
        assert!(dir.join(f).is_file(), "{f}");
    }
    let json: serde_json::Value = serde_json::from_reader(File::open(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["provenance"]["config_hash"], "abc");
    assert!(json["errors"]["sigma_relative_l2"].is_number());
    std::fs::remove_dir_all(dir).unwrap();
}

fn stability_settings() -> StabilitySettings {
    StabilitySettings {
        nodes: 24,
        sources: vec![0, 5, 11],
        dt: 0.1,
        horizon: 2.2,
        order: 1,
        ..StabilitySettings::default()
    }
}

#[test]
fn stability_report_properties() {
    let a = h2_field();
    let s = stability_settings();
    let same = stability_report(&a, &a, &s).unwrap();
    assert_eq!(same.operator_norm, 0.0);
    assert!(same.ballistic_lhs.iter().all(|v| *v == 0.0));
    assert!(same.ballistic_bound_holds);

    let b = a.clone().with_sigma(Phantom::bump(Vec3::zeros(), 0.6, 1.2));
    let r = stability_report(&a, &b, &s).unwrap();
    assert!(r.operator_norm > 0.0);
    assert!(r.ballistic_bound_holds, "{:?} vs {}", r.ballistic_lhs, r.operator_norm);
    assert_eq!(r.ratios.len(), 3);

    let c = a.clone().with_support(SupportMode::H1);
    assert!(matches!(stability_report(&a, &c, &s), Err(Error::Mismatch(_))));
}

#[test]
fn ballistic_integral_matches_node_sum() {
    // Vacuum against sigma = c: |E - E~| = 1 - exp(-c t0); compare with a
    // midpoint sum over a fine boundary grid.
    let a = OpticalField::vacuum(Dim::Two);
    let b = a.clone().with_sigma(Phantom::constant(0.5));
    let src = BoundaryPoint::at_angle(0.0);
    let lhs = ballistic_difference_integral(&a, &b, &src);
    let n = 20000;
    let mut sum = 0.0;
    for i in 1..n {
        let x = BoundaryPoint::at_angle(2.0 * PI * i as f64 / n as f64);
        let ch = Chord::from_endpoints(&src, &x).unwrap();
        sum += (1.0 - (-0.5 * ch.length).exp()) * ch.entry_cosine() * ch.exit_cosine() / ch.length;
    }
    sum *= 2.0 * PI / n as f64;
    assert_relative_eq!(lhs, sum, max_relative = 1e-6);
}

#[test]
fn front_comparison_scales_with_perturbation() {
    let a = h2_field();
    let s = StabilitySettings { front_angles: 4, front_offsets: 5, ..stability_settings() };
    let b = a.clone().with_k0(Phantom::bump(Vec3::new(0.1, -0.05, 0.0), 0.55, 0.5));
    let r = stability_report(&a, &b, &s).unwrap().front.unwrap();
    assert_eq!(r.chords, 20);
    assert!(r.lhs > 0.0 && r.weighted_sup > 0.0);
    let c = a.clone().with_k0(Phantom::bump(Vec3::new(0.1, -0.05, 0.0), 0.55, 0.6));
    let r2 = stability_report(&a, &c, &s).unwrap().front.unwrap();
    assert_relative_eq!(r2.lhs / r.lhs, 2.0, max_relative = 1e-3);
}

#[test]
fn zero_field_reconstructs_zero() {
    let field = OpticalField::vacuum(Dim::Two).with_support(SupportMode::H2 { delta: 0.2 });
    let time = TimeGrid::new(0.05, 3.0).unwrap();
    let acq = Acquisition::full(Dim::Two, 64, time).unwrap();
    let data = front_samples_for(&field, &acq, &log_spaced(1e-7, 1e-4, 4), false, &KernelQuadrature::fast()).unwrap();
    let settings = ReconSettings { n_angles: 45, n_offsets: 64, image_size: 32, ..ReconSettings::default() };
    let report = reconstruct_samples(&data, &KnownOptics::of(&field), &settings).unwrap();
    assert!(report.sigma[0].image.l2_norm_within(1.0) <= 1e-2);
    assert!(report.k0.unwrap()[0].image.l2_norm_within(1.0) <= 1e-2);
}

#[test]
fn scattering_leaves_sigma_unchanged() {
    let time = TimeGrid::new(0.05, 3.0).unwrap();
    let acq = Acquisition::full(Dim::Two, 64, time).unwrap();
    let settings = ReconSettings { n_angles: 45, n_offsets: 64, image_size: 32, ..ReconSettings::default() };
    let eps = log_spaced(1e-7, 1e-4, 4);
    let with = h2_field();
    let without = with.clone().with_k0(Phantom::zero());
    let a = reconstruct_samples(&front_samples_for(&with, &acq, &eps, false, &KernelQuadrature::fast()).unwrap(), &KnownOptics::of(&with), &settings).unwrap();
    let b = reconstruct_samples(&front_samples_for(&without, &acq, &eps, false, &KernelQuadrature::fast()).unwrap(), &KnownOptics::of(&without), &settings).unwrap();
    let (ia, ib) = (&a.sigma[0].image, &b.sigma[0].image);
    let diff: f64 = ia.values.iter().zip(&ib.values).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = ib.values.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(diff <= 0.02 * norm);
}
