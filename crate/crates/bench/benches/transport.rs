use avtomo_bench::planar_field;
use avtomo_core::geometry::Dim;
use avtomo_core::transport::{albedo_truncated, simulate_albedo_mc, Acquisition, McConfig, SourcePulse, SynthesisSettings, TimeGrid};
use criterion::{criterion_group, criterion_main, Criterion};

fn transport(c: &mut Criterion) {
    let f = planar_field();
    let pulse = SourcePulse::triangle(0.04, 2.4).unwrap();
    let acq = Acquisition::full(Dim::Two, 16, TimeGrid::new(0.02, 2.4).unwrap()).unwrap().with_sources(vec![0, 5]).unwrap();
    let settings = SynthesisSettings::default();
    for order in [1, 2] {
        c.bench_function(&format!("albedo_truncated order {order}, 2x16 nodes"), |b| {
            b.iter(|| albedo_truncated(&f, &pulse, order, &acq, &settings).unwrap())
        });
    }
    let mc = McConfig { particles: 20_000, seed: 1, ..McConfig::default() };
    c.bench_function("simulate_albedo_mc 2x20k particles", |b| b.iter(|| simulate_albedo_mc(&f, &pulse, &mc, &acq).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = transport
}
criterion_main!(benches);
