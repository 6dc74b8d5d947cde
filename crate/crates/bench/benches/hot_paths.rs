use std::f64::consts::PI;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use darktrap_core::atomkinetics::{step, AtomEnsemble, Environment, KineticsConfig, ScatterSchedule};
use darktrap_core::beamforge::{crossed_trap, propagate, BandLimit, BeamSpec, FieldGrid};
use darktrap_core::spectra::{damped_sine_fit, lorentzian_fit, power_spectrum, AnalysisConfig};
use darktrap_core::spinsim::{quantum_evolve, SpinModel};
use darktrap_core::AtomSpecies;
use num_complex::Complex64;

fn window() -> Vec<f64> {
    (0..980)
        .map(|k| {
            let t = k as f64 * 1e-6;
            (-t / 0.5e-3).exp() * (2.0 * PI * 46_674.15 * t + 0.3).sin()
        })
        .collect()
}

fn spectral(c: &mut Criterion) {
    let cfg = AnalysisConfig::default();
    let seg = window();
    c.bench_function("power_spectrum_980x8", |b| {
        b.iter(|| power_spectrum(black_box(&seg), 1e6, cfg.zero_pad, cfg.window).unwrap())
    });
    let sp = power_spectrum(&seg, 1e6, cfg.zero_pad, cfg.window).unwrap();
    c.bench_function("lorentzian_fit", |b| b.iter(|| lorentzian_fit(black_box(&sp), &cfg, 0)));
    c.bench_function("damped_sine_fit", |b| b.iter(|| damped_sine_fit(black_box(&seg), 1e6, &cfg).unwrap()));
}

fn beam(c: &mut Criterion) {
    let w = 0.5e-3;
    let g = FieldGrid::from_fn(256, 10e-6, 780e-9, |x, y| {
        Complex64::new((-(x * x + y * y) / (w * w)).exp(), 0.0)
    })
    .unwrap();
    c.bench_function("propagate_256", |b| b.iter(|| propagate(black_box(&g), 0.05, BandLimit::WindowEscape).unwrap()));
}

fn spin(c: &mut Criterion) {
    let m = SpinModel::illustrative(0.0);
    let grid: Vec<f64> = (0..1000).map(|k| k as f64 * 1e-6).collect();
    c.bench_function("quantum_evolve_f3_1000", |b| b.iter(|| quantum_evolve(black_box(&m), &grid).unwrap()));
}

fn kinetics(c: &mut Criterion) {
    let species = AtomSpecies::rb85();
    let trap = crossed_trap(&BeamSpec::default_for(&species), &species).unwrap();
    let env = Environment { trap: Some(&trap), species: &species, gravity: true };
    let cfg = KineticsConfig { samples: 256, ..KineticsConfig::default() };
    let sched = ScatterSchedule::boil_default();
    let mut ens = AtomEnsemble::thermal(&cfg, &env).unwrap();
    c.bench_function("kinetics_step_256", |b| b.iter(|| step(&mut ens, &env, &sched, cfg.dt).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = spectral, beam, spin, kinetics
}
criterion_main!(benches);
