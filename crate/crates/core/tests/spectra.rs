use std::f64::consts::PI;

use darktrap_core::spectra::{damped_sine_fit, lorentzian_fit, power_spectrum, AnalysisConfig};
use darktrap_core::SeedTree;

const FS: f64 = 1e6;
const NU: f64 = 46_674.15;
const N: usize = 980;

fn tone(phase: f64, noise: f64, tree: &SeedTree, stream: u64) -> Vec<f64> {
    (0..N)
        .map(|k| {
            let t = k as f64 / FS;
            (-t / 0.5e-3).exp() * (2.0 * PI * NU * t + phase).sin() + noise * tree.normal_at(stream, k as u64)
        })
        .collect()
}

/// The reported center uncertainty must describe the actual scatter of
/// centers over independent noise draws. The phase is held fixed: its
/// effect on the center is a bias, not noise.
#[test]
fn reported_sigma_matches_scatter() {
    let cfg = AnalysisConfig::default();
    let tree = SeedTree::new(21).child("calibration");
    let mut centers = Vec::new();
    let mut sigmas = Vec::new();
    for r in 0..256 {
        let seg = tone(0.3, 1.0 / 15.0, &tree, r);
        let sp = power_spectrum(&seg, FS, cfg.zero_pad, cfg.window).unwrap();
        if let Some(f) = lorentzian_fit(&sp, &cfg, r as usize).fit() {
            centers.push(f.center);
            sigmas.push(f.sigma_center);
        }
    }
    assert!(centers.len() >= 250, "only {} valid fits", centers.len());
    let m = centers.iter().sum::<f64>() / centers.len() as f64;
    let std = (centers.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (centers.len() - 1) as f64).sqrt();
    let sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    let ratio = std / sigma;
    assert!((0.5..=2.0).contains(&ratio), "scatter {std} Hz vs reported {sigma} Hz");
}

/// Frequency- and time-domain estimators must agree on a noiseless window.
#[test]
fn lorentzian_agrees_with_time_domain_fit() {
    let cfg = AnalysisConfig::default();
    let tree = SeedTree::new(0);
    for phase in [0.0, 0.3, 1.2, 2.5] {
        let seg = tone(phase, 0.0, &tree, 0);
        let sp = power_spectrum(&seg, FS, cfg.zero_pad, cfg.window).unwrap();
        let lor = lorentzian_fit(&sp, &cfg, 0).fit().unwrap().center;
        let td = damped_sine_fit(&seg, FS, &cfg).unwrap().nu;
        assert!((td - NU).abs() < 1e-6, "time-domain fit {td}");
        assert!((lor - td).abs() < 1e-3, "phase {phase}: Lorentzian {lor} vs time domain {td}");
    }
}
