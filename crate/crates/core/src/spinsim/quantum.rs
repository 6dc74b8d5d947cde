//! Spin-F ground manifold under a Larmor term plus the rank-2 tensor light shift.
//!
//! H/ℏ = ω_L F_z + β (F·ε)², ε = (0, sin θ, cos θ). The Hamiltonian is time
//! independent, so one Hermitian eigendecomposition gives the exact
//! propagator at every requested time.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;

use super::{PrecessionTrace, PumpProbeSchedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinModel {
    pub f: u32,
    /// rad/s
    pub omega_l: f64,
    /// rad/s
    pub beta: f64,
    /// Probe polarization to field angle (rad).
    pub theta: f64,
    /// 1/τ (1/s)
    pub damping: f64,
}

impl SpinModel {
    /// Default revival model: 0.1 G bias on ⁸⁵Rb, t_rev = 0.5 ms, τ = 0.7 ms.
    pub fn illustrative(theta: f64) -> Self {
        SpinModel {
            f: 3,
            omega_l: 2.0 * std::f64::consts::PI * 46_674.15,
            beta: std::f64::consts::PI / 0.5e-3,
            theta,
            damping: 1.0 / 0.7e-3,
        }
    }

    pub fn dim(&self) -> usize {
        2 * self.f as usize + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.f == 0 {
            return Err(Error::config("spin F must be >= 1"));
        }
        for (name, v) in [("omega_l", self.omega_l), ("beta", self.beta), ("theta", self.theta)] {
            if !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite")));
            }
        }
        if !(self.damping >= 0.0) {
            return Err(Error::config("damping must be >= 0"));
        }
        Ok(())
    }
}

/// Spin matrices in the |F, m⟩ basis ordered m = F, F-1, ..., -F.
pub(crate) struct SpinOps {
    pub fx: DMatrix<Complex64>,
    pub fy: DMatrix<Complex64>,
    pub fz: DMatrix<Complex64>,
}

pub(crate) fn spin_ops(f: u32) -> SpinOps {
    let d = 2 * f as usize + 1;
    let ff = f as f64;
    let m = |i: usize| ff - i as f64;
    let mut fz = DMatrix::zeros(d, d);
    let mut fp = DMatrix::<Complex64>::zeros(d, d);
    for i in 0..d {
        fz[(i, i)] = Complex64::new(m(i), 0.0);
        if i + 1 < d {
            // F₊|m⟩ = √(F(F+1) - m(m+1)) |m+1⟩
            let mi = m(i + 1);
            fp[(i, i + 1)] = Complex64::new((ff * (ff + 1.0) - mi * (mi + 1.0)).sqrt(), 0.0);
        }
    }
    let fm = fp.adjoint();
    let half = Complex64::new(0.5, 0.0);
    let fx = (&fp + &fm) * half;
    let fy = (&fp - &fm) * Complex64::new(0.0, -0.5);
    SpinOps { fx, fy, fz }
}

pub(crate) fn hamiltonian(model: &SpinModel, ops: &SpinOps) -> DMatrix<Complex64> {
    let (s, c) = model.theta.sin_cos();
    let proj = &ops.fy * Complex64::new(s, 0.0) + &ops.fz * Complex64::new(c, 0.0);
    &ops.fz * Complex64::new(model.omega_l, 0.0) + (&proj * &proj) * Complex64::new(model.beta, 0.0)
}

/// Eigenvector of F_x with eigenvalue +F, phase fixed so its first entry is real positive.
pub(crate) fn stretched_x(ops: &SpinOps) -> DVector<Complex64> {
    let eig = ops.fx.clone().symmetric_eigen();
    let k = eig.eigenvalues.imax();
    let mut v: DVector<Complex64> = eig.eigenvectors.column(k).into_owned();
    let lead = v[0];
    if lead.norm() > 0.0 {
        let ph = lead / lead.norm();
        v /= ph;
    }
    let n = v.norm();
    v / Complex64::new(n, 0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpinSeries {
    pub t: Vec<f64>,
    /// ⟨F_x⟩·e^{-t/τ}
    pub fx: Vec<f64>,
    /// ⟨F_y⟩·e^{-t/τ}
    pub fy: Vec<f64>,
    /// Worst |‖ψ‖ - 1| over the grid.
    pub norm_drift: f64,
    /// Worst relative drift of ⟨H⟩ over the grid.
    pub energy_drift: f64,
}

/// ⟨F_x⟩(t) (and ⟨F_y⟩) from the stretched-x state, damped by e^{-t/τ}.
pub fn quantum_evolve(model: &SpinModel, t_grid: &[f64]) -> Result<SpinSeries> {
    model.validate()?;
    let ops = spin_ops(model.f);
    let h = hamiltonian(model, &ops);
    let eig = h.clone().symmetric_eigen();
    let v = &eig.eigenvectors;
    let psi0 = stretched_x(&ops);
    let coeff = v.adjoint() * &psi0;
    let e0 = (psi0.adjoint() * &h * &psi0)[(0, 0)].re;
    let escale = e0.abs().max(h.norm() * 1e-12).max(f64::MIN_POSITIVE);
    let d = model.dim();
    let mut out = SpinSeries {
        t: t_grid.to_vec(),
        fx: Vec::with_capacity(t_grid.len()),
        fy: Vec::with_capacity(t_grid.len()),
        norm_drift: 0.0,
        energy_drift: 0.0,
    };
    for &t in t_grid {
        let phased = DVector::from_iterator(
            d,
            (0..d).map(|k| coeff[k] * Complex64::from_polar(1.0, -eig.eigenvalues[k] * t)),
        );
        let psi = v * phased;
        let norm = psi.norm();
        out.norm_drift = out.norm_drift.max((norm - 1.0).abs());
        let e = (psi.adjoint() * &h * &psi)[(0, 0)].re;
        out.energy_drift = out.energy_drift.max((e - e0).abs() / escale);
        let damp = (-t * model.damping).exp();
        out.fx.push((psi.adjoint() * &ops.fx * &psi)[(0, 0)].re * damp);
        out.fy.push((psi.adjoint() * &ops.fy * &psi)[(0, 0)].re * damp);
    }
    if out.norm_drift > 1e-8 {
        return Err(Error::numerical(format!("norm drift {:.3e} exceeds 1e-8", out.norm_drift)));
    }
    Ok(out)
}

/// Revival time predicted by the secular (rotating-frame averaged) model:
/// β_eff = β·(3cos²θ - 1)/2 multiplies F_z², whose phases rephase at π/|β_eff|.
pub fn secular_revival_time(model: &SpinModel) -> Option<f64> {
    let c = model.theta.cos();
    let beta_eff = model.beta * (3.0 * c * c - 1.0) / 2.0;
    if beta_eff.abs() < 1e-12 * model.beta.abs().max(1.0) {
        None
    } else {
        Some(std::f64::consts::PI / beta_eff.abs())
    }
}

/// Height of the revival lobe above the preceding collapse on the
/// undamped transverse envelope |⟨F₊⟩|e^{t/τ}/F: max over [0.8, 1.2]·t_rev
/// minus min over [0.25, 0.75]·t_rev.
pub fn revival_contrast(series: &SpinSeries, model: &SpinModel, t_rev: f64) -> f64 {
    let env = |k: usize| {
        let t = series.t[k];
        (series.fx[k].hypot(series.fy[k])) * (t * model.damping).exp() / model.f as f64
    };
    let mut peak = f64::MIN;
    let mut trough = f64::MAX;
    for k in 0..series.t.len() {
        let u = series.t[k] / t_rev;
        if (0.8..=1.2).contains(&u) {
            peak = peak.max(env(k));
        }
        if (0.25..=0.75).contains(&u) {
            trough = trough.min(env(k));
        }
    }
    if peak == f64::MIN || trough == f64::MAX {
        return 0.0;
    }
    (peak - trough).max(0.0)
}

/// Polarimeter trace V = A·⟨F_x⟩/F per cycle plus white noise of RMS A/snr;
/// every cycle restarts from the pumped state when the pump ends.
pub fn revival_trace(
    model: &SpinModel,
    schedule: &PumpProbeSchedule,
    amplitude: f64,
    snr: f64,
    seed: u64,
) -> Result<PrecessionTrace> {
    schedule.validate()?;
    if !(snr > 0.0) {
        return Err(Error::config("SNR must be positive"));
    }
    let fs = schedule.sample_rate;
    let spc = schedule.samples_per_cycle();
    let pump = schedule.pump_samples();
    if model.omega_l.abs() / (2.0 * std::f64::consts::PI) > 0.4 * fs {
        return Err(Error::config("Larmor frequency exceeds 0.4x the sample rate"));
    }
    let grid: Vec<f64> = (0..spc - pump).map(|k| k as f64 / fs).collect();
    let series = quantum_evolve(model, &grid)?;
    let tree = SeedTree::new(seed).child("revival-noise");
    let sigma = amplitude / snr;
    let mut samples = Vec::with_capacity(spc * schedule.cycles);
    for i in 0..schedule.cycles {
        let mut rng = tree.stream(i as u64);
        for k in 0..spc {
            let clean = if k < pump { 0.0 } else { amplitude * series.fx[k - pump] / model.f as f64 };
            let n: f64 = StandardNormal.sample(&mut rng);
            samples.push(clean + sigma * n);
        }
    }
    Ok(PrecessionTrace {
        schedule: schedule.clone(),
        samples,
        envelope: "revival".into(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(t_end: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| t_end * k as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn spin_algebra() {
        let ops = spin_ops(3);
        let comm = &ops.fx * &ops.fy - &ops.fy * &ops.fx;
        let i_fz = &ops.fz * Complex64::new(0.0, 1.0);
        assert!((comm - i_fz).norm() < 1e-12);
        let casimir = &ops.fx * &ops.fx + &ops.fy * &ops.fy + &ops.fz * &ops.fz;
        let id = DMatrix::<Complex64>::identity(7, 7) * Complex64::new(12.0, 0.0);
        assert!((casimir - id).norm() < 1e-12);
        let psi = stretched_x(&ops);
        let fx = (psi.adjoint() * &ops.fx * &psi)[(0, 0)].re;
        assert!((fx - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pure_larmor_without_tensor_term() {
        let mut m = SpinModel::illustrative(0.7);
        m.beta = 0.0;
        let ts = grid(2e-3, 801);
        let s = quantum_evolve(&m, &ts).unwrap();
        for (k, &t) in ts.iter().enumerate() {
            let exact = 3.0 * (m.omega_l * t).cos() * (-t * m.damping).exp();
            assert!((s.fx[k] - exact).abs() < 1e-9, "t={t}");
        }
    }

    /// Secular oracle for θ = 0: H = ω F_z + β F_z² is diagonal, so
    /// ⟨F_x⟩ = Re Σ_m c_m c_{m+1} √(...) e^{i(E_m - E_{m+1}) t} in closed form.
    #[test]
    fn theta_zero_matches_diagonal_oracle_and_revives() {
        let m = SpinModel::illustrative(0.0);
        let ops = spin_ops(3);
        let psi = stretched_x(&ops);
        let ts = grid(1.5e-3, 3001);
        let s = quantum_evolve(&m, &ts).unwrap();
        let energy = |mm: f64| m.omega_l * mm + m.beta * mm * mm;
        for (k, &t) in ts.iter().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in 0..6 {
                let (ma, mb) = (3.0 - i as f64, 2.0 - i as f64);
                let me = (12.0 - mb * (mb + 1.0)).sqrt();
                let amp = psi[i].conj() * psi[i + 1] * me;
                acc += amp * Complex64::from_polar(1.0, (energy(ma) - energy(mb)) * t);
            }
            let oracle = acc.re * (-t * m.damping).exp();
            assert!((s.fx[k] - oracle).abs() < 1e-9);
        }
        assert!(s.norm_drift < 1e-10);
        assert!(s.energy_drift < 1e-8);
        let t_rev = secular_revival_time(&m).unwrap();
        assert!((t_rev - 0.5e-3).abs() < 1e-15);
        assert!(revival_contrast(&s, &m, t_rev) > 0.8);
    }

    #[test]
    fn magic_angle_suppresses_revival() {
        let magic = 2.0f64.sqrt().atan();
        let ts = grid(1.5e-3, 6001);
        let m0 = SpinModel::illustrative(0.0);
        let mm = SpinModel::illustrative(magic);
        let c0 = revival_contrast(&quantum_evolve(&m0, &ts).unwrap(), &m0, 0.5e-3);
        let cm = revival_contrast(&quantum_evolve(&mm, &ts).unwrap(), &mm, 0.5e-3);
        assert!(c0 >= 10.0 * cm, "{c0} vs {cm}");
        assert!(secular_revival_time(&mm).is_none());
    }

    #[test]
    fn tilted_axis_revival_follows_secular_rate() {
        let mut m = SpinModel::illustrative(30f64.to_radians());
        m.omega_l = 2.0 * PI * 1e6;
        m.damping = 0.0;
        let t_rev = secular_revival_time(&m).unwrap();
        let ts = grid(1.4 * t_rev, 40001);
        let s = quantum_evolve(&m, &ts).unwrap();
        let (mut best, mut t_best) = (0.0, 0.0);
        for (k, &t) in ts.iter().enumerate() {
            let e = s.fx[k].hypot(s.fy[k]);
            if t > 0.6 * t_rev && e > best {
                best = e;
                t_best = t;
            }
        }
        assert!(((t_best - t_rev) / t_rev).abs() < 0.02, "{t_best} vs {t_rev}");
    }

    #[test]
    fn beta_zero_is_independent_of_theta() {
        let sched = PumpProbeSchedule::with_period(2e-3, 1);
        let mut a = SpinModel::illustrative(0.0);
        a.beta = 0.0;
        let mut b = a.clone();
        b.theta = 0.95;
        let ta = revival_trace(&a, &sched, 1.0, 15.0, 4).unwrap();
        let tb = revival_trace(&b, &sched, 1.0, 15.0, 4).unwrap();
        let diff = ta.samples.iter().zip(&tb.samples).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }
}
