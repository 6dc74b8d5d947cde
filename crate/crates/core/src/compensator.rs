//! Field-model estimation from a Larmor-frequency timeline, compensation
//! plans, and the simulate→measure→compensate loop.
//!
//! Each timeline entry is the Lorentzian center of one probe window, which
//! is a weighted average of the instantaneous frequency over that window.
//! The design matrix uses the same weighting (see [`WindowResponse`]) so
//! that fitted amplitudes and phases refer to the field itself rather than
//! to its window-smoothed image.

use std::f64::consts::PI;

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldscape::{apply, CompensationPlan, EddyBranch, FieldTimeline, Harmonic};
use crate::kv::KvWriter;
use crate::physconst::AtomSpecies;
use crate::spectra::{field_spectrum, nu_timeline, AnalysisConfig, FieldSpectrum, NuTimeline};
use crate::spinsim::{synth_trace, PumpProbeSchedule, SynthConfig};

const MAX_CONDITION: f64 = 1e8;

/// Weight exponent κ. Matches the Lorentzian-center response to line
/// harmonics up to 420 Hz within 0.01 rad of phase and 0.5% of amplitude.
pub const WINDOW_WEIGHT_EXPONENT: f64 = 1.5;

/// Weighting of the instantaneous frequency inside one probe window.
///
/// The frequency estimate is modelled as the slope of a weighted linear fit
/// to the phase, with weights W(t) = e^{-κt/τ}. A perturbation δν(s) then
/// enters as ∫K(s)δν(s)ds with K(s) = Σ_{t_j>s} W_j(t_j - t̄)/D, which
/// integrates to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowResponse {
    /// Offset of the probe window from the cycle start (s).
    pub offset: f64,
    /// Interval midpoints relative to the window start (s).
    pub s: Vec<f64>,
    /// Kernel mass per interval; sums to 1.
    pub k: Vec<f64>,
}

impl WindowResponse {
    pub fn new(schedule: &PumpProbeSchedule, decay_tau: f64) -> Result<Self> {
        schedule.validate()?;
        if !(decay_tau > 0.0) {
            return Err(Error::config("window decay time must be positive"));
        }
        let n = schedule.probe_samples();
        let dt = 1.0 / schedule.sample_rate;
        let t: Vec<f64> = (0..n).map(|j| j as f64 * dt).collect();
        let w: Vec<f64> = t.iter().map(|t| (-WINDOW_WEIGHT_EXPONENT * t / decay_tau).exp()).collect();
        let sw: f64 = w.iter().sum();
        let tbar = w.iter().zip(&t).map(|(w, t)| w * t).sum::<f64>() / sw;
        let d: f64 = w.iter().zip(&t).map(|(w, t)| w * (t - tbar).powi(2)).sum();
        let mut k = vec![0.0; n.saturating_sub(1)];
        let mut acc = 0.0;
        for m in (0..n.saturating_sub(1)).rev() {
            acc += w[m + 1] * (t[m + 1] - tbar);
            k[m] = acc * dt / d;
        }
        Ok(WindowResponse {
            offset: schedule.pump_samples() as f64 * dt,
            s: (0..k.len()).map(|m| (m as f64 + 0.5) * dt).collect(),
            k,
        })
    }

    /// Σ K(s)·e^{i2πfs}
    pub fn harmonic(&self, f: f64) -> Complex64 {
        self.s
            .iter()
            .zip(&self.k)
            .map(|(s, k)| Complex64::from_polar(*k, 2.0 * PI * f * s))
            .sum()
    }

    /// Σ K(s)·e^{-s/τ}
    pub fn exponential(&self, tau: f64) -> f64 {
        self.s.iter().zip(&self.k).map(|(s, k)| k * (-s / tau).exp()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Hz
    pub harmonics: Vec<f64>,
    pub fit_eddy: bool,
    /// s
    pub tau_min: f64,
    /// s
    pub tau_max: f64,
    pub tau_grid: usize,
    pub min_windows: usize,
    /// Hz
    pub line_frequency: f64,
    /// Fit the harmonics but compensate only the eddy transient.
    pub eddy_only: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            harmonics: vec![60.0],
            fit_eddy: true,
            tau_min: 5e-3,
            tau_max: 100e-3,
            tau_grid: 40,
            min_windows: 50,
            line_frequency: 60.0,
            eddy_only: false,
        }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig {
            harmonics: vec![60.0, 180.0, 300.0, 420.0],
            ..ModelConfig::default()
        }
    }
}

/// Fitted harmonic in frequency units: s·sin(2πft) + c·cos(2πft) (Hz).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarmonicFit {
    pub frequency: f64,
    pub sin: f64,
    pub cos: f64,
    /// Std of the amplitude (Hz).
    pub sigma_amplitude: f64,
}

impl HarmonicFit {
    /// Hz
    pub fn amplitude(&self) -> f64 {
        self.sin.hypot(self.cos)
    }

    /// φ in amplitude·sin(2πft + φ).
    pub fn phase(&self) -> f64 {
        self.cos.atan2(self.sin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EddyFit {
    /// Hz
    pub amplitude: f64,
    pub sigma_amplitude: f64,
    /// s
    pub tau: f64,
    pub sigma_tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Hz
    pub nu0: f64,
    pub sigma_nu0: f64,
    pub eddy: Option<EddyFit>,
    pub harmonics: Vec<HarmonicFit>,
    pub rss: f64,
    pub windows: usize,
    pub condition: f64,
}

impl FieldParams {
    pub fn harmonic(&self, f: f64) -> Option<&HarmonicFit> {
        self.harmonics.iter().find(|h| (h.frequency - f).abs() < 1e-9)
    }

    /// Noise-free model ν(t) at the true time t (not window-averaged).
    pub fn nu_at(&self, t: f64) -> f64 {
        let mut v = self.nu0;
        if let Some(e) = self.eddy {
            v += e.amplitude * (-t / e.tau).exp();
        }
        for h in &self.harmonics {
            let (s, c) = (2.0 * PI * h.frequency * t).sin_cos();
            v += h.sin * s + h.cos * c;
        }
        v
    }
}

struct LinearFit {
    coef: Vec<f64>,
    cov: DMatrix<f64>,
    rss: f64,
    condition: f64,
}

fn column_names(config: &ModelConfig, eddy: bool) -> Vec<String> {
    let mut names = vec!["offset".to_string()];
    if eddy {
        names.push("eddy".into());
    }
    for f in &config.harmonics {
        names.push(format!("{f} Hz sine"));
        names.push(format!("{f} Hz cosine"));
    }
    names
}

fn design(t: &[f64], resp: &WindowResponse, config: &ModelConfig, tau: Option<f64>) -> DMatrix<f64> {
    let cols = 1 + tau.is_some() as usize + 2 * config.harmonics.len();
    let resp_h: Vec<Complex64> = config.harmonics.iter().map(|f| resp.harmonic(*f)).collect();
    let resp_e = tau.map(|tau| resp.exponential(tau));
    DMatrix::from_fn(t.len(), cols, |i, j| {
        let t0 = t[i] + resp.offset;
        if j == 0 {
            return 1.0;
        }
        let mut j = j - 1;
        if let (Some(tau), Some(re)) = (tau, resp_e) {
            if j == 0 {
                return (-t0 / tau).exp() * re;
            }
            j -= 1;
        }
        let (f, h) = (config.harmonics[j / 2], resp_h[j / 2]);
        let z = Complex64::from_polar(1.0, 2.0 * PI * f * t0) * h;
        if j % 2 == 0 { z.im } else { z.re }
    })
}

fn solve_linear(a: &DMatrix<f64>, y: &[f64], names: &[String]) -> Result<LinearFit> {
    let (n, p) = a.shape();
    let norms: Vec<f64> = (0..p).map(|j| a.column(j).norm()).collect();
    if let Some(j) = norms.iter().position(|v| !(*v > 0.0)) {
        return Err(Error::numerical(format!("degenerate design: the {} column vanishes", names[j])));
    }
    let mut scaled = a.clone();
    for (j, nrm) in norms.iter().enumerate() {
        scaled.column_mut(j).scale_mut(1.0 / nrm);
    }
    let svd = scaled.clone().svd(true, true);
    let sv = &svd.singular_values;
    let smax = sv.max();
    let (jmin, smin) = sv.argmin();
    let condition = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if condition > MAX_CONDITION {
        let v_t = svd.v_t.as_ref().expect("requested");
        let row = v_t.row(jmin);
        let (worst, _) = row.iter().enumerate().fold((0, 0.0), |acc, (j, v)| if v.abs() > acc.1 { (j, v.abs()) } else { acc });
        return Err(Error::numerical(format!(
            "ill-conditioned field model (condition {condition:.3e}); degenerate term: {}",
            names[worst]
        )));
    }
    let yv = DVector::from_column_slice(y);
    let x = svd.solve(&yv, 0.0).map_err(|e| Error::numerical(e.to_string()))?;
    let resid = &scaled * &x - &yv;
    let rss = resid.norm_squared();
    let v = svd.v_t.as_ref().expect("requested").transpose();
    let mut inv = DMatrix::zeros(p, p);
    for k in 0..p {
        let vk = v.column(k);
        inv += (vk * vk.transpose()) / (sv[k] * sv[k]);
    }
    let s2 = if n > p { rss / (n - p) as f64 } else { 0.0 };
    let mut cov = inv * s2;
    for i in 0..p {
        for j in 0..p {
            cov[(i, j)] /= norms[i] * norms[j];
        }
    }
    Ok(LinearFit {
        coef: (0..p).map(|j| x[j] / norms[j]).collect(),
        cov,
        rss,
        condition,
    })
}

fn golden_min(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() < 1e-13 * (a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

/// Separable least squares for ν(t) = ν₀ + A_e e^{-t/τ_e} + Σ harmonics,
/// with τ_e found by a log-grid scan and golden-section refinement.
pub fn estimate_params(timeline: &NuTimeline, resp: &WindowResponse, config: &ModelConfig) -> Result<FieldParams> {
    let valid: Vec<_> = timeline.entries.iter().filter(|e| e.valid && e.nu.is_finite()).collect();
    if valid.len() < config.min_windows {
        return Err(Error::domain(format!(
            "field-model fit needs >= {} valid windows, got {}",
            config.min_windows,
            valid.len()
        )));
    }
    let t: Vec<f64> = valid.iter().map(|e| e.t).collect();
    let y: Vec<f64> = valid.iter().map(|e| e.nu).collect();
    let span = t[t.len() - 1] - t[0];
    if span < 3.0 / config.line_frequency {
        return Err(Error::domain(format!(
            "timeline spans {span} s, fewer than 3 line periods"
        )));
    }
    if config.fit_eddy && !(config.tau_min > 0.0 && config.tau_max > config.tau_min && config.tau_grid >= 3) {
        return Err(Error::config("eddy search needs 0 < tau_min < tau_max and >= 3 grid points"));
    }
    let names = column_names(config, config.fit_eddy);
    let rss_at = |tau: f64| -> f64 {
        solve_linear(&design(&t, resp, config, Some(tau)), &y, &names)
            .map(|f| f.rss)
            .unwrap_or(f64::INFINITY)
    };
    let (tau, fit) = if config.fit_eddy {
        let (la, lb) = (config.tau_min.ln(), config.tau_max.ln());
        let grid: Vec<f64> = (0..config.tau_grid)
            .map(|i| (la + (lb - la) * i as f64 / (config.tau_grid - 1) as f64).exp())
            .collect();
        let rss: Vec<f64> = grid.iter().map(|tau| rss_at(*tau)).collect();
        let best = (0..grid.len()).fold(0, |b, i| if rss[i] < rss[b] { i } else { b });
        if !rss[best].is_finite() {
            // surface the conditioning error at a representative τ
            solve_linear(&design(&t, resp, config, Some(grid[best])), &y, &names)?;
        }
        let lo = grid[best.saturating_sub(1)].ln();
        let hi = grid[(best + 1).min(grid.len() - 1)].ln();
        let tau = golden_min(lo, hi, |lt| rss_at(lt.exp())).exp();
        (Some(tau), solve_linear(&design(&t, resp, config, Some(tau)), &y, &names)?)
    } else {
        (None, solve_linear(&design(&t, resp, config, None), &y, &names)?)
    };
    let n = y.len();
    let p = fit.coef.len() + tau.is_some() as usize;
    let s2 = fit.rss / (n.saturating_sub(p)).max(1) as f64;
    let sd = |i: usize| fit.cov[(i, i)].max(0.0).sqrt();
    let eddy = tau.map(|tau| {
        let h = 1e-3 * tau;
        let d2 = (rss_at(tau + h) - 2.0 * fit.rss + rss_at(tau - h)) / (h * h);
        EddyFit {
            amplitude: fit.coef[1],
            sigma_amplitude: sd(1),
            tau,
            sigma_tau: if d2 > 0.0 { (2.0 * s2 / d2).sqrt() } else { f64::INFINITY },
        }
    });
    let base = 1 + tau.is_some() as usize;
    let harmonics = config
        .harmonics
        .iter()
        .enumerate()
        .map(|(k, f)| {
            let (is, ic) = (base + 2 * k, base + 2 * k + 1);
            let (s, c) = (fit.coef[is], fit.coef[ic]);
            let a = s.hypot(c);
            let var = if a > 0.0 {
                (s * s * fit.cov[(is, is)] + c * c * fit.cov[(ic, ic)] + 2.0 * s * c * fit.cov[(is, ic)]) / (a * a)
            } else {
                0.5 * (fit.cov[(is, is)] + fit.cov[(ic, ic)])
            };
            HarmonicFit {
                frequency: *f,
                sin: s,
                cos: c,
                sigma_amplitude: var.max(0.0).sqrt(),
            }
        })
        .collect();
    Ok(FieldParams {
        nu0: fit.coef[0],
        sigma_nu0: sd(0),
        eddy,
        harmonics,
        rss: fit.rss,
        windows: n,
        condition: fit.condition,
    })
}

/// Coil waveform opposing the fitted eddy and harmonics.
pub fn make_plan(params: &FieldParams, bandwidth: f64, species: &AtomSpecies, line_frequency: f64) -> Result<CompensationPlan> {
    let g = species.gyromagnetic_factor;
    let eddies = params
        .eddy
        .iter()
        .filter(|e| e.amplitude != 0.0)
        .map(|e| EddyBranch {
            step_amplitude: e.amplitude / g,
            tau: e.tau,
        })
        .collect();
    let harmonics = params
        .harmonics
        .iter()
        .filter(|h| h.amplitude() > 0.0)
        .map(|h| Harmonic {
            frequency: h.frequency,
            amplitude: h.amplitude() / g,
            phase: h.phase() + PI,
        })
        .collect();
    CompensationPlan::within_bandwidth(eddies, harmonics, bandwidth, line_frequency)
}

/// Everything a closed-loop run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopScenario {
    pub truth: FieldTimeline,
    pub schedule: PumpProbeSchedule,
    pub synth: SynthConfig,
    pub analysis: AnalysisConfig,
    pub model: ModelConfig,
    /// Hz
    pub bandwidth: f64,
    pub species: AtomSpecies,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Suppression {
    pub frequency: f64,
    /// G
    pub pre: f64,
    /// G
    pub post: f64,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct CompensationReport {
    /// Hz, over all valid windows
    pub pre_std: f64,
    pub post_std: f64,
    /// Std of every measurement, uncompensated first.
    pub std_history: Vec<f64>,
    pub suppression: Vec<Suppression>,
    /// First-iteration eddy fit.
    pub eddy: Option<EddyFit>,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub plan: CompensationPlan,
    pub fits: Vec<FieldParams>,
    pub pre_timeline: NuTimeline,
    pub post_timeline: NuTimeline,
    pub pre_spectrum: Option<FieldSpectrum>,
    pub post_spectrum: Option<FieldSpectrum>,
}

pub fn timeline_std(tl: &NuTimeline, t_min: f64) -> f64 {
    let v: Vec<f64> = tl.entries.iter().filter(|e| e.valid && e.t >= t_min).map(|e| e.nu).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
}

fn measure(s: &LoopScenario, truth: &FieldTimeline, iteration: usize) -> Result<NuTimeline> {
    let mut cfg = s.synth.clone();
    // fresh shot noise for each measurement, reproducible from the root seed
    cfg.seed = crate::rng::SeedTree::new(s.synth.seed)
        .child_indexed("loop-measurement", iteration as u64)
        .fingerprint();
    let trace = synth_trace(truth, &s.schedule, &cfg, &s.species)?;
    nu_timeline(&trace, &s.analysis)
}

/// Measures, fits and compensates `iterations` times, then measures the
/// final compensated field.
pub fn closed_loop(s: &LoopScenario, iterations: usize) -> Result<CompensationReport> {
    let resp = WindowResponse::new(&s.schedule, s.synth.decay_tau)?;
    let mut plan = CompensationPlan::empty(s.bandwidth, s.model.line_frequency);
    let pre_timeline = measure(s, &s.truth, 0)?;
    let mut current = pre_timeline.clone();
    let mut history = vec![timeline_std(&current, 0.0)];
    let mut fits = Vec::new();
    let (mut converged, mut diverged) = (false, false);
    let mut done = 0;
    for it in 0..iterations {
        let params = estimate_params(&current, &resp, &s.model)?;
        let mut step = make_plan(&params, s.bandwidth, &s.species, s.model.line_frequency)?;
        if s.model.eddy_only {
            step.harmonics.clear();
        }
        plan = plan.combine(&step);
        fits.push(params);
        current = measure(s, &apply(&s.truth, &plan), it + 1)?;
        history.push(timeline_std(&current, 0.0));
        done = it + 1;
        let k = history.len();
        info!("compensation iteration {done}: std {:.3} Hz", history[k - 1]);
        if k >= 3 {
            if history[k - 1] > history[k - 2] && history[k - 2] > history[k - 3] {
                warn!("compensation diverging; aborting after {done} iterations");
                diverged = true;
                break;
            }
            if history[k - 2] - history[k - 1] < 0.05 * history[k - 2] {
                converged = true;
                break;
            }
        }
    }
    let spectrum = |tl: &NuTimeline| match field_spectrum(tl, &s.species) {
        Ok(sp) => Some(sp),
        Err(e) => {
            warn!("field spectrum unavailable: {e}");
            None
        }
    };
    let pre_spectrum = spectrum(&pre_timeline);
    let post_spectrum = spectrum(&current);
    let mut freqs: Vec<f64> = s.model.harmonics.clone();
    for h in &s.truth.harmonics {
        if !freqs.iter().any(|f| (f - h.frequency).abs() < 1e-9) {
            freqs.push(h.frequency);
        }
    }
    freqs.sort_by(f64::total_cmp);
    let suppression = match (&pre_spectrum, &post_spectrum) {
        (Some(a), Some(b)) => freqs
            .iter()
            .filter(|f| **f <= *a.freq.last().unwrap_or(&0.0))
            .map(|&f| {
                let (pre, post) = (a.at(f), b.at(f));
                Suppression {
                    frequency: f,
                    pre,
                    post,
                    factor: if post > 0.0 { pre / post } else { f64::INFINITY },
                }
            })
            .collect(),
        _ => Vec::new(),
    };
    Ok(CompensationReport {
        pre_std: history[0],
        post_std: history[history.len() - 1],
        std_history: history,
        suppression,
        eddy: fits.first().and_then(|f| f.eddy),
        iterations: done,
        converged,
        diverged,
        plan,
        fits,
        pre_timeline,
        post_timeline: current,
        pre_spectrum,
        post_spectrum,
    })
}

impl CompensationReport {
    pub fn suppression_at(&self, f: f64) -> Option<&Suppression> {
        self.suppression.iter().find(|s| (s.frequency - f).abs() < 1e-9)
    }

    pub fn to_kv(&self, species: &AtomSpecies) -> String {
        let g = species.gyromagnetic_factor;
        let mut w = KvWriter::new();
        w.comment("compensation report; frequencies in Hz, fields in gauss, times in seconds");
        w.f64("pre_std_hz", self.pre_std);
        w.f64("post_std_hz", self.post_std);
        w.f64("post_std_g", self.post_std / g);
        w.f64("post_std_after_25ms_hz", timeline_std(&self.post_timeline, 25e-3));
        w.u64("iterations", self.iterations as u64);
        w.bool("converged", self.converged);
        w.bool("diverged", self.diverged);
        for (i, s) in self.std_history.iter().enumerate() {
            w.f64(&format!("measurement{i}_std_hz"), *s);
        }
        if let Some(e) = &self.eddy {
            w.f64("eddy_amplitude_hz", e.amplitude);
            w.f64("eddy_amplitude_sigma_hz", e.sigma_amplitude);
            w.f64("eddy_amplitude_g", e.amplitude / g);
            w.f64("eddy_tau_s", e.tau);
            w.f64("eddy_tau_sigma_s", e.sigma_tau);
        }
        for s in &self.suppression {
            let f = s.frequency;
            w.f64(&format!("line_{f}hz_pre_g"), s.pre);
            w.f64(&format!("line_{f}hz_post_g"), s.post);
            w.f64(&format!("line_{f}hz_suppression"), s.factor);
        }
        w.finish()
    }
}
