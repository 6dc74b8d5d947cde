//! Per-cycle spectral analysis: windowing, power spectra, Lorentzian and
//! time-domain fits, the Larmor-frequency timeline, field spectra and the
//! 2-D raster view of a trace.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt::Write as _;

use log::warn;
use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::export::{pgm_bytes, scale_to_gray};
use crate::fit::{first_crossing, fit_exponential, levenberg_marquardt, LmOptions};
use crate::kv::format_f64;
use crate::physconst::{field_from_frequency, AtomSpecies};
use crate::spinsim::PrecessionTrace;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft_in_place(data: &mut [Complex64]) {
    let plan = PLANNER.with(|p| p.borrow_mut().plan_fft_forward(data.len()));
    plan.process(data);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Rectangular,
    Hann,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConfig {
    pub zero_pad: usize,
    pub window: WindowKind,
    /// Fit region half-width in units of the initial half-width guess.
    pub region_widths: f64,
    /// Required peak-to-median power ratio.
    pub peak_threshold: f64,
    pub max_iterations: usize,
    pub xtol: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            zero_pad: 8,
            window: WindowKind::Rectangular,
            region_widths: 10.0,
            peak_threshold: 3.0,
            max_iterations: 100,
            xtol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment<'a> {
    pub index: usize,
    /// Cycle start time (s).
    pub t_start: f64,
    pub samples: &'a [f64],
}

/// One probe window per cycle, starting after the pump.
pub fn window_slice(trace: &PrecessionTrace) -> Result<Vec<Segment<'_>>> {
    trace.validate()?;
    let s = &trace.schedule;
    let spc = s.samples_per_cycle();
    let pump = s.pump_samples();
    let probe = s.probe_samples();
    Ok((0..s.cycles)
        .map(|i| Segment {
            index: i,
            t_start: s.cycle_start(i),
            samples: &trace.samples[i * spc + pump..i * spc + pump + probe],
        })
        .collect())
}

/// One-sided power spectrum: bins k = 0..=M/2 of an M-point DFT with the
/// two mirror halves folded together, so Σ power = M·Σ v² for the
/// mean-subtracted, windowed segment.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freq: Vec<f64>,
    pub power: Vec<f64>,
    pub df: f64,
    pub n_fft: usize,
    pub n_samples: usize,
    pub zero_pad: usize,
}

pub fn power_spectrum(segment: &[f64], sample_rate: f64, zero_pad: usize, window: WindowKind) -> Result<Spectrum> {
    let n = segment.len();
    if n < 64 {
        return Err(Error::domain(format!("power spectrum needs >= 64 samples, got {n}")));
    }
    if zero_pad == 0 {
        return Err(Error::config("zero-pad factor must be >= 1"));
    }
    let mean = segment.iter().sum::<f64>() / n as f64;
    let m = n * zero_pad;
    let mut buf = vec![Complex64::new(0.0, 0.0); m];
    for (k, v) in segment.iter().enumerate() {
        let w = match window {
            WindowKind::Rectangular => 1.0,
            WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos(),
        };
        buf[k] = Complex64::new((v - mean) * w, 0.0);
    }
    fft_in_place(&mut buf);
    let half = m / 2;
    let df = sample_rate / m as f64;
    let mut power = Vec::with_capacity(half + 1);
    for k in 0..=half {
        let p = if k == 0 || (m % 2 == 0 && k == half) {
            buf[k].norm_sqr()
        } else {
            buf[k].norm_sqr() + buf[m - k].norm_sqr()
        };
        power.push(p);
    }
    Ok(Spectrum {
        freq: (0..=half).map(|k| k as f64 * df).collect(),
        power,
        df,
        n_fft: m,
        n_samples: n,
        zero_pad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralFit {
    /// Hz
    pub center: f64,
    /// Hz
    pub half_width: f64,
    pub amplitude: f64,
    pub baseline: f64,
    pub residual_rms: f64,
    pub sigma_center: f64,
    pub sigma_width: f64,
    pub iterations: usize,
    pub converged: bool,
    pub valid: bool,
    pub window_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FitOutcome {
    Fit(SpectralFit),
    NoSignal { peak: f64, median: f64 },
}

impl FitOutcome {
    pub fn fit(&self) -> Option<&SpectralFit> {
        match self {
            FitOutcome::Fit(f) => Some(f),
            FitOutcome::NoSignal { .. } => None,
        }
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Peak bin (excluding DC) refined by a parabola through its neighbours:
/// (bin index, interpolated frequency, interpolated power).
fn interpolated_peak(sp: &Spectrum) -> (usize, f64, f64) {
    let p = &sp.power;
    let mut k = 1;
    for i in 1..p.len() {
        if p[i] > p[k] {
            k = i;
        }
    }
    if k + 1 >= p.len() {
        return (k, sp.freq[k], p[k]);
    }
    let (a, b, c) = (p[k - 1], p[k], p[k + 1]);
    let denom = a - 2.0 * b + c;
    if denom >= 0.0 {
        return (k, sp.freq[k], b);
    }
    let d = 0.5 * (a - c) / denom;
    (k, sp.freq[k] + d * sp.df, b - 0.25 * (a - c) * d)
}

/// Fits a/(1+((ν-ν_L)/w)²)+b around the strongest peak.
pub fn lorentzian_fit(sp: &Spectrum, config: &AnalysisConfig, window_index: usize) -> FitOutcome {
    let med = median(&sp.power[1..]);
    let (k, nu0, peak) = interpolated_peak(sp);
    if !(peak >= config.peak_threshold * med) || peak <= 0.0 {
        return FitOutcome::NoSignal { peak, median: med };
    }
    // half width at half maximum above the median floor
    let half = med + 0.5 * (peak - med);
    let crossing = |dir: i64| -> f64 {
        let mut i = k as i64;
        while i + dir >= 1 && ((i + dir) as usize) < sp.power.len() {
            let j = (i + dir) as usize;
            if sp.power[j] < half {
                let (p_in, p_out) = (sp.power[i as usize], sp.power[j]);
                let frac = (p_in - half) / (p_in - p_out);
                return ((i as f64 + dir as f64 * frac) - k as f64).abs() * sp.df;
            }
            i += dir;
        }
        f64::NAN
    };
    let (wl, wr) = (crossing(-1), crossing(1));
    let w0 = match (wl.is_finite(), wr.is_finite()) {
        (true, true) => 0.5 * (wl + wr),
        (true, false) => wl,
        (false, true) => wr,
        _ => 2.0 * sp.df,
    }
    .max(sp.df);
    let lo = ((nu0 - config.region_widths * w0) / sp.df).floor().max(1.0) as usize;
    let hi = (((nu0 + config.region_widths * w0) / sp.df).ceil() as usize).min(sp.power.len() - 1);
    let xs = &sp.freq[lo..=hi];
    let ys = &sp.power[lo..=hi];
    let n = xs.len();
    let opts = LmOptions {
        max_iterations: config.max_iterations,
        xtol: config.xtol,
        ..LmOptions::default()
    };
    let res = levenberg_marquardt(&[peak - med, nu0, w0, med], &[peak, sp.df, sp.df, peak], opts, |p| {
        let mut r = Vec::with_capacity(n);
        let mut j = DMatrix::zeros(n, 4);
        for (i, (&x, &y)) in xs.iter().zip(ys).enumerate() {
            let u = (x - p[1]) / p[2];
            let d = 1.0 / (1.0 + u * u);
            r.push(p[0] * d + p[3] - y);
            j[(i, 0)] = d;
            j[(i, 1)] = p[0] * d * d * 2.0 * u / p[2];
            j[(i, 2)] = p[0] * d * d * 2.0 * u * u / p[2];
            j[(i, 3)] = 1.0;
        }
        (r, j)
    });
    let (a, center, w, b) = (res.params[0], res.params[1], res.params[2].abs(), res.params[3]);
    // Per-bin power noise from the floor rather than from the residuals: the
    // residuals are dominated by the non-Lorentzian shape of a windowed damped
    // sine and would not shrink with the noise. A bin holding signal power S
    // over complex noise of mean power N has variance N² + 2SN; the floor
    // median is N·ln 2.
    let floor = med / std::f64::consts::LN_2;
    let mut weighted = res.jacobian.clone();
    for (i, &x) in xs.iter().enumerate() {
        let u = (x - center) / w;
        let s = (a / (1.0 + u * u)).max(0.0);
        let sd = (floor * floor + 2.0 * s * floor).sqrt();
        weighted.row_mut(i).scale_mut(1.0 / sd);
    }
    let cov = (floor > 0.0).then(|| (weighted.transpose() * &weighted).try_inverse()).flatten();
    // zero padding makes neighbouring bins correlated: n/pad independent points
    let inflate = sp.zero_pad as f64;
    let sig = |i: usize| cov.as_ref().map(|c| (c[(i, i)] * inflate).max(0.0).sqrt()).unwrap_or(f64::NAN);
    let residual_rms = (res.rss / n as f64).sqrt();
    let nyquist = sp.freq[sp.freq.len() - 1];
    let valid = res.converged
        && w > 0.0
        && center > 0.0
        && center < nyquist
        && residual_rms <= 0.5 * peak
        && sig(1).is_finite()
        && sig(1) > 0.0;
    FitOutcome::Fit(SpectralFit {
        center,
        half_width: w,
        amplitude: a,
        baseline: b,
        residual_rms,
        sigma_center: sig(1),
        sigma_width: sig(2),
        iterations: res.iterations,
        converged: res.converged,
        valid,
        window_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DampedSineFit {
    pub amplitude: f64,
    /// s
    pub tau: f64,
    /// Hz
    pub nu: f64,
    /// rad
    pub phase: f64,
    pub sigma_nu: f64,
    pub sigma_tau: f64,
    pub residual_rms: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Time-domain least squares of A·e^{-t/τ}·sin(2πνt + φ), t = 0 at the first sample.
pub fn damped_sine_fit(segment: &[f64], sample_rate: f64, config: &AnalysisConfig) -> Result<DampedSineFit> {
    let sp = power_spectrum(segment, sample_rate, config.zero_pad, config.window)?;
    let (nu0, w0) = match lorentzian_fit(&sp, config, 0) {
        FitOutcome::Fit(f) if f.half_width.is_finite() && f.half_width > 0.0 => (f.center, f.half_width),
        FitOutcome::Fit(_) => return Err(Error::numerical("no usable spectral guess for the time-domain fit")),
        FitOutcome::NoSignal { .. } => return Err(Error::numerical("no signal above threshold")),
    };
    let dt = 1.0 / sample_rate;
    let n = segment.len();
    let tau0 = 1.0 / (2.0 * PI * w0);
    // linear amplitudes at the guessed (ν, τ)
    let (mut ss, mut sc, mut cc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (k, &y) in segment.iter().enumerate() {
        let t = k as f64 * dt;
        let e = (-t / tau0).exp();
        let (s, c) = (2.0 * PI * nu0 * t).sin_cos();
        let (s, c) = (e * s, e * c);
        ss += s * s;
        sc += s * c;
        cc += c * c;
        ys += y * s;
        yc += y * c;
    }
    let det = ss * cc - sc * sc;
    let (c1, c2) = if det.abs() > 0.0 {
        ((ys * cc - yc * sc) / det, (yc * ss - ys * sc) / det)
    } else {
        (1.0, 0.0)
    };
    let a0 = c1.hypot(c2);
    let phi0 = c2.atan2(c1);
    let opts = LmOptions {
        max_iterations: config.max_iterations,
        xtol: config.xtol,
        ..LmOptions::default()
    };
    let res = levenberg_marquardt(&[a0, tau0, nu0, phi0], &[a0.max(1e-300), tau0, 1.0, 1.0], opts, |p| {
        let mut r = Vec::with_capacity(n);
        let mut j = DMatrix::zeros(n, 4);
        for (k, &y) in segment.iter().enumerate() {
            let t = k as f64 * dt;
            let e = (-t / p[1]).exp();
            let arg = 2.0 * PI * p[2] * t + p[3];
            let (s, c) = arg.sin_cos();
            r.push(p[0] * e * s - y);
            j[(k, 0)] = e * s;
            j[(k, 1)] = p[0] * e * s * t / (p[1] * p[1]);
            j[(k, 2)] = p[0] * e * c * 2.0 * PI * t;
            j[(k, 3)] = p[0] * e * c;
        }
        (r, j)
    });
    let cov = res.covariance();
    let sig = |i: usize| cov.as_ref().map(|c| c[(i, i)].max(0.0).sqrt()).unwrap_or(f64::NAN);
    let (mut a, mut phase) = (res.params[0], res.params[3]);
    if a < 0.0 {
        a = -a;
        phase += PI;
    }
    phase = (phase + PI).rem_euclid(2.0 * PI) - PI;
    Ok(DampedSineFit {
        amplitude: a,
        tau: res.params[1],
        nu: res.params[2],
        phase,
        sigma_nu: sig(2),
        sigma_tau: sig(1),
        residual_rms: (res.rss / n as f64).sqrt(),
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Signal envelope measured window by window with the time-domain fit.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeDecay {
    /// Cycle start times (s).
    pub t: Vec<f64>,
    /// Fitted initial amplitude per window (V); zero where no peak was found.
    pub amplitude: Vec<f64>,
    /// First drop to 1/e of the first window's amplitude (s after the first window).
    pub t_1e: Option<f64>,
    /// Least-squares A·e^{-t/τ} time constant (s).
    pub tau_fit: Option<f64>,
}

impl EnvelopeDecay {
    /// Amplitude relative to the first window at `dt` after it, interpolated.
    pub fn relative_at(&self, dt: f64) -> Option<f64> {
        let a0 = *self.amplitude.first()?;
        let t = self.t.iter().map(|t| t - self.t[0]).collect::<Vec<_>>();
        let k = t.partition_point(|x| *x <= dt);
        if k == 0 || k == t.len() {
            return None;
        }
        let f = (dt - t[k - 1]) / (t[k] - t[k - 1]);
        Some((self.amplitude[k - 1] + f * (self.amplitude[k] - self.amplitude[k - 1])) / a0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,amplitude_v\n");
        for (t, a) in self.t.iter().zip(&self.amplitude) {
            let _ = writeln!(out, "{},{}", format_f64(*t), format_f64(*a));
        }
        out
    }
}

pub fn envelope_decay(trace: &PrecessionTrace, config: &AnalysisConfig) -> Result<EnvelopeDecay> {
    let fs = trace.schedule.sample_rate;
    let segments = window_slice(trace)?;
    if segments.len() < 2 {
        return Err(Error::config("envelope decay needs at least two windows"));
    }
    let amplitude: Vec<f64> = segments
        .par_iter()
        .map(|s| damped_sine_fit(s.samples, fs, config).map(|f| f.amplitude).unwrap_or(0.0))
        .collect();
    let t: Vec<f64> = segments.iter().map(|s| s.t_start).collect();
    let rel: Vec<f64> = t.iter().map(|x| x - t[0]).collect();
    Ok(EnvelopeDecay {
        t_1e: first_crossing(&rel, &amplitude, (-1.0f64).exp()),
        tau_fit: fit_exponential(&rel, &amplitude).map(|(_, tau)| tau),
        t,
        amplitude,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuEntry {
    /// Cycle start time (s).
    pub t: f64,
    /// Hz
    pub nu: f64,
    /// Hz
    pub sigma: f64,
    pub valid: bool,
    pub half_width: f64,
    pub no_signal: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NuTimeline {
    pub entries: Vec<NuEntry>,
}

impl NuTimeline {
    pub fn valid_count(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_s,nu_hz,sigma_hz,valid\n");
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                format_f64(e.t),
                format_f64(e.nu),
                format_f64(e.sigma),
                if e.valid { 1 } else { 0 }
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("t_s") {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(Error::parse(line_no, format!("expected 4 columns, got {}", cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                match s.trim() {
                    "nan" => Ok(f64::NAN),
                    "inf" => Ok(f64::INFINITY),
                    v => v.parse().map_err(|_| Error::parse(line_no, format!("not a number: `{v}`"))),
                }
            };
            entries.push(NuEntry {
                t: num(cols[0])?,
                nu: num(cols[1])?,
                sigma: num(cols[2])?,
                valid: cols[3].trim() == "1",
                half_width: f64::NAN,
                no_signal: false,
            });
        }
        Ok(NuTimeline { entries })
    }
}

/// Lorentzian center of every probe window; windows that fail carry flags.
pub fn nu_timeline(trace: &PrecessionTrace, config: &AnalysisConfig) -> Result<NuTimeline> {
    let segs = window_slice(trace)?;
    let fs = trace.schedule.sample_rate;
    let entries: Vec<Result<NuEntry>> = segs
        .par_iter()
        .map(|seg| {
            let sp = power_spectrum(seg.samples, fs, config.zero_pad, config.window)?;
            Ok(match lorentzian_fit(&sp, config, seg.index) {
                FitOutcome::Fit(f) => NuEntry {
                    t: seg.t_start,
                    nu: f.center,
                    sigma: f.sigma_center,
                    valid: f.valid,
                    half_width: f.half_width,
                    no_signal: false,
                },
                FitOutcome::NoSignal { .. } => NuEntry {
                    t: seg.t_start,
                    nu: f64::NAN,
                    sigma: f64::NAN,
                    valid: false,
                    half_width: f64::NAN,
                    no_signal: true,
                },
            })
        })
        .collect();
    Ok(NuTimeline {
        entries: entries.into_iter().collect::<Result<Vec<_>>>()?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSpectrum {
    pub freq: Vec<f64>,
    /// Single-sided sinusoid amplitude (G).
    pub amplitude: Vec<f64>,
    /// Number of windows filled by interpolation.
    pub filled: usize,
}

impl FieldSpectrum {
    /// Amplitude at the bin nearest `f`.
    pub fn at(&self, f: f64) -> f64 {
        let df = if self.freq.len() > 1 { self.freq[1] - self.freq[0] } else { 1.0 };
        let k = ((f / df).round() as usize).min(self.amplitude.len().saturating_sub(1));
        self.amplitude[k]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("f_hz,amp_gauss\n");
        for (f, a) in self.freq.iter().zip(&self.amplitude) {
            let _ = writeln!(out, "{},{}", format_f64(*f), format_f64(*a));
        }
        out
    }
}

/// Valid-window field values with invalid windows linearly interpolated.
/// Errors if more than 10% are invalid or the sampling is not uniform.
pub fn gap_filled_field(timeline: &NuTimeline, species: &AtomSpecies) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let e = &timeline.entries;
    if e.len() < 2 {
        return Err(Error::domain("field spectrum needs at least two windows"));
    }
    let dt = e[1].t - e[0].t;
    for w in e.windows(2) {
        if ((w[1].t - w[0].t) - dt).abs() > 1e-9 * dt.abs().max(1e-12) || !(dt > 0.0) {
            return Err(Error::domain("field spectrum needs a uniformly sampled timeline"));
        }
    }
    let invalid = e.iter().filter(|x| !x.valid).count();
    if invalid * 10 > e.len() {
        return Err(Error::numerical(format!(
            "{invalid} of {} windows invalid (> 10%); refusing to interpolate",
            e.len()
        )));
    }
    if invalid > 0 {
        warn!("filling {invalid} invalid windows by linear interpolation");
    }
    let valid_idx: Vec<usize> = (0..e.len()).filter(|&i| e[i].valid).collect();
    if valid_idx.is_empty() {
        return Err(Error::numerical("no valid windows"));
    }
    let mut b = Vec::with_capacity(e.len());
    for i in 0..e.len() {
        let nu = if e[i].valid {
            e[i].nu
        } else {
            let right = valid_idx.partition_point(|&j| j < i);
            match (right.checked_sub(1).map(|l| valid_idx[l]), valid_idx.get(right)) {
                (Some(l), Some(&r)) => e[l].nu + (e[r].nu - e[l].nu) * (i - l) as f64 / (r - l) as f64,
                (Some(l), None) => e[l].nu,
                (None, Some(&r)) => e[r].nu,
                (None, None) => unreachable!(),
            }
        };
        b.push(field_from_frequency(nu.abs(), species)?);
    }
    Ok((e.iter().map(|x| x.t).collect(), b, invalid))
}

/// Amplitude spectrum of B(t) = ν_L(t)/g over the cycle-rate samples.
pub fn field_spectrum(timeline: &NuTimeline, species: &AtomSpecies) -> Result<FieldSpectrum> {
    let (t, b, filled) = gap_filled_field(timeline, species)?;
    let n = b.len();
    let dt = t[1] - t[0];
    let mean = b.iter().sum::<f64>() / n as f64;
    let mut buf: Vec<Complex64> = b.iter().map(|v| Complex64::new(v - mean, 0.0)).collect();
    fft_in_place(&mut buf);
    let half = n / 2;
    let amplitude = (0..=half)
        .map(|k| {
            let scale = if k == 0 || (n % 2 == 0 && k == half) { 1.0 } else { 2.0 };
            scale * buf[k].norm() / n as f64
        })
        .collect();
    Ok(FieldSpectrum {
        freq: (0..=half).map(|k| k as f64 / (n as f64 * dt)).collect(),
        amplitude,
        filled,
    })
}

/// Trace folded into a matrix: row = sample within cycle, column = cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `data[row * cols + col]`.
    pub data: Vec<f64>,
    pub sample_rate: f64,
    pub pump_rows: usize,
}

pub fn rasterize(trace: &PrecessionTrace) -> Result<Raster> {
    trace.validate()?;
    let s = &trace.schedule;
    let rows = s.samples_per_cycle();
    let cols = s.cycles;
    let mut data = vec![0.0; rows * cols];
    for c in 0..cols {
        for r in 0..rows {
            data[r * cols + c] = trace.samples[c * rows + r];
        }
    }
    Ok(Raster {
        rows,
        cols,
        data,
        sample_rate: s.sample_rate,
        pump_rows: s.pump_samples(),
    })
}

impl Raster {
    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn to_pgm(&self) -> Result<Vec<u8>> {
        pgm_bytes(
            self.cols,
            self.rows,
            "rows: sample within cycle; columns: cycle; linear min->0 max->255",
            &scale_to_gray(&self.data),
        )
    }

    /// Matrix CSV: one line per row, one column per cycle.
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.data.len() * 24);
        for r in 0..self.rows {
            for c in 0..self.cols {
                if c > 0 {
                    out.push(',');
                }
                out.push_str(&format_f64(self.data[r * self.cols + c]));
            }
            out.push('\n');
        }
        out
    }

    /// Mean Pearson correlation between neighbouring columns over the probe rows.
    pub fn adjacent_column_correlation(&self) -> f64 {
        if self.cols < 2 {
            return 1.0;
        }
        let cols: Vec<Vec<f64>> = (0..self.cols).map(|c| self.column(c)[self.pump_rows..].to_vec()).collect();
        let corr = |a: &[f64], b: &[f64]| {
            let n = a.len() as f64;
            let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
            let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
            for (x, y) in a.iter().zip(b) {
                sab += (x - ma) * (y - mb);
                saa += (x - ma) * (x - ma);
                sbb += (y - mb) * (y - mb);
            }
            sab / (saa * sbb).sqrt()
        };
        cols.windows(2).map(|w| corr(&w[0], &w[1])).sum::<f64>() / (self.cols - 1) as f64
    }

    /// Mean spacing in rows between successive maxima of column `c`,
    /// located as upward zero crossings one quarter period earlier.
    pub fn stripe_spacing(&self, c: usize) -> Option<f64> {
        let col = self.column(c);
        let probe = &col[self.pump_rows..];
        let mut ups = Vec::new();
        for k in 1..probe.len() {
            if probe[k - 1] < 0.0 && probe[k] >= 0.0 {
                ups.push(k as f64 - 1.0 + probe[k - 1] / (probe[k - 1] - probe[k]));
            }
        }
        if ups.len() < 2 {
            return None;
        }
        Some((ups[ups.len() - 1] - ups[0]) / (ups.len() - 1) as f64)
    }

    /// Phase of every column at `nu_ref`, unwrapped across columns.
    pub fn column_phases(&self, nu_ref: f64) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::with_capacity(self.cols);
        for c in 0..self.cols {
            let col = self.column(c);
            let mut z = Complex64::new(0.0, 0.0);
            for (r, v) in col.iter().enumerate().skip(self.pump_rows) {
                z += Complex64::from_polar(*v, -2.0 * PI * nu_ref * r as f64 / self.sample_rate);
            }
            let mut p = z.arg();
            if let Some(&last) = out.last() {
                p += 2.0 * PI * ((last - p) / (2.0 * PI)).round();
            }
            out.push(p);
        }
        out
    }

    pub fn column_phase_std(&self, nu_ref: f64) -> f64 {
        let p = self.column_phases(nu_ref);
        let n = p.len() as f64;
        let m = p.iter().sum::<f64>() / n;
        (p.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldscape::{FieldTimeline, Harmonic};
    use crate::spinsim::{synth_trace, Envelope, PumpProbeSchedule, SynthConfig};
    use proptest::prelude::*;

    fn damped(n: usize, fs: f64, a: f64, tau: f64, nu: f64, phi: f64) -> Vec<f64> {
        (0..n)
            .map(|k| {
                let t = k as f64 / fs;
                a * (-t / tau).exp() * (2.0 * PI * nu * t + phi).sin()
            })
            .collect()
    }

    #[test]
    fn slicing_excludes_pump() {
        let sched = PumpProbeSchedule::with_period(2e-3, 200);
        let mut cfg = SynthConfig::trapped(1);
        cfg.noise = false;
        let tr = synth_trace(&FieldTimeline::constant(0.1), &sched, &cfg, &AtomSpecies::rb85()).unwrap();
        let segs = window_slice(&tr).unwrap();
        assert_eq!(segs.len(), 200);
        assert!(segs.iter().all(|s| s.samples.len() == 1980));
        let one = PumpProbeSchedule::with_period(2e-3, 1);
        let tr1 = synth_trace(&FieldTimeline::constant(0.1), &one, &cfg, &AtomSpecies::rb85()).unwrap();
        assert_eq!(window_slice(&tr1).unwrap()[0].samples, &tr1.samples[20..]);
        let empty = PumpProbeSchedule::with_period(2e-3, 0);
        let tr0 = synth_trace(&FieldTimeline::constant(0.1), &empty, &cfg, &AtomSpecies::rb85()).unwrap();
        assert!(window_slice(&tr0).unwrap().is_empty());
    }

    #[test]
    fn bin_centered_tone_has_one_dominant_bin() {
        let n = 1000;
        let fs = 1e6;
        let seg: Vec<f64> = (0..n).map(|k| (2.0 * PI * 50.0 * k as f64 / n as f64).sin()).collect();
        let sp = power_spectrum(&seg, fs, 1, WindowKind::Rectangular).unwrap();
        let (k, _, _) = interpolated_peak(&sp);
        assert_eq!(k, 50);
        let total: f64 = sp.power.iter().sum();
        assert!(sp.power[50] / total > 1.0 - 1e-12);
        assert!(power_spectrum(&seg[..63], fs, 8, WindowKind::Rectangular).is_err());
    }

    proptest! {
        #[test]
        fn parseval(seg in proptest::collection::vec(-1.0f64..1.0, 64..400), pad in 1usize..9) {
            for window in [WindowKind::Rectangular, WindowKind::Hann] {
                let sp = power_spectrum(&seg, 1e6, pad, window).unwrap();
                let n = seg.len();
                let mean = seg.iter().sum::<f64>() / n as f64;
                let energy: f64 = seg.iter().enumerate().map(|(k, v)| {
                    let w = match window {
                        WindowKind::Rectangular => 1.0,
                        WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos(),
                    };
                    ((v - mean) * w).powi(2)
                }).sum();
                let total: f64 = sp.power.iter().sum();
                prop_assert!((total - sp.n_fft as f64 * energy).abs() <= 1e-9 * total.max(1e-300));
            }
        }
    }

    #[test]
    fn exact_lorentzian_recovered() {
        let df = 10.0;
        let (a, nu, w, b) = (5.0, 46_674.15, 318.0, 0.01);
        let freq: Vec<f64> = (0..10_000).map(|k| k as f64 * df).collect();
        let power = freq.iter().map(|f| a / (1.0 + ((f - nu) / w).powi(2)) + b).collect();
        let sp = Spectrum {
            freq,
            power,
            df,
            n_fft: 20_000,
            n_samples: 2_500,
            zero_pad: 8,
        };
        let fit = lorentzian_fit(&sp, &AnalysisConfig::default(), 0);
        let f = fit.fit().unwrap();
        assert!(f.valid);
        assert!(((f.center - nu) / nu).abs() < 1e-6);
        assert!(((f.half_width - w) / w).abs() < 1e-6);
        assert!(((f.amplitude - a) / a).abs() < 1e-6);
        assert!(((f.baseline - b) / b).abs() < 1e-6);
    }

    #[test]
    fn flat_noise_is_no_signal() {
        let sp = Spectrum {
            freq: (0..500).map(|k| k as f64).collect(),
            power: vec![1.0; 500],
            df: 1.0,
            n_fft: 1000,
            n_samples: 125,
            zero_pad: 8,
        };
        assert!(matches!(
            lorentzian_fit(&sp, &AnalysisConfig::default(), 0),
            FitOutcome::NoSignal { .. }
        ));
    }

    #[test]
    fn damped_sine_exact_recovery() {
        let fs = 1e6;
        let seg = damped(1980, fs, 0.8, 0.5e-3, 46_674.15, 0.3);
        let f = damped_sine_fit(&seg, fs, &AnalysisConfig::default()).unwrap();
        assert!(f.converged);
        assert!((f.amplitude - 0.8).abs() < 1e-8);
        assert!(((f.tau - 0.5e-3) / 0.5e-3).abs() < 1e-8);
        assert!(((f.nu - 46_674.15) / 46_674.15).abs() < 1e-8);
        assert!((f.phase - 0.3).abs() < 1e-8);
    }

    #[test]
    fn lorentzian_width_tracks_decay() {
        let fs = 1e6;
        let seg = damped(1980, fs, 1.0, 0.5e-3, 46_674.15, 0.0);
        let sp = power_spectrum(&seg, fs, 8, WindowKind::Rectangular).unwrap();
        let f = lorentzian_fit(&sp, &AnalysisConfig::default(), 0);
        let w = f.fit().unwrap().half_width;
        let expect = 1.0 / (2.0 * PI * 0.5e-3);
        assert!(((w - expect) / expect).abs() < 0.15, "{w} vs {expect}");
    }

    #[test]
    fn pure_60hz_field_amplitude_recovered() {
        let sp = AtomSpecies::rb85();
        let a = 2e-3;
        let entries = (0..200)
            .map(|i| {
                let t = i as f64 * 1e-3;
                NuEntry {
                    t,
                    nu: sp.gyromagnetic_factor * (0.1 + a * (2.0 * PI * 60.0 * t).sin()),
                    sigma: 1.0,
                    valid: true,
                    half_width: 300.0,
                    no_signal: false,
                }
            })
            .collect();
        let fsp = field_spectrum(&NuTimeline { entries }, &sp).unwrap();
        assert!(((fsp.at(60.0) - a) / a).abs() < 0.05);
        assert!((fsp.freq[fsp.freq.len() - 1] - 500.0).abs() < 1e-9);
    }

    #[test]
    fn too_many_gaps_rejected() {
        let sp = AtomSpecies::rb85();
        let entries = (0..100)
            .map(|i| NuEntry {
                t: i as f64 * 1e-3,
                nu: 46_674.0,
                sigma: 1.0,
                valid: i % 5 != 0,
                half_width: 300.0,
                no_signal: false,
            })
            .collect();
        assert!(field_spectrum(&NuTimeline { entries }, &sp).is_err());
    }

    #[test]
    fn raster_stripes_for_constant_field() {
        let sched = PumpProbeSchedule::with_period(1e-3, 40);
        let mut cfg = SynthConfig::trapped(4);
        cfg.envelope = Envelope::Constant;
        cfg.noise = false;
        let sp = AtomSpecies::rb85();
        let tr = synth_trace(&FieldTimeline::constant(0.1), &sched, &cfg, &sp).unwrap();
        let r = rasterize(&tr).unwrap();
        assert_eq!((r.rows, r.cols), (1000, 40));
        assert!(r.adjacent_column_correlation() > 0.95);
        let nu = 0.1 * sp.gyromagnetic_factor;
        let spacing = r.stripe_spacing(0).unwrap();
        assert!((spacing - sched.sample_rate / nu).abs() < 1.0);
        let pgm = r.to_pgm().unwrap();
        assert!(pgm.starts_with(b"P5\n"));

        // a 60 Hz field bends the stripes
        let mut tl = FieldTimeline::constant(0.1);
        tl.harmonics.push(Harmonic { frequency: 60.0, amplitude: 2e-3, phase: 0.0 });
        let bent = rasterize(&synth_trace(&tl, &sched, &cfg, &sp).unwrap()).unwrap();
        assert!(bent.column_phase_std(nu) > 5.0 * r.column_phase_std(nu).max(1e-3));
    }

    #[test]
    fn timeline_csv_round_trip() {
        let tl = NuTimeline {
            entries: vec![
                NuEntry { t: 0.0, nu: 46_674.1, sigma: 12.5, valid: true, half_width: 1.0, no_signal: false },
                NuEntry { t: 1e-3, nu: f64::NAN, sigma: f64::NAN, valid: false, half_width: 1.0, no_signal: true },
            ],
        };
        let back = NuTimeline::from_csv(&tl.to_csv()).unwrap();
        assert_eq!(back.entries[0].nu.to_bits(), tl.entries[0].nu.to_bits());
        assert!(!back.entries[1].valid);
        assert!(NuTimeline::from_csv("t_s,nu_hz,sigma_hz,valid\n1,2\n").is_err());
    }
}
