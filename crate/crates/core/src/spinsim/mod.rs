//! Polarimeter traces: damped-sinusoid synthesis driven by a field
//! timeline, and the (2F+1)-level spin model with the tensor light shift.

mod quantum;
mod trace_io;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fieldscape::FieldTimeline;
use crate::physconst::AtomSpecies;
use crate::rng::SeedTree;

pub use quantum::{quantum_evolve, revival_contrast, revival_trace, secular_revival_time, SpinModel, SpinSeries};
pub use trace_io::{read_trace, read_trace_binary, read_trace_csv, write_trace_binary, write_trace_csv, TRACE_MAGIC};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PumpProbeSchedule {
    /// s
    pub cycle_period: f64,
    /// s
    pub pump_duration: f64,
    pub cycles: usize,
    /// Shots averaged into the stored trace (bookkeeping).
    pub averages: u32,
    /// Hz
    pub sample_rate: f64,
    /// Analysis window after the pump (s).
    pub probe_window: f64,
    /// Time of the first cycle start after coil shutoff (s).
    pub start_time: f64,
}

impl Default for PumpProbeSchedule {
    fn default() -> Self {
        PumpProbeSchedule {
            cycle_period: 1e-3,
            pump_duration: 20e-6,
            cycles: 200,
            averages: 64,
            sample_rate: 1e6,
            probe_window: 1e-3 - 20e-6,
            start_time: 0.0,
        }
    }
}

impl PumpProbeSchedule {
    pub fn with_period(cycle_period: f64, cycles: usize) -> Self {
        let d = PumpProbeSchedule::default();
        PumpProbeSchedule {
            cycle_period,
            cycles,
            probe_window: cycle_period - d.pump_duration,
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(Error::config("sample rate must be positive"));
        }
        if !(self.cycle_period > 0.0) || !(self.pump_duration >= 0.0) || self.pump_duration >= self.cycle_period {
            return Err(Error::config("pump duration must be shorter than the cycle period"));
        }
        if !(self.probe_window > 0.0) || self.probe_window > self.cycle_period - self.pump_duration + 0.5 / self.sample_rate
        {
            return Err(Error::config("probe window must fit in the cycle after the pump"));
        }
        if !(self.start_time >= 0.0) {
            return Err(Error::config("start time must be >= 0"));
        }
        if self.averages == 0 {
            return Err(Error::config("averages must be >= 1"));
        }
        let spc = self.cycle_period * self.sample_rate;
        if (spc - spc.round()).abs() > 1e-6 {
            return Err(Error::config(format!(
                "cycle period {} s is not a whole number of samples at {} Hz",
                self.cycle_period, self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn samples_per_cycle(&self) -> usize {
        (self.cycle_period * self.sample_rate).round() as usize
    }

    pub fn pump_samples(&self) -> usize {
        (self.pump_duration * self.sample_rate).round() as usize
    }

    pub fn probe_samples(&self) -> usize {
        ((self.probe_window * self.sample_rate).round() as usize).min(self.samples_per_cycle() - self.pump_samples())
    }

    pub fn cycle_start(&self, i: usize) -> f64 {
        self.start_time + i as f64 * self.cycle_period
    }

    /// Checks that the expected Larmor frequency is resolved 10× over.
    pub fn check_rate(&self, nu: f64) -> Result<()> {
        if self.sample_rate < 10.0 * nu.abs() {
            return Err(Error::config(format!(
                "sample rate {} Hz is below 10x the Larmor frequency {nu} Hz",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Signal amplitude at each cycle start, as a function of time since
/// trap loading.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    Constant,
    /// A₀·e^{-T/τ}
    Exponential { tau: f64 },
    /// A₀·exp(-(T/T_e)^p): atoms leaving the detection aperture.
    Ballistic { t_e: f64, exponent: f64 },
    /// Piecewise-linear (T, A/A₀) table, e.g. from the kinetics engine.
    Tabulated { points: Vec<(f64, f64)> },
}

impl Envelope {
    pub fn trapped() -> Self {
        Envelope::Exponential { tau: 0.150 }
    }

    pub fn untrapped() -> Self {
        Envelope::Ballistic { t_e: 0.013, exponent: 2.0 }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Envelope::Constant => "constant",
            Envelope::Exponential { .. } => "exponential",
            Envelope::Ballistic { .. } => "ballistic",
            Envelope::Tabulated { .. } => "tabulated",
        }
    }

    pub fn factor(&self, t: f64) -> f64 {
        match self {
            Envelope::Constant => 1.0,
            Envelope::Exponential { tau } => (-t / tau).exp(),
            Envelope::Ballistic { t_e, exponent } => (-(t.max(0.0) / t_e).powf(*exponent)).exp(),
            Envelope::Tabulated { points } => {
                if points.is_empty() {
                    return 1.0;
                }
                let k = points.partition_point(|p| p.0 <= t);
                if k == 0 {
                    points[0].1
                } else if k == points.len() {
                    points[k - 1].1
                } else {
                    let (t0, a0) = points[k - 1];
                    let (t1, a1) = points[k];
                    a0 + (a1 - a0) * (t - t0) / (t1 - t0)
                }
            }
        }
    }
}

/// Initial precession phase of each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhaseMode {
    /// Optical pumping prepares the same phase every cycle (rad).
    Fixed { phi0: f64 },
    /// Uniform random phase per cycle.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Per-cycle 1/e decay of the precession signal (s).
    pub decay_tau: f64,
    pub envelope: Envelope,
    /// Initial envelope amplitude over RMS noise of the stored trace.
    pub snr: f64,
    /// V
    pub amplitude: f64,
    pub phase: PhaseMode,
    /// Std of a random per-cycle field offset (G), e.g. coil-current jitter.
    pub cycle_field_jitter: f64,
    /// Std of a random per-cycle trigger delay (s).
    pub trigger_jitter: f64,
    pub noise: bool,
    pub seed: u64,
}

impl SynthConfig {
    pub fn trapped(seed: u64) -> Self {
        SynthConfig {
            decay_tau: 0.5e-3,
            envelope: Envelope::trapped(),
            snr: 15.0,
            amplitude: 1.0,
            phase: PhaseMode::Fixed { phi0: 0.0 },
            cycle_field_jitter: 0.0,
            trigger_jitter: 0.0,
            noise: true,
            seed,
        }
    }

    pub fn untrapped(seed: u64) -> Self {
        SynthConfig {
            decay_tau: 0.7e-3,
            envelope: Envelope::untrapped(),
            ..SynthConfig::trapped(seed)
        }
    }

    /// RMS noise per stored sample (V).
    pub fn noise_sigma(&self) -> f64 {
        if self.noise { self.amplitude / self.snr } else { 0.0 }
    }
}

/// Sampled polarimeter output over a full multi-cycle measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecessionTrace {
    pub schedule: PumpProbeSchedule,
    /// V
    pub samples: Vec<f64>,
    pub envelope: String,
    pub seed: u64,
}

impl PrecessionTrace {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        let expected = self.schedule.cycles * self.schedule.samples_per_cycle();
        if self.samples.len() != expected {
            return Err(Error::config(format!(
                "trace holds {} samples, schedule implies {expected}",
                self.samples.len()
            )));
        }
        if let Some(k) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(format!("non-finite sample at index {k}")));
        }
        Ok(())
    }

    pub fn time(&self, k: usize) -> f64 {
        self.schedule.start_time + k as f64 / self.schedule.sample_rate
    }

    pub fn cycle(&self, i: usize) -> &[f64] {
        let n = self.schedule.samples_per_cycle();
        &self.samples[i * n..(i + 1) * n]
    }
}

/// Synthesizes the averaged polarimeter trace for `timeline`.
///
/// In cycle i, precession starts when the pump ends at `T_i + pump`; the
/// phase is 2π·g·∫B dt from that instant, integrated exactly.
pub fn synth_trace(
    timeline: &FieldTimeline,
    schedule: &PumpProbeSchedule,
    config: &SynthConfig,
    species: &AtomSpecies,
) -> Result<PrecessionTrace> {
    schedule.validate()?;
    timeline.validate()?;
    if !(config.snr > 0.0 && config.snr.is_finite()) {
        return Err(Error::config(format!("SNR must be positive, got {}", config.snr)));
    }
    if !(config.decay_tau > 0.0) {
        return Err(Error::config("per-cycle decay time must be positive"));
    }
    let g = species.gyromagnetic_factor;
    let fs = schedule.sample_rate;
    let spc = schedule.samples_per_cycle();
    let pump = schedule.pump_samples();
    let tree = SeedTree::new(config.seed);
    let noise_tree = tree.child("trace-noise");
    let cycle_tree = tree.child("cycle-draws");
    let sigma = config.noise_sigma();

    let cycles: Vec<Result<Vec<f64>>> = (0..schedule.cycles)
        .into_par_iter()
        .map(|i| {
            let mut draws = cycle_tree.stream(i as u64);
            let phi0 = match config.phase {
                PhaseMode::Fixed { phi0 } => phi0,
                PhaseMode::Random => draws.random::<f64>() * 2.0 * PI,
            };
            let offset: f64 = if config.cycle_field_jitter > 0.0 {
                config.cycle_field_jitter * draws.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let delay: f64 = if config.trigger_jitter > 0.0 {
                config.trigger_jitter * draws.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            let t_cycle = schedule.cycle_start(i);
            let amp = config.amplitude * config.envelope.factor(t_cycle);
            let t_field = (t_cycle + delay).max(0.0);
            let t_pump = t_field + pump as f64 / fs;
            let mut out = vec![0.0; spc];
            let mut integral = 0.0;
            let mut t_prev = t_pump;
            let mut max_nu: f64 = 0.0;
            for (j, v) in out.iter_mut().enumerate().skip(pump) {
                let t = t_field + j as f64 / fs;
                let step = timeline.integral(t_prev, t);
                if t > t_prev {
                    max_nu = max_nu.max((g * (step / (t - t_prev) + offset)).abs());
                }
                integral += step;
                t_prev = t;
                let dt = t - t_pump;
                let phase = 2.0 * PI * g * (integral + offset * dt) + phi0;
                *v = amp * (-dt / config.decay_tau).exp() * phase.sin();
            }
            if max_nu > 0.4 * fs {
                return Err(Error::config(format!(
                    "Larmor frequency {max_nu:.1} Hz exceeds 0.4x the {fs} Hz sample rate in cycle {i}"
                )));
            }
            if sigma > 0.0 {
                let mut rng = noise_tree.stream(i as u64);
                for v in out.iter_mut() {
                    *v += sigma * rng.sample::<f64, _>(StandardNormal);
                }
            }
            Ok(out)
        })
        .collect();

    let mut samples = Vec::with_capacity(spc * schedule.cycles);
    for c in cycles {
        samples.extend(c?);
    }
    Ok(PrecessionTrace {
        schedule: schedule.clone(),
        samples,
        envelope: config.envelope.tag().to_string(),
        seed: config.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fieldscape::Harmonic;

    fn rb() -> AtomSpecies {
        AtomSpecies::rb85()
    }

    #[test]
    fn constant_field_is_a_pure_tone() {
        let tl = FieldTimeline::constant(0.1);
        let sched = PumpProbeSchedule::with_period(2e-3, 1);
        let mut cfg = SynthConfig::trapped(1);
        cfg.noise = false;
        cfg.decay_tau = 1e9;
        cfg.envelope = Envelope::Constant;
        let tr = synth_trace(&tl, &sched, &cfg, &rb()).unwrap();
        let seg = &tr.samples[sched.pump_samples()..];
        // DFT peak search on a fine grid around the expected frequency
        let nu = 0.1 * rb().gyromagnetic_factor;
        let n = seg.len() as f64;
        let power = |f: f64| {
            let (mut c, mut s) = (0.0, 0.0);
            for (k, v) in seg.iter().enumerate() {
                let a = 2.0 * PI * f * k as f64 / sched.sample_rate;
                c += v * a.cos();
                s += v * a.sin();
            }
            c * c + s * s
        };
        let bin = sched.sample_rate / n;
        let best = (-100..=100)
            .map(|k| nu + k as f64 * bin / 20.0)
            .max_by(|a, b| power(*a).total_cmp(&power(*b)))
            .unwrap();
        assert!((best - nu).abs() <= bin, "{best} vs {nu}");
    }

    #[test]
    fn noise_calibration() {
        let tl = FieldTimeline::constant(0.1);
        let sched = PumpProbeSchedule::with_period(1e-3, 10);
        let mut cfg = SynthConfig::trapped(3);
        cfg.envelope = Envelope::Constant;
        let noisy = synth_trace(&tl, &sched, &cfg, &rb()).unwrap();
        cfg.noise = false;
        let clean = synth_trace(&tl, &sched, &cfg, &rb()).unwrap();
        let resid: Vec<f64> = noisy.samples.iter().zip(&clean.samples).map(|(a, b)| a - b).collect();
        assert!(resid.len() >= 10_000);
        let rms = (resid.iter().map(|r| r * r).sum::<f64>() / resid.len() as f64).sqrt();
        let ratio = rms / cfg.amplitude;
        assert!((ratio * cfg.snr - 1.0).abs() < 0.05, "{ratio}");
    }

    #[test]
    fn instantaneous_frequency_tracks_slow_field() {
        // slow ramp: ν changes well under 1% per window
        let mut tl = FieldTimeline::constant(0.1);
        tl.harmonics.push(Harmonic { frequency: 60.0, amplitude: 2e-4, phase: 0.0 });
        let sched = PumpProbeSchedule::with_period(1e-3, 16);
        let mut cfg = SynthConfig::trapped(1);
        cfg.noise = false;
        cfg.decay_tau = 1e9;
        cfg.envelope = Envelope::Constant;
        let sp = rb();
        let tr = synth_trace(&tl, &sched, &cfg, &sp).unwrap();
        let fs = sched.sample_rate;
        for i in 0..sched.cycles {
            let seg = &tr.cycle(i)[sched.pump_samples()..];
            // analytic-signal phase slope via a quadrature demodulation at the bias frequency
            let nu0 = 0.1 * sp.gyromagnetic_factor;
            let phase = analytic_phase(seg, nu0, fs);
            let n = phase.len();
            let slope = linear_slope(&phase) * fs / (2.0 * PI) + nu0;
            let t0 = sched.cycle_start(i) + sched.pump_duration;
            let t1 = t0 + (n - 1) as f64 / fs;
            let mean_nu = sp.gyromagnetic_factor * tl.integral(t0, t1) / (t1 - t0);
            assert!(((slope - mean_nu) / mean_nu).abs() < 1e-3, "cycle {i}: {slope} vs {mean_nu}");
        }
    }

    /// Unwrapped phase of x(t)·e^{-i2πν₀t}, smoothed over one carrier period.
    fn analytic_phase(seg: &[f64], nu0: f64, fs: f64) -> Vec<f64> {
        let period = (fs / nu0).round() as usize * 3;
        let mixed: Vec<(f64, f64)> = seg
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let a = 2.0 * PI * nu0 * k as f64 / fs;
                (v * a.cos(), -v * a.sin())
            })
            .collect();
        let mut out: Vec<f64> = Vec::new();
        for w in mixed.windows(period).step_by(period / 3) {
            let (re, im) = w.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let mut p = im.atan2(re);
            if let Some(&last) = out.last() {
                while p - last > PI {
                    p -= 2.0 * PI;
                }
                while p - last < -PI {
                    p += 2.0 * PI;
                }
            }
            out.push(p);
        }
        // stride back to per-sample units
        let stride = (period / 3) as f64;
        out.iter().map(|p| p / stride).collect()
    }

    fn linear_slope(y: &[f64]) -> f64 {
        let n = y.len() as f64;
        let mx = (n - 1.0) / 2.0;
        let my = y.iter().sum::<f64>() / n;
        let (mut sxy, mut sxx) = (0.0, 0.0);
        for (k, v) in y.iter().enumerate() {
            sxy += (k as f64 - mx) * (v - my);
            sxx += (k as f64 - mx).powi(2);
        }
        sxy / sxx
    }

    #[test]
    fn envelopes_follow_their_models() {
        let trapped = Envelope::trapped();
        assert!((trapped.factor(0.150) - (-1.0f64).exp()).abs() < 1e-15);
        let un = Envelope::untrapped();
        assert!((un.factor(0.013) - (-1.0f64).exp()).abs() < 1e-15);
        assert!(un.factor(0.025) < 0.05);
    }

    #[test]
    fn rejects_bad_inputs() {
        let tl = FieldTimeline::constant(0.1);
        let sched = PumpProbeSchedule::with_period(1e-3, 2);
        let mut cfg = SynthConfig::trapped(1);
        cfg.snr = 0.0;
        assert!(synth_trace(&tl, &sched, &cfg, &rb()).is_err());
        let cfg = SynthConfig::trapped(1);
        let fast = FieldTimeline::constant(1.0);
        assert!(synth_trace(&fast, &sched, &cfg, &rb()).is_err());
        let mut bad = sched.clone();
        bad.pump_duration = 2e-3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cycles_are_independent_of_thread_count() {
        let tl = FieldTimeline::constant(0.1);
        let sched = PumpProbeSchedule::with_period(1e-3, 8);
        let cfg = SynthConfig::trapped(9);
        let a = synth_trace(&tl, &sched, &cfg, &rb()).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| synth_trace(&tl, &sched, &cfg, &rb()).unwrap());
        assert_eq!(a, b);
    }
}
