//! Scalar magnetic field along z as a function of time since MOT-coil
//! shutoff, and the opposing waveforms that compensate it.

use std::f64::consts::PI;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvMap, KvWriter};
use crate::rng::SeedTree;

/// A decaying exponential A·e^{-t/τ}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eddy {
    /// G
    pub amplitude: f64,
    /// s
    pub tau: f64,
}

/// a·sin(2πft + φ)
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Harmonic {
    /// Hz
    pub frequency: f64,
    /// G
    pub amplitude: f64,
    /// rad
    pub phase: f64,
}

impl Harmonic {
    pub fn value(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin()
    }

    /// ∫_{t0}^{t1} of the sinusoid.
    fn integral(&self, t0: f64, t1: f64) -> f64 {
        let w = 2.0 * PI * self.frequency;
        self.amplitude * ((w * t0 + self.phase).cos() - (w * t1 + self.phase).cos()) / w
    }
}

fn check_line_multiple(f: f64, line: f64) -> Result<()> {
    let k = f / line;
    if !(f > 0.0 && f.is_finite()) || (k - k.round()).abs() > 1e-9 || k.round() < 1.0 {
        return Err(Error::config(format!(
            "harmonic frequency {f} Hz is not a positive multiple of the {line} Hz line"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldTimeline {
    /// G
    pub bias: f64,
    /// Hz
    pub line_frequency: f64,
    pub eddies: Vec<Eddy>,
    pub harmonics: Vec<Harmonic>,
    /// Piecewise-linear drift knots (t s, B G), held constant outside.
    pub drift: Vec<(f64, f64)>,
    /// White noise density (G/√Hz); zero disables noise.
    pub noise_density: f64,
    /// Noise is a zero-order hold updated at this rate (Hz).
    pub noise_rate: f64,
    pub seed: u64,
}

impl FieldTimeline {
    pub fn constant(bias: f64) -> Self {
        FieldTimeline {
            bias,
            line_frequency: 60.0,
            eddies: Vec::new(),
            harmonics: Vec::new(),
            drift: Vec::new(),
            noise_density: 0.0,
            noise_rate: 1e6,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bias.is_finite() {
            return Err(Error::config("bias must be finite"));
        }
        if !(self.line_frequency > 0.0 && self.line_frequency.is_finite()) {
            return Err(Error::config("line frequency must be positive"));
        }
        for e in &self.eddies {
            if !(e.tau > 0.0 && e.tau.is_finite()) || !e.amplitude.is_finite() {
                return Err(Error::config(format!("eddy term needs finite amplitude and tau > 0, got {e:?}")));
            }
        }
        for h in &self.harmonics {
            check_line_multiple(h.frequency, self.line_frequency)?;
            if !(h.amplitude.is_finite() && h.phase.is_finite()) {
                return Err(Error::config("harmonic amplitude and phase must be finite"));
            }
        }
        for w in self.drift.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::config("drift knots must have strictly increasing times"));
            }
        }
        if !(self.noise_density >= 0.0) || !(self.noise_rate > 0.0) {
            return Err(Error::config("noise density must be >= 0 and noise rate > 0"));
        }
        Ok(())
    }

    fn drift_at(&self, t: f64) -> f64 {
        let d = &self.drift;
        match d.len() {
            0 => 0.0,
            _ if t <= d[0].0 => d[0].1,
            _ if t >= d[d.len() - 1].0 => d[d.len() - 1].1,
            _ => {
                let k = d.partition_point(|p| p.0 <= t) - 1;
                let (t0, b0) = d[k];
                let (t1, b1) = d[k + 1];
                b0 + (b1 - b0) * (t - t0) / (t1 - t0)
            }
        }
    }

    fn drift_integral(&self, t0: f64, t1: f64) -> f64 {
        let d = &self.drift;
        if d.is_empty() {
            return 0.0;
        }
        // breakpoints inside (t0, t1) split the integral into linear pieces
        let mut pts = vec![t0];
        pts.extend(d.iter().map(|p| p.0).filter(|&x| x > t0 && x < t1));
        pts.push(t1);
        pts.windows(2)
            .map(|w| 0.5 * (self.drift_at(w[0]) + self.drift_at(w[1])) * (w[1] - w[0]))
            .sum()
    }

    fn noise_tree(&self) -> SeedTree {
        SeedTree::new(self.seed).child("field-noise")
    }

    /// Standard deviation of each held noise sample (G).
    pub fn noise_sample_sigma(&self) -> f64 {
        self.noise_density * (self.noise_rate / 2.0).sqrt()
    }

    fn noise_at(&self, tree: &SeedTree, t: f64) -> f64 {
        if self.noise_density == 0.0 {
            return 0.0;
        }
        let k = (t * self.noise_rate).floor() as u64;
        self.noise_sample_sigma() * tree.normal_at(0, k)
    }

    /// Noise-free part of the field (G).
    pub fn deterministic_at(&self, t: f64) -> f64 {
        let mut b = self.bias + self.drift_at(t);
        for e in &self.eddies {
            b += e.amplitude * (-t / e.tau).exp();
        }
        for h in &self.harmonics {
            b += h.value(t);
        }
        b
    }

    pub fn field_at(&self, t: f64) -> Result<f64> {
        if !(t >= 0.0) {
            return Err(Error::domain(format!("field_at needs t >= 0, got {t}")));
        }
        Ok(self.deterministic_at(t) + self.noise_at(&self.noise_tree(), t))
    }

    /// ∫_{t0}^{t1} B dt (G·s), exact for every term including the held noise.
    pub fn integral(&self, t0: f64, t1: f64) -> f64 {
        let mut acc = self.bias * (t1 - t0) + self.drift_integral(t0, t1);
        for e in &self.eddies {
            acc += e.amplitude * e.tau * ((-t0 / e.tau).exp() - (-t1 / e.tau).exp());
        }
        for h in &self.harmonics {
            acc += h.integral(t0, t1);
        }
        if self.noise_density != 0.0 && t1 > t0 {
            let tree = self.noise_tree();
            let sigma = self.noise_sample_sigma();
            let dt = 1.0 / self.noise_rate;
            let k0 = (t0 * self.noise_rate).floor() as u64;
            let k1 = (t1 * self.noise_rate).floor() as u64;
            for k in k0..=k1 {
                let a = t0.max(k as f64 * dt);
                let b = t1.min((k + 1) as f64 * dt);
                if b > a {
                    acc += sigma * tree.normal_at(0, k) * (b - a);
                }
            }
        }
        acc
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("field timeline; field in gauss, time in seconds");
        w.f64("bias_g", self.bias);
        w.f64("line_frequency_hz", self.line_frequency);
        w.u64("eddy_count", self.eddies.len() as u64);
        for (i, e) in self.eddies.iter().enumerate() {
            w.f64(&format!("eddy{i}_amplitude_g"), e.amplitude);
            w.f64(&format!("eddy{i}_tau_s"), e.tau);
        }
        write_harmonics(&mut w, &self.harmonics);
        w.u64("drift_count", self.drift.len() as u64);
        for (i, (t, b)) in self.drift.iter().enumerate() {
            w.f64(&format!("drift{i}_t_s"), *t);
            w.f64(&format!("drift{i}_b_g"), *b);
        }
        w.f64("noise_density_g_per_rthz", self.noise_density);
        w.f64("noise_rate_hz", self.noise_rate);
        w.u64("seed", self.seed);
        w.finish()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let m = KvMap::parse(text)?;
        let eddies = (0..m.u64("eddy_count")?)
            .map(|i| {
                Ok(Eddy {
                    amplitude: m.f64(&format!("eddy{i}_amplitude_g"))?,
                    tau: m.f64(&format!("eddy{i}_tau_s"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let drift = (0..m.u64("drift_count")?)
            .map(|i| Ok((m.f64(&format!("drift{i}_t_s"))?, m.f64(&format!("drift{i}_b_g"))?)))
            .collect::<Result<Vec<_>>>()?;
        let tl = FieldTimeline {
            bias: m.f64("bias_g")?,
            line_frequency: m.f64("line_frequency_hz")?,
            eddies,
            harmonics: read_harmonics(&m)?,
            drift,
            noise_density: m.f64("noise_density_g_per_rthz")?,
            noise_rate: m.f64("noise_rate_hz")?,
            seed: m.u64("seed")?,
        };
        m.check_keys(tl_key_known)?;
        tl.validate()?;
        Ok(tl)
    }
}

fn tl_key_known(k: &str) -> bool {
    const FIXED: [&str; 8] = [
        "bias_g",
        "line_frequency_hz",
        "eddy_count",
        "harmonic_count",
        "drift_count",
        "noise_density_g_per_rthz",
        "noise_rate_hz",
        "seed",
    ];
    FIXED.contains(&k) || indexed_key(k, &["eddy", "harmonic", "drift"])
}

fn indexed_key(k: &str, prefixes: &[&str]) -> bool {
    prefixes.iter().any(|p| {
        k.strip_prefix(p)
            .map(|rest| rest.starts_with(|c: char| c.is_ascii_digit()))
            .unwrap_or(false)
    })
}

fn write_harmonics(w: &mut KvWriter, hs: &[Harmonic]) {
    w.u64("harmonic_count", hs.len() as u64);
    for (i, h) in hs.iter().enumerate() {
        w.f64(&format!("harmonic{i}_frequency_hz"), h.frequency);
        w.f64(&format!("harmonic{i}_amplitude_g"), h.amplitude);
        w.f64(&format!("harmonic{i}_phase_rad"), h.phase);
    }
}

fn read_harmonics(m: &KvMap) -> Result<Vec<Harmonic>> {
    (0..m.u64("harmonic_count")?)
        .map(|i| {
            Ok(Harmonic {
                frequency: m.f64(&format!("harmonic{i}_frequency_hz"))?,
                amplitude: m.f64(&format!("harmonic{i}_amplitude_g"))?,
                phase: m.f64(&format!("harmonic{i}_phase_rad"))?,
            })
        })
        .collect()
}

/// Step through a single-pole low-pass: produces -A·e^{-t/τ_c}.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EddyBranch {
    /// G
    pub step_amplitude: f64,
    /// s
    pub tau: f64,
}

/// Opposing coil waveform. Eddy branches enter with a minus sign; harmonic
/// branches are the literal coil sinusoids and already carry their
/// opposing phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompensationPlan {
    pub eddies: Vec<EddyBranch>,
    pub harmonics: Vec<Harmonic>,
    /// Hz
    pub bandwidth: f64,
    /// Hz
    pub line_frequency: f64,
}

impl CompensationPlan {
    pub fn empty(bandwidth: f64, line_frequency: f64) -> Self {
        CompensationPlan {
            eddies: Vec::new(),
            harmonics: Vec::new(),
            bandwidth,
            line_frequency,
        }
    }

    pub fn new(
        eddies: Vec<EddyBranch>,
        harmonics: Vec<Harmonic>,
        bandwidth: f64,
        line_frequency: f64,
    ) -> Result<Self> {
        let plan = CompensationPlan {
            eddies,
            harmonics,
            bandwidth,
            line_frequency,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0) {
            return Err(Error::config("coil bandwidth must be positive"));
        }
        for e in &self.eddies {
            if !(e.tau > 0.0 && e.tau.is_finite() && e.step_amplitude.is_finite()) {
                return Err(Error::config(format!("invalid eddy branch {e:?}")));
            }
        }
        for h in &self.harmonics {
            check_line_multiple(h.frequency, self.line_frequency)?;
            if !(h.amplitude.is_finite() && h.phase.is_finite()) {
                return Err(Error::config("branch amplitude and phase must be finite"));
            }
            if h.frequency > self.bandwidth {
                return Err(Error::config(format!(
                    "{} Hz branch exceeds the {} Hz coil bandwidth",
                    h.frequency, self.bandwidth
                )));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.eddies.is_empty() && self.harmonics.is_empty()
    }

    /// Builds a plan, dropping branches above the bandwidth with a warning.
    pub fn within_bandwidth(
        eddies: Vec<EddyBranch>,
        harmonics: Vec<Harmonic>,
        bandwidth: f64,
        line_frequency: f64,
    ) -> Result<Self> {
        let kept = harmonics
            .into_iter()
            .filter(|h| {
                let ok = h.frequency <= bandwidth;
                if !ok {
                    warn!("dropping {} Hz branch above the {bandwidth} Hz coil bandwidth", h.frequency);
                }
                ok
            })
            .collect();
        CompensationPlan::new(eddies, kept, bandwidth, line_frequency)
    }

    /// P₁ ⊕ P₂: all branches of both plans.
    pub fn combine(&self, other: &CompensationPlan) -> CompensationPlan {
        CompensationPlan {
            eddies: self.eddies.iter().chain(&other.eddies).copied().collect(),
            harmonics: self.harmonics.iter().chain(&other.harmonics).copied().collect(),
            bandwidth: self.bandwidth.max(other.bandwidth),
            line_frequency: self.line_frequency,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.comment("compensation plan; field in gauss, time in seconds");
        w.f64("bandwidth_hz", self.bandwidth);
        w.f64("line_frequency_hz", self.line_frequency);
        w.u64("eddy_count", self.eddies.len() as u64);
        for (i, e) in self.eddies.iter().enumerate() {
            w.f64(&format!("eddy{i}_step_amplitude_g"), e.step_amplitude);
            w.f64(&format!("eddy{i}_tau_s"), e.tau);
        }
        write_harmonics(&mut w, &self.harmonics);
        w.finish()
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let m = KvMap::parse(text)?;
        m.check_keys(|k| {
            ["bandwidth_hz", "line_frequency_hz", "eddy_count", "harmonic_count"].contains(&k)
                || indexed_key(k, &["eddy", "harmonic"])
        })?;
        let eddies = (0..m.u64("eddy_count")?)
            .map(|i| {
                Ok(EddyBranch {
                    step_amplitude: m.f64(&format!("eddy{i}_step_amplitude_g"))?,
                    tau: m.f64(&format!("eddy{i}_tau_s"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        CompensationPlan::new(
            eddies,
            read_harmonics(&m)?,
            m.f64("bandwidth_hz")?,
            m.f64("line_frequency_hz")?,
        )
    }
}

/// Field produced by the compensation coils (G).
pub fn compensation_field(plan: &CompensationPlan, t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("compensation_field needs t >= 0, got {t}")));
    }
    let mut b = 0.0;
    for e in &plan.eddies {
        b -= e.step_amplitude * (-t / e.tau).exp();
    }
    for h in &plan.harmonics {
        b += h.value(t);
    }
    Ok(b)
}

/// Timeline whose field is the truth plus the coil field.
pub fn apply(timeline: &FieldTimeline, plan: &CompensationPlan) -> FieldTimeline {
    let mut out = timeline.clone();
    out.eddies.extend(plan.eddies.iter().map(|e| Eddy {
        amplitude: -e.step_amplitude,
        tau: e.tau,
    }));
    out.harmonics.extend(plan.harmonics.iter().copied());
    out
}

/// Largest |B(t) - B₀| of the noise-free field on a uniform scan of [t0, t1].
pub fn max_abs_residual(timeline: &FieldTimeline, t0: f64, t1: f64, points: usize) -> f64 {
    let points = points.max(2);
    (0..points)
        .map(|k| {
            let t = t0 + (t1 - t0) * k as f64 / (points - 1) as f64;
            (timeline.deterministic_at(t) - timeline.bias).abs()
        })
        .fold(0.0, f64::max)
}
