//! Monte Carlo atom kinetics with stochastic photon recoils.
//!
//! Every sample is integrated independently with velocity Verlet. Photon
//! events of each light source form an inhomogeneous Poisson process: the
//! sample accumulates hazard ∫rate dt and scatters whenever the hazard
//! crosses an Exp(1) threshold, so counts are integers and exact up to the
//! time step.
//!
//! Energies are measured from the dark trap center with gravity m·g·z.

use std::f64::consts::PI;

use log::debug;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal, UnitSphere};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::beamforge::TrapPotential;
use crate::error::{Error, Result};
pub use crate::fit::fit_exponential;
use crate::fit::first_crossing;
use crate::physconst::{recoil_energy, AtomSpecies, BOLTZMANN, STANDARD_GRAVITY};
use crate::rng::SeedTree;

/// Far-detuned two-level photon scattering rate (photons/s).
pub fn scattering_rate(intensity: f64, detuning: f64, species: &AtomSpecies) -> Result<f64> {
    if !(intensity >= 0.0 && intensity.is_finite()) || !detuning.is_finite() {
        return Err(Error::domain("scattering_rate needs finite I >= 0 and finite detuning"));
    }
    let gamma = species.linewidth;
    let s = intensity / species.saturation_intensity;
    let x = 2.0 * 2.0 * PI * detuning / gamma;
    Ok(0.5 * gamma * s / (1.0 + s + x * x))
}

/// Peak intensity 2P/(πw²) of a Gaussian beam (W/m²).
pub fn gaussian_peak_intensity(power: f64, waist: f64) -> f64 {
    2.0 * power / (PI * waist * waist)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoilModel {
    /// One ħk kick in a uniformly random direction per photon; heats by
    /// exactly E_r per photon on average.
    Lumped,
    /// Absorption kick along ±x plus an isotropic emission kick; heats by
    /// 2·E_r per photon on average, (1 + 1/3)·E_r of it along x.
    #[default]
    AbsorptionEmission,
}

impl RecoilModel {
    /// Mean kinetic energy added per photon, in recoil energies.
    pub fn heating_per_photon(&self) -> f64 {
        match self {
            RecoilModel::Lumped => 1.0,
            RecoilModel::AbsorptionEmission => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSchedule {
    /// s
    pub cycle_period: f64,
    /// s
    pub pump_duration: f64,
    /// Mean photons per pump burst, spread uniformly over the pulse.
    pub pump_photons: f64,
    /// photons/s
    pub probe_rate: f64,
    /// Multiplier on the local trap-beam rate; 0 disables trap scattering.
    pub trap_scale: f64,
    pub recoil: RecoilModel,
}

impl ScatterSchedule {
    /// Pump-dominated split of 7 photons/ms at 1 ms cycles: 5.8 pump +
    /// 0.5 probe + the ≈0.7/ms trap-only baseline of the default trap.
    pub fn boil_default() -> Self {
        ScatterSchedule {
            cycle_period: 1e-3,
            pump_duration: 20e-6,
            pump_photons: 5.8,
            probe_rate: 500.0,
            trap_scale: 1.0,
            recoil: RecoilModel::AbsorptionEmission,
        }
    }

    pub fn trap_only() -> Self {
        ScatterSchedule {
            pump_photons: 0.0,
            probe_rate: 0.0,
            ..ScatterSchedule::boil_default()
        }
    }

    pub fn dark() -> Self {
        ScatterSchedule {
            trap_scale: 0.0,
            ..ScatterSchedule::trap_only()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cycle_period > 0.0 && self.pump_duration > 0.0 && self.pump_duration < self.cycle_period) {
            return Err(Error::config("need 0 < pump duration < cycle period"));
        }
        for (name, v) in [
            ("pump photons", self.pump_photons),
            ("probe rate", self.probe_rate),
            ("trap scale", self.trap_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    fn pump_rate(&self, t: f64) -> f64 {
        if self.pump_photons > 0.0 && t.rem_euclid(self.cycle_period) < self.pump_duration {
            self.pump_photons / self.pump_duration
        } else {
            0.0
        }
    }

    /// Time-averaged non-trap photon rate (photons/s).
    pub fn mean_external_rate(&self) -> f64 {
        self.pump_photons / self.cycle_period + self.probe_rate
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticsConfig {
    /// Number of Monte Carlo samples.
    pub samples: usize,
    /// Atoms represented by the whole ensemble.
    pub atoms: f64,
    /// 1/e² cloud diameter (m).
    pub cloud_diameter: f64,
    /// K
    pub temperature: f64,
    /// s
    pub dt: f64,
    /// s
    pub duration: f64,
    /// Survival-curve spacing (s).
    pub record_interval: f64,
    /// Steps between escape checks.
    pub check_every: usize,
    /// Energy escape threshold in units of U_max.
    pub energy_factor: f64,
    /// Box radius when no trap defines one (m).
    pub box_radius: f64,
    /// Probe detection aperture diameter in the y-z plane (m).
    pub aperture: f64,
    pub gravity: bool,
    /// Keep initial positions with probability e^{-U_opt/k_BT}; off means
    /// the trap is switched on suddenly over the Gaussian cloud.
    pub boltzmann_loading: bool,
    pub seed: u64,
}

impl Default for KineticsConfig {
    fn default() -> Self {
        KineticsConfig {
            samples: 10_000,
            atoms: 1e6,
            cloud_diameter: 500e-6,
            temperature: 10e-6,
            dt: 1e-6,
            duration: 0.4,
            record_interval: 1e-3,
            check_every: 100,
            energy_factor: 1.2,
            box_radius: 0.72e-3,
            aperture: 0.5e-3,
            gravity: true,
            boltzmann_loading: false,
            seed: 1,
        }
    }
}

impl KineticsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt <= 1e-6 * (1.0 + 1e-12)) {
            return Err(Error::config(format!("time step must be in (0, 1 µs], got {} s", self.dt)));
        }
        if self.samples == 0 || !(self.duration >= 0.0) || !(self.record_interval > 0.0) || self.check_every == 0 {
            return Err(Error::config("need samples > 0, duration >= 0, record interval > 0, check interval > 0"));
        }
        if !(self.cloud_diameter > 0.0 && self.temperature > 0.0 && self.box_radius > 0.0 && self.aperture > 0.0) {
            return Err(Error::config("cloud size, temperature, box and aperture must be positive"));
        }
        Ok(())
    }
}

/// Light and potential seen by the samples; `trap = None` is free fall.
#[derive(Debug, Clone, Copy)]
pub struct Environment<'a> {
    pub trap: Option<&'a TrapPotential>,
    pub species: &'a AtomSpecies,
    pub gravity: bool,
}

impl Environment<'_> {
    /// Optical potential (J), total force (N) and summed trap intensity (W/m²).
    fn evaluate(&self, p: [f64; 3]) -> (f64, [f64; 3], f64) {
        let (u, mut f, i) = match self.trap {
            Some(t) => {
                let (u, f, i) = t.evaluate(p);
                if t.gravity {
                    let w = t.species.mass * STANDARD_GRAVITY;
                    (u - w * p[2], [f[0], f[1], f[2] + w], i)
                } else {
                    (u, f, i)
                }
            }
            None => (0.0, [0.0; 3], 0.0),
        };
        if self.gravity {
            let w = self.species.mass * STANDARD_GRAVITY;
            f[2] -= w;
        }
        (u, f, i)
    }

    fn gravity_energy(&self, p: [f64; 3]) -> f64 {
        if self.gravity { self.species.mass * STANDARD_GRAVITY * p[2] } else { 0.0 }
    }

    /// Kinetic + optical + gravitational energy (J).
    pub fn energy(&self, p: [f64; 3], v: [f64; 3]) -> f64 {
        let ke = 0.5 * self.species.mass * (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
        ke + self.evaluate(p).0 + self.gravity_energy(p)
    }

    fn trap_rate(&self, intensity: f64, scale: f64) -> f64 {
        match self.trap {
            Some(t) if scale > 0.0 => {
                let sp = self.species;
                let s = intensity / sp.saturation_intensity;
                let x = 2.0 * 2.0 * PI * t.detuning / sp.linewidth;
                scale * 0.5 * sp.linewidth * s / (1.0 + s + x * x)
            }
            _ => 0.0,
        }
    }

    fn u_max(&self) -> Option<f64> {
        self.trap.map(|t| t.u_max)
    }

    fn box_radius(&self, fallback: f64) -> f64 {
        self.trap
            .and_then(|t| t.ring_diameter)
            .map(|d| 1.5 * d)
            .unwrap_or(fallback)
    }
}

/// One Monte Carlo sample with its own random stream.
#[derive(Debug, Clone)]
pub struct Sample {
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub alive: bool,
    /// Loss time (s); infinite while alive.
    pub death: f64,
    /// Photons from trap, probe and pump.
    pub counts: [u64; 3],
    rng: ChaCha8Rng,
    hazard: [f64; 3],
    threshold: [f64; 3],
    over_energy: u8,
    force: [f64; 3],
    intensity: f64,
}

#[derive(Debug, Clone)]
pub struct AtomEnsemble {
    pub samples: Vec<Sample>,
    /// Atoms per sample.
    pub weight: f64,
    /// s
    pub time: f64,
    pub seed: u64,
}

impl AtomEnsemble {
    /// Gaussian cloud with Maxwell-Boltzmann velocities, optionally
    /// Boltzmann-filtered in the optical potential.
    pub fn thermal(config: &KineticsConfig, env: &Environment) -> Result<Self> {
        config.validate()?;
        let tree = SeedTree::new(config.seed).child("kinetics");
        let sigma_r = config.cloud_diameter / 4.0;
        let kt = BOLTZMANN * config.temperature;
        let sigma_v = (kt / env.species.mass).sqrt();
        let samples = (0..config.samples)
            .into_par_iter()
            .map(|i| {
                let mut rng = tree.stream(i as u64);
                let mut tries = 0usize;
                let p = loop {
                    let p: [f64; 3] = std::array::from_fn(|_| sigma_r * rng.sample::<f64, _>(StandardNormal));
                    let u = env.evaluate(p).0;
                    tries += 1;
                    if !config.boltzmann_loading || u <= 0.0 || rng.random::<f64>() < (-u / kt).exp() {
                        break Ok(p);
                    }
                    if tries > 1_000_000 {
                        break Err(Error::numerical("no trapped initial positions: potential too high everywhere"));
                    }
                }?;
                let v: [f64; 3] = std::array::from_fn(|_| sigma_v * rng.sample::<f64, _>(StandardNormal));
                Ok(Sample::new(p, v, rng, env))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AtomEnsemble {
            samples,
            weight: config.atoms / config.samples as f64,
            time: 0.0,
            seed: config.seed,
        })
    }

    /// Samples at given positions and velocities, streams keyed by index.
    pub fn from_states(states: &[([f64; 3], [f64; 3])], seed: u64, env: &Environment) -> Self {
        let tree = SeedTree::new(seed).child("kinetics");
        AtomEnsemble {
            samples: states
                .iter()
                .enumerate()
                .map(|(i, (p, v))| Sample::new(*p, *v, tree.stream(i as u64), env))
                .collect(),
            weight: 1.0,
            time: 0.0,
            seed,
        }
    }

    pub fn alive_fraction(&self) -> f64 {
        self.samples.iter().filter(|s| s.alive).count() as f64 / self.samples.len().max(1) as f64
    }
}

impl Sample {
    fn new(p: [f64; 3], v: [f64; 3], mut rng: ChaCha8Rng, env: &Environment) -> Self {
        let threshold = std::array::from_fn(|_| Exp1.sample(&mut rng));
        let (_, force, intensity) = env.evaluate(p);
        Sample {
            p,
            v,
            alive: true,
            death: f64::INFINITY,
            counts: [0; 3],
            rng,
            hazard: [0.0; 3],
            threshold,
            over_energy: 0,
            force,
            intensity,
        }
    }

    fn kick(&mut self, model: RecoilModel, vr: f64) {
        match model {
            RecoilModel::Lumped => {
                let d: [f64; 3] = UnitSphere.sample(&mut self.rng);
                for k in 0..3 {
                    self.v[k] += vr * d[k];
                }
            }
            RecoilModel::AbsorptionEmission => {
                let sign = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
                self.v[0] += sign * vr;
                let d: [f64; 3] = UnitSphere.sample(&mut self.rng);
                for k in 0..3 {
                    self.v[k] += vr * d[k];
                }
            }
        }
    }

    /// One velocity-Verlet step ending at `t + dt`, then photon events.
    fn step(&mut self, env: &Environment, sched: &ScatterSchedule, t: f64, dt: f64) {
        let m = env.species.mass;
        for k in 0..3 {
            self.v[k] += 0.5 * dt * self.force[k] / m;
            self.p[k] += dt * self.v[k];
        }
        let (_, f, i) = env.evaluate(self.p);
        self.force = f;
        self.intensity = i;
        for k in 0..3 {
            self.v[k] += 0.5 * dt * f[k] / m;
        }
        let rates = [
            env.trap_rate(i, sched.trap_scale),
            sched.probe_rate,
            sched.pump_rate(t + 0.5 * dt),
        ];
        let vr = env.species.recoil_velocity();
        for c in 0..3 {
            if rates[c] == 0.0 {
                continue;
            }
            self.hazard[c] += rates[c] * dt;
            while self.hazard[c] >= self.threshold[c] {
                self.hazard[c] -= self.threshold[c];
                self.threshold[c] = Exp1.sample(&mut self.rng);
                self.counts[c] += 1;
                self.kick(sched.recoil, vr);
            }
        }
    }

    fn check_escape(&mut self, env: &Environment, box_radius: f64, energy_limit: Option<f64>, t: f64) {
        let r2: f64 = self.p.iter().map(|x| x * x).sum();
        let outward: f64 = (0..3).map(|k| self.p[k] * self.v[k]).sum();
        if r2 > box_radius * box_radius && outward > 0.0 {
            self.alive = false;
            self.death = t;
            return;
        }
        if let Some(limit) = energy_limit {
            if env.energy(self.p, self.v) > limit {
                self.over_energy += 1;
                if self.over_energy >= 3 {
                    self.alive = false;
                    self.death = t;
                }
            } else {
                self.over_energy = 0;
            }
        }
    }
}

/// Advances every live sample by one step. Does not apply escape checks.
pub fn step(ensemble: &mut AtomEnsemble, env: &Environment, sched: &ScatterSchedule, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt <= 1e-6 * (1.0 + 1e-12)) {
        return Err(Error::config(format!("time step must be in (0, 1 µs], got {dt} s")));
    }
    let t = ensemble.time;
    ensemble
        .samples
        .par_iter_mut()
        .filter(|s| s.alive)
        .for_each(|s| s.step(env, sched, t, dt));
    ensemble.time += dt;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    /// s
    pub tau: f64,
    pub amplitude: f64,
    /// Bootstrap 95% interval of τ (s).
    pub tau_low: f64,
    pub tau_high: f64,
}

#[derive(Debug, Clone)]
pub struct SurvivalCurve {
    pub t: Vec<f64>,
    pub fraction: Vec<f64>,
    /// Binomial standard error of each fraction.
    pub stderr: Vec<f64>,
    /// Per-sample loss times (infinite if never lost).
    pub deaths: Vec<f64>,
    /// Faraday weight (alive and inside the aperture) at each record time.
    pub weight: Vec<f64>,
    /// Time at which the fraction first drops to 1/e, if it does.
    pub t_1e: Option<f64>,
    pub fit: Option<ExpFit>,
    /// Mean trap-beam photon rate per live sample (photons/s).
    pub mean_trap_rate: f64,
    /// Mean total photon rate per live sample (photons/s).
    pub mean_total_rate: f64,
    /// Largest relative energy drift of any sample (scattering-free runs only).
    pub max_energy_drift: Option<f64>,
}

impl SurvivalCurve {
    pub fn to_csv(&self) -> String {
        use crate::kv::format_f64;
        let mut out = String::from("t_s,fraction,stderr,faraday_weight\n");
        for k in 0..self.t.len() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                format_f64(self.t[k]),
                format_f64(self.fraction[k]),
                format_f64(self.stderr[k]),
                format_f64(self.weight[k])
            ));
        }
        out
    }

    /// Time at which the Faraday weight first drops to 1/e.
    pub fn weight_1e(&self) -> Option<f64> {
        first_crossing(&self.t, &self.weight, (-1.0f64).exp())
    }
}

fn fraction_curve(deaths: &[f64], t: &[f64]) -> Vec<f64> {
    let mut sorted = deaths.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    t.iter()
        .map(|&tk| (sorted.len() - sorted.partition_point(|d| *d <= tk)) as f64 / n)
        .collect()
}

/// Runs every sample to `config.duration` and records the survival curve.
pub fn survival_curve(
    ensemble: &mut AtomEnsemble,
    env: &Environment,
    sched: &ScatterSchedule,
    config: &KineticsConfig,
    bootstrap: usize,
) -> Result<SurvivalCurve> {
    config.validate()?;
    sched.validate()?;
    let dt = config.dt;
    let steps = (config.duration / dt).round() as usize;
    let rec_every = ((config.record_interval / dt).round() as usize).max(1);
    let records = steps / rec_every + 1;
    let box_r = env.box_radius(config.box_radius);
    let limit = env.u_max().map(|u| config.energy_factor * u);
    let ap2 = (0.5 * config.aperture).powi(2);
    let no_scatter = sched.mean_external_rate() == 0.0 && (sched.trap_scale == 0.0 || env.trap.is_none());
    let t0 = ensemble.time;
    let scale = env.u_max().unwrap_or(env.species.mass * STANDARD_GRAVITY * box_r);
    debug!("kinetics: {} samples, {steps} steps", ensemble.samples.len());

    // (in-aperture flags per record, alive time, max drift)
    let per_sample: Vec<(Vec<bool>, f64, f64)> = ensemble
        .samples
        .par_iter_mut()
        .map(|s| {
            let mut inside = Vec::with_capacity(records);
            let in_ap = |s: &Sample| s.alive && s.p[1] * s.p[1] + s.p[2] * s.p[2] <= ap2;
            inside.push(in_ap(s));
            let e0 = env.energy(s.p, s.v);
            let mut drift: f64 = 0.0;
            let mut alive_time = 0.0;
            for k in 0..steps {
                if !s.alive {
                    inside.resize(records, false);
                    break;
                }
                let t = t0 + k as f64 * dt;
                s.step(env, sched, t, dt);
                alive_time += dt;
                if (k + 1) % config.check_every == 0 {
                    s.check_escape(env, box_r, limit, t + dt);
                    if no_scatter && s.alive {
                        drift = drift.max((env.energy(s.p, s.v) - e0).abs() / (e0.abs() + scale));
                    }
                }
                if (k + 1) % rec_every == 0 && inside.len() < records {
                    inside.push(in_ap(s));
                }
            }
            inside.resize(records, false);
            (inside, alive_time, drift)
        })
        .collect();
    ensemble.time = t0 + steps as f64 * dt;

    let n = ensemble.samples.len() as f64;
    let t: Vec<f64> = (0..records).map(|k| t0 + (k * rec_every) as f64 * dt).collect();
    let deaths: Vec<f64> = ensemble.samples.iter().map(|s| s.death).collect();
    let fraction = fraction_curve(&deaths, &t);
    let stderr = fraction.iter().map(|f| (f * (1.0 - f) / n).sqrt()).collect();
    let weight = (0..records)
        .map(|k| per_sample.iter().filter(|(ins, _, _)| ins[k]).count() as f64 / n)
        .collect();
    let alive_time: f64 = per_sample.iter().map(|x| x.1).sum();
    let trap_photons: u64 = ensemble.samples.iter().map(|s| s.counts[0]).sum();
    let all_photons: u64 = ensemble.samples.iter().map(|s| s.counts.iter().sum::<u64>()).sum();
    let fit = fit_exponential(&t, &fraction).map(|(a, tau)| {
        let mut taus: Vec<f64> = (0..bootstrap)
            .into_par_iter()
            .filter_map(|b| {
                let mut rng = SeedTree::new(config.seed).child("bootstrap").stream(b as u64);
                let resampled: Vec<f64> = (0..deaths.len()).map(|_| deaths[rng.random_range(0..deaths.len())]).collect();
                fit_exponential(&t, &fraction_curve(&resampled, &t)).map(|x| x.1)
            })
            .collect();
        taus.sort_by(f64::total_cmp);
        let q = |p: f64| taus.get(((taus.len() as f64 - 1.0) * p).round() as usize).copied().unwrap_or(f64::NAN);
        ExpFit {
            tau,
            amplitude: a,
            tau_low: q(0.025),
            tau_high: q(0.975),
        }
    });
    Ok(SurvivalCurve {
        t_1e: first_crossing(&t, &fraction, (-1.0f64).exp()),
        t,
        fraction,
        stderr,
        deaths,
        weight,
        fit,
        mean_trap_rate: if alive_time > 0.0 { trap_photons as f64 / alive_time } else { 0.0 },
        mean_total_rate: if alive_time > 0.0 { all_photons as f64 / alive_time } else { 0.0 },
        max_energy_drift: no_scatter.then(|| per_sample.iter().map(|x| x.2).fold(0.0, f64::max)),
    })
}

/// Fraction of the ensemble that is alive and inside the probe aperture
/// (a disc of diameter `aperture` in the y-z plane).
pub fn faraday_weight(ensemble: &AtomEnsemble, aperture: f64) -> f64 {
    let r2 = (0.5 * aperture).powi(2);
    ensemble
        .samples
        .iter()
        .filter(|s| s.alive && s.p[1] * s.p[1] + s.p[2] * s.p[2] <= r2)
        .count() as f64
        / ensemble.samples.len().max(1) as f64
}

/// Rough boil time U/(γ·E_r·h), h = heating per photon in recoil energies.
pub fn boil_estimate(u_max: f64, total_rate: f64, species: &AtomSpecies, model: RecoilModel) -> Result<f64> {
    let er = recoil_energy(species)?;
    if !(total_rate > 0.0) {
        return Err(Error::domain("boil estimate needs a positive scattering rate"));
    }
    Ok(u_max / (total_rate * er * model.heating_per_photon()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::beamforge::{BeamSpec, RadialProfile};

    fn rb() -> AtomSpecies {
        AtomSpecies::rb85()
    }

    fn analytic_trap(sp: &AtomSpecies) -> TrapPotential {
        // LG-like ring: I(r) ∝ (r/r0)^16 e^{-8((r/r0)²-1)}, peak at r0 = 0.24 mm
        let r0 = 0.24e-3;
        let peak = 8.2e5;
        let prof = RadialProfile::from_fn(2e-6, 1500, |r| {
            let x = (r / r0).powi(2);
            peak * x.powi(8) * (-8.0 * (x - 1.0)).exp()
        });
        TrapPotential::from_profile(prof, &BeamSpec::default_for(sp), sp).unwrap()
    }

    #[test]
    fn rate_examples() {
        let sp = rb();
        assert_eq!(scattering_rate(0.0, 25e9, &sp).unwrap(), 0.0);
        let trap = scattering_rate(8.2e5, 25e9, &sp).unwrap() / (2.0 * PI);
        assert!((trap - 2.3e3).abs() < 0.1e3, "{trap}");
        let probe = scattering_rate(gaussian_peak_intensity(20e-3, 6e-3), 2.5e9, &sp).unwrap();
        assert!((1.0 / probe - 2e-3).abs() < 0.6e-3, "{}", 1.0 / probe);
        assert!(scattering_rate(-1.0, 1e9, &sp).is_err());
    }

    #[test]
    fn free_fall_matches_parabola() {
        let sp = rb();
        let env = Environment { trap: None, species: &sp, gravity: true };
        let v0 = [0.01, -0.02, 0.03];
        let mut ens = AtomEnsemble::from_states(&[([0.0; 3], v0)], 1, &env);
        for _ in 0..10_000 {
            step(&mut ens, &env, &ScatterSchedule::dark(), 1e-6).unwrap();
        }
        let t = ens.time;
        let s = &ens.samples[0];
        let expect = [v0[0] * t, v0[1] * t, v0[2] * t - 0.5 * STANDARD_GRAVITY * t * t];
        for k in 0..3 {
            assert!((s.p[k] - expect[k]).abs() < 1e-9, "{k}: {} vs {}", s.p[k], expect[k]);
        }
        assert!(step(&mut ens, &env, &ScatterSchedule::dark(), 2e-6).is_err());
    }

    #[test]
    fn slides_from_ring_into_core() {
        let sp = rb();
        let trap = analytic_trap(&sp);
        let env = Environment { trap: Some(&trap), species: &sp, gravity: false };
        let start = [0.0, 0.2e-3, 0.0];
        let mut ens = AtomEnsemble::from_states(&[(start, [0.0; 3])], 1, &env);
        let e0 = env.energy(start, [0.0; 3]);
        let mut min_r: f64 = 1.0;
        let mut max_speed: f64 = 0.0;
        for _ in 0..20_000 {
            step(&mut ens, &env, &ScatterSchedule::dark(), 1e-6).unwrap();
            let s = &ens.samples[0];
            min_r = min_r.min(s.p[1].abs());
            max_speed = max_speed.max(s.v[1].abs());
        }
        assert!(min_r < 0.05e-3, "never reached the core: {min_r}");
        assert!(max_speed > 0.0);
        let s = &ens.samples[0];
        let drift = (env.energy(s.p, s.v) - e0).abs() / e0;
        assert!(drift < 1e-4, "{drift}");
    }

    #[test]
    fn lumped_heating_is_one_recoil_per_photon() {
        let sp = rb();
        let env = Environment { trap: None, species: &sp, gravity: false };
        let sched = ScatterSchedule { probe_rate: 1e5, recoil: RecoilModel::Lumped, ..ScatterSchedule::dark() };
        let states = vec![([0.0; 3], [0.0; 3]); 10_000];
        let mut ens = AtomEnsemble::from_states(&states, 5, &env);
        for _ in 0..10 {
            step(&mut ens, &env, &sched, 1e-6).unwrap();
        }
        let photons: u64 = ens.samples.iter().map(|s| s.counts[1]).sum();
        let ke: f64 = ens.samples.iter().map(|s| env.energy(s.p, s.v)).sum();
        let er = recoil_energy(&sp).unwrap();
        let per = ke / photons as f64 / er;
        assert!(photons > 5_000);
        assert!((per - 1.0).abs() < 0.05, "{per} E_r per photon over {photons} photons");
    }

    #[test]
    fn absorption_emission_heats_twice() {
        let sp = rb();
        let env = Environment { trap: None, species: &sp, gravity: false };
        let sched = ScatterSchedule {
            probe_rate: 1e5,
            recoil: RecoilModel::AbsorptionEmission,
            ..ScatterSchedule::dark()
        };
        let states = vec![([0.0; 3], [0.0; 3]); 10_000];
        let mut ens = AtomEnsemble::from_states(&states, 6, &env);
        for _ in 0..10 {
            step(&mut ens, &env, &sched, 1e-6).unwrap();
        }
        let photons: u64 = ens.samples.iter().map(|s| s.counts[1]).sum();
        let ke: f64 = ens.samples.iter().map(|s| env.energy(s.p, s.v)).sum();
        let er = recoil_energy(&sp).unwrap();
        let per = ke / photons as f64 / er;
        assert!((per - 2.0).abs() < 0.1, "{per}");
        let kx: f64 = ens.samples.iter().map(|s| 0.5 * sp.mass * s.v[0] * s.v[0]).sum();
        let per_x = kx / photons as f64 / er;
        assert!((per_x - 4.0 / 3.0).abs() < 0.05 * 4.0 / 3.0, "{per_x}");
    }

    #[test]
    fn poisson_pump_counts() {
        let sp = rb();
        let env = Environment { trap: None, species: &sp, gravity: false };
        let sched = ScatterSchedule { pump_photons: 10.0, ..ScatterSchedule::dark() };
        let states = vec![([0.0; 3], [0.0; 3]); 2_000];
        let mut ens = AtomEnsemble::from_states(&states, 7, &env);
        for _ in 0..1000 {
            step(&mut ens, &env, &sched, 1e-6).unwrap();
        }
        let c: Vec<f64> = ens.samples.iter().map(|s| s.counts[2] as f64).collect();
        let m = c.iter().sum::<f64>() / c.len() as f64;
        let var = c.iter().map(|x| (x - m).powi(2)).sum::<f64>() / c.len() as f64;
        assert!((m - 10.0).abs() < 0.3, "{m}");
        assert!((var / m - 1.0).abs() < 0.15, "{var}");
    }

    #[test]
    fn untrapped_leaves_aperture() {
        let sp = rb();
        let env = Environment { trap: None, species: &sp, gravity: true };
        let cfg = KineticsConfig { samples: 500, duration: 30e-3, ..KineticsConfig::default() };
        let mut ens = AtomEnsemble::thermal(&cfg, &env).unwrap();
        assert!((faraday_weight(&ens, 10.0) - 1.0).abs() < 1e-12);
        let curve = survival_curve(&mut ens, &env, &ScatterSchedule::dark(), &cfg, 0).unwrap();
        let k25 = curve.t.iter().position(|t| (*t - 25e-3).abs() < 1e-9).unwrap();
        assert!(curve.weight[k25] < 0.05, "{}", curve.weight[k25]);
    }

    #[test]
    fn survival_is_monotone_and_deterministic() {
        let sp = rb();
        let trap = analytic_trap(&sp);
        let env = Environment { trap: Some(&trap), species: &sp, gravity: true };
        let cfg = KineticsConfig { samples: 64, duration: 20e-3, ..KineticsConfig::default() };
        let sched = ScatterSchedule { pump_photons: 200.0, ..ScatterSchedule::boil_default() };
        let run = || {
            let mut ens = AtomEnsemble::thermal(&cfg, &env).unwrap();
            survival_curve(&mut ens, &env, &sched, &cfg, 0).unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a.fraction.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(a.deaths.iter().map(|d| d.to_bits()).collect::<Vec<_>>(), b.deaths.iter().map(|d| d.to_bits()).collect::<Vec<_>>());
        assert!(a.fraction.last().unwrap() < &1.0, "heavy pumping must lose atoms");
    }

    #[test]
    fn exponential_fit_recovers_tau() {
        let t: Vec<f64> = (0..400).map(|k| k as f64 * 1e-3).collect();
        let y: Vec<f64> = t.iter().map(|t| (-t / 0.16).exp()).collect();
        let (a, tau) = fit_exponential(&t, &y).unwrap();
        assert!((a - 1.0).abs() < 1e-8 && (tau - 0.16).abs() < 1e-8);
    }
}
