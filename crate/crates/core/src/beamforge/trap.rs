//! Crossed hollow-beam potential built from an azimuthally averaged beam profile.

use crate::atomkinetics::scattering_rate;
use crate::error::Result;
use crate::kv::KvWriter;
use crate::physconst::{recoil_energy, AtomSpecies, STANDARD_GRAVITY};

use super::{beam_at_plane, dipole_potential, BeamSpec, FieldGrid};

/// Single-beam intensity I(r) on uniform radial nodes `r_i = i·dr`.
///
/// Interpolation is Catmull-Rom, mirrored through the axis and zero past
/// the last node, so the value and its slope are continuous everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub dr: f64,
    /// W/m²
    pub intensity: Vec<f64>,
}

impl RadialProfile {
    pub fn from_fn(dr: f64, count: usize, f: impl Fn(f64) -> f64) -> Self {
        RadialProfile {
            dr,
            intensity: (0..count).map(|i| f(i as f64 * dr)).collect(),
        }
    }

    /// Azimuthal average of |E|² in rings one pixel wide. The on-axis node
    /// is the mean of the four pixels around the axis.
    pub fn from_grid(g: &FieldGrid) -> Self {
        let n = g.size;
        let dr = g.pitch;
        let bins = n / 2;
        let mut sum = vec![0.0; bins];
        let mut count = vec![0usize; bins];
        for i in 0..n {
            let y = g.x(i);
            for j in 0..n {
                let x = g.x(j);
                let k = ((x * x + y * y).sqrt() / dr).round() as usize;
                if k < bins {
                    sum[k] += g.samples[i * n + j].norm_sqr();
                    count[k] += 1;
                }
            }
        }
        let mut intensity: Vec<f64> = sum
            .iter()
            .zip(&count)
            .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect();
        let h = n / 2;
        intensity[0] = [(h - 1, h - 1), (h - 1, h), (h, h - 1), (h, h)]
            .iter()
            .map(|&(i, j)| g.samples[i * n + j].norm_sqr())
            .sum::<f64>()
            / 4.0;
        for k in 1..bins {
            if intensity[k].is_nan() {
                intensity[k] = intensity[k - 1];
            }
        }
        RadialProfile { dr, intensity }
    }

    fn node(&self, k: i64) -> f64 {
        let idx = k.unsigned_abs() as usize;
        self.intensity.get(idx).copied().unwrap_or(0.0)
    }

    /// Interpolated intensity and dI/dr at radius `r`.
    pub fn eval(&self, r: f64) -> (f64, f64) {
        let u = r / self.dr;
        let i = u.floor();
        let t = u - i;
        let i = i as i64;
        if i > self.intensity.len() as i64 + 1 {
            return (0.0, 0.0);
        }
        let (p0, p1, p2, p3) = (self.node(i - 1), self.node(i), self.node(i + 1), self.node(i + 2));
        let c1 = p2 - p0;
        let c2 = 2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3;
        let c3 = -p0 + 3.0 * p1 - 3.0 * p2 + p3;
        let v = 0.5 * (2.0 * p1 + t * (c1 + t * (c2 + t * c3)));
        if v <= 0.0 {
            return (0.0, 0.0);
        }
        let d = 0.5 * (c1 + t * (2.0 * c2 + 3.0 * t * c3)) / self.dr;
        (v, d)
    }

    pub fn value(&self, r: f64) -> f64 {
        self.eval(r).0
    }

    fn peak_index(&self) -> usize {
        let mut best = 0;
        for (k, &v) in self.intensity.iter().enumerate() {
            if v > self.intensity[best] {
                best = k;
            }
        }
        best
    }

    /// Parabolic refinement of the maximum node: (radius, intensity).
    fn refined_peak(&self) -> (f64, f64) {
        let k = self.peak_index();
        if k == 0 || k + 1 >= self.intensity.len() {
            return (k as f64 * self.dr, self.intensity[k]);
        }
        let (a, b, c) = (self.intensity[k - 1], self.intensity[k], self.intensity[k + 1]);
        let denom = a - 2.0 * b + c;
        if denom >= 0.0 {
            return (k as f64 * self.dr, b);
        }
        let delta = 0.5 * (a - c) / denom;
        let peak = b - 0.25 * (a - c) * delta;
        ((k as f64 + delta) * self.dr, peak)
    }

    pub fn peak_intensity(&self) -> f64 {
        self.refined_peak().1
    }

    /// Radius of the intensity maximum, or `None` when the beam is brightest
    /// on axis (no ring).
    pub fn ring_radius(&self) -> Option<f64> {
        let (r, peak) = self.refined_peak();
        if self.peak_index() < 2 || self.intensity[0] > 0.5 * peak {
            None
        } else {
            Some(r)
        }
    }

    /// Diameter of the outermost e⁻² crossing of the peak intensity.
    pub fn outer_diameter(&self) -> f64 {
        let level = self.peak_intensity() * (-2.0f64).exp();
        let k = self.intensity.iter().rposition(|&v| v >= level).unwrap_or(0);
        2.0 * (k as f64 + 1.0) * self.dr
    }

    pub fn center_intensity(&self) -> f64 {
        self.intensity[0]
    }
}

/// Coefficient of variation of |E|² over pixels within half a pitch of
/// radius `r`.
pub fn ring_variation(g: &FieldGrid, r: f64) -> f64 {
    let n = g.size;
    let mut vals = Vec::new();
    for i in 0..n {
        let y = g.x(i);
        for j in 0..n {
            let x = g.x(j);
            if ((x * x + y * y).sqrt() - r).abs() <= 0.5 * g.pitch {
                vals.push(g.samples[i * n + j].norm_sqr());
            }
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
    var.sqrt() / mean
}

/// Two identical hollow beams, one along x and one along y, each invariant
/// along its own axis, plus optional gravity along -z.
#[derive(Debug, Clone)]
pub struct TrapPotential {
    pub profile: RadialProfile,
    /// J per W/m²
    pub coupling: f64,
    pub detuning: f64,
    pub species: AtomSpecies,
    pub gravity: bool,
    /// Lowest escape barrier: the single-beam ring maximum (J).
    pub u_max: f64,
    pub ring_diameter: Option<f64>,
    pub z_offset: f64,
    /// Azimuthal coefficient of variation of the ring intensity.
    pub ring_variation: Option<f64>,
    /// Fraction of input power that left the propagation window.
    pub escaped_fraction: f64,
}

impl TrapPotential {
    pub fn from_profile(profile: RadialProfile, spec: &BeamSpec, species: &AtomSpecies) -> Result<Self> {
        let coupling = dipole_potential(1.0, spec.detuning, species)?;
        let u_max = coupling * profile.peak_intensity();
        let ring_diameter = profile.ring_radius().map(|r| 2.0 * r);
        Ok(TrapPotential {
            profile,
            coupling,
            detuning: spec.detuning,
            species: species.clone(),
            gravity: spec.gravity,
            u_max,
            ring_diameter,
            z_offset: spec.z_offset,
            ring_variation: None,
            escaped_fraction: 0.0,
        })
    }

    /// Summed intensity of both beams at `p` (W/m²).
    pub fn intensity(&self, p: [f64; 3]) -> f64 {
        let ra = (p[1] * p[1] + p[2] * p[2]).sqrt();
        let rb = (p[0] * p[0] + p[2] * p[2]).sqrt();
        self.profile.value(ra) + self.profile.value(rb)
    }

    pub fn optical_potential(&self, p: [f64; 3]) -> f64 {
        self.coupling * self.intensity(p)
    }

    pub fn gravity_potential(&self, p: [f64; 3]) -> f64 {
        if self.gravity {
            self.species.mass * STANDARD_GRAVITY * p[2]
        } else {
            0.0
        }
    }

    pub fn potential(&self, p: [f64; 3]) -> f64 {
        self.optical_potential(p) + self.gravity_potential(p)
    }

    /// Potential (J), force -∇U (N), and local summed intensity (W/m²).
    pub fn evaluate(&self, p: [f64; 3]) -> (f64, [f64; 3], f64) {
        let ra = (p[1] * p[1] + p[2] * p[2]).sqrt();
        let rb = (p[0] * p[0] + p[2] * p[2]).sqrt();
        let (ia, da) = self.profile.eval(ra);
        let (ib, db) = self.profile.eval(rb);
        let ga = if ra > 0.0 { self.coupling * da / ra } else { 0.0 };
        let gb = if rb > 0.0 { self.coupling * db / rb } else { 0.0 };
        let mut f = [-gb * p[0], -ga * p[1], -(ga + gb) * p[2]];
        let mut u = self.coupling * (ia + ib);
        if self.gravity {
            let w = self.species.mass * STANDARD_GRAVITY;
            f[2] -= w;
            u += w * p[2];
        }
        (u, f, ia + ib)
    }
}

/// Builds the crossed trap by propagating the default beam to its operating plane.
pub fn crossed_trap(spec: &BeamSpec, species: &AtomSpecies) -> Result<TrapPotential> {
    let field = beam_at_plane(spec)?;
    let profile = RadialProfile::from_grid(&field);
    let mut trap = TrapPotential::from_profile(profile, spec, species)?;
    trap.ring_variation = trap.profile.ring_radius().map(|r| ring_variation(&field, r));
    trap.escaped_fraction = field.escaped_power / spec.power;
    Ok(trap)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrapReport {
    pub z_offset: f64,
    pub u_max_joule: f64,
    pub u_max_hbar_gamma: f64,
    pub u_max_recoil: f64,
    pub ring_diameter: Option<f64>,
    /// W/m²
    pub peak_intensity: f64,
    /// photons/s
    pub peak_scattering_rate: f64,
    /// m·g·d_ring in units of ħΓ
    pub gravity_span_hbar_gamma: Option<f64>,
    /// U at the trap center over U_max
    pub center_ratio: f64,
    pub ring_variation: Option<f64>,
    pub escaped_fraction: f64,
}

pub fn trap_report(trap: &TrapPotential) -> Result<TrapReport> {
    let sp = &trap.species;
    let peak = trap.profile.peak_intensity();
    let er = recoil_energy(sp)?;
    let center = trap.optical_potential([0.0; 3]);
    Ok(TrapReport {
        z_offset: trap.z_offset,
        u_max_joule: trap.u_max,
        u_max_hbar_gamma: trap.u_max / sp.hbar_gamma(),
        u_max_recoil: trap.u_max / er,
        ring_diameter: trap.ring_diameter,
        peak_intensity: peak,
        peak_scattering_rate: scattering_rate(peak, trap.detuning, sp)?,
        gravity_span_hbar_gamma: trap
            .ring_diameter
            .map(|d| sp.mass * STANDARD_GRAVITY * d / sp.hbar_gamma()),
        center_ratio: if trap.u_max > 0.0 { center / trap.u_max } else { 0.0 },
        ring_variation: trap.ring_variation,
        escaped_fraction: trap.escaped_fraction,
    })
}

impl TrapReport {
    pub fn to_kv(&self) -> String {
        let mut w = KvWriter::new();
        w.f64("z_offset_m", self.z_offset);
        w.f64("u_max_j", self.u_max_joule);
        w.f64("u_max_hbar_gamma", self.u_max_hbar_gamma);
        w.f64("u_max_recoil", self.u_max_recoil);
        w.opt_f64("ring_diameter_m", self.ring_diameter);
        w.f64("peak_intensity_w_m2", self.peak_intensity);
        w.f64("peak_scattering_rate_per_s", self.peak_scattering_rate);
        w.f64(
            "peak_scattering_rate_over_2pi_hz",
            self.peak_scattering_rate / (2.0 * std::f64::consts::PI),
        );
        w.opt_f64("gravity_span_hbar_gamma", self.gravity_span_hbar_gamma);
        w.f64("center_ratio", self.center_ratio);
        w.opt_f64("ring_variation", self.ring_variation);
        w.f64("escaped_fraction", self.escaped_fraction);
        w.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physconst::AtomSpecies;
    use proptest::prelude::*;

    fn donut(dr: f64) -> RadialProfile {
        let r0 = 240e-6;
        RadialProfile::from_fn(dr, 400, |r| 1e6 * (r / r0).powi(16) * (-(16.0 / 2.0) * ((r / r0).powi(2) - 1.0)).exp())
    }

    #[test]
    fn interpolation_hits_nodes_and_is_smooth() {
        let p = donut(5e-6);
        for k in [0usize, 10, 48, 100] {
            let r = k as f64 * p.dr;
            assert!((p.value(r) - p.intensity[k]).abs() <= 1e-9 * p.intensity[k].max(1.0));
        }
        // slope continuity across a node
        let r = 48.0 * p.dr;
        let left = p.eval(r - 1e-12).1;
        let right = p.eval(r + 1e-12).1;
        assert!((left - right).abs() < 1e-3 * left.abs().max(1.0));
    }

    #[test]
    fn ring_radius_refines_between_nodes() {
        let p = donut(5e-6);
        let r = p.ring_radius().unwrap();
        assert!((r - 240e-6).abs() < 0.5e-6, "{r}");
        let flat = RadialProfile::from_fn(5e-6, 100, |r| (-(r / 100e-6).powi(2)).exp());
        assert!(flat.ring_radius().is_none());
    }

    fn synthetic_trap(gravity: bool) -> TrapPotential {
        let sp = AtomSpecies::rb85();
        let mut spec = BeamSpec::default_for(&sp);
        spec.gravity = gravity;
        TrapPotential::from_profile(donut(5e-6), &spec, &sp).unwrap()
    }

    proptest! {
        #[test]
        fn force_is_minus_gradient(x in -400e-6f64..400e-6, y in -400e-6f64..400e-6, z in -400e-6f64..400e-6) {
            let t = synthetic_trap(true);
            let p = [x, y, z];
            let (_, f, _) = t.evaluate(p);
            let h = 1e-9;
            for axis in 0..3 {
                let mut a = p;
                let mut b = p;
                a[axis] += h;
                b[axis] -= h;
                let numeric = -(t.potential(a) - t.potential(b)) / (2.0 * h);
                let scale = t.u_max / 50e-6;
                prop_assert!((numeric - f[axis]).abs() < 1e-4 * scale, "axis {axis}: {numeric} vs {}", f[axis]);
            }
        }

        #[test]
        fn optical_part_is_nonnegative(x in -1e-3f64..1e-3, y in -1e-3f64..1e-3, z in -1e-3f64..1e-3) {
            let t = synthetic_trap(false);
            prop_assert!(t.optical_potential([x, y, z]) >= 0.0);
        }
    }

    #[test]
    fn center_is_dark_and_gravity_tilts() {
        let t = synthetic_trap(true);
        assert!(t.optical_potential([0.0; 3]) < 1e-3 * t.u_max);
        let up = t.potential([0.0, 0.0, 1e-4]);
        let down = t.potential([0.0, 0.0, -1e-4]);
        assert!(up > down);
    }
}
