//! Hollow-beam synthesis from an SLM phase mask, the crossed-beam trap
//! potential, and trap metrics.

mod grid;
mod trap;

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physconst::{AtomSpecies, HBAR, SPEED_OF_LIGHT};

pub use grid::{propagate, BandLimit, FieldGrid, ALIASING_THRESHOLD};
pub use trap::{crossed_trap, ring_variation, trap_report, RadialProfile, TrapPotential, TrapReport};

/// How the focusing lens enters the simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    /// Lens carried analytically as a curvature; propagation uses Fresnel scaling.
    #[default]
    Factored,
    /// Lens phase written into the samples, as on the physical SLM.
    Sampled,
}

/// Parameters of one hollow trap beam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamSpec {
    pub charge: i32,
    /// 1/e² intensity radius of the collimated input (m).
    pub input_waist: f64,
    /// Lens focal length (m); `f64::INFINITY` removes the lens term.
    pub focal_length: f64,
    /// Trap light wavelength (m).
    pub wavelength: f64,
    /// Power per beam (W).
    pub power: f64,
    /// Detuning above the F=3 → F'=4 transition (Hz).
    pub detuning: f64,
    /// Distance of the operating plane before the focal plane (m).
    pub z_offset: f64,
    pub grid_size: usize,
    /// Full width of the SLM-plane grid (m).
    pub grid_extent: f64,
    pub lens_mode: LensMode,
    /// Pixel radius around the axis inside which the vortex phase is supersampled.
    pub antialias_radius_px: usize,
    pub band_limit: bool,
    pub gravity: bool,
}

impl BeamSpec {
    pub fn default_for(species: &AtomSpecies) -> Self {
        let detuning = 25e9;
        let input_waist = 1.71e-3;
        BeamSpec {
            charge: 8,
            input_waist,
            focal_length: 0.2,
            wavelength: trap_wavelength(species, detuning),
            power: 0.150,
            detuning,
            z_offset: 0.027,
            grid_size: 1024,
            grid_extent: 12.0 * input_waist,
            lens_mode: LensMode::Factored,
            antialias_radius_px: 40,
            band_limit: true,
            gravity: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.charge < 0 {
            return Err(Error::config(format!("charge must be >= 0, got {}", self.charge)));
        }
        let positive = [
            ("input_waist", self.input_waist),
            ("wavelength", self.wavelength),
            ("power", self.power),
            ("grid_extent", self.grid_extent),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be finite and positive, got {v}")));
            }
        }
        if !(self.focal_length > 0.0) {
            return Err(Error::config(format!(
                "focal_length must be positive (or infinite), got {}",
                self.focal_length
            )));
        }
        if !(self.detuning.is_finite() && self.detuning > 0.0) {
            return Err(Error::config(format!(
                "detuning must be positive (blue), got {}",
                self.detuning
            )));
        }
        if !self.z_offset.is_finite() {
            return Err(Error::config("z_offset must be finite"));
        }
        if self.grid_size < 16 || !self.grid_size.is_multiple_of(2) {
            return Err(Error::config(format!("grid_size must be even and >= 16, got {}", self.grid_size)));
        }
        if self.grid_extent < 6.0 * self.input_waist {
            return Err(Error::config(format!(
                "grid_extent {:.3e} m must span at least 6 input waists ({:.3e} m)",
                self.grid_extent,
                6.0 * self.input_waist
            )));
        }
        Ok(())
    }

    pub fn pitch(&self) -> f64 {
        self.grid_extent / self.grid_size as f64
    }

    /// Propagation distance from the SLM/lens plane to the operating plane.
    pub fn distance_to_plane(&self) -> f64 {
        if self.focal_length.is_finite() {
            self.focal_length - self.z_offset
        } else {
            self.z_offset
        }
    }
}

/// Vacuum wavelength of light `detuning` Hz above the D2 line.
pub fn trap_wavelength(species: &AtomSpecies, detuning: f64) -> f64 {
    SPEED_OF_LIGHT / (SPEED_OF_LIGHT / species.wavelength_d2 + detuning)
}

/// Unwrapped mask phase n·φ plus the thin-lens term -πρ²/(λf).
pub fn slm_phase(rho: f64, phi: f64, spec: &BeamSpec) -> Result<f64> {
    if !(rho > 0.0) {
        return Err(Error::domain(format!("slm_phase is singular at rho = {rho}")));
    }
    Ok(spec.charge as f64 * phi + lens_phase(rho, spec))
}

fn lens_phase(rho: f64, spec: &BeamSpec) -> f64 {
    if spec.focal_length.is_finite() {
        -PI * rho * rho / (spec.wavelength * spec.focal_length)
    } else {
        0.0
    }
}

/// Reduces a phase to [0, 2π).
pub fn wrap_phase(phase: f64) -> f64 {
    let w = phase.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI { 0.0 } else { w }
}

/// Mask pixel values for a `size`² SLM with `pitch` spacing.
///
/// Pixel centers sit at half-integer offsets from the optical axis. If a
/// pixel center coincides with the axis its phase is 0.
pub fn slm_mask(spec: &BeamSpec, size: usize, pitch: f64) -> Result<Vec<u8>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(size * size);
    for i in 0..size {
        let y = grid::coord(i, size, pitch);
        for j in 0..size {
            let x = grid::coord(j, size, pitch);
            let rho = (x * x + y * y).sqrt();
            let phase = if rho == 0.0 { 0.0 } else { wrap_phase(slm_phase(rho, y.atan2(x), spec)?) };
            out.push(phase_to_gray(phase));
        }
    }
    Ok(out)
}

/// Maps [0, 2π) onto 256 equal gray levels.
pub fn phase_to_gray(phase: f64) -> u8 {
    ((phase / (2.0 * PI) * 256.0).floor() as i64).clamp(0, 255) as u8
}

pub fn mask_sha256(mask: &[u8]) -> String {
    hex_digest(&Sha256::digest(mask))
}

fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Field just after the SLM: Gaussian of `spec.power` carrying the vortex
/// (and, in sampled mode, the lens) phase.
pub fn slm_field(spec: &BeamSpec) -> Result<FieldGrid> {
    spec.validate()?;
    let n = spec.grid_size;
    let pitch = spec.pitch();
    let w0 = spec.input_waist;
    let charge = spec.charge as f64;
    let sampled_lens = spec.lens_mode == LensMode::Sampled;
    let aa = spec.antialias_radius_px as f64 * pitch;
    const SUB: usize = 8;
    let mut g = FieldGrid::from_fn(n, pitch, spec.wavelength, |x, y| {
        let r2 = x * x + y * y;
        let amp = (-r2 / (w0 * w0)).exp();
        let vortex = if charge != 0.0 && r2.sqrt() < aa {
            // box-filtered exp(i n φ) over the pixel footprint
            let mut acc = Complex64::new(0.0, 0.0);
            for a in 0..SUB {
                for b in 0..SUB {
                    let sx = x + ((a as f64 + 0.5) / SUB as f64 - 0.5) * pitch;
                    let sy = y + ((b as f64 + 0.5) / SUB as f64 - 0.5) * pitch;
                    acc += Complex64::from_polar(1.0, charge * sy.atan2(sx));
                }
            }
            acc / (SUB * SUB) as f64
        } else {
            Complex64::from_polar(1.0, charge * y.atan2(x))
        };
        let lens = if sampled_lens { lens_phase(r2.sqrt(), spec) } else { 0.0 };
        vortex * Complex64::from_polar(amp, lens)
    })?;
    g.vortex_charge = spec.charge;
    if !sampled_lens && spec.focal_length.is_finite() {
        g.curvature = Some(spec.focal_length);
    }
    g.normalize_power(spec.power);
    if sampled_lens && spec.focal_length.is_finite() {
        // the lens phase gradient peaks at the grid edge
        let edge = (n as f64 / 2.0) * pitch;
        let step = 2.0 * PI * edge * pitch / (spec.wavelength * spec.focal_length);
        if step >= ALIASING_THRESHOLD {
            return Err(Error::Aliasing(format!(
                "sampled lens needs {step:.3} rad per pixel at the grid edge (limit {ALIASING_THRESHOLD:.3}); \
                 reduce the pitch or use the factored lens"
            )));
        }
    }
    Ok(g)
}

/// Field at the operating plane.
pub fn beam_at_plane(spec: &BeamSpec) -> Result<FieldGrid> {
    let (out, diameter) = propagate_to_plane(spec)?;
    if !resolves(&out, diameter) {
        return Err(Error::config(format!(
            "grid extent {:.3e} m at the operating plane is below 4x the beam diameter {:.3e} m",
            out.extent(),
            diameter
        )));
    }
    Ok(out)
}

/// Field at the operating plane and its outer diameter, unchecked.
fn propagate_to_plane(spec: &BeamSpec) -> Result<(FieldGrid, f64)> {
    let slm = slm_field(spec)?;
    let mode = if spec.band_limit { BandLimit::WindowEscape } else { BandLimit::Off };
    let out = propagate(&slm, spec.distance_to_plane(), mode)?;
    let diameter = RadialProfile::from_grid(&out).outer_diameter();
    Ok((out, diameter))
}

fn resolves(out: &FieldGrid, diameter: f64) -> bool {
    out.extent() >= 4.0 * diameter
}

/// Far-detuned two-level dipole potential (J); positive (repulsive) for blue detuning.
pub fn dipole_potential(intensity: f64, detuning: f64, species: &AtomSpecies) -> Result<f64> {
    if !(detuning > 0.0 && detuning.is_finite()) {
        return Err(Error::domain(format!("detuning must be positive, got {detuning}")));
    }
    if !(intensity >= 0.0 && intensity.is_finite()) {
        return Err(Error::domain(format!("intensity must be finite and >= 0, got {intensity}")));
    }
    let gamma = species.linewidth;
    Ok(HBAR * gamma * gamma * intensity / (8.0 * (2.0 * PI * detuning) * species.saturation_intensity))
}

/// Objective used to pick the operating plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "objective", rename_all = "snake_case")]
pub enum PlaneObjective {
    /// Plane whose ring diameter is closest to `diameter` (m).
    RingDiameter { diameter: f64 },
    /// Plane with the largest ring peak intensity.
    MaxPeakIntensity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneScan {
    pub objective: PlaneObjective,
    pub z_min: f64,
    pub z_max: f64,
    pub step: f64,
}

impl Default for PlaneScan {
    fn default() -> Self {
        PlaneScan {
            objective: PlaneObjective::RingDiameter { diameter: 0.48e-3 },
            z_min: 0.015,
            z_max: 0.045,
            step: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanPoint {
    pub z_offset: f64,
    pub ring_diameter: Option<f64>,
    pub peak_intensity: f64,
    /// Grid wider than 4x the beam; unresolved planes are never selected.
    pub resolved: bool,
}

/// Scans z_offset and returns the selected value with every evaluated point.
pub fn select_operating_plane(spec: &BeamSpec, scan: &PlaneScan) -> Result<(f64, Vec<ScanPoint>)> {
    if !(scan.step > 0.0) || scan.z_max < scan.z_min {
        return Err(Error::config("plane scan needs step > 0 and z_max >= z_min"));
    }
    let count = ((scan.z_max - scan.z_min) / scan.step + 1e-9).floor() as usize + 1;
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let mut s = spec.clone();
        s.z_offset = scan.z_min + k as f64 * scan.step;
        let (field, diameter) = propagate_to_plane(&s)?;
        let profile = RadialProfile::from_grid(&field);
        points.push(ScanPoint {
            z_offset: s.z_offset,
            ring_diameter: profile.ring_radius().map(|r| 2.0 * r),
            peak_intensity: profile.peak_intensity(),
            resolved: resolves(&field, diameter),
        });
    }
    let best = match scan.objective {
        PlaneObjective::RingDiameter { diameter } => points
            .iter()
            .filter(|p| p.resolved)
            .filter_map(|p| p.ring_diameter.map(|d| ((d - diameter).abs(), p.z_offset)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, z)| z),
        PlaneObjective::MaxPeakIntensity => points
            .iter()
            .filter(|p| p.resolved)
            .max_by(|a, b| a.peak_intensity.total_cmp(&b.peak_intensity))
            .map(|p| p.z_offset),
    };
    let z = best.ok_or_else(|| Error::numerical("plane scan found no resolved ring at any offset"))?;
    Ok((z, points))
}
