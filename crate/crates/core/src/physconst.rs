//! Physical constants, the ⁸⁵Rb species table, and the handful of
//! frequency/field conversions the rest of the crate is built on.
//!
//! Public interfaces use linear frequency (Hz). Angular quantities only
//! appear inside formulas and are marked as such.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Planck constant (J·s), exact SI value.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Reduced Planck constant (J·s).
pub const HBAR: f64 = PLANCK / (2.0 * PI);
/// Boltzmann constant (J/K), exact SI value.
pub const BOLTZMANN: f64 = 1.380_649e-23;
/// Atomic mass constant (kg), CODATA 2018.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Standard gravity (m/s²).
pub const STANDARD_GRAVITY: f64 = 9.806_65;
/// Speed of light (m/s), exact.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// Tesla per gauss.
pub const TESLA_PER_GAUSS: f64 = 1e-4;

/// Static description of an alkali species driven on its D2 line.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpecies {
    pub name: &'static str,
    /// kg
    pub mass: f64,
    /// D2 wavelength in vacuum (m).
    pub wavelength_d2: f64,
    /// Natural linewidth Γ, angular (rad/s).
    pub linewidth: f64,
    /// Saturation intensity (W/m²).
    pub saturation_intensity: f64,
    /// g_F μ_B / h in linear-frequency convention (Hz per gauss).
    pub gyromagnetic_factor: f64,
    pub hyperfine_f: u32,
}

impl AtomSpecies {
    /// ⁸⁵Rb, F = 3 ground state.
    ///
    /// Mass, wavelength and linewidth are the standard tabulated D2 values;
    /// the gyromagnetic factor and saturation intensity are the values used
    /// in the reference experiment.
    pub const fn rb85() -> Self {
        AtomSpecies {
            name: "Rb85",
            mass: 84.911_789_738 * ATOMIC_MASS_UNIT,
            wavelength_d2: 780.241_368_271e-9,
            linewidth: 2.0 * PI * 6.066e6,
            saturation_intensity: 16.0,
            gyromagnetic_factor: 466_741.5,
            hyperfine_f: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("wavelength_d2", self.wavelength_d2),
            ("linewidth", self.linewidth),
            ("saturation_intensity", self.saturation_intensity),
            ("gyromagnetic_factor", self.gyromagnetic_factor),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!(
                    "species {}: {name} must be finite and positive, got {v}",
                    self.name
                )));
            }
        }
        Ok(())
    }

    /// Optical wavenumber k = 2π/λ (rad/m).
    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength_d2
    }

    /// Single-photon recoil velocity ħk/m (m/s).
    pub fn recoil_velocity(&self) -> f64 {
        HBAR * self.wavenumber() / self.mass
    }

    /// ħΓ (J).
    pub fn hbar_gamma(&self) -> f64 {
        HBAR * self.linewidth
    }

    /// Linewidth in linear frequency (Hz).
    pub fn linewidth_hz(&self) -> f64 {
        self.linewidth / (2.0 * PI)
    }
}

impl Default for AtomSpecies {
    fn default() -> Self {
        Self::rb85()
    }
}

/// Larmor precession frequency |B|·(g_Fμ_B/h) in Hz for a field in gauss.
///
/// The sign of `b_gauss` only sets the precession sense; the magnitude is
/// returned.
pub fn larmor_frequency(b_gauss: f64, species: &AtomSpecies) -> Result<f64> {
    if !b_gauss.is_finite() {
        return Err(Error::domain(format!("field must be finite, got {b_gauss}")));
    }
    Ok(b_gauss.abs() * species.gyromagnetic_factor)
}

/// Inverse of [`larmor_frequency`]: field magnitude (gauss) for a Larmor
/// frequency in Hz.
pub fn field_from_frequency(nu_hz: f64, species: &AtomSpecies) -> Result<f64> {
    if !nu_hz.is_finite() || nu_hz < 0.0 {
        return Err(Error::domain(format!(
            "Larmor frequency must be finite and non-negative, got {nu_hz}"
        )));
    }
    Ok(nu_hz / species.gyromagnetic_factor)
}

/// Recoil energy ħ²k²/2m (J) on the D2 line.
pub fn recoil_energy(species: &AtomSpecies) -> Result<f64> {
    species.validate()?;
    let k = species.wavenumber();
    Ok(HBAR * HBAR * k * k / (2.0 * species.mass))
}

/// Atom-shot-noise-limited field resolution (gauss) for `atoms` atoms,
/// spin-coherence time `coherence_s` and measurement time `measurement_s`.
///
/// Uses the linear-frequency gyromagnetic factor with no extra 2π:
/// δB = 1 / (g · √(N τ T_m)).
pub fn shot_noise_limit(
    atoms: f64,
    coherence_s: f64,
    measurement_s: f64,
    species: &AtomSpecies,
) -> Result<f64> {
    if !(atoms.is_finite() && atoms >= 1.0) {
        return Err(Error::domain(format!("atom number must be >= 1, got {atoms}")));
    }
    if !(coherence_s.is_finite() && coherence_s > 0.0) {
        return Err(Error::domain(format!(
            "coherence time must be positive, got {coherence_s}"
        )));
    }
    if !(measurement_s.is_finite() && measurement_s > 0.0) {
        return Err(Error::domain(format!(
            "measurement time must be positive, got {measurement_s}"
        )));
    }
    Ok(1.0 / (species.gyromagnetic_factor * (atoms * coherence_s * measurement_s).sqrt()))
}

/// One row of the exported constants table.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantEntry {
    pub key: &'static str,
    pub value: f64,
    pub unit: &'static str,
    pub source: &'static str,
}

/// Every numeric constant in the crate, with provenance, in one table.
pub fn constants_table() -> Vec<ConstantEntry> {
    let rb = AtomSpecies::rb85();
    vec![
        ConstantEntry { key: "planck", value: PLANCK, unit: "J*s", source: "SI exact" },
        ConstantEntry { key: "hbar", value: HBAR, unit: "J*s", source: "SI exact" },
        ConstantEntry { key: "boltzmann", value: BOLTZMANN, unit: "J/K", source: "SI exact" },
        ConstantEntry { key: "atomic_mass_unit", value: ATOMIC_MASS_UNIT, unit: "kg", source: "CODATA 2018" },
        ConstantEntry { key: "standard_gravity", value: STANDARD_GRAVITY, unit: "m/s^2", source: "conventional" },
        ConstantEntry { key: "speed_of_light", value: SPEED_OF_LIGHT, unit: "m/s", source: "SI exact" },
        ConstantEntry { key: "rb85.mass", value: rb.mass, unit: "kg", source: "tabulated 85Rb atomic mass (assumed)" },
        ConstantEntry { key: "rb85.wavelength_d2", value: rb.wavelength_d2, unit: "m", source: "tabulated 85Rb D2 line (assumed)" },
        ConstantEntry { key: "rb85.linewidth", value: rb.linewidth, unit: "rad/s", source: "2pi x 6.066 MHz, tabulated D2 value (assumed)" },
        ConstantEntry { key: "rb85.saturation_intensity", value: rb.saturation_intensity, unit: "W/m^2", source: "experiment value 1.6 mW/cm^2" },
        ConstantEntry { key: "rb85.gyromagnetic_factor", value: rb.gyromagnetic_factor, unit: "Hz/G", source: "experiment value 466.7415 kHz/G" },
        ConstantEntry { key: "rb85.hyperfine_f", value: rb.hyperfine_f as f64, unit: "1", source: "F=3 ground state" },
    ]
}

/// Constants table as CSV (`key,value,unit,source`).
pub fn constants_csv() -> String {
    let mut out = String::from("key,value,unit,source\n");
    for c in constants_table() {
        out.push_str(&format!("{},{:e},{},\"{}\"\n", c.key, c.value, c.unit, c.source));
    }
    out
}

/// Physical dimension of an accepted input unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dimension {
    Field,
    Intensity,
    Length,
    Time,
    Frequency,
    Power,
    Angle,
    Temperature,
}

/// Conversion table between accepted input units and canonical units.
///
/// Canonical units are SI except for magnetic field, which is kept in gauss
/// because the gyromagnetic factor is tabulated per gauss.
pub struct UnitPolicy;

impl UnitPolicy {
    const TABLE: &'static [(&'static str, Dimension, f64)] = &[
        ("g", Dimension::Field, 1.0),
        ("mg", Dimension::Field, 1e-3),
        ("ug", Dimension::Field, 1e-6),
        ("t", Dimension::Field, 1e4),
        ("nt", Dimension::Field, 1e-5),
        ("w_m2", Dimension::Intensity, 1.0),
        ("mw_cm2", Dimension::Intensity, 10.0),
        ("m", Dimension::Length, 1.0),
        ("mm", Dimension::Length, 1e-3),
        ("um", Dimension::Length, 1e-6),
        ("nm", Dimension::Length, 1e-9),
        ("s", Dimension::Time, 1.0),
        ("ms", Dimension::Time, 1e-3),
        ("us", Dimension::Time, 1e-6),
        ("hz", Dimension::Frequency, 1.0),
        ("khz", Dimension::Frequency, 1e3),
        ("mhz", Dimension::Frequency, 1e6),
        ("ghz", Dimension::Frequency, 1e9),
        ("w", Dimension::Power, 1.0),
        ("mw", Dimension::Power, 1e-3),
        ("rad", Dimension::Angle, 1.0),
        ("deg", Dimension::Angle, PI / 180.0),
        ("k", Dimension::Temperature, 1.0),
        ("uk", Dimension::Temperature, 1e-6),
    ];

    /// Dimension and factor-to-canonical for a unit suffix (case-insensitive).
    pub fn lookup(unit: &str) -> Option<(Dimension, f64)> {
        let unit = unit.to_ascii_lowercase();
        Self::TABLE
            .iter()
            .find(|(name, _, _)| *name == unit)
            .map(|&(_, d, f)| (d, f))
    }

    pub fn to_canonical(value: f64, unit: &str) -> Result<f64> {
        let (_, factor) =
            Self::lookup(unit).ok_or_else(|| Error::config(format!("unknown unit '{unit}'")))?;
        Ok(value * factor)
    }

    pub fn from_canonical(value: f64, unit: &str) -> Result<f64> {
        let (_, factor) =
            Self::lookup(unit).ok_or_else(|| Error::config(format!("unknown unit '{unit}'")))?;
        Ok(value / factor)
    }

    /// Splits `name_unit` keys such as `bias_mg` into (`bias`, `mg`), trying
    /// the longest matching suffix first.
    pub fn split_key(key: &str) -> Option<(&str, &'static str, Dimension, f64)> {
        let mut best: Option<(&str, &'static str, Dimension, f64)> = None;
        for &(name, dim, factor) in Self::TABLE {
            let suffix_len = name.len() + 1;
            if key.len() > suffix_len
                && key.ends_with(name)
                && key.as_bytes()[key.len() - suffix_len] == b'_'
                && best.is_none_or(|b| b.1.len() < name.len())
            {
                best = Some((&key[..key.len() - suffix_len], name, dim, factor));
            }
        }
        best
    }
}
