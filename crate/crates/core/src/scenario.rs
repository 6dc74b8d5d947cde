//! Scenario files: one TOML document drives every subcommand.
//!
//! Physical keys carry a unit suffix (`bias_mg`, `tau_ms`, `power_mw`...).
//! Before deserialization every suffixed key is rewritten to the canonical
//! unit of its dimension, so the typed sections below only ever see `_g`,
//! `_m`, `_s`, `_hz`, `_w`, `_rad`, `_k` and `_w_m2`. Unknown keys are errors.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use crate::atomkinetics::{KineticsConfig, RecoilModel, ScatterSchedule};
use crate::beamforge::{trap_wavelength, BeamSpec, LensMode, PlaneObjective, PlaneScan};
use crate::compensator::{LoopScenario, ModelConfig};
use crate::error::{Error, Result};
use crate::fieldscape::{Eddy, FieldTimeline, Harmonic};
use crate::physconst::{AtomSpecies, Dimension, UnitPolicy};
use crate::rng::SeedTree;
use crate::spectra::{AnalysisConfig, WindowKind};
use crate::spinsim::{Envelope, PhaseMode, PumpProbeSchedule, SpinModel, SynthConfig};

/// Names of the shipped presets, in display order.
pub const PRESETS: &[&str] = &[
    "fig2_trapped",
    "fig2_untrapped",
    "fig4_uncompensated",
    "fig4_60hz",
    "fig4_full",
    "fig6_noisefloor",
    "fig7_boil",
    "fig8_revivals",
];

fn preset_text(name: &str) -> Option<&'static str> {
    Some(match name {
        "fig2_trapped" => include_str!("../presets/fig2_trapped.toml"),
        "fig2_untrapped" => include_str!("../presets/fig2_untrapped.toml"),
        "fig4_uncompensated" => include_str!("../presets/fig4_uncompensated.toml"),
        "fig4_60hz" => include_str!("../presets/fig4_60hz.toml"),
        "fig4_full" => include_str!("../presets/fig4_full.toml"),
        "fig6_noisefloor" => include_str!("../presets/fig6_noisefloor.toml"),
        "fig7_boil" => include_str!("../presets/fig7_boil.toml"),
        "fig8_revivals" => include_str!("../presets/fig8_revivals.toml"),
        _ => return None,
    })
}

fn canonical_suffix(d: Dimension) -> &'static str {
    match d {
        Dimension::Field => "g",
        Dimension::Intensity => "w_m2",
        Dimension::Length => "m",
        Dimension::Time => "s",
        Dimension::Frequency => "hz",
        Dimension::Power => "w",
        Dimension::Angle => "rad",
        Dimension::Temperature => "k",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    /// Root of every random substream.
    pub seed: u64,
    pub species: String,
    pub beam: BeamSection,
    pub field: FieldSection,
    pub schedule: ScheduleSection,
    pub synth: SynthSection,
    pub analysis: AnalysisSection,
    pub compensation: CompensationSection,
    pub kinetics: KineticsSection,
    pub spin: SpinSection,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            name: "default".into(),
            seed: 1,
            species: "rb85".into(),
            beam: BeamSection::default(),
            field: FieldSection::default(),
            schedule: ScheduleSection::default(),
            synth: SynthSection::default(),
            analysis: AnalysisSection::default(),
            compensation: CompensationSection::default(),
            kinetics: KineticsSection::default(),
            spin: SpinSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamSection {
    pub charge: i32,
    pub input_waist_m: f64,
    /// Zero or negative removes the lens term.
    pub focal_length_m: f64,
    pub power_w: f64,
    pub detuning_hz: f64,
    pub z_offset_m: f64,
    pub grid_size: usize,
    /// Defaults to 12 input waists.
    pub grid_extent_m: Option<f64>,
    /// `factored` or `sampled`.
    pub lens_mode: String,
    pub antialias_radius_px: usize,
    pub band_limit: bool,
    pub gravity: bool,
    /// Scan z_offset before building the trap.
    pub optimize_plane: bool,
    /// `ring_diameter` or `max_peak_intensity`.
    pub objective: String,
    pub target_ring_diameter_m: f64,
    pub scan_min_m: f64,
    pub scan_max_m: f64,
    pub scan_step_m: f64,
    /// Extra z offsets at which intensity slices are written.
    pub extra_planes_m: Vec<f64>,
}

impl Default for BeamSection {
    fn default() -> Self {
        let b = BeamSpec::default_for(&AtomSpecies::rb85());
        let scan = PlaneScan::default();
        BeamSection {
            charge: b.charge,
            input_waist_m: b.input_waist,
            focal_length_m: b.focal_length,
            power_w: b.power,
            detuning_hz: b.detuning,
            z_offset_m: b.z_offset,
            grid_size: b.grid_size,
            grid_extent_m: None,
            lens_mode: "factored".into(),
            antialias_radius_px: b.antialias_radius_px,
            band_limit: b.band_limit,
            gravity: b.gravity,
            optimize_plane: false,
            objective: "ring_diameter".into(),
            target_ring_diameter_m: 0.48e-3,
            scan_min_m: scan.z_min,
            scan_max_m: scan.z_max,
            scan_step_m: scan.step,
            extra_planes_m: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EddySection {
    pub amplitude_g: f64,
    pub tau_s: f64,
}

impl Default for EddySection {
    fn default() -> Self {
        EddySection { amplitude_g: 0.0, tau_s: 20e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarmonicSection {
    pub frequency_hz: f64,
    pub amplitude_g: f64,
    pub phase_rad: f64,
}

impl Default for HarmonicSection {
    fn default() -> Self {
        HarmonicSection { frequency_hz: 60.0, amplitude_g: 0.0, phase_rad: 0.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftKnot {
    pub t_s: f64,
    pub field_g: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub bias_g: f64,
    pub line_frequency_hz: f64,
    pub noise_density_g_rthz: f64,
    pub noise_rate_hz: f64,
    pub eddy: Vec<EddySection>,
    pub harmonic: Vec<HarmonicSection>,
    pub drift: Vec<DriftKnot>,
}

impl Default for FieldSection {
    fn default() -> Self {
        let f = FieldTimeline::constant(0.1);
        FieldSection {
            bias_g: f.bias,
            line_frequency_hz: f.line_frequency,
            noise_density_g_rthz: f.noise_density,
            noise_rate_hz: f.noise_rate,
            eddy: Vec::new(),
            harmonic: Vec::new(),
            drift: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub cycle_period_s: f64,
    pub pump_duration_s: f64,
    pub cycles: usize,
    pub averages: u32,
    pub sample_rate_hz: f64,
    /// Defaults to the cycle period minus the pump.
    pub probe_window_s: Option<f64>,
    pub start_time_s: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = PumpProbeSchedule::default();
        ScheduleSection {
            cycle_period_s: s.cycle_period,
            pump_duration_s: s.pump_duration,
            cycles: s.cycles,
            averages: s.averages,
            sample_rate_hz: s.sample_rate,
            probe_window_s: None,
            start_time_s: s.start_time,
        }
    }
}

/// Per-variant overrides; unset keys keep the variant's own default.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantSection {
    pub decay_tau_s: Option<f64>,
    /// `exponential`, `ballistic` or `constant`.
    pub envelope: Option<String>,
    /// 1/e time of the envelope.
    pub envelope_tau_s: Option<f64>,
    /// Ballistic exponent p in exp(-(T/T_e)^p).
    pub envelope_exponent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub snr: f64,
    pub amplitude_v: f64,
    /// `fixed` or `random`.
    pub phase: String,
    pub phi0_rad: f64,
    pub cycle_field_jitter_g: f64,
    pub trigger_jitter_s: f64,
    pub noise: bool,
    /// `csv`, `binary` or `both`.
    pub format: String,
    /// Subset of `trapped`, `untrapped`.
    pub variants: Vec<String>,
    pub trapped: VariantSection,
    pub untrapped: VariantSection,
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::trapped(0);
        SynthSection {
            snr: c.snr,
            amplitude_v: c.amplitude,
            phase: "fixed".into(),
            phi0_rad: 0.0,
            cycle_field_jitter_g: 0.0,
            trigger_jitter_s: 0.0,
            noise: true,
            format: "csv".into(),
            variants: vec!["trapped".into(), "untrapped".into()],
            trapped: VariantSection::default(),
            untrapped: VariantSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub zero_pad: usize,
    /// `rectangular` or `hann`.
    pub window: String,
    pub region_widths: f64,
    pub peak_threshold: f64,
    pub max_iterations: usize,
    pub xtol: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let a = AnalysisConfig::default();
        AnalysisSection {
            zero_pad: a.zero_pad,
            window: "rectangular".into(),
            region_widths: a.region_widths,
            peak_threshold: a.peak_threshold,
            max_iterations: a.max_iterations,
            xtol: a.xtol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationSection {
    pub harmonics_hz: Vec<f64>,
    pub fit_eddy: bool,
    pub eddy_only: bool,
    pub tau_min_s: f64,
    pub tau_max_s: f64,
    pub tau_grid: usize,
    pub min_windows: usize,
    pub bandwidth_hz: f64,
    pub iterations: usize,
}

impl Default for CompensationSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        CompensationSection {
            harmonics_hz: m.harmonics,
            fit_eddy: m.fit_eddy,
            eddy_only: m.eddy_only,
            tau_min_s: m.tau_min,
            tau_max_s: m.tau_max,
            tau_grid: m.tau_grid,
            min_windows: m.min_windows,
            bandwidth_hz: 1000.0,
            iterations: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KineticsSection {
    pub samples: usize,
    pub atoms: f64,
    pub cloud_diameter_m: f64,
    pub temperature_k: f64,
    pub dt_s: f64,
    pub duration_s: f64,
    pub record_interval_s: f64,
    pub check_every: usize,
    pub energy_factor: f64,
    pub box_radius_m: f64,
    pub aperture_m: f64,
    pub gravity: bool,
    pub boltzmann_loading: bool,
    pub bootstrap: usize,
    /// Off runs the ensemble with no trap light at all.
    pub trap: bool,
    pub cycle_period_s: f64,
    pub pump_duration_s: f64,
    pub pump_photons: f64,
    pub probe_rate_hz: f64,
    pub trap_scale: f64,
    /// `absorption_emission` or `lumped`.
    pub recoil: String,
}

impl Default for KineticsSection {
    fn default() -> Self {
        let k = KineticsConfig::default();
        let s = ScatterSchedule::boil_default();
        KineticsSection {
            samples: k.samples,
            atoms: k.atoms,
            cloud_diameter_m: k.cloud_diameter,
            temperature_k: k.temperature,
            dt_s: k.dt,
            duration_s: k.duration,
            record_interval_s: k.record_interval,
            check_every: k.check_every,
            energy_factor: k.energy_factor,
            box_radius_m: k.box_radius,
            aperture_m: k.aperture,
            gravity: k.gravity,
            boltzmann_loading: k.boltzmann_loading,
            bootstrap: 200,
            trap: true,
            cycle_period_s: s.cycle_period,
            pump_duration_s: s.pump_duration,
            pump_photons: s.pump_photons,
            probe_rate_hz: s.probe_rate,
            trap_scale: s.trap_scale,
            recoil: "absorption_emission".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpinSection {
    pub f: u32,
    /// Defaults to the Larmor frequency of the field bias.
    pub larmor_hz: Option<f64>,
    /// Secular revival time π/β at θ = 0; zero disables the tensor shift.
    pub revival_time_s: f64,
    /// Zero disables damping.
    pub damping_tau_s: f64,
    pub angles_rad: Vec<f64>,
    pub snr: f64,
    pub amplitude_v: f64,
}

impl Default for SpinSection {
    fn default() -> Self {
        SpinSection {
            f: 3,
            larmor_hz: None,
            revival_time_s: 0.5e-3,
            damping_tau_s: 0.7e-3,
            angles_rad: vec![0.0, 54.7_f64.to_radians()],
            snr: 15.0,
            amplitude_v: 1.0,
        }
    }
}

/// Rewrites every unit-suffixed key of `table` (recursively) to the
/// canonical unit of its dimension.
pub fn normalize_units(table: &mut Table, path: &str) -> Result<()> {
    let keys: Vec<String> = table.keys().cloned().collect();
    for key in keys {
        let here = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
        if let Some((base, unit, dim, factor)) = UnitPolicy::split_key(&key) {
            let target = format!("{base}_{}", canonical_suffix(dim));
            let value = table.remove(&key).expect("key listed");
            let scaled = scale_value(value, factor, &here)?;
            if target != key && table.contains_key(&target) {
                return Err(Error::config(format!(
                    "{here}: {base} is given twice (as _{unit} and _{})",
                    canonical_suffix(dim)
                )));
            }
            table.insert(target, scaled);
            continue;
        }
        match table.get_mut(&key) {
            Some(Value::Table(t)) => normalize_units(t, &here)?,
            Some(Value::Array(items)) => {
                for (i, item) in items.iter_mut().enumerate() {
                    if let Value::Table(t) = item {
                        normalize_units(t, &format!("{here}.{i}"))?;
                    }
                }
            }
            _ => {}
        }
    }
    Ok(())
}

fn scale_value(value: Value, factor: f64, at: &str) -> Result<Value> {
    match value {
        Value::Integer(i) => Ok(Value::Float(i as f64 * factor)),
        Value::Float(x) => Ok(Value::Float(x * factor)),
        Value::Array(items) => items
            .into_iter()
            .map(|v| scale_value(v, factor, at))
            .collect::<Result<Vec<_>>>()
            .map(Value::Array),
        other => Err(Error::config(format!("{at}: expected a number, got {}", other.type_str()))),
    }
}

/// Applies `path=value` to the raw document. Dotted paths address tables;
/// numeric segments index arrays of tables. A unit-suffixed key replaces
/// any sibling that names the same quantity in another unit.
pub fn apply_override(doc: &mut Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override '{assignment}' is not of the form key=value")))?;
    let path = path.trim();
    let value = parse_scalar(raw.trim());
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::config(format!("override path '{path}' has an empty segment")));
    }
    let (leaf, parents) = segments.split_last().expect("non-empty");
    let mut table = doc;
    let mut k = 0;
    while k < parents.len() {
        let seg = parents[k];
        if seg.parse::<usize>().is_ok() {
            return Err(Error::config(format!("override path '{path}': index '{seg}' must follow an array key")));
        }
        if let Some(idx) = parents.get(k + 1).and_then(|s| s.parse::<usize>().ok()) {
            let arr = match table.get_mut(seg) {
                Some(Value::Array(a)) => a,
                _ => return Err(Error::config(format!("override path '{path}': '{seg}' is not an array"))),
            };
            let len = arr.len();
            table = match arr.get_mut(idx) {
                Some(Value::Table(t)) => t,
                _ => {
                    return Err(Error::config(format!(
                        "override path '{path}': '{seg}' has {len} table entries, no index {idx}"
                    )))
                }
            };
            k += 2;
        } else {
            let entry = table.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
            table = match entry {
                Value::Table(t) => t,
                _ => return Err(Error::config(format!("override path '{path}': '{seg}' is not a table"))),
            };
            k += 1;
        }
    }
    if matches!(table.get(*leaf), Some(Value::Table(_))) {
        return Err(Error::config(format!("override '{path}' names a table; only scalar keys can be set")));
    }
    if let Some((base, _, dim, _)) = UnitPolicy::split_key(leaf) {
        let same: Vec<String> = table
            .keys()
            .filter(|k| UnitPolicy::split_key(k).is_some_and(|(b, _, d, _)| b == base && d == dim))
            .cloned()
            .collect();
        for k in same {
            table.remove(&k);
        }
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

/// TOML literal if it parses as one, bare string otherwise.
fn parse_scalar(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .filter(|v| !matches!(v, Value::Table(_)))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

impl Scenario {
    /// Parses a scenario document, applying `overrides` before unit
    /// normalization.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
            Error::parse(line, e.message().to_string())
        })?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        normalize_units(&mut doc, "")?;
        let scenario: Scenario = Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("scenario: {}", e.message())))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn preset(name: &str, overrides: &[String]) -> Result<Self> {
        let text = preset_text(name).ok_or_else(|| {
            Error::config(format!("unknown preset '{name}' (known: {})", PRESETS.join(", ")))
        })?;
        Self::from_toml(text, overrides)
    }

    /// Canonical TOML of the resolved scenario.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    /// SHA-256 of the canonical TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.species()?;
        self.lens_mode()?;
        self.plane_objective()?;
        self.phase_mode()?;
        self.window_kind()?;
        self.recoil_model()?;
        for v in &self.synth.variants {
            self.variant(v)?;
        }
        match self.synth.format.as_str() {
            "csv" | "binary" | "both" => Ok(()),
            other => Err(Error::config(format!("synth.format '{other}' is not csv, binary or both"))),
        }
    }

    pub fn species(&self) -> Result<AtomSpecies> {
        match self.species.to_ascii_lowercase().as_str() {
            "rb85" => Ok(AtomSpecies::rb85()),
            other => Err(Error::config(format!("unsupported species '{other}' (only rb85)"))),
        }
    }

    /// Labeled seed for one consumer of randomness.
    pub fn seed_for(&self, label: &str) -> u64 {
        SeedTree::new(self.seed).child(label).fingerprint()
    }

    fn lens_mode(&self) -> Result<LensMode> {
        match self.beam.lens_mode.as_str() {
            "factored" => Ok(LensMode::Factored),
            "sampled" => Ok(LensMode::Sampled),
            other => Err(Error::config(format!("beam.lens_mode '{other}' is not factored or sampled"))),
        }
    }

    fn plane_objective(&self) -> Result<PlaneObjective> {
        match self.beam.objective.as_str() {
            "ring_diameter" => Ok(PlaneObjective::RingDiameter { diameter: self.beam.target_ring_diameter_m }),
            "max_peak_intensity" => Ok(PlaneObjective::MaxPeakIntensity),
            other => Err(Error::config(format!(
                "beam.objective '{other}' is not ring_diameter or max_peak_intensity"
            ))),
        }
    }

    fn phase_mode(&self) -> Result<PhaseMode> {
        match self.synth.phase.as_str() {
            "fixed" => Ok(PhaseMode::Fixed { phi0: self.synth.phi0_rad }),
            "random" => Ok(PhaseMode::Random),
            other => Err(Error::config(format!("synth.phase '{other}' is not fixed or random"))),
        }
    }

    fn window_kind(&self) -> Result<WindowKind> {
        match self.analysis.window.as_str() {
            "rectangular" => Ok(WindowKind::Rectangular),
            "hann" => Ok(WindowKind::Hann),
            other => Err(Error::config(format!("analysis.window '{other}' is not rectangular or hann"))),
        }
    }

    fn recoil_model(&self) -> Result<RecoilModel> {
        match self.kinetics.recoil.as_str() {
            "absorption_emission" => Ok(RecoilModel::AbsorptionEmission),
            "lumped" => Ok(RecoilModel::Lumped),
            other => Err(Error::config(format!(
                "kinetics.recoil '{other}' is not absorption_emission or lumped"
            ))),
        }
    }

    pub fn beam_spec(&self) -> Result<BeamSpec> {
        let species = self.species()?;
        let b = &self.beam;
        let spec = BeamSpec {
            charge: b.charge,
            input_waist: b.input_waist_m,
            focal_length: if b.focal_length_m > 0.0 { b.focal_length_m } else { f64::INFINITY },
            wavelength: trap_wavelength(&species, b.detuning_hz),
            power: b.power_w,
            detuning: b.detuning_hz,
            z_offset: b.z_offset_m,
            grid_size: b.grid_size,
            grid_extent: b.grid_extent_m.unwrap_or(12.0 * b.input_waist_m),
            lens_mode: self.lens_mode()?,
            antialias_radius_px: b.antialias_radius_px,
            band_limit: b.band_limit,
            gravity: b.gravity,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Plane scan to run before building the trap, if requested.
    pub fn plane_scan(&self) -> Result<Option<PlaneScan>> {
        if !self.beam.optimize_plane {
            return Ok(None);
        }
        Ok(Some(PlaneScan {
            objective: self.plane_objective()?,
            z_min: self.beam.scan_min_m,
            z_max: self.beam.scan_max_m,
            step: self.beam.scan_step_m,
        }))
    }

    pub fn field_timeline(&self) -> Result<FieldTimeline> {
        let f = &self.field;
        let t = FieldTimeline {
            bias: f.bias_g,
            line_frequency: f.line_frequency_hz,
            eddies: f.eddy.iter().map(|e| Eddy { amplitude: e.amplitude_g, tau: e.tau_s }).collect(),
            harmonics: f
                .harmonic
                .iter()
                .map(|h| Harmonic { frequency: h.frequency_hz, amplitude: h.amplitude_g, phase: h.phase_rad })
                .collect(),
            drift: f.drift.iter().map(|d| (d.t_s, d.field_g)).collect(),
            noise_density: f.noise_density_g_rthz,
            noise_rate: f.noise_rate_hz,
            seed: self.seed_for("field-noise"),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn schedule(&self) -> Result<PumpProbeSchedule> {
        let s = &self.schedule;
        let sched = PumpProbeSchedule {
            cycle_period: s.cycle_period_s,
            pump_duration: s.pump_duration_s,
            cycles: s.cycles,
            averages: s.averages,
            sample_rate: s.sample_rate_hz,
            probe_window: s.probe_window_s.unwrap_or(s.cycle_period_s - s.pump_duration_s),
            start_time: s.start_time_s,
        };
        sched.validate()?;
        Ok(sched)
    }

    /// Synthesis settings for `trapped` or `untrapped`.
    pub fn variant(&self, name: &str) -> Result<SynthConfig> {
        let seed = self.seed_for(&format!("synth-{name}"));
        let (mut c, v) = match name {
            "trapped" => (SynthConfig::trapped(seed), &self.synth.trapped),
            "untrapped" => (SynthConfig::untrapped(seed), &self.synth.untrapped),
            other => return Err(Error::config(format!("synth variant '{other}' is not trapped or untrapped"))),
        };
        let s = &self.synth;
        c.snr = s.snr;
        c.amplitude = s.amplitude_v;
        c.phase = self.phase_mode()?;
        c.cycle_field_jitter = s.cycle_field_jitter_g;
        c.trigger_jitter = s.trigger_jitter_s;
        c.noise = s.noise;
        if let Some(tau) = v.decay_tau_s {
            c.decay_tau = tau;
        }
        let (default_tau, default_exp) = match c.envelope {
            Envelope::Exponential { tau } => (tau, 2.0),
            Envelope::Ballistic { t_e, exponent } => (t_e, exponent),
            _ => (0.15, 2.0),
        };
        let kind = v.envelope.clone().unwrap_or_else(|| c.envelope.tag().to_string());
        let tau = v.envelope_tau_s.unwrap_or(default_tau);
        c.envelope = match kind.as_str() {
            "exponential" => Envelope::Exponential { tau },
            "ballistic" => Envelope::Ballistic { t_e: tau, exponent: v.envelope_exponent.unwrap_or(default_exp) },
            "constant" => Envelope::Constant,
            other => {
                return Err(Error::config(format!(
                    "synth.{name}.envelope '{other}' is not exponential, ballistic or constant"
                )))
            }
        };
        Ok(c)
    }

    pub fn analysis_config(&self) -> Result<AnalysisConfig> {
        let a = &self.analysis;
        Ok(AnalysisConfig {
            zero_pad: a.zero_pad,
            window: self.window_kind()?,
            region_widths: a.region_widths,
            peak_threshold: a.peak_threshold,
            max_iterations: a.max_iterations,
            xtol: a.xtol,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        let c = &self.compensation;
        ModelConfig {
            harmonics: c.harmonics_hz.clone(),
            fit_eddy: c.fit_eddy,
            tau_min: c.tau_min_s,
            tau_max: c.tau_max_s,
            tau_grid: c.tau_grid,
            min_windows: c.min_windows,
            line_frequency: self.field.line_frequency_hz,
            eddy_only: c.eddy_only,
        }
    }

    /// Closed-loop setup measured with the trapped variant.
    pub fn loop_scenario(&self) -> Result<LoopScenario> {
        Ok(LoopScenario {
            truth: self.field_timeline()?,
            schedule: self.schedule()?,
            synth: self.variant("trapped")?,
            analysis: self.analysis_config()?,
            model: self.model_config(),
            bandwidth: self.compensation.bandwidth_hz,
            species: self.species()?,
        })
    }

    pub fn kinetics_config(&self) -> Result<KineticsConfig> {
        let k = &self.kinetics;
        let c = KineticsConfig {
            samples: k.samples,
            atoms: k.atoms,
            cloud_diameter: k.cloud_diameter_m,
            temperature: k.temperature_k,
            dt: k.dt_s,
            duration: k.duration_s,
            record_interval: k.record_interval_s,
            check_every: k.check_every,
            energy_factor: k.energy_factor,
            box_radius: k.box_radius_m,
            aperture: k.aperture_m,
            gravity: k.gravity,
            boltzmann_loading: k.boltzmann_loading,
            seed: self.seed_for("kinetics"),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn scatter_schedule(&self) -> Result<ScatterSchedule> {
        let k = &self.kinetics;
        let s = ScatterSchedule {
            cycle_period: k.cycle_period_s,
            pump_duration: k.pump_duration_s,
            pump_photons: k.pump_photons,
            probe_rate: k.probe_rate_hz,
            trap_scale: k.trap_scale,
            recoil: self.recoil_model()?,
        };
        s.validate()?;
        Ok(s)
    }

    /// One spin model per configured probe angle.
    pub fn spin_models(&self) -> Result<Vec<SpinModel>> {
        let s = &self.spin;
        let species = self.species()?;
        let larmor = s.larmor_hz.unwrap_or(self.field.bias_g * species.gyromagnetic_factor);
        let beta = if s.revival_time_s > 0.0 { std::f64::consts::PI / s.revival_time_s } else { 0.0 };
        let damping = if s.damping_tau_s > 0.0 { 1.0 / s.damping_tau_s } else { 0.0 };
        if s.angles_rad.is_empty() {
            return Err(Error::config("spin.angles needs at least one angle"));
        }
        s.angles_rad
            .iter()
            .map(|&theta| {
                let m = SpinModel { f: s.f, omega_l: 2.0 * std::f64::consts::PI * larmor, beta, theta, damping };
                m.validate()?;
                Ok(m)
            })
            .collect()
    }
}
