//! One function per subcommand. Each loads the scenario, writes its
//! artifacts and finishes the manifest.

use std::f64::consts::PI;
use std::path::Path;

use darktrap_core::atomkinetics::{boil_estimate, survival_curve, AtomEnsemble, Environment};
use darktrap_core::beamforge::{
    beam_at_plane, crossed_trap, mask_sha256, select_operating_plane, slm_mask, trap_report, BeamSpec, FieldGrid,
    RadialProfile, TrapPotential,
};
use darktrap_core::compensator::closed_loop;
use darktrap_core::export::{pgm_bytes, scale_to_gray, xy_csv};
use darktrap_core::fit::first_crossing;
use darktrap_core::kv::{format_f64, KvWriter};
use darktrap_core::scenario::Scenario;
use darktrap_core::spectra::{envelope_decay, field_spectrum, nu_timeline, rasterize};
use darktrap_core::spinsim::{
    quantum_evolve, read_trace, revival_contrast, revival_trace, secular_revival_time, synth_trace,
    write_trace_binary, write_trace_csv,
};
use darktrap_core::Result;
use log::{info, warn};

use crate::run::Run;
use crate::ScenarioArgs;

/// Beam spec with the operating plane chosen by the scenario's scan, if any.
fn operating_spec(s: &Scenario, run: Option<&mut Run>) -> Result<BeamSpec> {
    let mut spec = s.beam_spec()?;
    if let Some(scan) = s.plane_scan()? {
        let (z, points) = select_operating_plane(&spec, &scan)?;
        info!("operating plane z_offset = {z} m");
        spec.z_offset = z;
        if let Some(run) = run {
            let mut csv = String::from("z_offset_m,ring_diameter_m,peak_intensity_w_m2,resolved\n");
            for p in &points {
                csv.push_str(&format!(
                    "{},{},{},{}\n",
                    format_f64(p.z_offset),
                    p.ring_diameter.map(format_f64).unwrap_or_else(|| "none".into()),
                    format_f64(p.peak_intensity),
                    u8::from(p.resolved)
                ));
            }
            run.text("plane_scan", "plane_scan.csv", &csv)?;
        }
    }
    Ok(spec)
}

fn intensity_pgm(field: &FieldGrid, comment: &str) -> Result<Vec<u8>> {
    pgm_bytes(field.size, field.size, comment, &scale_to_gray(&field.intensity()))
}

pub fn beam(a: &ScenarioArgs) -> Result<()> {
    let s = a.load()?;
    let species = s.species()?;
    let mut run = Run::start(a.out_dir(&s, "beam"), "beam")?;
    let spec = operating_spec(&s, Some(&mut run))?;
    let n = spec.grid_size;

    let mask = slm_mask(&spec, n, spec.pitch())?;
    let comment = format!("SLM phase mask, gray 0..255 = phase 0..2pi, pitch {} m", format_f64(spec.pitch()));
    run.bytes("mask", "slm_mask.pgm", &pgm_bytes(n, n, &comment, &mask)?)?;

    let field = beam_at_plane(&spec)?;
    let comment = format!("intensity at z_offset {} m, pitch {} m", format_f64(spec.z_offset), format_f64(field.pitch));
    run.bytes("intensity", "intensity_plane.pgm", &intensity_pgm(&field, &comment)?)?;
    let profile = RadialProfile::from_grid(&field);
    let mut csv = String::from("r_m,intensity_w_m2\n");
    for (k, i) in profile.intensity.iter().enumerate() {
        csv.push_str(&format!("{},{}\n", format_f64(k as f64 * profile.dr), format_f64(*i)));
    }
    run.text("radial_profile", "radial_profile.csv", &csv)?;

    for &z in &s.beam.extra_planes_m {
        let mut other = spec.clone();
        other.z_offset = z;
        let f = beam_at_plane(&other)?;
        let name = format!("intensity_z{:.1}mm.pgm", z * 1e3);
        run.bytes("intensity", &name, &intensity_pgm(&f, &format!("intensity at z_offset {} m", format_f64(z)))?)?;
    }

    let trap = crossed_trap(&spec, &species)?;
    run.text("potential_slice", "potential_xy.csv", &potential_slice(&trap))?;
    let report = trap_report(&trap)?;
    let mut text = report.to_kv();
    text.push_str(&format!("charge = {}\nmask_sha256 = {}\n", spec.charge, mask_sha256(&mask)));
    run.text("trap_report", "trap_report.txt", &text)?;
    run.finish(Some(&s))
}

/// Crossed-trap optical potential over the z = 0 plane, in units of U_max.
fn potential_slice(trap: &TrapPotential) -> String {
    let half = trap.ring_diameter.unwrap_or(0.5e-3) * 1.25;
    let count = 121;
    let axis: Vec<f64> = (0..count).map(|k| -half + 2.0 * half * k as f64 / (count - 1) as f64).collect();
    let scale = if trap.u_max > 0.0 { 1.0 / trap.u_max } else { 1.0 };
    let mut values = Vec::with_capacity(count * count);
    for &y in &axis {
        for &x in &axis {
            values.push(trap.optical_potential([x, y, 0.0]) * scale);
        }
    }
    xy_csv("x_m,y_m,u_over_umax", &axis, &axis, &values)
}

pub fn synth(a: &ScenarioArgs) -> Result<()> {
    let s = a.load()?;
    let species = s.species()?;
    let truth = s.field_timeline()?;
    let schedule = s.schedule()?;
    schedule.check_rate(truth.bias.abs() * species.gyromagnetic_factor)?;
    let analysis = s.analysis_config()?;
    let mut run = Run::start(a.out_dir(&s, "synth"), "synth")?;
    run.seed("field-noise", truth.seed);
    let mut w = KvWriter::new();
    w.comment("envelope metrics; times in seconds, fractions relative to the first window");
    for v in &s.synth.variants {
        let cfg = s.variant(v)?;
        run.seed(&format!("synth-{v}"), cfg.seed);
        let trace = synth_trace(&truth, &schedule, &cfg, &species)?;
        if matches!(s.synth.format.as_str(), "csv" | "both") {
            let p = run.path(&format!("trace_{v}.csv"));
            write_trace_csv(&trace, &p)?;
            run.artifact("trace", p);
        }
        if matches!(s.synth.format.as_str(), "binary" | "both") {
            let p = run.path(&format!("trace_{v}.bin"));
            write_trace_binary(&trace, &p)?;
            run.artifact("trace", p);
        }
        let t: Vec<f64> = (0..schedule.cycles).map(|i| schedule.cycle_start(i)).collect();
        let rel: Vec<f64> = t.iter().map(|x| x - schedule.start_time).collect();
        let truth_env: Vec<f64> = rel.iter().map(|x| cfg.envelope.factor(*x)).collect();
        w.str(&format!("{v}.envelope"), cfg.envelope.tag());
        w.u64(&format!("{v}.cycles"), schedule.cycles as u64);
        w.opt_f64(&format!("{v}.truth_t_1e_s"), first_crossing(&rel, &truth_env, (-1.0f64).exp()));
        w.opt_f64(&format!("{v}.truth_fraction_25ms"), (schedule.cycles > 0).then(|| cfg.envelope.factor(25e-3)));
        let mut csv = String::from("t_s,truth_factor,measured_v\n");
        if schedule.cycles >= 2 {
            let env = envelope_decay(&trace, &analysis)?;
            w.opt_f64(&format!("{v}.measured_t_1e_s"), env.t_1e);
            w.opt_f64(&format!("{v}.measured_tau_fit_s"), env.tau_fit);
            w.opt_f64(&format!("{v}.measured_fraction_25ms"), env.relative_at(25e-3));
            for k in 0..t.len() {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    format_f64(t[k]),
                    format_f64(truth_env[k]),
                    format_f64(env.amplitude[k])
                ));
            }
        }
        run.text("envelope", &format!("envelope_{v}.csv"), &csv)?;
    }
    run.text("synth_report", "synth_report.txt", &w.finish())?;
    run.finish(Some(&s))
}

pub fn analyze(trace_path: &Path, a: &ScenarioArgs) -> Result<()> {
    let s = a.load()?;
    let species = s.species()?;
    let config = s.analysis_config()?;
    let trace = read_trace(trace_path)?;
    let mut run = Run::start(a.out_dir(&s, "analyze"), "analyze")?;
    let timeline = nu_timeline(&trace, &config)?;
    run.text("timeline", "timeline.csv", &timeline.to_csv())?;

    let valid: Vec<f64> = timeline.entries.iter().filter(|e| e.valid).map(|e| e.nu).collect();
    let mut w = KvWriter::new();
    w.comment("trace analysis; frequencies in Hz, fields in gauss");
    w.u64("windows", timeline.entries.len() as u64);
    w.u64("valid_windows", valid.len() as u64);
    if !valid.is_empty() {
        let mean = valid.iter().sum::<f64>() / valid.len() as f64;
        let var = valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (valid.len().max(2) - 1) as f64;
        w.f64("nu_mean_hz", mean);
        w.f64("nu_std_hz", var.sqrt());
        w.f64("field_mean_g", mean / species.gyromagnetic_factor);
    }
    match field_spectrum(&timeline, &species) {
        Ok(sp) => {
            run.text("field_spectrum", "field_spectrum.csv", &sp.to_csv())?;
            let line = s.field.line_frequency_hz;
            let nyquist = sp.freq.last().copied().unwrap_or(0.0);
            for k in 1..=7 {
                let f = k as f64 * line;
                if f <= nyquist {
                    w.f64(&format!("line_{f}hz_amplitude_g"), sp.at(f));
                }
            }
            for (f, amp) in spectral_peaks(&sp.freq, &sp.amplitude, 5) {
                w.f64(&format!("peak_{f}hz_amplitude_g"), amp);
            }
        }
        Err(e) => {
            warn!("field spectrum skipped: {e}");
            w.str("field_spectrum", "unavailable");
        }
    }
    if trace.schedule.cycles > 0 {
        let raster = rasterize(&trace)?;
        run.bytes("raster", "raster.pgm", &raster.to_pgm()?)?;
        run.text("raster_csv", "raster.csv", &raster.to_csv())?;
        if raster.cols >= 2 {
            w.f64("raster_adjacent_column_correlation", raster.adjacent_column_correlation());
        }
    }
    run.text("analysis_report", "analysis_report.txt", &w.finish())?;
    run.finish(Some(&s))
}

/// The `count` largest local maxima above DC, in ascending frequency.
fn spectral_peaks(freq: &[f64], amp: &[f64], count: usize) -> Vec<(f64, f64)> {
    let mut peaks: Vec<(f64, f64)> = (1..amp.len().saturating_sub(1))
        .filter(|&k| amp[k] > amp[k - 1] && amp[k] >= amp[k + 1])
        .map(|k| (freq[k], amp[k]))
        .collect();
    peaks.sort_by(|a, b| b.1.total_cmp(&a.1));
    peaks.truncate(count);
    peaks.sort_by(|a, b| a.0.total_cmp(&b.0));
    peaks
}

pub fn compensate(a: &ScenarioArgs, iterations: Option<usize>) -> Result<()> {
    let s = a.load()?;
    let species = s.species()?;
    let ls = s.loop_scenario()?;
    let iterations = iterations.unwrap_or(s.compensation.iterations);
    let mut run = Run::start(a.out_dir(&s, "compensate"), "compensate")?;
    run.seed("synth-trapped", ls.synth.seed);
    run.seed("field-noise", ls.truth.seed);
    let report = closed_loop(&ls, iterations)?;
    run.text("timeline", "pre_timeline.csv", &report.pre_timeline.to_csv())?;
    run.text("timeline", "post_timeline.csv", &report.post_timeline.to_csv())?;
    if let Some(sp) = &report.pre_spectrum {
        run.text("field_spectrum", "pre_spectrum.csv", &sp.to_csv())?;
    }
    if let Some(sp) = &report.post_spectrum {
        run.text("field_spectrum", "post_spectrum.csv", &sp.to_csv())?;
    }
    run.text("plan", "plan.txt", &report.plan.to_kv())?;

    let g = species.gyromagnetic_factor;
    let nu_bias = ls.truth.bias * g;
    let late = report
        .post_timeline
        .entries
        .iter()
        .filter(|e| e.valid && e.t >= 25e-3)
        .map(|e| (e.nu - nu_bias).abs())
        .fold(0.0, f64::max);
    let line_amp = ls
        .truth
        .harmonics
        .iter()
        .filter(|h| (h.frequency - ls.truth.line_frequency).abs() < 1e-9)
        .map(|h| h.amplitude.abs())
        .sum::<f64>();
    let mut text = report.to_kv(&species);
    let mut w = KvWriter::new();
    w.f64("post_max_deviation_after_25ms_hz", late);
    w.f64("line_band_hz", line_amp * g);
    text.push_str(&w.finish());
    run.text("compensation_report", "report.txt", &text)?;
    run.finish(Some(&s))
}

pub fn boil(a: &ScenarioArgs) -> Result<()> {
    let s = a.load()?;
    let species = s.species()?;
    let cfg = s.kinetics_config()?;
    let sched = s.scatter_schedule()?;
    let mut run = Run::start(a.out_dir(&s, "boil"), "boil")?;
    run.seed("kinetics", cfg.seed);
    let trap = if s.kinetics.trap { Some(crossed_trap(&operating_spec(&s, None)?, &species)?) } else { None };
    let env = Environment { trap: trap.as_ref(), species: &species, gravity: cfg.gravity };
    let mut ensemble = AtomEnsemble::thermal(&cfg, &env)?;
    let curve = survival_curve(&mut ensemble, &env, &sched, &cfg, s.kinetics.bootstrap)?;
    run.text("survival", "survival.csv", &curve.to_csv())?;

    let mut w = KvWriter::new();
    w.comment("trap lifetime; times in seconds, rates in photons per second");
    w.u64("samples", cfg.samples as u64);
    w.bool("trap", trap.is_some());
    w.opt_f64("t_1e_s", curve.t_1e);
    w.opt_f64("tau_fit_s", curve.fit.as_ref().map(|f| f.tau));
    w.opt_f64("tau_fit_low_s", curve.fit.as_ref().map(|f| f.tau_low));
    w.opt_f64("tau_fit_high_s", curve.fit.as_ref().map(|f| f.tau_high));
    w.opt_f64("fit_amplitude", curve.fit.as_ref().map(|f| f.amplitude));
    w.opt_f64("faraday_weight_t_1e_s", curve.weight_1e());
    w.f64("final_fraction", curve.fraction.last().copied().unwrap_or(1.0));
    w.f64("mean_trap_rate_per_s", curve.mean_trap_rate);
    w.f64("mean_trap_rate_over_2pi_hz", curve.mean_trap_rate / (2.0 * PI));
    w.f64("mean_total_rate_per_ms", curve.mean_total_rate * 1e-3);
    w.opt_f64("max_energy_drift", curve.max_energy_drift);
    if let Some(t) = &trap {
        if curve.mean_total_rate > 0.0 {
            w.f64(
                "boil_estimate_s",
                boil_estimate(t.u_max, curve.mean_total_rate, &species, sched.recoil)?,
            );
        }
    }
    run.text("boil_report", "boil_report.txt", &w.finish())?;
    run.finish(Some(&s))
}

pub fn spin(a: &ScenarioArgs) -> Result<()> {
    let s = a.load()?;
    let models = s.spin_models()?;
    let schedule = s.schedule()?;
    let mut run = Run::start(a.out_dir(&s, "spin"), "spin")?;
    let fs = schedule.sample_rate;
    let grid: Vec<f64> = (0..schedule.probe_samples()).map(|k| k as f64 / fs).collect();
    let t_rev = s.spin.revival_time_s;
    let mut w = KvWriter::new();
    w.comment("spin revivals; times in seconds, contrast relative to F");
    let mut contrasts = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let label = format!("theta_{:.1}deg", m.theta.to_degrees());
        let seed = s.seed_for(&format!("spin-{i}"));
        run.seed(&format!("spin-{i}"), seed);
        let trace = revival_trace(m, &schedule, s.spin.amplitude_v, s.spin.snr, seed)?;
        let p = run.path(&format!("revival_{label}.csv"));
        write_trace_csv(&trace, &p)?;
        run.artifact("trace", p);
        let series = quantum_evolve(m, &grid)?;
        let mut csv = String::from("t_s,fx,fy\n");
        for k in 0..series.t.len() {
            csv.push_str(&format!(
                "{},{},{}\n",
                format_f64(series.t[k]),
                format_f64(series.fx[k]),
                format_f64(series.fy[k])
            ));
        }
        run.text("spin_series", &format!("series_{label}.csv"), &csv)?;
        w.f64(&format!("{label}.theta_rad"), m.theta);
        w.f64(&format!("{label}.norm_drift"), series.norm_drift);
        w.opt_f64(&format!("{label}.secular_revival_time_s"), secular_revival_time(m));
        if t_rev > 0.0 {
            let c = revival_contrast(&series, m, t_rev);
            w.f64(&format!("{label}.revival_contrast"), c);
            w.f64(&format!("{label}.lobe_over_noise"), damped_lobe(&series, m.f, t_rev) * s.spin.snr);
            contrasts.push(c);
        }
    }
    if contrasts.len() >= 2 && contrasts[1] > 0.0 {
        w.f64("revival_suppression", contrasts[0] / contrasts[1]);
    } else if contrasts.len() >= 2 {
        w.str("revival_suppression", "inf");
    }
    run.text("spin_report", "spin_report.txt", &w.finish())?;
    run.finish(Some(&s))
}

/// Revival lobe of the damped transverse envelope |⟨F₊⟩|/F above the
/// preceding collapse, in units of the full signal amplitude.
fn damped_lobe(series: &darktrap_core::spinsim::SpinSeries, f: u32, t_rev: f64) -> f64 {
    let (mut peak, mut trough) = (f64::MIN, f64::MAX);
    for k in 0..series.t.len() {
        let u = series.t[k] / t_rev;
        let e = series.fx[k].hypot(series.fy[k]) / f as f64;
        if (0.8..=1.2).contains(&u) {
            peak = peak.max(e);
        }
        if (0.25..=0.75).contains(&u) {
            trough = trough.min(e);
        }
    }
    if peak == f64::MIN || trough == f64::MAX {
        0.0
    } else {
        (peak - trough).max(0.0)
    }
}
