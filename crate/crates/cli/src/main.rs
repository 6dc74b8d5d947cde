use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use darktrap_core::scenario::{Scenario, PRESETS};
use darktrap_core::{Error, Result};

mod commands;
mod run;

/// Cold-atom Faraday magnetometry workbench: beam synthesis, trace
/// synthesis, spectral analysis, field compensation, trap lifetime and
/// spin revivals, all driven by one scenario file.
///
/// Every command prints `ARTIFACT <kind> <path>` for each file it writes.
/// Exit codes: 0 success, 2 config error, 3 numerical failure, 4 I/O error;
/// failures print one `ERROR kind=<kind> code=<n> msg=<text>` line on stderr.
#[derive(Parser)]
#[command(name = "darktrap", version)]
struct Cli {
    /// Worker threads for internal parallelism (count; 0 = one per core).
    /// Output files do not depend on this value.
    #[arg(long, global = true, default_value_t = 0, value_name = "N")]
    threads: usize,
    /// Log level on stderr: error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "warn", value_name = "LEVEL")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct ScenarioArgs {
    /// Shipped preset to start from (see `darktrap presets`).
    #[arg(long, value_name = "NAME", conflicts_with = "scenario")]
    preset: Option<String>,
    /// Scenario TOML file. Physical keys carry a unit suffix:
    /// field (_g, _mg, _ug, _t, _nt), length (_m, _mm, _um, _nm),
    /// time (_s, _ms, _us), frequency (_hz, _khz, _mhz = MHz, _ghz),
    /// power (_w, _mw), angle (_rad, _deg), temperature (_k, _uk).
    #[arg(long, value_name = "FILE")]
    scenario: Option<PathBuf>,
    /// Override one scalar key; the unit comes from the key suffix, e.g.
    /// `--set field.bias_mg=50` (mG) or `--set kinetics.samples=2000`
    /// (count). Array-of-table entries are indexed: `field.harmonic.0.amplitude_mg=3`.
    /// Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory [default: out/<scenario name>/<command>].
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

impl ScenarioArgs {
    pub fn load(&self) -> Result<Scenario> {
        match (&self.preset, &self.scenario) {
            (Some(name), _) => Scenario::preset(name, &self.set),
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Scenario::from_toml(&text, &self.set)
            }
            (None, None) => Scenario::from_toml("", &self.set),
        }
    }

    pub fn out_dir(&self, scenario: &Scenario, command: &str) -> PathBuf {
        self.out
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(&scenario.name).join(command))
    }
}

#[derive(Subcommand)]
enum Command {
    /// SLM mask, hollow-beam intensity at the operating plane, crossed-trap
    /// potential slice and trap report (depth in ħΓ and recoil energies,
    /// ring diameter in m, peak scattering rate in photons/s).
    Beam(ScenarioArgs),
    /// Synthesized polarimeter traces (V against s) for the trapped and
    /// untrapped variants, with their envelopes.
    Synth(ScenarioArgs),
    /// Larmor-frequency timeline (Hz), field spectrum (G against Hz) and
    /// raster image of a trace file. Analysis settings come from the scenario.
    Analyze {
        /// Trace file written by `synth` (CSV or binary, detected from content).
        #[arg(long, value_name = "FILE")]
        trace: PathBuf,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Closed-loop eddy and line-harmonic compensation; timelines in Hz,
    /// spectra in G, compensation plan in G and s.
    Compensate {
        /// Compensation iterations (count); overrides compensation.iterations.
        #[arg(long, value_name = "N")]
        iterations: Option<usize>,
        #[command(flatten)]
        scenario: ScenarioArgs,
    },
    /// Monte Carlo trap lifetime under photon scattering: survival curve
    /// against time (s) and fitted lifetime (s).
    Boil(ScenarioArgs),
    /// Spin-F precession with the tensor light shift for each probe angle:
    /// traces (V), ⟨F_x⟩ series and revival contrast.
    Spin(ScenarioArgs),
    /// Prints the resolved scenario (canonical units) and its SHA-256.
    Scenario(ScenarioArgs),
    /// Lists the shipped presets.
    Presets,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .parse_filters(&cli.log)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("ERROR kind={} code={} msg={msg}", e.kind(), e.exit_code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Beam(a) => commands::beam(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Analyze { trace, scenario } => commands::analyze(&trace, &scenario),
        Command::Compensate { iterations, scenario } => commands::compensate(&scenario, iterations),
        Command::Boil(a) => commands::boil(&a),
        Command::Spin(a) => commands::spin(&a),
        Command::Scenario(a) => {
            let s = a.load()?;
            print!("{}", s.to_toml());
            println!("# sha256 = {}", s.hash());
            Ok(())
        }
        Command::Presets => {
            for p in PRESETS {
                println!("{p}");
            }
            Ok(())
        }
    }
}
