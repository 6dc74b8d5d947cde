//! Output directory bookkeeping: artifact lines and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use darktrap_core::export::write_text;
use darktrap_core::kv::KvWriter;
use darktrap_core::scenario::Scenario;
use darktrap_core::{Error, Result};

pub struct Run {
    dir: PathBuf,
    command: &'static str,
    started: Instant,
    artifacts: Vec<(String, PathBuf)>,
    seeds: Vec<(String, u64)>,
}

impl Run {
    pub fn start(dir: PathBuf, command: &'static str) -> Result<Self> {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run { dir, command, started: Instant::now(), artifacts: Vec::new(), seeds: Vec::new() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file already written and echoes it for scripting.
    pub fn artifact(&mut self, kind: &str, path: PathBuf) {
        println!("ARTIFACT {kind} {}", path.display());
        self.artifacts.push((kind.to_string(), path));
    }

    pub fn text(&mut self, kind: &str, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        write_text(&p, text)?;
        self.artifact(kind, p);
        Ok(())
    }

    pub fn bytes(&mut self, kind: &str, name: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        self.artifact(kind, p);
        Ok(())
    }

    pub fn seed(&mut self, label: &str, seed: u64) {
        self.seeds.push((label.to_string(), seed));
    }

    /// Writes the resolved scenario and `manifest.txt`. The manifest is the
    /// only file whose content varies between identical runs (wall time).
    pub fn finish(mut self, scenario: Option<&Scenario>) -> Result<()> {
        let mut w = KvWriter::new();
        w.comment("darktrap run manifest");
        w.str("command", self.command);
        w.str("darktrap_version", env!("CARGO_PKG_VERSION"));
        if let Some(s) = scenario {
            let p = self.path("scenario.toml");
            write_text(&p, &s.to_toml())?;
            self.artifact("scenario", p);
            w.str("scenario_name", &s.name);
            w.str("scenario_sha256", &s.hash());
            w.u64("root_seed", s.seed);
        }
        for (label, seed) in &self.seeds {
            w.u64(&format!("seed.{label}"), *seed);
        }
        for (i, (kind, path)) in self.artifacts.iter().enumerate() {
            w.str(&format!("artifact{i}.{kind}"), &file_name(path));
        }
        w.f64("wall_time_s", self.started.elapsed().as_secs_f64());
        let p = self.path("manifest.txt");
        write_text(&p, &w.finish())?;
        println!("ARTIFACT manifest {}", p.display());
        Ok(())
    }
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
