use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_darktrap");

fn darktrap(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn darktrap")
}

fn contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.txt")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn reruns_are_bit_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for (i, threads) in ["0", "0", "1"].iter().enumerate() {
        let d = tmp.path().join(format!("run{i}"));
        let out = darktrap(&[
            "--threads",
            threads,
            "synth",
            "--preset",
            "fig2_untrapped",
            "--set",
            "schedule.cycles=12",
            "--set",
            "synth.format=both",
            "--out",
            d.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        dirs.push(d);
    }
    let first = contents(&dirs[0]);
    assert!(first.iter().any(|(n, _)| n == "trace_untrapped.bin"));
    assert_eq!(first, contents(&dirs[1]));
    assert_eq!(first, contents(&dirs[2]));
}

#[test]
fn manifest_names_seeds_artifacts_and_scenario() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("spin");
    let out = darktrap(&["spin", "--preset", "fig8_revivals", "--set", "seed=7", "--out", d.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("ARTIFACT spin_report ")));
    let manifest = std::fs::read_to_string(d.join("manifest.txt")).unwrap();
    for key in ["command = spin", "scenario_name = fig8_revivals", "root_seed = 7", "scenario_sha256 = ", "wall_time_s = "] {
        assert!(manifest.contains(key), "missing {key:?} in\n{manifest}");
    }
    assert!(manifest.lines().any(|l| l.starts_with("seed.")));
    // the stored scenario reproduces the hash
    let shown = darktrap(&["scenario", "--scenario", d.join("scenario.toml").to_str().unwrap()]);
    let hash = String::from_utf8_lossy(&shown.stdout).lines().last().unwrap().trim_start_matches("# sha256 = ").to_string();
    assert!(manifest.contains(&format!("scenario_sha256 = {hash}")));
}

#[test]
fn help_states_units() {
    for cmd in ["beam", "synth", "analyze", "compensate", "boil", "spin"] {
        let out = darktrap(&[cmd, "--help"]);
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(out.status.success());
        assert!(text.contains("_mhz = MHz") && text.contains("--set"), "{cmd} help lacks unit notes:\n{text}");
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = darktrap(&["synth", "--preset", "fig2_trapped", "--set", "synth.bogus=1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("ERROR kind=config code=2"));
    let out = darktrap(&["analyze", "--trace", "/nonexistent/trace.csv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4));
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "name = \"x\"\n[beam\n").unwrap();
    let out = darktrap(&["scenario", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}
