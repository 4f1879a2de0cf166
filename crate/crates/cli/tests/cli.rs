use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_specderef"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, body).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TRANSLATE: &str = "[experiment]\nscenario = addr_translate\nseed = 9\nrepetitions = 4\n";

#[test]
fn run_passes_and_emits_csv() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "t.ini", TRANSLATE);
    let out = run(&["run", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("scenario,mitigation_fingerprint,seed,metric,value\n"));
    assert!(text.contains("addr_translate,"));
    assert!(text.contains(",recall,1\n"));
}

#[test]
fn same_seed_gives_identical_output_file() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "t.ini", TRANSLATE);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    for (p, exec) in [(&a, "parallel"), (&b, "sequential")] {
        let set = format!("experiment.execution={exec}");
        let out = run(&["run", s(&cfg), "--output", s(p), "--set", &set]);
        assert_eq!(out.status.code(), Some(0));
        assert!(out.stdout.is_empty());
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn failed_assertion_exits_one() {
    let dir = TempDir::new().unwrap();
    let cfg = config(
        &dir,
        "c.ini",
        "scenario = covert\nrepetitions = 1\n[noise]\nfp_rate = 0.2\n[params]\nmessage_bytes = 8\nmax_error_rate = 0.0001\n",
    );
    let out = run(&["run", s(&cfg), "--format", "text"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("covert"));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("missing.ini");
    let bad_key = config(&dir, "k.ini", "scenario = H1\n[noise]\nbogus = 1\n");
    let no_scenario = config(&dir, "n.ini", "[experiment]\nseed = 1\n");
    let good = config(&dir, "g.ini", TRANSLATE);
    let cases: Vec<Vec<&str>> = vec![
        vec!["run", s(&missing)],
        vec!["run", s(&bad_key)],
        vec!["run", s(&no_scenario)],
        vec!["run", s(&good), "--set", "mitigations.smap"],
        vec!["run", s(&good), "--set", "noise.fp_rate=2"],
        vec!["sweep", s(&good)],
    ];
    for args in cases {
        let out = run(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
}

#[test]
fn sweep_reports_per_syscall_scores() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "s.ini", "scenario = syscall_sweep\n[params]\ntrials = 4\n");
    let out = run(&["sweep", s(&cfg)]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(",f1:readv,"));
}

#[test]
fn exported_events_replay_to_same_digest() {
    let dir = TempDir::new().unwrap();
    let cfg = config(&dir, "t.ini", TRANSLATE);
    let log = dir.path().join("events.log");
    let out = run(&["run", s(&cfg), "--events", s(&log)]);
    assert_eq!(out.status.code(), Some(0));
    let recorded = fs::read_to_string(&log).unwrap();
    let digest = recorded.lines().last().unwrap().strip_prefix("# digest=").unwrap().to_string();

    let out = run(&["replay", s(&log)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains(&format!("digest {digest}")));
    assert!(text.contains("digest matches"));

    let tampered = dir.path().join("tampered.log");
    let mut lines: Vec<&str> = recorded.lines().collect();
    let last = lines.len() - 1;
    let forged = format!("# digest={}", "0".repeat(64));
    lines[last] = &forged;
    fs::write(&tampered, lines.join("\n")).unwrap();
    assert_eq!(run(&["replay", s(&tampered)]).status.code(), Some(1));

    let garbage = config(&dir, "g.log", "not an event log\n");
    assert_eq!(run(&["replay", s(&garbage)]).status.code(), Some(2));
}

#[test]
fn lists_presets() {
    let out = run(&["list-presets"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("kernel-4.19 (default)"));
    assert_eq!(text.lines().filter(|l| !l.starts_with(' ')).count(), 3);
}

#[test]
fn shipped_configs_pass() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        let out = run(&["run", s(&p), "--set", "experiment.repetitions=1"]);
        assert_eq!(out.status.code(), Some(0), "{}: {}", p.display(), String::from_utf8_lossy(&out.stderr));
    }
}
