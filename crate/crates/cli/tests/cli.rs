use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_osmosim"));
    c.env_remove("OSMOSIM_SEED");
    c
}

fn small() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/small.toml")
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawn osmosim");
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn presets_lists_the_catalog() {
    let out = run_ok(bin().arg("presets"));
    let listed: Vec<String> = String::from_utf8(out.stdout).unwrap().lines().map(str::to_string).collect();
    let expected: Vec<String> = osmosim::preset_names().into_iter().map(|s| s.to_string()).collect();
    assert_eq!(listed, expected);
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    run_ok(bin().args(["run", "--sched", "wlbvt", "--seed", "7", "-o"]).arg(dir.path()).arg("--scenario").arg(small()));
    for f in [
        "summary.csv",
        "report.txt",
        "series_pu_occupancy.csv",
        "series_pu_occupancy_window.csv",
        "series_io_bytes.csv",
        "series_jain.csv",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let summary = read(&dir.path().join("summary.csv"));
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("# osmosim csv v1"));
    assert_eq!(lines.next(), Some("metric,flow_id,value"));
    assert!(summary.contains("packets_processed,all,600"));
    assert!(read(&dir.path().join("series_jain.csv")).lines().nth(1) == Some("cycle,flow_id,value"));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        run_ok(bin().args(["run", "--seed", "3", "-o"]).arg(d.path()).arg("--scenario").arg(small()));
    }
    for f in ["summary.csv", "report.txt", "series_pu_occupancy.csv", "series_io_bytes.csv", "series_jain.csv"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f} differs");
    }
}

#[test]
fn unknown_preset_exits_2_and_names_it() {
    let out = bin().args(["run", "--preset", "no-such-preset"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no-such-preset"));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "num_clusters = 0\n").unwrap();
    let out = bin().args(["run", "--preset", "pu-contention", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    fs::write(&cfg, "no_such_field = 1\n").unwrap();
    let out = bin().args(["run", "--preset", "pu-contention", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().args(["run", "--preset", "pu-contention", "--sched", "lottery"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn infeasible_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("over.toml");
    let text = read(&small()).replace("share = 0.5", "share = 0.75");
    fs::write(&sc, text).unwrap();
    let out = bin().args(["run", "--scenario"]).arg(&sc).arg("-o").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

fn summary_for(dir: &Path, extra: &[&str], env_seed: Option<&str>, config: Option<&Path>) -> String {
    let mut c = bin();
    c.arg("run").arg("--scenario").arg(small()).arg("-o").arg(dir).args(extra);
    if let Some(s) = env_seed {
        c.env("OSMOSIM_SEED", s);
    }
    if let Some(p) = config {
        c.arg("--config").arg(p);
    }
    run_ok(&mut c);
    read(&dir.join("summary.csv"))
}

#[test]
fn seed_precedence_flag_then_file_then_env() {
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("cfg.toml");
    fs::write(&cfg, "seed = 5\n").unwrap();
    let d = |n: &str| t.path().join(n);

    let seed5 = summary_for(&d("a"), &["--seed", "5"], None, None);
    let seed9 = summary_for(&d("b"), &["--seed", "9"], None, None);
    assert_ne!(seed5, seed9, "seed must change the run");

    assert_eq!(summary_for(&d("c"), &[], Some("9"), None), seed9, "env used when nothing else is set");
    assert_eq!(summary_for(&d("e"), &[], Some("9"), Some(&cfg)), seed5, "file beats env");
    assert_eq!(summary_for(&d("f"), &["--seed", "9"], None, Some(&cfg)), seed9, "flag beats file");
}

#[test]
fn config_run_table_supplies_flags() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("from-file");
    let cfg = t.path().join("cfg.toml");
    fs::write(
        &cfg,
        format!(
            "pu_scheduler = \"rr\"\nfragmentation_mode = \"none\"\nmax_cycles = 500000\n[run]\nscenario = {:?}\nout = {:?}\n",
            small(),
            out
        ),
    )
    .unwrap();
    run_ok(bin().arg("run").arg("--config").arg(&cfg));
    assert!(out.join("summary.csv").is_file());
}

#[test]
fn compare_writes_grid_and_deltas() {
    let t = tempfile::tempdir().unwrap();
    run_ok(bin().args(["run", "--compare", "--scenario"]).arg(small()).arg("-o").arg(t.path()));
    for sub in ["rr-none", "rr-hardware", "wlbvt-none", "wlbvt-hardware"] {
        assert!(t.path().join(sub).join("summary.csv").is_file(), "{sub}");
        assert!(t.path().join(sub).join("report.txt").is_file(), "{sub}");
    }
    let delta = read(&t.path().join("delta.txt"));
    assert!(delta.contains("wlbvt-hardware vs rr-none"));
    assert!(delta.contains("fairness improvement"));
    let csv = read(&t.path().join("delta.csv"));
    assert!(csv.lines().nth(1) == Some("config,metric,flow_id,value"));
    assert!(csv.contains("wlbvt-hardware,fct_change_pct,0,"));
}

#[test]
fn sweep_presets_write_one_directory_per_scenario() {
    let t = tempfile::tempdir().unwrap();
    run_ok(bin().args(["run", "--preset", "standalone-aggregate", "-o"]).arg(t.path()));
    for size in [64, 256, 1024, 4096] {
        assert!(t.path().join(format!("standalone-aggregate-{size}/summary.csv")).is_file());
    }
    assert!(read(&t.path().join("report.txt")).contains("standalone-aggregate-4096"));
}

#[test]
fn trace_export_replays_to_the_same_run() {
    let t = tempfile::tempdir().unwrap();
    let trace = t.path().join("trace.csv");
    run_ok(bin().args(["trace", "--seed", "4", "--scenario"]).arg(small()).arg("-o").arg(&trace));
    let text = read(&trace);
    assert!(text.starts_with("# osmosim-trace v1\narrival_cycle,flow_id,total_size_bytes\n"));
    assert_eq!(text.lines().count(), 2 + 600);

    let generated = summary_for(&t.path().join("gen"), &["--seed", "4"], None, None);
    let mut c = bin();
    c.args(["run", "--seed", "4", "--scenario"])
        .arg(small())
        .arg("--trace")
        .arg(&trace)
        .arg("-o")
        .arg(t.path().join("rep"));
    run_ok(&mut c);
    assert_eq!(read(&t.path().join("rep/summary.csv")), generated);
}

#[test]
fn malformed_trace_exits_2() {
    let t = tempfile::tempdir().unwrap();
    let trace = t.path().join("bad.csv");
    fs::write(&trace, "# osmosim-trace v1\narrival_cycle,flow_id,total_size_bytes\nx,0,64\n").unwrap();
    let out = bin()
        .args(["run", "--scenario"])
        .arg(small())
        .arg("--trace")
        .arg(&trace)
        .arg("-o")
        .arg(t.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ppb_table_verdicts() {
    let out = run_ok(bin().args(["ppb", "--pus", "32", "--sizes", "64", "--bandwidth", "400e9"]));
    let text = String::from_utf8(out.stdout).unwrap();
    let reduce = text.lines().find(|l| l.starts_with("reduce ")).expect("reduce row");
    assert!(reduce.contains("40.96"));
    assert!(reduce.ends_with("exceeds PPB"));

    let out = run_ok(bin().args(["ppb", "--pus", "1"]));
    let text = String::from_utf8(out.stdout).unwrap();
    for k in ["aggregate", "reduce", "histogram"] {
        assert!(text.lines().filter(|l| l.starts_with(&format!("{k} "))).all(|l| l.ends_with("exceeds PPB")));
    }
}
