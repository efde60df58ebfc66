use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use w2fwi::experiment::{ExperimentConfig, PresetName, Scale};
use w2fwi::models::LayeredModel;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_w2fwi"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

/// A very small two-layer experiment that runs in seconds.
fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::preset(PresetName::TwoLayer, Scale::Desk);
    let s = 1.0 / 12.0;
    c.name = "tiny".into();
    c.model.truth = LayeredModel::two_layer(true).scaled(s);
    c.model.initial = LayeredModel::two_layer(false).scaled(s);
    c.picking.reflectors = c.model.initial.horizontal_interfaces();
    c.domain.width = 6.0;
    c.domain.depth = 5.0;
    c.time.t_final = 1.5;
    c.sources.count = 2;
    c.sources.margin = 0.5;
    c.sources.f0 = 8.0;
    c.receivers.count = 3;
    c.picking.enabled = false;
    c.inversion.iterations = 2;
    c.inversion.checkpoint_every = Some(1);
    let path = dir.join("tiny.toml");
    fs::write(&path, c.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn generate_writes_traces_models_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("gen");
    let o = run(&["generate", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["config.toml", "observed.bin", "true_model.txt", "initial_model.txt", "windows.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let traces = w2fwi::io::read_traces_bin(&out.join("observed.bin")).unwrap();
    assert_eq!(traces.len(), 6);
    let written = ExperimentConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let original = ExperimentConfig::from_toml(&fs::read_to_string(&cfg).unwrap()).unwrap();
    assert_eq!(written, original);
    let table = fs::read_to_string(out.join("windows.csv")).unwrap();
    assert!(table.starts_with("i,j,t_lo,t_hi,accepted,reason\n"));
    assert_eq!(table.lines().count(), 7);
}

fn rmf_column(csv: &str) -> Vec<f64> {
    csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect()
}

#[test]
fn invert_logs_monotone_misfit_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let a = dir.path().join("a");
    let o = run(&["invert", "--config", &cfg, "--misfit", "w2-p3", "--threads", "1", "--out", a.to_str().unwrap()]);
    assert!(o.status.success());
    let log = fs::read_to_string(a.join("convergence.csv")).unwrap();
    assert!(log.starts_with("k,Xi,RME,RMF,step,accepted_pairs\n"));
    let rmf = rmf_column(&log);
    assert!(rmf.len() >= 2);
    assert_eq!(rmf[0], 1.0);
    assert!(rmf.windows(2).all(|w| w[1] <= w[0]));
    assert!(a.join("model_0000.txt").exists());
    assert!(a.join("final_model.txt").exists());
    let model = w2fwi::io::read_model(&a.join("final_model.txt")).unwrap();
    assert!(model.min() > 0.0);

    // the provenance copy reproduces the run bit for bit
    let b = dir.path().join("b");
    let resolved = a.join("config.toml");
    let o = run(&["invert", "--config", resolved.to_str().unwrap(), "--threads", "1", "--out", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(log, fs::read_to_string(b.join("convergence.csv")).unwrap());
}

#[test]
fn kernel_dumps_for_artifact_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("k");
    let o = run(&["kernel", "--config", &cfg, "--misfit", "w2-p2", "--no-windows", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let o = run(&["kernel", "--config", &cfg, "--misfit", "w2-p3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    for f in ["kernel_w2-p2_s000.txt", "kernel_w2-p3_s000.txt", "kernel_w2-p3_s000.csv"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let maps: Vec<_> = fs::read_dir(&out)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("map_"))
        .collect();
    assert!(!maps.is_empty());
    let text = fs::read_to_string(maps[0].path()).unwrap();
    assert!(text.starts_with("t,T,U\n"));
}

#[test]
fn compare_traces_of_identical_pair_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let trace = w2fwi::wave::Trace::new(0, 0, 0.01, (0..200).map(|k| ((k as f64) * 0.1).sin()).collect());
    let p = dir.path().join("t.csv");
    w2fwi::io::write_trace_csv(&p, &trace).unwrap();
    let p = p.to_str().unwrap();
    let o = run(&["compare-traces", "--synthetic", p, "--observed-trace", p, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    for l in lines {
        let v: f64 = l.split(": ").nth(1).unwrap().parse().unwrap();
        assert_eq!(v, 0.0, "{l}");
    }
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["generate", "--preset", "moon", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\nname = 3\n").unwrap();
    let o = run(&["generate", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));

    let o = run(&["invert", "--misfit", "l3", "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown misfit"));
}
