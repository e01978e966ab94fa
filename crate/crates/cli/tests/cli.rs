use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const DSB: &str = env!("CARGO_BIN_EXE_dsb");

fn dsb(args: &[&str]) -> Output {
    Command::new(DSB).args(args).output().expect("dsb runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const ISING_TRAIN: &str = r#"
seed = 3

[target]
kind = "ising"
side = 2
beta = 0.4

[kernel]
process = "masked"

[kernel.schedule]
kind = "fixed"
counts = [2, 2]

[net]
hidden = [16]

[train]
epochs = 40
batch_size = 16
loss = "tb"
lr = 0.001
eval_every = 10
m_eval = 64

[train.off_policy]
ratio = 2
buffer_capacity = 256

[train.off_policy.exploration]
interval = 5
steps = 3
sample_ratio = 0.2

[train.off_policy.exploration.kernel]
kind = "swendsen_wang"

[eval]
m_eval = 64
samples = 128

[eval.reference]
kind = "oracle"
samples = 128
"#;

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn presets_are_listed_and_parse_back() {
    let names = ok(&dsb(&["preset"]));
    assert!(names.lines().any(|l| l == "ising16-b0.6"));
    assert!(names.lines().any(|l| l == "3gmm-4gmm-16bit"));
    let tmp = TempDir::new().unwrap();
    for name in names.lines() {
        let text = ok(&dsb(&["preset", name]));
        let file = write(&tmp, "p.toml", &text);
        // a file holding the printed preset prints identically when re-serialised
        let again = ok(&dsb(&["preset", name]));
        assert_eq!(text, again);
        let v: toml::Value = toml::from_str(&fs::read_to_string(file).unwrap()).unwrap();
        assert!(v.get("target").is_some(), "{name}");
    }
}

#[test]
fn ising_preset_carries_the_table_values() {
    let v: toml::Value = toml::from_str(&ok(&dsb(&["preset", "ising16-b0.6"]))).unwrap();
    let train = &v["train"];
    assert_eq!(train["batch_size"].as_integer(), Some(128));
    assert_eq!(train["epochs"].as_integer(), Some(20000));
    assert_eq!(train["lr"].as_float(), Some(1e-3));
    let op = &train["off_policy"];
    assert_eq!(op["buffer_capacity"].as_integer(), Some(12800));
    assert_eq!(op["ratio"].as_str(), Some("2"));
    let ex = &op["exploration"];
    assert_eq!(ex["sample_ratio"].as_float(), Some(0.2));
    assert_eq!(ex["interval"].as_integer(), Some(500));
    assert_eq!(ex["steps"].as_integer(), Some(100));
}

#[test]
fn missing_target_is_a_config_error_naming_it() {
    let tmp = TempDir::new().unwrap();
    let text = ISING_TRAIN.replace("[target]\nkind = \"ising\"\nside = 2\nbeta = 0.4\n", "");
    let cfg = write(&tmp, "c.toml", &text);
    let out = dsb(&["train", &cfg, "--out", path_str(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("missing [target] block"), "{}", stderr(&out));
}

#[test]
fn malformed_toml_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "c.toml", "seed = [");
    assert_eq!(dsb(&["train", &cfg]).status.code(), Some(2));
    let cfg = write(&tmp, "d.toml", &format!("{ISING_TRAIN}\nunknown_key = 1\n"));
    assert_eq!(dsb(&["train", &cfg]).status.code(), Some(2));
}

#[test]
fn train_run_directory_and_manifest() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "c.toml", ISING_TRAIN);
    let run = tmp.path().join("run");
    let printed = ok(&dsb(&["train", &cfg, "--out", path_str(&run), "--epochs", "20"]));
    assert_eq!(printed.trim(), path_str(&run));

    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert!(lines.next().unwrap().starts_with("epoch,policy,loss,c,beta"));
    assert_eq!(lines.count(), 20);

    let m = json(&run.join("manifest.json"));
    let o = m["overrides"].as_array().unwrap();
    let epochs = o.iter().find(|o| o["field"] == "train.epochs").expect("epochs override recorded");
    assert_eq!(epochs["file"], 40);
    assert_eq!(epochs["override"], 20);
    assert_eq!(m["config"]["train"]["epochs"], 20);
    assert_eq!(m["off_policy"], true);
    assert!(m["finished_unix"].as_u64().unwrap() >= m["started_unix"].as_u64().unwrap());

    let files = m["files"].as_array().unwrap();
    let names: Vec<&str> = files.iter().map(|f| f["path"].as_str().unwrap()).collect();
    for want in ["config.toml", "metrics.csv", "report.json", "samples.csv", "samples.ppm", "checkpoint/net.bin"] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
    assert!(!names.contains(&"manifest.json"));
    for f in files {
        let bytes = fs::read(run.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }

    let report = json(&run.join("report.json"));
    for key in ["elbo", "eubo", "log_z", "log_z_learned", "tv_exact", "tv_empirical", "magnetisation_error", "correlation_error", "sinkhorn"] {
        assert!(report.get(key).is_some(), "report lacks {key}: {report}");
    }
    assert!(report.get("mmd").is_none());
    let log_z = report["log_z"].as_f64().unwrap();
    assert!(report["elbo"]["mean"].as_f64().unwrap() <= log_z + 1e-9 + 3.0 * report["elbo"]["se"].as_f64().unwrap());

    let ppm = fs::read(run.join("samples.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n"));
}

#[test]
fn eval_reproduces_the_report_bytes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "c.toml", ISING_TRAIN);
    let run = tmp.path().join("run");
    ok(&dsb(&["train", &cfg, "--out", path_str(&run), "--epochs", "10"]));
    let a = tmp.path().join("a.json");
    let b = tmp.path().join("b.json");
    ok(&dsb(&["eval", path_str(&run), "--report", path_str(&a)]));
    ok(&dsb(&["eval", path_str(&run), "--report", path_str(&b)]));
    let a = fs::read(a).unwrap();
    assert_eq!(a, fs::read(b).unwrap());
    assert_eq!(a, fs::read(run.join("report.json")).unwrap());
    // stdout carries the same bytes
    assert_eq!(ok(&dsb(&["eval", path_str(&run)])).as_bytes(), &a[..]);
}

#[test]
fn eval_with_mismatched_dimensions_reports_the_shapes() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "c.toml", ISING_TRAIN);
    let run = tmp.path().join("run");
    ok(&dsb(&["train", &cfg, "--out", path_str(&run), "--epochs", "2"]));
    let other = write(&tmp, "o.toml", &ISING_TRAIN.replace("side = 2", "side = 3").replace("counts = [2, 2]", "counts = [3, 3, 3]"));
    let out = dsb(&["eval", path_str(&run), "--config", &other]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(err.contains("d=4") && err.contains("d=9"), "{err}");
}

const GRAY_MCMC: &str = r#"
seed = 1

[target]
kind = "gray"
dims = 2
bits = 3
half_width = 4.0

[target.energy]
kind = "mixture"
means = [[-2.0, 0.0], [2.0, 0.0]]

[mcmc]
chains = 16
burn_in = 50
samples_per_chain = 8
thin = 5

[mcmc.kernel]
kind = "mh"
h = 1

[eval.reference]
kind = "mixture"
samples = 64
"#;

#[test]
fn mcmc_on_a_gray_target() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "m.toml", GRAY_MCMC);
    let run = tmp.path().join("run");
    ok(&dsb(&["mcmc", &cfg, "--out", path_str(&run)]));
    let samples = fs::read_to_string(run.join("samples.csv")).unwrap();
    assert_eq!(samples.lines().count(), 16 * 8);
    let report = json(&run.join("report.json"));
    assert!(report.get("mmd").is_some() && report.get("sinkhorn").is_some() && report.get("log_z").is_some());
    // not a lattice: the lattice rows are absent rather than zero
    assert!(report.get("magnetisation_error").is_none());
    assert!(report.get("correlation_error").is_none());
    let decoded = fs::read_to_string(run.join("decoded.csv")).unwrap();
    assert_eq!(decoded.lines().next(), Some("x0,x1"));
    assert!(run.join("density.ppm").exists());
    assert_eq!(json(&run.join("manifest.json"))["off_policy"], false);
    // eval of an MCMC run re-scores its samples
    let again = ok(&dsb(&["eval", path_str(&run)]));
    assert_eq!(again.as_bytes(), &fs::read(run.join("report.json")).unwrap()[..]);
}

#[test]
fn mcmc_without_burn_in_echoes_the_initial_states() {
    let tmp = TempDir::new().unwrap();
    let zero = GRAY_MCMC.replace("burn_in = 50", "burn_in = 0").replace("samples_per_chain = 8", "samples_per_chain = 1");
    let cfg = write(&tmp, "m.toml", &zero);
    let a = tmp.path().join("a");
    ok(&dsb(&["mcmc", &cfg, "--out", path_str(&a)]));
    let other = zero.replace("kind = \"mh\"\nh = 1", "kind = \"categorical\"\np_stay = 0.5");
    let cfg = write(&tmp, "n.toml", &other);
    let b = tmp.path().join("b");
    ok(&dsb(&["mcmc", &cfg, "--out", path_str(&b)]));
    // no transitions were made, so the kernel does not matter
    let sa = fs::read_to_string(a.join("samples.csv")).unwrap();
    assert_eq!(sa.lines().count(), 16);
    assert_eq!(sa, fs::read_to_string(b.join("samples.csv")).unwrap());
}

#[test]
fn swendsen_wang_on_a_non_lattice_target_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "m.toml", &GRAY_MCMC.replace("kind = \"mh\"\nh = 1", "kind = \"swendsen_wang\""));
    let out = dsb(&["mcmc", &cfg, "--out", path_str(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Swendsen-Wang"));
}

#[test]
fn mh_baseline_preset_collects_16384_samples() {
    let v: toml::Value = toml::from_str(&ok(&dsb(&["preset", "mh-ising16-b0.6"]))).unwrap();
    let m = &v["mcmc"];
    let n = m["chains"].as_integer().unwrap() * m["samples_per_chain"].as_integer().unwrap();
    assert_eq!(n, 16384);
    assert_eq!(m["burn_in"].as_integer(), Some(2000));
    assert_eq!(m["thin"].as_integer(), Some(200));
}

const GRAY_BRIDGE: &str = r#"
seed = 2

[target]
kind = "gray"
dims = 1
bits = 4
half_width = 3.0

[target.energy]
kind = "mixture"
means = [[-1.5], [1.5]]

[net]
hidden = [16]

[source]
kind = "target"
samples = 256

[source.target]
kind = "gray"
dims = 1
bits = 4
half_width = 3.0

[source.target.energy]
kind = "mixture"
means = [[0.0]]

[bridge]
iterations = 1
k_traj = 4
groups = 4
backward_batch = 16
forward_steps = 5
backward_steps = 5
lr = 0.001

[bridge.kernel]
p_flip = 0.2
steps = 6

[bridge.off_policy]
buffer_capacity = 64
mcmc_steps = 3
refresh = 8

[bridge.off_policy.mcmc]
kind = "mh"
h = 1

[eval]
samples = 64

[eval.reference]
kind = "oracle"
samples = 64
"#;

#[test]
fn bridge_with_no_iterations_reports_the_reference() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "b.toml", GRAY_BRIDGE);
    let run = tmp.path().join("run");
    ok(&dsb(&["bridge", &cfg, "--out", path_str(&run), "--iterations", "0"]));
    let csv = fs::read_to_string(run.join("bridge.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "{csv}");
    assert!(lines[0].starts_with("iteration,"));
    assert!(lines[1].starts_with("0,0,,0,,"));
    let report = json(&run.join("report.json"));
    assert!(report["tv_forward"].as_f64().unwrap() > 0.0);
    assert!(report["tv_backward"].as_f64().unwrap() > 0.0);
    let m = json(&run.join("manifest.json"));
    let it = m["overrides"].as_array().unwrap().iter().find(|o| o["field"] == "bridge.iterations").unwrap();
    assert_eq!(it["file"], 1);
    assert_eq!(it["override"], 0);
    for n in 0..=6 {
        let p = run.join(format!("marginals/step_{n:03}.ppm"));
        assert!(fs::read(&p).unwrap().starts_with(b"P6\n"), "{}", p.display());
    }
    assert!(run.join("checkpoint/forward.bin").exists() && run.join("checkpoint/backward.bin").exists());
}

#[test]
fn bridge_policy_flag_is_recorded() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "b.toml", GRAY_BRIDGE);
    let off = tmp.path().join("off");
    ok(&dsb(&["bridge", &cfg, "--out", path_str(&off)]));
    assert_eq!(json(&off.join("manifest.json"))["off_policy"], true);
    assert_eq!(fs::read_to_string(off.join("bridge.csv")).unwrap().lines().count(), 3);
    let on = tmp.path().join("on");
    ok(&dsb(&["bridge", &cfg, "--out", path_str(&on), "--on-policy"]));
    let m = json(&on.join("manifest.json"));
    assert_eq!(m["off_policy"], false);
    assert!(m["config"]["bridge"]["off_policy"].is_null());
    // eval of a bridge run reproduces its report
    let again = ok(&dsb(&["eval", path_str(&on)]));
    assert_eq!(again.as_bytes(), &fs::read(on.join("report.json")).unwrap()[..]);
}

fn fixture_cmd(extra: &str) -> String {
    format!("{DSB} fixture-server {extra}")
}

#[test]
fn fixture_check_against_sum_of_symbols() {
    let out = ok(&dsb(&["serve-fixture-check", "--energy-cmd", &fixture_cmd("--d 16 --c 8"), "--states", "10000"]));
    assert!(out.starts_with("ok: 10000 states"), "{out}");
}

#[test]
fn fixture_check_detects_a_different_energy() {
    let tmp = TempDir::new().unwrap();
    let cfg = write(&tmp, "t.toml", &ISING_TRAIN);
    // the server sums symbols on the Ising space; the check expects the Ising energy
    let out = dsb(&["serve-fixture-check", "--energy-cmd", &fixture_cmd("--d 4 --c 2"), "--config", &cfg]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("disagrees"), "{}", stderr(&out));
    let out = ok(&dsb(&["serve-fixture-check", "--energy-cmd", &fixture_cmd(&format!("--config {cfg}")), "--config", &cfg]));
    assert!(out.starts_with("ok:"));
}

#[test]
fn protocol_version_mismatch_aborts() {
    let out = dsb(&["serve-fixture-check", "--energy-cmd", &fixture_cmd("--protocol-version 9")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains('9'), "{}", stderr(&out));
}

#[test]
fn unreachable_energy_server_is_a_runtime_abort() {
    let out = dsb(&["serve-fixture-check", "--energy-addr", "127.0.0.1:1"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn remote_training_matches_in_process_training() {
    let tmp = TempDir::new().unwrap();
    let local_cfg = write(&tmp, "local.toml", ISING_TRAIN);
    let remote_text = ISING_TRAIN.replace(
        "[target]\nkind = \"ising\"\nside = 2\nbeta = 0.4\n",
        "[target]\nkind = \"remote\"\nname = \"fixture\"\n",
    ).replace("kind = \"swendsen_wang\"", "kind = \"mh\"\nh = 1");
    let local_text = ISING_TRAIN.replace("kind = \"swendsen_wang\"", "kind = \"mh\"\nh = 1");
    let local_cfg2 = write(&tmp, "local2.toml", &local_text);
    let remote_cfg = write(&tmp, "remote.toml", &remote_text);
    let local = tmp.path().join("local");
    let remote = tmp.path().join("remote");
    ok(&dsb(&["train", &local_cfg2, "--out", path_str(&local), "--epochs", "15"]));
    ok(&dsb(&[
        "train",
        &remote_cfg,
        "--out",
        path_str(&remote),
        "--epochs",
        "15",
        "--energy-cmd",
        &fixture_cmd(&format!("--config {local_cfg}")),
    ]));
    assert_eq!(
        fs::read_to_string(local.join("metrics.csv")).unwrap(),
        fs::read_to_string(remote.join("metrics.csv")).unwrap()
    );
    let m = json(&remote.join("manifest.json"));
    assert!(m["overrides"].as_array().unwrap().iter().any(|o| o["field"] == "energy_rpc"));
}
