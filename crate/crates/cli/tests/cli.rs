use std::path::Path;
use std::process::{Command, Output};

fn hetmoe(args: &[&str], out_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_hetmoe"));
    cmd.args(args).env_remove("HETMOE_OUTPUT_DIR");
    if let Some(dir) = out_dir {
        cmd.env("HETMOE_OUTPUT_DIR", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&out.stderr)))
}

#[test]
fn lists_all_experiments() {
    let out = hetmoe(&["list-experiments", "--json"], None);
    assert!(out.status.success());
    let list: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let names: Vec<&str> = list.as_array().unwrap().iter().map(|e| e["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "noise-validate",
            "quantizer-validate",
            "lemma1",
            "theorem1",
            "partition-compare",
            "perf-table",
            "calibrate"
        ]
    );
}

#[test]
fn invalid_alpha_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = \"lemma1\"\n[task]\nalpha = 0.3\n");
    for cmd in ["validate", "run"] {
        let out = hetmoe(&[cmd, &cfg], Some(dir.path()));
        assert_eq!(out.status.code(), Some(2));
        let err = error_json(&out);
        assert_eq!(err["error"]["kind"], "config");
        assert_eq!(err["error"]["exit_code"], 2);
        assert!(err["error"]["message"].as_str().unwrap().contains("(0, 1/4)"));
    }
}

#[test]
fn unreadable_and_malformed_configs() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.toml");
    let out = hetmoe(&["validate", missing.to_str().unwrap()], None);
    assert_eq!(out.status.code(), Some(2));
    let cfg = write_config(dir.path(), "experiment = ");
    let out = hetmoe(&["validate", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"]["kind"], "config");
}

#[test]
fn experiment_failure_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "experiment = \"lemma1\"\nseeds = [0]\n[train]\nsteps = 5\nweight_bound = 0.01\n",
    );
    let out = hetmoe(&["run", &cfg], Some(&dir.path().join("out")));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"]["kind"], "divergence");
}

#[test]
fn perf_table_run_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("perf");
    let cfg = write_config(dir.path(), "experiment = \"perf-table\"\noutput_dir = \"ignored\"\n");
    let out = hetmoe(&["run", &cfg], Some(&out_dir));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("perf_table.csv")).unwrap();
    assert!(csv.starts_with(
        "param_in_digital,modules_in_digital,params_in_digital_pct,throughput_tokens_per_s,energy_efficiency_tokens_per_watt_s\n"
    ));
    assert_eq!(csv.lines().count(), 6);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "perf-table");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["wall_time_s"].as_f64().unwrap() >= 0.0);
    assert!(manifest.get("git_revision").is_some());
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert!(out_dir.join("config.resolved.toml").exists());
    assert!(!Path::new("ignored").exists());
}

#[test]
fn output_flag_beats_config_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("flag");
    let cfg = write_config(dir.path(), "experiment = \"perf-table\"\noutput_dir = \"ignored\"\n");
    let out = hetmoe(&["run", &cfg, "--output-dir", out_dir.to_str().unwrap()], None);
    assert!(out.status.success());
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn lemma1_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "experiment = \"lemma1\"\nseeds = [0, 1]\n[train]\nsteps = 40\nbatch_size = 32\n",
    );
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(hetmoe(&["run", &cfg], Some(&a)).status.success());
    assert!(hetmoe(&["run", &cfg], Some(&b)).status.success());
    let header = std::fs::read_to_string(a.join("lemma1_seeds.csv")).unwrap();
    assert!(header.starts_with("seed,initial_loss,final_loss,loss_halved,rare_experts,frequent_experts"));
    assert_eq!(header.lines().count(), 3);
    for name in ["lemma1_seeds.csv", "lemma1_experts.csv", "lemma1_history.csv", "lemma1.json"] {
        assert_eq!(std::fs::read(a.join(name)).unwrap(), std::fs::read(b.join(name)).unwrap(), "{name}");
    }
}
