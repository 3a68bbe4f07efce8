use std::fs;
use std::path::Path;
use std::process::Command;

use maxclust::harness::RunManifest;

fn maxclust(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_maxclust"))
        .args(args)
        .env_remove("MAXCLUST_OUT")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "radius = 10\nreplicas = 40\n[model]\nmodel = \"bernoulli\"\np = 0.5\n");
    let mut manifests = Vec::new();
    for w in ["1", "3"] {
        let out = dir.path().join(format!("w{w}"));
        let o = maxclust(&["bc-compare", "--config", &cfg, "--workers", w, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        manifests.push(RunManifest::read(&out).unwrap());
    }
    assert_eq!(manifests[0].files, manifests[1].files);
    assert_eq!(manifests[0].config_digest, manifests[1].config_digest);
}

#[test]
fn seed_changes_records() {
    let dir = tempfile::tempdir().unwrap();
    let run = |seed: &str| {
        let out = dir.path().join(seed);
        let o = maxclust(&["extremes", "--seed", seed, "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read_to_string(out.join("records.jsonl")).unwrap()
    };
    assert_ne!(run("1"), run("2"));
}

#[test]
fn config_errors_exit_2_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[hitting]\ngamma = 2.0\n");
    let o = maxclust(&["hitting", "--config", &cfg, "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("hitting.gamma"));

    let cfg = write_config(dir.path(), "kind = \"tails\"\n");
    let o = maxclust(&["extremes", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));

    let o = maxclust(&["sweep"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_3_without_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nmodel = \"bernoulli\"\np = 0.0\n[hitting]\nprob_samples = 1000\n");
    let out = dir.path().join("out");
    let o = maxclust(&["hitting", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn defaults_round_trip() {
    let o = maxclust(&["defaults", "hitting"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = maxclust::harness::ExperimentConfig::from_toml(&text, None).unwrap();
    assert_eq!(cfg, maxclust::harness::ExperimentConfig::new(maxclust::harness::Kind::Hitting));
}

#[test]
fn default_output_dir_uses_env_root() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_maxclust"))
        .args(["oracle"])
        .env("MAXCLUST_OUT", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "default oracle box exceeds the enumeration cap");
    let cfg = write_config(dir.path(), "dim = 1\nradius = 6\n");
    let o = Command::new(env!("CARGO_BIN_EXE_maxclust"))
        .args(["oracle", "--config", &cfg])
        .env("MAXCLUST_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    let printed = String::from_utf8(o.stdout).unwrap();
    let run_dir = Path::new(printed.lines().next().unwrap());
    assert!(run_dir.starts_with(dir.path()));
    assert!(run_dir.file_name().unwrap().to_string_lossy().starts_with("oracle-"));
    assert!(run_dir.join("law.csv").exists());
}
