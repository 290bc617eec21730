use std::path::Path;
use std::process::{Command, Output};

fn tda(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tda"))
        .args(args)
        .arg("--out")
        .arg(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

/// Writes a tiny config by editing the default one.
fn tiny_config(dir: &Path) -> String {
    let path = dir.join("cfg.json");
    let out = tda(dir, &["init-config", path.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    for section in ["dataset", "model"] {
        cfg[section]["max_frames"] = 8.into();
        cfg[section]["latent_dim"] = 2.into();
        cfg[section]["cond_dim"] = 3.into();
    }
    cfg["dataset"]["n"] = 12.into();
    cfg["dataset"]["num_clusters"] = 3.into();
    cfg["model"]["model_width"] = 8.into();
    cfg["model"]["num_heads"] = 2.into();
    cfg["model"]["ff_hidden"] = 8.into();
    cfg["model"]["cond_tokens"] = 2.into();
    cfg["train"]["steps"] = 10.into();
    cfg["train"]["batch_size"] = 6.into();
    cfg["train"]["warmup_steps"] = 2.into();
    cfg["fim_timesteps"] = 2.into();
    cfg["unlearn"]["grad_timesteps"] = 8.into();
    cfg["unlearn"]["mask_policies"] = serde_json::json!(["mixed"]);
    cfg["eval_timesteps"] = 4.into();
    cfg["baseline"]["window"] = 4.into();
    cfg["targets"] = 2.into();
    cfg["generated"] = 2.into();
    cfg["sample_steps"] = 3.into();
    cfg["fd_samples"] = 17.into();
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_prerequisite_names_the_producing_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = tda(dir.path(), &["--config", &cfg, "train"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gen-data"), "{err}");
}

#[test]
fn invalid_mask_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = tda(dir.path(), &["--mask", "sometimes", "gen-data"]);
    assert!(!out.status.success());
}

#[test]
fn pipeline_is_deterministic_across_runs_and_job_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny_config(a.path());
    for (dir, jobs) in [(a.path(), "1"), (b.path(), "2")] {
        let out = tda(
            dir,
            &["--config", &cfg, "--seed", "5", "--jobs", jobs, "pipeline"],
        );
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for file in [
        "grid_search.csv",
        "test_to_train/aggregate.csv",
        "test_to_train/sample_000.csv",
    ] {
        let x = std::fs::read(a.path().join(file)).unwrap();
        let y = std::fs::read(b.path().join(file)).unwrap();
        assert_eq!(x, y, "{file}");
    }
}

#[test]
fn grid_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for cmd in ["gen-data", "train"] {
        assert!(tda(dir.path(), &["--config", &cfg, cmd]).status.success());
    }
    let flags = [
        "--config", &cfg, "--group", "to_kv", "--lr", "1e-4", "--mask", "both",
    ];
    let fim = tda(dir.path(), &[&flags[..], &["fim"]].concat());
    assert!(
        fim.status.success(),
        "{}",
        String::from_utf8_lossy(&fim.stderr)
    );
    assert!(dir.path().join("fim_to_kv.bin").is_file());
    let out = tda(dir.path(), &[&flags[..], &["grid-search"]].concat());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("grid_search.csv")).unwrap();
    assert!(
        csv.lines()
            .nth(1)
            .unwrap()
            .starts_with("to_kv,1e-4,1,both,true,true,"),
        "{csv}"
    );
    let out = tda(
        dir.path(),
        &[&flags[..], &["attribute", "--target", "1"]].concat(),
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("scores_1.csv").is_file());
}
