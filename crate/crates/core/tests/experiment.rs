use std::path::Path;

use tda_core::data::{DatasetSpec, LenDistribution};
use tda_core::experiment::{
    cmd_attribute, cmd_fim, cmd_gen_data, cmd_grid_search, cmd_pipeline, cmd_test_to_train,
    cmd_train, cmd_unlearn, BaselineParams, UnlearnGrid, AGGREGATE_FILE, GRID_FILE, T2T_DIR,
};
use tda_core::model::read_checkpoint;
use tda_core::{ExperimentConfig, LayerGroup, MaskPolicy, ModelConfig, TdaError, TrainConfig};

fn tiny(out: &Path) -> ExperimentConfig {
    let model = ModelConfig {
        latent_dim: 2,
        max_frames: 8,
        cond_dim: 3,
        model_width: 8,
        num_blocks: 2,
        num_heads: 2,
        ff_hidden: 8,
        cond_tokens: 2,
        seed: 0,
    };
    ExperimentConfig {
        seed: 7,
        out_dir: out.to_path_buf(),
        dataset: DatasetSpec {
            n: 12,
            num_clusters: 3,
            max_frames: 8,
            latent_dim: 2,
            cond_dim: 3,
            len_distribution: LenDistribution::Quarters,
            ..DatasetSpec::default()
        },
        model,
        train: TrainConfig {
            steps: 20,
            batch_size: 6,
            warmup_steps: 2,
            ..TrainConfig::default()
        },
        fim_timesteps: 2,
        unlearn: UnlearnGrid {
            learning_rates: vec![1e-5],
            mask_policies: vec![MaskPolicy::MIXED],
            grad_timesteps: 8,
            ..UnlearnGrid::default()
        },
        eval_timesteps: 4,
        baseline: BaselineParams {
            window: 4,
            hop: 2,
            k: Some(3),
        },
        targets: 2,
        generated: 2,
        sample_steps: 3,
        fd_samples: 17,
        ..ExperimentConfig::default()
    }
}

#[test]
fn commands_report_missing_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    match cmd_train(&cfg) {
        Err(TdaError::MissingPrerequisite { producer, .. }) => assert_eq!(producer, "gen-data"),
        other => panic!("expected a missing prerequisite, got {other:?}"),
    }
    cmd_gen_data(&cfg).unwrap();
    assert!(matches!(
        cmd_fim(&cfg),
        Err(TdaError::MissingPrerequisite { .. })
    ));
    cmd_train(&cfg).unwrap();
    assert!(matches!(
        cmd_unlearn(&cfg, 0),
        Err(TdaError::MissingPrerequisite { .. })
    ));
    assert!(matches!(
        cmd_grid_search(&cfg),
        Err(TdaError::MissingPrerequisite { .. })
    ));
}

#[test]
fn single_cell_grid_gives_one_row_with_flags_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_fim(&cfg).unwrap();
    let rows = cmd_grid_search(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].outcomes.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join(GRID_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(
        lines[1].starts_with("all,1e-5,1,mixed,true,false,2,"),
        "{}",
        lines[1]
    );
}

#[test]
fn unlearn_with_to_kv_records_the_group() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.unlearn.groups = vec![LayerGroup::ToKv];
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_fim(&cfg).unwrap();
    let path = cmd_unlearn(&cfg, 3).unwrap();
    let ck = read_checkpoint::<f64>(&path).unwrap();
    let prov = ck.meta.provenance.unwrap();
    assert_eq!(prov["unlearn_config"]["group"], "to_kv");
    assert_eq!(prov["target_id"], 3);
    let side: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(format!("{}.json", path.display())).unwrap())
            .unwrap();
    assert_eq!(side["details"]["group"], "to_kv");
    let scores = cmd_attribute(&cfg, 3).unwrap();
    let text = std::fs::read_to_string(scores).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert!(matches!(cmd_unlearn(&cfg, 99), Err(TdaError::Argument(_))));
}

#[test]
fn single_sample_test_to_train_has_zero_spread_and_n_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.generated = 1;
    cmd_gen_data(&cfg).unwrap();
    cmd_train(&cfg).unwrap();
    cmd_fim(&cfg).unwrap();
    let summary = cmd_test_to_train(&cfg).unwrap();
    assert_eq!(summary.samples, 1);
    let agg = std::fs::read_to_string(dir.path().join(T2T_DIR).join(AGGREGATE_FILE)).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines.len(), 1 + 12);
    let header: Vec<&str> = lines[0].split(',').collect();
    for line in &lines[1..] {
        for (h, v) in header.iter().zip(line.split(',')) {
            if h.ends_with("_std") {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{h}");
            }
        }
    }
    let sample = std::fs::read_to_string(dir.path().join(T2T_DIR).join("sample_000.csv")).unwrap();
    assert!(sample.starts_with("track_id,tau,minmax,softmax,sim_aaa,sim_avg\n"));
    assert_eq!(sample.lines().count(), 13);
}

#[test]
fn rerunning_the_pipeline_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_pipeline(&cfg).unwrap();
    let grid = std::fs::read(dir.path().join(GRID_FILE)).unwrap();
    let stamp = std::fs::metadata(dir.path().join("checkpoint.bin"))
        .unwrap()
        .modified()
        .unwrap();
    cmd_pipeline(&cfg).unwrap();
    assert_eq!(std::fs::read(dir.path().join(GRID_FILE)).unwrap(), grid);
    let again = std::fs::metadata(dir.path().join("checkpoint.bin"))
        .unwrap()
        .modified()
        .unwrap();
    assert_eq!(stamp, again);
}

#[test]
fn config_files_round_trip_and_reject_bad_versions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let path = dir.path().join("cfg.json");
    cfg.save(&path).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
    let mut bad = cfg.clone();
    bad.config_version = 99;
    bad.save(&path).unwrap();
    assert!(ExperimentConfig::load(&path).is_err());
}
