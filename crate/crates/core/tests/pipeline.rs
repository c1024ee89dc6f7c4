use std::collections::BTreeMap;
use std::path::Path;

use msr_core::config::{MockKind, RunConfig};
use msr_core::pipeline::{sweep, Pipeline, RunManifest, Stage, StageOptions, SweepParam};
use msr_core::synthetic::{fixture_config, SyntheticSpec};

fn small(dir: &Path, behavior: MockKind) -> RunConfig {
    let spec = SyntheticSpec { users: 12, items: 30, min_len: 4, max_len: 7, ..Default::default() };
    let mut config = fixture_config(dir, &spec, behavior).unwrap();
    config.split.n_folds = 3;
    config.split.eval_ratio = 10;
    config.summarize.target_words = 20;
    config.preference.summary_length = 30;
    config
}

/// Relative path -> bytes for every file under the stage directories.
fn snapshot(out: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, acc);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                acc.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(out, &out.join("stages"), &mut acc);
    acc
}

#[tokio::test]
async fn oracle_run_is_perfect_and_rerun_is_free() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), MockKind::OracleYes);
    let out = config.data.out_dir.clone();

    let mut pipeline = Pipeline::new(config.clone()).unwrap();
    let manifest = pipeline.run(&Stage::RUN).await.unwrap();
    assert!(manifest.stages.values().all(|r| !r.reused));
    assert!(manifest.stages[&Stage::SummarizeItems].total_backend_calls() > 0);
    let report = pipeline.load_report().unwrap();
    assert_eq!(report.per_fold.len(), 3);
    for fold in &report.per_fold {
        assert_eq!((fold.auc, fold.hr_at_k, fold.mrr_at_k), (1.0, 1.0, 1.0));
    }
    let first = snapshot(&out);

    // Completed stages are reused.
    let mut again = Pipeline::new(config.clone()).unwrap();
    let manifest = again.run(&Stage::RUN).await.unwrap();
    assert!(manifest.stages.values().all(|r| r.reused && r.total_backend_calls() == 0));

    // Forced re-execution is served by the cache and rewrites identical bytes.
    let mut forced = Pipeline::new(config).unwrap().with_force(true);
    let manifest = forced.run(&Stage::RUN).await.unwrap();
    for record in manifest.stages.values() {
        assert!(!record.reused);
        assert_eq!(record.total_backend_calls(), 0);
    }
    assert!(manifest.stages[&Stage::Score].total_cache_hits() > 0);
    assert_eq!(snapshot(&out), first);
    assert_eq!(RunManifest::load(&out).unwrap(), manifest);
}

#[tokio::test]
async fn stage_without_upstream_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut pipeline = Pipeline::new(small(dir.path(), MockKind::HashText)).unwrap();
    let err = pipeline.run_stage(Stage::SummarizeItems).await.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    pipeline.run_stage(Stage::Ingest).await.unwrap();
    pipeline.run_stage(Stage::SummarizeItems).await.unwrap();
    let err = pipeline.run_stage(Stage::Score).await.unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("infer-preferences"), "{err}");
}

#[tokio::test]
async fn missing_input_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path(), MockKind::HashText);
    config.data.items = dir.path().join("nope.jsonl");
    let mut pipeline = Pipeline::new(config).unwrap();
    assert_eq!(pipeline.run_stage(Stage::Ingest).await.unwrap_err().exit_code(), 2);
}

#[tokio::test]
async fn resumed_run_matches_uninterrupted_run() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();

    let mut whole = Pipeline::new(small(a.path(), MockKind::HashText)).unwrap();
    whole.run(&Stage::RUN).await.unwrap();

    let config = small(b.path(), MockKind::HashText);
    let mut partial = Pipeline::new(config.clone()).unwrap();
    partial.run(&Stage::RUN[..3]).await.unwrap();
    // A stage directory left without its marker is redone.
    std::fs::create_dir_all(partial.stage_dir(Stage::Score).unwrap()).unwrap();
    let mut resumed = Pipeline::new(config).unwrap();
    resumed.run(&Stage::RUN).await.unwrap();

    assert_eq!(
        std::fs::read(whole.stage_dir(Stage::Evaluate).unwrap().join("report.json")).unwrap(),
        std::fs::read(resumed.stage_dir(Stage::Evaluate).unwrap().join("report.json")).unwrap()
    );
}

#[tokio::test]
async fn settings_change_only_downstream_fingerprints() {
    let dir = tempfile::tempdir().unwrap();
    let base = small(dir.path(), MockKind::HashText);
    let a = Pipeline::new(base.clone()).unwrap();
    let mut changed = base.clone();
    changed.preference.block_size = 5;
    let b = Pipeline::new(changed).unwrap();
    for stage in [Stage::Ingest, Stage::SummarizeItems] {
        assert_eq!(a.fingerprint(stage).unwrap(), b.fingerprint(stage).unwrap());
    }
    for stage in [Stage::InferPreferences, Stage::BuildSft, Stage::Score, Stage::Evaluate] {
        assert_ne!(a.fingerprint(stage).unwrap(), b.fingerprint(stage).unwrap());
    }
    // Concurrency and cache location are not semantic.
    let mut tuned = base.clone();
    tuned.recommender.concurrency = 1;
    tuned.gateway.use_cache = false;
    let c = Pipeline::new(tuned).unwrap();
    assert_eq!(a.fingerprint(Stage::Evaluate).unwrap(), c.fingerprint(Stage::Evaluate).unwrap());
    let mut k = base;
    k.recommender.k = 3;
    let d = Pipeline::new(k).unwrap();
    assert_eq!(a.fingerprint(Stage::Score).unwrap(), d.fingerprint(Stage::Score).unwrap());
    assert_ne!(a.fingerprint(Stage::Evaluate).unwrap(), d.fingerprint(Stage::Evaluate).unwrap());
}

#[tokio::test]
async fn sft_files_and_heldout_loss() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small(dir.path(), MockKind::UniformLogprob);
    config.split.train_ratio = 2;
    let mut pipeline = Pipeline::new(config.clone()).unwrap();
    pipeline
        .run(&[Stage::Ingest, Stage::SummarizeItems, Stage::InferPreferences, Stage::BuildSft, Stage::EvalLoss])
        .await
        .unwrap();
    let sft = pipeline.stage_dir(Stage::BuildSft).unwrap();
    let (meta, examples) = msr_core::sft::read_dataset(&sft.join("seed42-fold0.train.jsonl")).unwrap();
    assert_eq!(meta.train_ratio, 2);
    assert_eq!(examples.len() % 3, 0);
    let loss = pipeline.load_loss().unwrap();
    assert_eq!(loss.per_fold.len(), 3);
    assert!((loss.overall.mean_loss - std::f64::consts::LN_2).abs() < 1e-12);

    let mut one_fold = Pipeline::new(config).unwrap().with_options(StageOptions { fold: Some(1) });
    one_fold.run_stage(Stage::EvalLoss).await.unwrap();
    assert_eq!(one_fold.load_loss().unwrap().per_fold.len(), 1);
}

#[tokio::test]
async fn sweeps_reuse_item_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let config = small(dir.path(), MockKind::HashText);
    let report = sweep(&config, SweepParam::BlockSize, &[1, 2, 3, 5]).await.unwrap();
    assert_eq!(report.rows.len(), 4);
    for (i, row) in report.rows.iter().enumerate() {
        assert!(row.ok, "{:?}", row.error);
        assert_eq!(row.stages[&Stage::SummarizeItems].reused, i > 0);
        assert!(!row.stages[&Stage::InferPreferences].reused);
        assert!(row.stages[&Stage::InferPreferences].total_backend_calls() > 0);
    }
    let tsv = std::fs::read_to_string(config.data.out_dir.join("sweeps/block_size.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    assert!(report.to_table().lines().count() == 5);

    let report = sweep(&config, SweepParam::SummaryLength, &[20, 0, 40]).await.unwrap();
    let ok: Vec<bool> = report.rows.iter().map(|r| r.ok).collect();
    assert_eq!(ok, [true, false, true]);

    assert_eq!(sweep(&config, SweepParam::BlockSize, &[]).await.unwrap_err().exit_code(), 2);
    assert!("temperature".parse::<SweepParam>().is_err());
}

#[test]
fn example_config_parses_with_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../msr.example.toml");
    let config = RunConfig::load(&path).unwrap();
    config.validate().unwrap();
    let mut defaults = RunConfig::default();
    defaults.resolve_paths(path.parent().unwrap());
    assert_eq!(config.split, defaults.split);
    assert_eq!(config.summarize, defaults.summarize);
    assert_eq!(config.preference, defaults.preference);
    assert_eq!(config.recommender, defaults.recommender);
    assert_eq!(config.gateway, defaults.gateway);
    assert_eq!(config.mock, defaults.mock);
    assert_eq!(config.data, defaults.data);
    assert_eq!(config.roles.len(), 3);
}
