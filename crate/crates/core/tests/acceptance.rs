//! Acceptance suite. Every criterion prints one PASS/FAIL line; the binary
//! exits non-zero if any criterion fails. Runs offline against the mock
//! backend.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use msr_core::catalog::{build_sequences, build_split_manifest, Catalog, Item, SplitRole, SplitSettings, Thresholds};
use msr_core::config::{MockKind, RunConfig};
use msr_core::gateway::{CompletionRequest, Gateway, Message, MockBackend, MockBehavior, RetryPolicy, RoleTag};
use msr_core::metrics::{auc_per_user, hit_rate_at_k, mrr_at_k, UserEvalRecord};
use msr_core::pipeline::{sweep, Pipeline, RunManifest, Stage, SweepParam};
use msr_core::preference::{PreferenceInferer, PreferenceMode, PreferenceSettings};
use msr_core::recommender::{rank_candidates, yes_probability};
use msr_core::sft::{forced_loss, read_dataset};
use msr_core::summarizer::{ItemSummarizer, SummarizerSettings, SummaryMode};
use msr_core::synthetic::{fixture_config, generate, png_bytes, SyntheticSpec};
use msr_core::templates::Templates;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    };
}

fn main() -> ExitCode {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
    let criteria: Vec<Criterion> = vec![
        ("yes/no probability suite", Box::new(yes_no_suite)),
        ("metric oracle equivalence", Box::new(metric_oracle)),
        ("perfect-oracle end-to-end run", Box::new(|| runtime.block_on(perfect_oracle_run()))),
        ("random-score end-to-end run", Box::new(|| runtime.block_on(random_score_run()))),
        ("call-count laws", Box::new(|| runtime.block_on(call_count_laws()))),
        ("teacher-forced loss analytic check", Box::new(|| runtime.block_on(loss_analytic()))),
        ("sampling contracts", Box::new(|| runtime.block_on(sampling_contracts()))),
        ("cache idempotence", Box::new(|| runtime.block_on(cache_idempotence()))),
        ("sweep table shapes", Box::new(|| runtime.block_on(sweep_shapes()))),
    ];

    let mut failed = 0;
    for (name, check) in &criteria {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(check))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.2}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason} [{secs:.2}s]");
            }
        }
    }
    println!("\n{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ── Helpers ──

fn mock_gateway(behavior: MockBehavior) -> (Gateway, MockBackend) {
    let mock = MockBackend::new(3, behavior);
    let gw = Gateway::builder()
        .single(Arc::new(mock.clone()), 16, RetryPolicy::default())
        .build()
        .unwrap();
    (gw, mock)
}

fn fixture(dir: &Path, spec: SyntheticSpec, behavior: MockKind) -> RunConfig {
    fixture_config(dir, &spec, behavior).unwrap()
}

fn stage_files(pipeline: &Pipeline, stage: Stage) -> BTreeMap<String, Vec<u8>> {
    let dir = pipeline.stage_dir(stage).unwrap();
    let mut files = BTreeMap::new();
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        files.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
    }
    files
}

// ── Criteria ──

fn yes_no_suite() -> Outcome {
    let p = yes_probability(0.6, 0.2);
    ensure!(p == 0.75, "p(0.6, 0.2) = {p:.17}");

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let y: f64 = rng.random_range(1e-9..1.0);
        let n: f64 = rng.random_range(1e-9..1.0);
        worst = worst.max((yes_probability(y, n) + yes_probability(n, y) - 1.0).abs());
    }
    ensure!(worst <= 1e-12, "swap symmetry off by {worst:e}");

    for trial in 0..200 {
        let pairs: Vec<(String, f64, f64)> = (0..21)
            .map(|i| (format!("i{i:02}"), rng.random_range(1e-6..1.0), rng.random_range(1e-6..1.0)))
            .collect();
        let c: f64 = rng.random_range(1e-3..1e3);
        let order = |scale: f64| {
            let mut scored: Vec<(String, f64)> = pairs
                .iter()
                .map(|(id, y, n)| (id.clone(), yes_probability(scale * y, scale * n)))
                .collect();
            rank_candidates(&mut scored);
            scored.into_iter().map(|(id, _)| id).collect::<Vec<_>>()
        };
        ensure!(order(1.0) == order(c), "trial {trial}: ranking changed under c = {c}");
    }
    Ok("p(0.6,0.2)=0.75, 1000 swapped pairs, 200 rescaled rankings".into())
}

fn metric_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for r in 0..1000 {
        let n = rng.random_range(1..=30);
        // Coarse scores so ties are common.
        let draw = |rng: &mut ChaCha8Rng| f64::from(rng.random_range(0..12u32)) / 11.0;
        let positive_id = format!("p{:02}", rng.random_range(0..40));
        let positive_score = draw(&mut rng);
        let negatives: Vec<(String, f64)> = (0..n)
            .map(|i| (format!("n{i:02}"), draw(&mut rng)))
            .filter(|(id, _)| *id != positive_id)
            .collect();
        let record = UserEvalRecord::from_scores("u", (&positive_id, positive_score), &negatives).unwrap();

        let pairs: f64 = negatives
            .iter()
            .map(|(_, s)| if positive_score > *s { 1.0 } else if positive_score == *s { 0.5 } else { 0.0 })
            .sum();
        let brute_auc = pairs / negatives.len() as f64;
        let auc = auc_per_user(&record);
        ensure!((auc - brute_auc).abs() <= 1e-12, "record {r}: auc {auc} vs {brute_auc}");

        let mut all = negatives.clone();
        all.push((positive_id.clone(), positive_score));
        all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let rank = all.iter().position(|(id, _)| *id == positive_id).unwrap() + 1;
        let hr = if rank <= 5 { 1.0 } else { 0.0 };
        let mrr = if rank <= 5 { 1.0 / rank as f64 } else { 0.0 };
        ensure!(hit_rate_at_k(&record, 5) == hr, "record {r}: hr@5");
        ensure!(mrr_at_k(&record, 5) == mrr, "record {r}: mrr@5");
    }
    Ok("1000 records match pairwise counting and full sort".into())
}

async fn perfect_oracle_run() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut config = fixture(dir.path(), SyntheticSpec::default(), MockKind::OracleYes);
    config.mock.p = 1.0;
    config.preference.mode = PreferenceMode::Recurrent;
    config.preference.block_size = 3;
    let started = Instant::now();
    let mut pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;
    pipeline.run(&Stage::RUN).await.map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let report = pipeline.load_report().map_err(|e| e.to_string())?;
    ensure!(report.k == 5, "k = {}", report.k);
    let users: usize = report.per_fold.iter().map(|f| f.users).sum();
    ensure!(users == 20, "{users} evaluated users");
    for f in &report.per_fold {
        ensure!(
            (f.auc, f.hr_at_k, f.mrr_at_k) == (1.0, 1.0, 1.0),
            "fold {}: auc {} hr {} mrr {}",
            f.fold,
            f.auc,
            f.hr_at_k,
            f.mrr_at_k
        );
    }
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    Ok(format!("{} folds at 1.0/1.0/1.0 in {:.2}s", report.per_fold.len(), elapsed.as_secs_f64()))
}

async fn random_score_run() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { users: 500, items: 60, ..Default::default() };
    let mut config = fixture(dir.path(), spec, MockKind::HashText);
    config.gateway.use_cache = false;
    let mut pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;
    pipeline.run(&Stage::RUN).await.map_err(|e| e.to_string())?;
    let report = pipeline.load_report().map_err(|e| e.to_string())?;
    let users: usize = report.per_fold.iter().map(|f| f.users).sum();
    ensure!(users == 500, "{users} evaluated users");
    let auc = report.auc.mean;
    ensure!((auc - 0.5).abs() <= 0.05, "aggregate auc {auc}");
    Ok(format!("aggregate AUC {auc:.4} over {users} users"))
}

async fn call_count_laws() -> Outcome {
    let templates = Templates::default();
    let (gw, mock) = mock_gateway(MockBehavior::HashText);
    let stats = mock.stats();
    let summaries: Vec<String> = (0..10).map(|i| format!("a short note about item {i}")).collect();
    let refs: Vec<&str> = summaries.iter().map(String::as_str).collect();
    let mut checked = 0;
    for mode in [PreferenceMode::Recurrent, PreferenceMode::Direct] {
        for b in [1, 2, 3, 5] {
            let settings = PreferenceSettings { mode, block_size: b, summary_length: 40, ..Default::default() };
            let inferer = PreferenceInferer::new(&gw, &templates, settings).map_err(|e| e.to_string())?;
            for n in 1..=10 {
                stats.reset();
                let pref = inferer.infer_preference("u", &refs[..n]).await.map_err(|e| e.to_string())?;
                let expected = match mode {
                    PreferenceMode::Recurrent => n.div_ceil(b),
                    PreferenceMode::Direct => 1,
                };
                let backend = stats.calls(RoleTag::PreferenceLlm) as usize;
                ensure!(pref.trace.compressions == 0, "n={n} B={b}: unexpected compression");
                ensure!(
                    pref.trace.calls == expected && backend == expected,
                    "{mode:?} n={n} B={b}: {} traced, {backend} issued, expected {expected}",
                    pref.trace.calls
                );
                checked += 1;
            }
        }
    }

    let dir = tempfile::tempdir().unwrap();
    let items: Vec<Item> = (0..6)
        .map(|i| {
            let path = dir.path().join(format!("{i}.png"));
            std::fs::write(&path, png_bytes(i, 8)).unwrap();
            Item::new(format!("i{i}"), format!("A cozy cooking title number {i}.")).with_image(path.to_string_lossy())
        })
        .collect();
    let summarizer = ItemSummarizer::new(&gw, &templates, SummarizerSettings { target_words: 30, ..Default::default() });
    for (mode, per_item) in [(SummaryMode::Full, 3), (SummaryMode::TextOnly, 1)] {
        stats.reset();
        summarizer.summarize_all(&items, mode, 4).await.map_err(|e| e.to_string())?;
        let calls = stats.calls(RoleTag::ItemMllm);
        ensure!(calls == per_item * items.len() as u64, "{mode:?}: {calls} calls for {} items", items.len());
        ensure!(stats.total_calls() == calls, "{mode:?}: calls outside the item role");
    }
    Ok(format!("{checked} preference cases, 3/1 calls per item"))
}

async fn loss_analytic() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let (gw, _) = mock_gateway(MockBehavior::UniformLogprob { cost: ln2 });
    let request = CompletionRequest::new(RoleTag::RecommenderMllm, vec![Message::user("q")]);
    let loss = forced_loss(&gw, request, "yes it is fine").await.map_err(|e| e.to_string())?;
    ensure!((loss - 4.0 * ln2).abs() <= 1e-9, "4-token loss {loss}");

    // Probability one on the label: loss is zero over every held-out example.
    let dir = tempfile::tempdir().unwrap();
    let mut config = fixture(dir.path(), SyntheticSpec::default(), MockKind::OracleYes);
    config.mock.p = 1.0;
    let mut pipeline = Pipeline::new(config).map_err(|e| e.to_string())?;
    pipeline
        .run(&[Stage::Ingest, Stage::SummarizeItems, Stage::InferPreferences, Stage::BuildSft, Stage::EvalLoss])
        .await
        .map_err(|e| e.to_string())?;
    let report = pipeline.load_loss().map_err(|e| e.to_string())?;
    ensure!(report.overall.mean_loss == 0.0, "oracle loss {}", report.overall.mean_loss);
    Ok(format!("4 ln 2 within 1e-9, 0 over {} examples", report.overall.examples))
}

async fn sampling_contracts() -> Outcome {
    let data = generate(&SyntheticSpec { users: 500, items: 60, with_images: false, ..Default::default() });
    let thresholds = Thresholds { min_user_interactions: 1, min_item_interactions: 1 };
    let (catalog, _) = Catalog::from_records(data.items, data.interactions, thresholds).map_err(|e| e.to_string())?;
    let sequences = build_sequences(&catalog, 2);
    let settings = SplitSettings { n_folds: 5, seed: 42, train_ratio: 1, eval_ratio: 20 };
    let manifest = build_split_manifest(&catalog, &sequences, settings).map_err(|e| e.to_string())?;
    let histories: BTreeMap<&str, HashSet<&str>> = sequences
        .iter()
        .map(|s| (s.user_id.as_str(), s.items.iter().map(String::as_str).collect()))
        .collect();
    let mut eval_negatives = 0;
    for split in &manifest {
        let want = if split.role == SplitRole::Eval { 20 } else { 1 };
        ensure!(split.negatives.len() == want, "user {} fold {}: {} negatives", split.user_id, split.fold, split.negatives.len());
        let distinct: HashSet<&String> = split.negatives.iter().collect();
        ensure!(distinct.len() == want, "user {}: repeated negative", split.user_id);
        let history = &histories[split.user_id.as_str()];
        ensure!(
            split.negatives.iter().all(|n| !history.contains(n.as_str())),
            "user {}: negative inside history",
            split.user_id
        );
        if split.role == SplitRole::Eval {
            eval_negatives += want;
        }
    }
    ensure!(eval_negatives == 10_000, "{eval_negatives} evaluation negatives");

    // Same seed from scratch: byte-identical splits, datasets and reports.
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { users: 20, items: 40, ..Default::default() };
    let config = fixture(dir.path(), spec, MockKind::HashText);
    let run = || async {
        let mut pipeline = Pipeline::new(config.clone()).unwrap();
        pipeline.run(&Stage::RUN).await.map_err(|e| e.to_string())?;
        let files = [Stage::Ingest, Stage::BuildSft, Stage::Evaluate].map(|s| stage_files(&pipeline, s));
        Ok::<_, String>((pipeline, files))
    };
    let (pipeline, first) = run().await?;

    let sft = pipeline.stage_dir(Stage::BuildSft).unwrap();
    let (meta, examples) = read_dataset(&sft.join("seed42-fold0.train.jsonl")).map_err(|e| e.to_string())?;
    let positives = examples.iter().filter(|e| !e.provenance.is_negative).count();
    ensure!(meta.train_ratio == 1 && examples.len() == 2 * positives, "train set is not 1:1");

    std::fs::remove_dir_all(&config.data.out_dir).unwrap();
    std::fs::remove_dir_all(&config.gateway.cache_dir).unwrap();
    let (_, second) = run().await?;
    ensure!(first == second, "second run from scratch differs");
    Ok(format!("{} splits exact, 10000 negatives disjoint, rerun byte-identical", manifest.len()))
}

async fn cache_idempotence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), SyntheticSpec::default(), MockKind::HashText);
    let mut pipeline = Pipeline::new(config.clone()).map_err(|e| e.to_string())?;
    let stages = [&Stage::RUN[..], &[Stage::EvalLoss]].concat();
    pipeline.run(&stages).await.map_err(|e| e.to_string())?;
    let before: Vec<_> = stages.iter().map(|s| stage_files(&pipeline, *s)).collect();

    for (i, stage) in stages.iter().enumerate() {
        for force in [false, true] {
            let mut again = Pipeline::new(config.clone()).unwrap().with_force(force);
            again.run_stage(*stage).await.map_err(|e| e.to_string())?;
            let manifest = RunManifest::load(&config.data.out_dir).map_err(|e| e.to_string())?;
            let record = &manifest.stages[stage];
            ensure!(record.reused != force, "{stage}: reused flag {}", record.reused);
            ensure!(record.total_backend_calls() == 0, "{stage} (force {force}): {} backend calls", record.total_backend_calls());
            ensure!(stage_files(&again, *stage) == before[i], "{stage} (force {force}): outputs changed");
        }
    }
    Ok(format!("{} stages rerun and forced with zero backend calls", stages.len()))
}

async fn sweep_shapes() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture(dir.path(), SyntheticSpec::default(), MockKind::HashText);
    for (param, values) in [(SweepParam::BlockSize, [1, 2, 3, 5]), (SweepParam::SummaryLength, [50, 100, 200, 400])] {
        let report = sweep(&config, param, &values).await.map_err(|e| e.to_string())?;
        let got: Vec<usize> = report.rows.iter().map(|r| r.value).collect();
        ensure!(got == values, "{}: rows {got:?}", param.as_str());
        for row in &report.rows {
            ensure!(row.ok, "{} = {}: {:?}", param.as_str(), row.value, row.error);
            let r = row.report.as_ref().unwrap();
            ensure!(r.per_fold.len() == config.split.n_folds, "{} = {}: {} folds", param.as_str(), row.value, r.per_fold.len());
        }
        let tsv = std::fs::read_to_string(config.data.out_dir.join(format!("sweeps/{}.tsv", param.as_str()))).unwrap();
        let widths: HashSet<usize> = tsv.lines().map(|l| l.split('\t').count()).collect();
        ensure!(tsv.lines().count() == 5 && widths.len() == 1, "{}: malformed tsv", param.as_str());
        ensure!(
            tsv.lines().skip(1).all(|l| l.split('\t').all(|c| !c.is_empty())),
            "{}: empty cells",
            param.as_str()
        );
    }
    Ok("block_size 1,2,3,5 and summary_length 50,100,200,400 complete".into())
}
