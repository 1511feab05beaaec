mod common;

use std::path::{Path, PathBuf};

use common::{config, config_text, write_dataset, STUB_GENERATION};
use synthsight_core::embedding::{HashImageEncoder, HashTextEncoder};
use synthsight_core::evaluation::ReportLayout;
use synthsight_core::generation::{preset_params, StubBackend};
use synthsight_core::orchestrator::*;
use synthsight_core::prompting::{
    HttpRewriter, HttpRewriterConfig, ARTIST_SYSTEM_PROMPT, WRITER_SYSTEM_PROMPT,
};
use synthsight_core::util::{read_jsonl, testserver, RetryPolicy};

fn offline() -> RunOptions {
    RunOptions {
        offline: true,
        stop_after: None,
    }
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn report_files(run: &Path) -> Vec<String> {
    ["report.txt", "report.tsv", "records.jsonl"]
        .iter()
        .map(|f| read(&run.join(f)))
        .collect()
}

fn executed(o: &RunOutcome) -> Vec<&'static str> {
    o.executed.iter().map(|s| s.name()).collect()
}

#[test]
fn offline_run_is_reproducible_and_cached() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 32);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "gen",
        "gen_image",
        STUB_GENERATION,
    );
    let first = run_experiment(&cfg, &offline()).unwrap();
    assert_eq!(first.executed.len(), 5);
    assert!(first.calls.generation > 0);
    assert!(first.manifest.is_complete());
    assert_eq!(first.reports.len(), 2);
    let reports = report_files(&first.run_dir);
    assert!(
        reports[0].contains("cost[estimated] gen: 32 images"),
        "{}",
        reports[0]
    );

    let second = run_experiment(&cfg, &offline()).unwrap();
    assert!(second.executed.is_empty());
    assert_eq!(second.calls.total(), 0);
    assert_eq!(report_files(&second.run_dir), reports);

    // A fresh run directory sharing the cache recomputes every stage
    // without reaching any provider.
    let mut again = cfg.clone();
    again.output_dir = Some(tmp.path().join("run2"));
    again.cache_dir = Some(cfg.cache_dir());
    let third = run_experiment(&again, &offline()).unwrap();
    assert_eq!(third.executed.len(), 5);
    assert_eq!(third.calls.total(), 0);
    assert_eq!(report_files(&third.run_dir), reports);
}

#[test]
fn stop_after_then_resume_runs_only_the_rest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 24);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "resume",
        "gen_image",
        STUB_GENERATION,
    );
    let partial = run_experiment(
        &cfg,
        &RunOptions {
            offline: true,
            stop_after: Some(Stage::Images),
        },
    )
    .unwrap();
    assert_eq!(executed(&partial), ["prompts", "images"]);
    assert!(partial.summary.is_none());
    assert!(matches!(
        partial.manifest.status(Stage::Embeddings),
        StageStatus::Pending
    ));

    let rest = run_experiment(&cfg, &offline()).unwrap();
    assert_eq!(executed(&rest), ["embeddings", "training", "evaluation"]);
    assert_eq!(rest.calls.generation, 0);
    assert!(rest.summary.is_some());
}

#[test]
fn tampered_artifact_reruns_from_its_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 24);
    let cfg = config(&data, &tmp.path().join("run"), "tamper", "text_only_B1", "");
    let first = run_experiment(&cfg, &offline()).unwrap();
    let reports = report_files(&first.run_dir);
    let features = first.run_dir.join("features.jsonl");
    let mut body = read(&features);
    body.push('\n');
    std::fs::write(&features, body).unwrap();
    let second = run_experiment(&cfg, &offline()).unwrap();
    assert_eq!(executed(&second), ["embeddings", "training", "evaluation"]);
    assert_eq!(report_files(&second.run_dir), reports);
}

#[test]
fn corrupt_manifest_starts_over() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "corrupt",
        "text_only_B1",
        "",
    );
    run_experiment(&cfg, &offline()).unwrap();
    std::fs::write(cfg.output_dir().join(MANIFEST_FILE), "{not json").unwrap();
    assert!(matches!(
        load_manifest(&cfg.output_dir()),
        Err(OrchestratorError::CorruptManifest { .. })
    ));
    let again = run_experiment(&cfg, &offline()).unwrap();
    assert_eq!(again.executed.len(), 5);
}

#[test]
fn config_hash_ignores_key_order_and_tracks_values() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 8);
    let out = tmp.path().join("run");
    let a = config(&data, &out, "h", "text_only_B1", "");
    let reordered = config_text(&data, &out, "h", "text_only_B1", "")
        .replace("model_dim = 16\nheads = 2", "heads = 2\nmodel_dim = 16");
    let b = parse_config_str(&reordered, tmp.path()).unwrap();
    assert_eq!(a.hash(), b.hash());
    let mut c = a.clone();
    c.training.learning_rate = 0.02;
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn changed_config_restarts_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "changed",
        "text_only_B1",
        "",
    );
    run_experiment(&cfg, &offline()).unwrap();
    let mut next = cfg.clone();
    next.training.learning_rate = 0.02;
    let o = run_experiment(&next, &offline()).unwrap();
    assert_eq!(o.executed.len(), 5);
    assert_eq!(o.manifest.config_hash, next.hash());
}

#[test]
fn missing_backend_is_one_clear_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 8);
    let text = config_text(&data, &tmp.path().join("run"), "nb", "gen_image", "");
    match parse_config_str(&text, tmp.path()) {
        Err(OrchestratorError::Config(problems)) => {
            assert_eq!(
                problems,
                vec!["missing key `generation.backend`".to_string()]
            )
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn fast_method_defaults_to_the_one_step_backend() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 8);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "b4",
        "gen_image_fast_B4",
        "",
    );
    let p = cfg.generation_params().unwrap().unwrap();
    assert_eq!(p.backend_id, "flux-schnell-b4");
    assert_eq!(p.steps, 1);
}

#[test]
fn preset_backend_resolves_to_its_table_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 8);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "sdxl",
        "gen_image",
        "[generation]\nbackend = \"sdxl\"\n",
    );
    assert_eq!(
        cfg.generation_params().unwrap().unwrap(),
        preset_params("sdxl").unwrap()
    );
    let stepped = config(
        &data,
        &tmp.path().join("run"),
        "sdxl",
        "gen_image",
        "[generation]\nbackend = \"sdxl\"\nsteps = 10\n",
    );
    let p = stepped.generation_params().unwrap().unwrap();
    assert_eq!(p.steps, 10);
    assert_eq!(p.width, preset_params("sdxl").unwrap().width);
}

fn http_elaborator(server: &testserver::Server, id: &str) -> HttpRewriter {
    HttpRewriter::new(HttpRewriterConfig {
        id: id.into(),
        endpoint: server.url.clone(),
        model_id: "llm".into(),
        retry: RetryPolicy::immediate(1),
        timeout_s: 10.0,
    })
}

fn services_with(cfg: &ExperimentConfig, elaborator: HttpRewriter, backend: bool) -> Services {
    Services::new(
        backend.then(|| Box::new(StubBackend::new()) as _),
        Box::new(HashTextEncoder::new("hash-text", 16).with_max_tokens(cfg.dataset.max_tokens)),
        Box::new(HashImageEncoder::new("hash-image", 16)),
        Some(Box::new(elaborator)),
        &cfg.cache_dir(),
    )
}

const STUB_ELABORATOR: &str = r#"
[providers.elaborator]
kind = "stub"
id = "writer"
text = "a bright kitchen scene"
"#;

#[test]
fn textual_expansion_sends_the_writer_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "b2",
        "textual_expansion_B2",
        STUB_ELABORATOR,
    );
    let replies = (0..16)
        .map(|_| {
            (
                200,
                r#"{"text": "a glossy appliance on a counter"}"#.to_string(),
            )
        })
        .collect();
    let server = testserver::spawn(replies);
    let services = services_with(&cfg, http_elaborator(&server, "writer"), false);
    let o = run_experiment_with(&cfg, &services, &offline()).unwrap();
    let requests = server.requests.lock().unwrap().clone();
    assert!(!requests.is_empty());
    assert_eq!(o.calls.rewrites as usize, requests.len());
    for r in &requests {
        assert_eq!(r["system"].as_str().unwrap(), WRITER_SYSTEM_PROMPT);
    }
    #[derive(serde::Deserialize)]
    struct Row {
        text: String,
    }
    let rows: Vec<Row> = read_jsonl(&o.run_dir.join("inputs.jsonl")).unwrap();
    assert!(rows
        .iter()
        .all(|r| r.text.ends_with("a glossy appliance on a counter")));
}

#[test]
fn llm_prompt_strategy_sends_the_artist_prompt() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let extra = format!("{STUB_ELABORATOR}\n[prompt]\nstrategy = \"P4\"\n{STUB_GENERATION}");
    let cfg = config(&data, &tmp.path().join("run"), "p4", "gen_image", &extra);
    let replies = (0..16)
        .map(|_| (200, r#"{"text": "studio photo, soft light"}"#.to_string()))
        .collect();
    let server = testserver::spawn(replies);
    let services = services_with(&cfg, http_elaborator(&server, "artist"), true);
    let o = run_experiment_with(&cfg, &services, &offline()).unwrap();
    let requests = server.requests.lock().unwrap().clone();
    assert!(!requests.is_empty());
    for r in &requests {
        assert_eq!(r["system"].as_str().unwrap(), ARTIST_SYSTEM_PROMPT);
    }
    assert!(o.summary.is_some());
}

#[test]
fn retrieval_appends_matches_and_counts_fallbacks() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 24);
    let corpus = tmp.path().join("kb.jsonl");
    std::fs::write(
        &corpus,
        concat!(
            "{\"id\": \"d1\", \"text\": \"A coffee machine brewing guide.\"}\n",
            "{\"id\": \"d2\", \"text\": \"Vacuum cleaner filter care.\"}\n",
            "{\"id\": \"d3\", \"text\": \"Garden hose storage tips.\"}\n",
        ),
    )
    .unwrap();
    let extra = format!("[retrieval]\ncorpus = \"{}\"\n", corpus.display());
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "b3",
        "knowledge_retrieval_B3",
        &extra,
    );
    let o = run_experiment(&cfg, &offline()).unwrap();
    #[derive(serde::Deserialize)]
    struct Comp {
        retrieval: RetrievalStats,
    }
    let comp: Comp = serde_json::from_str(&read(&o.run_dir.join("composition.json"))).unwrap();
    let stats = comp.retrieval;
    assert_eq!(stats.total, 24);
    assert_eq!(stats.with_retrieval + stats.fallbacks, stats.total);
    assert!(stats.with_retrieval > 0 && stats.fallbacks > 0, "{stats:?}");
    #[derive(serde::Deserialize)]
    struct Row {
        text: String,
        retrieved: Option<String>,
        #[serde(default)]
        fallback: bool,
    }
    let rows: Vec<Row> = read_jsonl(&o.run_dir.join("inputs.jsonl")).unwrap();
    for r in rows {
        if r.text.contains("coffee machine is") {
            assert_eq!(r.retrieved.as_deref(), Some("d1"));
            assert!(r.text.ends_with("A coffee machine brewing guide."));
        }
        assert_eq!(r.fallback, r.retrieved.is_none());
    }
}

#[test]
fn oracle_features_feed_the_image_branch() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let features = tmp.path().join("oracle.jsonl");
    let mut body = String::new();
    for i in 0..16 {
        let values: Vec<f32> = (0..8).map(|j| ((i * 8 + j) % 5) as f32 - 2.0).collect();
        body.push_str(
            &serde_json::json!({"sample_id": format!("r{i:04}"), "dim": 8, "values": values})
                .to_string(),
        );
        body.push('\n');
    }
    std::fs::write(&features, body).unwrap();
    let extra = format!(
        "[oracle]\nfeatures = \"{}\"\ntokens = 2\n",
        features.display()
    );
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "b5",
        "oracle_image_B5",
        &extra,
    );
    let o = run_experiment(&cfg, &offline()).unwrap();
    assert_eq!(o.calls.image_embedding, 0);
    assert_eq!(o.calls.generation, 0);
    assert!(o.summary.is_some());

    let mut missing = cfg.clone();
    missing.output_dir = Some(tmp.path().join("run-missing"));
    let short: String = read(&features)
        .lines()
        .skip(1)
        .map(|l| format!("{l}\n"))
        .collect();
    let short_path = tmp.path().join("short.jsonl");
    std::fs::write(&short_path, short).unwrap();
    missing.oracle.features = Some(short_path);
    match run_experiment(&missing, &offline()) {
        Err(OrchestratorError::Stage { stage, reason }) => {
            assert_eq!(stage, "embeddings");
            assert!(reason.contains("r0000"), "{reason}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn heatmaps_are_written_for_attention_heads() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let cfg = config(
        &data,
        &tmp.path().join("run"),
        "hm",
        "gen_image",
        STUB_GENERATION,
    );
    let o = run_experiment(&cfg, &offline()).unwrap();
    let maps: Vec<PathBuf> = std::fs::read_dir(o.run_dir.join("heatmaps"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    assert_eq!(maps.len(), 2);
    for m in maps {
        for row in read(&m).lines().skip(1) {
            let sum: f64 = row
                .split('\t')
                .skip(1)
                .map(|v| v.parse::<f64>().unwrap())
                .sum();
            assert!((sum - 1.0).abs() <= 1e-6, "{row}");
        }
    }
}

fn base_table(data: &Path, out: &Path, extra: &str) -> toml::Table {
    config_text(data, out, "sw", "gen_image", extra)
        .parse()
        .unwrap()
}

#[test]
fn steps_sweep_runs_four_resumable_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let out = tmp.path().join("sweep");
    let base = base_table(
        &data,
        &tmp.path().join("unused"),
        "[generation]\nbackend = \"sdxl\"\n",
    );
    let (axes, layout) = sweep_preset("steps").unwrap();
    let first = run_sweep(&base, tmp.path(), &axes, layout, &out, &offline(), 2).unwrap();
    assert_eq!(first.cells.len(), 4);
    assert!(first.failed().is_empty(), "{:?}", first.failed());
    let report = first.report.clone().unwrap();
    for s in ["50", "25", "10", "4"] {
        assert!(
            report.records.iter().any(|r| r.axes["steps"] == s),
            "{}",
            report.text
        );
    }
    let text = read(&out.join("sweep_report.txt"));

    let again = run_sweep(&base, tmp.path(), &axes, layout, &out, &offline(), 2).unwrap();
    assert!(again
        .cells
        .iter()
        .all(|c| c.executed.is_empty() && c.calls == 0));
    assert_eq!(read(&out.join("sweep_report.txt")), text);

    let victim = &first.cells[1];
    std::fs::remove_dir_all(&victim.run_dir).unwrap();
    let third = run_sweep(&base, tmp.path(), &axes, layout, &out, &offline(), 2).unwrap();
    for c in &third.cells {
        if c.id == victim.id {
            assert_eq!(c.executed.len(), 5);
            // The shared cache still holds this cell's images.
            assert_eq!(c.calls, 0);
        } else {
            assert!(c.executed.is_empty());
        }
    }
    assert_eq!(read(&out.join("sweep_report.txt")), text);
}

#[test]
fn fusion_lr_sweep_has_six_cells_and_isolates_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let out = tmp.path().join("sweep");
    let base = base_table(&data, &tmp.path().join("unused"), STUB_GENERATION);
    let (axes, layout) = sweep_preset("fusion-lr").unwrap();
    let opts = offline();
    let result = run_sweep_with(&base, tmp.path(), &axes, layout, &out, 3, &|cfg| {
        if cfg
            .experiment_id
            .ends_with("mechanism_F1_learning_rate_3e-5")
        {
            Err(OrchestratorError::Sweep("injected".into()))
        } else {
            run_experiment(cfg, &opts)
        }
    })
    .unwrap();
    assert_eq!(result.cells.len(), 6);
    assert_eq!(result.failed().len(), 1);
    assert!(
        result.report.is_none(),
        "a partial grid must not render as complete"
    );
    let text = read(&out.join("sweep_report.txt"));
    assert!(
        text.contains("FAILED cell mechanism_F1_learning_rate_3e-5: sweep: injected"),
        "{text}"
    );

    let healed = run_sweep(&base, tmp.path(), &axes, layout, &out, &opts, 3).unwrap();
    assert!(healed.failed().is_empty());
    let ran: Vec<&str> = healed
        .cells
        .iter()
        .filter(|c| !c.executed.is_empty())
        .map(|c| c.id.as_str())
        .collect();
    assert_eq!(ran, ["mechanism_F1_learning_rate_3e-5"]);
    let report = healed.report.unwrap();
    let ids: std::collections::BTreeSet<&str> = report
        .records
        .iter()
        .map(|r| r.experiment_id.as_str())
        .collect();
    assert_eq!(ids.len(), 6);
}

#[test]
fn report_cli_consolidates_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 16);
    let mut dirs = Vec::new();
    for mech in ["F1", "F2"] {
        let text = config_text(&data, &tmp.path().join(mech), mech, "gen_image", "")
            .replace("[fusion]\n", &format!("[fusion]\nmechanism = \"{mech}\"\n"))
            + STUB_GENERATION;
        let cfg = parse_config_str(&text, tmp.path()).unwrap();
        run_experiment(&cfg, &offline()).unwrap();
        dirs.push(cfg.output_dir());
    }

    let single = report_cli(&dirs[..1], None).unwrap();
    assert_eq!(single.rendered.text, read(&dirs[0].join("report.txt")));
    assert_eq!(single.rendered.tsv, read(&dirs[0].join("report.tsv")));

    let broken = tmp.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join(MANIFEST_FILE), "garbage").unwrap();
    let mut all = dirs.clone();
    all.push(broken.clone());
    let combined = report_cli(&all, None).unwrap();
    assert_eq!(combined.layout, ReportLayout::FusionTable);
    let ids: std::collections::BTreeSet<&str> = combined
        .rendered
        .records
        .iter()
        .map(|r| r.experiment_id.as_str())
        .collect();
    assert_eq!(ids.len(), 2);
    assert_eq!(combined.skipped.len(), 1);
    assert_eq!(combined.skipped[0].0, broken);
    let text = combined.text();
    assert!(
        text.contains("ledger[estimated] all runs: 32 images, $0.13"),
        "{text}"
    );
    assert!(text.contains("skipped"), "{text}");
}

#[test]
fn hundred_fast_images_cost_forty_cents() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path(), 100);
    let mut cfg = config(
        &data,
        &tmp.path().join("run"),
        "cost",
        "gen_image",
        STUB_GENERATION,
    );
    cfg.seeds = vec![0];
    cfg.training.max_epochs = 1;
    let o = run_experiment(&cfg, &offline()).unwrap();
    let cost = o.summary.unwrap().cost.unwrap();
    assert_eq!(cost.images, 100);
    assert!((cost.total_cost_usd - 0.40).abs() < 1e-9);
    assert!(read(&o.run_dir.join("report.txt")).contains("cost[estimated] cost: 100 images, $0.40"));
}
