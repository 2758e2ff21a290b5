use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use semid_core::embedstore::{write_matrix, EmbeddingMatrix, Modality};
use semid_core::experiment::{
    run_experiment, run_resolution_harness, DataSource, ExperimentConfig, ModalitySource, Pipeline, RenderSource,
    RunGuard, Stage, SyntheticStudy,
};
use semid_core::fusion::Layout;
use semid_core::seq2seq::{ModelConfig, TrainConfig};
use semid_core::tensor::Matrix;
use semid_core::Error;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// A seconds-scale configuration on a small synthetic study.
fn quick(layout: Layout) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::load(&repo_root().join("configs/synthetic_study.json")).unwrap();
    cfg.data = DataSource::Synthetic(SyntheticStudy {
        n_items: 48,
        n_clusters: 4,
        n_users: 30,
        dim: 16,
        min_length: 4,
        max_length: 8,
        ..Default::default()
    });
    cfg.projection_dim = 16;
    cfg.rvq.codebook_size = 4;
    cfg.rvq.levels = 2;
    cfg.fusion = layout;
    if layout.is_multimodal() {
        cfg.image = Some(ModalitySource::Synthetic(Modality::Image));
    }
    cfg.model = ModelConfig {
        encoder_layers: 1,
        decoder_layers: 1,
        width: 16,
        heads: 2,
        ff_width: 32,
        max_positions: 96,
        dropout: 0.0,
        ..Default::default()
    };
    cfg.train = TrainConfig {
        learning_rate: 3e-3,
        batch_size: 16,
        steps: 20,
        ..Default::default()
    };
    cfg.eval.seeds = vec![0, 1];
    cfg.eval.beam.beam_size = 10;
    cfg.output_dir = None;
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap()
}

#[test]
fn every_layout_runs_end_to_end() {
    for layout in [Layout::Unimodal, Layout::Early, Layout::LateA, Layout::LateB, Layout::LateC] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = quick(layout);
        if layout == Layout::LateC {
            cfg.alignment.enabled = true;
            cfg.alignment.train.steps = 10;
        }
        let out = run_experiment(cfg, Some(dir.path().to_path_buf())).unwrap();
        assert_eq!(out.report.per_seed.len(), 2, "{layout}");
        assert!(out.report.mean.recall.iter().all(|r| (0.0..=1.0).contains(r)));
        assert_eq!(out.geometry.is_some(), layout.is_multimodal());
        for f in ["report.json", "report.csv", "report.txt"] {
            assert!(dir.path().join(f).exists());
        }
        assert!(!dir.path().join(".incomplete").exists());
        assert!(!dir.path().join(".lock").exists());
        if layout == Layout::LateC {
            assert!(dir.path().join("train/seed-0/alignment_loss.csv").exists());
        }
    }
}

#[test]
fn rerun_reuses_stages_and_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(quick(Layout::LateB), Some(a.path().into())).unwrap();
    let record = read(&a.path().join("train/seed-0/stage.json"));
    let model_meta = fs::metadata(a.path().join("train/seed-0/model/params.bin")).unwrap().modified().unwrap();
    run_experiment(quick(Layout::LateB), Some(a.path().into())).unwrap();
    assert_eq!(record, read(&a.path().join("train/seed-0/stage.json")));
    let again = fs::metadata(a.path().join("train/seed-0/model/params.bin")).unwrap().modified().unwrap();
    assert_eq!(model_meta, again, "cached checkpoint was rewritten");

    run_experiment(quick(Layout::LateB), Some(b.path().into())).unwrap();
    assert_eq!(read(&a.path().join("report.json")), read(&b.path().join("report.json")));
}

#[test]
fn tampered_artifact_invalidates_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(quick(Layout::Unimodal), Some(dir.path().into())).unwrap();
    let report = read(&dir.path().join("report.json"));
    let seqs = dir.path().join("fuse/seed-0/sequences.json");
    fs::write(&seqs, b"[]").unwrap();
    run_experiment(quick(Layout::Unimodal), Some(dir.path().into())).unwrap();
    assert_ne!(read(&seqs), b"[]");
    assert_eq!(report, read(&dir.path().join("report.json")));
}

#[test]
fn quantizer_artifacts_unchanged_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Layout::LateC);
    cfg.alignment.enabled = true;
    cfg.alignment.train.steps = 10;
    let p = Pipeline::new(cfg, Some(dir.path().into())).unwrap();
    p.run(Stage::Tokenize).unwrap();
    let tok = dir.path().join("tokenize/seed-0");
    let before: BTreeMap<String, Vec<u8>> = ["rvq-text/codebooks.bin", "rvq-image/codebooks.bin", "ids-text.json"]
        .iter()
        .map(|f| (f.to_string(), read(&tok.join(f))))
        .collect();
    p.run(Stage::Eval).unwrap();
    for (f, bytes) in before {
        assert_eq!(bytes, read(&tok.join(&f)), "{f} changed");
    }
}

#[test]
fn early_fusion_with_one_modality_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let mut cfg = quick(Layout::Unimodal);
    cfg.fusion = Layout::Early;
    assert!(matches!(run_experiment(cfg, Some(out.clone())), Err(Error::Config(_))));
    assert!(!out.exists());
}

#[test]
fn alignment_requires_late_c() {
    let mut cfg = quick(Layout::LateA);
    cfg.alignment.enabled = true;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn locked_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let guard = RunGuard::acquire(dir.path()).unwrap();
    let err = run_experiment(quick(Layout::Unimodal), Some(dir.path().into())).unwrap_err();
    assert!(matches!(err, Error::Locked(_)));
    drop(guard);
    assert!(!dir.path().join(".lock").exists());
    // the abandoned guard left its sentinel behind; a full run clears it
    assert!(dir.path().join(".incomplete").exists());
    run_experiment(quick(Layout::Unimodal), Some(dir.path().into())).unwrap();
    assert!(!dir.path().join(".incomplete").exists());
}

#[test]
fn stage_failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Layout::Unimodal);
    cfg.rvq.codebook_size = 64;
    match run_experiment(cfg, Some(dir.path().into())) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "tokenize");
            assert!(matches!(*source, Error::UnderPopulated { .. }));
        }
        other => panic!("expected a stage error, got {other:?}"),
    }
    assert!(dir.path().join(".incomplete").exists());
    assert!(dir.path().join("tokenize/seed-0/.incomplete").exists());
}

fn write_file_dataset(root: &Path) -> ExperimentConfig {
    let items: Vec<String> = (0..12).map(|i| format!("sku{i}")).collect();
    fs::write(root.join("catalog.json"), serde_json::to_string(&items).unwrap()).unwrap();
    let mut tsv = String::new();
    for u in 0..10 {
        for t in 0..5 {
            tsv.push_str(&format!("u{u}\t{}\t{}\n", items[(u + 2 * t) % 12], 100 + t));
        }
    }
    fs::write(root.join("interactions.tsv"), tsv).unwrap();
    let meta: String = items
        .iter()
        .map(|i| format!("{{\"item_id\": \"{i}\", \"description\": \"product {i} in blue\", \"image_path\": null}}\n"))
        .collect();
    fs::write(root.join("metadata.jsonl"), meta).unwrap();
    // reversed row order: ingestion must realign rows to the catalog
    let rows: Vec<Vec<f64>> = (0..12).rev().map(|i| (0..6).map(|j| ((i * 7 + j * 3) % 11) as f64 - 5.0).collect()).collect();
    let ids: Vec<String> = items.iter().rev().cloned().collect();
    let m = EmbeddingMatrix::new(Modality::Text, "toy", ids, Matrix::from_rows(&rows)).unwrap();
    write_matrix(&m, &root.join("emb-text")).unwrap();

    let mut cfg = quick(Layout::LateA);
    cfg.data = DataSource::Files {
        interactions: root.join("interactions.tsv"),
        catalog: root.join("catalog.json"),
        metadata: Some(root.join("metadata.jsonl")),
    };
    cfg.text = Some(ModalitySource::Embeddings(root.join("emb-text")));
    cfg.image = Some(ModalitySource::Render(RenderSource {
        resolution: 256,
        encode_dim: 16,
        export_png: 1,
        ..Default::default()
    }));
    cfg.rvq.codebook_size = 3;
    cfg.eval.seeds = vec![0];
    cfg
}

#[test]
fn file_dataset_with_rendered_modality() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file_dataset(dir.path());
    let out = dir.path().join("run");
    let outcome = run_experiment(cfg, Some(out.clone())).unwrap();
    assert_eq!(outcome.report.per_seed[0].users, 10);
    assert!(out.join("embed/image/png/sku0.png").exists());
    let m = semid_core::embedstore::read_matrix(&out.join("embed/image/raw")).unwrap();
    assert_eq!(m.modality, Modality::OcrText);
    assert_eq!(m.metadata["resolution"], serde_json::json!(256));
    let t = semid_core::embedstore::read_matrix(&out.join("embed/text/projected")).unwrap();
    assert_eq!(t.item_ids[0], "sku0");
}

#[test]
fn harness_rejects_unsupported_resolution_and_needs_render_source() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_file_dataset(dir.path());
    assert!(matches!(
        run_resolution_harness(&cfg, &[1024, 300], dir.path()),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        run_resolution_harness(&quick(Layout::Unimodal), &[1024], dir.path()),
        Err(Error::Config(_))
    ));
}

#[test]
fn shipped_configs_validate() {
    for name in ["example.json", "synthetic_study.json", "resolution_harness.json"] {
        let cfg = ExperimentConfig::load(&repo_root().join("configs").join(name)).unwrap();
        assert!(cfg.output_dir.is_some(), "{name}");
    }
    let ex = ExperimentConfig::load(&repo_root().join("configs/example.json")).unwrap();
    assert_eq!((ex.rvq.levels, ex.rvq.codebook_size, ex.projection_dim), (3, 256, 128));
    assert_eq!((ex.eval.beam.beam_size, ex.eval.beam.max_length, ex.max_history), (20, 20, 50));
    assert_eq!((ex.alignment.train.steps, ex.alignment.train.learning_rate), (2000, 1e-4));
    assert_eq!(ex.eval.seeds.len(), 5);
}

fn semid(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_semid")).args(args).output().unwrap()
}

fn write_quick_config(dir: &Path, layout: Layout) -> PathBuf {
    let p = dir.join("cfg.json");
    fs::write(&p, serde_json::to_string_pretty(&quick(layout)).unwrap()).unwrap();
    p
}

#[test]
fn cli_stages_formats_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_quick_config(dir.path(), Layout::LateA);
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    for stage in ["ingest", "tokenize", "fuse", "train"] {
        let o = semid(&[stage, "--config", cfg, "--out", out]);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    assert!(Path::new(out).join("train/seed-1/model/model.json").exists());
    assert!(!Path::new(out).join("report.json").exists());

    let o = semid(&["run", "--config", cfg, "--out", out, "--format", "json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));

    let o = semid(&["report", "--out", out, "--format", "csv"]);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("row,metric,k,value"));
    let o = semid(&["report", "--out", out, "--format", "table"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains(" ± "));

    let o = semid(&["geometry", "--config", cfg, "--out", out]);
    assert!(o.status.success());
    assert!(Path::new(out).join("geometry.json").exists());

    let o = semid(&["report", "--out", out, "--format", "xml"]);
    assert_eq!(o.status.code(), Some(2));

    let single = dir.path().join("single");
    let o = semid(&["run", "--config", cfg, "--out", single.to_str().unwrap(), "--seed", "7", "--format", "json"]);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([7]));

    let o = semid(&["render", "--config", cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(2), "render without a render source");
}

#[test]
fn cli_config_and_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    let mut v = serde_json::to_value(quick(Layout::Unimodal)).unwrap();
    v["fusion"] = "early".into();
    fs::write(&bad, v.to_string()).unwrap();
    let o = semid(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("configuration error"));

    v["fusion"] = "unimodal".into();
    v["data"] = serde_json::json!({"files": {"interactions": "missing.tsv", "catalog": "missing.json"}});
    v["text"] = serde_json::json!({"embeddings": "missing-emb"});
    fs::write(&bad, v.to_string()).unwrap();
    let o = semid(&["run", "--config", bad.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let o = semid(&["report", "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "unfinished run has no readable report");
}

#[test]
fn cli_divergence_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick(Layout::Unimodal);
    cfg.train.learning_rate = f64::MAX;
    cfg.train.clip_norm = 0.0;
    cfg.train.steps = 20;
    let p = dir.path().join("cfg.json");
    fs::write(&p, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = semid(&["train", "--config", p.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}
