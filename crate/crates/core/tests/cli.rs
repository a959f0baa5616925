use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use mgcn::checkpoint;
use mgcn::cli::{self, RunConfig, SweepAxis};
use mgcn::dataset::{self, SynthSpec};
use mgcn::eval::Phase;
use mgcn::model;

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn small_run(root: &Path, seed: u64) -> RunConfig {
    let mut cfg = cli::cmd_synth(&SynthSpec::default(), seed, &root.join("data")).unwrap();
    cfg.dim = 8;
    cfg.batch_size = 512;
    cfg.lr = 0.01;
    cfg.max_epochs = 1;
    cfg
}

/// One trained single-epoch run shared by the read-only tests.
fn trained() -> &'static (RunConfig, cli::TrainSummary) {
    static RUN: OnceLock<(RunConfig, cli::TrainSummary)> = OnceLock::new();
    RUN.get_or_init(|| {
        let cfg = small_run(&scratch("shared"), 1);
        let s = cli::cmd_train(&cfg).unwrap();
        (cfg, s)
    })
}

#[test]
fn prepare_reuses_and_invalidates_caches() {
    let cfg = small_run(&scratch("prepare"), 2);
    let first = cli::cmd_prepare(&cfg).unwrap();
    assert!(!first.cache.split_reused && !first.cache.laplacian_reused);
    assert!(first.cache.knn_reused.iter().all(|r| !r));
    let n = first.split.n_users() + first.split.n_items();
    assert_eq!((first.graphs.laplacian.n_rows(), first.graphs.laplacian.n_cols()), (n, n));

    let second = cli::cmd_prepare(&cfg).unwrap();
    assert!(second.cache.split_reused && second.cache.laplacian_reused);
    assert!(second.cache.knn_reused.iter().all(|r| *r));
    assert_eq!(second.split.train_edges, first.split.train_edges);
    assert_eq!(second.split.test_edges, first.split.test_edges);

    let mut wider = cfg.clone();
    wider.knn_k = 20;
    let third = cli::cmd_prepare(&wider).unwrap();
    assert!(third.cache.split_reused && third.cache.laplacian_reused);
    assert!(third.cache.knn_reused.iter().all(|r| !r));
}

#[test]
fn single_epoch_train_writes_all_outputs() {
    let (cfg, s) = trained();
    assert_eq!(s.history.len(), 1);
    for name in [cli::CHECKPOINT_NAME, cli::HISTORY_NAME, "report_val.json", "report_test.json"] {
        assert!(cfg.out_dir.join(name).is_file(), "{name}");
    }
    let history = std::fs::read_to_string(cfg.out_dir.join(cli::HISTORY_NAME)).unwrap();
    assert_eq!(history.lines().count(), 1);
    assert_eq!(s.test_report.cutoffs, vec![10, 20]);
}

#[test]
fn evaluate_reproduces_the_training_report() {
    let (_, s) = trained();
    let r = cli::cmd_evaluate(&s.checkpoint, &[], Phase::Test).unwrap();
    assert_eq!(r.recall, s.test_report.recall);
    assert_eq!(r.ndcg, s.test_report.ndcg);
    let v = cli::cmd_evaluate(&s.checkpoint, &[], Phase::Val).unwrap();
    assert_eq!(v.recall, s.val_report.recall);
    let five = cli::cmd_evaluate(&s.checkpoint, &["cutoffs=[5]".to_string()], Phase::Test).unwrap();
    assert_eq!(five.recall.keys().copied().collect::<Vec<_>>(), vec![5]);
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let (_, s) = trained();
    let dir = scratch("tamper");
    let mut bytes = std::fs::read(&s.checkpoint).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x55;
    let p = dir.join("bad.ckpt");
    std::fs::write(&p, bytes).unwrap();
    let err = checkpoint::load(&p).unwrap_err().to_string();
    assert!(err.to_lowercase().contains("checksum") || err.contains("sha"), "{err}");
}

#[test]
fn recommendations_exclude_training_items_and_match_scores() {
    let (_, s) = trained();
    let m = cli::load_model(&s.checkpoint, &[]).unwrap();
    let split = &m.prepared.split;
    let user = split.base.user_labels[3].clone();
    let recs = cli::cmd_recommend(&s.checkpoint, &user, 10_000).unwrap();
    // Clamped to the unseen catalog.
    assert_eq!(recs.len(), split.n_items() - split.train_items_by_user[3].len());
    let train: Vec<&str> = split.train_items_by_user[3].iter().map(|&i| split.base.item_labels[i].as_str()).collect();
    assert!(recs.iter().all(|r| !train.contains(&r.item.as_str())));
    assert!(recs.windows(2).all(|w| w[0].score >= w[1].score));

    let fw = model::forward(&m.params, &m.prepared.model_cfg, &m.prepared.graphs, &m.prepared.dense_features).unwrap();
    for r in recs.iter().take(5) {
        let i = split.base.item_labels.iter().position(|l| *l == r.item).unwrap();
        let dot: f64 = fw.user_embedding(3).iter().zip(fw.item_embedding(i)).map(|(a, b)| a * b).sum();
        assert!((dot - r.score).abs() < 1e-12);
    }
    assert_eq!(cli::cmd_recommend(&s.checkpoint, &user, 3).unwrap(), recs[..3].to_vec());
    assert!(cli::cmd_recommend(&s.checkpoint, "nobody", 3).is_err());
}

#[test]
fn exported_embeddings_round_trip() {
    let (cfg, s) = trained();
    let dir = scratch("export");
    let m = cli::load_model(&s.checkpoint, &[]).unwrap();
    let fw = model::forward(&m.params, &m.prepared.model_cfg, &m.prepared.graphs, &m.prepared.dense_features).unwrap();
    let n = m.prepared.split.n_users() + m.prepared.split.n_items();
    let p = dir.join("final.bin");
    assert_eq!(cli::cmd_export_embeddings(&s.checkpoint, "final", None, &p).unwrap(), (n, cfg.dim));
    let back = dataset::load_modality_features(&p, "final", n).unwrap();
    for r in 0..n {
        for (a, b) in back.row(r).iter().zip(fw.final_emb.row(r)) {
            assert_eq!(*a, *b as f32);
        }
    }
    let labels = std::fs::read_to_string(dir.join("final.bin.labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), n);
    assert!(labels.starts_with("user:"));

    let tag = cfg.modalities[1].clone();
    let q = dir.join("m.bin");
    cli::cmd_export_embeddings(&s.checkpoint, "modality", Some(&tag), &q).unwrap();
    assert!(dataset::load_modality_features(&q, &tag, n).is_ok());
    assert!(cli::cmd_export_embeddings(&s.checkpoint, "modality", Some("smell"), &q).is_err());
    assert!(cli::cmd_export_embeddings(&s.checkpoint, "everything", None, &q).is_err());
}

#[test]
fn sweep_rows_match_plain_training() {
    let mut cfg = small_run(&scratch("sweep"), 3);
    cfg.max_epochs = 2;
    let rows = cli::cmd_sweep(&cfg, SweepAxis::KnnK, &[15.0]).unwrap();
    let mut plain = cfg.clone();
    plain.knn_k = 15;
    plain.out_dir = cfg.out_dir.join("plain");
    let s = cli::cmd_train(&plain).unwrap();
    assert_eq!(rows[0].test_recall, s.test_report.recall);
    assert_eq!(rows[0].test_ndcg, s.test_report.ndcg);
    assert!(cfg.out_dir.join("sweep.json").is_file());

    let rows = cli::cmd_sweep(&cfg, SweepAxis::LambdaC, &[0.0, 0.01]).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.test_recall.values().chain(r.test_ndcg.values()).all(|v| v.is_finite())));
    let table = cli::sweep_table(SweepAxis::LambdaC, &cfg.cutoffs, &rows);
    assert_eq!(table.lines().count(), 3);
    assert!(SweepAxis::parse("depth").is_err());
}

#[test]
fn warm_cache_gives_identical_checkpoints() {
    let root = scratch("warm");
    let cfg = small_run(&root, 4);
    let cold = cli::cmd_train(&cfg).unwrap();
    let cold_bytes = std::fs::read(&cold.checkpoint).unwrap();
    let warm = cli::cmd_train(&cfg).unwrap();
    assert_eq!(std::fs::read(&warm.checkpoint).unwrap(), cold_bytes);
}

fn mgcn() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mgcn"));
    c.env("RUST_LOG", "warn");
    c
}

#[test]
fn binary_exit_codes() {
    let dir = scratch("binary");
    let ok = mgcn()
        .args(["synth", "--out"])
        .arg(dir.join("data"))
        .args(["--users", "40", "--items", "30", "--edges-per-user", "6"])
        .output()
        .unwrap();
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stderr));
    let config = dir.join("data").join("config.json");

    let missing = mgcn().args(["prepare", "--config"]).arg(dir.join("nope.json")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
    let bad = mgcn().args(["prepare", "--config"]).arg(&config).args(["--set", "knn_k=\"many\""]).output().unwrap();
    assert_eq!(bad.status.code(), Some(1));
    let unknown = mgcn().args(["prepare", "--config"]).arg(&config).args(["--set", "no_such_key=1"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(1));

    let train = mgcn()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--set", "max_epochs=1", "--set", "dim=4"])
        .output()
        .unwrap();
    assert!(train.status.success(), "{}", String::from_utf8_lossy(&train.stderr));
    let ckpt = dir.join("data").join("run").join(cli::CHECKPOINT_NAME);
    let eval = mgcn().args(["evaluate", "--checkpoint"]).arg(&ckpt).args(["--set", "lr=0.5"]).output().unwrap();
    assert!(eval.status.success());
    assert!(String::from_utf8_lossy(&eval.stderr).contains("differs"));
    let rec = mgcn().args(["recommend", "--checkpoint"]).arg(&ckpt).args(["--user", "u0", "-n", "3"]).output().unwrap();
    assert!(rec.status.success());
    assert_eq!(String::from_utf8_lossy(&rec.stdout).lines().count(), 3);
}
