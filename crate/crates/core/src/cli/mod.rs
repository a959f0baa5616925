//! Subcommand implementations behind the `mgcn` binary.
//!
//! Every command reads a [`RunConfig`], writes its artifacts under `out_dir`
//! and logs progress to stderr. Outputs carry the config hash so that later
//! commands can detect mismatched settings.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

pub use config::RunConfig;

use crate::checkpoint;
use crate::dataset::{self, FeatureMatrix, SplitDataset, SynthSpec};
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Phase};
use crate::model::{self, ModelConfig, ModelGraphs, ModelParams};
use crate::sparse::{self, SparseGraph};
use crate::training::{self, EpochRecord};

pub const CHECKPOINT_NAME: &str = "best.ckpt";
pub const HISTORY_NAME: &str = "history.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    dataset::write_file(path, text.as_bytes())
}

/// Which prepared artifacts were reused from a previous run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheReport {
    pub split_reused: bool,
    pub laplacian_reused: bool,
    pub knn_reused: Vec<bool>,
}

/// Everything a model run needs, loaded and built.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: SplitDataset,
    pub features: Vec<FeatureMatrix>,
    pub dense_features: Vec<DenseMatrix>,
    pub graphs: ModelGraphs,
    pub model_cfg: ModelConfig,
    pub cache: CacheReport,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct SplitStamp {
    interactions_sha256: String,
    seed: u64,
    ratios: [f64; 3],
}

fn short(hash: &str) -> &str {
    &hash[..16]
}

fn sanitize(tag: &str) -> String {
    tag.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect()
}

fn read_graph(path: &Path) -> Result<SparseGraph> {
    let bytes = dataset::read_file(path)?;
    SparseGraph::read_from(bytes.as_slice())
}

fn write_graph(path: &Path, g: &SparseGraph) -> Result<()> {
    let mut buf = Vec::new();
    g.write_to(&mut buf).map_err(|e| Error::io("encoding graph", e))?;
    // Write-then-rename so an interrupted run never leaves a truncated cache entry.
    let tmp = path.with_extension("tmp");
    dataset::write_file(&tmp, &buf)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(format!("renaming {}", tmp.display()), e))
}

/// Splits the interactions and builds (or reuses) the cached graphs.
///
/// The split is keyed by the interaction file hash, seed and ratios; the
/// Laplacian by the training edges; each KNN graph by its feature file hash and `k`.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate_for_data()?;
    let data_dir = cfg.out_dir.join("data");
    let cache_dir = cfg.out_dir.join("cache");
    create_dir(&data_dir)?;
    create_dir(&cache_dir)?;
    let mut cache = CacheReport::default();

    let interactions_path = cfg.interactions.as_ref().unwrap();
    let stamp = SplitStamp {
        interactions_sha256: checkpoint::sha256_hex(&dataset::read_file(interactions_path)?),
        seed: cfg.seed,
        ratios: cfg.split_ratios,
    };
    let stamp_path = data_dir.join("source.json");
    let previous: Option<SplitStamp> = dataset::read_file(&stamp_path)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let split = match previous {
        Some(p) if p == stamp => match SplitDataset::load(&data_dir) {
            Ok(s) => {
                info!("split cache hit ({})", data_dir.display());
                cache.split_reused = true;
                s
            }
            Err(e) => {
                warn!("cached split unreadable ({e}); rebuilding");
                new_split(cfg, interactions_path, &data_dir, &stamp_path, &stamp)?
            }
        },
        _ => new_split(cfg, interactions_path, &data_dir, &stamp_path, &stamp)?,
    };

    let mut train_bytes = Vec::new();
    for &(u, i) in &split.train_edges {
        train_bytes.extend_from_slice(&(u as u64).to_le_bytes());
        train_bytes.extend_from_slice(&(i as u64).to_le_bytes());
    }
    let lap_key = checkpoint::sha256_hex(&train_bytes);
    let lap_path = cache_dir.join(format!("laplacian-{}.csr", short(&lap_key)));
    let laplacian = match lap_path.exists().then(|| read_graph(&lap_path)) {
        Some(Ok(g)) => {
            info!("laplacian cache hit ({})", lap_path.display());
            cache.laplacian_reused = true;
            g
        }
        _ => {
            info!("building normalized laplacian");
            let g = model::build_laplacian(&split)?;
            write_graph(&lap_path, &g)?;
            g
        }
    };

    let mut features = Vec::new();
    let mut item_item = Vec::new();
    for (tag, path) in cfg.modalities.iter().zip(&cfg.features) {
        let bytes = dataset::read_file(path)?;
        let fm = dataset::decode_features(&bytes, tag, split.n_items())
            .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))?;
        let key = checkpoint::sha256_hex(&bytes);
        let knn_path = cache_dir.join(format!("knn-{}-{}-k{}.csr", sanitize(tag), short(&key), cfg.knn_k));
        let graph = match knn_path.exists().then(|| read_graph(&knn_path)) {
            Some(Ok(g)) => {
                info!("{tag} item-item graph cache hit ({})", knn_path.display());
                cache.knn_reused.push(true);
                g
            }
            _ => {
                info!("building {tag} item-item graph (k = {})", cfg.knn_k);
                let g = sparse::normalize_sym_signed(&sparse::knn_affinity_graph(&fm, cfg.knn_k)?)?;
                write_graph(&knn_path, &g)?;
                cache.knn_reused.push(false);
                g
            }
        };
        item_item.push(graph);
        features.push(fm);
    }

    let graphs = ModelGraphs::from_parts(split.n_users(), split.n_items(), laplacian, item_item)?;
    let model_cfg = cfg.model_config(features.iter().map(FeatureMatrix::dim).collect())?;
    let dense_features = features.iter().map(FeatureMatrix::to_dense).collect();
    Ok(Prepared {
        split,
        features,
        dense_features,
        graphs,
        model_cfg,
        cache,
    })
}

fn new_split(cfg: &RunConfig, path: &Path, data_dir: &Path, stamp_path: &Path, stamp: &SplitStamp) -> Result<SplitDataset> {
    let ds = dataset::load_interactions(path)?;
    info!(
        "{}: {} users, {} items, {} interactions",
        path.display(),
        ds.n_users,
        ds.n_items,
        ds.edges.len()
    );
    let split = dataset::split_per_user(&ds, cfg.split_ratios, cfg.seed)?;
    split.save(data_dir)?;
    write_json(stamp_path, stamp)?;
    Ok(split)
}

/// Outcome of a training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub val_report: EvalReport,
    pub test_report: EvalReport,
    pub checkpoint: PathBuf,
}

fn checkpoint_config(cfg: &RunConfig, prepared: &Prepared) -> serde_json::Value {
    serde_json::json!({
        "run": cfg.canonical_json(),
        "config_hash": cfg.config_hash(),
        "ablation": prepared.model_cfg.ablations.label(),
        "n_users": prepared.split.n_users(),
        "n_items": prepared.split.n_items(),
        "modality_dims": prepared.model_cfg.modality_dims,
    })
}

fn stamp_report(mut report: EvalReport, cfg: &RunConfig) -> EvalReport {
    report.seed = Some(cfg.seed);
    report.config_hash = Some(cfg.config_hash());
    report
}

fn history_line(record: &EpochRecord) -> Result<String> {
    Ok(serde_json::to_string(record)?)
}

/// Trains, keeps the best validation checkpoint, and writes the history and
/// final validation/test reports.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let prepared = cmd_prepare(cfg)?;
    let train_cfg = cfg.train_config();
    info!(
        "training {} ({} users, {} items, {} train edges)",
        prepared.model_cfg.ablations.label(),
        prepared.split.n_users(),
        prepared.split.n_items(),
        prepared.split.train_edges.len()
    );
    let out = training::train(
        &train_cfg,
        &prepared.model_cfg,
        &prepared.split,
        &prepared.graphs,
        &prepared.dense_features,
        |r| {
            info!(
                "epoch {:>4}  loss {:.5} (bpr {:.5}, cl {:.5})  val R@20 {}",
                r.epoch,
                r.total,
                r.bpr,
                r.cl,
                r.val_recall_at_20.map_or("-".into(), |v| format!("{v:.4}"))
            )
        },
    )?;

    let mut history = String::new();
    for r in &out.history {
        history.push_str(&history_line(r)?);
        history.push('\n');
    }
    dataset::write_file(&cfg.out_dir.join(HISTORY_NAME), history.as_bytes())?;

    let ckpt = cfg.out_dir.join(CHECKPOINT_NAME);
    checkpoint::save(&ckpt, &checkpoint_config(cfg, &prepared), &out.best_params)?;

    let (val_report, test_report) = evaluate_both(cfg, &prepared, &out.best_params)?;
    write_json(&cfg.out_dir.join("report_val.json"), &val_report)?;
    write_json(&cfg.out_dir.join("report_test.json"), &test_report)?;
    info!(
        "test: {}",
        test_report
            .cutoffs
            .iter()
            .map(|k| format!("R@{k} {:.4} N@{k} {:.4}", test_report.recall_at(*k), test_report.ndcg_at(*k)))
            .collect::<Vec<_>>()
            .join("  ")
    );
    Ok(TrainSummary {
        params: out.best_params,
        history: out.history,
        best_epoch: out.best_epoch,
        val_report,
        test_report,
        checkpoint: ckpt,
    })
}

fn evaluate_both(cfg: &RunConfig, prepared: &Prepared, params: &ModelParams) -> Result<(EvalReport, EvalReport)> {
    let fw = model::forward(params, &prepared.model_cfg, &prepared.graphs, &prepared.dense_features)?;
    let opts = cfg.eval_options();
    let val = eval::evaluate_artifacts(&fw, &prepared.split, Phase::Val, &cfg.cutoffs, opts)?;
    let test = eval::evaluate_artifacts(&fw, &prepared.split, Phase::Test, &cfg.cutoffs, opts)?;
    Ok((stamp_report(val, cfg), stamp_report(test, cfg)))
}

/// A checkpoint together with the configuration and data it was trained on.
pub struct LoadedModel {
    pub cfg: RunConfig,
    pub prepared: Prepared,
    pub params: ModelParams,
    pub stored_hash: String,
}

/// Loads a checkpoint; `overrides` are applied on top of its stored config.
/// The output directory is the checkpoint's own directory.
pub fn load_model(ckpt: &Path, overrides: &[String]) -> Result<LoadedModel> {
    let (manifest, blob) = checkpoint::load(ckpt)?;
    let run = manifest
        .config
        .get("run")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("manifest has no run configuration".into()))?;
    let stored_hash = manifest
        .config
        .get("config_hash")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();
    let mut obj = run;
    obj.as_object_mut()
        .ok_or_else(|| Error::Checkpoint("run configuration is not an object".into()))?
        .remove("out_dir");
    let mut cfg = RunConfig::from_json(obj)?;
    cfg.out_dir = ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf);
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if cfg.config_hash() != stored_hash {
        warn!(
            "config hash {} differs from the checkpoint's {stored_hash}; results may not be comparable",
            cfg.config_hash()
        );
    }
    let prepared = cmd_prepare(&cfg)?;
    let mut params = model::init_params(&prepared.model_cfg, prepared.split.n_users(), prepared.split.n_items(), 0)?;
    checkpoint::restore_params(&manifest, &blob, &mut params)?;
    Ok(LoadedModel {
        cfg,
        prepared,
        params,
        stored_hash,
    })
}

/// Evaluates a checkpoint and writes `eval_<phase>.json` next to it.
pub fn cmd_evaluate(ckpt: &Path, overrides: &[String], phase: Phase) -> Result<EvalReport> {
    let m = load_model(ckpt, overrides)?;
    let report = eval::evaluate(
        &m.params,
        &m.prepared.model_cfg,
        &m.prepared.graphs,
        &m.prepared.dense_features,
        &m.prepared.split,
        phase,
        &m.cfg.cutoffs,
        m.cfg.eval_options(),
    )?;
    let report = stamp_report(report, &m.cfg);
    write_json(&m.cfg.out_dir.join(format!("eval_{}.json", phase.as_str())), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: String,
    pub score: f64,
}

/// Top-`n` unseen items for a user given by external id; training items are masked.
pub fn cmd_recommend(ckpt: &Path, user: &str, n: usize) -> Result<Vec<Recommendation>> {
    let m = load_model(ckpt, &[])?;
    let split = &m.prepared.split;
    let u = split
        .base
        .user_labels
        .iter()
        .position(|l| l == user)
        .ok_or_else(|| Error::InvalidData(format!("unknown user `{user}`")))?;
    let fw = model::forward(&m.params, &m.prepared.model_cfg, &m.prepared.graphs, &m.prepared.dense_features)?;
    let scores = model::predict_scores(fw.user_embedding(u), &fw.item_embeddings())?;
    let ranked = eval::top_k_by_scores(&scores, &split.train_items_by_user[u], n);
    Ok(ranked
        .into_iter()
        .map(|i| Recommendation {
            item: split.base.item_labels[i].clone(),
            score: scores[i],
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    KnnK,
    LambdaC,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<SweepAxis> {
        match s {
            "knn_k" | "k" => Ok(SweepAxis::KnnK),
            "lambda_c" | "lambda_C" => Ok(SweepAxis::LambdaC),
            other => Err(Error::Config(format!("unknown sweep axis `{other}` (knn_k | lambda_c)"))),
        }
    }

    fn key(&self) -> &'static str {
        match self {
            SweepAxis::KnnK => "knn_k",
            SweepAxis::LambdaC => "lambda_c",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub best_epoch: Option<usize>,
    pub val_recall: BTreeMap<usize, f64>,
    pub test_recall: BTreeMap<usize, f64>,
    pub test_ndcg: BTreeMap<usize, f64>,
    pub out_dir: PathBuf,
}

/// One full train + evaluate per value, all with the same seed.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let mut rows = Vec::new();
    for &value in values {
        let mut run = cfg.clone();
        match axis {
            SweepAxis::KnnK => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(Error::Config(format!("knn_k must be a positive integer, got {value}")));
                }
                run.knn_k = value as usize;
            }
            SweepAxis::LambdaC => run.lambda_c = value,
        }
        run.out_dir = cfg.out_dir.join("sweep").join(format!("{}={value}", axis.key()));
        info!("sweep {} = {value}", axis.key());
        let summary = cmd_train(&run)?;
        rows.push(SweepRow {
            value,
            best_epoch: summary.best_epoch,
            val_recall: summary.val_report.recall.clone(),
            test_recall: summary.test_report.recall.clone(),
            test_ndcg: summary.test_report.ndcg.clone(),
            out_dir: run.out_dir,
        });
    }
    write_json(
        &cfg.out_dir.join("sweep.json"),
        &serde_json::json!({ "axis": axis.key(), "config_hash": cfg.config_hash(), "rows": rows }),
    )?;
    dataset::write_file(&cfg.out_dir.join("sweep.txt"), sweep_table(axis, &cfg.cutoffs, &rows).as_bytes())?;
    Ok(rows)
}

pub fn sweep_table(axis: SweepAxis, cutoffs: &[usize], rows: &[SweepRow]) -> String {
    let mut header = vec![format!("{:>10}", axis.key()), format!("{:>6}", "epoch")];
    for k in cutoffs {
        header.push(format!("{:>9}", format!("R@{k}")));
        header.push(format!("{:>9}", format!("N@{k}")));
    }
    let mut out = header.join(" ");
    out.push('\n');
    for r in rows {
        let mut cells = vec![
            format!("{:>10}", r.value),
            format!("{:>6}", r.best_epoch.map_or("-".into(), |e| e.to_string())),
        ];
        for k in cutoffs {
            cells.push(format!("{:>9.4}", r.test_recall.get(k).copied().unwrap_or(f64::NAN)));
            cells.push(format!("{:>9.4}", r.test_ndcg.get(k).copied().unwrap_or(f64::NAN)));
        }
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    out
}

/// Writes a synthetic dataset (interactions, one feature file per modality) and
/// a ready-to-use `config.json` into `out`.
pub fn cmd_synth(spec: &SynthSpec, seed: u64, out: &Path) -> Result<RunConfig> {
    create_dir(out)?;
    let data = dataset::generate_synthetic(spec, seed)?;
    let interactions = out.join("interactions.tsv");
    dataset::save_interactions(&data.split.base, &interactions)?;
    // Feature rows must follow the item order a reader of the interaction file assigns.
    let reread = dataset::load_interactions(&interactions)?;
    let row_of: Vec<usize> = reread
        .item_labels
        .iter()
        .map(|label| data.split.base.item_labels.iter().position(|l| l == label).unwrap())
        .collect();
    let mut cfg = RunConfig {
        interactions: Some(interactions),
        out_dir: out.join("run"),
        seed,
        modalities: spec.modalities.iter().map(|(t, _)| t.clone()).collect(),
        ..RunConfig::default()
    };
    for fm in &data.features {
        let path = out.join(format!("features_{}.bin", sanitize(fm.modality())));
        fm.select_rows(&row_of).save(&path)?;
        cfg.features.push(path);
    }
    write_json(&out.join("config.json"), &cfg)?;
    write_json(&out.join("synth.json"), &serde_json::json!({ "spec": spec, "seed": seed, "dropped_items": data.dropped_items }))?;
    info!(
        "synthetic data: {} users, {} items, {} interactions -> {}",
        reread.n_users,
        reread.n_items,
        reread.edges.len(),
        out.display()
    );
    Ok(cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingKind {
    /// Propagated behavior embeddings `Ē_id`.
    Id,
    /// `Ē_m` of one modality (index into the configured modalities).
    Modality(usize),
    Multimodal,
    Final,
}

impl EmbeddingKind {
    pub fn parse(which: &str, modality: Option<&str>, modalities: &[String]) -> Result<EmbeddingKind> {
        match which {
            "id" => Ok(EmbeddingKind::Id),
            "multimodal" => Ok(EmbeddingKind::Multimodal),
            "final" => Ok(EmbeddingKind::Final),
            "modality" => {
                let tag = modality.ok_or_else(|| Error::Config("`modality` export needs a modality tag".into()))?;
                modalities
                    .iter()
                    .position(|m| m == tag)
                    .map(EmbeddingKind::Modality)
                    .ok_or_else(|| Error::Config(format!("unknown modality `{tag}`")))
            }
            other => Err(Error::Config(format!(
                "unknown embedding selector `{other}` (id | modality | multimodal | final)"
            ))),
        }
    }
}

/// Writes the selected node matrix in the feature-file format, plus
/// `<path>.labels.txt` naming each row (`user:<id>` / `item:<id>`).
pub fn cmd_export_embeddings(ckpt: &Path, which: &str, modality: Option<&str>, path: &Path) -> Result<(usize, usize)> {
    let m = load_model(ckpt, &[])?;
    let kind = EmbeddingKind::parse(which, modality, &m.cfg.modalities)?;
    let fw = model::forward(&m.params, &m.prepared.model_cfg, &m.prepared.graphs, &m.prepared.dense_features)?;
    let (tag, matrix) = match kind {
        EmbeddingKind::Id => ("id".to_string(), &fw.e_bar_id),
        EmbeddingKind::Modality(k) => (m.cfg.modalities[k].clone(), &fw.e_bar_m[k]),
        EmbeddingKind::Multimodal => ("multimodal".to_string(), &fw.e_mul),
        EmbeddingKind::Final => ("final".to_string(), &fw.final_emb),
    };
    let values = matrix.as_slice().iter().map(|&v| v as f32).collect();
    let fm = FeatureMatrix::new(tag, matrix.rows(), matrix.cols(), values)?;
    fm.save(path)?;
    let split = &m.prepared.split;
    let mut labels = String::new();
    for l in &split.base.user_labels {
        labels.push_str(&format!("user:{l}\n"));
    }
    for l in &split.base.item_labels {
        labels.push_str(&format!("item:{l}\n"));
    }
    let mut sidecar = path.as_os_str().to_owned();
    sidecar.push(".labels.txt");
    let mut f = fs::File::create(&sidecar).map_err(|e| Error::io("creating label sidecar", e))?;
    f.write_all(labels.as_bytes()).map_err(|e| Error::io("writing label sidecar", e))?;
    Ok(matrix.shape())
}
