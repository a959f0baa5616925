use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::sha256_hex;
use crate::dataset::read_file;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{Ablations, ModelConfig};
use crate::training::{ClDenominator, RegScope, TrainConfig};

/// Flat run configuration: every model, training and evaluation knob plus input
/// paths. Config files use exactly these keys; missing keys take the defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    /// Feature file per modality, aligned with `modalities`.
    pub features: Vec<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub split_ratios: [f64; 3],

    pub dim: usize,
    pub modalities: Vec<String>,
    pub ui_layers: usize,
    pub ii_layers: usize,
    pub knn_k: usize,
    /// `full`, or `+`-joined `w/o-BG`, `w/o-MV`, `w/o-BA`.
    pub ablation: String,
    pub per_modality_gate: bool,

    pub batch_size: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub lambda_e: f64,
    pub tau: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub cl_denominator: ClDenominator,
    pub cl_normalize: bool,
    pub reg_scope: RegScope,
    pub contrastive: bool,

    pub cutoffs: Vec<usize>,
    pub mask_val_in_test: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            interactions: None,
            features: Vec::new(),
            out_dir: PathBuf::from("out"),
            seed: 0,
            split_ratios: [0.8, 0.1, 0.1],
            dim: m.dim,
            modalities: m.modalities,
            ui_layers: m.ui_layers,
            ii_layers: m.ii_layers,
            knn_k: m.knn_k,
            ablation: "full".into(),
            per_modality_gate: m.per_modality_gate,
            batch_size: t.batch_size,
            lr: t.lr,
            lambda_c: t.lambda_c,
            lambda_e: t.lambda_e,
            tau: t.tau,
            max_epochs: t.max_epochs,
            patience: t.patience,
            eval_every: t.eval_every,
            cl_denominator: t.cl_denominator,
            cl_normalize: t.cl_normalize,
            reg_scope: t.reg_scope,
            contrastive: t.contrastive,
            cutoffs: vec![10, 20],
            mask_val_in_test: true,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let bytes = read_file(path)?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_json(value: Value) -> Result<RunConfig> {
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `key=value`; the value is parsed as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let mut obj = serde_json::to_value(&*self)?;
        let map = obj.as_object_mut().expect("RunConfig serializes to an object");
        if !map.contains_key(key) {
            return Err(Error::Config(format!("unknown configuration key `{key}`")));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        map.insert(key.to_string(), value);
        *self = serde_json::from_value(obj).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn ablations(&self) -> Result<Ablations> {
        Ablations::parse(&self.ablation)
    }

    /// Model configuration; `modality_dims` come from the feature files.
    pub fn model_config(&self, modality_dims: Vec<usize>) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            dim: self.dim,
            modalities: self.modalities.clone(),
            modality_dims,
            ui_layers: self.ui_layers,
            ii_layers: self.ii_layers,
            knn_k: self.knn_k,
            ablations: self.ablations()?,
            per_modality_gate: self.per_modality_gate,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            lr: self.lr,
            lambda_c: self.lambda_c,
            lambda_e: self.lambda_e,
            tau: self.tau,
            max_epochs: self.max_epochs,
            patience: self.patience,
            eval_every: self.eval_every,
            seed: self.seed,
            cl_denominator: self.cl_denominator,
            cl_normalize: self.cl_normalize,
            reg_scope: self.reg_scope,
            contrastive: self.contrastive,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            mask_val_in_test: self.mask_val_in_test,
            keep_per_user: false,
        }
    }

    /// Configuration with `out_dir` cleared: the location of outputs does not
    /// change results, so it is left out of hashes and checkpoints.
    pub fn canonical_json(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("RunConfig serializes");
        v.as_object_mut().unwrap().insert("out_dir".into(), Value::Null);
        v
    }

    /// SHA-256 (hex, 16 chars) of the canonical configuration.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(&self.canonical_json()).expect("JSON encoding");
        sha256_hex(&bytes)[..16].to_string()
    }

    pub fn validate_for_data(&self) -> Result<()> {
        if self.interactions.is_none() {
            return Err(Error::Config("`interactions` path is not set".into()));
        }
        if self.features.len() != self.modalities.len() {
            return Err(Error::Config(format!(
                "{} feature files for {} modalities",
                self.features.len(),
                self.modalities.len()
            )));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Config("cutoffs must be positive".into()));
        }
        self.train_config().validate()?;
        self.ablations()?;
        Ok(())
    }
}
