//! Joint BPR + contrastive training with Adam and validation-driven early stopping.

mod adam;
mod grad;
mod loss;
mod sampler;

use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use grad::{compute_gradients, objective_value, total_loss, Gradients, LossBreakdown, Objective};
pub use loss::{bpr_loss, contrastive_loss, info_nce, softplus, ClDenominator, ContrastiveOutput};
pub use sampler::{sample_bpr_batch, BprBatch, MAX_NEGATIVE_TRIES};

use crate::dataset::SplitDataset;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};
use crate::eval::{self, EvalOptions, Phase};
use crate::model::{self, ModelConfig, ModelGraphs, ModelParams};

/// Cutoff of the early-stopping metric (validation Recall@20).
pub const STOPPING_CUTOFF: usize = 20;

/// Which tensors the weight-decay term covers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegScope {
    /// Every trainable tensor.
    #[default]
    All,
    /// Only the embedding rows of the batch's users and items.
    Batch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub lambda_e: f64,
    pub tau: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub cl_denominator: ClDenominator,
    pub cl_normalize: bool,
    pub reg_scope: RegScope,
    /// When false the contrastive term is not computed at all.
    pub contrastive: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2048,
            lr: 1e-3,
            lambda_c: 0.01,
            lambda_e: 1e-4,
            tau: 0.2,
            max_epochs: 1000,
            patience: 20,
            eval_every: 1,
            seed: 0,
            cl_denominator: ClDenominator::CrossPair,
            cl_normalize: true,
            reg_scope: RegScope::All,
            contrastive: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return fail("batch_size, eval_every and patience must be at least 1".into());
        }
        if !(self.lr > 0.0) || !(self.tau > 0.0) {
            return fail(format!("lr ({}) and tau ({}) must be positive", self.lr, self.tau));
        }
        if !(self.lambda_c >= 0.0) || !(self.lambda_e >= 0.0) {
            return fail("regularization weights must be non-negative".into());
        }
        Ok(())
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub bpr: f64,
    pub cl: f64,
    pub reg: f64,
    pub total: f64,
    #[serde(rename = "val_recall@20")]
    pub val_recall_at_20: Option<f64>,
    pub elapsed_ms: u64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub best_params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_recall: Option<f64>,
    pub skipped_triples: usize,
}

/// Runs the epoch loop. Every epoch draws `ceil(|train| / batch_size)` batches;
/// validation Recall@20 is computed every `eval_every` epochs and the best
/// parameters are kept. Training stops after `patience` evaluations without
/// improvement or after `max_epochs`.
pub fn train(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    split: &SplitDataset,
    graphs: &ModelGraphs,
    features: &[DenseMatrix],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutput> {
    cfg.validate()?;
    model_cfg.validate()?;
    if split.train_edges.is_empty() {
        return Err(Error::InvalidData("training split is empty".into()));
    }
    let mut params = model::init_params(model_cfg, split.n_users(), split.n_items(), cfg.seed)?;
    let objective = Objective::from_config(cfg);
    let mut adam = AdamState::new(&params);
    // Separate stream from the initializer so sampling does not mirror init draws.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_ba7c_4e55_0001);
    let n_batches = split.train_edges.len().div_ceil(cfg.batch_size);
    let validate = !split.val_edges.is_empty();
    let eval_opts = EvalOptions::default();

    let start = Instant::now();
    let mut history = Vec::new();
    let mut best: Option<(ModelParams, usize, f64)> = None;
    let mut stale_rounds = 0;
    let mut skipped = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut sums = LossBreakdown::default();
        for _ in 0..n_batches {
            let batch = sample_bpr_batch(split, cfg.batch_size, &mut rng)?;
            skipped += batch.skipped;
            let (losses, grads) = compute_gradients(&params, model_cfg, &objective, graphs, features, &batch)?;
            adam_step(&mut params, &grads.0, &mut adam, cfg.lr);
            params.check_finite()?;
            sums.bpr += losses.bpr;
            sums.cl += losses.cl;
            sums.reg += losses.reg;
            sums.total += losses.total;
        }
        let scale = 1.0 / n_batches as f64;

        let mut val_recall = None;
        if validate && epoch % cfg.eval_every == 0 {
            let report = eval::evaluate(
                &params,
                model_cfg,
                graphs,
                features,
                split,
                Phase::Val,
                &[STOPPING_CUTOFF],
                eval_opts,
            )?;
            let recall = report.recall_at(STOPPING_CUTOFF);
            val_recall = Some(recall);
            if best.as_ref().is_none_or(|(_, _, r)| recall > *r) {
                best = Some((params.clone(), epoch, recall));
                stale_rounds = 0;
            } else {
                stale_rounds += 1;
            }
        }

        let record = EpochRecord {
            epoch,
            bpr: sums.bpr * scale,
            cl: sums.cl * scale,
            reg: sums.reg * scale,
            total: sums.total * scale,
            val_recall_at_20: val_recall,
            elapsed_ms: start.elapsed().as_millis() as u64,
        };
        debug!("epoch {epoch}: {record:?}");
        on_epoch(&record);
        history.push(record);

        if stale_rounds >= cfg.patience {
            info!("early stop at epoch {epoch}: {stale_rounds} evaluations without improvement");
            break;
        }
    }

    let (best_params, best_epoch, best_val_recall) = match best {
        Some((p, e, r)) => (p, Some(e), Some(r)),
        None => (params, None, None),
    };
    Ok(TrainOutput {
        best_params,
        history,
        best_epoch,
        best_val_recall,
        skipped_triples: skipped,
    })
}
