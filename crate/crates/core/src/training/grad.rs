//! Exact reverse-mode gradient of the training objective.
//!
//! The backward pass mirrors [`crate::model::forward`] stage by stage, consuming
//! the cached [`ForwardArtifacts`]. Graph operators are constants; transposes are
//! applied where the forward pass multiplied by a graph.

use serde::{Deserialize, Serialize};

use super::loss::{self, ClDenominator};
use super::sampler::BprBatch;
use super::{RegScope, TrainConfig};
use crate::dense::{dot, DenseMatrix};
use crate::error::{Error, Result};
use crate::model::{self, ForwardArtifacts, ModelConfig, ModelGraphs, ModelParams};
use crate::sparse::{spmm, SparseGraph};

/// Gradient of the objective, one tensor per [`ModelParams`] tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients(pub ModelParams);

impl Gradients {
    pub fn params(&self) -> &ModelParams {
        &self.0
    }
}

/// Weights of the objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Objective {
    pub bpr_weight: f64,
    /// `None` leaves the contrastive term out entirely (not even evaluated).
    pub contrastive_weight: Option<f64>,
    pub reg_weight: f64,
    pub reg_scope: RegScope,
    pub tau: f64,
    pub cl_denominator: ClDenominator,
    pub cl_normalize: bool,
}

impl Objective {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            bpr_weight: 1.0,
            contrastive_weight: cfg.contrastive.then_some(cfg.lambda_c),
            reg_weight: cfg.lambda_e,
            reg_scope: cfg.reg_scope,
            tau: cfg.tau,
            cl_denominator: cfg.cl_denominator,
            cl_normalize: cfg.cl_normalize,
        }
    }
}

/// Unweighted term values and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bpr: f64,
    pub cl: f64,
    pub reg: f64,
    pub total: f64,
}

fn regularizer(params: &ModelParams, scope: RegScope, batch: &BprBatch, n_users: usize) -> f64 {
    match scope {
        RegScope::All => params.tensors().iter().map(|(_, _, t)| t.iter().map(|v| v * v).sum::<f64>()).sum(),
        RegScope::Batch => batch_rows(batch, n_users)
            .iter()
            .map(|&r| dot(params.e_id.row(r), params.e_id.row(r)))
            .sum(),
    }
}

/// Embedding-table rows touched by the batch (users, then offset items).
fn batch_rows(batch: &BprBatch, n_users: usize) -> Vec<usize> {
    let mut rows = batch.unique_users();
    rows.extend(batch.unique_items().into_iter().map(|i| n_users + i));
    rows
}

/// Loss terms for a batch given an already computed forward pass.
pub fn total_loss(
    fw: &ForwardArtifacts,
    batch: &BprBatch,
    params: &ModelParams,
    objective: &Objective,
) -> Result<LossBreakdown> {
    Ok(loss_and_seeds(fw, batch, params, objective)?.0)
}

struct Seeds {
    final_emb: DenseMatrix,
    mul: DenseMatrix,
    bar_id: DenseMatrix,
}

fn loss_and_seeds(
    fw: &ForwardArtifacts,
    batch: &BprBatch,
    params: &ModelParams,
    objective: &Objective,
) -> Result<(LossBreakdown, Seeds)> {
    let n_users = fw.n_users;
    let (n, d) = fw.final_emb.shape();
    let emb = &fw.final_emb;
    let mut seeds = Seeds {
        final_emb: DenseMatrix::zeros(n, d),
        mul: DenseMatrix::zeros(n, d),
        bar_id: DenseMatrix::zeros(n, d),
    };

    let pos: Vec<f64> = (0..batch.len())
        .map(|k| dot(emb.row(batch.users[k]), emb.row(n_users + batch.pos_items[k])))
        .collect();
    let neg: Vec<f64> = (0..batch.len())
        .map(|k| dot(emb.row(batch.users[k]), emb.row(n_users + batch.neg_items[k])))
        .collect();
    let bpr = loss::bpr_loss(&pos, &neg);
    if objective.bpr_weight != 0.0 {
        let margin = loss::bpr_margin_grad(&pos, &neg);
        for (k, g) in margin.iter().enumerate() {
            let g = g * objective.bpr_weight;
            let (u, p, q) = (batch.users[k], n_users + batch.pos_items[k], n_users + batch.neg_items[k]);
            for c in 0..d {
                let (eu, ep, eq) = (emb.get(u, c), emb.get(p, c), emb.get(q, c));
                seeds.final_emb.row_mut(u)[c] += g * (ep - eq);
                seeds.final_emb.row_mut(p)[c] += g * eu;
                seeds.final_emb.row_mut(q)[c] -= g * eu;
            }
        }
    }

    let mut cl = 0.0;
    if let Some(weight) = objective.contrastive_weight {
        let users = batch.unique_users();
        let items: Vec<usize> = batch.unique_items().into_iter().map(|i| n_users + i).collect();
        let out = loss::contrastive_loss(
            &fw.e_mul,
            &fw.e_bar_id,
            &users,
            &items,
            objective.tau,
            objective.cl_denominator,
            objective.cl_normalize,
        )?;
        cl = out.loss;
        seeds.mul.axpy(weight, &out.grad_mul);
        seeds.bar_id.axpy(weight, &out.grad_bar_id);
    }

    let reg = regularizer(params, objective.reg_scope, batch, n_users);
    let total = objective.bpr_weight * bpr + objective.contrastive_weight.unwrap_or(0.0) * cl + objective.reg_weight * reg;
    if !total.is_finite() {
        return Err(Error::NonFinite(format!("loss (bpr {bpr}, cl {cl}, reg {reg})")));
    }
    Ok((LossBreakdown { bpr, cl, reg, total }, seeds))
}

/// Backward of `(1/(L+1)) Σ_l Gˡ X`: returns `(1/(L+1)) Σ_l (Gᵀ)ˡ dY`.
fn layer_average_backward(graph_t: &SparseGraph, grad: &DenseMatrix, layers: usize) -> Result<DenseMatrix> {
    model::propagate_user_item(graph_t, grad, layers)
}

fn check(name: &str, m: &DenseMatrix) -> Result<()> {
    m.check_finite(name)
}

/// Forward pass, loss, and the gradient of the weighted objective w.r.t. every parameter.
pub fn compute_gradients(
    params: &ModelParams,
    cfg: &ModelConfig,
    objective: &Objective,
    graphs: &ModelGraphs,
    features: &[DenseMatrix],
    batch: &BprBatch,
) -> Result<(LossBreakdown, Gradients)> {
    let fw = model::forward(params, cfg, graphs, features)?;
    let (losses, seeds) = loss_and_seeds(&fw, batch, params, objective)?;
    let grads = backward(params, cfg, graphs, features, &fw, seeds, batch, objective)?;
    Ok((losses, grads))
}

#[allow(clippy::too_many_arguments)]
fn backward(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &ModelGraphs,
    features: &[DenseMatrix],
    fw: &ForwardArtifacts,
    seeds: Seeds,
    batch: &BprBatch,
    objective: &Objective,
) -> Result<Gradients> {
    let ab = cfg.ablations;
    let n_users = graphs.n_users;
    let (n, d) = fw.final_emb.shape();
    let n_mod = fw.e_bar_m.len();
    let inv_m = 1.0 / n_mod as f64;
    let mut grads = ModelParams::zeros_like(params);

    // e = Ē_id + E_mul
    let mut d_bar_id = seeds.bar_id;
    d_bar_id.add_assign(&seeds.final_emb);
    let mut d_mul = seeds.mul;
    d_mul.add_assign(&seeds.final_emb);
    check("grad E_mul", &d_mul)?;

    let mut d_bar_m: Vec<DenseMatrix> = Vec::with_capacity(n_mod);
    if ab.disable_behavior_aware_fuser {
        for _ in 0..n_mod {
            d_bar_m.push(d_mul.scaled(inv_m));
        }
    } else {
        // E_mul = E_s + (1/M) Σ_m (Ē_m - E_s) ⊙ P_g(m)
        let mut d_gate: Vec<DenseMatrix> = fw.fusion_gate.iter().map(|_| DenseMatrix::zeros(n, d)).collect();
        let mut d_e_s = d_mul.clone();
        for m in 0..n_mod {
            let g = cfg.gate_of(m);
            let gate = &fw.fusion_gate[g];
            let tilde = fw.e_bar_m[m].sub(&fw.e_s);
            let mut d_tilde = d_mul.hadamard(gate);
            d_tilde.scale(inv_m);
            d_gate[g].axpy(inv_m, &d_mul.hadamard(&tilde));
            d_e_s.axpy(-1.0, &d_tilde);
            d_bar_m.push(d_tilde);
        }
        // E_s = Σ_m α_m Ē_m
        let mut d_alpha = DenseMatrix::zeros(n, n_mod);
        for m in 0..n_mod {
            for node in 0..n {
                let a = fw.alpha.get(node, m);
                d_alpha.set(node, m, dot(fw.e_bar_m[m].row(node), d_e_s.row(node)));
                let src = d_e_s.row(node);
                for (t, s) in d_bar_m[m].row_mut(node).iter_mut().zip(src) {
                    *t += a * s;
                }
            }
        }
        // α = softmax over modalities of q1 · tanh(Ē_m W4ᵀ + b4)
        let mut d_score = DenseMatrix::zeros(n, n_mod);
        for node in 0..n {
            let inner: f64 = (0..n_mod).map(|m| fw.alpha.get(node, m) * d_alpha.get(node, m)).sum();
            for m in 0..n_mod {
                d_score.set(node, m, fw.alpha.get(node, m) * (d_alpha.get(node, m) - inner));
            }
        }
        for m in 0..n_mod {
            let hidden = &fw.attn_hidden[m];
            let mut d_pre = DenseMatrix::zeros(n, d);
            for node in 0..n {
                let s = d_score.get(node, m);
                let h = hidden.row(node);
                for (k, qk) in grads.q1.iter_mut().enumerate() {
                    *qk += s * h[k];
                }
                for (k, v) in d_pre.row_mut(node).iter_mut().enumerate() {
                    *v = s * params.q1[k] * (1.0 - h[k] * h[k]);
                }
            }
            d_pre.add_transpose_mul(&fw.e_bar_m[m], &mut grads.w4);
            d_pre.add_column_sums(&mut grads.b4);
            d_bar_m[m].add_assign(&d_pre.matmul(&params.w4)?);
        }
        // P = σ(Ē_id W3ᵀ + b3)
        for (g, gate) in fw.fusion_gate.iter().enumerate() {
            let d_pre = DenseMatrix::from_vec(
                n,
                d,
                d_gate[g]
                    .as_slice()
                    .iter()
                    .zip(gate.as_slice())
                    .map(|(dg, p)| dg * p * (1.0 - p))
                    .collect(),
            )?;
            d_pre.add_transpose_mul(&fw.e_bar_id, &mut grads.gates[g].w3);
            d_pre.add_column_sums(&mut grads.gates[g].b3);
            d_bar_id.add_assign(&d_pre.matmul(&params.gates[g].w3)?);
        }
    }

    // Modality views back to Ë_m, then through the purifier.
    let mut d_item_id = DenseMatrix::zeros(graphs.n_items, d);
    for m in 0..n_mod {
        check("grad Ē_m", &d_bar_m[m])?;
        let d_ddot = if ab.disable_item_item_view {
            let d_stacked = layer_average_backward(&graphs.laplacian, &d_bar_m[m], cfg.ui_layers)?;
            let mut d_items = d_stacked.slice_rows(n_users, n);
            d_items.add_assign(&spmm(&graphs.item_user, &d_stacked.slice_rows(0, n_users))?);
            d_items
        } else {
            let mut d_items = d_bar_m[m].slice_rows(n_users, n);
            d_items.add_assign(&spmm(&graphs.item_user, &d_bar_m[m].slice_rows(0, n_users))?);
            model::propagate_item_item(&graphs.item_item_t[m], &d_items, cfg.ii_layers)?
        };

        let pur = &params.purifiers[m];
        let d_hat = if ab.disable_purifier {
            d_ddot
        } else {
            // Ë = E_item ⊙ σ(Ê W2ᵀ + b2)
            let gate = &fw.purifier_gate[m];
            let item_id = params.e_id.slice_rows(n_users, n);
            d_item_id.add_assign(&d_ddot.hadamard(gate));
            let d_pre = DenseMatrix::from_vec(
                graphs.n_items,
                d,
                d_ddot
                    .as_slice()
                    .iter()
                    .zip(item_id.as_slice())
                    .zip(gate.as_slice())
                    .map(|((dd, e), g)| dd * e * g * (1.0 - g))
                    .collect(),
            )?;
            d_pre.add_transpose_mul(&fw.e_hat[m], &mut grads.purifiers[m].w2);
            d_pre.add_column_sums(&mut grads.purifiers[m].b2);
            d_pre.matmul(&pur.w2)?
        };
        // Ê = F W1ᵀ + b1
        d_hat.add_transpose_mul(&features[m], &mut grads.purifiers[m].w1);
        d_hat.add_column_sums(&mut grads.purifiers[m].b1);
    }

    // Ē_id is the layer average over the (symmetric) Laplacian.
    check("grad Ē_id", &d_bar_id)?;
    let d_e_id = layer_average_backward(&graphs.laplacian, &d_bar_id, cfg.ui_layers)?;
    grads.e_id.add_assign(&d_e_id);
    for (r, row) in (n_users..n).enumerate() {
        let src = d_item_id.row(r).to_vec();
        grads.e_id.row_mut(row).iter_mut().zip(&src).for_each(|(a, b)| *a += b);
    }

    let lambda = objective.reg_weight;
    if lambda != 0.0 {
        match objective.reg_scope {
            RegScope::All => {
                let values = params.flatten();
                let mut k = 0;
                grads.for_each_mut(|_, t| {
                    for g in t.iter_mut() {
                        *g += 2.0 * lambda * values[k];
                        k += 1;
                    }
                });
            }
            RegScope::Batch => {
                for r in batch_rows(batch, n_users) {
                    let src = params.e_id.row(r).to_vec();
                    grads.e_id.row_mut(r).iter_mut().zip(&src).for_each(|(g, v)| *g += 2.0 * lambda * v);
                }
            }
        }
    }

    for (name, _, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    Ok(Gradients(grads))
}

/// Objective value only (forward + loss), used by finite-difference checks.
pub fn objective_value(
    params: &ModelParams,
    cfg: &ModelConfig,
    objective: &Objective,
    graphs: &ModelGraphs,
    features: &[DenseMatrix],
    batch: &BprBatch,
) -> Result<LossBreakdown> {
    let fw = model::forward(params, cfg, graphs, features)?;
    total_loss(&fw, batch, params, objective)
}
