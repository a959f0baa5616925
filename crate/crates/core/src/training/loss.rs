//! BPR, contrastive and weight-decay terms, each with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::dense::{dot, sigmoid, DenseMatrix};
use crate::error::{Error, Result};

/// How the contrastive softmax normalizes each anchor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClDenominator {
    /// InfoNCE over in-batch negatives: `Σ_v exp(x_a · y_v / τ)`.
    #[default]
    CrossPair,
    /// Sum of every anchor's own positive pair: `Σ_v exp(x_v · y_v / τ)`.
    Literal,
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean of `-ln σ(pos - neg)` over the batch.
pub fn bpr_loss(pos: &[f64], neg: &[f64]) -> f64 {
    assert_eq!(pos.len(), neg.len(), "bpr_loss: score vectors differ in length");
    if pos.is_empty() {
        return 0.0;
    }
    let total: f64 = pos.iter().zip(neg).map(|(p, n)| softplus(-(p - n))).sum();
    total / pos.len() as f64
}

/// `d loss / d(pos - neg)` for each triple of [`bpr_loss`].
pub fn bpr_margin_grad(pos: &[f64], neg: &[f64]) -> Vec<f64> {
    let scale = 1.0 / pos.len().max(1) as f64;
    pos.iter()
        .zip(neg)
        .map(|(p, n)| -sigmoid(-(p - n)) * scale)
        .collect()
}

const NORM_FLOOR: f64 = 1e-12;

fn normalize_rows(x: &DenseMatrix) -> (DenseMatrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let n = dot(x.row(r), x.row(r)).sqrt().max(NORM_FLOOR);
        out.row_mut(r).iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
fn normalize_rows_backward(unit: &DenseMatrix, norms: &[f64], grad_unit: &DenseMatrix) -> DenseMatrix {
    let mut out = grad_unit.clone();
    for r in 0..unit.rows() {
        let u = unit.row(r);
        let along = dot(u, grad_unit.row(r));
        let raw_norm = norms[r];
        for (o, &ui) in out.row_mut(r).iter_mut().zip(u) {
            *o = (*o - ui * along) / raw_norm;
        }
    }
    out
}

fn log_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let softmax = exps.iter().map(|e| e / total).collect();
    (max + total.ln(), softmax)
}

/// One contrastive family (users or items): anchors `x_a` (fused multimodal rows)
/// paired with `y_a` (behavior rows). Returns the anchor-averaged loss and its
/// gradients w.r.t. `x` and `y`.
pub fn info_nce(
    x: &DenseMatrix,
    y: &DenseMatrix,
    tau: f64,
    mode: ClDenominator,
    normalize: bool,
) -> Result<(f64, DenseMatrix, DenseMatrix)> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if x.rows() == 0 {
        return Err(Error::InvalidData("contrastive loss over an empty batch".into()));
    }
    if x.shape() != y.shape() {
        return Err(Error::shape("info_nce", "anchor and positive rows differ in shape"));
    }
    let n = x.rows();
    let (xu, xn, yu, yn) = if normalize {
        let (xu, xn) = normalize_rows(x);
        let (yu, yn) = normalize_rows(y);
        (xu, Some(xn), yu, Some(yn))
    } else {
        (x.clone(), None, y.clone(), None)
    };

    let inv_n = 1.0 / n as f64;
    let mut gx = DenseMatrix::zeros(n, x.cols());
    let mut gy = DenseMatrix::zeros(n, x.cols());
    let mut loss = 0.0;
    match mode {
        ClDenominator::CrossPair => {
            for a in 0..n {
                let logits: Vec<f64> = (0..n).map(|b| dot(xu.row(a), yu.row(b)) / tau).collect();
                let (lse, soft) = log_sum_exp(&logits);
                loss += (lse - logits[a]) * inv_n;
                for (b, &p) in soft.iter().enumerate() {
                    let g = (p - if a == b { 1.0 } else { 0.0 }) * inv_n / tau;
                    if g == 0.0 {
                        continue;
                    }
                    for k in 0..x.cols() {
                        let (xa, yb) = (xu.get(a, k), yu.get(b, k));
                        gx.row_mut(a)[k] += g * yb;
                        gy.row_mut(b)[k] += g * xa;
                    }
                }
            }
        }
        ClDenominator::Literal => {
            let own: Vec<f64> = (0..n).map(|a| dot(xu.row(a), yu.row(a)) / tau).collect();
            let (lse, soft) = log_sum_exp(&own);
            loss = lse - own.iter().sum::<f64>() * inv_n;
            for (a, &p) in soft.iter().enumerate() {
                let g = (p - inv_n) / tau;
                for k in 0..x.cols() {
                    let (xa, ya) = (xu.get(a, k), yu.get(a, k));
                    gx.row_mut(a)[k] += g * ya;
                    gy.row_mut(a)[k] += g * xa;
                }
            }
        }
    }
    if let (Some(xn), Some(yn)) = (xn, yn) {
        gx = normalize_rows_backward(&xu, &xn, &gx);
        gy = normalize_rows_backward(&yu, &yn, &gy);
    }
    Ok((loss, gx, gy))
}

/// Result of [`contrastive_loss`]: the scalar and its gradients w.r.t. the full
/// `E_mul` and `Ē_id` node matrices.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_mul: DenseMatrix,
    pub grad_bar_id: DenseMatrix,
}

/// User term over `user_ids` plus item term over `item_ids`, each averaged over
/// its anchors. Ids index the node matrices directly (items already offset by
/// `n_users`), and must be unique.
pub fn contrastive_loss(
    e_mul: &DenseMatrix,
    e_bar_id: &DenseMatrix,
    user_nodes: &[usize],
    item_nodes: &[usize],
    tau: f64,
    mode: ClDenominator,
    normalize: bool,
) -> Result<ContrastiveOutput> {
    if user_nodes.is_empty() && item_nodes.is_empty() {
        return Err(Error::InvalidData("contrastive loss over an empty batch".into()));
    }
    let (n, d) = e_mul.shape();
    let mut grad_mul = DenseMatrix::zeros(n, d);
    let mut grad_bar_id = DenseMatrix::zeros(n, d);
    let mut loss = 0.0;
    for nodes in [user_nodes, item_nodes] {
        if nodes.is_empty() {
            continue;
        }
        let gather = |m: &DenseMatrix| {
            DenseMatrix::from_fn(nodes.len(), d, |r, c| m.get(nodes[r], c))
        };
        let (l, gx, gy) = info_nce(&gather(e_mul), &gather(e_bar_id), tau, mode, normalize)?;
        loss += l;
        for (r, &node) in nodes.iter().enumerate() {
            grad_mul.row_mut(node).iter_mut().zip(gx.row(r)).for_each(|(a, b)| *a += b);
            grad_bar_id.row_mut(node).iter_mut().zip(gy.row(r)).for_each(|(a, b)| *a += b);
        }
    }
    Ok(ContrastiveOutput {
        loss,
        grad_mul,
        grad_bar_id,
    })
}
