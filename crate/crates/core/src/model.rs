//! Parameters and forward pass of the multi-view graph convolutional recommender.
//!
//! Data flow per forward pass:
//!
//! 1. purifier: `Ê_m = F_m W1ᵀ + b1`, `Ë_m = E_item ⊙ σ(Ê_m W2ᵀ + b2)`;
//! 2. user-item view: `Ē_id` is the layer average of `Lᵏ E_id`, `k = 0..=L`;
//! 3. item-item view: `Ē_{i,m} = S_mʲ Ë_m`, then users aggregate their items
//!    through the user-item block of `L`;
//! 4. fuser: a shared gate `P = σ(Ē_id W3ᵀ + b3)`, per-node attention over
//!    modalities `α = softmax_m(q1 · tanh(Ē_m W4ᵀ + b4))`, shared part
//!    `E_s = Σ α_m Ē_m` and `E_mul = E_s + mean_m((Ē_m - E_s) ⊙ P)`;
//! 5. final representations `Ē_id + E_mul`, scored by inner product.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureMatrix, SplitDataset};
use crate::dense::{dot, sigmoid, DenseMatrix};
use crate::error::{Error, Result};
use crate::sparse::{self, SparseGraph};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Feed `Ê_m` onward without the behavior gate.
    pub disable_purifier: bool,
    /// Skip the item-item graphs; propagate modality features on the user-item graph.
    pub disable_item_item_view: bool,
    /// Replace attention fusion with a plain mean over modalities.
    pub disable_behavior_aware_fuser: bool,
}

impl Ablations {
    pub const ALL: [Ablations; 8] = {
        let mut out = [Ablations {
            disable_purifier: false,
            disable_item_item_view: false,
            disable_behavior_aware_fuser: false,
        }; 8];
        let mut k = 0;
        while k < 8 {
            out[k].disable_purifier = k & 1 != 0;
            out[k].disable_item_item_view = k & 2 != 0;
            out[k].disable_behavior_aware_fuser = k & 4 != 0;
            k += 1;
        }
        out
    };

    /// Parses the variant names `full`, `w/o-BG`, `w/o-MV`, `w/o-BA` (joinable with `+`).
    pub fn parse(spec: &str) -> Result<Ablations> {
        let mut out = Ablations::default();
        for part in spec.split('+').map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "full" | "none" | "" => {}
                "w/o-bg" | "wo-bg" | "no-purifier" => out.disable_purifier = true,
                "w/o-mv" | "wo-mv" | "no-item-item" => out.disable_item_item_view = true,
                "w/o-ba" | "wo-ba" | "no-fuser" => out.disable_behavior_aware_fuser = true,
                other => return Err(Error::Config(format!("unknown ablation `{other}`"))),
            }
        }
        Ok(out)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.disable_purifier {
            parts.push("w/o-BG");
        }
        if self.disable_item_item_view {
            parts.push("w/o-MV");
        }
        if self.disable_behavior_aware_fuser {
            parts.push("w/o-BA");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding dimension `d`.
    pub dim: usize,
    pub modalities: Vec<String>,
    /// Raw feature dimension per modality, aligned with `modalities`.
    pub modality_dims: Vec<usize>,
    pub ui_layers: usize,
    pub ii_layers: usize,
    pub knn_k: usize,
    pub ablations: Ablations,
    /// One `(W3, b3)` gate per modality instead of a single shared gate.
    pub per_modality_gate: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            modalities: vec!["visual".into(), "textual".into()],
            modality_dims: vec![4096, 384],
            ui_layers: 2,
            ii_layers: 1,
            knn_k: 15,
            ablations: Ablations::default(),
            per_modality_gate: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.dim == 0 {
            return fail("embedding dim must be at least 1");
        }
        if self.ii_layers == 0 {
            return fail("ii_layers must be at least 1");
        }
        if self.knn_k == 0 {
            return fail("knn_k must be at least 1");
        }
        if self.modalities.is_empty() {
            return fail("at least one modality is required");
        }
        if self.modalities.len() != self.modality_dims.len() {
            return fail("modalities and modality_dims differ in length");
        }
        if self.modality_dims.contains(&0) {
            return fail("modality dims must be positive");
        }
        Ok(())
    }

    pub fn n_gates(&self) -> usize {
        if self.per_modality_gate {
            self.modalities.len()
        } else {
            1
        }
    }

    /// Index of the fusion gate used by modality `m`.
    pub fn gate_of(&self, m: usize) -> usize {
        if self.per_modality_gate {
            m
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurifierParams {
    /// `d × d_m`.
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    /// `d × d`.
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    pub w3: DenseMatrix,
    pub b3: Vec<f64>,
}

/// Every trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `(n_users + n_items) × d`, user rows first.
    pub e_id: DenseMatrix,
    pub purifiers: Vec<PurifierParams>,
    pub gates: Vec<GateParams>,
    pub w4: DenseMatrix,
    pub b4: Vec<f64>,
    pub q1: Vec<f64>,
}

impl ModelParams {
    pub fn zeros_like(other: &ModelParams) -> ModelParams {
        let mut out = other.clone();
        out.for_each_mut(|_, t| t.fill(0.0));
        out
    }

    /// Named views of every tensor in canonical order, with shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mat = |m: &DenseMatrix| vec![m.rows(), m.cols()];
        let mut out: Vec<(String, Vec<usize>, &[f64])> =
            vec![("e_id".into(), mat(&self.e_id), self.e_id.as_slice())];
        for (m, p) in self.purifiers.iter().enumerate() {
            out.push((format!("purifier{m}.w1"), mat(&p.w1), p.w1.as_slice()));
            out.push((format!("purifier{m}.b1"), vec![p.b1.len()], &p.b1));
            out.push((format!("purifier{m}.w2"), mat(&p.w2), p.w2.as_slice()));
            out.push((format!("purifier{m}.b2"), vec![p.b2.len()], &p.b2));
        }
        for (g, p) in self.gates.iter().enumerate() {
            out.push((format!("gate{g}.w3"), mat(&p.w3), p.w3.as_slice()));
            out.push((format!("gate{g}.b3"), vec![p.b3.len()], &p.b3));
        }
        out.push(("attention.w4".into(), mat(&self.w4), self.w4.as_slice()));
        out.push(("attention.b4".into(), vec![self.b4.len()], &self.b4));
        out.push(("attention.q1".into(), vec![self.q1.len()], &self.q1));
        out
    }

    /// Visits every tensor mutably, in the same order as [`ModelParams::tensors`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(usize, &mut [f64])) {
        let mut k = 0;
        let mut visit = |t: &mut [f64]| {
            f(k, t);
            k += 1;
        };
        visit(self.e_id.as_mut_slice());
        for p in &mut self.purifiers {
            visit(p.w1.as_mut_slice());
            visit(&mut p.b1);
            visit(p.w2.as_mut_slice());
            visit(&mut p.b2);
        }
        for g in &mut self.gates {
            visit(g.w3.as_mut_slice());
            visit(&mut g.b3);
        }
        visit(self.w4.as_mut_slice());
        visit(&mut self.b4);
        visit(&mut self.q1);
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, _, t)| t.len()).sum()
    }

    /// Flattened copy of all tensors in canonical order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|(_, _, t)| t.iter().copied()).collect()
    }

    /// Overwrites all tensors from a flat vector produced by [`ModelParams::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(Error::shape(
                "ModelParams::assign_flat",
                format!("{} values for {} parameters", flat.len(), self.n_scalars()),
            ));
        }
        let mut offset = 0;
        self.for_each_mut(|_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, _, t) in self.tensors() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name));
            }
        }
        Ok(())
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Xavier-uniform weights, zero biases. The embedding table uses `fan_in = fan_out = d`.
pub fn init_params(cfg: &ModelConfig, n_users: usize, n_items: usize, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let e_id = xavier(&mut rng, n_users + n_items, d, d, d);
    let purifiers = cfg
        .modality_dims
        .iter()
        .map(|&dm| PurifierParams {
            w1: xavier(&mut rng, d, dm, dm, d),
            b1: vec![0.0; d],
            w2: xavier(&mut rng, d, d, d, d),
            b2: vec![0.0; d],
        })
        .collect();
    let gates = (0..cfg.n_gates())
        .map(|_| GateParams {
            w3: xavier(&mut rng, d, d, d, d),
            b3: vec![0.0; d],
        })
        .collect();
    let w4 = xavier(&mut rng, d, d, d, d);
    let q1 = xavier(&mut rng, 1, d, d, 1).into_vec();
    Ok(ModelParams {
        e_id,
        purifiers,
        gates,
        w4,
        b4: vec![0.0; d],
        q1,
    })
}

/// Constant graph operators used by the forward pass.
#[derive(Clone, Debug)]
pub struct ModelGraphs {
    pub n_users: usize,
    pub n_items: usize,
    /// Symmetric-normalized bipartite Laplacian, `(n_users + n_items)²`.
    pub laplacian: SparseGraph,
    /// User rows / item columns block of the Laplacian.
    pub user_item: SparseGraph,
    pub item_user: SparseGraph,
    /// Normalized KNN item-item graph per modality.
    pub item_item: Vec<SparseGraph>,
    pub item_item_t: Vec<SparseGraph>,
}

impl ModelGraphs {
    pub fn from_parts(
        n_users: usize,
        n_items: usize,
        laplacian: SparseGraph,
        item_item: Vec<SparseGraph>,
    ) -> Result<Self> {
        let n = n_users + n_items;
        if laplacian.n_rows() != n || laplacian.n_cols() != n {
            return Err(Error::shape("ModelGraphs", "laplacian size differs from node count"));
        }
        if item_item.iter().any(|g| g.n_rows() != n_items || g.n_cols() != n_items) {
            return Err(Error::shape("ModelGraphs", "item-item graph size differs from item count"));
        }
        let user_item = laplacian.block(0..n_users, n_users..n)?;
        let item_user = user_item.transpose();
        let item_item_t = item_item.iter().map(SparseGraph::transpose).collect();
        Ok(Self {
            n_users,
            n_items,
            laplacian,
            user_item,
            item_user,
            item_item,
            item_item_t,
        })
    }

    /// Builds the normalized Laplacian from the training edges and one normalized
    /// KNN graph per feature matrix.
    pub fn build(split: &SplitDataset, features: &[FeatureMatrix], knn_k: usize) -> Result<Self> {
        let laplacian = build_laplacian(split)?;
        let item_item = features
            .iter()
            .map(|f| sparse::knn_affinity_graph(f, knn_k).and_then(|g| sparse::normalize_sym_signed(&g)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(split.n_users(), split.n_items(), laplacian, item_item)
    }
}

pub fn build_laplacian(split: &SplitDataset) -> Result<SparseGraph> {
    let adjacency = sparse::build_bipartite_adjacency(&split.train_edges, split.n_users(), split.n_items())?;
    sparse::normalize_sym(&adjacency)
}

/// Intermediate tensors of one forward pass; the backward pass reads them.
#[derive(Clone, Debug)]
pub struct ForwardArtifacts {
    pub n_users: usize,
    /// `Ê_m`, items only.
    pub e_hat: Vec<DenseMatrix>,
    /// Purifier gate `σ(Ê_m W2ᵀ + b2)`; empty when the purifier is disabled.
    pub purifier_gate: Vec<DenseMatrix>,
    /// `Ë_m`, items only.
    pub e_ddot: Vec<DenseMatrix>,
    pub e_bar_id: DenseMatrix,
    /// `Ē_m` over users and items.
    pub e_bar_m: Vec<DenseMatrix>,
    /// `tanh(Ē_m W4ᵀ + b4)`; empty without the fuser.
    pub attn_hidden: Vec<DenseMatrix>,
    /// Per-node modality weights, `N × |M|`.
    pub alpha: DenseMatrix,
    pub e_s: DenseMatrix,
    /// Fusion gates `P`, one per gate parameter set; empty without the fuser.
    pub fusion_gate: Vec<DenseMatrix>,
    pub e_mul: DenseMatrix,
    /// `Ē_id + E_mul`.
    pub final_emb: DenseMatrix,
}

impl ForwardArtifacts {
    pub fn user_embedding(&self, u: usize) -> &[f64] {
        self.final_emb.row(u)
    }

    pub fn item_embedding(&self, i: usize) -> &[f64] {
        self.final_emb.row(self.n_users + i)
    }

    pub fn item_embeddings(&self) -> DenseMatrix {
        self.final_emb.slice_rows(self.n_users, self.final_emb.rows())
    }
}

/// Layer average `(1/(L+1)) Σ_{l=0..L} Lˡ E0`.
pub fn propagate_user_item(laplacian: &SparseGraph, e0: &DenseMatrix, layers: usize) -> Result<DenseMatrix> {
    let mut acc = e0.clone();
    let mut current = e0.clone();
    for _ in 0..layers {
        current = sparse::spmm(laplacian, &current)?;
        acc.add_assign(&current);
    }
    acc.scale(1.0 / (layers + 1) as f64);
    Ok(acc)
}

/// `Sʲ Ë`, no layer averaging.
pub fn propagate_item_item(graph: &SparseGraph, e_ddot: &DenseMatrix, layers: usize) -> Result<DenseMatrix> {
    let mut current = e_ddot.clone();
    for _ in 0..layers {
        current = sparse::spmm(graph, &current)?;
    }
    Ok(current)
}

/// Users' modality rows from their items through the normalized user-item block.
pub fn aggregate_user_modality(user_item: &SparseGraph, item_rows: &DenseMatrix) -> Result<DenseMatrix> {
    sparse::spmm(user_item, item_rows)
}

/// `(Ê_m, gate, Ë_m)` for one modality.
pub fn purify(
    params: &PurifierParams,
    raw: &DenseMatrix,
    item_id: &DenseMatrix,
    disabled: bool,
) -> Result<(DenseMatrix, Option<DenseMatrix>, DenseMatrix)> {
    let e_hat = raw.linear(&params.w1, &params.b1)?;
    if disabled {
        let e_ddot = e_hat.clone();
        return Ok((e_hat, None, e_ddot));
    }
    let gate = e_hat.linear(&params.w2, &params.b2)?.map(sigmoid);
    if gate.shape() != item_id.shape() {
        return Err(Error::shape("purify", "item embeddings do not match gate shape"));
    }
    let e_ddot = item_id.hadamard(&gate);
    Ok((e_hat, Some(gate), e_ddot))
}

/// Output of [`fuse`].
#[derive(Clone, Debug)]
pub struct Fusion {
    pub alpha: DenseMatrix,
    pub attn_hidden: Vec<DenseMatrix>,
    pub e_s: DenseMatrix,
    pub gates: Vec<DenseMatrix>,
    pub e_mul: DenseMatrix,
}

/// Behavior-aware fusion of per-modality features.
pub fn fuse(params: &ModelParams, cfg: &ModelConfig, e_bar_m: &[DenseMatrix], e_bar_id: &DenseMatrix) -> Result<Fusion> {
    let n_mod = e_bar_m.len();
    let (n, d) = e_bar_id.shape();
    let gates = params
        .gates
        .iter()
        .map(|g| Ok(e_bar_id.linear(&g.w3, &g.b3)?.map(sigmoid)))
        .collect::<Result<Vec<_>>>()?;
    let attn_hidden = e_bar_m
        .iter()
        .map(|e| Ok(e.linear(&params.w4, &params.b4)?.map(f64::tanh)))
        .collect::<Result<Vec<_>>>()?;
    let mut alpha = DenseMatrix::zeros(n, n_mod);
    for node in 0..n {
        let scores: Vec<f64> = attn_hidden.iter().map(|h| dot(&params.q1, h.row(node))).collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (m, e) in exps.iter().enumerate() {
            alpha.set(node, m, e / total);
        }
    }
    let mut e_s = DenseMatrix::zeros(n, d);
    for node in 0..n {
        let row = e_s.row_mut(node);
        for (m, e) in e_bar_m.iter().enumerate() {
            let a = alpha.get(node, m);
            for (r, v) in row.iter_mut().zip(e.row(node)) {
                *r += a * v;
            }
        }
    }
    let mut e_mul = e_s.clone();
    let inv_m = 1.0 / n_mod as f64;
    for (m, e) in e_bar_m.iter().enumerate() {
        let gate = &gates[cfg.gate_of(m)];
        for ((out, (&em, &es)), &p) in e_mul
            .as_mut_slice()
            .iter_mut()
            .zip(e.as_slice().iter().zip(e_s.as_slice()))
            .zip(gate.as_slice())
        {
            *out += inv_m * (em - es) * p;
        }
    }
    Ok(Fusion {
        alpha,
        attn_hidden,
        e_s,
        gates,
        e_mul,
    })
}

/// Full forward pass. `features` are the raw item features, one per modality in
/// `cfg.modalities` order.
pub fn forward(
    params: &ModelParams,
    cfg: &ModelConfig,
    graphs: &ModelGraphs,
    features: &[DenseMatrix],
) -> Result<ForwardArtifacts> {
    let (n_users, n_items) = (graphs.n_users, graphs.n_items);
    let n = n_users + n_items;
    if params.e_id.rows() != n || params.e_id.cols() != cfg.dim {
        return Err(Error::shape("forward", "embedding table does not match the graph"));
    }
    if features.len() != cfg.modalities.len() || params.purifiers.len() != features.len() {
        return Err(Error::shape("forward", "modality count mismatch"));
    }
    if params.gates.len() != cfg.n_gates() {
        return Err(Error::shape("forward", "gate count does not match per_modality_gate"));
    }
    if !cfg.ablations.disable_item_item_view && graphs.item_item.len() != features.len() {
        return Err(Error::shape("forward", "one item-item graph per modality is required"));
    }
    let ab = cfg.ablations;
    let item_id = params.e_id.slice_rows(n_users, n);

    let mut e_hat = Vec::new();
    let mut purifier_gate = Vec::new();
    let mut e_ddot = Vec::new();
    for (p, raw) in params.purifiers.iter().zip(features) {
        if raw.rows() != n_items {
            return Err(Error::shape("forward", "feature rows differ from item count"));
        }
        let (h, g, dd) = purify(p, raw, &item_id, ab.disable_purifier)?;
        e_hat.push(h);
        if let Some(g) = g {
            purifier_gate.push(g);
        }
        e_ddot.push(dd);
    }

    let e_bar_id = propagate_user_item(&graphs.laplacian, &params.e_id, cfg.ui_layers)?;

    let mut e_bar_m = Vec::new();
    for (m, dd) in e_ddot.iter().enumerate() {
        let full = if ab.disable_item_item_view {
            let users = aggregate_user_modality(&graphs.user_item, dd)?;
            let stacked = DenseMatrix::vstack(&users, dd)?;
            propagate_user_item(&graphs.laplacian, &stacked, cfg.ui_layers)?
        } else {
            let items = propagate_item_item(&graphs.item_item[m], dd, cfg.ii_layers)?;
            let users = aggregate_user_modality(&graphs.user_item, &items)?;
            DenseMatrix::vstack(&users, &items)?
        };
        e_bar_m.push(full);
    }

    let n_mod = e_bar_m.len();
    let (alpha, attn_hidden, e_s, fusion_gate, e_mul) = if ab.disable_behavior_aware_fuser {
        let mut mean = DenseMatrix::zeros(n, cfg.dim);
        for e in &e_bar_m {
            mean.axpy(1.0 / n_mod as f64, e);
        }
        let alpha = DenseMatrix::from_fn(n, n_mod, |_, _| 1.0 / n_mod as f64);
        (alpha, Vec::new(), mean.clone(), Vec::new(), mean)
    } else {
        let f = fuse(params, cfg, &e_bar_m, &e_bar_id)?;
        (f.alpha, f.attn_hidden, f.e_s, f.gates, f.e_mul)
    };

    let mut final_emb = e_bar_id.clone();
    final_emb.add_assign(&e_mul);
    final_emb.check_finite("final representations")?;

    Ok(ForwardArtifacts {
        n_users,
        e_hat,
        purifier_gate,
        e_ddot,
        e_bar_id,
        e_bar_m,
        attn_hidden,
        alpha,
        e_s,
        fusion_gate,
        e_mul,
        final_emb,
    })
}

/// Inner-product scores of one user against every item row.
pub fn predict_scores(user: &[f64], items: &DenseMatrix) -> Result<Vec<f64>> {
    if user.len() != items.cols() {
        return Err(Error::shape(
            "predict_scores",
            format!("user dim {} vs item dim {}", user.len(), items.cols()),
        ));
    }
    Ok((0..items.rows()).map(|i| dot(user, items.row(i))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(n_mod: usize) -> ModelConfig {
        ModelConfig {
            dim: 3,
            modalities: (0..n_mod).map(|m| format!("m{m}")).collect(),
            modality_dims: vec![2; n_mod],
            ui_layers: 1,
            ii_layers: 1,
            knn_k: 1,
            ablations: Ablations::default(),
            per_modality_gate: false,
        }
    }

    #[test]
    fn xavier_bounds_and_zero_biases() {
        let cfg = ModelConfig {
            modality_dims: vec![8, 8],
            ..ModelConfig::default()
        };
        let p = init_params(&cfg, 700, 900, 1).unwrap();
        let bound = (6.0f64 / 128.0).sqrt();
        assert!((bound - 0.2165).abs() < 1e-4);
        assert!(p.e_id.as_slice().iter().all(|v| v.abs() <= bound));
        let max = p.e_id.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max > 0.99 * bound, "samples should approach the bound, max {max}");
        for pur in &p.purifiers {
            assert!(pur.b1.iter().chain(&pur.b2).all(|&b| b == 0.0));
            let b = (6.0f64 / (8.0 + 64.0)).sqrt();
            assert!(pur.w1.as_slice().iter().all(|v| v.abs() <= b));
        }
        assert!(p.gates[0].b3.iter().chain(&p.b4).all(|&b| b == 0.0));
        assert_eq!(p, init_params(&cfg, 700, 900, 1).unwrap());
        assert_ne!(p, init_params(&cfg, 700, 900, 2).unwrap());
    }

    #[test]
    fn zero_gate_weights_halve_embeddings() {
        let p = PurifierParams {
            w1: DenseMatrix::from_fn(3, 2, |r, c| (r + c) as f64),
            b1: vec![0.1; 3],
            w2: DenseMatrix::zeros(3, 3),
            b2: vec![0.0; 3],
        };
        let raw = DenseMatrix::from_fn(2, 2, |r, c| (r * 2 + c) as f64);
        let ids = DenseMatrix::from_fn(2, 3, |r, c| r as f64 - c as f64);
        let (_, _, dd) = purify(&p, &raw, &ids, false).unwrap();
        assert_eq!(dd, ids.scaled(0.5));
        let saturated = PurifierParams {
            b2: vec![50.0; 3],
            ..p
        };
        let (_, _, dd) = purify(&saturated, &raw, &ids, false).unwrap();
        assert!(dd.max_abs_diff(&ids) < 1e-12);
    }

    #[test]
    fn propagation_edge_cases() {
        let l = sparse::normalize_sym(&sparse::build_bipartite_adjacency(&[(0, 0)], 1, 1).unwrap()).unwrap();
        let e0 = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(propagate_user_item(&l, &e0, 0).unwrap(), e0);
        let out = propagate_user_item(&l, &e0, 1).unwrap();
        assert_eq!(out.row(0), &[2.0, 0.5]);
        assert_eq!(out.row(1), &[2.0, 0.5]);
        let zero = DenseMatrix::zeros(2, 2);
        assert_eq!(propagate_user_item(&l, &zero, 3).unwrap(), zero);
        assert!(propagate_user_item(&l, &DenseMatrix::zeros(3, 2), 1).is_err());
    }

    #[test]
    fn item_item_layers_compose() {
        let g = SparseGraph::from_triplets(3, 3, &[(0, 0, 0.5), (0, 2, 0.5), (1, 1, 1.0), (2, 0, 0.3), (2, 2, 0.7)]).unwrap();
        let x = DenseMatrix::from_fn(3, 2, |r, c| (r as f64) - (c as f64) * 0.5);
        assert_eq!(propagate_item_item(&SparseGraph::identity(3), &x, 1).unwrap(), x);
        let twice = propagate_item_item(&g, &propagate_item_item(&g, &x, 1).unwrap(), 1).unwrap();
        assert_eq!(propagate_item_item(&g, &x, 2).unwrap(), twice);
    }

    #[test]
    fn user_aggregation_coefficients() {
        // user 0 holds items 0 and 1, each of degree 1
        let l = sparse::normalize_sym(&sparse::build_bipartite_adjacency(&[(0, 0), (0, 1)], 1, 2).unwrap()).unwrap();
        let block = l.block(0..1, 1..3).unwrap();
        let items = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let users = aggregate_user_modality(&block, &items).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((users.get(0, 0) - s).abs() < 1e-15);
        assert!((users.get(0, 1) - 2.0 * s).abs() < 1e-15);
    }

    #[test]
    fn identical_modalities_fuse_to_themselves() {
        let cfg = tiny_cfg(2);
        let params = init_params(&cfg, 1, 2, 5).unwrap();
        let e = DenseMatrix::from_fn(3, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.0));
        let id = DenseMatrix::from_fn(3, 3, |r, c| (r * c) as f64 * 0.1);
        let f = fuse(&params, &cfg, &[e.clone(), e.clone()], &id).unwrap();
        assert!(f.alpha.as_slice().iter().all(|&a| (a - 0.5).abs() < 1e-15));
        assert!(f.e_s.max_abs_diff(&e) < 1e-15);
        assert!(f.e_mul.max_abs_diff(&e) < 1e-15);
    }

    #[test]
    fn single_modality_and_zero_gate() {
        let cfg = tiny_cfg(1);
        let mut params = init_params(&cfg, 1, 2, 5).unwrap();
        params.gates[0].w3 = DenseMatrix::zeros(3, 3);
        let e = DenseMatrix::from_fn(3, 3, |r, c| (r + 2 * c) as f64);
        let id = DenseMatrix::from_fn(3, 3, |r, c| (r * c) as f64);
        let f = fuse(&params, &cfg, &[e.clone()], &id).unwrap();
        assert!(f.alpha.as_slice().iter().all(|&a| a == 1.0));
        assert_eq!(f.e_mul, e);
        assert!(f.gates[0].as_slice().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn scores_are_inner_products() {
        let items = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap();
        assert_eq!(predict_scores(&[0.0, 0.0], &items).unwrap(), vec![0.0, 0.0]);
        assert_eq!(predict_scores(&[1.0, 2.0], &items).unwrap()[0], 5.0);
        assert!(predict_scores(&[1.0], &items).is_err());
    }

    #[test]
    fn ablation_names() {
        let a = Ablations::parse("w/o-BG+w/o-BA").unwrap();
        assert!(a.disable_purifier && a.disable_behavior_aware_fuser && !a.disable_item_item_view);
        assert_eq!(a.label(), "w/o-BG+w/o-BA");
        assert_eq!(Ablations::parse("full").unwrap(), Ablations::default());
        assert!(Ablations::parse("w/o-XY").is_err());
        assert_eq!(Ablations::ALL.iter().collect::<std::collections::HashSet<_>>().len(), 8);
    }
}
