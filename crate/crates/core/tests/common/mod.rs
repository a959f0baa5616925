//! Independent oracles and fixtures shared by the integration tests.
//!
//! Everything here is written with plain nested loops over `Vec<Vec<f64>>`
//! and never calls the graph or model code under test.
#![allow(dead_code)]

use mgcn::dataset::{FeatureMatrix, InteractionDataset, SplitDataset};
use mgcn::dense::DenseMatrix;
use mgcn::model::{self, Ablations, ModelConfig, ModelGraphs, ModelParams};
use mgcn::training::{objective_value, BprBatch, Objective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_mat(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

pub fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let inner = b.len();
    let cols = if inner == 0 { 0 } else { b[0].len() };
    let mut out = zeros(a.len(), cols);
    for i in 0..a.len() {
        for j in 0..cols {
            let mut s = 0.0;
            for k in 0..inner {
                s += a[i][k] * b[k][j];
            }
            out[i][j] = s;
        }
    }
    out
}

/// `D^{-1/2} A D^{-1/2}` with row-sum degrees; non-positive degree → zero row/col.
pub fn normalize(a: &Mat) -> Mat {
    let deg: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
    let inv: Vec<f64> = deg.iter().map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 }).collect();
    let mut out = a.clone();
    for i in 0..a.len() {
        for j in 0..a.len() {
            out[i][j] = a[i][j] * inv[i] * inv[j];
        }
    }
    out
}

/// `[[0, R], [Rᵀ, 0]]`.
pub fn bipartite(edges: &[(usize, usize)], n_users: usize, n_items: usize) -> Mat {
    let n = n_users + n_items;
    let mut a = zeros(n, n);
    for &(u, i) in edges {
        a[u][n_users + i] = 1.0;
        a[n_users + i][u] = 1.0;
    }
    a
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab / (aa * bb).sqrt()).clamp(-1.0, 1.0)
}

/// Brute-force KNN affinity: self with weight 1, then `k - 1` picks of the most
/// similar remaining item (smallest index among equals), weighted by cosine.
pub fn knn(rows: &[Vec<f32>], k: usize) -> Mat {
    let n = rows.len();
    let mut out = zeros(n, n);
    for i in 0..n {
        out[i][i] = 1.0;
        let mut taken = vec![false; n];
        taken[i] = true;
        for _ in 0..(k.min(n) - 1) {
            let mut best: Option<(usize, f64)> = None;
            for j in 0..n {
                if taken[j] {
                    continue;
                }
                let s = cosine(&rows[i], &rows[j]);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((j, s));
                }
            }
            let (j, s) = best.unwrap();
            taken[j] = true;
            out[i][j] = s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn affine(w: &DenseMatrix, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| {
            let mut s = b[r];
            for c in 0..w.cols() {
                s += w.get(r, c) * x[c];
            }
            s
        })
        .collect()
}

fn layer_mean(l: &Mat, e0: &Mat, layers: usize) -> Mat {
    let mut acc = e0.clone();
    let mut cur = e0.clone();
    for _ in 0..layers {
        cur = matmul(l, &cur);
        for (a, c) in acc.iter_mut().zip(&cur) {
            for (x, y) in a.iter_mut().zip(c) {
                *x += y;
            }
        }
    }
    let s = 1.0 / (layers + 1) as f64;
    acc.iter().map(|r| r.iter().map(|v| v * s).collect()).collect()
}

/// Scalar-loop evaluation of the whole model, building its own graphs from the
/// edges and raw features. Returns the final node representations.
pub fn forward_oracle(
    params: &ModelParams,
    cfg: &ModelConfig,
    edges: &[(usize, usize)],
    n_users: usize,
    n_items: usize,
    features: &[Vec<Vec<f32>>],
) -> Mat {
    let n = n_users + n_items;
    let d = cfg.dim;
    let ab = cfg.ablations;
    let lap = normalize(&bipartite(edges, n_users, n_items));
    let e_id = to_mat(&params.e_id);
    let e_bar_id = layer_mean(&lap, &e_id, cfg.ui_layers);

    let mut e_bar_m: Vec<Mat> = Vec::new();
    for (m, feats) in features.iter().enumerate() {
        let p = &params.purifiers[m];
        let mut e_ddot = zeros(n_items, d);
        for i in 0..n_items {
            let x: Vec<f64> = feats[i].iter().map(|&v| f64::from(v)).collect();
            let hat = affine(&p.w1, &p.b1, &x);
            if ab.disable_purifier {
                e_ddot[i] = hat;
            } else {
                let g = affine(&p.w2, &p.b2, &hat);
                for c in 0..d {
                    e_ddot[i][c] = e_id[n_users + i][c] * sigmoid(g[c]);
                }
            }
        }
        let full = if ab.disable_item_item_view {
            let mut stacked = zeros(n, d);
            for u in 0..n_users {
                for i in 0..n_items {
                    for c in 0..d {
                        stacked[u][c] += lap[u][n_users + i] * e_ddot[i][c];
                    }
                }
            }
            for i in 0..n_items {
                stacked[n_users + i] = e_ddot[i].clone();
            }
            layer_mean(&lap, &stacked, cfg.ui_layers)
        } else {
            let s = normalize(&knn(feats, cfg.knn_k));
            let mut items = e_ddot;
            for _ in 0..cfg.ii_layers {
                items = matmul(&s, &items);
            }
            let mut full = zeros(n, d);
            for u in 0..n_users {
                for i in 0..n_items {
                    for c in 0..d {
                        full[u][c] += lap[u][n_users + i] * items[i][c];
                    }
                }
            }
            for i in 0..n_items {
                full[n_users + i] = items[i].clone();
            }
            full
        };
        e_bar_m.push(full);
    }

    let n_mod = e_bar_m.len();
    let mut out = e_bar_id.clone();
    for v in 0..n {
        let mut e_mul = vec![0.0; d];
        if ab.disable_behavior_aware_fuser {
            for e in &e_bar_m {
                for c in 0..d {
                    e_mul[c] += e[v][c] / n_mod as f64;
                }
            }
        } else {
            let scores: Vec<f64> = e_bar_m
                .iter()
                .map(|e| {
                    let h = affine(&params.w4, &params.b4, &e[v]);
                    (0..d).map(|c| params.q1[c] * h[c].tanh()).sum()
                })
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
            let mut e_s = vec![0.0; d];
            for (m, e) in e_bar_m.iter().enumerate() {
                for c in 0..d {
                    e_s[c] += alpha[m] * e[v][c];
                }
            }
            e_mul = e_s.clone();
            for (m, e) in e_bar_m.iter().enumerate() {
                let g = &params.gates[if cfg.per_modality_gate { m } else { 0 }];
                let pre = affine(&g.w3, &g.b3, &e_bar_id[v]);
                for c in 0..d {
                    e_mul[c] += (e[v][c] - e_s[c]) * sigmoid(pre[c]) / n_mod as f64;
                }
            }
        }
        for c in 0..d {
            out[v][c] += e_mul[c];
        }
    }
    out
}

/// Full-sort ranking (score desc, id asc) with masked items removed.
pub fn brute_rank(scores: &[f64], mask: &[usize]) -> Vec<usize> {
    let mut items: Vec<usize> = (0..scores.len()).filter(|i| !mask.contains(i)).collect();
    for a in 0..items.len() {
        for b in a + 1..items.len() {
            let (x, y) = (items[a], items[b]);
            if scores[y] > scores[x] || (scores[y] == scores[x] && y < x) {
                items.swap(a, b);
            }
        }
    }
    items
}

pub fn brute_recall(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

pub fn brute_ndcg(ranked: &[usize], relevant: &[usize], k: usize) -> f64 {
    let mut dcg = 0.0;
    for (pos, i) in ranked.iter().take(k).enumerate() {
        if relevant.contains(i) {
            dcg += 1.0 / ((pos + 2) as f64).log2();
        }
    }
    let mut ideal = 0.0;
    for pos in 0..relevant.len().min(k) {
        ideal += 1.0 / ((pos + 2) as f64).log2();
    }
    dcg / ideal
}

/// A small random dataset with graphs and matching model configuration.
pub struct Tiny {
    pub split: SplitDataset,
    pub edges: Vec<(usize, usize)>,
    pub features: Vec<FeatureMatrix>,
    pub raw: Vec<Vec<Vec<f32>>>,
    pub dense: Vec<DenseMatrix>,
    pub graphs: ModelGraphs,
    pub cfg: ModelConfig,
}

pub fn tiny(seed: u64, n_users: usize, n_items: usize, dim: usize, modality_dims: &[usize], knn_k: usize) -> Tiny {
    let mut r = rng(seed);
    let mut edges = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if r.random_bool(0.35) {
                edges.push((u, i));
            }
        }
        if !edges.iter().any(|&(v, _)| v == u) {
            edges.push((u, r.random_range(0..n_items)));
        }
    }
    for i in 0..n_items {
        if !edges.iter().any(|&(_, j)| j == i) {
            edges.push((r.random_range(0..n_users), i));
        }
    }
    edges.sort_unstable();
    let base = InteractionDataset::new(
        (0..n_users).map(|u| format!("u{u}")).collect(),
        (0..n_items).map(|i| format!("i{i}")).collect(),
        edges.clone(),
    )
    .unwrap();
    let split = SplitDataset::from_parts(base, edges.clone(), vec![], vec![], seed, [1.0, 0.0, 0.0]).unwrap();
    let raw: Vec<Vec<Vec<f32>>> = modality_dims
        .iter()
        .map(|&dm| {
            (0..n_items)
                .map(|_| (0..dm).map(|_| r.random_range(-1.0f32..1.0)).collect())
                .collect()
        })
        .collect();
    let features: Vec<FeatureMatrix> = raw
        .iter()
        .enumerate()
        .map(|(m, rows)| {
            FeatureMatrix::new(format!("m{m}"), n_items, rows[0].len(), rows.concat()).unwrap()
        })
        .collect();
    let dense = features.iter().map(FeatureMatrix::to_dense).collect();
    let graphs = ModelGraphs::build(&split, &features, knn_k).unwrap();
    let cfg = ModelConfig {
        dim,
        modalities: (0..modality_dims.len()).map(|m| format!("m{m}")).collect(),
        modality_dims: modality_dims.to_vec(),
        ui_layers: 2,
        ii_layers: 1,
        knn_k,
        ablations: Ablations::default(),
        per_modality_gate: false,
    };
    Tiny {
        split,
        edges,
        features,
        raw,
        dense,
        graphs,
        cfg,
    }
}

/// Parameters with every tensor (biases included) drawn uniformly from `±scale`,
/// so that no gradient path is trivially zero.
pub fn random_params(cfg: &ModelConfig, n_users: usize, n_items: usize, seed: u64, scale: f64) -> ModelParams {
    let mut p = model::init_params(cfg, n_users, n_items, seed).unwrap();
    let mut r = rng(seed ^ 0xa5a5);
    p.for_each_mut(|_, t| t.iter_mut().for_each(|v| *v = r.random_range(-scale..scale)));
    p
}

/// Relative error with a small floor so coordinates whose gradient is
/// (numerically) zero are compared absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of the objective.
pub fn fd_max_rel_err(
    params: &ModelParams,
    analytic: &ModelParams,
    cfg: &ModelConfig,
    objective: &Objective,
    tiny: &Tiny,
    batch: &BprBatch,
    h: f64,
) -> (f64, usize) {
    let flat = params.flatten();
    let grad = analytic.flatten();
    let mut probe = params.clone();
    let mut worst = (0.0, 0);
    for k in 0..flat.len() {
        let mut eval = |delta: f64| {
            let mut x = flat.clone();
            x[k] += delta;
            probe.assign_flat(&x).unwrap();
            objective_value(&probe, cfg, objective, &tiny.graphs, &tiny.dense, batch)
                .unwrap()
                .total
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let e = rel_err(grad[k], numeric);
        if e > worst.0 {
            worst = (e, k);
        }
    }
    worst
}
