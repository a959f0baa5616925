//! Compressed-sparse-row graphs and the kernels that act on them.
//!
//! Two kinds of graph flow through the model: the symmetric-normalized
//! user-item bipartite graph (users occupy rows `[0, n_users)`, items the
//! rows after them) and one KNN-pruned item-item cosine affinity graph per
//! modality.

use std::io::{Read, Write};

use log::warn;
use rayon::prelude::*;

use crate::dataset::FeatureMatrix;
use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

const GRAPH_MAGIC: &[u8; 4] = b"MGSG";
const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SparseGraph {
    n_rows: usize,
    n_cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseGraph {
    /// Builds a graph from raw CSR arrays, validating every structural invariant.
    pub fn from_csr(
        n_rows: usize,
        n_cols: usize,
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        let bad = |msg: String| Err(Error::InvalidData(format!("csr: {msg}")));
        if row_offsets.len() != n_rows + 1 {
            return bad(format!("{} row offsets for {n_rows} rows", row_offsets.len()));
        }
        if row_offsets[0] != 0 || row_offsets[n_rows] != values.len() {
            return bad("row offsets must start at 0 and end at nnz".into());
        }
        if col_indices.len() != values.len() {
            return bad("column/value length mismatch".into());
        }
        for r in 0..n_rows {
            let (lo, hi) = (row_offsets[r], row_offsets[r + 1]);
            if lo > hi {
                return bad(format!("row offsets decrease at row {r}"));
            }
            let cols = &col_indices[lo..hi];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("row {r} columns not strictly increasing"));
            }
            if cols.last().is_some_and(|&c| c >= n_cols) {
                return bad(format!("row {r} column out of range"));
            }
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sparse graph value {pos}")));
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_offsets,
            col_indices,
            values,
        })
    }

    /// Builds a graph from `(row, col, value)` triplets; duplicate coordinates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        let mut sorted = triplets.to_vec();
        for &(r, c, _) in &sorted {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidData(format!(
                    "entry ({r}, {c}) outside a {n_rows}x{n_cols} graph"
                )));
            }
        }
        sorted.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_offsets = vec![0usize; n_rows + 1];
        let mut col_indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..n_rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Self::from_csr(n_rows, n_cols, row_offsets, col_indices, values)
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    #[inline]
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column ids and weights of one row.
    pub fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        (&self.col_indices[lo..hi], &self.values[lo..hi])
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let (cols, vals) = self.row(r);
        cols.binary_search(&c).map_or(0.0, |p| vals[p])
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    pub fn transpose(&self) -> SparseGraph {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_indices {
            counts[c + 1] += 1;
        }
        for c in 0..self.n_cols {
            counts[c + 1] += counts[c];
        }
        let row_offsets = counts.clone();
        let mut next = counts;
        let mut col_indices = vec![0usize; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // Rows are visited in increasing order, so every transposed row comes out sorted.
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                let slot = next[c];
                col_indices[slot] = r;
                values[slot] = v;
                next[c] += 1;
            }
        }
        SparseGraph {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_offsets,
            col_indices,
            values,
        }
    }

    /// The sub-block `rows × cols`, with indices re-based to the block origin.
    pub fn block(
        &self,
        rows: std::ops::Range<usize>,
        cols: std::ops::Range<usize>,
    ) -> Result<SparseGraph> {
        if rows.end > self.n_rows || cols.end > self.n_cols {
            return Err(Error::shape("SparseGraph::block", "range out of bounds"));
        }
        let mut row_offsets = vec![0usize];
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        for r in rows.clone() {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if cols.contains(&c) {
                    col_indices.push(c - cols.start);
                    values.push(v);
                }
            }
            row_offsets.push(values.len());
        }
        Ok(SparseGraph {
            n_rows: rows.len(),
            n_cols: cols.len(),
            row_offsets,
            col_indices,
            values,
        })
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.n_rows, self.n_cols);
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(GRAPH_MAGIC)?;
        w.write_all(&GRAPH_VERSION.to_le_bytes())?;
        for n in [self.n_rows, self.n_cols, self.nnz()] {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        for &o in &self.row_offsets {
            w.write_all(&(o as u64).to_le_bytes())?;
        }
        for &c in &self.col_indices {
            w.write_all(&(c as u64).to_le_bytes())?;
        }
        for &v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<SparseGraph> {
        let io = |e| Error::io("reading sparse graph", e);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != GRAPH_MAGIC {
            return Err(Error::InvalidData("sparse graph: bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(io)?;
        if u32::from_le_bytes(b4) != GRAPH_VERSION {
            return Err(Error::InvalidData("sparse graph: unsupported version".into()));
        }
        let mut b8 = [0u8; 8];
        let mut next_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n_rows = next_u64(&mut r)? as usize;
        let n_cols = next_u64(&mut r)? as usize;
        let nnz = next_u64(&mut r)? as usize;
        let row_offsets = (0..=n_rows)
            .map(|_| next_u64(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let col_indices = (0..nnz)
            .map(|_| next_u64(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let values = (0..nnz)
            .map(|_| next_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        SparseGraph::from_csr(n_rows, n_cols, row_offsets, col_indices, values)
    }
}

/// The `(n_users + n_items)²` adjacency `[[0, R], [Rᵀ, 0]]` with unit weights.
pub fn build_bipartite_adjacency(
    train_edges: &[(usize, usize)],
    n_users: usize,
    n_items: usize,
) -> Result<SparseGraph> {
    let mut triplets = Vec::with_capacity(2 * train_edges.len());
    for &(u, i) in train_edges {
        if u >= n_users || i >= n_items {
            return Err(Error::InvalidData(format!(
                "edge ({u}, {i}) outside {n_users} users / {n_items} items"
            )));
        }
        triplets.push((u, n_users + i, 1.0));
        triplets.push((n_users + i, u, 1.0));
    }
    let n = n_users + n_items;
    let g = SparseGraph::from_triplets(n, n, &triplets)?;
    if g.values.iter().any(|&v| v != 1.0) {
        return Err(Error::InvalidData("duplicate training edge".into()));
    }
    Ok(g)
}

/// `D^{-1/2} G D^{-1/2}` with `D` the diagonal of row sums; rows of zero degree become zero.
///
/// Negative weights are rejected.
pub fn normalize_sym(g: &SparseGraph) -> Result<SparseGraph> {
    if let Some(v) = g.values.iter().find(|&&v| v < 0.0) {
        return Err(Error::InvalidData(format!(
            "normalize_sym: negative weight {v}"
        )));
    }
    normalize_with_degrees(g)
}

/// Like [`normalize_sym`], but tolerates negative weights (cosine affinities may be
/// negative). Any node whose degree is not positive has its row and column zeroed.
pub fn normalize_sym_signed(g: &SparseGraph) -> Result<SparseGraph> {
    normalize_with_degrees(g)
}

fn normalize_with_degrees(g: &SparseGraph) -> Result<SparseGraph> {
    if g.n_rows != g.n_cols {
        return Err(Error::shape(
            "normalize_sym",
            format!("graph is {}x{}", g.n_rows, g.n_cols),
        ));
    }
    let degrees = g.row_sums();
    let inv_sqrt: Vec<f64> = degrees
        .iter()
        .enumerate()
        .map(|(node, &d)| {
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                if d < 0.0 {
                    warn!("node {node} has negative degree {d}; zeroing its row");
                }
                0.0
            }
        })
        .collect();
    let mut out = g.clone();
    for r in 0..g.n_rows {
        let (lo, hi) = (g.row_offsets[r], g.row_offsets[r + 1]);
        for p in lo..hi {
            let c = g.col_indices[p];
            out.values[p] = g.values[p] * inv_sqrt[r] * inv_sqrt[c];
        }
    }
    Ok(out)
}

/// Sparse × dense product.
pub fn spmm(g: &SparseGraph, x: &DenseMatrix) -> Result<DenseMatrix> {
    if g.n_cols != x.rows() {
        return Err(Error::shape(
            "spmm",
            format!(
                "graph {}x{} times dense {}x{}",
                g.n_rows,
                g.n_cols,
                x.rows(),
                x.cols()
            ),
        ));
    }
    let d = x.cols();
    let mut out = DenseMatrix::zeros(g.n_rows, d);
    out.as_mut_slice()
        .par_chunks_mut(d.max(1))
        .enumerate()
        .for_each(|(r, y)| {
            if r >= g.n_rows {
                return;
            }
            let (cols, vals) = g.row(r);
            for (&c, &w) in cols.iter().zip(vals) {
                for (yj, xj) in y.iter_mut().zip(x.row(c)) {
                    *yj += w * xj;
                }
            }
        });
    Ok(out)
}

/// Cosine KNN graph over item feature rows.
///
/// Each row keeps itself (cosine 1) plus the `k - 1` most similar other items,
/// ties broken toward the smaller item index. Weights are raw cosine values
/// clamped to `[-1, 1]`; normalization is left to the caller.
pub fn knn_affinity_graph(features: &FeatureMatrix, k: usize) -> Result<SparseGraph> {
    if k == 0 {
        return Err(Error::Config("knn k must be at least 1".into()));
    }
    let n = features.n_items();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| features.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect();
    let sq_norms: Vec<f64> = rows.iter().map(|r| crate::dense::dot(r, r)).collect();
    if let Some(item) = sq_norms.iter().position(|&v| v == 0.0) {
        return Err(Error::InvalidData(format!(
            "item {item} has an all-zero {} feature row; cosine similarity undefined",
            features.modality()
        )));
    }
    let keep = k.min(n);
    let neighbours: Vec<Vec<(usize, f64)>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let mut sims: Vec<(usize, f64)> = (0..n)
                .filter(|&b| b != a)
                .map(|b| {
                    // One square root of the product keeps identical rows at exactly 1.
                    let s = crate::dense::dot(&rows[a], &rows[b]) / (sq_norms[a] * sq_norms[b]).sqrt();
                    (b, s.clamp(-1.0, 1.0))
                })
                .collect();
            sims.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
            sims.truncate(keep - 1);
            sims.push((a, 1.0));
            sims.sort_by_key(|&(b, _)| b);
            sims
        })
        .collect();

    let mut row_offsets = Vec::with_capacity(n + 1);
    row_offsets.push(0);
    let mut col_indices = Vec::with_capacity(n * keep);
    let mut values = Vec::with_capacity(n * keep);
    for row in neighbours {
        for (b, s) in row {
            col_indices.push(b);
            values.push(s);
        }
        row_offsets.push(values.len());
    }
    SparseGraph::from_csr(n, n, row_offsets, col_indices, values)
}
