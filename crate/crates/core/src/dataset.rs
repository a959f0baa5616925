//! Interaction logs, modality feature matrices, per-user splits and the
//! synthetic benchmark generator.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"MGFM";
const FEATURE_VERSION: u32 = 1;

pub type Edge = (usize, usize);

/// Deduplicated user-item interactions over dense id spaces.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub n_users: usize,
    pub n_items: usize,
    pub user_labels: Vec<String>,
    pub item_labels: Vec<String>,
    pub edges: Vec<Edge>,
    /// Repeated `(user, item)` lines dropped during ingestion.
    pub duplicates_dropped: usize,
}

impl InteractionDataset {
    /// Builds a dataset from labelled edges, checking every invariant.
    pub fn new(user_labels: Vec<String>, item_labels: Vec<String>, edges: Vec<Edge>) -> Result<Self> {
        let ds = Self {
            n_users: user_labels.len(),
            n_items: item_labels.len(),
            user_labels,
            item_labels,
            edges,
            duplicates_dropped: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.edges.len());
        let mut user_seen = vec![false; self.n_users];
        let mut item_seen = vec![false; self.n_items];
        for &(u, i) in &self.edges {
            if u >= self.n_users || i >= self.n_items {
                return Err(Error::InvalidData(format!("edge ({u}, {i}) out of range")));
            }
            if !seen.insert((u, i)) {
                return Err(Error::InvalidData(format!("duplicate edge ({u}, {i})")));
            }
            user_seen[u] = true;
            item_seen[i] = true;
        }
        if let Some(u) = user_seen.iter().position(|s| !s) {
            return Err(Error::InvalidData(format!(
                "user {} has no interactions",
                self.user_labels[u]
            )));
        }
        if let Some(i) = item_seen.iter().position(|s| !s) {
            return Err(Error::InvalidData(format!(
                "item {} has no interactions",
                self.item_labels[i]
            )));
        }
        Ok(())
    }
}

/// Reads a `user<TAB>item` log. Ids are assigned densely in first-seen order.
pub fn load_interactions(path: &Path) -> Result<InteractionDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    parse_interactions(BufReader::new(file), path)
}

fn parse_interactions(reader: impl BufRead, path: &Path) -> Result<InteractionDataset> {
    let mut user_ids: HashMap<String, usize> = HashMap::new();
    let mut item_ids: HashMap<String, usize> = HashMap::new();
    let mut user_labels = Vec::new();
    let mut item_labels = Vec::new();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    let mut duplicates = 0;

    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split('\t');
        let (user, item) = match (fields.next(), fields.next(), fields.next()) {
            (Some(u), Some(i), None) if !u.is_empty() && !i.is_empty() => (u, i),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: "expected `user<TAB>item`".into(),
                })
            }
        };
        let u = *user_ids.entry(user.to_string()).or_insert_with(|| {
            user_labels.push(user.to_string());
            user_labels.len() - 1
        });
        let i = *item_ids.entry(item.to_string()).or_insert_with(|| {
            item_labels.push(item.to_string());
            item_labels.len() - 1
        });
        if seen.insert((u, i)) {
            edges.push((u, i));
        } else {
            duplicates += 1;
        }
    }
    if edges.is_empty() {
        return Err(Error::InvalidData(format!(
            "{} contains no interactions",
            path.display()
        )));
    }
    if duplicates > 0 {
        info!("{}: dropped {duplicates} duplicate interactions", path.display());
    }
    Ok(InteractionDataset {
        n_users: user_labels.len(),
        n_items: item_labels.len(),
        user_labels,
        item_labels,
        edges,
        duplicates_dropped: duplicates,
    })
}

pub fn save_interactions(ds: &InteractionDataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for &(u, i) in &ds.edges {
        writeln!(w, "{}\t{}", ds.user_labels[u], ds.item_labels[i])
            .map_err(|e| Error::io("writing interactions", e))?;
    }
    w.flush().map_err(|e| Error::io("writing interactions", e))
}

/// Train/validation/test partition of an [`InteractionDataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub base: InteractionDataset,
    pub train_edges: Vec<Edge>,
    pub val_edges: Vec<Edge>,
    pub test_edges: Vec<Edge>,
    /// Sorted train item ids per user.
    pub train_items_by_user: Vec<Vec<usize>>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

impl SplitDataset {
    pub fn n_users(&self) -> usize {
        self.base.n_users
    }

    pub fn n_items(&self) -> usize {
        self.base.n_items
    }

    pub fn val_items_by_user(&self) -> Vec<Vec<usize>> {
        items_by_user(&self.val_edges, self.n_users())
    }

    pub fn test_items_by_user(&self) -> Vec<Vec<usize>> {
        items_by_user(&self.test_edges, self.n_users())
    }

    /// Writes `train.tsv`, `val.tsv`, `test.tsv` (dense ids), the label lists and `split.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (name, edges) in [
            ("train.tsv", &self.train_edges),
            ("val.tsv", &self.val_edges),
            ("test.tsv", &self.test_edges),
        ] {
            let mut out = String::new();
            for &(u, i) in edges.iter() {
                out.push_str(&format!("{u}\t{i}\n"));
            }
            write_file(&dir.join(name), out.as_bytes())?;
        }
        write_file(&dir.join("users.txt"), lines(&self.base.user_labels).as_bytes())?;
        write_file(&dir.join("items.txt"), lines(&self.base.item_labels).as_bytes())?;
        let header = SplitHeader {
            seed: self.seed,
            ratios: self.ratios,
            n_users: self.n_users(),
            n_items: self.n_items(),
            n_train: self.train_edges.len(),
            n_val: self.val_edges.len(),
            n_test: self.test_edges.len(),
        };
        write_file(&dir.join("split.json"), serde_json::to_string_pretty(&header)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<SplitDataset> {
        let header: SplitHeader = serde_json::from_slice(&read_file(&dir.join("split.json"))?)?;
        let user_labels = read_lines(&dir.join("users.txt"))?;
        let item_labels = read_lines(&dir.join("items.txt"))?;
        let mut parts = Vec::new();
        for name in ["train.tsv", "val.tsv", "test.tsv"] {
            parts.push(read_dense_edges(&dir.join(name))?);
        }
        let [train_edges, val_edges, test_edges]: [Vec<Edge>; 3] = parts.try_into().unwrap();
        let mut edges = train_edges.clone();
        edges.extend(&val_edges);
        edges.extend(&test_edges);
        let base = InteractionDataset::new(user_labels, item_labels, edges)?;
        if base.n_users != header.n_users || base.n_items != header.n_items {
            return Err(Error::InvalidData(format!(
                "{}: split header disagrees with label files",
                dir.display()
            )));
        }
        let split = Self::from_parts(base, train_edges, val_edges, test_edges, header.seed, header.ratios)?;
        Ok(split)
    }

    pub fn from_parts(
        base: InteractionDataset,
        train_edges: Vec<Edge>,
        val_edges: Vec<Edge>,
        test_edges: Vec<Edge>,
        seed: u64,
        ratios: [f64; 3],
    ) -> Result<Self> {
        let train_items_by_user = items_by_user(&train_edges, base.n_users);
        if let Some(u) = train_items_by_user.iter().position(Vec::is_empty) {
            return Err(Error::InvalidData(format!(
                "user {} has no training interactions",
                base.user_labels[u]
            )));
        }
        Ok(Self {
            base,
            train_edges,
            val_edges,
            test_edges,
            train_items_by_user,
            seed,
            ratios,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitHeader {
    seed: u64,
    ratios: [f64; 3],
    n_users: usize,
    n_items: usize,
    n_train: usize,
    n_val: usize,
    n_test: usize,
}

fn items_by_user(edges: &[Edge], n_users: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_users];
    for &(u, i) in edges {
        out[u].push(i);
    }
    out.iter_mut().for_each(|v| v.sort_unstable());
    out
}

/// Shuffles each user's edges and splits them by `ratios` (train, val, test).
///
/// Validation and test take `floor(n * ratio)` edges each; whatever remains goes to
/// train, so every user keeps at least one training edge.
pub fn split_per_user(ds: &InteractionDataset, ratios: [f64; 3], seed: u64) -> Result<SplitDataset> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut by_user: Vec<Vec<usize>> = vec![Vec::new(); ds.n_users];
    for &(u, i) in &ds.edges {
        by_user[u].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (u, items) in by_user.iter_mut().enumerate() {
        if items.is_empty() {
            return Err(Error::InvalidData(format!("user {} has no interactions", ds.user_labels[u])));
        }
        items.shuffle(&mut rng);
        let (n_train, n_val, _) = allocate(items.len(), ratios);
        for (pos, &i) in items.iter().enumerate() {
            let bucket = if pos < n_train {
                &mut train
            } else if pos < n_train + n_val {
                &mut val
            } else {
                &mut test
            };
            bucket.push((u, i));
        }
    }
    SplitDataset::from_parts(ds.clone(), train, val, test, seed, ratios)
}

/// Per-user counts `(train, val, test)` for `n` edges.
pub fn allocate(n: usize, ratios: [f64; 3]) -> (usize, usize, usize) {
    // The epsilon absorbs products such as 10 * 0.1 landing just below an integer.
    let floor = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let mut n_val = floor(ratios[1]);
    let mut n_test = floor(ratios[2]);
    while n_val + n_test >= n && n > 0 {
        if n_test >= n_val && n_test > 0 {
            n_test -= 1;
        } else {
            n_val -= 1;
        }
    }
    (n - n_val - n_test, n_val, n_test)
}

/// Raw item features for one modality, stored as 32-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    modality: String,
    n_items: usize,
    dim: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(modality: impl Into<String>, n_items: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        let modality = modality.into();
        if values.len() != n_items * dim {
            return Err(Error::shape(
                "FeatureMatrix::new",
                format!("{} values for {n_items}x{dim}", values.len()),
            ));
        }
        if let Some(p) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "{modality} features, item {} column {}",
                p / dim.max(1),
                p % dim.max(1)
            )));
        }
        Ok(Self {
            modality,
            n_items,
            dim,
            values,
        })
    }

    pub fn modality(&self) -> &str {
        &self.modality
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Widened to `f64` for the model.
    pub fn to_dense(&self) -> crate::dense::DenseMatrix {
        crate::dense::DenseMatrix::from_vec(
            self.n_items,
            self.dim,
            self.values.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("feature shape is validated on construction")
    }

    /// Keeps only the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        let values = rows.iter().flat_map(|&r| self.row(r).iter().copied()).collect();
        FeatureMatrix {
            modality: self.modality.clone(),
            n_items: rows.len(),
            dim: self.dim,
            values,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_all(&FEATURE_VERSION.to_le_bytes())?;
        w.write_all(&(self.n_items as u32).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + 4 * self.values.len());
        self.write_to(&mut buf).map_err(|e| Error::io("encoding features", e))?;
        write_file(path, &buf)
    }
}

/// Reads a binary feature file (`MGFM`, version 1) and checks its row count.
pub fn load_modality_features(path: &Path, modality: &str, expected_items: usize) -> Result<FeatureMatrix> {
    let bytes = read_file(path)?;
    decode_features(&bytes, modality, expected_items).map_err(|e| match e {
        Error::InvalidData(msg) => Error::InvalidData(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn decode_features(mut bytes: &[u8], modality: &str, expected_items: usize) -> Result<FeatureMatrix> {
    let mut header = [0u8; 16];
    bytes
        .read_exact(&mut header)
        .map_err(|_| Error::InvalidData("feature file shorter than its header".into()))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(Error::InvalidData("bad feature-file magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
    if word(1) != FEATURE_VERSION {
        return Err(Error::InvalidData(format!("unsupported feature-file version {}", word(1))));
    }
    let (n_items, dim) = (word(2) as usize, word(3) as usize);
    if n_items != expected_items {
        return Err(Error::InvalidData(format!(
            "feature file has {n_items} rows, expected {expected_items}"
        )));
    }
    if bytes.len() != 4 * n_items * dim {
        return Err(Error::InvalidData(format!(
            "feature payload is {} bytes, expected {}",
            bytes.len(),
            4 * n_items * dim
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMatrix::new(modality, n_items, dim, values)
}

/// Parameters of the planted-preference generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// `(modality tag, feature dim)` per modality.
    pub modalities: Vec<(String, usize)>,
    pub edges_per_user: usize,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_users: 200,
            n_items: 100,
            latent_dim: 8,
            modalities: vec![("visual".into(), 32), ("textual".into(), 24)],
            edges_per_user: 10,
            noise_std: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub split: SplitDataset,
    pub features: Vec<FeatureMatrix>,
    /// Latent item vectors, one row per (retained) item.
    pub item_latent: Vec<Vec<f64>>,
    /// Items no user ever picked; they are dropped from the catalog.
    pub dropped_items: usize,
}

/// Planted generator: users interact with the `edges_per_user` items of largest
/// `⟨z_u, z_i⟩`, and each modality observes `A_m z_i + noise`.
///
/// Items that end up with no interactions are removed (ids re-densified, feature
/// rows dropped with them), so the result satisfies the dataset invariants.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticData> {
    if spec.edges_per_user < 3 || spec.n_items <= spec.edges_per_user {
        return Err(Error::Config(format!(
            "synthetic spec needs edges_per_user >= 3 and n_items > edges_per_user (got {} and {})",
            spec.edges_per_user, spec.n_items
        )));
    }
    if spec.n_users == 0 || spec.latent_dim == 0 || spec.modalities.is_empty() {
        return Err(Error::Config("synthetic spec needs users, a latent dim and a modality".into()));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Config("noise_std must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let users: Vec<Vec<f64>> = (0..spec.n_users).map(|_| normal(spec.latent_dim)).collect();
    let items: Vec<Vec<f64>> = (0..spec.n_items).map(|_| normal(spec.latent_dim)).collect();
    let maps: Vec<Vec<Vec<f64>>> = spec
        .modalities
        .iter()
        .map(|(_, dim)| {
            let scale = 1.0 / (spec.latent_dim as f64).sqrt();
            (0..*dim)
                .map(|_| normal(spec.latent_dim).into_iter().map(|v| v * scale).collect())
                .collect()
        })
        .collect();
    let noise: Vec<Vec<f64>> = spec
        .modalities
        .iter()
        .map(|(_, dim)| normal(spec.n_items * dim))
        .collect();

    let mut raw_edges = Vec::with_capacity(spec.n_users * spec.edges_per_user);
    for (u, zu) in users.iter().enumerate() {
        let mut scored: Vec<(usize, f64)> = items
            .iter()
            .enumerate()
            .map(|(i, zi)| (i, crate::dense::dot(zu, zi)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        raw_edges.extend(scored[..spec.edges_per_user].iter().map(|&(i, _)| (u, i)));
    }

    let mut used = vec![false; spec.n_items];
    raw_edges.iter().for_each(|&(_, i)| used[i] = true);
    let kept: Vec<usize> = (0..spec.n_items).filter(|&i| used[i]).collect();
    let mut remap = vec![usize::MAX; spec.n_items];
    kept.iter().enumerate().for_each(|(new, &old)| remap[old] = new);
    let edges: Vec<Edge> = raw_edges.iter().map(|&(u, i)| (u, remap[i])).collect();

    let features = spec
        .modalities
        .iter()
        .zip(maps.iter().zip(&noise))
        .map(|((tag, dim), (map, noise))| {
            let mut values = Vec::with_capacity(kept.len() * dim);
            for &i in &kept {
                for (j, row) in map.iter().enumerate() {
                    let clean = crate::dense::dot(row, &items[i]);
                    values.push((clean + spec.noise_std * noise[i * dim + j]) as f32);
                }
            }
            FeatureMatrix::new(tag.clone(), kept.len(), *dim, values)
        })
        .collect::<Result<Vec<_>>>()?;

    let base = InteractionDataset::new(
        (0..spec.n_users).map(|u| format!("u{u}")).collect(),
        kept.iter().map(|i| format!("i{i}")).collect(),
        edges,
    )?;
    let split = split_per_user(&base, [0.8, 0.1, 0.1], seed)?;
    Ok(SyntheticData {
        split,
        features,
        item_latent: kept.iter().map(|&i| items[i].clone()).collect(),
        dropped_items: spec.n_items - kept.len(),
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn lines(items: &[String]) -> String {
    items.iter().map(|s| format!("{s}\n")).collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::InvalidData(format!("{} is not UTF-8", path.display())))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn read_dense_edges(path: &Path) -> Result<Vec<Edge>> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| Error::InvalidData(format!("{} is not UTF-8", path.display())))?;
    let parse_err = |line: usize| Error::Parse {
        path: PathBuf::from(path),
        line,
        msg: "expected `user_id<TAB>item_id`".into(),
    };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            let (u, i) = l.split_once('\t').ok_or_else(|| parse_err(n + 1))?;
            Ok((
                u.parse().map_err(|_| parse_err(n + 1))?,
                i.parse().map_err(|_| parse_err(n + 1))?,
            ))
        })
        .collect()
}
