//! Data model and on-disk formats, seen/unseen split generation, test-set
//! construction, the synthetic benchmark generator, and the word-vector to
//! manual-attribute transfer regression.
//!
//! # Dataset directory layout
//!
//! ```text
//! <dir>/
//!   meta.json          # { "n", "dx", "c", "de", "class_names", ["dm"] }
//!   features.f32       # little-endian f32, row-major, n x dx
//!   labels.i32         # little-endian i32, length n
//!   embeddings.f32     # little-endian f32, row-major, c x de
//!   embeddings_manual.f32   # optional, c x dm, present iff "dm" in meta
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    adam_step, backward, forward, forward_cached, init_mlp, Activation, AdamState, MlpSpec,
    OutputActivation,
};
use crate::rng::{derive_seed, seeded_rng};

/// Where a dataset's feature rows came from. Generated rows are tracked so
/// protocol code can refuse real unseen-class features where only
/// synthesized ones are allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureOrigin {
    Real,
    Synthesized,
}

/// A matrix of feature vectors with integer class labels and a per-class
/// embedding table. Optionally carries a second (manual-attribute) table.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    features: Array2<f32>,
    labels: Vec<usize>,
    embeddings: Array2<f32>,
    manual_embeddings: Option<Array2<f32>>,
    class_names: Vec<String>,
    origin: FeatureOrigin,
}

impl FeatureDataset {
    /// Build and validate a dataset of real features.
    ///
    /// The row count may be zero for in-memory datasets; on-disk datasets
    /// are additionally required to be nonempty by [`load_dataset`].
    pub fn new(
        features: Array2<f32>,
        labels: Vec<usize>,
        embeddings: Array2<f32>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        Self::with_origin(features, labels, embeddings, class_names, FeatureOrigin::Real)
    }

    pub(crate) fn with_origin(
        features: Array2<f32>,
        labels: Vec<usize>,
        embeddings: Array2<f32>,
        class_names: Vec<String>,
        origin: FeatureOrigin,
    ) -> Result<Self> {
        let c = embeddings.nrows();
        if c < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {c}"
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidDataset("feature dimension must be positive".into()));
        }
        if embeddings.ncols() == 0 {
            return Err(Error::InvalidDataset("embedding dimension must be positive".into()));
        }
        if labels.len() != features.nrows() {
            return Err(Error::InvalidDataset(format!(
                "{} labels for {} feature rows",
                labels.len(),
                features.nrows()
            )));
        }
        if class_names.len() != c {
            return Err(Error::InvalidDataset(format!(
                "{} class names for {c} classes",
                class_names.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::InvalidDataset(format!(
                "label out of range: {bad} with {c} classes"
            )));
        }
        Ok(FeatureDataset {
            features,
            labels,
            embeddings,
            manual_embeddings: None,
            class_names,
            origin,
        })
    }

    /// Attach a manual-attribute table (one row per class).
    pub fn with_manual_embeddings(mut self, manual: Array2<f32>) -> Result<Self> {
        if manual.nrows() != self.num_classes() {
            return Err(Error::InvalidDataset(format!(
                "manual attribute table has {} rows for {} classes",
                manual.nrows(),
                self.num_classes()
            )));
        }
        if manual.ncols() == 0 {
            return Err(Error::InvalidDataset(
                "manual attribute dimension must be positive".into(),
            ));
        }
        self.manual_embeddings = Some(manual);
        Ok(self)
    }

    pub fn num_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn embedding_dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn manual_embeddings(&self) -> Option<&Array2<f32>> {
        self.manual_embeddings.as_ref()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn origin(&self) -> FeatureOrigin {
        self.origin
    }

    /// Feature matrix converted to f64 for numerics.
    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }

    /// Embedding table converted to f64.
    pub fn embeddings_f64(&self) -> Array2<f64> {
        self.embeddings.mapv(f64::from)
    }

    /// Row indices carrying the given label, in dataset order.
    pub fn class_rows(&self, label: usize) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == label)
            .map(|(i, _)| i)
            .collect()
    }

    /// Per-class row counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Distinct labels present in the rows, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    /// A new dataset holding only the given rows; tables and origin are kept.
    pub fn subset(&self, rows: &[usize]) -> FeatureDataset {
        let mut features = Array2::zeros((rows.len(), self.feature_dim()));
        let mut labels = Vec::with_capacity(rows.len());
        for (out, &r) in rows.iter().enumerate() {
            features.row_mut(out).assign(&self.features.row(r));
            labels.push(self.labels[r]);
        }
        FeatureDataset {
            features,
            labels,
            embeddings: self.embeddings.clone(),
            manual_embeddings: self.manual_embeddings.clone(),
            class_names: self.class_names.clone(),
            origin: self.origin,
        }
    }

    /// Embedding rows (f64) matching each of the given labels.
    pub fn embeddings_for_labels(&self, labels: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((labels.len(), self.embedding_dim()));
        for (i, &y) in labels.iter().enumerate() {
            for (j, &v) in self.embeddings.row(y).iter().enumerate() {
                out[(i, j)] = f64::from(v);
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n: usize,
    dx: usize,
    c: usize,
    de: usize,
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dm: Option<usize>,
}

fn read_f32_payload(path: &Path, expected: usize, what: &str) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::InvalidDataset(format!(
            "dimension mismatch: {what} holds {} bytes, expected {}",
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

/// Load a dataset directory, validating shapes, label range and that no
/// feature row is all-zero (a degenerate extraction artifact).
pub fn load_dataset(dir: &Path) -> Result<FeatureDataset> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
    if meta.n == 0 {
        return Err(Error::InvalidDataset("dataset has no rows".into()));
    }

    let features = read_f32_payload(&dir.join("features.f32"), meta.n * meta.dx, "features.f32")?;
    let features = Array2::from_shape_vec((meta.n, meta.dx), features).unwrap();

    let labels_path = dir.join("labels.i32");
    let bytes = fs::read(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    if bytes.len() != meta.n * 4 {
        return Err(Error::InvalidDataset(format!(
            "dimension mismatch: labels.i32 holds {} bytes, expected {}",
            bytes.len(),
            meta.n * 4
        )));
    }
    let mut labels = Vec::with_capacity(meta.n);
    for c in bytes.chunks_exact(4) {
        let v = i32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        if v < 0 || v as usize >= meta.c {
            return Err(Error::InvalidDataset(format!(
                "label out of range: {v} with {} classes",
                meta.c
            )));
        }
        labels.push(v as usize);
    }

    let embeddings =
        read_f32_payload(&dir.join("embeddings.f32"), meta.c * meta.de, "embeddings.f32")?;
    let embeddings = Array2::from_shape_vec((meta.c, meta.de), embeddings).unwrap();

    for (i, row) in features.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            return Err(Error::InvalidDataset(format!("feature row {i} is all-zero")));
        }
    }

    let manual_path = dir.join("embeddings_manual.f32");
    let ds = FeatureDataset::new(features, labels, embeddings, meta.class_names)?;
    match meta.dm {
        Some(dm) => {
            let manual = read_f32_payload(&manual_path, meta.c * dm, "embeddings_manual.f32")?;
            ds.with_manual_embeddings(Array2::from_shape_vec((meta.c, dm), manual).unwrap())
        }
        None => {
            if manual_path.exists() {
                return Err(Error::InvalidDataset(
                    "embeddings_manual.f32 present but meta.json lacks \"dm\"".into(),
                ));
            }
            Ok(ds)
        }
    }
}

fn write_f32_payload(path: &Path, values: impl Iterator<Item = f32>) -> Result<()> {
    let mut bytes = Vec::new();
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Write a dataset directory in the layout documented on this module.
/// `load_dataset(save_dataset(ds))` reproduces `ds` bit-exactly.
pub fn save_dataset(ds: &FeatureDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        n: ds.num_rows(),
        dx: ds.feature_dim(),
        c: ds.num_classes(),
        de: ds.embedding_dim(),
        class_names: ds.class_names.clone(),
        dm: ds.manual_embeddings.as_ref().map(|m| m.ncols()),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::json(&meta_path, e))?;
    fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))?;

    write_f32_payload(&dir.join("features.f32"), ds.features.iter().copied())?;

    let labels_path = dir.join("labels.i32");
    let mut bytes = Vec::with_capacity(ds.num_rows() * 4);
    for &y in &ds.labels {
        bytes.extend_from_slice(&(y as i32).to_le_bytes());
    }
    fs::write(&labels_path, bytes).map_err(|e| Error::io(&labels_path, e))?;

    write_f32_payload(&dir.join("embeddings.f32"), ds.embeddings.iter().copied())?;
    if let Some(manual) = &ds.manual_embeddings {
        write_f32_payload(&dir.join("embeddings_manual.f32"), manual.iter().copied())?;
    }
    Ok(())
}

/// Partition of the class ids into seen and unseen sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub seed: u64,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub seen_test_fraction: f64,
}

impl SplitSpec {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.seen.is_empty() || self.unseen.is_empty() {
            return Err(Error::InvalidConfig(
                "both seen and unseen class sets must be nonempty".into(),
            ));
        }
        if !(self.seen_test_fraction > 0.0 && self.seen_test_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "seen_test_fraction must lie in (0, 1)".into(),
            ));
        }
        let mut all: Vec<usize> = self.seen.iter().chain(&self.unseen).copied().collect();
        all.sort_unstable();
        let expected: Vec<usize> = (0..num_classes).collect();
        if all != expected {
            return Err(Error::InvalidConfig(
                "seen and unseen must disjointly cover all classes".into(),
            ));
        }
        Ok(())
    }

    pub fn is_seen(&self, label: usize) -> bool {
        self.seen.binary_search(&label).is_ok()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Seen test fraction used when none is configured.
pub const DEFAULT_SEEN_TEST_FRACTION: f64 = 0.2;

/// Randomly assign `num_seen` classes as seen and the rest as unseen.
/// Deterministic per seed; both sets are returned in ascending order.
pub fn random_split(ds: &FeatureDataset, num_seen: usize, seed: u64) -> Result<SplitSpec> {
    let c = ds.num_classes();
    if num_seen == 0 || num_seen >= c {
        return Err(Error::InvalidConfig(format!(
            "num_seen must satisfy 1 <= num_seen < {c}, got {num_seen}"
        )));
    }
    let mut ids: Vec<usize> = (0..c).collect();
    let mut rng = seeded_rng(seed);
    ids.shuffle(&mut rng);
    let mut seen: Vec<usize> = ids[..num_seen].to_vec();
    let mut unseen: Vec<usize> = ids[num_seen..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(SplitSpec {
        seed,
        seen,
        unseen,
        seen_test_fraction: DEFAULT_SEEN_TEST_FRACTION,
    })
}

/// The GZSL evaluation pool: every unseen-class row plus a held-out
/// per-class fraction of the seen rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GzslTestSet {
    pub features: Array2<f32>,
    pub labels: Vec<usize>,
    pub is_seen_class: Vec<bool>,
}

impl GzslTestSet {
    pub fn num_rows(&self) -> usize {
        self.labels.len()
    }

    pub fn features_f64(&self) -> Array2<f64> {
        self.features.mapv(f64::from)
    }
}

/// Row indices held out from each seen class, half-up rounded per class,
/// capped so at least one training row remains. Shared by
/// [`build_gzsl_test_set`] and [`build_train_set`] so the two are disjoint
/// by construction.
fn seen_holdout_rows(ds: &FeatureDataset, split: &SplitSpec) -> Result<BTreeSet<usize>> {
    let mut rng = seeded_rng(derive_seed(split.seed, 0x7e57));
    let mut holdout = BTreeSet::new();
    for &class in &split.seen {
        let mut rows = ds.class_rows(class);
        if rows.len() < 2 {
            return Err(Error::InvalidDataset(format!(
                "seen class {class} has {} rows; need at least 2 to hold out test data",
                rows.len()
            )));
        }
        // round half-up, keep at least one training row
        let k = ((split.seen_test_fraction * rows.len() as f64) + 0.5).floor() as usize;
        let k = k.min(rows.len() - 1);
        rows.shuffle(&mut rng);
        holdout.extend(rows.into_iter().take(k));
    }
    Ok(holdout)
}

/// Build the GZSL test set for a split: all unseen-class rows and the
/// per-seen-class holdout, in dataset row order.
pub fn build_gzsl_test_set(ds: &FeatureDataset, split: &SplitSpec) -> Result<GzslTestSet> {
    split.validate(ds.num_classes())?;
    let holdout = seen_holdout_rows(ds, split)?;
    let mut rows = Vec::new();
    let mut is_seen = Vec::new();
    for (i, &y) in ds.labels.iter().enumerate() {
        if split.is_seen(y) {
            if holdout.contains(&i) {
                rows.push(i);
                is_seen.push(true);
            }
        } else {
            rows.push(i);
            is_seen.push(false);
        }
    }
    let sub = ds.subset(&rows);
    Ok(GzslTestSet {
        features: sub.features,
        labels: sub.labels,
        is_seen_class: is_seen,
    })
}

/// Companion of [`build_gzsl_test_set`]: the seen-class training rows, i.e.
/// every seen-class row not held out for testing. Unseen-class rows never
/// appear here.
pub fn build_train_set(ds: &FeatureDataset, split: &SplitSpec) -> Result<FeatureDataset> {
    split.validate(ds.num_classes())?;
    let holdout = seen_holdout_rows(ds, split)?;
    let rows: Vec<usize> = ds
        .labels
        .iter()
        .enumerate()
        .filter(|(i, &y)| split.is_seen(y) && !holdout.contains(i))
        .map(|(i, _)| i)
        .collect();
    Ok(ds.subset(&rows))
}

fn default_num_classes() -> usize {
    20
}
fn default_dim_feature() -> usize {
    64
}
fn default_dim_embedding() -> usize {
    16
}
fn default_samples_per_class() -> usize {
    100
}
fn default_cluster_spread() -> f64 {
    1.5
}
fn default_embedding_rank() -> usize {
    6
}

/// Configuration for the synthetic cluster benchmark.
///
/// Class embeddings are Gaussian within a random `embedding_rank`-dimensional
/// subspace of the embedding space (unit variance per coordinate); class
/// feature means are a fixed random linear map of the embeddings plus
/// optional mean noise, so the embeddings are genuinely predictive of the
/// feature clusters. Samples are the class mean plus isotropic Gaussian
/// spread.
///
/// The low-rank embedding structure keeps the embedding-to-mean map
/// identifiable from a subset of the classes, the property zero-shot
/// transfer relies on; real attribute and word-vector tables are likewise
/// far from isotropic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticBenchmarkConfig {
    pub num_classes: usize,
    pub dim_feature: usize,
    pub dim_embedding: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub embedding_noise: f64,
    /// Effective dimension of the class-embedding distribution, capped at
    /// `dim_embedding`.
    pub embedding_rank: usize,
    pub seed: u64,
}

impl Default for SyntheticBenchmarkConfig {
    fn default() -> Self {
        SyntheticBenchmarkConfig {
            num_classes: default_num_classes(),
            dim_feature: default_dim_feature(),
            dim_embedding: default_dim_embedding(),
            samples_per_class: default_samples_per_class(),
            cluster_spread: default_cluster_spread(),
            embedding_noise: 0.0,
            embedding_rank: default_embedding_rank(),
            seed: 7,
        }
    }
}

impl SyntheticBenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        if self.dim_feature == 0 || self.dim_embedding == 0 {
            return Err(Error::InvalidConfig("dimensions must be positive".into()));
        }
        if self.samples_per_class == 0 {
            return Err(Error::InvalidConfig("samples_per_class must be positive".into()));
        }
        if self.embedding_rank == 0 {
            return Err(Error::InvalidConfig("embedding_rank must be positive".into()));
        }
        if self.cluster_spread < 0.0 || self.embedding_noise < 0.0 {
            return Err(Error::InvalidConfig(
                "cluster_spread and embedding_noise must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Generate the synthetic benchmark. Deterministic per seed; rows are
/// grouped by class (class 0 first).
pub fn make_synthetic_benchmark(cfg: &SyntheticBenchmarkConfig) -> Result<FeatureDataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(cfg.seed);
    let c = cfg.num_classes;
    let (dx, de) = (cfg.dim_feature, cfg.dim_embedding);
    let rank = cfg.embedding_rank.min(de);

    let factors = Array2::from_shape_fn((c, rank), |_| rng.sample::<f64, _>(StandardNormal));
    let mix_scale = 1.0 / (rank as f64).sqrt();
    let mixing =
        Array2::from_shape_fn((rank, de), |_| rng.sample::<f64, _>(StandardNormal) * mix_scale);
    let embeddings = factors.dot(&mixing);
    let map_scale = 1.0 / (de as f64).sqrt();
    let linear_map =
        Array2::from_shape_fn((de, dx), |_| rng.sample::<f64, _>(StandardNormal) * map_scale);
    let mean_noise =
        Array2::from_shape_fn((c, dx), |_| rng.sample::<f64, _>(StandardNormal));
    let means = embeddings.dot(&linear_map) + mean_noise * cfg.embedding_noise;

    let n = c * cfg.samples_per_class;
    let mut features = Array2::<f32>::zeros((n, dx));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for class in 0..c {
        for _ in 0..cfg.samples_per_class {
            for j in 0..dx {
                let noise: f64 = rng.sample(StandardNormal);
                features[(row, j)] = (means[(class, j)] + cfg.cluster_spread * noise) as f32;
            }
            labels.push(class);
            row += 1;
        }
    }

    let embeddings_f32 = embeddings.mapv(|v| v as f32);
    let class_names = (0..c).map(|i| format!("class_{i:03}")).collect();
    FeatureDataset::new(features, labels, embeddings_f32, class_names)
}

fn default_transfer_hidden() -> usize {
    128
}
fn default_transfer_epochs() -> usize {
    200
}
fn default_transfer_batch() -> usize {
    32
}
fn default_transfer_lr() -> f64 {
    1e-3
}
fn default_holdout_fraction() -> f64 {
    0.1
}
fn default_patience() -> usize {
    10
}

/// Configuration for the attribute-transfer regressor: a two-layer network
/// from (feature ⊕ word vector) to manual attributes, trained with MSE and
/// early-stopped on a held-out class subset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of source classes held out for early stopping (at least one
    /// class).
    pub holdout_class_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            hidden: default_transfer_hidden(),
            epochs: default_transfer_epochs(),
            batch_size: default_transfer_batch(),
            lr: default_transfer_lr(),
            seed: 7,
            holdout_class_fraction: default_holdout_fraction(),
            patience: default_patience(),
        }
    }
}

/// Learn a map from (feature ⊕ word vector) to manual attributes on the
/// source dataset, then predict one attribute row per target class from the
/// provided feature rows for those classes.
///
/// `source` must carry both embedding tables (word vectors as the primary
/// table, manual attributes as the secondary). `target_features` holds rows
/// labeled by target-class index into `target_word_vectors`; for unseen
/// target classes these must be generator outputs, never real features —
/// callers wire that protocol. With `epochs == 0` the initialization mapping
/// is used as-is. Each target class's attribute row is the mean prediction
/// over that class's rows.
pub fn transfer_attributes(
    source: &FeatureDataset,
    target_word_vectors: ArrayView2<f32>,
    target_features: &FeatureDataset,
    cfg: &TransferConfig,
) -> Result<Array2<f32>> {
    let manual = source.manual_embeddings().ok_or_else(|| {
        Error::InvalidConfig("source dataset has no manual attribute table".into())
    })?;
    if target_word_vectors.ncols() != source.embedding_dim() {
        return Err(Error::ShapeMismatch(format!(
            "word-vector width mismatch: source {} vs target {}",
            source.embedding_dim(),
            target_word_vectors.ncols()
        )));
    }
    if target_features.feature_dim() != source.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature width mismatch: source {} vs target {}",
            source.feature_dim(),
            target_features.feature_dim()
        )));
    }
    let num_targets = target_word_vectors.nrows();
    if let Some(&bad) = target_features.labels().iter().find(|&&y| y >= num_targets) {
        return Err(Error::InvalidDataset(format!(
            "target feature label {bad} exceeds the {num_targets} word-vector rows"
        )));
    }
    if source.num_rows() == 0 {
        return Err(Error::EmptyInput("source dataset has no rows".into()));
    }

    let d_in = source.feature_dim() + source.embedding_dim();
    let d_m = manual.ncols();
    let spec = MlpSpec::new(
        vec![d_in, cfg.hidden, d_m],
        Activation::Relu,
        OutputActivation::None,
    )?;
    let mut params = init_mlp(&spec, derive_seed(cfg.seed, 0));

    if cfg.epochs > 0 {
        // hold out a class subset for early stopping
        let mut classes = source.present_classes();
        let mut rng = seeded_rng(derive_seed(cfg.seed, 1));
        classes.shuffle(&mut rng);
        let n_hold = ((cfg.holdout_class_fraction * classes.len() as f64).round() as usize)
            .clamp(1, classes.len().saturating_sub(1).max(1));
        let held: BTreeSet<usize> = classes[..n_hold].iter().copied().collect();

        let inputs = transfer_inputs(
            source.features(),
            source.labels(),
            source.embeddings().view(),
        );
        let targets = {
            let mut t = Array2::<f64>::zeros((source.num_rows(), d_m));
            for (i, &y) in source.labels().iter().enumerate() {
                for (j, &v) in manual.row(y).iter().enumerate() {
                    t[(i, j)] = f64::from(v);
                }
            }
            t
        };
        let train_rows: Vec<usize> = (0..source.num_rows())
            .filter(|&i| !held.contains(&source.labels()[i]))
            .collect();
        let val_rows: Vec<usize> = (0..source.num_rows())
            .filter(|&i| held.contains(&source.labels()[i]))
            .collect();
        if train_rows.is_empty() {
            return Err(Error::InvalidDataset(
                "no training rows left after holding out validation classes".into(),
            ));
        }

        let take = |rows: &[usize], m: &Array2<f64>| {
            let mut out = Array2::zeros((rows.len(), m.ncols()));
            for (o, &r) in rows.iter().enumerate() {
                out.row_mut(o).assign(&m.row(r));
            }
            out
        };
        let x_val = take(&val_rows, &inputs);
        let y_val = take(&val_rows, &targets);

        let mut state = AdamState::new(&params);
        let mut best = params.clone();
        let mut best_mse = f64::INFINITY;
        let mut best_epoch = 0usize;
        let mut order = train_rows.clone();
        let batch = cfg.batch_size.max(1);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let x = take(chunk, &inputs);
                let y = take(chunk, &targets);
                let cache = forward_cached(&params, &spec, x.view())?;
                let dz = (cache.logits() - &y) * (2.0 / (y.nrows() * y.ncols()) as f64);
                let (grads, _) = backward(&params, &spec, &cache, &dz);
                adam_step(&mut params, &grads, &mut state, cfg.lr)?;
            }
            if !val_rows.is_empty() {
                let pred = forward(&params, &spec, x_val.view())?;
                let mse = (&pred - &y_val).mapv(|v| v * v).sum() / pred.len().max(1) as f64;
                if mse < best_mse {
                    best_mse = mse;
                    best = params.clone();
                    best_epoch = epoch;
                } else if epoch - best_epoch > cfg.patience {
                    break;
                }
            }
        }
        if !val_rows.is_empty() {
            params = best;
        }
    }

    // predict one attribute row per target class as the mean over its rows
    let mut out = Array2::<f32>::zeros((num_targets, d_m));
    let target_inputs = transfer_inputs(
        target_features.features(),
        target_features.labels(),
        target_word_vectors,
    );
    let preds = forward(&params, &spec, target_inputs.view())?;
    for class in 0..num_targets {
        let rows: Vec<usize> = target_features
            .labels()
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == class)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::InvalidDataset(format!(
                "no feature rows supplied for target class {class}"
            )));
        }
        let mut mean = Array1::<f64>::zeros(d_m);
        for &r in &rows {
            mean += &preds.row(r);
        }
        mean /= rows.len() as f64;
        for (j, &v) in mean.iter().enumerate() {
            out[(class, j)] = v as f32;
        }
    }
    Ok(out)
}

/// Concatenate features with the word vector of each row's label.
fn transfer_inputs(
    features: &Array2<f32>,
    labels: &[usize],
    word_vectors: ArrayView2<f32>,
) -> Array2<f64> {
    let (dx, dw) = (features.ncols(), word_vectors.ncols());
    let mut out = Array2::zeros((features.nrows(), dx + dw));
    for i in 0..features.nrows() {
        for j in 0..dx {
            out[(i, j)] = f64::from(features[(i, j)]);
        }
        for j in 0..dw {
            out[(i, dx + j)] = f64::from(word_vectors[(labels[i], j)]);
        }
    }
    out
}

/// Mean feature vector per class id present in the dataset, as (id, mean).
pub fn class_means(ds: &FeatureDataset) -> Vec<(usize, Array1<f64>)> {
    let feats = ds.features_f64();
    ds.present_classes()
        .into_iter()
        .map(|class| {
            let rows = ds.class_rows(class);
            let mut mean = Array1::zeros(ds.feature_dim());
            for &r in &rows {
                mean += &feats.index_axis(Axis(0), r);
            }
            mean /= rows.len() as f64;
            (class, mean)
        })
        .collect()
}
