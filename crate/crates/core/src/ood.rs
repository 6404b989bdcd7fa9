//! Out-of-distribution detection: an S-way network over the seen classes is
//! trained so real seen features produce low-entropy (peaked) outputs and
//! synthesized unseen features produce high-entropy (near-uniform) outputs.
//! Test features are routed by comparing the output entropy to a threshold
//! set from the training data. A plain binary seen-vs-unseen classifier is
//! provided as the baseline detector.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, FeatureOrigin};
use crate::error::{Error, Result};
use crate::models::{
    adam_step, backward, softmax_rows, AdamState, Activation, Mlp, MlpSpec, OutputActivation,
};
use crate::rng::{derive_seed, seeded_rng};

/// Floor applied inside logarithms so one-hot and degenerate distributions
/// stay finite.
pub const LOG_FLOOR: f64 = 1e-12;

fn entropy_of_probs(p: ArrayView1<f64>) -> f64 {
    -p.iter().map(|&v| v * v.max(LOG_FLOOR).ln()).sum::<f64>()
}

fn check_distribution(p: ArrayView1<f64>) -> Result<()> {
    if let Some(&bad) = p.iter().find(|&&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "invalid distribution: entry {bad}"
        )));
    }
    let sum = p.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Numerical(format!(
            "invalid distribution: entries sum to {sum}"
        )));
    }
    Ok(())
}

/// Natural-log entropy of a probability vector, with `0 * log 0` read as 0.
pub fn entropy(p: ArrayView1<f64>) -> Result<f64> {
    check_distribution(p)?;
    Ok(entropy_of_probs(p))
}

/// The detector training objective on probability batches:
/// `E[H(p_seen)] - E[H(p_unseen)] + E[-log p_seen[label]]`, minimized.
/// Natural logarithms throughout; the minimum `-log S` is reached by one-hot
/// seen rows and uniform unseen rows.
pub fn entropy_loss(
    p_seen: ArrayView2<f64>,
    labels_seen: &[usize],
    p_unseen: ArrayView2<f64>,
) -> Result<f64> {
    if p_seen.nrows() == 0 || p_unseen.nrows() == 0 {
        return Err(Error::EmptyInput(
            "entropy loss needs both seen and unseen rows".into(),
        ));
    }
    if p_seen.ncols() != p_unseen.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "seen rows have {} classes, unseen rows {}",
            p_seen.ncols(),
            p_unseen.ncols()
        )));
    }
    if labels_seen.len() != p_seen.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} seen rows",
            labels_seen.len(),
            p_seen.nrows()
        )));
    }
    let s = p_seen.ncols();
    if let Some(&bad) = labels_seen.iter().find(|&&y| y >= s) {
        return Err(Error::InvalidDataset(format!(
            "label out of range: {bad} with {s} seen classes"
        )));
    }
    for row in p_seen.rows().into_iter().chain(p_unseen.rows()) {
        check_distribution(row)?;
    }

    let h_seen = p_seen
        .rows()
        .into_iter()
        .map(entropy_of_probs)
        .sum::<f64>()
        / p_seen.nrows() as f64;
    let h_unseen = p_unseen
        .rows()
        .into_iter()
        .map(entropy_of_probs)
        .sum::<f64>()
        / p_unseen.nrows() as f64;
    let nll = labels_seen
        .iter()
        .enumerate()
        .map(|(i, &y)| -p_seen[(i, y)].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / p_seen.nrows() as f64;
    Ok(h_seen - h_unseen + nll)
}

/// Outcome of routing one feature row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoutingDecision {
    pub entropy: f64,
    pub is_seen: bool,
}

/// The entropy-threshold detector: an S-way softmax network plus `ent_th`.
#[derive(Debug, Clone)]
pub struct OdDetector {
    pub net: Mlp,
    pub threshold: f64,
}

impl OdDetector {
    /// Softmax outputs for a feature batch.
    pub fn probabilities(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cache = self.net.forward_cached(features)?;
        Ok(softmax_rows(cache.logits().view()))
    }

    /// Output entropy of a single feature row.
    pub fn entropy_of(&self, feature: ArrayView1<f64>) -> Result<f64> {
        let input = feature.insert_axis(ndarray::Axis(0));
        let probs = self.probabilities(input)?;
        Ok(entropy_of_probs(probs.row(0)))
    }

    /// Route one feature: seen iff its entropy is strictly below the
    /// threshold (ties route to unseen).
    pub fn route(&self, feature: ArrayView1<f64>) -> Result<RoutingDecision> {
        let entropy = self.entropy_of(feature)?;
        Ok(RoutingDecision {
            entropy,
            is_seen: entropy < self.threshold,
        })
    }

    /// Checkpoint: the model directory plus `threshold.json { "ent_th" }`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(dir)?;
        let path = dir.join("threshold.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({ "ent_th": self.threshold }))
            .map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let net = Mlp::load(dir)?;
        let path = dir.join("threshold.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        #[derive(Deserialize)]
        struct Threshold {
            ent_th: f64,
        }
        let t: Threshold = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        Ok(OdDetector {
            net,
            threshold: t.ent_th,
        })
    }
}

fn default_od_hidden() -> usize {
    64
}
fn default_od_epochs() -> usize {
    30
}
fn default_od_batch() -> usize {
    64
}
fn default_od_lr() -> f64 {
    1e-3
}
fn default_nll_weight() -> f64 {
    1.0
}

/// Detector training configuration. Batches are balanced between the seen
/// and unseen pools so class imbalance cannot produce a trivial solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the negative log-likelihood convergence term.
    pub nll_weight: f64,
}

impl Default for OdConfig {
    fn default() -> Self {
        OdConfig {
            hidden: default_od_hidden(),
            epochs: default_od_epochs(),
            batch_size: default_od_batch(),
            lr: default_od_lr(),
            seed: 7,
            nll_weight: default_nll_weight(),
        }
    }
}

impl OdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.epochs == 0 || self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "hidden width, epochs and batch size must allow training".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.nll_weight < 0.0 {
            return Err(Error::InvalidConfig("nll_weight must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Reshuffling index stream over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Cycler { order, pos: 0 }
    }

    fn take(&mut self, k: usize, rng: &mut impl Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn gather_rows(m: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (o, &r) in rows.iter().enumerate() {
        out.row_mut(o).assign(&m.row(r));
    }
    out
}

/// Entropy gradient w.r.t. logits for one probability batch:
/// `dH/dz_j = -p_j (log p_j + H)` per row.
fn entropy_grad_wrt_logits(probs: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for (i, row) in probs.rows().into_iter().enumerate() {
        let h = entropy_of_probs(row);
        for (j, &p) in row.iter().enumerate() {
            out[(i, j)] = -p * (p.max(LOG_FLOOR).ln() + h);
        }
    }
    out
}

/// Loss value and parameter gradients of the detector objective on one
/// batch of raw feature inputs (labels already mapped to seen indices).
pub fn entropy_loss_grads(
    net: &Mlp,
    x_seen: ArrayView2<f64>,
    labels_seen: &[usize],
    x_unseen: ArrayView2<f64>,
    nll_weight: f64,
) -> Result<(f64, crate::models::MlpGrads)> {
    let cache_s = net.forward_cached(x_seen)?;
    let p_s = softmax_rows(cache_s.logits().view());
    let cache_u = net.forward_cached(x_unseen)?;
    let p_u = softmax_rows(cache_u.logits().view());
    let (b_s, b_u) = (x_seen.nrows() as f64, x_unseen.nrows() as f64);

    let h_s = p_s.rows().into_iter().map(entropy_of_probs).sum::<f64>() / b_s;
    let h_u = p_u.rows().into_iter().map(entropy_of_probs).sum::<f64>() / b_u;
    let nll = labels_seen
        .iter()
        .enumerate()
        .map(|(i, &y)| -p_s[(i, y)].max(LOG_FLOOR).ln())
        .sum::<f64>()
        / b_s;
    let loss = h_s - h_u + nll_weight * nll;

    let mut dz_s = entropy_grad_wrt_logits(&p_s);
    // cross-entropy shortcut for the NLL term
    let mut ce = p_s.clone();
    for (i, &y) in labels_seen.iter().enumerate() {
        ce[(i, y)] -= 1.0;
    }
    dz_s.scaled_add(nll_weight, &ce);
    dz_s /= b_s;
    let mut dz_u = entropy_grad_wrt_logits(&p_u);
    dz_u /= -b_u;

    let (mut grads, _) = backward(&net.params, &net.spec, &cache_s, &dz_s);
    let (grads_u, _) = backward(&net.params, &net.spec, &cache_u, &dz_u);
    grads.add_scaled(&grads_u, 1.0);
    Ok((loss, grads))
}

/// Mean output entropy over the seen-class training rows; the routing
/// threshold.
pub fn select_threshold(net: &Mlp, seen_train_features: ArrayView2<f64>) -> Result<f64> {
    if seen_train_features.nrows() == 0 {
        return Err(Error::EmptyInput("threshold needs at least one row".into()));
    }
    let cache = net.forward_cached(seen_train_features)?;
    let probs = softmax_rows(cache.logits().view());
    Ok(probs.rows().into_iter().map(entropy_of_probs).sum::<f64>() / probs.nrows() as f64)
}

fn check_od_inputs(real_seen: &FeatureDataset, synth_unseen: &FeatureDataset) -> Result<()> {
    if synth_unseen.origin() != FeatureOrigin::Synthesized {
        return Err(Error::ProtocolViolation(
            "unseen-class training features must be synthesized, not real".into(),
        ));
    }
    if real_seen.num_rows() == 0 || synth_unseen.num_rows() == 0 {
        return Err(Error::EmptyInput(
            "detector training needs seen and unseen rows".into(),
        ));
    }
    if real_seen.feature_dim() != synth_unseen.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "seen features are {}-dim, unseen {}-dim",
            real_seen.feature_dim(),
            synth_unseen.feature_dim()
        )));
    }
    Ok(())
}

/// Train the entropy detector on real seen features and synthesized unseen
/// features, then set its threshold to the mean training-entropy of the
/// seen rows. Deterministic per `cfg.seed`.
pub fn train_od(
    real_seen: &FeatureDataset,
    synth_unseen: &FeatureDataset,
    cfg: &OdConfig,
) -> Result<OdDetector> {
    cfg.validate()?;
    check_od_inputs(real_seen, synth_unseen)?;

    let seen_classes = real_seen.present_classes();
    let s = seen_classes.len();
    let mapped: Vec<usize> = real_seen
        .labels()
        .iter()
        .map(|y| seen_classes.binary_search(y).unwrap())
        .collect();

    let spec = MlpSpec::new(
        vec![real_seen.feature_dim(), cfg.hidden, cfg.hidden, s],
        Activation::Relu,
        OutputActivation::Softmax,
    )?;
    let mut net = Mlp::new(spec, derive_seed(cfg.seed, 0));
    let mut adam = AdamState::new(&net.params);
    let mut rng = seeded_rng(derive_seed(cfg.seed, 1));

    let x_seen = real_seen.features_f64();
    let x_unseen = synth_unseen.features_f64();
    let half = (cfg.batch_size / 2).max(1);
    let steps = real_seen.num_rows().max(synth_unseen.num_rows()).div_ceil(half);
    let mut seen_stream = Cycler::new(real_seen.num_rows(), &mut rng);
    let mut unseen_stream = Cycler::new(synth_unseen.num_rows(), &mut rng);

    for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let rows_s = seen_stream.take(half, &mut rng);
            let rows_u = unseen_stream.take(half, &mut rng);
            let xb_s = gather_rows(&x_seen, &rows_s);
            let yb_s: Vec<usize> = rows_s.iter().map(|&r| mapped[r]).collect();
            let xb_u = gather_rows(&x_unseen, &rows_u);
            let (loss, grads) =
                entropy_loss_grads(&net, xb_s.view(), &yb_s, xb_u.view(), cfg.nll_weight)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite detector loss ({loss}) at epoch {epoch}, step {step}"
                )));
            }
            adam_step(&mut net.params, &grads, &mut adam, cfg.lr)?;
        }
    }

    let threshold = select_threshold(&net, x_seen.view())?;
    Ok(OdDetector { net, threshold })
}

/// The binary seen-vs-unseen baseline detector (class 0 = seen).
#[derive(Debug, Clone)]
pub struct OdBinaryDetector {
    pub net: Mlp,
}

impl OdBinaryDetector {
    /// Route by the seen-class probability with threshold 0.5 (ties route
    /// unseen). The decision's entropy field reports the output entropy of
    /// the two-way distribution.
    pub fn route(&self, feature: ArrayView1<f64>) -> Result<RoutingDecision> {
        let input = feature.insert_axis(ndarray::Axis(0));
        let cache = self.net.forward_cached(input)?;
        let probs = softmax_rows(cache.logits().view());
        Ok(RoutingDecision {
            entropy: entropy_of_probs(probs.row(0)),
            is_seen: probs[(0, 0)] > 0.5,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(OdBinaryDetector {
            net: Mlp::load(dir)?,
        })
    }
}

/// Train the binary detector. Needs generated features for the seen classes
/// as well: real seen plus synthesized seen rows form the seen pool, the
/// synthesized unseen rows the unseen pool. Balanced batches, cross-entropy.
pub fn train_od_binary(
    real_seen: &FeatureDataset,
    synth_seen: &FeatureDataset,
    synth_unseen: &FeatureDataset,
    cfg: &OdConfig,
) -> Result<OdBinaryDetector> {
    cfg.validate()?;
    check_od_inputs(real_seen, synth_unseen)?;
    if synth_seen.origin() != FeatureOrigin::Synthesized {
        return Err(Error::ProtocolViolation(
            "seen-class augmentation features must be synthesized".into(),
        ));
    }
    if synth_seen.feature_dim() != real_seen.feature_dim() {
        return Err(Error::ShapeMismatch(
            "synthesized seen features have a different width".into(),
        ));
    }

    let mut seen_pool = real_seen.features_f64();
    let synth_pool = synth_seen.features_f64();
    if synth_pool.nrows() > 0 {
        seen_pool = ndarray::concatenate(
            ndarray::Axis(0),
            &[seen_pool.view(), synth_pool.view()],
        )
        .expect("widths match");
    }
    let unseen_pool = synth_unseen.features_f64();

    let spec = MlpSpec::new(
        vec![real_seen.feature_dim(), cfg.hidden, cfg.hidden, 2],
        Activation::Relu,
        OutputActivation::Softmax,
    )?;
    let mut net = Mlp::new(spec, derive_seed(cfg.seed, 2));
    let mut adam = AdamState::new(&net.params);
    let mut rng = seeded_rng(derive_seed(cfg.seed, 3));

    let half = (cfg.batch_size / 2).max(1);
    let steps = seen_pool.nrows().max(unseen_pool.nrows()).div_ceil(half);
    let mut seen_stream = Cycler::new(seen_pool.nrows(), &mut rng);
    let mut unseen_stream = Cycler::new(unseen_pool.nrows(), &mut rng);

    for epoch in 0..cfg.epochs {
        for step in 0..steps {
            let rows_s = seen_stream.take(half, &mut rng);
            let rows_u = unseen_stream.take(half, &mut rng);
            let mut x = Array2::zeros((rows_s.len() + rows_u.len(), seen_pool.ncols()));
            for (o, &r) in rows_s.iter().enumerate() {
                x.row_mut(o).assign(&seen_pool.row(r));
            }
            for (o, &r) in rows_u.iter().enumerate() {
                x.row_mut(rows_s.len() + o).assign(&unseen_pool.row(r));
            }
            let cache = net.forward_cached(x.view())?;
            let probs = softmax_rows(cache.logits().view());
            let b = x.nrows() as f64;
            let mut loss = 0.0;
            let mut dz = probs.clone();
            for i in 0..x.nrows() {
                let y = if i < rows_s.len() { 0 } else { 1 };
                loss -= probs[(i, y)].max(LOG_FLOOR).ln();
                dz[(i, y)] -= 1.0;
            }
            loss /= b;
            dz /= b;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite binary detector loss at epoch {epoch}, step {step}"
                )));
            }
            let (grads, _) = backward(&net.params, &net.spec, &cache, &dz);
            adam_step(&mut net.params, &grads, &mut adam, cfg.lr)?;
        }
    }
    Ok(OdBinaryDetector { net })
}
