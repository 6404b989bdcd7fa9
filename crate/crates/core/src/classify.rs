//! Seen and unseen classifier heads, routed GZSL inference, ZSL inference,
//! and the single-head baseline used for bias ablations.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureDataset;
use crate::error::{Error, Result};
use crate::models::{
    adam_step, backward, softmax_rows, Activation, AdamState, Mlp, MlpSpec, OutputActivation,
};
use crate::ood::{OdBinaryDetector, OdDetector, RoutingDecision, LOG_FLOOR};
use crate::rng::{derive_seed, seeded_rng};

fn default_head_epochs() -> usize {
    60
}
fn default_head_batch() -> usize {
    64
}
fn default_head_lr() -> f64 {
    1e-3
}

/// Training configuration for the single-layer softmax heads.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: default_head_epochs(),
            batch_size: default_head_batch(),
            lr: default_head_lr(),
            seed: 7,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "head training needs epochs and a batch size".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// A single-layer softmax classifier over an explicit list of class ids.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub net: Mlp,
    pub label_map: Vec<usize>,
}

impl ClassifierHead {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    /// Softmax probabilities for a feature batch.
    pub fn probabilities(&self, features: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cache = self.net.forward_cached(features)?;
        Ok(softmax_rows(cache.logits().view()))
    }

    /// Predicted class id and its confidence (max softmax). Ties go to the
    /// lowest class id.
    pub fn predict_with_confidence(&self, feature: ArrayView1<f64>) -> Result<(usize, f64)> {
        let input = feature.insert_axis(ndarray::Axis(0));
        let probs = self.probabilities(input)?;
        let row = probs.row(0);
        let mut best_idx = 0usize;
        for (k, &p) in row.iter().enumerate() {
            let better = p > row[best_idx]
                || (p == row[best_idx] && self.label_map[k] < self.label_map[best_idx]);
            if better {
                best_idx = k;
            }
        }
        Ok((self.label_map[best_idx], row[best_idx]))
    }

    pub fn predict(&self, feature: ArrayView1<f64>) -> Result<usize> {
        Ok(self.predict_with_confidence(feature)?.0)
    }

    /// Checkpoint: the model directory plus `label_map.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.net.save(dir)?;
        let path = dir.join("label_map.json");
        let json = serde_json::to_string_pretty(&self.label_map)
            .map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let net = Mlp::load(dir)?;
        let path = dir.join("label_map.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let label_map: Vec<usize> =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if label_map.len() != net.spec.output_dim() {
            return Err(Error::InvalidDataset(
                "label map size does not match the head output".into(),
            ));
        }
        Ok(ClassifierHead { net, label_map })
    }
}

/// Train a head on features labeled with ids from `label_map`,
/// cross-entropy, deterministic per seed.
pub fn train_head(
    features: ArrayView2<f64>,
    labels: &[usize],
    label_map: &[usize],
    cfg: &HeadConfig,
) -> Result<ClassifierHead> {
    cfg.validate()?;
    if label_map.is_empty() {
        return Err(Error::InvalidConfig("label map is empty".into()));
    }
    let mut sorted = label_map.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != label_map.len() {
        return Err(Error::InvalidConfig("label map has duplicate ids".into()));
    }
    if labels.len() != features.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for {} rows",
            labels.len(),
            features.nrows()
        )));
    }
    if features.nrows() == 0 {
        return Err(Error::EmptyInput("head training needs rows".into()));
    }
    let mapped: Vec<usize> = labels
        .iter()
        .map(|y| {
            sorted
                .binary_search(y)
                .map_err(|_| Error::InvalidDataset(format!("label {y} outside the label map")))
        })
        .collect::<Result<_>>()?;

    let spec = MlpSpec::new(
        vec![features.ncols(), sorted.len()],
        Activation::Relu,
        OutputActivation::Softmax,
    )?;
    let mut net = Mlp::new(spec, derive_seed(cfg.seed, 0));
    let mut adam = AdamState::new(&net.params);
    let mut rng = seeded_rng(derive_seed(cfg.seed, 1));

    let n = features.nrows();
    let b = cfg.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for window in order.chunks(b) {
            let mut x = Array2::zeros((window.len(), features.ncols()));
            for (o, &r) in window.iter().enumerate() {
                x.row_mut(o).assign(&features.row(r));
            }
            let cache = net.forward_cached(x.view())?;
            let probs = softmax_rows(cache.logits().view());
            let rows = window.len() as f64;
            let mut loss = 0.0;
            let mut dz = probs.clone();
            for (o, &r) in window.iter().enumerate() {
                let y = mapped[r];
                loss -= probs[(o, y)].max(LOG_FLOOR).ln();
                dz[(o, y)] -= 1.0;
            }
            loss /= rows;
            dz /= rows;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite head loss at epoch {epoch}"
                )));
            }
            let (grads, _) = backward(&net.params, &net.spec, &cache, &dz);
            adam_step(&mut net.params, &grads, &mut adam, cfg.lr)?;
        }
    }
    Ok(ClassifierHead {
        net,
        label_map: sorted,
    })
}

/// Either detector behind one routing interface.
#[derive(Debug, Clone)]
pub enum Router {
    Entropy(OdDetector),
    Binary(OdBinaryDetector),
}

impl Router {
    pub fn route(&self, feature: ArrayView1<f64>) -> Result<RoutingDecision> {
        match self {
            Router::Entropy(d) => d.route(feature),
            Router::Binary(d) => d.route(feature),
        }
    }
}

/// The routed GZSL predictor: a detector plus disjoint seen/unseen heads.
#[derive(Debug, Clone)]
pub struct GzslPredictor {
    pub router: Router,
    pub seen_head: ClassifierHead,
    pub unseen_head: ClassifierHead,
}

impl GzslPredictor {
    pub fn new(
        router: Router,
        seen_head: ClassifierHead,
        unseen_head: ClassifierHead,
    ) -> Result<Self> {
        for id in &seen_head.label_map {
            if unseen_head.label_map.binary_search(id).is_ok() {
                return Err(Error::InvalidConfig(format!(
                    "class {id} appears in both the seen and unseen heads"
                )));
            }
        }
        Ok(GzslPredictor {
            router,
            seen_head,
            unseen_head,
        })
    }
}

/// A routed prediction with its diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GzslPrediction {
    pub class_id: usize,
    pub routed_seen: bool,
    pub entropy: f64,
    pub confidence: f64,
}

/// Route one feature and classify it with the head for its group.
pub fn predict_gzsl_detailed(
    predictor: &GzslPredictor,
    feature: ArrayView1<f64>,
) -> Result<GzslPrediction> {
    let decision = predictor.router.route(feature)?;
    let head = if decision.is_seen {
        &predictor.seen_head
    } else {
        &predictor.unseen_head
    };
    let (class_id, confidence) = head.predict_with_confidence(feature)?;
    Ok(GzslPrediction {
        class_id,
        routed_seen: decision.is_seen,
        entropy: decision.entropy,
        confidence,
    })
}

/// Routed GZSL prediction: the class id only.
pub fn predict_gzsl(predictor: &GzslPredictor, feature: ArrayView1<f64>) -> Result<usize> {
    Ok(predict_gzsl_detailed(predictor, feature)?.class_id)
}

/// ZSL prediction: argmax over the unseen head only.
pub fn predict_zsl(unseen_head: &ClassifierHead, feature: ArrayView1<f64>) -> Result<usize> {
    unseen_head.predict(feature)
}

/// The no-detector baseline: one softmax head over seen and unseen classes
/// jointly, trained on real seen features plus synthesized unseen features.
pub fn train_baseline_gzsl(
    real_seen: &FeatureDataset,
    synth_unseen: &FeatureDataset,
    cfg: &HeadConfig,
) -> Result<ClassifierHead> {
    if real_seen.feature_dim() != synth_unseen.feature_dim() {
        return Err(Error::ShapeMismatch(
            "real and synthesized feature widths differ".into(),
        ));
    }
    let mut label_map = real_seen.present_classes();
    label_map.extend(synth_unseen.present_classes());
    label_map.sort_unstable();
    label_map.dedup();

    let n = real_seen.num_rows() + synth_unseen.num_rows();
    let mut features = Array2::zeros((n, real_seen.feature_dim()));
    let mut labels = Vec::with_capacity(n);
    let real = real_seen.features_f64();
    for i in 0..real_seen.num_rows() {
        features.row_mut(i).assign(&real.row(i));
        labels.push(real_seen.labels()[i]);
    }
    let synth = synth_unseen.features_f64();
    for i in 0..synth_unseen.num_rows() {
        features.row_mut(real_seen.num_rows() + i).assign(&synth.row(i));
        labels.push(synth_unseen.labels()[i]);
    }
    train_head(features.view(), &labels, &label_map, cfg)
}

/// One line of the prediction dump.
#[derive(Debug, Clone)]
pub struct PredictionRow {
    pub row_index: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    /// None for unrouted (baseline) predictions.
    pub routed_seen: Option<bool>,
    pub entropy: Option<f64>,
    pub confidence: f64,
}

/// Write predictions as CSV:
/// `row_index,true_class,predicted_class,routed_seen,entropy,confidence`.
/// Routing columns are left empty for unrouted predictions.
pub fn write_predictions_csv(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = String::from("row_index,true_class,predicted_class,routed_seen,entropy,confidence\n");
    for r in rows {
        let routed = r
            .routed_seen
            .map(|v| v.to_string())
            .unwrap_or_default();
        let entropy = r.entropy.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.row_index, r.true_class, r.predicted_class, routed, entropy, r.confidence
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
