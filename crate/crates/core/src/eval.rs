//! Metrics and the evaluation protocol: per-class accuracy, harmonic mean,
//! the seen/unseen bias table, sorted-confidence curves, and the seeded
//! multi-split protocol with mean ± std aggregation.
//!
//! Each protocol run owns its seed and output directory, so runs execute in
//! parallel and the aggregate is identical across reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::{
    predict_gzsl_detailed, predict_zsl, train_baseline_gzsl, train_head, write_predictions_csv,
    ClassifierHead, GzslPredictor, HeadConfig, PredictionRow, Router,
};
use crate::dataset::{
    build_gzsl_test_set, build_train_set, random_split, FeatureDataset, GzslTestSet, SplitSpec,
};
use crate::error::{Error, Result};
use crate::models::TrainConfig;
use crate::ood::{train_od, train_od_binary, OdConfig};
use crate::rng::derive_seed;
use crate::wgan::{synthesize, train_gan};

/// Unweighted mean over `class_set` of the within-class accuracy, in
/// percent. Every class in the set must have at least one test row.
pub fn per_class_accuracy(
    true_labels: &[usize],
    pred_labels: &[usize],
    class_set: &[usize],
) -> Result<f64> {
    if true_labels.len() != pred_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            true_labels.len(),
            pred_labels.len()
        )));
    }
    if class_set.is_empty() {
        return Err(Error::EmptyInput("class set is empty".into()));
    }
    let mut total = 0.0;
    for &class in class_set {
        let mut count = 0usize;
        let mut correct = 0usize;
        for (t, p) in true_labels.iter().zip(pred_labels) {
            if *t == class {
                count += 1;
                if p == t {
                    correct += 1;
                }
            }
        }
        if count == 0 {
            return Err(Error::InvalidDataset(format!(
                "class {class} has zero test rows"
            )));
        }
        total += correct as f64 / count as f64;
    }
    Ok(total / class_set.len() as f64 * 100.0)
}

/// `2su / (s + u)`, or 0 when both accuracies are 0.
pub fn harmonic_mean(s: f64, u: f64) -> Result<f64> {
    if s < 0.0 || u < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "accuracies must be nonnegative, got ({s}, {u})"
        )));
    }
    if s + u == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * s * u / (s + u))
}

/// Group-level bias metrics: SC is the percentage of truly-seen rows whose
/// prediction falls in the seen group, UC the same for unseen rows, both
/// ignoring within-group correctness.
pub fn bias_metrics(pred_seen: &[bool], true_seen: &[bool]) -> Result<(f64, f64)> {
    if pred_seen.len() != true_seen.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} truth flags",
            pred_seen.len(),
            true_seen.len()
        )));
    }
    let mut seen_total = 0usize;
    let mut seen_hit = 0usize;
    let mut unseen_total = 0usize;
    let mut unseen_hit = 0usize;
    for (&p, &t) in pred_seen.iter().zip(true_seen) {
        if t {
            seen_total += 1;
            if p {
                seen_hit += 1;
            }
        } else {
            unseen_total += 1;
            if !p {
                unseen_hit += 1;
            }
        }
    }
    if seen_total == 0 || unseen_total == 0 {
        return Err(Error::EmptyInput(
            "bias metrics need rows from both groups".into(),
        ));
    }
    Ok((
        seen_hit as f64 / seen_total as f64 * 100.0,
        unseen_hit as f64 / unseen_total as f64 * 100.0,
    ))
}

/// Cumulative accuracy over rows sorted by confidence (descending), sampled
/// at 1% granularity: point k covers the top `round(k% * n)` rows. The last
/// point equals the plain accuracy over all rows.
pub fn sorted_confidence_curve(rows: &[(f64, bool)]) -> Result<Vec<(f64, f64)>> {
    if rows.is_empty() {
        return Err(Error::EmptyInput("confidence curve needs rows".into()));
    }
    let mut indexed: Vec<(usize, f64, bool)> = rows
        .iter()
        .enumerate()
        .map(|(i, &(c, ok))| (i, c, ok))
        .collect();
    indexed.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let n = rows.len();
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0usize);
    for &(_, _, ok) in &indexed {
        prefix.push(prefix.last().unwrap() + usize::from(ok));
    }
    let mut curve = Vec::with_capacity(100);
    for k in 1..=100usize {
        let m = ((k as f64 / 100.0 * n as f64) + 0.5).floor() as usize;
        let m = m.clamp(1, n);
        curve.push((k as f64 / 100.0, prefix[m] as f64 / m as f64 * 100.0));
    }
    Ok(curve)
}

/// The three evaluated pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    /// Routed pipeline with the entropy detector.
    #[serde(rename = "cewgan-od")]
    CewganOd,
    /// Single joint head, no detector.
    #[serde(rename = "cewgan")]
    Cewgan,
    /// Routed pipeline with the binary detector baseline.
    #[serde(rename = "cewgan-odbin")]
    CewganOdBin,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::CewganOd => "cewgan-od",
            Method::Cewgan => "cewgan",
            Method::CewganOdBin => "cewgan-odbin",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cewgan-od" => Ok(Method::CewganOd),
            "cewgan" => Ok(Method::Cewgan),
            "cewgan-odbin" | "od-bin" | "odbin" => Ok(Method::CewganOdBin),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?}; expected cewgan-od, cewgan or cewgan-odbin"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Router diagnostics recorded for routed methods.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingMetrics {
    pub threshold: f64,
    /// Mean of SC and UC: balanced group-detection accuracy.
    pub detection_acc: f64,
    pub mean_entropy_seen: f64,
    pub mean_entropy_unseen: f64,
}

/// Per-run metrics; serialized verbatim as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub seen_acc: f64,
    pub unseen_acc: f64,
    pub harmonic_mean: f64,
    pub zsl_acc: f64,
    pub bias_sc: f64,
    pub bias_uc: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<RoutingMetrics>,
}

/// Mean and sample standard deviation (n - 1; zero for a single run).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

/// Per-run records plus per-metric aggregates for one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub method: Method,
    pub runs: Vec<RunRecord>,
    pub aggregate: BTreeMap<String, MeanStd>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
}

impl AggregateReport {
    fn from_runs(method: Method, runs: Vec<RunRecord>) -> Self {
        let mut aggregate = BTreeMap::new();
        let collect = |f: &dyn Fn(&RunRecord) -> f64| -> Vec<f64> { runs.iter().map(f).collect() };
        aggregate.insert("seen_acc".into(), mean_std(&collect(&|r| r.seen_acc)));
        aggregate.insert("unseen_acc".into(), mean_std(&collect(&|r| r.unseen_acc)));
        aggregate.insert(
            "harmonic_mean".into(),
            mean_std(&collect(&|r| r.harmonic_mean)),
        );
        aggregate.insert("zsl_acc".into(), mean_std(&collect(&|r| r.zsl_acc)));
        aggregate.insert("bias_sc".into(), mean_std(&collect(&|r| r.bias_sc)));
        aggregate.insert("bias_uc".into(), mean_std(&collect(&|r| r.bias_uc)));
        if runs.iter().all(|r| r.routing.is_some()) && !runs.is_empty() {
            aggregate.insert(
                "detection_acc".into(),
                mean_std(&collect(&|r| r.routing.unwrap().detection_acc)),
            );
            aggregate.insert(
                "threshold".into(),
                mean_std(&collect(&|r| r.routing.unwrap().threshold)),
            );
        }
        AggregateReport {
            method,
            runs,
            aggregate,
            generated_at: None,
        }
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

/// Full configuration of one protocol invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub method: Method,
    pub num_seen: usize,
    /// Number of independent runs (the full-protocol value is 30; desk-scale
    /// default 5).
    pub runs: usize,
    pub base_seed: u64,
    pub seen_test_fraction: f64,
    /// Synthesized rows per unseen class for detector/classifier training;
    /// defaults to the mean per-class count of seen training rows.
    pub per_class_synth: Option<usize>,
    pub train: TrainConfig,
    pub od: OdConfig,
    pub head: HeadConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            method: Method::CewganOd,
            num_seen: 10,
            runs: 5,
            base_seed: 7,
            seen_test_fraction: crate::dataset::DEFAULT_SEEN_TEST_FRACTION,
            per_class_synth: None,
            train: TrainConfig::default(),
            od: OdConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("need at least one run".into()));
        }
        if !(self.seen_test_fraction > 0.0 && self.seen_test_fraction < 1.0) {
            return Err(Error::InvalidConfig(
                "seen_test_fraction must lie in (0, 1)".into(),
            ));
        }
        self.train.validate()?;
        self.od.validate()?;
        self.head.validate()
    }
}

/// Everything produced by one run; the curve feeds the method-level average.
pub struct RunOutput {
    pub record: RunRecord,
    pub curve: Vec<(f64, f64)>,
    pub split: SplitSpec,
}

fn write_curve_csv(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = String::from("fraction,accuracy\n");
    for (f, a) in curve {
        out.push_str(&format!("{f},{a}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Execute one seeded run: split, train the GAN, synthesize unseen features,
/// train the method's detector and heads, evaluate on the GZSL test set, and
/// persist artifacts under `out_dir/<seed>` when given.
pub fn run_single(
    ds: &FeatureDataset,
    cfg: &ProtocolConfig,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunOutput> {
    let mut split = random_split(ds, cfg.num_seen, seed)?;
    split.seen_test_fraction = cfg.seen_test_fraction;
    let test = build_gzsl_test_set(ds, &split)?;
    let train = build_train_set(ds, &split)?;

    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = derive_seed(seed, 1);
    let (gan, history) = train_gan(&train, &train_cfg)?;

    let per_class = cfg.per_class_synth.unwrap_or_else(|| {
        let s = split.seen.len();
        (train.num_rows() + s / 2) / s
    });
    let synth_unseen = synthesize(&gan, ds, &split.unseen, per_class, derive_seed(seed, 2))?;

    let mut od_cfg = cfg.od.clone();
    od_cfg.seed = derive_seed(seed, 3);
    let mut head_cfg = cfg.head.clone();
    head_cfg.seed = derive_seed(seed, 4);

    let train_feats = train.features_f64();
    let synth_feats = synth_unseen.features_f64();

    // the dedicated unseen head serves ZSL for every method
    let unseen_head = train_head(
        synth_feats.view(),
        synth_unseen.labels(),
        &split.unseen,
        &HeadConfig {
            seed: derive_seed(seed, 5),
            ..head_cfg.clone()
        },
    )?;

    enum Pipeline {
        Routed(GzslPredictor),
        Baseline(ClassifierHead),
    }

    let pipeline = match cfg.method {
        Method::Cewgan => Pipeline::Baseline(train_baseline_gzsl(&train, &synth_unseen, &head_cfg)?),
        routed => {
            let seen_head = train_head(
                train_feats.view(),
                train.labels(),
                &split.seen,
                &head_cfg,
            )?;
            let router = match routed {
                Method::CewganOd => Router::Entropy(train_od(&train, &synth_unseen, &od_cfg)?),
                Method::CewganOdBin => {
                    let synth_seen =
                        synthesize(&gan, ds, &split.seen, per_class, derive_seed(seed, 6))?;
                    Router::Binary(train_od_binary(&train, &synth_seen, &synth_unseen, &od_cfg)?)
                }
                Method::Cewgan => unreachable!(),
            };
            Pipeline::Routed(GzslPredictor::new(router, seen_head, unseen_head.clone())?)
        }
    };

    // evaluation over the GZSL test pool
    let test_feats = test.features_f64();
    let n = test.num_rows();
    let mut pred_labels = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    let mut entropies: Vec<Option<f64>> = Vec::with_capacity(n);
    for i in 0..n {
        let feature = test_feats.row(i);
        let (pred, routed_seen, entropy, confidence) = match &pipeline {
            Pipeline::Routed(p) => {
                let d = predict_gzsl_detailed(p, feature)?;
                (d.class_id, Some(d.routed_seen), Some(d.entropy), d.confidence)
            }
            Pipeline::Baseline(head) => {
                let (class, confidence) = head.predict_with_confidence(feature)?;
                (class, None, None, confidence)
            }
        };
        pred_labels.push(pred);
        entropies.push(entropy);
        rows.push(PredictionRow {
            row_index: i,
            true_class: test.labels[i],
            predicted_class: pred,
            routed_seen,
            entropy,
            confidence,
        });
    }

    let seen_acc = per_class_accuracy(&test.labels, &pred_labels, &split.seen)?;
    let unseen_acc = per_class_accuracy(&test.labels, &pred_labels, &split.unseen)?;
    let h = harmonic_mean(seen_acc, unseen_acc)?;

    // ZSL restricted to unseen-class rows through the unseen head alone
    let mut zsl_true = Vec::new();
    let mut zsl_pred = Vec::new();
    for i in 0..n {
        if !test.is_seen_class[i] {
            zsl_true.push(test.labels[i]);
            zsl_pred.push(predict_zsl(&unseen_head, test_feats.row(i))?);
        }
    }
    let zsl_acc = per_class_accuracy(&zsl_true, &zsl_pred, &split.unseen)?;

    let pred_seen_flags: Vec<bool> = pred_labels.iter().map(|&p| split.is_seen(p)).collect();
    let (bias_sc, bias_uc) = bias_metrics(&pred_seen_flags, &test.is_seen_class)?;

    let curve_rows: Vec<(f64, bool)> = (0..n)
        .filter(|&i| !test.is_seen_class[i])
        .map(|i| (rows[i].confidence, pred_labels[i] == test.labels[i]))
        .collect();
    let curve = sorted_confidence_curve(&curve_rows)?;

    let routing = match &pipeline {
        Pipeline::Routed(p) => {
            let mean_over = |keep_seen: bool| {
                let vals: Vec<f64> = (0..n)
                    .filter(|&i| test.is_seen_class[i] == keep_seen)
                    .filter_map(|i| entropies[i])
                    .collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            };
            let threshold = match &p.router {
                Router::Entropy(d) => d.threshold,
                Router::Binary(_) => 0.5,
            };
            Some(RoutingMetrics {
                threshold,
                detection_acc: (bias_sc + bias_uc) / 2.0,
                mean_entropy_seen: mean_over(true),
                mean_entropy_unseen: mean_over(false),
            })
        }
        Pipeline::Baseline(_) => None,
    };

    let record = RunRecord {
        seed,
        seen_acc,
        unseen_acc,
        harmonic_mean: h,
        zsl_acc,
        bias_sc,
        bias_uc,
        routing,
    };

    if let Some(dir) = out_dir {
        let run_dir = dir.join(seed.to_string());
        fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
        split.save(&run_dir.join("split.json"))?;
        history.write_csv(&run_dir.join("loss_history.csv"))?;
        write_predictions_csv(&run_dir.join("predictions.csv"), &rows)?;
        write_curve_csv(&run_dir.join("curve.csv"), &curve)?;
        let ckpt = run_dir.join("checkpoints");
        gan.save(&ckpt.join("gan"))?;
        unseen_head.save(&ckpt.join("unseen_head"))?;
        match &pipeline {
            Pipeline::Routed(p) => {
                p.seen_head.save(&ckpt.join("seen_head"))?;
                match &p.router {
                    Router::Entropy(d) => d.save(&ckpt.join("od"))?,
                    Router::Binary(d) => d.save(&ckpt.join("od_bin"))?,
                }
            }
            Pipeline::Baseline(head) => head.save(&ckpt.join("baseline_head"))?,
        }
        let metrics_path = run_dir.join("metrics.json");
        let json =
            serde_json::to_string_pretty(&record).map_err(|e| Error::json(&metrics_path, e))?;
        fs::write(&metrics_path, json + "\n").map_err(|e| Error::io(&metrics_path, e))?;
    }

    Ok(RunOutput {
        record,
        curve,
        split,
    })
}

/// Run the full protocol: `cfg.runs` independent seeded splits in parallel,
/// each through the complete train/synthesize/detect/classify/evaluate
/// pipeline, aggregated as mean ± std per metric. With an output directory,
/// per-run artifacts, the method-level mean curve and `report.json` are
/// persisted under `<out>/<method>/`.
pub fn run_protocol(
    ds: &FeatureDataset,
    cfg: &ProtocolConfig,
    out_dir: Option<&Path>,
) -> Result<AggregateReport> {
    cfg.validate()?;
    let method_dir: Option<PathBuf> = out_dir.map(|d| d.join(cfg.method.as_str()));
    if let Some(dir) = &method_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let seeds: Vec<u64> = (0..cfg.runs).map(|r| cfg.base_seed + r as u64).collect();
    let outputs: Vec<RunOutput> = seeds
        .par_iter()
        .map(|&seed| {
            run_single(ds, cfg, seed, method_dir.as_deref()).map_err(|e| Error::Run {
                seed,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let records: Vec<RunRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    let mut report = AggregateReport::from_runs(cfg.method, records);

    if let Some(dir) = &method_dir {
        // pointwise mean of the per-run curves
        let mut mean_curve = outputs[0].curve.clone();
        for o in &outputs[1..] {
            for (acc, point) in mean_curve.iter_mut().zip(&o.curve) {
                acc.1 += point.1;
            }
        }
        for point in &mut mean_curve {
            point.1 /= outputs.len() as f64;
        }
        write_curve_csv(&dir.join("curve.csv"), &mean_curve)?;
        report.generated_at = Some(chrono::Utc::now().to_rfc3339());
        report.save(&dir.join("report.json"))?;
    }
    Ok(report)
}

/// Evaluate group-detection accuracy of a routed predictor on a test set:
/// the mean of SC and UC computed from routing decisions alone.
pub fn detection_accuracy(
    predictor: &GzslPredictor,
    features: ArrayView2<f64>,
    is_seen: &[bool],
) -> Result<f64> {
    let mut routed: Vec<bool> = Vec::with_capacity(is_seen.len());
    for i in 0..features.nrows() {
        routed.push(predictor.router.route(features.row(i))?.is_seen);
    }
    let (sc, uc) = bias_metrics(&routed, is_seen)?;
    Ok((sc + uc) / 2.0)
}

/// Re-evaluate a trained routed predictor's group assignment on an
/// arbitrary labeled pool (used by regime-comparison experiments).
pub fn routed_group_flags(
    predictor: &GzslPredictor,
    test: &GzslTestSet,
) -> Result<Vec<bool>> {
    let feats = test.features_f64();
    let mut flags = Vec::with_capacity(test.num_rows());
    for i in 0..test.num_rows() {
        flags.push(predictor.router.route(feats.row(i))?.is_seen);
    }
    Ok(flags)
}
