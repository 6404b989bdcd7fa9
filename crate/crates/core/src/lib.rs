//! Generalized zero-shot classification on fixed-dimension feature vectors.
//!
//! A conditional Wasserstein GAN with gradient penalty synthesizes features
//! for classes that have no real training data; an entropy-trained
//! out-of-distribution detector routes test features to separate seen/unseen
//! classifiers; an evaluation harness runs the seeded multi-split protocol
//! and reports per-class accuracies, harmonic means and the seen-class bias
//! table.
//!
//! Modules:
//! - [`dataset`]: data model, on-disk formats, splits, synthetic benchmark,
//!   attribute transfer
//! - [`models`]: MLP specs, init, forward/backward, Adam, checkpoints
//! - [`wgan`]: adversarial losses, the training loop, feature synthesis
//! - [`ood`]: entropy loss, detector training, threshold selection, routing
//! - [`classify`]: classifier heads and routed GZSL/ZSL inference
//! - [`eval`]: metrics, the multi-run protocol, reports

pub mod classify;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod models;
pub mod ood;
pub mod rng;
pub mod wgan;

pub use classify::{ClassifierHead, GzslPredictor, HeadConfig, Router};
pub use dataset::{
    build_gzsl_test_set, build_train_set, load_dataset, make_synthetic_benchmark, random_split,
    save_dataset, transfer_attributes, FeatureDataset, FeatureOrigin, GzslTestSet,
    SplitSpec, SyntheticBenchmarkConfig, TransferConfig,
};
pub use error::{Error, Result};
pub use eval::{
    bias_metrics, harmonic_mean, per_class_accuracy, run_protocol, sorted_confidence_curve,
    AggregateReport, Method, ProtocolConfig, RunRecord,
};
pub use models::{
    adam_step, forward, init_mlp, Activation, AdamState, GanModel, Mlp, MlpGrads, MlpParams,
    MlpSpec, NoiseSpec, OutputActivation, TrainConfig,
};
pub use ood::{
    entropy, entropy_loss, entropy_loss_grads, select_threshold, train_od, train_od_binary,
    OdBinaryDetector, OdConfig, OdDetector, RoutingDecision,
};
pub use wgan::{
    cosine_embedding_loss, critic_gradient_norms, critic_loss, critic_loss_grads, cycle_loss,
    generator_loss_grads, generator_wgan_term, pair_minibatch, synthesize, train_gan,
    train_gan_with_probe, Batch, GeneratorLoss, LossHistory, PairSet,
};
