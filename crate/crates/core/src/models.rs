//! Network building blocks shared by every trainable component: layer
//! specifications, parameter bundles, forward/backward passes, the Adam
//! optimizer, and the flat-f32 checkpoint format.
//!
//! All arithmetic is `f64`; checkpoints are stored as little-endian `f32`
//! (`params.f32` + `shape.json` per model directory).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded_rng};

/// Hidden-layer activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    /// Negative-side slope of the leaky variant.
    pub const LEAKY_SLOPE: f64 = 0.2;

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    Self::LEAKY_SLOPE * z
                }
            }
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if z > 0.0 {
                    1.0
                } else {
                    Self::LEAKY_SLOPE
                }
            }
        }
    }
}

/// Activation applied to the final layer by [`forward`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    None,
    Softmax,
}

/// Fully-connected network shape: `layer_sizes[0]` inputs through hidden
/// layers to `layer_sizes[last]` outputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        hidden_activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an MLP needs at least input and output sizes, got {:?}",
                layer_sizes
            )));
        }
        if let Some(&w) = layer_sizes.iter().find(|&&w| w == 0) {
            return Err(Error::InvalidConfig(format!(
                "zero-width layer in {:?} (width {})",
                layer_sizes, w
            )));
        }
        Ok(MlpSpec {
            layer_sizes,
            hidden_activation,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Total scalar parameter count (weights + biases).
    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }
}

/// Weight matrices (`fan_in x fan_out`) and bias vectors, one per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpParams {
    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn matches_spec(&self, spec: &MlpSpec) -> bool {
        self.weights.len() == spec.num_layers()
            && self.biases.len() == spec.num_layers()
            && self
                .weights
                .iter()
                .zip(spec.layer_sizes.windows(2))
                .all(|(w, s)| w.dim() == (s[0], s[1]))
            && self
                .biases
                .iter()
                .zip(spec.layer_sizes.iter().skip(1))
                .all(|(b, &n)| b.len() == n)
    }
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    /// `self += scale * other`, used to combine loss terms.
    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.scaled_add(scale, b);
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            a.scaled_add(scale, b);
        }
    }
}

/// Initialize parameters for `spec`: weights from a scaled-uniform
/// distribution `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`
/// (Glorot uniform), biases zero. Deterministic per seed.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> MlpParams {
    let mut rng = seeded_rng(seed);
    let mut weights = Vec::with_capacity(spec.num_layers());
    let mut biases = Vec::with_capacity(spec.num_layers());
    for dims in spec.layer_sizes.windows(2) {
        let (fan_in, fan_out) = (dims[0], dims[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        weights.push(w);
        biases.push(Array1::zeros(fan_out));
    }
    MlpParams { weights, biases }
}

/// Pre- and post-activation values recorded during a forward pass.
///
/// `post[0]` is the input, `post[l + 1]` the output of layer `l` (after the
/// hidden activation; the final entry holds raw logits). `pre[l]` is layer
/// `l`'s pre-activation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pre: Vec<Array2<f64>>,
    pub post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn logits(&self) -> &Array2<f64> {
        self.post.last().unwrap()
    }
}

fn check_input_width(spec: &MlpSpec, input: &ArrayView2<f64>) -> Result<()> {
    if input.ncols() != spec.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input width {} does not match first layer size {}",
            input.ncols(),
            spec.input_dim()
        )));
    }
    Ok(())
}

/// Run the network, returning logits and the cache needed by [`backward`].
/// The output activation is *not* applied here.
pub fn forward_cached(
    params: &MlpParams,
    spec: &MlpSpec,
    input: ArrayView2<f64>,
) -> Result<ForwardCache> {
    check_input_width(spec, &input)?;
    if !params.matches_spec(spec) {
        return Err(Error::ShapeMismatch(
            "parameter bundle does not match the spec".into(),
        ));
    }
    let layers = spec.num_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut post = Vec::with_capacity(layers + 1);
    post.push(input.to_owned());
    for l in 0..layers {
        let z = post[l].dot(&params.weights[l]) + &params.biases[l];
        let a = if l + 1 < layers {
            z.mapv(|v| spec.hidden_activation.apply(v))
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(a);
    }
    Ok(ForwardCache { pre, post })
}

/// Full forward pass; applies the output activation.
pub fn forward(params: &MlpParams, spec: &MlpSpec, input: ArrayView2<f64>) -> Result<Array2<f64>> {
    let cache = forward_cached(params, spec, input)?;
    let logits = cache.post.into_iter().next_back().unwrap();
    Ok(match spec.output_activation {
        OutputActivation::None => logits,
        OutputActivation::Softmax => softmax_rows(logits.view()),
    })
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Reverse pass from a gradient w.r.t. the logits. Returns parameter
/// gradients and the gradient w.r.t. the network input.
pub fn backward(
    params: &MlpParams,
    spec: &MlpSpec,
    cache: &ForwardCache,
    grad_logits: &Array2<f64>,
) -> (MlpGrads, Array2<f64>) {
    let layers = spec.num_layers();
    let mut grads = MlpGrads::zeros_like(params);
    let mut g = grad_logits.clone(); // dL/d pre[l] for the current layer
    for l in (0..layers).rev() {
        grads.weights[l] = cache.post[l].t().dot(&g);
        grads.biases[l] = g.sum_axis(Axis(0));
        let da = g.dot(&params.weights[l].t());
        if l > 0 {
            let dphi = cache.pre[l - 1].mapv(|z| spec.hidden_activation.derivative(z));
            g = da * dphi;
        } else {
            g = da;
        }
    }
    (grads, g)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First/second moment estimates for one parameter bundle.
#[derive(Debug, Clone)]
pub struct AdamState {
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState {
            m_w: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            v_w: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            m_b: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            v_b: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update (beta1 = 0.9, beta2 = 0.999, eps = 1e-8) applied in place.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &MlpGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.weights.len() != params.weights.len()
        || grads
            .weights
            .iter()
            .zip(&params.weights)
            .any(|(g, p)| g.dim() != p.dim())
        || grads
            .biases
            .iter()
            .zip(&params.biases)
            .any(|(g, p)| g.len() != p.len())
    {
        return Err(Error::ShapeMismatch(
            "gradient shapes do not match parameters".into(),
        ));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for l in 0..params.weights.len() {
        update_tensor(
            &mut params.weights[l],
            &grads.weights[l],
            &mut state.m_w[l],
            &mut state.v_w[l],
            lr,
            bc1,
            bc2,
        );
        update_tensor(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.m_b[l],
            &mut state.v_b[l],
            lr,
            bc1,
            bc2,
        );
    }
    Ok(())
}

fn update_tensor<D: ndarray::Dimension>(
    p: &mut ndarray::Array<f64, D>,
    g: &ndarray::Array<f64, D>,
    m: &mut ndarray::Array<f64, D>,
    v: &mut ndarray::Array<f64, D>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(p)
        .and(g)
        .and(m)
        .and(v)
        .for_each(|p, &g, m, v| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
}

/// A spec plus its parameters; the unit that gets checkpointed.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Self {
        let params = init_mlp(&spec, seed);
        Mlp { spec, params }
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> Result<Array2<f64>> {
        forward(&self.params, &self.spec, input)
    }

    pub fn forward_cached(&self, input: ArrayView2<f64>) -> Result<ForwardCache> {
        forward_cached(&self.params, &self.spec, input)
    }

    /// Write `params.f32` (flat little-endian f32, layer order: W0, b0, W1,
    /// b1, ... with row-major weights) and `shape.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let shape_path = dir.join("shape.json");
        let json = serde_json::to_string_pretty(&self.spec)
            .map_err(|e| Error::json(&shape_path, e))?;
        fs::write(&shape_path, json + "\n").map_err(|e| Error::io(&shape_path, e))?;

        let mut bytes = Vec::with_capacity(self.params.num_params() * 4);
        for l in 0..self.params.weights.len() {
            for &v in self.params.weights[l].iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            for &v in self.params.biases[l].iter() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let params_path = dir.join("params.f32");
        fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let shape_path = dir.join("shape.json");
        let text = fs::read_to_string(&shape_path).map_err(|e| Error::io(&shape_path, e))?;
        let spec: MlpSpec =
            serde_json::from_str(&text).map_err(|e| Error::json(&shape_path, e))?;
        let spec = MlpSpec::new(spec.layer_sizes, spec.hidden_activation, spec.output_activation)?;

        let params_path = dir.join("params.f32");
        let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
        let expected = spec.num_params() * 4;
        if bytes.len() != expected {
            return Err(Error::InvalidDataset(format!(
                "dimension mismatch: {} holds {} bytes, expected {}",
                params_path.display(),
                bytes.len(),
                expected
            )));
        }
        let mut vals = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
        let mut weights = Vec::with_capacity(spec.num_layers());
        let mut biases = Vec::with_capacity(spec.num_layers());
        for dims in spec.layer_sizes.windows(2) {
            let (fan_in, fan_out) = (dims[0], dims[1]);
            let w: Vec<f64> = vals.by_ref().take(fan_in * fan_out).collect();
            weights.push(Array2::from_shape_vec((fan_in, fan_out), w).unwrap());
            let b: Vec<f64> = vals.by_ref().take(fan_out).collect();
            biases.push(Array1::from_vec(b));
        }
        Ok(Mlp {
            spec,
            params: MlpParams { weights, biases },
        })
    }
}

/// Gaussian noise specification for the generator input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub d_z: usize,
}

impl NoiseSpec {
    pub fn new(d_z: usize) -> Result<Self> {
        if d_z == 0 {
            return Err(Error::InvalidConfig("noise dimension must be positive".into()));
        }
        Ok(NoiseSpec { d_z })
    }

    /// Draw `rows` standard-normal noise vectors.
    pub fn sample(&self, rows: usize, rng: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, self.d_z), |_| rng.sample(rand_distr::StandardNormal))
    }
}

/// Generator, critic and decoder bundles with their noise dimension.
///
/// Shapes: generator `[d_z + d_e, h, h, d_x]` (ReLU), critic
/// `[d_x + d_e, h, 1]` (LeakyReLU, exactly one hidden layer), decoder
/// `[d_x, h, h, d_e]` (ReLU). All outputs are linear.
#[derive(Debug, Clone)]
pub struct GanModel {
    pub generator: Mlp,
    pub discriminator: Mlp,
    pub decoder: Mlp,
    pub d_z: usize,
}

impl GanModel {
    pub fn new(d_x: usize, d_e: usize, d_z: usize, hidden: usize, seed: u64) -> Result<Self> {
        if d_x == 0 || d_e == 0 || d_z == 0 || hidden == 0 {
            return Err(Error::InvalidConfig(
                "feature, embedding, noise and hidden dimensions must be positive".into(),
            ));
        }
        let generator = Mlp::new(
            MlpSpec::new(
                vec![d_z + d_e, hidden, hidden, d_x],
                Activation::Relu,
                OutputActivation::None,
            )?,
            derive_seed(seed, 0),
        );
        let discriminator = Mlp::new(
            MlpSpec::new(
                vec![d_x + d_e, hidden, 1],
                Activation::LeakyRelu,
                OutputActivation::None,
            )?,
            derive_seed(seed, 1),
        );
        let decoder = Mlp::new(
            MlpSpec::new(
                vec![d_x, hidden, hidden, d_e],
                Activation::Relu,
                OutputActivation::None,
            )?,
            derive_seed(seed, 2),
        );
        let model = GanModel {
            generator,
            discriminator,
            decoder,
            d_z,
        };
        model.validate()?;
        Ok(model)
    }

    /// Feature dimension produced by the generator.
    pub fn feature_dim(&self) -> usize {
        self.generator.spec.output_dim()
    }

    /// Embedding dimension the model is conditioned on.
    pub fn embedding_dim(&self) -> usize {
        self.decoder.spec.output_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.discriminator.spec.num_layers() != 2 {
            return Err(Error::InvalidConfig(
                "the critic must have exactly one hidden layer".into(),
            ));
        }
        if self.generator.spec.layer_sizes[1] != self.decoder.spec.layer_sizes[1] {
            return Err(Error::InvalidConfig(
                "generator and decoder hidden widths must match".into(),
            ));
        }
        if self.generator.spec.input_dim() != self.d_z + self.embedding_dim() {
            return Err(Error::InvalidConfig(
                "generator input must be noise plus embedding".into(),
            ));
        }
        if self.discriminator.spec.input_dim() != self.feature_dim() + self.embedding_dim() {
            return Err(Error::InvalidConfig(
                "critic input must be feature plus embedding".into(),
            ));
        }
        if self.decoder.spec.input_dim() != self.feature_dim() {
            return Err(Error::InvalidConfig(
                "decoder input must be the feature dimension".into(),
            ));
        }
        Ok(())
    }

    /// Save all three sub-models plus `gan.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.generator.save(&dir.join("generator"))?;
        self.discriminator.save(&dir.join("discriminator"))?;
        self.decoder.save(&dir.join("decoder"))?;
        let meta_path = dir.join("gan.json");
        let json = serde_json::to_string_pretty(&serde_json::json!({ "d_z": self.d_z }))
            .map_err(|e| Error::json(&meta_path, e))?;
        fs::write(&meta_path, json + "\n").map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("gan.json");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        #[derive(Deserialize)]
        struct GanMeta {
            d_z: usize,
        }
        let meta: GanMeta =
            serde_json::from_str(&text).map_err(|e| Error::json(&meta_path, e))?;
        let model = GanModel {
            generator: Mlp::load(&dir.join("generator"))?,
            discriminator: Mlp::load(&dir.join("discriminator"))?,
            decoder: Mlp::load(&dir.join("decoder"))?,
            d_z: meta.d_z,
        };
        model.validate()?;
        Ok(model)
    }
}

fn default_alpha() -> f64 {
    10.0
}
fn default_beta() -> f64 {
    0.01
}
fn default_gamma() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    60
}
fn default_critic_steps() -> usize {
    5
}
fn default_dz() -> usize {
    32
}
fn default_hidden() -> usize {
    256
}
fn default_seed() -> u64 {
    7
}

/// Adversarial training configuration.
///
/// Loss weights follow the published setting (`beta` 0.01, `gamma` 0.1,
/// Adam at 1e-4); `alpha` is the standard gradient-penalty coefficient.
/// `hidden` defaults to the desk-scale width 256 (the full-scale experiments
/// use 4096).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Gradient-penalty coefficient.
    pub alpha: f64,
    /// Cycle-consistency weight.
    pub beta: f64,
    /// Cosine-embedding weight.
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub critic_steps_per_gen_step: usize,
    pub d_z: usize,
    /// Hidden width for generator, critic and decoder.
    pub hidden: usize,
    pub seed: u64,
    /// Use the squared Euclidean norm in the cycle loss instead of the
    /// plain norm.
    pub squared_cycle: bool,
    /// Additionally train the decoder to reconstruct embeddings from real
    /// features.
    pub decode_real_features: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: default_alpha(),
            beta: default_beta(),
            gamma: default_gamma(),
            lr: default_lr(),
            batch_size: default_batch(),
            epochs: default_epochs(),
            critic_steps_per_gen_step: default_critic_steps(),
            d_z: default_dz(),
            hidden: default_hidden(),
            seed: default_seed(),
            squared_cycle: false,
            decode_real_features: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma < 0.0 {
            return Err(Error::InvalidConfig(
                "loss coefficients must be nonnegative".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.critic_steps_per_gen_step == 0 {
            return Err(Error::InvalidConfig(
                "critic steps per generator step must be at least 1".into(),
            ));
        }
        if self.d_z == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "noise and hidden dimensions must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = MlpSpec::new(vec![4, 8, 2], Activation::Relu, OutputActivation::None).unwrap();
        let a = init_mlp(&spec, 123);
        let b = init_mlp(&spec, 123);
        assert_eq!(a, b);
        let c = init_mlp(&spec, 124);
        assert_ne!(a, c);
    }

    #[test]
    fn param_count_matches_hand_arithmetic() {
        let spec = MlpSpec::new(vec![4, 8, 2], Activation::Relu, OutputActivation::None).unwrap();
        assert_eq!(spec.num_params(), 4 * 8 + 8 + 8 * 2 + 2);
        assert_eq!(init_mlp(&spec, 0).num_params(), 58);
    }

    #[test]
    fn zero_width_layer_is_rejected() {
        let err = MlpSpec::new(vec![4, 0, 2], Activation::Relu, OutputActivation::None);
        assert!(err.is_err());
        assert!(MlpSpec::new(vec![4], Activation::Relu, OutputActivation::None).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, OutputActivation::None).unwrap();
        let mut params = init_mlp(&spec, 1);
        for w in &mut params.weights {
            w.fill(0.0);
        }
        let x = array![[1.0, -2.0, 3.0], [0.5, 0.0, -1.0]];
        let y = forward(&params, &spec, x.view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let spec = MlpSpec::new(vec![3, 5], Activation::Relu, OutputActivation::Softmax).unwrap();
        let params = init_mlp(&spec, 2);
        let x = array![[0.3, -1.2, 2.0], [5.0, 5.0, 5.0], [100.0, -30.0, 7.0]];
        let y = forward(&params, &spec, x.view()).unwrap();
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_linear_layer_matches_hand_computation() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputActivation::None).unwrap();
        let params = MlpParams {
            weights: vec![array![[1.0, 2.0], [3.0, -1.0]]],
            biases: vec![array![0.5, -0.5]],
        };
        let x = array![[1.0, 1.0], [2.0, -1.0]];
        let y = forward(&params, &spec, x.view()).unwrap();
        // w * x + b computed by hand
        assert_eq!(y, array![[4.5, 0.5], [-0.5, 4.5]]);
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, OutputActivation::None).unwrap();
        let params = init_mlp(&spec, 0);
        let x = Array2::<f64>::zeros((2, 4));
        assert!(forward(&params, &spec, x.view()).is_err());
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, OutputActivation::None).unwrap();
        let mut params = init_mlp(&spec, 3);
        let before = params.clone();
        let grads = MlpGrads::zeros_like(&params);
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.01).unwrap();
        assert_eq!(params, before);
    }

    // One-step oracle, computed by hand from the update rule: starting from
    // zero state with a constant gradient g, the first step moves each
    // parameter by lr * |g| / (|g| + eps), i.e. almost exactly lr.
    #[test]
    fn adam_first_step_magnitude_is_almost_lr() {
        let spec = MlpSpec::new(vec![2, 2], Activation::Relu, OutputActivation::None).unwrap();
        let mut params = MlpParams {
            weights: vec![Array2::zeros((2, 2))],
            biases: vec![Array1::zeros(2)],
        };
        let g = 0.5;
        let grads = MlpGrads {
            weights: vec![Array2::from_elem((2, 2), g)],
            biases: vec![Array1::from_elem(2, g)],
        };
        let mut state = AdamState::new(&params);
        let lr = 0.01;
        adam_step(&mut params, &grads, &mut state, lr).unwrap();
        let expected = lr * g / (g + 1e-8);
        for &v in params.weights[0].iter().chain(params.biases[0].iter()) {
            assert!((v + expected).abs() < 1e-12, "step was {v}, expected {}", -expected);
            assert!((v.abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_trajectories_are_deterministic() {
        let spec = MlpSpec::new(vec![3, 4, 2], Activation::Relu, OutputActivation::None).unwrap();
        let run = || {
            let mut params = init_mlp(&spec, 5);
            let mut state = AdamState::new(&params);
            let mut rng = seeded_rng(11);
            for _ in 0..20 {
                let grads = MlpGrads {
                    weights: params
                        .weights
                        .iter()
                        .map(|w| Array2::from_shape_fn(w.dim(), |_| rng.random_range(-1.0..1.0)))
                        .collect(),
                    biases: params
                        .biases
                        .iter()
                        .map(|b| Array1::from_shape_fn(b.len(), |_| rng.random_range(-1.0..1.0)))
                        .collect(),
                };
                adam_step(&mut params, &grads, &mut state, 1e-3).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_shape_mismatch_is_an_error() {
        let spec = MlpSpec::new(vec![3, 2], Activation::Relu, OutputActivation::None).unwrap();
        let mut params = init_mlp(&spec, 0);
        let other = init_mlp(
            &MlpSpec::new(vec![4, 2], Activation::Relu, OutputActivation::None).unwrap(),
            0,
        );
        let grads = MlpGrads {
            weights: other.weights.clone(),
            biases: other.biases.clone(),
        };
        let mut state = AdamState::new(&params);
        assert!(adam_step(&mut params, &grads, &mut state, 0.01).is_err());
    }

    /// Central finite differences of a scalar loss w.r.t. every parameter.
    pub(crate) fn finite_diff_grads(
        params: &MlpParams,
        loss: &mut dyn FnMut(&MlpParams) -> f64,
    ) -> MlpGrads {
        let mut fd = MlpGrads::zeros_like(params);
        let mut work = params.clone();
        for l in 0..params.weights.len() {
            for idx in 0..params.weights[l].len() {
                let orig = work.weights[l].as_slice().unwrap()[idx];
                let h = 1e-5 * orig.abs().max(1.0);
                work.weights[l].as_slice_mut().unwrap()[idx] = orig + h;
                let up = loss(&work);
                work.weights[l].as_slice_mut().unwrap()[idx] = orig - h;
                let down = loss(&work);
                work.weights[l].as_slice_mut().unwrap()[idx] = orig;
                fd.weights[l].as_slice_mut().unwrap()[idx] = (up - down) / (2.0 * h);
            }
            for idx in 0..params.biases[l].len() {
                let orig = work.biases[l][idx];
                let h = 1e-5 * orig.abs().max(1.0);
                work.biases[l][idx] = orig + h;
                let up = loss(&work);
                work.biases[l][idx] = orig - h;
                let down = loss(&work);
                work.biases[l][idx] = orig;
                fd.biases[l][idx] = (up - down) / (2.0 * h);
            }
        }
        fd
    }

    /// Relative error between two gradient bundles, as vector norms.
    pub(crate) fn grad_relative_error(a: &MlpGrads, b: &MlpGrads) -> f64 {
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for (x, y) in a.weights.iter().zip(&b.weights) {
            for (u, v) in x.iter().zip(y.iter()) {
                diff += (u - v) * (u - v);
                na += u * u;
                nb += v * v;
            }
        }
        for (x, y) in a.biases.iter().zip(&b.biases) {
            for (u, v) in x.iter().zip(y.iter()) {
                diff += (u - v) * (u - v);
                na += u * u;
                nb += v * v;
            }
        }
        diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-8)
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let spec =
            MlpSpec::new(vec![5, 4, 3], Activation::Relu, OutputActivation::Softmax).unwrap();
        for seed in 0..5u64 {
            let params = init_mlp(&spec, seed);
            let mut rng = seeded_rng(derive_seed(seed, 99));
            let x = Array2::from_shape_fn((6, 5), |_| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();

            let mut ce = |p: &MlpParams| {
                let probs = softmax_rows(forward_cached(p, &spec, x.view()).unwrap().logits().view());
                -labels
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| probs[(i, y)].max(1e-12).ln())
                    .sum::<f64>()
                    / labels.len() as f64
            };

            let cache = forward_cached(&params, &spec, x.view()).unwrap();
            let probs = softmax_rows(cache.logits().view());
            let mut dz = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                dz[(i, y)] -= 1.0;
            }
            dz /= labels.len() as f64;
            let (analytic, _) = backward(&params, &spec, &cache, &dz);
            let fd = finite_diff_grads(&params, &mut ce);
            let rel = grad_relative_error(&analytic, &fd);
            assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let spec =
            MlpSpec::new(vec![4, 6, 3], Activation::Relu, OutputActivation::None).unwrap();
        for seed in 0..5u64 {
            let params = init_mlp(&spec, seed);
            let mut rng = seeded_rng(derive_seed(seed, 17));
            let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
            let y = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));

            let mut mse = |p: &MlpParams| {
                let out = forward(p, &spec, x.view()).unwrap();
                (&out - &y).mapv(|v| v * v).sum() / out.len() as f64
            };

            let cache = forward_cached(&params, &spec, x.view()).unwrap();
            let dz = (cache.logits() - &y) * (2.0 / (x.nrows() * 3) as f64);
            let (analytic, _) = backward(&params, &spec, &cache, &dz);
            let fd = finite_diff_grads(&params, &mut mse);
            let rel = grad_relative_error(&analytic, &fd);
            assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_f32_values() {
        let dir = tempfile::tempdir().unwrap();
        let spec =
            MlpSpec::new(vec![3, 5, 2], Activation::LeakyRelu, OutputActivation::Softmax).unwrap();
        let model = Mlp::new(spec, 99);
        model.save(dir.path()).unwrap();
        let loaded = Mlp::load(dir.path()).unwrap();
        assert_eq!(loaded.spec, model.spec);
        for (a, b) in loaded.params.weights.iter().zip(&model.params.weights) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn gan_model_shapes_follow_the_architecture() {
        let gan = GanModel::new(64, 16, 32, 128, 7).unwrap();
        assert_eq!(gan.generator.spec.layer_sizes, vec![48, 128, 128, 64]);
        assert_eq!(gan.discriminator.spec.layer_sizes, vec![80, 128, 1]);
        assert_eq!(gan.decoder.spec.layer_sizes, vec![64, 128, 128, 16]);
        assert_eq!(gan.discriminator.spec.num_layers(), 2);
        gan.validate().unwrap();
    }

    #[test]
    fn gan_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let gan = GanModel::new(8, 4, 6, 10, 3).unwrap();
        gan.save(dir.path()).unwrap();
        let loaded = GanModel::load(dir.path()).unwrap();
        assert_eq!(loaded.d_z, 6);
        assert_eq!(loaded.generator.spec, gan.generator.spec);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut bad = TrainConfig::default();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = TrainConfig::default();
        bad.beta = -0.1;
        assert!(bad.validate().is_err());
    }
}
