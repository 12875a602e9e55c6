//! A minimal differentiable per-point model and its trainer, small enough to
//! backpropagate by hand and fast enough to demonstrate on a laptop core
//! that the clustering losses actually induce instance separation.
//!
//! Architecture: each point is embedded as its coordinates plus the mean
//! coordinates of its k nearest neighbors (one aggregation round), runs
//! through a shared tanh trunk, then through two small heads. The instance
//! head consumes the trunk features concatenated with the semantic head's
//! logits; by default no gradient flows back through that skip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::losses::{inverse_log_frequency_weights, total_loss, LossWeights};
use crate::mat::{softmax_backward, softmax_rows, Mat};
use crate::types::{hard_labels, ClassTaxonomy, PanopticLabel, Prediction, Scene};

/// Input feature width: own xyz plus neighborhood-mean xyz.
const FEATURE_DIM: usize = 6;

/// Layer sizes and head widths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// N, the number of predictable clusters.
    pub clusters: usize,
    pub trunk_hidden: usize,
    pub sem_hidden: usize,
    pub inst_hidden: usize,
    pub k_neighbors: usize,
    /// Input coordinates are multiplied by this before entering the trunk;
    /// meter-scale scenes would otherwise saturate the tanh layers at init.
    pub feature_scale: f64,
    /// When set (the default), gradients do not flow back through the
    /// semantic→instance skip connection.
    pub detach_skip: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 9,
            clusters: 16,
            trunk_hidden: 48,
            sem_hidden: 24,
            inst_hidden: 48,
            k_neighbors: 8,
            feature_scale: 0.1,
            detach_skip: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.clusters < 1 {
            return Err(Error::InvalidConfig(
                "model needs at least two classes and one cluster".into(),
            ));
        }
        if self.trunk_hidden == 0 || self.sem_hidden == 0 || self.inst_hidden == 0 {
            return Err(Error::InvalidConfig("hidden widths must be positive".into()));
        }
        if !(self.feature_scale > 0.0 && self.feature_scale.is_finite()) {
            return Err(Error::InvalidConfig("feature scale must be positive".into()));
        }
        Ok(())
    }
}

/// Dense layer, weights stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weights: Mat,
    pub bias: Vec<f64>,
}

impl Linear {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            weights: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform init in ±sqrt(6/(fan_in+fan_out)), bias zero.
    fn glorot(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let mut layer = Linear::zeros(out_dim, in_dim);
        for v in layer.weights.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        layer
    }

    fn forward(&self, input: &Mat) -> Mat {
        let mut out = input.mul_transposed(&self.weights);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        out
    }
}

/// A stack of layers with tanh between them; `output_tanh` controls whether
/// the last layer is squashed too (trunk) or left as logits (heads).
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Linear>,
    output_tanh: bool,
}

struct MlpCache {
    /// Input to each layer.
    inputs: Vec<Mat>,
    /// Post-activation output of each layer.
    outputs: Vec<Mat>,
}

impl Mlp {
    fn forward_cached(&self, input: &Mat) -> MlpCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut current = input.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            inputs.push(current.clone());
            let mut out = layer.forward(&current);
            if l + 1 < self.layers.len() || self.output_tanh {
                for v in out.data_mut() {
                    *v = v.tanh();
                }
            }
            outputs.push(out.clone());
            current = out;
        }
        MlpCache { inputs, outputs }
    }

    fn output<'c>(&self, cache: &'c MlpCache) -> &'c Mat {
        cache.outputs.last().expect("mlp has layers")
    }

    /// Backpropagate `d_output` (w.r.t. the post-activation output),
    /// accumulating parameter gradients and returning the input gradient.
    fn backward(&self, cache: &MlpCache, d_output: &Mat, grads: &mut [Linear]) -> Mat {
        let mut d = d_output.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if l + 1 < self.layers.len() || self.output_tanh {
                let act = &cache.outputs[l];
                for (dv, &a) in d.data_mut().iter_mut().zip(act.data()) {
                    *dv *= 1.0 - a * a;
                }
            }
            grads[l].weights.axpy(1.0, &d.transposed_mul(&cache.inputs[l]));
            for r in 0..d.rows() {
                for (g, &dv) in grads[l].bias.iter_mut().zip(d.row(r)) {
                    *g += dv;
                }
            }
            d = d.mul(&layer.weights);
        }
        d
    }
}

/// The per-point model: shared trunk, semantic head, instance head with a
/// concatenation skip from the semantic logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub config: ModelConfig,
    trunk: Mlp,
    sem_head: Mlp,
    inst_head: Mlp,
}

/// Parameter-shaped gradient buffers.
pub struct Gradients {
    trunk: Vec<Linear>,
    sem: Vec<Linear>,
    inst: Vec<Linear>,
}

impl Gradients {
    fn zeros_like(model: &ToyModel) -> Self {
        let zero = |mlp: &Mlp| {
            mlp.layers
                .iter()
                .map(|l| Linear::zeros(l.weights.rows(), l.weights.cols()))
                .collect()
        };
        Gradients {
            trunk: zero(&model.trunk),
            sem: zero(&model.sem_head),
            inst: zero(&model.inst_head),
        }
    }

    fn scale(&mut self, by: f64) {
        for layer in self.iter_mut() {
            layer.weights.scale(by);
            for b in &mut layer.bias {
                *b *= by;
            }
        }
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.trunk
            .iter_mut()
            .chain(self.sem.iter_mut())
            .chain(self.inst.iter_mut())
    }

    fn iter(&self) -> impl Iterator<Item = &Linear> {
        self.trunk.iter().chain(self.sem.iter()).chain(self.inst.iter())
    }

    /// Flattened copy, in the model's canonical parameter order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.iter() {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.bias);
        }
        out
    }
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache {
    trunk: MlpCache,
    sem: MlpCache,
    inst: MlpCache,
    pub sem_prob: Mat,
    pub inst_prob: Mat,
}

impl ToyModel {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trunk = Mlp {
            layers: vec![
                Linear::glorot(config.trunk_hidden, FEATURE_DIM, &mut rng),
                Linear::glorot(config.trunk_hidden, config.trunk_hidden, &mut rng),
            ],
            output_tanh: true,
        };
        let sem_head = Mlp {
            layers: vec![
                Linear::glorot(config.sem_hidden, config.trunk_hidden, &mut rng),
                Linear::glorot(config.num_classes, config.sem_hidden, &mut rng),
            ],
            output_tanh: false,
        };
        let inst_head = Mlp {
            layers: vec![
                Linear::glorot(
                    config.inst_hidden,
                    config.trunk_hidden + config.num_classes,
                    &mut rng,
                ),
                Linear::glorot(config.clusters, config.inst_hidden, &mut rng),
            ],
            output_tanh: false,
        };
        Ok(ToyModel {
            config: *config,
            trunk,
            sem_head,
            inst_head,
        })
    }

    /// All layers in canonical order (trunk, semantic head, instance head).
    fn mlps(&self) -> [&Mlp; 3] {
        [&self.trunk, &self.sem_head, &self.inst_head]
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for mlp in self.mlps() {
            for layer in &mlp.layers {
                out.extend_from_slice(layer.weights.data());
                out.extend_from_slice(&layer.bias);
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut cursor = 0;
        for mlp in [&mut self.trunk, &mut self.sem_head, &mut self.inst_head] {
            for layer in &mut mlp.layers {
                let w = layer.weights.data_mut();
                w.copy_from_slice(&flat[cursor..cursor + w.len()]);
                cursor += w.len();
                let b = layer.bias.len();
                layer.bias.copy_from_slice(&flat[cursor..cursor + b]);
                cursor += b;
            }
        }
        assert_eq!(cursor, flat.len(), "parameter vector length mismatch");
    }

    /// Forward pass over precomputed features, keeping activations. The
    /// instance head sees the trunk features concatenated with the semantic
    /// head's class distribution (softmax output; bounded, unlike the raw
    /// logits, which would drown the spatial features once semantics turn
    /// confident).
    pub fn forward_features(&self, features: &Mat) -> ForwardCache {
        let trunk = self.trunk.forward_cached(features);
        let trunk_out = self.trunk.output(&trunk).clone();
        let sem = self.sem_head.forward_cached(&trunk_out);
        let sem_prob = softmax_rows(self.sem_head.output(&sem));

        let mut inst_input = Mat::zeros(
            features.rows(),
            self.config.trunk_hidden + self.config.num_classes,
        );
        for p in 0..features.rows() {
            let row = inst_input.row_mut(p);
            row[..self.config.trunk_hidden].copy_from_slice(trunk_out.row(p));
            row[self.config.trunk_hidden..].copy_from_slice(sem_prob.row(p));
        }
        let inst = self.inst_head.forward_cached(&inst_input);

        let inst_prob = softmax_rows(self.inst_head.output(&inst));
        ForwardCache {
            trunk,
            sem,
            inst,
            sem_prob,
            inst_prob,
        }
    }

    /// Backward pass from probability-space gradients, accumulating into
    /// `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        sem_prob_grad: &Mat,
        inst_prob_grad: &Mat,
        grads: &mut Gradients,
    ) {
        let points = cache.sem_prob.rows();
        let mut d_inst_logits = Mat::zeros(points, self.config.clusters);
        for p in 0..points {
            let mut row = vec![0.0; self.config.clusters];
            softmax_backward(cache.inst_prob.row(p), inst_prob_grad.row(p), &mut row);
            d_inst_logits.row_mut(p).copy_from_slice(&row);
        }

        let d_inst_input = self
            .inst_head
            .backward(&cache.inst, &d_inst_logits, &mut grads.inst);

        let h = self.config.trunk_hidden;
        let mut d_trunk_out = Mat::zeros(points, h);
        for p in 0..points {
            d_trunk_out
                .row_mut(p)
                .copy_from_slice(&d_inst_input.row(p)[..h]);
        }

        // Gradient w.r.t. the semantic class distribution: the loss term
        // plus, when the skip is attached, the instance head's share.
        let mut d_sem_prob = sem_prob_grad.clone();
        if !self.config.detach_skip {
            for p in 0..points {
                let skip = &d_inst_input.row(p)[h..];
                for (dst, &s) in d_sem_prob.row_mut(p).iter_mut().zip(skip) {
                    *dst += s;
                }
            }
        }
        let mut d_sem_logits = Mat::zeros(points, self.config.num_classes);
        for p in 0..points {
            let mut row = vec![0.0; self.config.num_classes];
            softmax_backward(cache.sem_prob.row(p), d_sem_prob.row(p), &mut row);
            d_sem_logits.row_mut(p).copy_from_slice(&row);
        }

        let d_trunk_from_sem = self
            .sem_head
            .backward(&cache.sem, &d_sem_logits, &mut grads.sem);
        d_trunk_out.axpy(1.0, &d_trunk_from_sem);
        self.trunk.backward(&cache.trunk, &d_trunk_out, &mut grads.trunk);
    }

    fn apply_update(&mut self, update: &Gradients, learning_rate: f64) {
        for (mlp, grads) in [
            (&mut self.trunk, &update.trunk),
            (&mut self.sem_head, &update.sem),
            (&mut self.inst_head, &update.inst),
        ] {
            for (layer, grad) in mlp.layers.iter_mut().zip(grads) {
                layer.weights.axpy(-learning_rate, &grad.weights);
                for (b, &g) in layer.bias.iter_mut().zip(&grad.bias) {
                    *b -= learning_rate * g;
                }
            }
        }
    }
}

/// Own coordinates plus the mean of the k nearest neighbors' coordinates
/// (Euclidean, self excluded, distance ties broken by index), everything
/// multiplied by `scale`.
pub fn scene_features(scene: &Scene, k_neighbors: usize, scale: f64) -> Mat {
    let points = scene.points();
    let n = points.len();
    let mut features = Mat::zeros(n, FEATURE_DIM);
    for p in 0..n {
        let k = k_neighbors.min(n.saturating_sub(1));
        let (mx, my, mz) = if k == 0 {
            (points[p].x, points[p].y, points[p].z)
        } else {
            let mut order: Vec<usize> = (0..n).filter(|&q| q != p).collect();
            order.select_nth_unstable_by(k - 1, |&a, &b| {
                points[p]
                    .dist(&points[a])
                    .total_cmp(&points[p].dist(&points[b]))
                    .then(a.cmp(&b))
            });
            let inv = 1.0 / k as f64;
            let mut sums = (0.0, 0.0, 0.0);
            for &q in &order[..k] {
                sums.0 += points[q].x;
                sums.1 += points[q].y;
                sums.2 += points[q].z;
            }
            (sums.0 * inv, sums.1 * inv, sums.2 * inv)
        };
        let row = features.row_mut(p);
        row[0] = points[p].x * scale;
        row[1] = points[p].y * scale;
        row[2] = points[p].z * scale;
        row[3] = mx * scale;
        row[4] = my * scale;
        row[5] = mz * scale;
    }
    features
}

/// Per-point distributions for a scene. Deterministic in the parameters and
/// input; permuting the points permutes the rows.
pub fn forward(model: &ToyModel, scene: &Scene) -> Result<Prediction> {
    if scene.is_empty() {
        return Err(Error::invalid("forward needs a non-empty scene"));
    }
    let features = scene_features(scene, model.config.k_neighbors, model.config.feature_scale);
    let cache = model.forward_features(&features);
    Prediction::new(cache.sem_prob, cache.inst_prob)
}

/// Forward, argmax both heads, fuse with the semantic mask. No
/// post-processing.
pub fn infer(model: &ToyModel, scene: &Scene, taxonomy: &ClassTaxonomy) -> Result<PanopticLabel> {
    let pred = forward(model, scene)?;
    let (sem, clusters) = hard_labels(&pred);
    fuse(&sem, &clusters, taxonomy)
}

/// Where training scenes come from.
pub trait SceneSource {
    fn scene(&self, index: u64) -> Result<Scene>;
}

/// Scenes drawn from the synthetic generator.
pub struct SynthSource {
    pub config: crate::synth::SynthConfig,
    pub taxonomy: ClassTaxonomy,
}

impl SceneSource for SynthSource {
    fn scene(&self, index: u64) -> Result<Scene> {
        crate::synth::generate(&self.config, &self.taxonomy, index)
    }
}

/// Pre-loaded scenes, cycled by index.
pub struct SliceSource<'a>(pub &'a [Scene]);

impl SceneSource for SliceSource<'_> {
    fn scene(&self, index: u64) -> Result<Scene> {
        if self.0.is_empty() {
            return Err(Error::invalid("scene list is empty"));
        }
        Ok(self.0[(index as usize) % self.0.len()].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
}

/// Trainer settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Scenes per gradient step.
    pub batch_size: usize,
    /// Distinct scenes drawn from the source and cycled during training.
    pub scene_pool: usize,
    pub optimizer: Optimizer,
    pub weights: LossWeights,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 7,
            learning_rate: 0.3,
            iterations: 2000,
            batch_size: 2,
            scene_pool: 96,
            optimizer: Optimizer::Momentum { beta: 0.9 },
            weights: LossWeights::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.scene_pool == 0 {
            return Err(Error::InvalidConfig(
                "batch size and scene pool must be positive".into(),
            ));
        }
        if let Optimizer::Momentum { beta } = self.optimizer {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig("momentum beta must be in [0, 1)".into()));
            }
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Loss curve entry, one per iteration (batch means).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct IterStats {
    pub iteration: usize,
    pub total: f64,
    pub wce: f64,
    pub lovasz: f64,
    pub impurity: f64,
    pub fragmentation: f64,
}

pub struct TrainOutcome {
    pub model: ToyModel,
    pub curve: Vec<IterStats>,
    /// Inverse-log-frequency class weights measured on the scene pool.
    pub class_weights: Vec<f64>,
}

/// Gradient-descent training over a deterministic scene stream. Bitwise
/// reproducible for a fixed config.
pub fn train(
    config: &TrainConfig,
    taxonomy: &ClassTaxonomy,
    source: &dyn SceneSource,
) -> Result<TrainOutcome> {
    config.validate()?;
    if taxonomy.num_classes() as usize != config.model.num_classes {
        return Err(Error::InvalidConfig(format!(
            "model expects {} classes, taxonomy has {}",
            config.model.num_classes,
            taxonomy.num_classes()
        )));
    }

    let pool_size = config.scene_pool;
    let mut scenes = Vec::with_capacity(pool_size);
    let mut features = Vec::with_capacity(pool_size);
    let mut class_counts = vec![0u64; config.model.num_classes];
    for index in 0..pool_size {
        let scene = source.scene(index as u64)?;
        if scene.is_empty() {
            return Err(Error::invalid(format!("scene {index} is empty")));
        }
        for &s in scene.sem_gt() {
            class_counts[s as usize] += 1;
        }
        features.push(scene_features(&scene, config.model.k_neighbors, config.model.feature_scale));
        scenes.push(scene);
    }
    let class_weights = inverse_log_frequency_weights(&class_counts, taxonomy.ignore_id());

    let mut model = ToyModel::init(&config.model, config.seed)?;
    let mut velocity = Gradients::zeros_like(&model);
    let mut curve = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations {
        let mut grads = Gradients::zeros_like(&model);
        let mut stats = IterStats {
            iteration,
            total: 0.0,
            wce: 0.0,
            lovasz: 0.0,
            impurity: 0.0,
            fragmentation: 0.0,
        };
        for b in 0..config.batch_size {
            let idx = (iteration * config.batch_size + b) % pool_size;
            let cache = model.forward_features(&features[idx]);
            let pred = Prediction::new(cache.sem_prob.clone(), cache.inst_prob.clone())?;
            let total = total_loss(
                &scenes[idx],
                &pred,
                &config.weights,
                &class_weights,
                taxonomy,
            )?;
            if !total.value.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    reason: format!("loss became {}", total.value),
                });
            }
            model.backward(&cache, &total.sem_grad, &total.inst_grad, &mut grads);
            stats.total += total.value;
            stats.wce += total.components.wce;
            stats.lovasz += total.components.lovasz;
            stats.impurity += total.components.impurity;
            stats.fragmentation += total.components.fragmentation;
        }
        let inv_batch = 1.0 / config.batch_size as f64;
        grads.scale(inv_batch);
        stats.total *= inv_batch;
        stats.wce *= inv_batch;
        stats.lovasz *= inv_batch;
        stats.impurity *= inv_batch;
        stats.fragmentation *= inv_batch;
        curve.push(stats);

        match config.optimizer {
            Optimizer::Sgd => model.apply_update(&grads, config.learning_rate),
            Optimizer::Momentum { beta } => {
                for (v, g) in velocity.iter_mut().zip(grads.iter()) {
                    v.weights.scale(beta);
                    v.weights.axpy(1.0, &g.weights);
                    for (vb, &gb) in v.bias.iter_mut().zip(&g.bias) {
                        *vb = *vb * beta + gb;
                    }
                }
                model.apply_update(&velocity, config.learning_rate);
            }
        }
    }

    Ok(TrainOutcome {
        model,
        curve,
        class_weights,
    })
}

// --- checkpoint format -----------------------------------------------------
//
//   magic    8 B  "PCMODEL1"
//   version  u32  (1)
//   config   u32 ×6: num_classes, clusters, trunk_hidden, sem_hidden,
//                    inst_hidden, k_neighbors
//   scale    f64  feature scale
//   flags    u8   bit 0: detach_skip
//   layers   u32  layer count, then per layer:
//            u32 out_dim, u32 in_dim, f64 ×(out·in) weights row-major,
//            f64 ×out bias
//
// All little-endian.

const MODEL_MAGIC: &[u8; 8] = b"PCMODEL1";
const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(path: impl AsRef<std::path::Path>, model: &ToyModel) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [
        model.config.num_classes,
        model.config.clusters,
        model.config.trunk_hidden,
        model.config.sem_hidden,
        model.config.inst_hidden,
        model.config.k_neighbors,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&model.config.feature_scale.to_le_bytes());
    out.push(u8::from(model.config.detach_skip));
    let layers: Vec<&Linear> = model.mlps().iter().flat_map(|m| &m.layers).collect();
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for layer in layers {
        out.extend_from_slice(&(layer.weights.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(layer.weights.cols() as u32).to_le_bytes());
        for &v in layer.weights.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &layer.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<std::path::Path>) -> Result<ToyModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    let fail = |reason: &str| Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    };
    if bytes.len() < 50 || &bytes[..8] != MODEL_MAGIC {
        return Err(fail("missing model magic"));
    }
    let u32_at = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|s| u32::from_le_bytes(s.try_into().expect("4-byte slice")))
            .ok_or_else(|| fail("unexpected end of file"))
    };
    if u32_at(8)? != CHECKPOINT_VERSION {
        return Err(fail("unsupported checkpoint version"));
    }
    let config = ModelConfig {
        num_classes: u32_at(12)? as usize,
        clusters: u32_at(16)? as usize,
        trunk_hidden: u32_at(20)? as usize,
        sem_hidden: u32_at(24)? as usize,
        inst_hidden: u32_at(28)? as usize,
        k_neighbors: u32_at(32)? as usize,
        feature_scale: f64::from_le_bytes(bytes[36..44].try_into().expect("8-byte slice")),
        detach_skip: bytes[44] != 0,
    };
    let layer_count = u32_at(45)? as usize;

    let mut model = ToyModel::init(&config, 0)?;
    let expected: Vec<(usize, usize)> = model
        .mlps()
        .iter()
        .flat_map(|m| &m.layers)
        .map(|l| (l.weights.rows(), l.weights.cols()))
        .collect();
    if layer_count != expected.len() {
        return Err(fail("layer count does not match the architecture"));
    }

    let mut cursor = 49;
    let mut flat = Vec::new();
    for (out_dim, in_dim) in expected {
        let rows = u32_at(cursor)? as usize;
        let cols = u32_at(cursor + 4)? as usize;
        if rows != out_dim || cols != in_dim {
            return Err(fail("layer shape does not match the architecture"));
        }
        cursor += 8;
        let values = rows * cols + rows;
        if bytes.len() < cursor + values * 8 {
            return Err(fail("unexpected end of file"));
        }
        for _ in 0..values {
            flat.push(f64::from_le_bytes(
                bytes[cursor..cursor + 8].try_into().expect("8-byte slice"),
            ));
            cursor += 8;
        }
    }
    if cursor != bytes.len() {
        return Err(fail("trailing bytes after parameters"));
    }
    model.set_params_flat(&flat);
    Ok(model)
}
