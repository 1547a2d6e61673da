//! The bone-extraction U-Net: a configurable-depth encoder/decoder with skip
//! connections, a dilated bottleneck, an input Gaussian noise layer and a
//! Tanh output head.
//!
//! Up-sampling is nearest-neighbor x2 followed by a 3x3 convolution (rather
//! than a transposed convolution, which would invite checkerboard artifacts).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, TensorId};
use crate::error::{Error, Result};
use crate::weights::{ModelWeights, NamedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UNetConfig {
    /// Input/output spatial size; must be divisible by 2^depth.
    pub input_size: usize,
    /// Channels of the first encoder level; doubled at each level down.
    pub base_filters: usize,
    /// Number of down/up levels.
    pub depth: usize,
    /// Dilation of the two bottleneck convolutions.
    pub bottleneck_dilation: usize,
    /// Sigma of the input Gaussian noise layer (training mode only).
    pub noise_std: f64,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 512,
            base_filters: 32,
            depth: 4,
            bottleneck_dilation: 2,
            noise_std: 0.2,
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    /// Desk-scale configuration: 64x64 inputs, 8 base filters, 3 levels.
    pub fn toy(init_seed: u64) -> Self {
        UNetConfig {
            input_size: 64,
            base_filters: 8,
            depth: 3,
            init_seed,
            ..UNetConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 {
            return Err(Error::invalid("base_filters", "must be >= 1"));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::invalid("noise_std", "must be non-negative"));
        }
        if self.depth == 0 || self.depth > 8 {
            return Err(Error::invalid("depth", "must be in 1..=8"));
        }
        if self.bottleneck_dilation == 0 {
            return Err(Error::invalid("bottleneck_dilation", "must be >= 1"));
        }
        let div = 1usize << self.depth;
        if self.input_size == 0 || !self.input_size.is_multiple_of(div) {
            return Err(Error::invalid(
                "input_size",
                format!("{} is not divisible by 2^depth = {div}", self.input_size),
            ));
        }
        Ok(())
    }

    /// The ordered (name, shape) layer plan implied by this config.
    fn layer_plan(&self) -> Vec<(String, Vec<usize>)> {
        let b = self.base_filters;
        let mut plan = Vec::new();
        let conv = |plan: &mut Vec<(String, Vec<usize>)>, name: String, cin: usize, cout: usize, k: usize| {
            plan.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            plan.push((format!("{name}.bias"), vec![cout]));
        };
        for i in 0..self.depth {
            let cin = if i == 0 { 1 } else { b << (i - 1) };
            let cout = b << i;
            conv(&mut plan, format!("enc{i}.conv1"), cin, cout, 3);
            conv(&mut plan, format!("enc{i}.conv2"), cout, cout, 3);
        }
        let cb = b << self.depth;
        conv(&mut plan, "bottleneck.conv1".into(), cb / 2, cb, 3);
        conv(&mut plan, "bottleneck.conv2".into(), cb, cb, 3);
        for i in (0..self.depth).rev() {
            let cout = b << i;
            let cin = cout * 2;
            conv(&mut plan, format!("dec{i}.up"), cin, cout, 3);
            conv(&mut plan, format!("dec{i}.conv1"), cin, cout, 3);
            conv(&mut plan, format!("dec{i}.conv2"), cout, cout, 3);
        }
        conv(&mut plan, "head".into(), b, 1, 1);
        plan
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam {
    pub name: String,
    pub value: Array,
}

/// A built U-Net: the config plus its ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    cfg: UNetConfig,
    params: Vec<NamedParam>,
}

/// Graph handles produced by one forward construction.
pub struct ForwardPass {
    pub output: TensorId,
    /// Leaf ids of the parameters, aligned with [`Model::params`].
    pub param_ids: Vec<TensorId>,
}

/// He-normal fan-in initialization, rounded through f32 so freshly built
/// weights survive the f32 disk format bit-exactly.
fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Array {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32 as f64
        })
        .collect();
    Array::from_vec(shape, data).expect("shape matches")
}

/// Builds a model with He-initialized conv kernels and zero biases, seeded by
/// `cfg.init_seed`.
pub fn build(cfg: &UNetConfig) -> Result<Model> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut params = Vec::new();
    for (name, shape) in cfg.layer_plan() {
        let value = if shape.len() == 4 {
            let fan_in = shape[1] * shape[2] * shape[3];
            he_normal(&shape, fan_in, &mut rng)
        } else {
            Array::zeros(&shape)
        };
        params.push(NamedParam { name, value });
    }
    Ok(Model { cfg: *cfg, params })
}

impl Model {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Overwrites parameter values (used by the optimizer). Order and shapes
    /// must match.
    pub fn set_param_values(&mut self, values: Vec<Array>) {
        assert_eq!(values.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(values) {
            assert_eq!(p.value.shape(), v.shape());
            p.value = v;
        }
    }

    fn check_input(&self, batch: &Array) -> Result<()> {
        let (_, c, h, w) = batch.nchw()?;
        if c != 1 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::shape(
                "unet forward",
                format!(
                    "expected (N, 1, {0}, {0}), got {1:?}",
                    self.cfg.input_size,
                    batch.shape()
                ),
            ));
        }
        Ok(())
    }

    /// Records a forward pass for `batch`. With `trainable`, parameter leaves
    /// require grad so a later backward fills them in. Noise fires only when
    /// `training` and is keyed by `noise_seed`.
    pub fn forward(
        &self,
        g: &mut Graph,
        batch: Array,
        training: bool,
        trainable: bool,
        noise_seed: u64,
    ) -> Result<ForwardPass> {
        self.check_input(&batch)?;
        let input = g.leaf(batch, false);
        let param_ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), trainable))
            .collect();
        let output = self.forward_with(g, input, &param_ids, training, noise_seed)?;
        Ok(ForwardPass { output, param_ids })
    }

    /// Forward construction against existing parameter leaves (same order as
    /// [`Model::params`]); lets the gradient checker own the leaves.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        input: TensorId,
        params: &[TensorId],
        training: bool,
        noise_seed: u64,
    ) -> Result<TensorId> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "unet forward",
                format!("expected {} parameter leaves, got {}", self.params.len(), params.len()),
            ));
        }
        let mut cursor = 0usize;
        let conv = |g: &mut Graph, x: TensorId, dilation: usize, cursor: &mut usize| {
            let w = params[*cursor];
            let b = params[*cursor + 1];
            *cursor += 2;
            g.conv2d(x, w, Some(b), dilation)
        };

        let mut x = g.gaussian_noise(input, self.cfg.noise_std, training, noise_seed);
        let mut skips = Vec::with_capacity(self.cfg.depth);
        for _ in 0..self.cfg.depth {
            x = conv(g, x, 1, &mut cursor)?;
            x = g.relu(x);
            x = conv(g, x, 1, &mut cursor)?;
            x = g.relu(x);
            skips.push(x);
            x = g.maxpool2(x)?;
        }
        let d = self.cfg.bottleneck_dilation;
        x = conv(g, x, d, &mut cursor)?;
        x = g.relu(x);
        x = conv(g, x, d, &mut cursor)?;
        x = g.relu(x);
        for skip in skips.into_iter().rev() {
            x = g.upsample_nearest2(x)?;
            x = conv(g, x, 1, &mut cursor)?;
            x = g.concat_channels(x, skip)?;
            x = conv(g, x, 1, &mut cursor)?;
            x = g.relu(x);
            x = conv(g, x, 1, &mut cursor)?;
            x = g.relu(x);
        }
        x = conv(g, x, 1, &mut cursor)?;
        Ok(g.tanh_act(x))
    }

    /// Inference on a batch: no noise, no gradients.
    pub fn infer(&self, batch: Array) -> Result<Array> {
        let mut g = Graph::new();
        let pass = self.forward(&mut g, batch, false, false, 0)?;
        Ok(g.value(pass.output).clone())
    }

    pub fn to_weights(&self) -> ModelWeights {
        ModelWeights {
            tensors: self
                .params
                .iter()
                .map(|p| NamedTensor { name: p.name.clone(), array: p.value.clone() })
                .collect(),
            unet_config: Some(serde_json::to_value(self.cfg).expect("config serializes")),
            ..ModelWeights::default()
        }
    }
}

/// Persists model weights in the shared manifest format. The manifest also
/// embeds the architecture config so a weight file is self-describing.
pub fn save_weights(model: &Model, path: impl AsRef<std::path::Path>) -> Result<()> {
    model.to_weights().save(path)
}

/// Loads weights for a known config, verifying name and shape of every tensor
/// in order.
pub fn load_weights(path: impl AsRef<std::path::Path>, cfg: &UNetConfig) -> Result<Model> {
    cfg.validate()?;
    let weights = ModelWeights::load(path)?;
    let plan = cfg.layer_plan();
    let mut params = Vec::with_capacity(plan.len());
    for (t, (name, shape)) in weights.tensors.iter().zip(&plan) {
        if &t.name != name {
            return Err(Error::WeightMismatch {
                name: name.clone(),
                reason: format!("found tensor {:?} instead", t.name),
            });
        }
        if t.array.shape() != shape.as_slice() {
            return Err(Error::WeightMismatch {
                name: name.clone(),
                reason: format!("shape {:?} does not match config shape {shape:?}", t.array.shape()),
            });
        }
        params.push(NamedParam { name: t.name.clone(), value: t.array.clone() });
    }
    if weights.tensors.len() != plan.len() {
        let first_unmatched = plan
            .get(weights.tensors.len())
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| weights.tensors[plan.len()].name.clone());
        return Err(Error::WeightMismatch {
            name: first_unmatched,
            reason: format!("file has {} tensors, config needs {}", weights.tensors.len(), plan.len()),
        });
    }
    Ok(Model { cfg: *cfg, params })
}

/// Reads the embedded config from a weight manifest, when present.
pub fn embedded_config(path: impl AsRef<std::path::Path>) -> Result<Option<UNetConfig>> {
    let weights = ModelWeights::load(path)?;
    match weights.unet_config {
        Some(v) => {
            let cfg: UNetConfig = serde_json::from_value(v).map_err(|e| {
                Error::invalid("unet_config", format!("embedded config does not parse: {e}"))
            })?;
            Ok(Some(cfg))
        }
        None => Ok(None),
    }
}
