//! Reconstruction losses: plain L1, nodule-weighted L1, and the
//! feature-reconstruction (perceptual) loss through a fixed convolutional
//! loss network.
//!
//! The loss network is the VGG16-block2 shape (two 64-channel convs, a pool,
//! two 128-channel convs; tap after the final ReLU). Its weights come from a
//! file in the shared manifest format or from a seeded He initialization; the
//! mathematical contract is identical either way, and the weights are never
//! trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, TensorId};
use crate::error::{Error, Result};
use crate::unet::NamedParam;
use crate::weights::{ModelWeights, NamedTensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WeightedL1Config {
    /// Extra weight on pixels inside the projected nodule mask.
    pub nodule_weight: f64,
}

impl Default for WeightedL1Config {
    fn default() -> Self {
        WeightedL1Config { nodule_weight: 30.0 }
    }
}

/// Mean |pred - target|.
pub fn l1_loss(g: &mut Graph, pred: TensorId, target: TensorId) -> Result<TensorId> {
    g.reduce_l1(pred, target, None)
}

/// Mean |pred - target| * (1 + w * mask). The mask must be binary.
pub fn weighted_l1_loss(
    g: &mut Graph,
    pred: TensorId,
    target: TensorId,
    nodule_mask: &Array,
    cfg: &WeightedL1Config,
) -> Result<TensorId> {
    if cfg.nodule_weight.is_nan() || cfg.nodule_weight < 0.0 {
        return Err(Error::invalid("nodule_weight", "must be non-negative"));
    }
    if let Some(bad) = nodule_mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("nodule_mask", format!("non-binary value {bad}")));
    }
    let weights: Vec<f64> = nodule_mask
        .data()
        .iter()
        .map(|m| 1.0 + cfg.nodule_weight * m)
        .collect();
    let weight = Array::from_vec(nodule_mask.shape(), weights)?;
    g.reduce_l1(pred, target, Some(&weight))
}

/// Combines scalar loss terms into `sum(coeff_i * term_i)`, for mixed
/// objectives like L1 + lambda * perceptual.
pub fn weighted_sum(g: &mut Graph, terms: &[(TensorId, f64)]) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (id, coeff) in terms {
        let scaled = g.scale(*id, *coeff);
        acc = Some(match acc {
            Some(prev) => g.add(prev, scaled)?,
            None => scaled,
        });
    }
    acc.ok_or_else(|| Error::invalid("terms", "weighted_sum needs at least one term"))
}

const LOSS_NET_PLAN: [(&str, usize, usize); 4] = [
    ("conv1", 3, 64),
    ("conv2", 64, 64),
    ("conv3", 64, 128),
    ("conv4", 128, 128),
];

/// The fixed feature extractor behind the perceptual loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossNetwork {
    params: Vec<NamedParam>,
    input_offset: [f64; 3],
    input_scale: [f64; 3],
}

impl LossNetwork {
    /// He-initialized weights from a seed (identity input transform).
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (name, cin, cout) in LOSS_NET_PLAN {
            let shape = [cout, cin, 3, 3];
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let data: Vec<f64> = (0..shape.iter().product::<usize>())
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (z * std) as f32 as f64
                })
                .collect();
            params.push(NamedParam {
                name: format!("{name}.weight"),
                value: Array::from_vec(&shape, data).expect("shape matches"),
            });
            params.push(NamedParam { name: format!("{name}.bias"), value: Array::zeros(&[cout]) });
        }
        LossNetwork { params, input_offset: [0.0; 3], input_scale: [1.0; 3] }
    }

    /// Loads loss-network weights (and the optional per-channel input
    /// offset/scale) from the shared manifest format.
    pub fn from_file(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let weights = ModelWeights::load(path)?;
        let mut params = Vec::new();
        let mut tensors = weights.tensors.into_iter();
        for (name, cin, cout) in LOSS_NET_PLAN {
            for (suffix, shape) in
                [("weight", vec![cout, cin, 3, 3]), ("bias", vec![cout])]
            {
                let expected = format!("{name}.{suffix}");
                let t = tensors.next().ok_or_else(|| Error::WeightMismatch {
                    name: expected.clone(),
                    reason: "missing from file".into(),
                })?;
                if t.name != expected {
                    return Err(Error::WeightMismatch {
                        name: expected,
                        reason: format!("found tensor {:?} instead", t.name),
                    });
                }
                if t.array.shape() != shape.as_slice() {
                    return Err(Error::WeightMismatch {
                        name: expected,
                        reason: format!("shape {:?}, expected {shape:?}", t.array.shape()),
                    });
                }
                params.push(NamedParam { name: t.name, value: t.array });
            }
        }
        if let Some(extra) = tensors.next() {
            return Err(Error::WeightMismatch {
                name: extra.name,
                reason: "unexpected extra tensor".into(),
            });
        }
        Ok(LossNetwork {
            params,
            input_offset: weights.input_offset.unwrap_or([0.0; 3]),
            input_scale: weights.input_scale.unwrap_or([1.0; 3]),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        ModelWeights {
            tensors: self
                .params
                .iter()
                .map(|p| NamedTensor { name: p.name.clone(), array: p.value.clone() })
                .collect(),
            input_offset: Some(self.input_offset),
            input_scale: Some(self.input_scale),
            unet_config: None,
        }
        .save(path)
    }

    pub fn params(&self) -> &[NamedParam] {
        &self.params
    }

    pub fn input_offset(&self) -> [f64; 3] {
        self.input_offset
    }

    pub fn input_scale(&self) -> [f64; 3] {
        self.input_scale
    }

    /// Duplicates a single-channel batch to RGB and applies the network's
    /// per-channel input transform.
    pub fn triplicate(&self, g: &mut Graph, batch: TensorId) -> Result<TensorId> {
        g.triplicate(batch, self.input_offset, self.input_scale)
    }

    /// Feature tap on an RGB batch: the activation after the final ReLU,
    /// shape (N, 128, H/2, W/2). Weights enter the graph frozen.
    pub fn features(&self, g: &mut Graph, rgb: TensorId) -> Result<TensorId> {
        let ids: Vec<TensorId> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), false))
            .collect();
        let mut x = rgb;
        for (i, _) in LOSS_NET_PLAN.iter().enumerate() {
            x = g.conv2d(x, ids[2 * i], Some(ids[2 * i + 1]), 1)?;
            x = g.relu(x);
            if i == 1 {
                x = g.maxpool2(x)?;
            }
        }
        Ok(x)
    }
}

/// Feature-reconstruction loss: mean squared difference of the feature-tap
/// activations of the triplicated prediction and target. Gradients flow to
/// the prediction only; the target path is detached.
pub fn perceptual_loss(
    g: &mut Graph,
    pred: TensorId,
    target: TensorId,
    net: &LossNetwork,
) -> Result<TensorId> {
    if g.value(pred).shape() != g.value(target).shape() {
        return Err(Error::shape(
            "perceptual_loss",
            format!("{:?} vs {:?}", g.value(pred).shape(), g.value(target).shape()),
        ));
    }
    let pred_rgb = net.triplicate(g, pred)?;
    let pred_feat = net.features(g, pred_rgb)?;
    let target_detached = g.leaf(g.value(target).clone(), false);
    let target_rgb = net.triplicate(g, target_detached)?;
    let target_feat = net.features(g, target_rgb)?;
    g.reduce_mse(pred_feat, target_feat)
}
