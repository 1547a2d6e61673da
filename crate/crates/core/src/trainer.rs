//! Dataset splitting, Adam optimization, the training loop, and test-set
//! evaluation.
//!
//! Every random draw in a run is keyed off the single config seed: epoch
//! shuffles, augmentation draws (by global sample index), the input-noise
//! layer (by global step) and the fallback loss-network init all derive their
//! streams from it, so a fixed seed reproduces a run bit-for-bit.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph};
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::imageops::{augment, clahe, hist_eq, standardize, AugmentConfig};
use crate::losses::{l1_loss, perceptual_loss, weighted_l1_loss, LossNetwork, WeightedL1Config};
use crate::projector::{load_image, RadiographImage, RangeTag, TrainingPair};
use crate::quality::{evaluate_set, MetricConfig, MetricReport};
use crate::unet::Model;

const TAG_EPOCH: u64 = 1;
const TAG_NOISE: u64 = 2;
const TAG_AUGMENT: u64 = 3;
const TAG_LOSS_NET: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    L1,
    WeightedL1,
    Perceptual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preprocess {
    /// Per-image standardization to mean 0, std 0.5 (the default pipeline).
    Standardize,
    /// Histogram equalization followed by CLAHE (the v1 pipeline).
    HeClahe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub loss: LossKind,
    pub nodule_weight: f64,
    pub augment: AugmentConfig,
    pub preprocess: Preprocess,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 100,
            loss: LossKind::L1,
            nodule_weight: 30.0,
            augment: AugmentConfig::default(),
            preprocess: Preprocess::Standardize,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be >= 1"));
        }
        if self.learning_rate.is_nan() || self.learning_rate < 0.0 {
            return Err(Error::invalid("learning_rate", "must be non-negative"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("epsilon", "must be > 0"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(name, "must be in [0, 1)"));
            }
        }
        self.augment.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// (train, val, test) fractions, summing to 1.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { fractions: (0.6, 0.2, 0.2), seed: 0 }
    }
}

/// Deterministic shuffled partition. Val and test counts are rounded from
/// their fractions; the remainder goes to train (644 at 0.6/0.2/0.2 gives
/// 386/129/129).
pub fn split_dataset<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::invalid("items", "dataset is empty"));
    }
    let (ft, fv, fs) = spec.fractions;
    if [ft, fv, fs].iter().any(|f| f.is_nan() || *f < 0.0) {
        return Err(Error::invalid("fractions", "must be non-negative"));
    }
    if ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("fractions", format!("must sum to 1, got {}", ft + fv + fs)));
    }
    let n = items.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order.shuffle(&mut rng);
    let val_n = ((n as f64 * fv).round() as usize).min(n);
    let test_n = ((n as f64 * fs).round() as usize).min(n - val_n);
    let train_n = n - val_n - test_n;
    let pick = |r: std::ops::Range<usize>| r.map(|i| items[order[i]].clone()).collect::<Vec<T>>();
    Ok((
        pick(0..train_n),
        pick(train_n..train_n + val_n),
        pick(train_n + val_n..n),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        AdamConfig {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            epsilon: c.epsilon,
        }
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamState {
    pub fn for_params(params: &[Array]) -> Self {
        AdamState {
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub fn moments(&self) -> (&[Array], &[Array]) {
        (&self.m, &self.v)
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    params: &mut [Array],
    grads: &[Array],
    state: &mut AdamState,
    cfg: &AdamConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::invalid("t", "Adam step index is 1-based"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} states", params.len(), grads.len(), state.m.len()),
        ));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        for ((pv, gv), (mv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON record per line, one line per epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("record serializes"))
            .fold(String::new(), |mut acc, line| {
                acc.push_str(&line);
                acc.push('\n');
                acc
            })
    }
}

/// Training/validation pairs, already loaded.
#[derive(Debug, Clone, Default)]
pub struct DataSplit {
    pub train: Vec<TrainingPair>,
    pub val: Vec<TrainingPair>,
}

pub fn preprocess_image(img: &RadiographImage, kind: Preprocess) -> Result<RadiographImage> {
    match kind {
        Preprocess::Standardize => Ok(standardize(img, 0.0, 0.5)),
        Preprocess::HeClahe => clahe(&hist_eq(img, 256), (40, 40), 0.01),
    }
}

/// Maps a unit-range target onto the Tanh output range: t' = 2t - 1.
fn target_to_pm1(img: &RadiographImage) -> RadiographImage {
    RadiographImage::new_unchecked(
        img.width(),
        img.height(),
        img.pixels().iter().map(|p| 2.0 * p - 1.0).collect(),
        RangeTag::Standardized,
    )
}

fn stack_batch(images: &[&RadiographImage]) -> Array {
    let (w, h) = (images[0].width(), images[0].height());
    let mut data = Vec::with_capacity(images.len() * w * h);
    for img in images {
        data.extend_from_slice(img.pixels());
    }
    Array::from_vec(&[images.len(), 1, h, w], data).expect("stack shapes agree")
}

fn check_pair_dims(pairs: &[TrainingPair], size: usize, what: &str) -> Result<()> {
    for p in pairs {
        if p.width() != size || p.height() != size {
            return Err(Error::shape(
                "train",
                format!("{what} pair is {}x{}, model wants {size}x{size}", p.width(), p.height()),
            ));
        }
    }
    Ok(())
}

struct LossContext<'a> {
    kind: LossKind,
    weighted_cfg: WeightedL1Config,
    net: Option<&'a LossNetwork>,
    fallback_net: Option<LossNetwork>,
}

impl<'a> LossContext<'a> {
    fn new(cfg: &TrainConfig, net: Option<&'a LossNetwork>) -> Self {
        let fallback_net = match (cfg.loss, net) {
            (LossKind::Perceptual, None) => {
                Some(LossNetwork::seeded(derive_seed(cfg.seed, TAG_LOSS_NET, 0)))
            }
            _ => None,
        };
        LossContext {
            kind: cfg.loss,
            weighted_cfg: WeightedL1Config { nodule_weight: cfg.nodule_weight },
            net,
            fallback_net,
        }
    }

    fn net(&self) -> &LossNetwork {
        self.net.or(self.fallback_net.as_ref()).expect("perceptual loss needs a network")
    }

    fn build(
        &self,
        g: &mut Graph,
        pred: crate::autodiff::TensorId,
        target: crate::autodiff::TensorId,
        mask: &Array,
    ) -> Result<crate::autodiff::TensorId> {
        match self.kind {
            LossKind::L1 => l1_loss(g, pred, target),
            LossKind::WeightedL1 => weighted_l1_loss(g, pred, target, mask, &self.weighted_cfg),
            LossKind::Perceptual => perceptual_loss(g, pred, target, self.net()),
        }
    }
}

/// Builds the preprocessed (source, target', mask) batch for a set of items.
/// Augmentation (when enabled) runs after preprocessing with one draw per
/// sample, indexed by the global sample counter.
fn prepare_batch(
    pairs: &[TrainingPair],
    indices: &[usize],
    cfg: &TrainConfig,
    aug: Option<&AugmentConfig>,
    sample_counter: &mut u64,
) -> Result<(Array, Array, Array)> {
    let mut sources = Vec::with_capacity(indices.len());
    let mut targets = Vec::with_capacity(indices.len());
    let mut masks = Vec::with_capacity(indices.len());
    for &i in indices {
        let pair = &pairs[i];
        let source = preprocess_image(&pair.source, cfg.preprocess)?;
        let target = target_to_pm1(&pair.target);
        let processed = TrainingPair::new(source, target, pair.nodule_mask.clone())?;
        let finished = match aug {
            Some(a) => {
                let draw = *sample_counter;
                *sample_counter += 1;
                augment(&processed, a, draw)?
            }
            None => processed,
        };
        sources.push(finished.source);
        targets.push(finished.target);
        masks.push(finished.nodule_mask);
    }
    Ok((
        stack_batch(&sources.iter().collect::<Vec<_>>()),
        stack_batch(&targets.iter().collect::<Vec<_>>()),
        stack_batch(&masks.iter().collect::<Vec<_>>()),
    ))
}

/// Mean loss over a pair set with augmentation and noise disabled. Does not
/// touch model weights or optimizer state.
pub fn validation_loss(
    model: &Model,
    pairs: &[TrainingPair],
    cfg: &TrainConfig,
    loss_net: Option<&LossNetwork>,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(f64::NAN);
    }
    let ctx = LossContext::new(cfg, loss_net);
    let mut total = 0.0;
    let mut counter = 0u64;
    for chunk in (0..pairs.len()).collect::<Vec<_>>().chunks(cfg.batch_size) {
        let (src, tgt, mask) = prepare_batch(pairs, chunk, cfg, None, &mut counter)?;
        let mut g = Graph::new();
        let pass = model.forward(&mut g, src, false, false, 0)?;
        let tgt_id = g.leaf(tgt, false);
        let loss = ctx.build(&mut g, pass.output, tgt_id, &mask)?;
        total += g.scalar_value(loss) * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Runs the full training loop: per step, preprocess -> map target to
/// [-1, 1] -> augment -> forward (training) -> selected loss -> backward ->
/// Adam. Validation runs once per epoch with augmentation and noise off.
/// A non-finite loss aborts with a diagnostic.
pub fn train(
    model: &mut Model,
    data: &DataSplit,
    cfg: &TrainConfig,
    loss_net: Option<&LossNetwork>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let size = model.config().input_size;
    check_pair_dims(&data.train, size, "train")?;
    check_pair_dims(&data.val, size, "val")?;
    if data.train.is_empty() {
        return Err(Error::invalid("datasets", "training set is empty"));
    }
    let ctx = LossContext::new(cfg, loss_net);
    let aug = AugmentConfig { seed: derive_seed(cfg.seed, TAG_AUGMENT, 0), ..cfg.augment.clone() };

    let mut params: Vec<Array> = model.params().iter().map(|p| p.value.clone()).collect();
    let mut state = AdamState::for_params(&params);
    let mut history = TrainHistory::default();
    let mut global_step = 0u64;
    let mut sample_counter = 0u64;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, TAG_EPOCH, epoch as u64));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (src, tgt, mask) =
                prepare_batch(&data.train, chunk, cfg, Some(&aug), &mut sample_counter)?;
            let mut g = Graph::new();
            let noise_seed = derive_seed(cfg.seed, TAG_NOISE, global_step);
            let pass = model.forward(&mut g, src, true, true, noise_seed)?;
            let tgt_id = g.leaf(tgt, false);
            let loss = ctx.build(&mut g, pass.output, tgt_id, &mask)?;
            let loss_value = g.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss { step: global_step, value: loss_value });
            }
            g.backward(loss)?;
            let grads: Vec<Array> = pass
                .param_ids
                .iter()
                .zip(&params)
                .map(|(id, p)| g.grad(*id).cloned().unwrap_or_else(|| Array::zeros(p.shape())))
                .collect();
            global_step += 1;
            adam_step(&mut params, &grads, &mut state, &AdamConfig::from(cfg), global_step)?;
            model.set_param_values(params.clone());
            loss_sum += loss_value;
            steps += 1;
        }

        let val_loss = validation_loss(model, &data.val, cfg, ctx.net.or(ctx.fallback_net.as_ref()))?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_loss,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
    }
    Ok(history)
}

/// Runs inference over the pairs, maps predictions back to [0, 1] and
/// reports metrics against the targets.
pub fn evaluate(
    model: &Model,
    pairs: &[TrainingPair],
    preprocess: Preprocess,
    metric_cfg: &MetricConfig,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::invalid("pairs", "evaluation set is empty"));
    }
    let mut rows = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let pred = predict_unit(model, &pair.source, preprocess)?;
        rows.push((pred, pair.target.clone()));
    }
    evaluate_set(&rows, metric_cfg)
}

/// One inference pass mapped back to [0, 1] (no resampling; dims must match
/// the model).
pub fn predict_unit(
    model: &Model,
    source: &RadiographImage,
    preprocess: Preprocess,
) -> Result<RadiographImage> {
    let x = preprocess_image(source, preprocess)?;
    let batch = stack_batch(&[&x]);
    let out = model.infer(batch)?;
    let pixels: Vec<f64> = out.data().iter().map(|p| ((p + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    Ok(RadiographImage::new_unchecked(
        source.width(),
        source.height(),
        pixels,
        RangeTag::Unit,
    ))
}

/// The `dataset.json` pairs manifest: paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEntry {
    pub source: String,
    pub target: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub pairs: Vec<PairEntry>,
}

impl DatasetManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            what: "dataset manifest",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Loads every pair, resolving entries relative to the manifest location.
    pub fn load_pairs(&self, manifest_path: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
        let dir = manifest_path
            .as_ref()
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        self.pairs
            .iter()
            .map(|e| {
                let source = load_image(dir.join(&e.source))?;
                let target = load_image(dir.join(&e.target))?;
                let mask = load_image(dir.join(&e.mask))?;
                TrainingPair::new(source, target, mask)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{make_pair, ProjectorConfig};
    use crate::unet::{build, UNetConfig};
    use crate::volmodel::{generate_phantom, PhantomSpec};

    fn toy_cfg(size: usize, depth: usize) -> UNetConfig {
        UNetConfig {
            input_size: size,
            base_filters: 4,
            depth,
            bottleneck_dilation: 2,
            noise_std: 0.0,
            init_seed: 7,
        }
    }

    fn phantom_pairs(n: usize, size: usize) -> Vec<TrainingPair> {
        (0..n)
            .map(|i| {
                let mut spec = PhantomSpec::thorax((size, size, size), 1000 + i as u64);
                spec.nodules.count = 1;
                spec.nodules.radius_range = (1.5, 2.5);
                let (vol, anns) = generate_phantom(&spec).unwrap();
                make_pair(&vol, &anns, &ProjectorConfig::default(), 300, 700).unwrap()
            })
            .collect()
    }

    fn quiet_train_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            epochs: 2,
            augment: AugmentConfig::identity(seed),
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn split_matches_paper_arithmetic() {
        let items: Vec<usize> = (0..644).collect();
        let (train, val, test) = split_dataset(&items, &SplitSpec::default()).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (386, 129, 129));
    }

    #[test]
    fn split_all_train() {
        let items: Vec<usize> = (0..10).collect();
        let spec = SplitSpec { fractions: (1.0, 0.0, 0.0), seed: 1 };
        let (train, val, test) = split_dataset(&items, &spec).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (10, 0, 0));
    }

    #[test]
    fn split_is_deterministic_and_a_partition() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let n = rng.gen_range(1..200usize);
            let a = rng.gen::<f64>();
            let b = rng.gen::<f64>() * (1.0 - a);
            let spec = SplitSpec { fractions: (1.0 - a - b, a, b), seed: rng.gen() };
            let items: Vec<usize> = (0..n).collect();
            let (t1, v1, s1) = split_dataset(&items, &spec).unwrap();
            let (t2, v2, s2) = split_dataset(&items, &spec).unwrap();
            assert_eq!((&t1, &v1, &s1), (&t2, &v2, &s2));
            let mut all: Vec<usize> = t1.into_iter().chain(v1).chain(s1).collect();
            assert_eq!(all.len(), n);
            all.sort_unstable();
            assert_eq!(all, items);
        }
    }

    #[test]
    fn adam_first_step_hand_value() {
        let mut params = vec![Array::from_vec(&[1], vec![1.0]).unwrap()];
        let grads = vec![Array::from_vec(&[1], vec![1.0]).unwrap()];
        let mut state = AdamState::for_params(&params);
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        adam_step(&mut params, &grads, &mut state, &cfg, 1).unwrap();
        // Bias-corrected m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let delta = 1.0 - params[0].data()[0];
        assert!((delta - 0.1).abs() < 1e-6);
        assert!(delta < 0.1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params_but_decays_moments() {
        let mut params = vec![Array::from_vec(&[2], vec![0.5, -0.5]).unwrap()];
        let grads = vec![Array::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let zero = vec![Array::zeros(&[2])];
        let mut state = AdamState::for_params(&params);
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        adam_step(&mut params, &grads, &mut state, &cfg, 1).unwrap();
        let after_first = params.clone();
        let m_before = state.moments().0[0].clone();
        // Fresh state and zero grads: parameters must not move at all.
        let mut fresh_params = vec![Array::from_vec(&[2], vec![0.5, -0.5]).unwrap()];
        let mut fresh = AdamState::for_params(&fresh_params);
        adam_step(&mut fresh_params, &zero, &mut fresh, &cfg, 1).unwrap();
        assert_eq!(fresh_params[0].data(), &[0.5, -0.5]);
        // Warm state and zero grads: moments decay toward zero.
        adam_step(&mut params, &zero, &mut state, &cfg, 2).unwrap();
        assert!(state.moments().0[0].max_abs() < m_before.max_abs());
        assert_ne!(after_first[0].data(), params[0].data());
    }

    #[test]
    fn adam_tensors_update_independently() {
        let cfg = AdamConfig { learning_rate: 0.1, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 };
        let a = Array::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Array::from_vec(&[1], vec![3.0]).unwrap();
        let ga = Array::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let gb = Array::from_vec(&[1], vec![1.5]).unwrap();

        let mut joint = vec![a.clone(), b.clone()];
        let mut joint_state = AdamState::for_params(&joint);
        adam_step(&mut joint, &[ga.clone(), gb.clone()], &mut joint_state, &cfg, 1).unwrap();

        let mut solo_a = vec![a];
        let mut sa = AdamState::for_params(&solo_a);
        adam_step(&mut solo_a, &[ga], &mut sa, &cfg, 1).unwrap();
        let mut solo_b = vec![b];
        let mut sb = AdamState::for_params(&solo_b);
        adam_step(&mut solo_b, &[gb], &mut sb, &cfg, 1).unwrap();

        assert_eq!(joint[0], solo_a[0]);
        assert_eq!(joint[1], solo_b[0]);
    }

    #[test]
    fn zero_learning_rate_is_a_noop_on_weights() {
        let mut model = build(&toy_cfg(32, 2)).unwrap();
        let before = model.clone();
        let pairs = phantom_pairs(3, 32);
        let data = DataSplit { train: pairs.clone(), val: pairs[..1].to_vec() };
        let cfg = TrainConfig { learning_rate: 0.0, ..quiet_train_cfg(3) };
        let history = train(&mut model, &data, &cfg, None).unwrap();
        assert_eq!(model, before);
        assert_eq!(history.epochs.len(), 2);
    }

    #[test]
    fn training_is_deterministic() {
        let pairs = phantom_pairs(4, 32);
        let data = DataSplit { train: pairs.clone(), val: pairs[..2].to_vec() };
        let cfg = TrainConfig { augment: AugmentConfig::default(), ..quiet_train_cfg(9) };
        let run = || {
            let mut model = build(&toy_cfg(32, 2)).unwrap();
            let history = train(&mut model, &data, &cfg, None).unwrap();
            (model, history)
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        let losses = |h: &TrainHistory| {
            h.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect::<Vec<_>>()
        };
        assert_eq!(losses(&h1), losses(&h2));
    }

    #[test]
    fn training_reduces_loss_on_small_set() {
        let pairs = phantom_pairs(4, 32);
        let data = DataSplit { train: pairs.clone(), val: pairs[..1].to_vec() };
        let mut model = build(&toy_cfg(32, 2)).unwrap();
        let cfg = TrainConfig { epochs: 25, ..quiet_train_cfg(4) };
        let history = train(&mut model, &data, &cfg, None).unwrap();
        let first = history.epochs.first().unwrap().train_loss;
        let last = history.epochs.last().unwrap().train_loss;
        assert!(last < first * 0.7, "first {first}, last {last}");
    }

    #[test]
    fn each_loss_kind_trains() {
        let pairs = phantom_pairs(2, 32);
        let data = DataSplit { train: pairs.clone(), val: vec![] };
        for loss in [LossKind::L1, LossKind::WeightedL1, LossKind::Perceptual] {
            let mut model = build(&toy_cfg(32, 2)).unwrap();
            let cfg = TrainConfig { loss, epochs: 1, ..quiet_train_cfg(5) };
            let history = train(&mut model, &data, &cfg, None).unwrap();
            assert!(history.epochs[0].train_loss.is_finite());
        }
    }

    #[test]
    fn loss_net_weights_survive_training_bit_exact() {
        let net = LossNetwork::seeded(11);
        let snapshot = net.clone();
        let pairs = phantom_pairs(2, 32);
        let data = DataSplit { train: pairs, val: vec![] };
        let mut model = build(&toy_cfg(32, 2)).unwrap();
        let cfg = TrainConfig { loss: LossKind::Perceptual, epochs: 2, ..quiet_train_cfg(6) };
        train(&mut model, &data, &cfg, Some(&net)).unwrap();
        assert_eq!(net, snapshot);
    }

    #[test]
    fn validation_does_not_mutate_model() {
        let pairs = phantom_pairs(3, 32);
        let model = build(&toy_cfg(32, 2)).unwrap();
        let snapshot = model.clone();
        let cfg = quiet_train_cfg(7);
        let v1 = validation_loss(&model, &pairs, &cfg, None).unwrap();
        let v2 = validation_loss(&model, &pairs, &cfg, None).unwrap();
        assert_eq!(model, snapshot);
        assert_eq!(v1, v2);
    }

    #[test]
    fn perfect_oracle_evaluates_to_upper_bound() {
        // Feeding targets back as predictions: RMSE 0, SSIM 1.
        let pairs = phantom_pairs(2, 32);
        let rows: Vec<(RadiographImage, RadiographImage)> =
            pairs.iter().map(|p| (p.target.clone(), p.target.clone())).collect();
        let report = evaluate_set(&rows, &MetricConfig::with_scales(2)).unwrap();
        assert_eq!(report.mean.rmse, 0.0);
        assert_eq!(report.mean.ssim, 1.0);
        assert!(report.mean.psnr.is_infinite());
    }

    #[test]
    fn untrained_model_evaluates_finite() {
        let pairs = phantom_pairs(2, 32);
        let model = build(&toy_cfg(32, 2)).unwrap();
        let report =
            evaluate(&model, &pairs, Preprocess::Standardize, &MetricConfig::with_scales(2))
                .unwrap();
        assert!(report.mean.rmse.is_finite());
        assert!(report.mean.msssim.is_finite());
        let again =
            evaluate(&model, &pairs, Preprocess::Standardize, &MetricConfig::with_scales(2))
                .unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn dataset_manifest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = phantom_pairs(2, 16);
        let mut manifest = DatasetManifest::default();
        for (i, p) in pairs.iter().enumerate() {
            crate::projector::save_image(&p.source, dir.path().join(format!("s{i}"))).unwrap();
            crate::projector::save_image(&p.target, dir.path().join(format!("t{i}"))).unwrap();
            crate::projector::save_image(&p.nodule_mask, dir.path().join(format!("m{i}"))).unwrap();
            manifest.pairs.push(PairEntry {
                source: format!("s{i}.img.json"),
                target: format!("t{i}.img.json"),
                mask: format!("m{i}.img.json"),
            });
        }
        let mpath = dir.path().join("dataset.json");
        manifest.save(&mpath).unwrap();
        let back = DatasetManifest::load(&mpath).unwrap();
        assert_eq!(manifest, back);
        let loaded = back.load_pairs(&mpath).unwrap();
        assert_eq!(loaded.len(), 2);
        // Pixels only went through one f32 quantization on save.
        for (orig, got) in pairs.iter().zip(&loaded) {
            for (a, b) in orig.source.pixels().iter().zip(got.source.pixels()) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let pairs = phantom_pairs(2, 16);
        let mut model = build(&toy_cfg(32, 2)).unwrap();
        let data = DataSplit { train: pairs, val: vec![] };
        assert!(train(&mut model, &data, &quiet_train_cfg(8), None).is_err());
    }
}
