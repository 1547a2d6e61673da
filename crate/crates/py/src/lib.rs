//! Python bindings: volumes, radiograph images, projection, metrics, the
//! U-Net model, training and fusion.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use osteoforge::enhancer::{fuse as fuse_images, predict_bone, FusionConfig};
use osteoforge::imageops::{self, AugmentConfig};
use osteoforge::projector::{self, ProjectorConfig, RadiographImage, RangeTag, TrainingPair};
use osteoforge::quality::{self, MetricConfig};
use osteoforge::trainer::{self, DataSplit, LossKind, Preprocess, SplitSpec, TrainConfig};
use osteoforge::unet;
use osteoforge::volmodel::{self, NoduleAnnotation, PhantomSpec};

fn err(e: osteoforge::Error) -> PyErr {
    match e {
        osteoforge::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_preprocess(name: &str) -> PyResult<Preprocess> {
    match name {
        "standardize" => Ok(Preprocess::Standardize),
        "he_clahe" => Ok(Preprocess::HeClahe),
        other => Err(PyValueError::new_err(format!(
            "unknown preprocess {other:?}; expected \"standardize\" or \"he_clahe\""
        ))),
    }
}

type Nodule = ((f64, f64, f64), (f64, f64, f64));

fn parse_annotations(nodules: Vec<Nodule>) -> Vec<NoduleAnnotation> {
    nodules
        .into_iter()
        .map(|(center_vox, radii_vox)| NoduleAnnotation { center_vox, radii_vox })
        .collect()
}

/// A 3D signed-HU volume with voxel spacing.
#[pyclass(name = "Volume", from_py_object)]
#[derive(Clone)]
struct PyVolume {
    inner: volmodel::Volume,
}

#[pymethods]
impl PyVolume {
    /// Constant-valued volume.
    #[staticmethod]
    #[pyo3(signature = (dims, hu, spacing_mm=(1.0, 1.0, 1.0)))]
    fn filled(dims: (usize, usize, usize), hu: i16, spacing_mm: (f64, f64, f64)) -> PyResult<Self> {
        Ok(PyVolume { inner: volmodel::Volume::filled(dims, spacing_mm, hu).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyVolume { inner: volmodel::load_volume(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        volmodel::save_volume(&self.inner, path).map_err(err)
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn spacing_mm(&self) -> (f64, f64, f64) {
        self.inner.spacing_mm()
    }

    fn voxel(&self, x: usize, y: usize, z: usize) -> i16 {
        self.inner.at(x, y, z)
    }

    /// Keeps voxels inside [lo, hi] and sets the rest to -1024 HU.
    fn bone_window(&self, lo: i16, hi: i16) -> PyVolume {
        PyVolume { inner: volmodel::bone_window(&self.inner, lo, hi) }
    }

    fn __repr__(&self) -> String {
        let (x, y, z) = self.inner.dims();
        format!("Volume({x}x{y}x{z})")
    }
}

/// Generates a thorax phantom. Returns the volume and the list of nodule
/// annotations as ((cx, cy, cz), (rx, ry, rz)) tuples.
#[pyfunction]
#[pyo3(signature = (dims=(64, 64, 64), seed=0, nodules=0, empty=false, dense_ribs=false))]
fn generate_phantom(
    dims: (usize, usize, usize),
    seed: u64,
    nodules: usize,
    empty: bool,
    dense_ribs: bool,
) -> PyResult<(PyVolume, Vec<Nodule>)> {
    let mut spec = if empty { PhantomSpec::empty(dims) } else { PhantomSpec::thorax(dims, seed) };
    spec.seed = seed;
    spec.nodules.count = nodules;
    if dense_ribs {
        spec.rib_rings = 12;
        spec.rib_half_thickness = 1.8;
        spec.rib_z_span = 0.85;
    }
    let (vol, anns) = volmodel::generate_phantom(&spec).map_err(err)?;
    let tuples = anns.into_iter().map(|a| (a.center_vox, a.radii_vox)).collect();
    Ok((PyVolume { inner: vol }, tuples))
}

/// A 2D radiograph image with an explicit range tag.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: RadiographImage,
}

#[pymethods]
impl PyImage {
    #[staticmethod]
    #[pyo3(signature = (width, height, pixels, range="raw"))]
    fn new(width: usize, height: usize, pixels: Vec<f64>, range: &str) -> PyResult<Self> {
        let tag = match range {
            "raw" => RangeTag::Raw,
            "unit" => RangeTag::Unit,
            "standardized" => RangeTag::Standardized,
            "binary" => RangeTag::Binary,
            other => return Err(PyValueError::new_err(format!("unknown range tag {other:?}"))),
        };
        Ok(PyImage { inner: RadiographImage::new(width, height, pixels, tag).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyImage { inner: projector::load_image(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        projector::save_image(&self.inner, path).map_err(err)
    }

    fn save_pgm(&self, path: &str) -> PyResult<()> {
        projector::save_pgm16(&self.inner, path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn range(&self) -> &'static str {
        self.inner.range().as_str()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels().to_vec()
    }

    fn at(&self, x: usize, z: usize) -> f64 {
        self.inner.at(x, z)
    }

    /// Min-max normalization to [0, 1].
    fn minmax(&self) -> PyImage {
        PyImage { inner: imageops::minmax_normalize(&self.inner) }
    }

    #[pyo3(signature = (mean=0.0, std=0.5))]
    fn standardize(&self, mean: f64, std: f64) -> PyImage {
        PyImage { inner: imageops::standardize(&self.inner, mean, std) }
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{}, {})", self.inner.width(), self.inner.height(), self.inner.range().as_str())
    }
}

fn projector_config(mu_water: f64, beta: f64, clamp_air: bool) -> ProjectorConfig {
    ProjectorConfig { mu_water, beta, clamp_air }
}

/// Average attenuation map along the beam axis (raw range).
#[pyfunction]
#[pyo3(signature = (vol, mu_water=0.2, beta=0.02, clamp_air=true))]
fn attenuation_map(vol: &PyVolume, mu_water: f64, beta: f64, clamp_air: bool) -> PyResult<PyImage> {
    let cfg = projector_config(mu_water, beta, clamp_air);
    Ok(PyImage { inner: projector::attenuation_map(&vol.inner, &cfg).map_err(err)? })
}

/// Normalized DRR in [0, 1].
#[pyfunction]
#[pyo3(signature = (vol, mu_water=0.2, beta=0.02, clamp_air=true))]
fn drr(vol: &PyVolume, mu_water: f64, beta: f64, clamp_air: bool) -> PyResult<PyImage> {
    let cfg = projector_config(mu_water, beta, clamp_air);
    Ok(PyImage { inner: projector::drr(&vol.inner, &cfg).map_err(err)? })
}

/// Raw DRR intensities exp(beta * mu_av), before normalization.
#[pyfunction]
#[pyo3(signature = (vol, mu_water=0.2, beta=0.02, clamp_air=true))]
fn drr_raw(vol: &PyVolume, mu_water: f64, beta: f64, clamp_air: bool) -> PyResult<PyImage> {
    let cfg = projector_config(mu_water, beta, clamp_air);
    Ok(PyImage { inner: projector::drr_raw(&vol.inner, &cfg).map_err(err)? })
}

/// Bone-only DRR: the projection of the bone-windowed volume.
#[pyfunction]
#[pyo3(signature = (vol, lo=300, hi=700, mu_water=0.2, beta=0.02))]
fn bone_drr(vol: &PyVolume, lo: i16, hi: i16, mu_water: f64, beta: f64) -> PyResult<PyImage> {
    let cfg = projector_config(mu_water, beta, true);
    Ok(PyImage { inner: projector::bone_drr(&vol.inner, &cfg, lo, hi).map_err(err)? })
}

/// Projects nodule annotations into a binary 2D mask.
#[pyfunction]
fn project_nodule_mask(dims: (usize, usize, usize), nodules: Vec<Nodule>) -> PyImage {
    PyImage { inner: projector::project_nodule_mask(dims, &parse_annotations(nodules)) }
}

/// Builds one (source DRR, bone target, nodule mask) training triple.
#[pyfunction]
#[pyo3(signature = (vol, nodules=vec![], lo=300, hi=700, mu_water=0.2, beta=0.02))]
fn make_pair(
    vol: &PyVolume,
    nodules: Vec<Nodule>,
    lo: i16,
    hi: i16,
    mu_water: f64,
    beta: f64,
) -> PyResult<(PyImage, PyImage, PyImage)> {
    let cfg = projector_config(mu_water, beta, true);
    let pair =
        projector::make_pair(&vol.inner, &parse_annotations(nodules), &cfg, lo, hi).map_err(err)?;
    Ok((
        PyImage { inner: pair.source },
        PyImage { inner: pair.target },
        PyImage { inner: pair.nodule_mask },
    ))
}

#[pyfunction]
#[pyo3(signature = (a, b, dynamic_range=255.0))]
fn rmse(a: &PyImage, b: &PyImage, dynamic_range: f64) -> PyResult<f64> {
    let cfg = MetricConfig { dynamic_range, ..MetricConfig::default() };
    quality::rmse(&a.inner, &b.inner, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, dynamic_range=255.0))]
fn psnr(a: &PyImage, b: &PyImage, dynamic_range: f64) -> PyResult<f64> {
    let cfg = MetricConfig { dynamic_range, ..MetricConfig::default() };
    quality::psnr(&a.inner, &b.inner, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, dynamic_range=255.0))]
fn ssim(a: &PyImage, b: &PyImage, dynamic_range: f64) -> PyResult<f64> {
    let cfg = MetricConfig { dynamic_range, ..MetricConfig::default() };
    quality::ssim(&a.inner, &b.inner, &cfg).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, scales=5))]
fn msssim(a: &PyImage, b: &PyImage, scales: usize) -> PyResult<f64> {
    if !(1..=5).contains(&scales) {
        return Err(PyValueError::new_err("scales must be in 1..=5"));
    }
    quality::msssim(&a.inner, &b.inner, &MetricConfig::with_scales(scales)).map_err(err)
}

/// Weighted fusion enhanced = cxr + weight * bone, clamped to [0, 1].
#[pyfunction]
#[pyo3(signature = (cxr, bone, weight=0.5))]
fn fuse(cxr: &PyImage, bone: &PyImage, weight: f64) -> PyResult<PyImage> {
    let cfg = FusionConfig { weight, clamp: true };
    Ok(PyImage { inner: fuse_images(&cxr.inner, &bone.inner, &cfg).map_err(err)? })
}

/// The bone-extraction U-Net.
#[pyclass(name = "Model")]
struct PyModel {
    inner: unet::Model,
}

#[pymethods]
impl PyModel {
    /// He-initialized model for the given architecture.
    #[staticmethod]
    #[pyo3(signature = (input_size=512, base_filters=32, depth=4, dilation=2, noise_std=0.2, seed=0))]
    fn build(
        input_size: usize,
        base_filters: usize,
        depth: usize,
        dilation: usize,
        noise_std: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = unet::UNetConfig {
            input_size,
            base_filters,
            depth,
            bottleneck_dilation: dilation,
            noise_std,
            init_seed: seed,
        };
        Ok(PyModel { inner: unet::build(&cfg).map_err(err)? })
    }

    /// Loads weights; the architecture comes from the embedded config.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let cfg = unet::embedded_config(path)
            .map_err(err)?
            .ok_or_else(|| PyValueError::new_err("weight file carries no embedded config"))?;
        Ok(PyModel { inner: unet::load_weights(path, &cfg).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        unet::save_weights(&self.inner, path).map_err(err)
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.inner.config().input_size
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Predicts the bone image for a unit-range radiograph (resampling to the
    /// model size and back as needed).
    #[pyo3(signature = (image, preprocess="standardize"))]
    fn predict(&self, image: &PyImage, preprocess: &str) -> PyResult<PyImage> {
        let pre = parse_preprocess(preprocess)?;
        Ok(PyImage { inner: predict_bone(&self.inner, &image.inner, pre).map_err(err)? })
    }

    /// Trains on (source, target, mask) triples; returns per-epoch
    /// (train_loss, val_loss) tuples.
    #[pyo3(signature = (pairs, epochs=10, batch_size=8, learning_rate=1e-3, loss="l1",
                        nodule_weight=30.0, seed=0, val_fraction=0.0, augment=false,
                        preprocess="standardize"))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        &mut self,
        py: Python<'_>,
        pairs: Vec<(PyImage, PyImage, PyImage)>,
        epochs: usize,
        batch_size: usize,
        learning_rate: f64,
        loss: &str,
        nodule_weight: f64,
        seed: u64,
        val_fraction: f64,
        augment: bool,
        preprocess: &str,
    ) -> PyResult<Vec<(f64, f64)>> {
        let loss = match loss {
            "l1" => LossKind::L1,
            "weighted_l1" => LossKind::WeightedL1,
            "perceptual" => LossKind::Perceptual,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown loss {other:?}; expected \"l1\", \"weighted_l1\" or \"perceptual\""
                )))
            }
        };
        let triples: Vec<TrainingPair> = pairs
            .into_iter()
            .map(|(s, t, m)| TrainingPair::new(s.inner, t.inner, m.inner).map_err(err))
            .collect::<PyResult<_>>()?;
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(PyValueError::new_err("val_fraction must be in [0, 1)"));
        }
        let split = SplitSpec { fractions: (1.0 - val_fraction, val_fraction, 0.0), seed };
        let (train_set, val_set, _) = trainer::split_dataset(&triples, &split).map_err(err)?;
        let cfg = TrainConfig {
            batch_size,
            learning_rate,
            epochs,
            loss,
            nodule_weight,
            preprocess: parse_preprocess(preprocess)?,
            seed,
            augment: if augment {
                AugmentConfig { seed, ..AugmentConfig::default() }
            } else {
                AugmentConfig::identity(seed)
            },
            ..TrainConfig::default()
        };
        let data = DataSplit { train: train_set, val: val_set };
        let model = &mut self.inner;
        let history = py
            .detach(|| trainer::train(model, &data, &cfg, None))
            .map_err(err)?;
        Ok(history.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect())
    }

    /// Evaluates on (source, target, mask) triples; returns a dict-like list
    /// of (metric, mean, std) rows.
    #[pyo3(signature = (pairs, scales=3, preprocess="standardize"))]
    fn evaluate(
        &self,
        py: Python<'_>,
        pairs: Vec<(PyImage, PyImage, PyImage)>,
        scales: usize,
        preprocess: &str,
    ) -> PyResult<Vec<(String, f64, f64)>> {
        let triples: Vec<TrainingPair> = pairs
            .into_iter()
            .map(|(s, t, m)| TrainingPair::new(s.inner, t.inner, m.inner).map_err(err))
            .collect::<PyResult<_>>()?;
        let pre = parse_preprocess(preprocess)?;
        let metric = MetricConfig::with_scales(scales);
        let model = &self.inner;
        let report = py
            .detach(|| trainer::evaluate(model, &triples, pre, &metric))
            .map_err(err)?;
        Ok(vec![
            ("rmse".into(), report.mean.rmse, report.std.rmse),
            ("psnr".into(), report.mean.psnr, report.std.psnr),
            ("ssim".into(), report.mean.ssim, report.std.ssim),
            ("msssim".into(), report.mean.msssim, report.std.msssim),
        ])
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Model(input_size={}, base_filters={}, depth={}, params={})",
            c.input_size,
            c.base_filters,
            c.depth,
            self.inner.param_count()
        )
    }
}

#[pymodule]
fn osteoforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(attenuation_map, m)?)?;
    m.add_function(wrap_pyfunction!(drr, m)?)?;
    m.add_function(wrap_pyfunction!(drr_raw, m)?)?;
    m.add_function(wrap_pyfunction!(bone_drr, m)?)?;
    m.add_function(wrap_pyfunction!(project_nodule_mask, m)?)?;
    m.add_function(wrap_pyfunction!(make_pair, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(msssim, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    Ok(())
}
