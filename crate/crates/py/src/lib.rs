//! Python bindings: images, schedules, class models, synthesis and scoring.

use patchsynth::assess::{image_log_likelihood, ll_dictionaries, spread as spread_score};
use patchsynth::synthesis::{make_seed as core_make_seed, synthesize as core_synthesize};
use patchsynth::{
    ClassModel as CoreModel, Image as CoreImage, KnnBackend, LlConfig, LlGrid, OriginalityIndex, ParzenStack, PixelMask,
    SpreadConfig, SynthesisSchedule,
};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: patchsynth::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.kind()))
}

/// Grayscale image with values nominally in [0, 1], stored row-major.
#[pyclass(name = "Image", module = "patchsynth_py", from_py_object)]
#[derive(Clone)]
pub struct PyImage {
    inner: CoreImage,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: CoreImage::new(width, height, pixels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read_pgm(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: patchsynth::pgm::read(path).map_err(py_err)?,
        })
    }

    fn write_pgm(&self, path: &str) -> PyResult<()> {
        patchsynth::pgm::write(path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<f64> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("({x}, {y}) is outside the image")));
        }
        Ok(self.inner.get(x, y))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.width(), self.inner.height())
    }
}

/// A synthesis schedule: image size, patch size and per-layer iteration tables.
#[pyclass(name = "Schedule", module = "patchsynth_py", from_py_object)]
#[derive(Clone)]
pub struct PySchedule {
    inner: SynthesisSchedule,
}

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SynthesisSchedule::preset(name).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        SynthesisSchedule::preset_names().to_vec()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: SynthesisSchedule::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Returns a copy with the fields of a JSON object merged in.
    fn with_overrides(&self, overrides: &str) -> PyResult<Self> {
        let v: serde_json::Value = serde_json::from_str(overrides).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Self {
            inner: self.inner.with_overrides(&v).map_err(py_err)?,
        })
    }

    fn deterministic(&self) -> Self {
        Self {
            inner: self.inner.deterministic(),
        }
    }

    fn hash(&self) -> PyResult<String> {
        self.inner.hash().map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    #[getter]
    fn seed_size(&self) -> (usize, usize) {
        self.inner.seed_size()
    }
}

/// Per-layer dictionaries of one image class.
#[pyclass(name = "ClassModel", module = "patchsynth_py")]
pub struct PyClassModel {
    inner: CoreModel,
}

fn unwrap_images(images: &[PyImage]) -> Vec<CoreImage> {
    images.iter().map(|i| i.inner.clone()).collect()
}

#[pymethods]
impl PyClassModel {
    #[staticmethod]
    #[pyo3(signature = (training, schedule, kdtree = false))]
    fn build(py: Python<'_>, training: Vec<PyImage>, schedule: &PySchedule, kdtree: bool) -> PyResult<Self> {
        let imgs = unwrap_images(&training);
        let backend = if kdtree { KnnBackend::KdTree } else { KnnBackend::Exhaustive };
        let s = schedule.inner.clone();
        let inner = py.detach(move || CoreModel::build(&imgs, &s, backend)).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn image_count(&self) -> usize {
        self.inner.image_count()
    }

    #[getter]
    fn schedule_hash(&self) -> String {
        self.inner.schedule_hash.clone()
    }
}

/// Blurs and decimates a full-size image down to the schedule's seed size.
#[pyfunction]
fn make_seed(image: &PyImage, schedule: &PySchedule) -> PyResult<PyImage> {
    let s = &schedule.inner;
    Ok(PyImage {
        inner: core_make_seed(&image.inner, (s.width, s.height), s.seed_size()).map_err(py_err)?,
    })
}

/// Returns the layers `X_L .. X_0`; the last one is the output.
#[pyfunction]
fn synthesize(py: Python<'_>, seed: &PyImage, schedule: &PySchedule, model: &PyClassModel, root_seed: u64) -> PyResult<Vec<PyImage>> {
    let out = py
        .detach(|| core_synthesize(&seed.inner, &schedule.inner, &model.inner, root_seed))
        .map_err(py_err)?;
    Ok(out.layers.into_iter().map(|inner| PyImage { inner }).collect())
}

/// Parzen log-likelihood of each image under window-0 dictionaries of `training`.
#[pyfunction]
#[pyo3(signature = (images, training, schedule, full_grid = false, shortlist = None))]
fn log_likelihood(
    py: Python<'_>,
    images: Vec<PyImage>,
    training: Vec<PyImage>,
    schedule: &PySchedule,
    full_grid: bool,
    shortlist: Option<usize>,
) -> PyResult<Vec<f64>> {
    let mut cfg = LlConfig::for_schedule(&schedule.inner);
    if full_grid {
        cfg.grid = LlGrid::FullyOverlapping;
    }
    cfg.shortlist = shortlist;
    let train = unwrap_images(&training);
    let xs = unwrap_images(&images);
    py.detach(move || -> patchsynth::Result<Vec<f64>> {
        if cfg.shortlist.is_some() {
            let dicts = ll_dictionaries(&train, &cfg)?;
            xs.iter().map(|x| image_log_likelihood(x, &dicts, &cfg)).collect()
        } else {
            let stack = ParzenStack::new(&train)?;
            xs.iter().map(|x| stack.image_log_likelihood(x, &cfg)).collect()
        }
    })
    .map_err(py_err)
}

/// `(ratio, d_g, d_t)` per image; `central` restricts distances to a centered window.
#[pyfunction]
#[pyo3(signature = (images, training, central = None))]
fn originality(
    py: Python<'_>,
    images: Vec<PyImage>,
    training: Vec<PyImage>,
    central: Option<(usize, usize)>,
) -> PyResult<Vec<(f64, f64, f64)>> {
    let train = unwrap_images(&training);
    let xs = unwrap_images(&images);
    py.detach(move || -> patchsynth::Result<Vec<(f64, f64, f64)>> {
        let mask = match (central, train.first()) {
            (Some((cw, ch)), Some(t)) => Some(PixelMask::central(t.width(), t.height(), cw, ch)?),
            _ => None,
        };
        let index = OriginalityIndex::new(&train, mask)?;
        xs.iter()
            .map(|x| index.score(x).map(|o| (o.ratio, o.d_g, o.d_t)))
            .collect()
    })
    .map_err(py_err)
}

/// `(aggregate, per_training)`; entries are None where calibration failed.
#[pyfunction]
#[pyo3(signature = (training, generated, perplexity = 30.0))]
fn spread(
    py: Python<'_>,
    training: Vec<PyImage>,
    generated: Vec<PyImage>,
    perplexity: f64,
) -> PyResult<(f64, Vec<Option<f64>>)> {
    let t = unwrap_images(&training);
    let g = unwrap_images(&generated);
    let cfg = SpreadConfig {
        perplexity,
        ..SpreadConfig::default()
    };
    let r = py.detach(move || spread_score(&t, &g, &cfg)).map_err(py_err)?;
    Ok((r.aggregate, r.per_training))
}

/// Images and labels of a stored corpus split.
#[pyfunction]
fn load_corpus(dir: &str, split: &str) -> PyResult<(Vec<PyImage>, Vec<u8>)> {
    let c = patchsynth::corpus::load_corpus(std::path::Path::new(dir), split).map_err(py_err)?;
    Ok((c.images.into_iter().map(|inner| PyImage { inner }).collect(), c.labels))
}

#[pymodule]
fn patchsynth_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyClassModel>()?;
    m.add_function(wrap_pyfunction!(make_seed, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(originality, m)?)?;
    m.add_function(wrap_pyfunction!(spread, m)?)?;
    m.add_function(wrap_pyfunction!(load_corpus, m)?)?;
    Ok(())
}
