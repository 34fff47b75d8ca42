//! Python bindings. Configurations and reports cross the boundary as plain
//! dicts using the same field names as the JSON files.

use std::collections::BTreeMap;

use gesta_core::autoencoder::{self, AEModel, LatentVector, TrainingConfig};
use gesta_core::metrics;
use gesta_core::phantom::{self, PhantomSpec};
use gesta_core::plausibility::{self, CriteriaConfig, Criterion, EvaluationMode};
use gesta_core::sampler::{self, SamplerConfig};
use gesta_core::{io, GestaError as CoreError, PeakField, VolumeGrid};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

create_exception!(
    gesta,
    GestaError,
    PyException,
    "Raised for any failure inside the core library."
);

fn err(e: CoreError) -> PyErr {
    GestaError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `T::default()` when `obj` is None, otherwise the dict decoded as `T`.
fn from_py<T: DeserializeOwned + Default>(py: Python<'_>, obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj.filter(|o| !o.is_none()) else {
        return Ok(T::default());
    };
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn parse_criterion(name: &str) -> PyResult<Criterion> {
    name.parse()
        .map_err(|e: CoreError| PyValueError::new_err(e.to_string()))
}

/// A polyline in world millimeters.
#[pyclass(module = "gesta", frozen, from_py_object)]
#[derive(Clone)]
struct Streamline {
    inner: gesta_core::Streamline,
}

#[pymethods]
impl Streamline {
    #[new]
    fn new(vertices: Vec<[f64; 3]>) -> PyResult<Self> {
        Ok(Streamline {
            inner: gesta_core::Streamline::new(vertices).map_err(err)?,
        })
    }

    #[getter]
    fn vertices(&self) -> Vec<[f64; 3]> {
        self.inner.vertices().to_vec()
    }

    fn length(&self) -> f64 {
        self.inner.length()
    }

    /// Total turning angle in degrees.
    fn winding(&self) -> f64 {
        self.inner.winding()
    }

    fn resample(&self, n: usize) -> PyResult<Streamline> {
        Ok(Streamline {
            inner: self.inner.resample(n).map_err(err)?,
        })
    }

    fn reversed(&self) -> Streamline {
        Streamline {
            inner: self.inner.reversed(),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Streamline({} vertices, {:.1} mm)",
            self.inner.len(),
            self.inner.length()
        )
    }
}

/// Streamlines with optional bundle labels.
#[pyclass(module = "gesta", frozen, from_py_object)]
#[derive(Clone)]
struct Tractogram {
    inner: gesta_core::Tractogram,
}

#[pymethods]
impl Tractogram {
    #[new]
    #[pyo3(signature = (streamlines, labels=None))]
    fn new(streamlines: Vec<Streamline>, labels: Option<Vec<u32>>) -> PyResult<Self> {
        let s = streamlines.into_iter().map(|s| s.inner).collect();
        let inner = match labels {
            Some(l) => gesta_core::Tractogram::with_labels(s, l).map_err(err)?,
            None => gesta_core::Tractogram::new(s),
        };
        Ok(Tractogram { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Tractogram {
            inner: io::read_tractogram(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_tractogram(path, &self.inner).map_err(err)
    }

    #[getter]
    fn streamlines(&self) -> Vec<Streamline> {
        self.inner
            .streamlines
            .iter()
            .map(|s| Streamline { inner: s.clone() })
            .collect()
    }

    #[getter]
    fn labels(&self) -> Option<Vec<u32>> {
        self.inner.labels.clone()
    }

    #[getter]
    fn label_names(&self) -> BTreeMap<u32, String> {
        self.inner.label_names.clone()
    }

    fn bundle_ids(&self) -> Vec<u32> {
        self.inner.bundle_ids()
    }

    /// Streamlines of one bundle as a new tractogram.
    fn bundle(&self, id: u32) -> PyResult<Tractogram> {
        self.inner
            .split_by_bundle()
            .remove(&id)
            .map(|inner| Tractogram { inner })
            .ok_or_else(|| PyValueError::new_err(format!("no bundle {id}")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Tractogram({} streamlines, {} bundles)",
            self.inner.len(),
            self.inner.bundle_ids().len()
        )
    }
}

/// A voxel grid holding a binary mask or scalar values.
#[pyclass(module = "gesta", frozen, from_py_object)]
#[derive(Clone)]
struct Volume {
    inner: VolumeGrid,
}

#[pymethods]
impl Volume {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Volume {
            inner: io::read_volume(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_volume(path, &self.inner).map_err(err)
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.geometry().dims()
    }

    #[getter]
    fn voxel_size(&self) -> [f64; 3] {
        self.inner.geometry().voxel_size()
    }

    /// Number of nonzero voxels.
    fn count(&self) -> usize {
        self.inner.count()
    }

    fn contains(&self, point: [f64; 3]) -> bool {
        self.inner.contains_point(point)
    }

    #[pyo3(signature = (iterations=1, connectivity=1))]
    fn dilate(&self, iterations: usize, connectivity: u8) -> PyResult<Volume> {
        Ok(Volume {
            inner: self.inner.dilate(iterations, connectivity).map_err(err)?,
        })
    }

    #[pyo3(signature = (iterations=1, connectivity=1))]
    fn erode(&self, iterations: usize, connectivity: u8) -> PyResult<Volume> {
        Ok(Volume {
            inner: self.inner.erode(iterations, connectivity).map_err(err)?,
        })
    }

    /// Linear indices of the voxels a streamline passes through.
    fn voxels_traversed(&self, s: &Streamline) -> Vec<usize> {
        self.inner.geometry().voxels_traversed(&s.inner).into_iter().collect()
    }

    fn __repr__(&self) -> String {
        let [x, y, z] = self.dims();
        format!("Volume({x}x{y}x{z}, {} nonzero)", self.inner.count())
    }
}

/// Per-voxel fODF peak directions.
#[pyclass(module = "gesta", frozen, from_py_object)]
#[derive(Clone)]
struct Peaks {
    inner: PeakField,
}

#[pymethods]
impl Peaks {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Peaks {
            inner: io::read_peaks(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::write_peaks(path, &self.inner).map_err(err)
    }

    /// Interpolated peaks at a world point.
    fn at(&self, point: [f64; 3]) -> Vec<[f64; 3]> {
        self.inner.interpolate(point).to_vec()
    }
}

/// The synthetic phantom: ground truth, masks and peaks.
#[pyclass(module = "gesta", frozen)]
struct Phantom {
    #[pyo3(get)]
    tractogram: Tractogram,
    #[pyo3(get)]
    wm: Volume,
    #[pyo3(get)]
    gm: Volume,
    #[pyo3(get)]
    brain: Volume,
    #[pyo3(get)]
    peaks: Peaks,
    #[pyo3(get)]
    bundle_masks: BTreeMap<u32, Volume>,
}

/// Generates the phantom from a spec dict (defaults when omitted).
#[pyfunction]
#[pyo3(signature = (spec=None))]
fn generate_phantom(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>) -> PyResult<Phantom> {
    let spec: PhantomSpec = from_py(py, spec)?;
    let d = py.detach(|| phantom::generate(&spec)).map_err(err)?;
    Ok(Phantom {
        tractogram: Tractogram { inner: d.tractogram },
        wm: Volume { inner: d.wm },
        gm: Volume { inner: d.gm },
        brain: Volume { inner: d.brain },
        peaks: Peaks { inner: d.peaks },
        bundle_masks: d
            .bundle_masks
            .into_iter()
            .map(|(id, inner)| (id, Volume { inner }))
            .collect(),
    })
}

/// Per-bundle random subset of `percent`% of the streamlines.
#[pyfunction]
fn subsample_seeds(t: &Tractogram, percent: f64, seed: u64) -> PyResult<(Tractogram, Vec<String>)> {
    let (inner, warnings) = phantom::subsample_seeds(&t.inner, percent, seed).map_err(err)?;
    Ok((Tractogram { inner }, warnings))
}

/// A trained streamline autoencoder.
#[pyclass(module = "gesta", frozen)]
struct Model {
    inner: AEModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: autoencoder::load_model(path).map_err(err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        autoencoder::save_model(&self.inner, path).map_err(err)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn architecture<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.architecture())
    }

    fn encode(&self, py: Python<'_>, streamlines: Vec<Streamline>) -> PyResult<Vec<Vec<f64>>> {
        let s: Vec<_> = streamlines.into_iter().map(|s| s.inner).collect();
        let enc = py.detach(|| self.inner.encode_batch(&s)).map_err(err)?;
        Ok(enc.into_iter().map(|e| e.latent.into_inner()).collect())
    }

    fn decode(&self, py: Python<'_>, latents: Vec<Vec<f64>>) -> PyResult<Vec<Streamline>> {
        let z = latents
            .into_iter()
            .map(LatentVector::new)
            .collect::<Result<Vec<_>, _>>()
            .map_err(err)?;
        let out = py.detach(|| self.inner.decode_batch(&z)).map_err(err)?;
        Ok(out.into_iter().map(|inner| Streamline { inner }).collect())
    }

    fn reconstruct(&self, py: Python<'_>, streamlines: Vec<Streamline>) -> PyResult<Vec<Streamline>> {
        let s: Vec<_> = streamlines.into_iter().map(|s| s.inner).collect();
        let out = py.detach(|| self.inner.reconstruct(&s)).map_err(err)?;
        Ok(out.into_iter().map(|inner| Streamline { inner }).collect())
    }
}

/// Trains an autoencoder; returns the model and the training report as a dict.
#[pyfunction]
#[pyo3(signature = (tractogram, config=None))]
fn train<'py>(
    py: Python<'py>,
    tractogram: &Tractogram,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let cfg: TrainingConfig = from_py(py, config)?;
    let (inner, report) = py.detach(|| autoencoder::train(&tractogram.inner, &cfg)).map_err(err)?;
    Ok((Model { inner }, to_py(py, &report)?))
}

/// Draws new streamlines per bundle of `seeds`; returns the candidates and
/// one diagnostics dict per bundle.
#[pyfunction]
#[pyo3(signature = (model, seeds, config=None))]
fn sample<'py>(
    py: Python<'py>,
    model: &Model,
    seeds: &Tractogram,
    config: Option<&Bound<'py, PyAny>>,
) -> PyResult<(Tractogram, Bound<'py, PyAny>)> {
    let cfg: SamplerConfig = from_py(py, config)?;
    let out = py
        .detach(|| sampler::sample_bundles(&model.inner, &seeds.inner, &cfg))
        .map_err(err)?;
    let reports = to_py(py, &(&out.reports, &out.failures))?;
    Ok((Tractogram { inner: out.candidates }, reports))
}

/// Filters candidates with a plausibility criterion. `criteria` is a preset
/// name or a dict of thresholds.
#[pyfunction]
#[pyo3(signature = (candidates, wm, gm, brain, peaks, criterion="ADG_B", criteria=None, full=false))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    candidates: &Tractogram,
    wm: &Volume,
    gm: &Volume,
    brain: &Volume,
    peaks: &Peaks,
    criterion: &str,
    criteria: Option<&Bound<'py, PyAny>>,
    full: bool,
) -> PyResult<(Tractogram, Bound<'py, PyAny>)> {
    let cfg: CriteriaConfig = match criteria {
        Some(c) if c.extract::<String>().is_ok() => {
            let name: String = c.extract()?;
            CriteriaConfig::preset(&name).ok_or_else(|| PyValueError::new_err(format!("unknown preset {name}")))?
        }
        other => from_py(py, other)?,
    };
    let c = parse_criterion(criterion)?;
    let mode = if full {
        EvaluationMode::Full
    } else {
        EvaluationMode::Fast
    };
    let (accepted, report) = py
        .detach(|| {
            let masks = plausibility::prepare_masks(&wm.inner, &gm.inner, &brain.inner, &cfg)?;
            plausibility::evaluate(&candidates.inner, &masks, &peaks.inner, &cfg, c, mode)
        })
        .map_err(err)?;
    Ok((Tractogram { inner: accepted }, to_py(py, &report)?))
}

/// Fraction of the ground-truth mask voxels traversed by the streamlines.
#[pyfunction]
fn bundle_overlap(streamlines: Vec<Streamline>, gt_mask: &Volume) -> PyResult<f64> {
    metrics::bundle_overlap(streamlines.iter().map(|s| &s.inner), &gt_mask.inner).map_err(err)
}

/// Per-bundle overlap and volume of seeds and generated streamlines.
#[pyfunction]
#[pyo3(signature = (seeds, generated, gt_masks, union=true, label="scores"))]
fn score<'py>(
    py: Python<'py>,
    seeds: &Tractogram,
    generated: &Tractogram,
    gt_masks: BTreeMap<u32, Volume>,
    union: bool,
    label: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let masks: BTreeMap<u32, VolumeGrid> = gt_masks.into_iter().map(|(k, v)| (k, v.inner)).collect();
    let scores = metrics::score_experiment(label, &seeds.inner, &generated.inner, &masks, union).map_err(err)?;
    to_py(py, &scores)
}

#[pymodule]
fn gesta(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GestaError", m.py().get_type::<GestaError>())?;
    m.add_class::<Streamline>()?;
    m.add_class::<Tractogram>()?;
    m.add_class::<Volume>()?;
    m.add_class::<Peaks>()?;
    m.add_class::<Phantom>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(subsample_seeds, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(sample, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(bundle_overlap, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
