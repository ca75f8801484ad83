//! Python bindings: primitives, metrics, feature files, training and
//! verification.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use pin_core::config::RunConfig;
use pin_core::data::{Domain, FeatureRecord, Label, ShortcutSpec};
use pin_core::numeric::{self, Mat64, Vec64};
use pin_core::train::TrainState;
use pin_core::verify::VerifyOptions;
use pin_core::{eval, pinf, state_file, train, verify, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn label(v: u8) -> PyResult<Label> {
    Label::from_u8(v).ok_or_else(|| PyValueError::new_err(format!("label must be 0 or 1, got {v}")))
}

fn labels(v: &[u8]) -> PyResult<Vec<Label>> {
    v.iter().map(|x| label(*x)).collect()
}

fn vec64(v: Vec<f64>) -> PyResult<Vec64> {
    Vec64::new(v).map_err(to_py)
}

fn mat64(rows: Vec<Vec<f64>>) -> PyResult<Mat64> {
    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    Mat64::from_rows(&refs).map_err(to_py)
}

/// `W x` for a row-major matrix given as a list of rows.
#[pyfunction]
fn affine(w: Vec<Vec<f64>>, x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(numeric::affine(&mat64(w)?, &vec64(x)?).map_err(to_py)?.into_inner())
}

/// `rowsoftmax(q k^T) v`.
#[pyfunction]
fn outer_softmax_attend(q: Vec<f64>, k: Vec<f64>, v: Vec<f64>) -> PyResult<Vec<f64>> {
    let a = numeric::outer_softmax_attend(&vec64(q)?, &vec64(k)?, &vec64(v)?).map_err(to_py)?;
    Ok(a.into_inner())
}

#[pyfunction]
fn softplus(x: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(numeric::softplus(&vec64(x)?).into_inner())
}

#[pyfunction]
fn sigmoid(x: f64) -> f64 {
    numeric::sigmoid(x)
}

#[pyfunction]
fn bce_with_logit(logit: f64, y: u8) -> PyResult<f64> {
    Ok(numeric::bce_with_logit(logit, label(y)?))
}

#[pyfunction]
fn accuracy(probs: Vec<f64>, y: Vec<u8>) -> PyResult<f64> {
    eval::accuracy(&probs, &labels(&y)?).map_err(to_py)
}

#[pyfunction]
fn average_precision(scores: Vec<f64>, y: Vec<u8>) -> PyResult<f64> {
    eval::average_precision(&scores, &labels(&y)?).map_err(to_py)
}

/// Contents of a PINF feature file.
#[pyclass(module = "pin_noise", skip_from_py_object)]
#[derive(Clone)]
struct FeatureSet {
    inner: pin_core::FeatureSet,
}

#[pymethods]
impl FeatureSet {
    /// Build from rows of features, labels (0 real, 1 fake) and domains
    /// (0 train, 1 id_test, 2 ood_test).
    #[new]
    #[pyo3(signature = (features, labels, domains, anchors=None))]
    fn new(
        features: Vec<Vec<f32>>,
        labels: Vec<u8>,
        domains: Vec<u8>,
        anchors: Option<(Vec<f32>, Vec<f32>)>,
    ) -> PyResult<Self> {
        if features.len() != labels.len() || features.len() != domains.len() {
            return Err(PyValueError::new_err("features, labels and domains differ in length"));
        }
        let dim = features.first().map_or(0, |r| r.len());
        let records = features
            .into_iter()
            .zip(labels)
            .zip(domains)
            .map(|((x, y), d)| {
                Ok(FeatureRecord {
                    x,
                    label: label(y)?,
                    domain: Domain::from_u8(d).ok_or_else(|| PyValueError::new_err(format!("bad domain {d}")))?,
                })
            })
            .collect::<PyResult<Vec<_>>>()?;
        let mut inner = pin_core::FeatureSet::new(dim, records).map_err(to_py)?;
        inner.anchors = anchors.map(|(real, fake)| pin_core::data::AnchorRows { real, fake });
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    fn __len__(&self) -> usize {
        self.inner.records.len()
    }

    fn features(&self) -> Vec<Vec<f32>> {
        self.inner.records.iter().map(|r| r.x.clone()).collect()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.records.iter().map(|r| r.label.as_u8()).collect()
    }

    fn domains(&self) -> Vec<u8> {
        self.inner.records.iter().map(|r| r.domain.as_u8()).collect()
    }

    fn anchors(&self) -> Option<(Vec<f32>, Vec<f32>)> {
        self.inner.anchors.as_ref().map(|a| (a.real.clone(), a.fake.clone()))
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Planted-shortcut benchmark; `spec` is a JSON object with any subset of the
/// generator fields.
#[pyfunction]
#[pyo3(signature = (spec=None))]
fn gen_shortcut_dataset(spec: Option<&str>) -> PyResult<FeatureSet> {
    let spec: ShortcutSpec = match spec {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => ShortcutSpec::default(),
    };
    Ok(FeatureSet {
        inner: spec.generate().map_err(to_py)?,
    })
}

#[pyfunction]
fn read_features(path: &str) -> PyResult<FeatureSet> {
    Ok(FeatureSet {
        inner: pinf::read_features(path).map_err(to_py)?,
    })
}

#[pyfunction]
fn write_features(path: &str, data: &FeatureSet) -> PyResult<()> {
    pinf::write_features(path, &data.inner).map_err(to_py)
}

fn parse_config(config: Option<&str>) -> PyResult<RunConfig> {
    match config {
        Some(s) => RunConfig::from_json(s).map_err(to_py),
        None => Ok(RunConfig::default()),
    }
}

/// A trained (or freshly initialized) model.
#[pyclass(module = "pin_noise")]
struct Model {
    state: TrainState,
}

#[pymethods]
impl Model {
    /// Fresh initialization for `data` under the JSON `config`.
    #[new]
    #[pyo3(signature = (data, config=None))]
    fn new(data: &FeatureSet, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        Ok(Self {
            state: TrainState::init(&cfg, &data.inner).map_err(to_py)?,
        })
    }

    /// Initialize and train for the configured epochs.
    #[staticmethod]
    #[pyo3(signature = (data, config=None))]
    fn train(py: Python<'_>, data: &FeatureSet, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config)?;
        let set = data.inner.clone();
        let state = py.detach(move || train::train(&set, &cfg)).map_err(to_py)?;
        Ok(Self { state })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            state: state_file::load_state(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        state_file::save_state(path, &self.state).map_err(to_py)
    }

    /// Serialized model file contents.
    fn to_bytes(&self) -> Vec<u8> {
        state_file::encode_state(&self.state)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.state.step()
    }

    #[getter]
    fn config(&self) -> String {
        self.state.config.to_json()
    }

    /// `P(fake | x)` from the clean head.
    fn predict(&self, x: Vec<f64>) -> PyResult<f64> {
        self.state.predict(&x).map_err(to_py)
    }

    /// Per-iteration `(step, loss_base, loss_vpn, loss_total, batch_acc)`.
    fn curves(&self) -> Vec<(u64, f64, f64, f64, f64)> {
        self.state
            .curves
            .iter()
            .map(|r| (r.step, r.loss_base, r.loss_vpn, r.loss_total, r.batch_acc))
            .collect()
    }

    /// `{domain: (n, accuracy, average_precision)}`; undefined metrics are None.
    fn evaluate<'py>(&self, py: Python<'py>, data: &FeatureSet) -> PyResult<Bound<'py, PyDict>> {
        let report = eval::evaluate(&self.state, &data.inner).map_err(to_py)?;
        let out = PyDict::new(py);
        for m in report.domains {
            out.set_item(m.domain.name(), (m.n, m.accuracy, m.average_precision))?;
        }
        Ok(out)
    }
}

/// Runs the verification suite at a fresh initialization and returns
/// `[(check, error, tolerance, passed)]`.
#[pyfunction]
#[pyo3(signature = (config=None))]
fn verify_all(py: Python<'_>, config: Option<&str>) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let cfg = parse_config(config)?;
    let report = py
        .detach(move || verify::verify_fresh(&cfg, &VerifyOptions::default()))
        .map_err(to_py)?;
    Ok(report
        .checks
        .into_iter()
        .map(|c| (c.name, c.measured, c.tolerance, c.passed))
        .collect())
}

#[pymodule]
fn pin_noise(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(affine, m)?)?;
    m.add_function(wrap_pyfunction!(outer_softmax_attend, m)?)?;
    m.add_function(wrap_pyfunction!(softplus, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(bce_with_logit, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(gen_shortcut_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    m.add_function(wrap_pyfunction!(verify_all, m)?)?;
    m.add_class::<FeatureSet>()?;
    m.add_class::<Model>()?;
    Ok(())
}
