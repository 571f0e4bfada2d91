//! Python bindings: `import lpforge_py`.

use lpforge::accel::{simulate as run_sim, ArrayConfig};
use lpforge::linalg::{self, pack_ternary, unpack_ternary, Matrix};
use lpforge::netspec::{self, Mode, NetworkSpec};
use lpforge::quant::{self, QuantSpec};
use lpforge::toytrain::{self, Scheme, TrainConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

fn err(e: lpforge::Error) -> PyErr {
    match e {
        lpforge::Error::Invariant(m) => PyRuntimeError::new_err(m),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any().unbind(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for it in items {
                list.append(to_py(py, it)?)?;
            }
            list.into_any().unbind()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, it) in map {
                dict.set_item(k, to_py(py, it)?)?;
            }
            dict.into_any().unbind()
        }
    })
}

fn report<T: Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    to_py(py, &value)
}

fn matrix<T: Copy>(rows: Vec<Vec<T>>) -> PyResult<Matrix<T>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Matrix::from_vec(r, c, rows.concat()).map_err(err)
}

fn rows<T: Copy>(m: &Matrix<T>) -> Vec<Vec<T>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Integer codes for weights in [-1, 1]; None when `bits` is 32.
#[pyfunction]
fn quantize_weights(values: Vec<f64>, bits: u32) -> PyResult<Option<Vec<i32>>> {
    let q = quant::quantize_weights(&values, bits).map_err(err)?;
    Ok(q.codes().map(<[i32]>::to_vec))
}

/// Integer codes for activations in [0, 1]; None when `bits` is 32.
#[pyfunction]
fn quantize_activations(values: Vec<f64>, bits: u32) -> PyResult<Option<Vec<u32>>> {
    let q = quant::quantize_activations(&values, bits).map_err(err)?;
    Ok(q.codes().map(<[u32]>::to_vec))
}

/// Quantize then dequantize weights.
#[pyfunction]
fn fake_quantize_weights(values: Vec<f64>, bits: u32) -> PyResult<Vec<f64>> {
    quant::fake_quantize_weights(&values, bits).map_err(err)
}

/// Quantize then dequantize activations.
#[pyfunction]
fn fake_quantize_activations(values: Vec<f64>, bits: u32) -> PyResult<Vec<f64>> {
    quant::fake_quantize_activations(&values, bits).map_err(err)
}

/// Packs a K x N matrix of ternary codes into 2-bit fields, column-major.
#[pyfunction]
fn pack_ternary_words(codes: Vec<Vec<i32>>) -> PyResult<Vec<u32>> {
    Ok(pack_ternary(&matrix(codes)?).map_err(err)?.words().to_vec())
}

#[pyfunction]
fn unpack_ternary_words(rows: usize, cols: usize, words: Vec<u32>) -> PyResult<Vec<Vec<i32>>> {
    let p = linalg::PackedTernaryMatrix::from_words(rows, cols, words).map_err(err)?;
    Ok(self::rows(&unpack_ternary(&p).map_err(err)?))
}

/// Multiplier-free product of 8-bit activations (M x K) and ternary codes (K x N).
#[pyfunction]
fn gemm_ternary(a: Vec<Vec<u8>>, b: Vec<Vec<i32>>) -> PyResult<Vec<Vec<i32>>> {
    let packed = pack_ternary(&matrix(b)?).map_err(err)?;
    Ok(rows(&linalg::gemm_ternary(&matrix(a)?, &packed).map_err(err)?))
}

/// Runs the product on the systolic array model. Returns the report with
/// `output` added.
#[pyfunction]
#[pyo3(signature = (a, b, rows=8, cols=8))]
fn simulate(py: Python<'_>, a: Vec<Vec<u8>>, b: Vec<Vec<i32>>, rows: usize, cols: usize) -> PyResult<Py<PyAny>> {
    let cfg = ArrayConfig::new(rows, cols).map_err(err)?;
    let a = matrix(a)?;
    let k = a.cols();
    let res = run_sim(&a, &pack_ternary(&matrix(b)?).map_err(err)?, &cfg).map_err(err)?;
    let mut v = serde_json::to_value(res.report(k, &cfg)).expect("report serializes");
    v["output"] = serde_json::to_value(self::rows(&res.output)).expect("ints serialize");
    to_py(py, &v)
}

/// Distillation loss and its gradient w.r.t. the student logits.
#[pyfunction]
#[pyo3(signature = (student, labels, teacher=None, alpha=1.0, beta=0.5, temperature=1.0))]
fn distill_loss(
    student: Vec<Vec<f64>>,
    labels: Vec<usize>,
    teacher: Option<Vec<Vec<f64>>>,
    alpha: f64,
    beta: f64,
    temperature: f64,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let s = matrix(student)?;
    let t = teacher.map(matrix).transpose()?;
    let (loss, grad) = toytrain::distill_loss(&s, t.as_ref(), &labels, alpha, beta, temperature).map_err(err)?;
    Ok((loss, rows(&grad)))
}

/// Trains the toy network under one scheme and returns the history.
#[pyfunction]
#[pyo3(signature = (scheme, seed=1, epochs=None))]
fn train(py: Python<'_>, scheme: &str, seed: u64, epochs: Option<usize>) -> PyResult<Py<PyAny>> {
    let scheme: Scheme = scheme.parse().map_err(err)?;
    let mut cfg = TrainConfig { seed, ..TrainConfig::default() };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let result = py.detach(|| -> lpforge::Result<_> {
        let teacher = if scheme.needs_teacher() {
            Some(toytrain::train_teacher(&cfg)?.0)
        } else {
            None
        };
        Ok(toytrain::train(&cfg, scheme, teacher.as_ref())?.1)
    });
    report(py, &result.map_err(err)?)
}

/// A parsed network topology.
#[pyclass(name = "Network", frozen)]
struct PyNetwork {
    inner: NetworkSpec,
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (text, name="network"))]
    fn parse(text: &str, name: &str) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: netspec::parse_topology_named(name, text).map_err(err)?,
        })
    }

    /// One of the shipped topologies: resnet50, alexnet, r44, r56.
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        netspec::bundled(name)
            .map(|inner| PyNetwork { inner })
            .ok_or_else(|| PyValueError::new_err(format!("no bundled topology `{name}`")))
    }

    /// CIFAR ResNet with 6n+2 weighted layers.
    #[staticmethod]
    fn resnet_cifar(n: usize) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: netspec::resnet_cifar(n).map_err(err)?,
        })
    }

    #[getter]
    fn name(&self) -> &str {
        self.inner.name()
    }

    #[getter]
    fn conv_count(&self) -> usize {
        self.inner.conv_count()
    }

    #[getter]
    fn total_params(&self) -> u64 {
        self.inner.total_params()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[pyo3(signature = (factor=2.0, fraction=1.0))]
    fn widen(&self, factor: f64, fraction: f64) -> PyResult<Self> {
        Ok(PyNetwork {
            inner: netspec::widen(&self.inner, factor, fraction).map_err(err)?,
        })
    }

    #[pyo3(signature = (batch=1, mode="inference", wbits=32, abits=32))]
    fn footprint(&self, py: Python<'_>, batch: usize, mode: &str, wbits: u32, abits: u32) -> PyResult<Py<PyAny>> {
        let mode: Mode = mode.parse().map_err(err)?;
        let q = QuantSpec::new(wbits, abits).map_err(err)?;
        report(py, &netspec::footprint(&self.inner, batch, mode, q).map_err(err)?)
    }

    #[pyo3(signature = (wbits=32, abits=32))]
    fn cost(&self, py: Python<'_>, wbits: u32, abits: u32) -> PyResult<Py<PyAny>> {
        let q = QuantSpec::new(wbits, abits).map_err(err)?;
        report(py, &netspec::compute_cost(&self.inner, q))
    }

    fn __repr__(&self) -> String {
        format!("Network({:?}, {} layers)", self.inner.name(), self.inner.layers().len())
    }
}

#[pymodule]
pub fn lpforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(quantize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_activations, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quantize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fake_quantize_activations, m)?)?;
    m.add_function(wrap_pyfunction!(pack_ternary_words, m)?)?;
    m.add_function(wrap_pyfunction!(unpack_ternary_words, m)?)?;
    m.add_function(wrap_pyfunction!(gemm_ternary, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(distill_loss, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<PyNetwork>()?;
    Ok(())
}
