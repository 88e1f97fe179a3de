//! Python module `duvio`: sequences, disturbances, dehazing, pose
//! inference, metrics and the full pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyIndexError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use duvio_core::cli::{parse_config, run_pipeline};
use duvio_core::dataio::{build_windows, load_sequence, save_sequence, Scenario, SequenceDataset};
use duvio_core::dehaze::{capped_psnr, image_metrics as core_image_metrics, Generator, GeneratorConfig};
use duvio_core::disturb::{disturb_sequence, synthesize_sequence, SyntheticSpec};
use duvio_core::eval::{
    capture_hardware_metrics, compute_rmse as core_compute_rmse, integrate_trajectory as core_integrate, Reading,
    StubProbe,
};
use duvio_core::geometry::{AbsolutePose, PoseDelta};
use duvio_core::raster::Raster;
use duvio_core::vionet::{infer_sequence, VioNet};
use duvio_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Load { .. } => PyIOError::new_err(e.to_string()),
        Error::Stage { .. } | Error::Workload { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn scenario(name: &str) -> PyResult<Scenario> {
    name.parse().map_err(py_err)
}

fn raster(width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Raster> {
    Raster::new(width, height, pixels).map_err(py_err)
}

fn delta(v: &[f64]) -> PyResult<PoseDelta> {
    if v.len() != 6 {
        return Err(PyValueError::new_err(format!("pose delta needs 6 values, got {}", v.len())));
    }
    Ok(PoseDelta::from_slice(v))
}

/// A recorded or synthetic sequence.
#[pyclass(name = "Sequence", module = "duvio", skip_from_py_object)]
#[derive(Clone)]
struct PySequence {
    inner: SequenceDataset,
}

#[pymethods]
impl PySequence {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: load_sequence(&path).map_err(py_err)? })
    }

    /// Renders a synthetic sequence; `spec_toml` overrides the default spec.
    #[staticmethod]
    #[pyo3(signature = (spec_toml=None))]
    fn synthesize(spec_toml: Option<&str>) -> PyResult<Self> {
        let spec: SyntheticSpec = match spec_toml {
            Some(t) => toml::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => SyntheticSpec::default(),
        };
        Ok(Self { inner: synthesize_sequence(&spec).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_sequence(&self.inner, &path).map_err(py_err)
    }

    /// Copy with every frame disturbed under `scenario`.
    fn disturb(&self, scenario_name: &str) -> PyResult<Self> {
        let s = scenario(scenario_name)?;
        Ok(Self {
            inner: disturb_sequence(&self.inner, s, &Default::default(), &Default::default()),
        })
    }

    #[getter]
    fn sequence_id(&self) -> String {
        self.inner.sequence_id.clone()
    }

    #[getter]
    fn scenario(&self) -> String {
        self.inner.scenario.as_str().to_string()
    }

    fn __len__(&self) -> usize {
        self.inner.frames.len()
    }

    fn frame_times(&self) -> Vec<f64> {
        self.inner.frame_times()
    }

    /// `(width, height, row-major intensities in [0, 1])`
    fn frame(&self, index: usize) -> PyResult<(usize, usize, Vec<f64>)> {
        let f = self
            .inner
            .frames
            .get(index)
            .ok_or_else(|| PyIndexError::new_err(format!("frame {index} out of range")))?;
        let (w, h) = f.image.dims();
        Ok((w, h, f.image.data().to_vec()))
    }

    /// Ground-truth relative pose of every consecutive frame pair.
    fn reference_deltas(&self) -> PyResult<Vec<[f64; 6]>> {
        Ok(build_windows(&self.inner).map_err(py_err)?.iter().map(|w| w.target.to_array()).collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "Sequence(id={:?}, scenario={}, frames={})",
            self.inner.sequence_id,
            self.inner.scenario,
            self.inner.frames.len()
        )
    }
}

/// Dehazing generator.
#[pyclass(name = "Dehazer", module = "duvio")]
struct PyDehazer {
    inner: Generator,
}

#[pymethods]
impl PyDehazer {
    /// Untrained generator from a JSON config (defaults when omitted).
    #[new]
    #[pyo3(signature = (config_json=None, seed=0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: GeneratorConfig = match config_json {
            Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => GeneratorConfig::default(),
        };
        Ok(Self { inner: Generator::new(cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Generator::load(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    /// Dehazes one frame given as row-major intensities.
    fn dehaze(&self, width: usize, height: usize, pixels: Vec<f64>) -> PyResult<Vec<f64>> {
        let img = raster(width, height, pixels)?;
        Ok(self.inner.generate(&img).map_err(py_err)?.into_data())
    }
}

/// Pose network.
#[pyclass(name = "PoseNet", module = "duvio")]
struct PyPoseNet {
    inner: VioNet,
}

#[pymethods]
impl PyPoseNet {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: VioNet::load(&path).map_err(py_err)? })
    }

    /// Relative poses `[vx, vy, vz, phix, phiy, phiz]` per frame pair.
    #[pyo3(signature = (sequence, dehazer=None))]
    fn infer(&self, sequence: &PySequence, dehazer: Option<PyRef<'_, PyDehazer>>) -> PyResult<Vec<[f64; 6]>> {
        let gen = dehazer.as_ref().map(|d| &d.inner);
        let out = infer_sequence(&self.inner, &sequence.inner, gen).map_err(py_err)?;
        Ok(out.iter().map(|d| d.to_array()).collect())
    }
}

/// PSNR (capped), SSIM, MSE and RMSE of `candidate` against `reference`.
#[pyfunction]
fn image_metrics<'py>(
    py: Python<'py>,
    width: usize,
    height: usize,
    reference: Vec<f64>,
    candidate: Vec<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let m = core_image_metrics(&raster(width, height, reference)?, &raster(width, height, candidate)?).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("psnr", capped_psnr(m.psnr))?;
    d.set_item("ssim", m.ssim)?;
    d.set_item("mse", m.mse)?;
    d.set_item("rmse", m.rmse)?;
    Ok(d)
}

/// Pooled per-axis `(v_rmse, phi_rmse)`.
#[pyfunction]
fn compute_rmse(predictions: Vec<Vec<f64>>, references: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
    let p = predictions.iter().map(|v| delta(v)).collect::<PyResult<Vec<_>>>()?;
    let r = references.iter().map(|v| delta(v)).collect::<PyResult<Vec<_>>>()?;
    core_compute_rmse(&p, &r).map_err(py_err)
}

/// Chains relative poses from `start = (t, [x, y, z], [w, x, y, z])`.
#[pyfunction]
fn integrate_trajectory(
    start: (f64, [f64; 3], [f64; 4]),
    deltas: Vec<Vec<f64>>,
) -> PyResult<Vec<(f64, [f64; 3], [f64; 4])>> {
    let s = AbsolutePose::from_wxyz(start.0, start.1, start.2);
    let d = deltas.iter().map(|v| delta(v)).collect::<PyResult<Vec<_>>>()?;
    let poses = core_integrate(&s, &d, None).map_err(py_err)?;
    Ok(poses
        .iter()
        .map(|p| (p.timestamp, [p.translation.x, p.translation.y, p.translation.z], p.wxyz()))
        .collect())
}

/// Parses and validates an experiment config; raises with every problem.
#[pyfunction]
fn validate_config(toml_text: &str) -> PyResult<String> {
    let cfg = parse_config(toml_text).map_err(py_err)?;
    cfg.to_toml().map_err(py_err)
}

/// Runs the full pipeline and returns the report JSON.
#[pyfunction]
fn run(py: Python<'_>, toml_text: &str) -> PyResult<String> {
    let cfg = parse_config(toml_text).map_err(py_err)?;
    let out = py.detach(|| run_pipeline(&cfg)).map_err(py_err)?;
    std::fs::read_to_string(out.dir.join("report").join("report.json")).map_err(|e| PyIOError::new_err(e.to_string()))
}

/// Times `workload()`; optional constant probe readings stand in for an
/// accelerator probe. Unread fields come back as "unavailable".
#[pyfunction]
#[pyo3(signature = (workload, power=None, gpu_util=None, memory=None, temperature=None))]
fn capture_hardware<'py>(
    py: Python<'py>,
    workload: Bound<'py, PyAny>,
    power: Option<f64>,
    gpu_util: Option<f64>,
    memory: Option<f64>,
    temperature: Option<f64>,
) -> PyResult<Bound<'py, PyDict>> {
    let mut stub = StubProbe { power, gpu_util, memory, temperature };
    let any = [power, gpu_util, memory, temperature].iter().any(Option::is_some);
    let probe: Option<&mut dyn duvio_core::eval::HardwareProbe> = if any { Some(&mut stub) } else { None };
    let mut py_error = None;
    let result = capture_hardware_metrics(probe, || {
        workload.call0().map(|_| ()).map_err(|e| {
            let msg = e.to_string();
            py_error = Some(e);
            Error::InvalidArgument(msg)
        })
    });
    let (m, ()) = match result {
        Ok(v) => v,
        Err(e) => return Err(py_error.unwrap_or_else(|| py_err(e))),
    };
    let d = PyDict::new(py);
    d.set_item("inference_time", m.inference_time)?;
    for (k, r) in [("power", m.power), ("gpu_util", m.gpu_util), ("memory", m.memory), ("temperature", m.temperature)] {
        match r {
            Reading::Measured(v) => d.set_item(k, v)?,
            Reading::Unavailable => d.set_item(k, "unavailable")?,
        }
    }
    Ok(d)
}

#[pymodule]
fn duvio(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PySequence>()?;
    m.add_class::<PyDehazer>()?;
    m.add_class::<PyPoseNet>()?;
    m.add_function(wrap_pyfunction!(image_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(compute_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(capture_hardware, m)?)?;
    Ok(())
}
