//! Python bindings: tensors, the arm environment, configs and training.

use std::path::PathBuf;

use conther_core::env::{self, forward_kinematics, ArmModel, Env, Environment, StepOutput, TaskSpec};
use conther_core::ndnum::Tensor;
use conther_core::trainer::{self, TrainConfig, Variant};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Autodiff tensor of `f64` values.
#[pyclass(name = "Tensor", unsendable)]
struct PyTensor {
    inner: Tensor,
}

fn wrap(t: Tensor) -> PyTensor {
    PyTensor { inner: t }
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, requires_grad = false))]
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> PyResult<Self> {
        let t = if requires_grad { Tensor::param(&shape, data) } else { Tensor::new(&shape, data) };
        t.map(wrap).map_err(value_err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.to_vec()
    }

    fn item(&self) -> f64 {
        self.inner.item()
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn zero_grad(&self) {
        self.inner.zero_grad()
    }

    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(value_err)
    }

    fn matmul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.inner.matmul(&other.inner).map(wrap).map_err(value_err)
    }

    fn add(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.inner.add(&other.inner).map(wrap).map_err(value_err)
    }

    fn sub(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.inner.sub(&other.inner).map(wrap).map_err(value_err)
    }

    fn mul(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.inner.mul(&other.inner).map(wrap).map_err(value_err)
    }

    fn minimum(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.inner.minimum(&other.inner).map(wrap).map_err(value_err)
    }

    fn softmax(&self, axis: usize) -> PyResult<PyTensor> {
        self.inner.softmax(axis).map(wrap).map_err(value_err)
    }

    fn scale(&self, s: f64) -> PyTensor {
        wrap(self.inner.scale(s))
    }

    fn tanh(&self) -> PyTensor {
        wrap(self.inner.tanh())
    }

    fn silu(&self) -> PyTensor {
        wrap(self.inner.silu())
    }

    fn square(&self) -> PyTensor {
        wrap(self.inner.square())
    }

    fn sum(&self) -> PyTensor {
        wrap(self.inner.sum())
    }

    fn mean(&self) -> PyTensor {
        wrap(self.inner.mean())
    }

    fn __matmul__(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.matmul(other)
    }

    fn __add__(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.add(other)
    }

    fn __sub__(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.sub(other)
    }

    fn __mul__(&self, other: &PyTensor) -> PyResult<PyTensor> {
        self.mul(other)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, data={:?})", self.inner.shape(), self.inner.to_vec())
    }
}

/// Resolved training configuration.
#[pyclass(name = "TrainConfig")]
struct PyConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses `[section]` / `key = value` text, then applies `overrides`.
    #[new]
    #[pyo3(signature = (text = "", overrides = None))]
    fn new(text: &str, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let inner = TrainConfig::from_text(text, &overrides.unwrap_or_default()).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant.name()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn window_len(&self) -> usize {
        self.inner.window_len()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(variant={}, seed={})", self.inner.variant, self.inner.seed)
    }
}

/// In-process arm environment.
#[pyclass(name = "Env", unsendable)]
struct PyEnv {
    inner: Env,
}

impl PyEnv {
    fn output<'py>(&self, py: Python<'py>, out: StepOutput) -> PyResult<Bound<'py, PyDict>> {
        let reward = self.inner.task().reward(&out.goal, &out.achieved_goal).map_err(runtime_err)?;
        let d = PyDict::new(py);
        d.set_item("observation", out.observation)?;
        d.set_item("goal", out.goal)?;
        d.set_item("achieved_goal", out.achieved_goal)?;
        d.set_item("reward", reward)?;
        d.set_item("done", out.done)?;
        Ok(d)
    }
}

#[pymethods]
impl PyEnv {
    /// Arm and task taken from `config`, or a planar 2-joint Reach task.
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyConfig>) -> PyResult<Self> {
        let (arm, task) = match config {
            Some(c) => (c.inner.arm.build().map_err(value_err)?, c.inner.task.clone()),
            None => (ArmModel::planar(2).map_err(value_err)?, TaskSpec::reach()),
        };
        Ok(Self {
            inner: Env::new(arm, task).map_err(value_err)?,
        })
    }

    #[getter]
    fn observation_dim(&self) -> usize {
        self.inner.observation_dim()
    }

    #[getter]
    fn action_dim(&self) -> usize {
        self.inner.arm().joint_count()
    }

    fn reset<'py>(&mut self, py: Python<'py>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.reset(seed).map_err(runtime_err)?;
        self.output(py, out)
    }

    fn step<'py>(&mut self, py: Python<'py>, action: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.inner.step(&action).map_err(runtime_err)?;
        self.output(py, out)
    }
}

/// Trains with `config` and returns the per-epoch records as dicts.
#[pyfunction]
#[pyo3(signature = (config, out_dir = None))]
fn train<'py>(py: Python<'py>, config: &PyConfig, out_dir: Option<PathBuf>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let metrics = trainer::train(&config.inner, out_dir.as_deref()).map_err(runtime_err)?;
    metrics
        .epochs
        .iter()
        .map(|e| {
            let d = PyDict::new(py);
            d.set_item("epoch", e.epoch)?;
            d.set_item("update_idx", e.update_idx)?;
            d.set_item("mean_reward", e.mean_reward)?;
            d.set_item("success_rate", e.success_rate)?;
            d.set_item("validation_reward", e.validation_reward)?;
            Ok(d)
        })
        .collect()
}

#[pyfunction]
fn reward_reach(d_goal: f64, threshold: f64) -> f64 {
    env::reward_reach(d_goal, threshold)
}

#[pyfunction]
fn reward_obstacle_task(d_goal: f64, obstacle_distances: Vec<f64>, d_g: f64, d_o: f64) -> f64 {
    env::reward_obstacle_task(d_goal, &obstacle_distances, d_g, d_o)
}

/// End-effector position of a planar arm with `len(angles)` joints.
#[pyfunction]
fn end_effector(angles: Vec<f64>) -> PyResult<[f64; 3]> {
    let arm = ArmModel::planar(angles.len()).map_err(value_err)?;
    Ok(forward_kinematics(&arm, &angles).map_err(value_err)?.end_effector)
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    Variant::ALL.iter().map(|v| v.name()).collect()
}

#[pymodule]
fn conther(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnv>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(reward_reach, m)?)?;
    m.add_function(wrap_pyfunction!(reward_obstacle_task, m)?)?;
    m.add_function(wrap_pyfunction!(end_effector, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    Ok(())
}
