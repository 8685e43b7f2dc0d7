//! Python bindings: system specs, dataset generation, training, prediction,
//! roll-outs and evaluation.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use brodyn::error::Error;
use brodyn::evaluation::{evaluate, zero_shot, EvalModel, Protocol, Target};
use brodyn::integrator::{
    generate_training_data, random_initial_condition, rollout, GroundTruthDynamics,
    StepPairDataset,
};
use brodyn::models::{build_graph, LearnedDynamics, ModelFamily, ModelParams};
use brodyn::rng::NoiseStream;
use brodyn::systems::{default_spec, SystemKind, SystemSpec as CoreSpec};
use brodyn::tensor::Array;
use brodyn::training::{fit, TrainConfig};

fn to_py_err(e: Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn positions_to_array(positions: Vec<Vec<f64>>) -> PyResult<Array> {
    let n = positions.len();
    let mut data = Vec::with_capacity(n * 3);
    for row in &positions {
        if row.len() != 3 {
            return Err(PyValueError::new_err("positions must be n rows of 3"));
        }
        data.extend_from_slice(row);
    }
    Array::from_vec(vec![n, 3], data).map_err(to_py_err)
}

fn array_to_rows(a: &Array) -> Vec<Vec<f64>> {
    (0..a.shape()[0]).map(|i| a.row(i).to_vec()).collect()
}

/// Physical description of a spring system.
#[pyclass(name = "SystemSpec", from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: CoreSpec,
}

#[pymethods]
impl PySpec {
    /// Benchmark defaults for `kind` in {"linear", "nonlinear", "binary"}.
    #[new]
    fn new(kind: &str, n: usize) -> PyResult<Self> {
        let spec = default_spec(SystemKind::parse(kind).map_err(to_py_err)?, n)
            .map_err(to_py_err)?;
        Ok(PySpec { inner: spec })
    }

    #[getter]
    fn kind(&self) -> String {
        self.inner.kind.tag().to_string()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n_particles
    }

    #[getter]
    fn kbt(&self) -> f64 {
        self.inner.kbt
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.inner.dt
    }

    #[getter]
    fn particle_types(&self) -> Vec<usize> {
        self.inner.particle_types.clone()
    }

    #[getter]
    fn gamma_per_type(&self) -> Vec<f64> {
        self.inner.gamma_per_type.clone()
    }

    /// A copy at a different temperature.
    fn with_kbt(&self, kbt: f64) -> PyResult<Self> {
        if kbt < 0.0 {
            return Err(PyValueError::new_err("kBT must be >= 0"));
        }
        Ok(PySpec {
            inner: self.inner.with_kbt(kbt),
        })
    }

    /// A copy with a different particle count.
    fn resized(&self, n: usize) -> PyResult<Self> {
        Ok(PySpec {
            inner: self.inner.resized(n).map_err(to_py_err)?,
        })
    }

    /// True spring forces at the given positions.
    fn spring_force(&self, positions: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let x = positions_to_array(positions)?;
        let f = brodyn::systems::spring_force(&self.inner, &x).map_err(to_py_err)?;
        Ok(array_to_rows(&f))
    }

    /// Ring-polygon initial condition with Gaussian jitter.
    fn initial_condition(&self, seed: u64) -> Vec<Vec<f64>> {
        array_to_rows(&random_initial_condition(&self.inner, seed))
    }

    fn __repr__(&self) -> String {
        format!(
            "SystemSpec(kind='{}', n={}, kbt={}, dt={})",
            self.inner.kind.tag(),
            self.inner.n_particles,
            self.inner.kbt,
            self.inner.dt
        )
    }
}

/// One-step transition pairs extracted from ground-truth roll-outs.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: StepPairDataset,
}

#[pymethods]
impl PyDataset {
    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }
}

/// A trainable/trained model of one family.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    #[getter]
    fn family(&self) -> String {
        self.inner.family.tag().to_string()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Predicted `(forces, gammas)` at the given positions.
    fn predict(
        &self,
        spec: &PySpec,
        positions: Vec<Vec<f64>>,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let x = positions_to_array(positions)?;
        let dynamics = LearnedDynamics::new(&self.inner, &spec.inner).map_err(to_py_err)?;
        let pred = dynamics.predict(&spec.inner, &x, None).map_err(to_py_err)?;
        Ok((array_to_rows(&pred.forces), pred.gamma.data().to_vec()))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        brodyn::io::save_params(std::path::Path::new(path), &self.inner).map_err(to_py_err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: brodyn::io::load_params(std::path::Path::new(path)).map_err(to_py_err)?,
        })
    }
}

/// Per-experiment metrics.
#[pyclass(name = "MetricReport")]
struct PyReport {
    inner: brodyn::evaluation::MetricReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn kl_geometric_mean(&self) -> f64 {
        self.inner.kl_geometric_mean
    }

    #[getter]
    fn pe_geometric_mean(&self) -> f64 {
        self.inner.pe_geometric_mean
    }

    #[getter]
    fn brownian_error(&self) -> f64 {
        self.inner.brownian_error
    }

    #[getter]
    fn kl(&self) -> Vec<f64> {
        self.inner.kl.clone()
    }

    #[getter]
    fn position_error(&self) -> Vec<f64> {
        self.inner.position_error.clone()
    }

    #[getter]
    fn diverged(&self) -> usize {
        self.inner.diverged
    }
}

/// Ground-truth one-step training pairs from seeded forward simulations.
#[pyfunction]
fn generate_dataset(
    spec: &PySpec,
    n_traj: usize,
    points_per_traj: usize,
    seed: u64,
) -> PyResult<PyDataset> {
    Ok(PyDataset {
        inner: generate_training_data(&spec.inner, n_traj, points_per_traj, seed)
            .map_err(to_py_err)?,
    })
}

/// Fresh seeded parameters for a family in
/// {"brognet", "bdgnn", "bfgn", "bnn", "nn"}.
#[pyfunction]
fn init_model(family: &str, spec: &PySpec, seed: u64) -> PyResult<PyModel> {
    let family = ModelFamily::parse(family).map_err(to_py_err)?;
    Ok(PyModel {
        inner: brodyn::models::init_params(family, &spec.inner, seed),
    })
}

/// Per-epoch `(epoch, train_loss, val_loss)` rows.
type History = Vec<(usize, f64, f64)>;

/// Trains a model; returns it with the `(epoch, train_loss, val_loss)`
/// history.
#[pyfunction]
#[pyo3(signature = (family, spec, dataset, max_epochs, seed, lr=1e-3, batch_size=20))]
fn train(
    family: &str,
    spec: &PySpec,
    dataset: &PyDataset,
    max_epochs: usize,
    seed: u64,
    lr: f64,
    batch_size: usize,
) -> PyResult<(PyModel, History)> {
    let family = ModelFamily::parse(family).map_err(to_py_err)?;
    let cfg = TrainConfig {
        lr,
        batch_size,
        max_epochs,
        seed,
        ..TrainConfig::default()
    };
    let result = fit(family, &spec.inner, &dataset.inner, &cfg).map_err(to_py_err)?;
    let history = result
        .history
        .iter()
        .map(|h| (h.epoch, h.train_loss, h.val_loss))
        .collect();
    Ok((
        PyModel {
            inner: result.best_params,
        },
        history,
    ))
}

/// One seeded trajectory as `[steps+1][n][3]`, using the model's dynamics or
/// the ground truth when `model` is None.
#[pyfunction]
#[pyo3(signature = (spec, model, steps, seed, x0=None))]
fn simulate(
    spec: &PySpec,
    model: Option<&PyModel>,
    steps: usize,
    seed: u64,
    x0: Option<Vec<Vec<f64>>>,
) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let x0 = match x0 {
        Some(rows) => positions_to_array(rows)?,
        None => random_initial_condition(&spec.inner, seed),
    };
    let stream = NoiseStream::new(seed);
    let traj = match model {
        Some(m) => {
            let dynamics = LearnedDynamics::new(&m.inner, &spec.inner).map_err(to_py_err)?;
            rollout(&spec.inner, &x0, &dynamics, steps, &stream, 0)
        }
        None => rollout(&spec.inner, &x0, &GroundTruthDynamics, steps, &stream, 0),
    }
    .map_err(to_py_err)?;
    let n = spec.inner.n_particles;
    let mut out = Vec::with_capacity(steps + 1);
    for s in 0..=steps {
        let mut frame = Vec::with_capacity(n);
        for p in 0..n {
            let base = (s * n + p) * 3;
            frame.push(traj.data()[base..base + 3].to_vec());
        }
        out.push(frame);
    }
    Ok(out)
}

/// Runs the roll-out evaluation protocol against the ground truth.
#[pyfunction]
#[pyo3(signature = (model, spec, n_init=10, seeds_per_init=10, steps=100, seed=0))]
fn evaluate_model(
    model: &PyModel,
    spec: &PySpec,
    n_init: usize,
    seeds_per_init: usize,
    steps: usize,
    seed: u64,
) -> PyResult<PyReport> {
    let protocol = Protocol {
        n_init,
        seeds_per_init,
        steps,
        seed,
    };
    Ok(PyReport {
        inner: evaluate(&EvalModel::Learned(&model.inner), &spec.inner, &protocol)
            .map_err(to_py_err)?,
    })
}

/// Zero-shot transfer of a trained graph model to an unseen size or
/// temperature.
#[pyfunction]
#[pyo3(signature = (model, spec, n=None, kbt=None, n_init=10, seeds_per_init=10, steps=100, seed=0))]
#[allow(clippy::too_many_arguments)]
fn zero_shot_eval(
    model: &PyModel,
    spec: &PySpec,
    n: Option<usize>,
    kbt: Option<f64>,
    n_init: usize,
    seeds_per_init: usize,
    steps: usize,
    seed: u64,
) -> PyResult<PyReport> {
    let target = match (n, kbt) {
        (Some(n), None) => Target::Size(n),
        (None, Some(kbt)) => Target::Temperature(kbt),
        _ => {
            return Err(PyValueError::new_err(
                "pass exactly one of n= or kbt=",
            ))
        }
    };
    let protocol = Protocol {
        n_init,
        seeds_per_init,
        steps,
        seed,
    };
    Ok(PyReport {
        inner: zero_shot(&model.inner, &spec.inner, target, &protocol).map_err(to_py_err)?,
    })
}

/// Net predicted force per coordinate (zero for BroGNet by construction).
#[pyfunction]
fn total_force(model: &PyModel, spec: &PySpec, positions: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let x = positions_to_array(positions)?;
    if model.inner.family == ModelFamily::BroGnet {
        let graph = build_graph(&spec.inner, &x).map_err(to_py_err)?;
        let pred = brodyn::models::brognet_forward(&model.inner, &graph).map_err(to_py_err)?;
        return Ok(pred.total_force().to_vec());
    }
    let dynamics = LearnedDynamics::new(&model.inner, &spec.inner).map_err(to_py_err)?;
    let pred = dynamics.predict(&spec.inner, &x, None).map_err(to_py_err)?;
    Ok(pred.total_force().to_vec())
}

#[pymodule]
fn brodyn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpec>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(init_model, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_model, m)?)?;
    m.add_function(wrap_pyfunction!(zero_shot_eval, m)?)?;
    m.add_function(wrap_pyfunction!(total_force, m)?)?;
    Ok(())
}
