//! Python bindings for the FMO performance toolkit.
//!
//! Results with nested structure (work breakdowns, calibration results,
//! simulation reports, energy reports) are returned as plain dictionaries.

use fmo_petasim as core;
use fmo_petasim::presets;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::NotConverged { .. } | core::Error::CalibrationDiverged { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: serde::Serialize>(py: Python<'_>, value: &T) -> PyResult<PyObject> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let json = py.import_bound("json")?;
    Ok(json.call_method1("loads", (text,))?.unbind())
}

#[pyclass(name = "CostParameters", module = "fmo_petasim_py")]
#[derive(Clone)]
struct PyCostParameters {
    inner: core::CostParameters,
}

#[pymethods]
impl PyCostParameters {
    #[new]
    #[pyo3(signature = (f_m0, f_m1, f_d0, f_d1, f_es0, nd_slope = 7.5))]
    fn new(
        f_m0: f64,
        f_m1: f64,
        f_d0: f64,
        f_d1: f64,
        f_es0: f64,
        nd_slope: f64,
    ) -> PyResult<Self> {
        let inner = core::CostParameters {
            f_m0,
            f_m1,
            f_d0,
            f_d1,
            f_es0,
            nd_slope,
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: presets::params(name).map_err(err)?,
        })
    }

    #[getter]
    fn f_m0(&self) -> f64 {
        self.inner.f_m0
    }
    #[getter]
    fn f_m1(&self) -> f64 {
        self.inner.f_m1
    }
    #[getter]
    fn f_d0(&self) -> f64 {
        self.inner.f_d0
    }
    #[getter]
    fn f_d1(&self) -> f64 {
        self.inner.f_d1
    }
    #[getter]
    fn f_es0(&self) -> f64 {
        self.inner.f_es0
    }
    #[getter]
    fn nd_slope(&self) -> f64 {
        self.inner.nd_slope
    }

    fn __repr__(&self) -> String {
        let p = &self.inner;
        format!(
            "CostParameters(f_m0={}, f_m1={}, f_d0={}, f_d1={}, f_es0={}, nd_slope={})",
            p.f_m0, p.f_m1, p.f_d0, p.f_d1, p.f_es0, p.nd_slope
        )
    }
}

#[pyclass(name = "MachineSpec", module = "fmo_petasim_py")]
#[derive(Clone)]
struct PyMachineSpec {
    inner: core::MachineSpec,
}

#[pymethods]
impl PyMachineSpec {
    #[new]
    #[pyo3(signature = (k, e, ref_node_flops = None))]
    fn new(k: u64, e: f64, ref_node_flops: Option<f64>) -> PyResult<Self> {
        let mut inner = core::MachineSpec::new(k, e).map_err(err)?;
        if let Some(f) = ref_node_flops {
            inner = inner.with_ref_flops(f);
        }
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: presets::machine(name).map_err(err)?,
        })
    }

    #[getter]
    fn k(&self) -> u64 {
        self.inner.k
    }
    #[getter]
    fn e(&self) -> f64 {
        self.inner.e
    }
    #[getter]
    fn ref_node_flops(&self) -> Option<f64> {
        self.inner.ref_node_flops
    }

    fn __repr__(&self) -> String {
        format!("MachineSpec(k={}, e={})", self.inner.k, self.inner.e)
    }
}

#[pyclass(name = "WorkloadShape", module = "fmo_petasim_py")]
#[derive(Clone)]
struct PyWorkloadShape {
    inner: core::WorkloadShape,
}

#[pymethods]
impl PyWorkloadShape {
    #[new]
    fn new(n_f: u64, i_m: u64, n_d: u64, n_es: u64) -> Self {
        Self {
            inner: core::WorkloadShape {
                n_f,
                i_m,
                n_d,
                n_es,
            },
        }
    }

    /// Shape implied by the linear SCF-dimer law.
    #[staticmethod]
    fn from_nf(n_f: u64, i_m: u64, params: &PyCostParameters) -> Self {
        Self {
            inner: core::shape_from_nf(n_f, i_m, &params.inner),
        }
    }

    #[getter]
    fn n_f(&self) -> u64 {
        self.inner.n_f
    }
    #[getter]
    fn i_m(&self) -> u64 {
        self.inner.i_m
    }
    #[getter]
    fn n_d(&self) -> u64 {
        self.inner.n_d
    }
    #[getter]
    fn n_es(&self) -> u64 {
        self.inner.n_es
    }

    fn __repr__(&self) -> String {
        let s = &self.inner;
        format!(
            "WorkloadShape(n_f={}, i_m={}, n_d={}, n_es={})",
            s.n_f, s.i_m, s.n_d, s.n_es
        )
    }
}

#[pyclass(name = "FragmentSystem", module = "fmo_petasim_py")]
#[derive(Clone)]
struct PyFragmentSystem {
    inner: core::FragmentSystem,
}

#[pymethods]
impl PyFragmentSystem {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: core::FragmentSystem::from_json_str(text).map_err(err)?,
        })
    }

    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: presets::system(name).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n_f, sites_per_fragment = 2, spacing = 4.0, seed = 0))]
    fn chain(n_f: usize, sites_per_fragment: usize, spacing: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: core::generate_chain(n_f, sites_per_fragment, spacing, seed).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn total_sites(&self) -> usize {
        self.inner.total_sites()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
fn work_total(
    py: Python<'_>,
    shape: &PyWorkloadShape,
    params: &PyCostParameters,
) -> PyResult<PyObject> {
    to_py(py, &core::work_total(&shape.inner, &params.inner))
}

#[pyfunction]
fn predict_elapsed(
    shape: &PyWorkloadShape,
    params: &PyCostParameters,
    machine: &PyMachineSpec,
) -> f64 {
    core::predict_elapsed(&shape.inner, &params.inner, &machine.inner)
}

#[pyfunction]
#[pyo3(signature = (machine, achieved_fraction = None))]
fn effective_flops(machine: &PyMachineSpec, achieved_fraction: Option<f64>) -> PyResult<f64> {
    core::effective_flops(&machine.inner, achieved_fraction).map_err(err)
}

#[pyfunction]
fn pair_array_bytes(n_f: u64) -> f64 {
    core::pair_array_bytes(n_f)
}

#[pyfunction]
fn nd_model(n_f: u64, params: &PyCostParameters) -> u64 {
    core::nd_model(n_f, &params.inner)
}

#[pyfunction]
fn nes_model(n_f: u64, params: &PyCostParameters) -> u64 {
    core::nes_model(n_f, &params.inner)
}

fn load_records(path: Option<&str>) -> PyResult<Vec<core::TimingRecord>> {
    match path {
        Some(p) => core::calibrate::read_records_path(p).map_err(err),
        None => Ok(presets::paper_records()),
    }
}

/// Fits the cost model to a timing CSV (the bundled dataset when `path` is None).
#[pyfunction]
#[pyo3(signature = (path = None, reference = "ibm"))]
fn calibrate(py: Python<'_>, path: Option<&str>, reference: &str) -> PyResult<PyObject> {
    let records = load_records(path)?;
    let result = core::fit(&records, reference).map_err(err)?;
    to_py(py, &result)
}

#[pyfunction]
#[pyo3(signature = (path = None))]
fn fit_nd(path: Option<&str>) -> PyResult<f64> {
    core::fit_nd(&load_records(path)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (shape, params, machine, dispatch_overhead = 0.0, jitter = 0.0, seed = 0, lpt = false))]
fn simulate_workload(
    py: Python<'_>,
    shape: &PyWorkloadShape,
    params: &PyCostParameters,
    machine: &PyMachineSpec,
    dispatch_overhead: f64,
    jitter: f64,
    seed: u64,
    lpt: bool,
) -> PyResult<PyObject> {
    let cluster =
        core::ClusterConfig::from_machine(&machine.inner, dispatch_overhead).map_err(err)?;
    let opts = core::sim::TaskOptions { jitter, seed };
    let phases = core::build_tasks(&shape.inner, &params.inner, &cluster, &opts).map_err(err)?;
    let sim_opts = core::SimOptions {
        policy: if lpt {
            core::sim::Policy::Lpt
        } else {
            core::sim::Policy::Fifo
        },
        record_timeline: false,
    };
    let report = core::simulate(&phases, &cluster, &sim_opts).map_err(err)?;
    to_py(py, &report)
}

/// Simulates a workflow preset, or a workflow given as JSON text.
#[pyfunction]
#[pyo3(signature = (workflow, machine, failure_probability = 0.0, retry_limit = 3, retry_penalty = 0.0, seed = 0))]
fn simulate_workflow(
    py: Python<'_>,
    workflow: &str,
    machine: &PyMachineSpec,
    failure_probability: f64,
    retry_limit: u32,
    retry_penalty: f64,
    seed: u64,
) -> PyResult<PyObject> {
    let spec = if workflow.trim_start().starts_with('{') {
        core::WorkflowSpec::from_json_str(workflow).map_err(err)?
    } else {
        presets::workflow(workflow).map_err(err)?
    };
    let cluster = core::ClusterConfig::from_machine(&machine.inner, 0.0).map_err(err)?;
    let faults = core::FaultModel {
        failure_probability,
        retry_limit,
        retry_penalty,
        seed,
    };
    let report = core::simulate_workflow(&spec, &cluster, &faults, &core::SimOptions::default())
        .map_err(err)?;
    to_py(py, &report)
}

fn engine_config(
    tol: f64,
    max_iterations: usize,
    damping: f64,
    sigma: f64,
) -> PyResult<core::EngineConfig> {
    let config = core::EngineConfig {
        tol,
        max_iterations,
        damping,
        sigma,
        ..core::EngineConfig::default()
    };
    config.validate().map_err(err)?;
    Ok(config)
}

/// Two-body fragment expansion energy; raises RuntimeError if the monomer
/// loop does not converge.
#[pyfunction]
#[pyo3(signature = (system, threshold, tol = 1e-8, max_iterations = 200, damping = 0.7, sigma = 1.0))]
fn fmo2_energy(
    py: Python<'_>,
    system: &PyFragmentSystem,
    threshold: f64,
    tol: f64,
    max_iterations: usize,
    damping: f64,
    sigma: f64,
) -> PyResult<PyObject> {
    let config = engine_config(tol, max_iterations, damping, sigma)?;
    let cls = core::classify_pairs(&system.inner, threshold).map_err(err)?;
    let r = core::fmo2_total_energy(&system.inner, &cls, &config).map_err(err)?;
    if !r.converged {
        return Err(err(core::Error::NotConverged {
            iterations: r.monomer.iterations_used,
            last_delta: r.monomer.last_delta,
        }));
    }
    let out = PyDict::new_bound(py);
    out.set_item("total_energy", r.total_energy)?;
    out.set_item("monomer_energy", r.monomer_energy)?;
    out.set_item("scf_dimer_energy", r.scf_dimer_energy)?;
    out.set_item("es_dimer_energy", r.es_dimer_energy)?;
    out.set_item("iterations", r.monomer.iterations_used)?;
    out.set_item("scf_pairs", cls.scf_pairs.len())?;
    out.set_item("es_pairs", cls.es_pairs.len())?;
    out.set_item("charges", r.monomer.charges.charges.clone())?;
    out.set_item("counters", to_py(py, &r.counters)?)?;
    Ok(out.into_any().unbind())
}

#[pyfunction]
#[pyo3(signature = (system, sigma = 1.0))]
fn oracle_energy(system: &PyFragmentSystem, sigma: f64) -> PyResult<f64> {
    let config = core::EngineConfig {
        sigma,
        ..core::EngineConfig::default()
    };
    Ok(core::full_system_oracle(&system.inner, &config)
        .map_err(err)?
        .energy)
}

#[pymodule]
pub fn fmo_petasim_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCostParameters>()?;
    m.add_class::<PyMachineSpec>()?;
    m.add_class::<PyWorkloadShape>()?;
    m.add_class::<PyFragmentSystem>()?;
    m.add_function(wrap_pyfunction!(work_total, m)?)?;
    m.add_function(wrap_pyfunction!(predict_elapsed, m)?)?;
    m.add_function(wrap_pyfunction!(effective_flops, m)?)?;
    m.add_function(wrap_pyfunction!(pair_array_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(nd_model, m)?)?;
    m.add_function(wrap_pyfunction!(nes_model, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(fit_nd, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_workload, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_workflow, m)?)?;
    m.add_function(wrap_pyfunction!(fmo2_energy, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_energy, m)?)?;
    Ok(())
}
