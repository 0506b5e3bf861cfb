//! Python bindings: lazy arrays with numpy-style slice assignment that
//! build statement DAGs, either locally or against a running job.

use std::collections::BTreeMap;
use std::time::Duration;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PySlice, PyTuple};

use stencil_core::client::Client;
use stencil_core::grid::{decompose as grid_decompose, owned_tiles};
use stencil_core::ir::{fuse as ir_fuse, ArrayId, DimSlice, Expr, Shape, SliceSpec};
use stencil_core::launcher::{Job, JobConfig, Mode};
use stencil_core::oracle::{reference_execute as oracle_execute, ArraySet};
use stencil_core::programs::{Builder, Laplace, LocalProgram};
use stencil_core::proto::{StageTimings, Stats};
use stencil_core::wire::Wire;
use stencil_core::Error;

create_exception!(stencilpy, StencilError, PyException);
create_exception!(stencilpy, SelfDependencyError, StencilError);
create_exception!(stencilpy, ShapeMismatchError, StencilError);
create_exception!(stencilpy, RescaleUnavailableError, StencilError);

fn err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::SelfDependency(_) => SelfDependencyError::new_err(msg),
        Error::ShapeMismatch { .. } => ShapeMismatchError::new_err(msg),
        Error::RescaleUnavailable(_) => RescaleUnavailableError::new_err(msg),
        _ => StencilError::new_err(msg),
    }
}

/// Right-hand side expression; built by operators, never evaluated here.
#[pyclass(name = "Expr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyExpr(Expr);

fn operand(obj: &Bound<'_, PyAny>) -> PyResult<Expr> {
    if let Ok(e) = obj.extract::<PyRef<'_, PyExpr>>() {
        return Ok(e.0.clone());
    }
    if let Ok(x) = obj.extract::<f64>() {
        return Ok(Expr::Const(x));
    }
    Err(StencilError::new_err(format!(
        "expected an array slice or a number, got {}",
        obj.get_type().name()?
    )))
}

#[pymethods]
impl PyExpr {
    fn __add__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(self.0.clone() + operand(o)?))
    }
    fn __radd__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(operand(o)? + self.0.clone()))
    }
    fn __sub__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(self.0.clone() - operand(o)?))
    }
    fn __rsub__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(operand(o)? - self.0.clone()))
    }
    fn __mul__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(self.0.clone() * operand(o)?))
    }
    fn __rmul__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(operand(o)? * self.0.clone()))
    }
    fn __truediv__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(self.0.clone() / operand(o)?))
    }
    fn __rtruediv__(&self, o: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(operand(o)? / self.0.clone()))
    }
    fn __neg__(&self) -> PyExpr {
        PyExpr(-self.0.clone())
    }
    fn __abs__(&self) -> PyExpr {
        PyExpr(self.0.clone().abs())
    }
    fn sqrt(&self) -> PyExpr {
        PyExpr(self.0.clone().sqrt())
    }
    fn __repr__(&self) -> String {
        format!("Expr({:?})", self.0)
    }
}

#[pyfunction]
fn sqrt(x: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
    Ok(PyExpr(operand(x)?.sqrt()))
}

fn dim(obj: &Bound<'_, PyAny>) -> PyResult<DimSlice> {
    if obj.is_instance_of::<PySlice>() {
        let start: Option<i64> = obj.getattr("start")?.extract()?;
        let stop: Option<i64> = obj.getattr("stop")?.extract()?;
        let step: Option<i64> = obj.getattr("step")?.extract()?;
        return Ok(DimSlice {
            start,
            stop,
            step: step.unwrap_or(1),
        });
    }
    Ok(DimSlice::index(obj.extract::<i64>()?))
}

/// Slice key (`a[1:-1, :]`, `a[0, :]`, `a[3:]`) to a spec. Strides are
/// rejected when the key is used.
fn key_spec(key: &Bound<'_, PyAny>) -> PyResult<SliceSpec> {
    let dims = if key.is_instance_of::<PyTuple>() {
        key.try_iter()?.map(|d| dim(&d?)).collect::<PyResult<Vec<_>>>()?
    } else {
        vec![dim(key)?]
    };
    if let Some(d) = dims.iter().find(|d| d.step != 1) {
        return Err(err(Error::StridedSlice(d.step)));
    }
    Ok(SliceSpec::new(dims))
}

fn shape_of(dims: Vec<usize>) -> PyResult<Shape> {
    Shape::new(&dims).map_err(err)
}

enum Owner {
    Program(Py<Program>),
    Session(Py<Session>),
}

/// Handle to one array of a program or session.
#[pyclass(unsendable)]
struct LazyArray {
    #[pyo3(get)]
    id: u32,
    shape: Shape,
    owner: Owner,
}

#[pymethods]
impl LazyArray {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.shape.extents()
    }

    fn __getitem__(&self, key: &Bound<'_, PyAny>) -> PyResult<PyExpr> {
        Ok(PyExpr(Expr::slice(ArrayId(self.id), key_spec(key)?)))
    }

    fn __setitem__(&self, py: Python<'_>, key: &Bound<'_, PyAny>, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let spec = key_spec(key)?;
        let expr = operand(value)?;
        let out = ArrayId(self.id);
        match &self.owner {
            Owner::Program(p) => p.borrow_mut(py).inner.assign(out, &spec, expr).map_err(err),
            Owner::Session(s) => s.borrow_mut(py).client()?.assign(out, &spec, expr).map_err(err),
        }
    }

    fn __repr__(&self) -> String {
        format!("LazyArray(id={}, shape={})", self.id, self.shape)
    }
}

/// Builds one DAG in memory without a server.
#[pyclass(unsendable)]
struct Program {
    inner: LocalProgram,
}

#[pymethods]
impl Program {
    #[new]
    fn new() -> Program {
        Program {
            inner: LocalProgram::new(),
        }
    }

    fn create_array(slf: &Bound<'_, Self>, shape: Vec<usize>) -> PyResult<LazyArray> {
        let shape = shape_of(shape)?;
        let id = slf.borrow_mut().inner.create(shape).map_err(err)?;
        Ok(LazyArray {
            id: id.0,
            shape,
            owner: Owner::Program(slf.clone().unbind()),
        })
    }

    /// Canonical wire encoding of the DAG.
    fn dag_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.dag.to_bytes())
    }

    fn dump(&self) -> String {
        self.inner.dag.dump()
    }

    fn node_count(&self) -> usize {
        self.inner.dag.len()
    }

    fn ast_count(&self) -> usize {
        self.inner.dag.asts().len()
    }

    /// A copy with consecutive independent nodes fused.
    fn fused(&self) -> Program {
        Program {
            inner: LocalProgram {
                shapes: self.inner.shapes.clone(),
                dag: ir_fuse(&self.inner.dag),
            },
        }
    }
}

/// Runs a program on the sequential oracle; returns `{id: values}`, row
/// major.
#[pyfunction]
fn reference_execute(program: &Program) -> PyResult<BTreeMap<u32, Vec<f64>>> {
    let mut arrays = ArraySet::new();
    oracle_execute(&program.inner.dag, &mut arrays).map_err(err)?;
    Ok(arrays.data.into_iter().map(|(a, v)| (a.0, v)).collect())
}

/// The bundled Laplace program built directly on the IR, for comparison
/// with the same program written in Python.
#[pyfunction]
fn laplace_program(n: usize, iters: usize) -> PyResult<Program> {
    let mut p = LocalProgram::new();
    let mut lp = Laplace::setup(&mut p, n).map_err(err)?;
    for _ in 0..iters {
        lp.step(&mut p).map_err(err)?;
    }
    Ok(Program { inner: p })
}

#[pyfunction]
fn fuse(program: &Program) -> Program {
    program.fused()
}

#[pyfunction]
fn dump(program: &Program) -> String {
    program.dump()
}

/// Tile layout of `shape` over `workers × odf` tiles and the tiles each
/// worker owns.
#[pyfunction]
fn decompose<'py>(py: Python<'py>, shape: Vec<usize>, workers: usize, odf: usize) -> PyResult<Bound<'py, PyDict>> {
    let d = grid_decompose(shape_of(shape)?, workers, odf).map_err(err)?;
    let owners: Vec<Vec<usize>> = (0..workers).map(|w| owned_tiles(w, d.tile_count(), workers)).collect();
    let out = PyDict::new(py);
    out.set_item("grid", d.grid.to_vec())?;
    out.set_item("tile_extent", d.tile_extent.to_vec())?;
    out.set_item("owners", owners)?;
    Ok(out)
}

fn stats_dict<'py>(py: Python<'py>, s: &Stats) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("batches", s.batches)?;
    d.set_item("kernel_launches", s.kernel_launches)?;
    d.set_item("network_messages", s.network_messages)?;
    d.set_item("local_copies", s.local_copies)?;
    d.set_item("rounds", s.rounds.clone())?;
    Ok(d)
}

fn timings_dict<'py>(py: Python<'py>, t: &StageTimings) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("workers", t.workers)?;
    d.set_item("lb_ms", t.lb_ms)?;
    d.set_item("checkpoint_ms", t.checkpoint_ms)?;
    d.set_item("restart_ms", t.restart_ms)?;
    d.set_item("restore_ms", t.restore_ms)?;
    d.set_item("bytes", t.bytes)?;
    Ok(d)
}

/// Client session against a running job.
#[pyclass(unsendable)]
struct Session {
    client: Option<Client>,
}

impl Session {
    fn client(&mut self) -> PyResult<&mut Client> {
        self.client.as_mut().ok_or_else(|| StencilError::new_err("session is closed"))
    }
}

#[pymethods]
impl Session {
    /// Connects to `endpoint`, or to `STENCILRT_ENDPOINT` when omitted.
    #[new]
    #[pyo3(signature = (endpoint=None, threshold=None))]
    fn new(endpoint: Option<&str>, threshold: Option<usize>) -> PyResult<Session> {
        let mut c = match endpoint {
            Some(e) => Client::connect(e),
            None => Client::connect_env(),
        }
        .map_err(err)?;
        if let Some(t) = threshold {
            c.set_threshold(t);
        }
        Ok(Session { client: Some(c) })
    }

    fn create_array(slf: &Bound<'_, Self>, shape: Vec<usize>) -> PyResult<LazyArray> {
        let shape = shape_of(shape)?;
        let id = slf.borrow_mut().client()?.create(shape).map_err(err)?;
        Ok(LazyArray {
            id: id.0,
            shape,
            owner: Owner::Session(slf.clone().unbind()),
        })
    }

    #[getter]
    fn threshold(&mut self) -> PyResult<usize> {
        Ok(self.client()?.threshold())
    }

    #[setter]
    fn set_threshold(&mut self, nodes: usize) -> PyResult<()> {
        self.client()?.set_threshold(nodes);
        Ok(())
    }

    fn set_fusion(&mut self, on: bool) -> PyResult<()> {
        self.client()?.set_fusion(on);
        Ok(())
    }

    fn flush(&mut self, py: Python<'_>) -> PyResult<()> {
        let c = self.client()?;
        py.detach(|| c.flush()).map_err(err)
    }

    fn sync<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.client()?;
        let s = py.detach(|| c.sync()).map_err(err)?;
        stats_dict(py, &s)
    }

    /// Values of `array[key]` (whole array when `key` is omitted): a list
    /// of rows for rank-2 arrays, a flat list for rank 1.
    #[pyo3(signature = (array, key=None))]
    fn fetch<'py>(&mut self, py: Python<'py>, array: &LazyArray, key: Option<&Bound<'py, PyAny>>) -> PyResult<Py<PyAny>> {
        let spec = match key {
            Some(k) => key_spec(k)?,
            None => SliceSpec::full(array.shape.rank()),
        };
        let region = spec.normalize(&array.shape).map_err(err)?;
        let c = self.client()?;
        let id = ArrayId(array.id);
        let values = py.detach(|| c.fetch(id, &spec)).map_err(err)?;
        if array.shape.rank() == 1 {
            return Ok(values.into_pyobject(py)?.into_any().unbind());
        }
        let cols = region.extent()[1];
        let rows: Vec<Vec<f64>> = values.chunks(cols).map(|r| r.to_vec()).collect();
        Ok(rows.into_pyobject(py)?.into_any().unbind())
    }

    fn rescale<'py>(&mut self, py: Python<'py>, workers: usize) -> PyResult<Bound<'py, PyDict>> {
        let c = self.client()?;
        let t = py.detach(|| c.rescale(workers)).map_err(err)?;
        timings_dict(py, &t)
    }

    /// Stops the job's server and workers and closes the session.
    fn shutdown(&mut self, py: Python<'_>) -> PyResult<()> {
        match self.client.take() {
            Some(c) => py.detach(|| c.shutdown()).map_err(err),
            None => Ok(()),
        }
    }
}

/// A job started from Python: in-process threads by default, or worker
/// processes when `exe` names the `stencilrt` binary.
#[pyclass(unsendable, name = "Job")]
struct PyJob {
    job: Option<Job>,
}

#[pymethods]
impl PyJob {
    #[getter]
    fn endpoint(&self) -> PyResult<String> {
        Ok(self.get()?.endpoint().to_string())
    }

    fn connect(&self) -> PyResult<Session> {
        let c = self.get()?.connect().map_err(err)?;
        Ok(Session { client: Some(c) })
    }

    /// Waits for the server to exit after a session's `shutdown`.
    #[pyo3(signature = (timeout=30.0))]
    fn wait(&mut self, py: Python<'_>, timeout: f64) -> PyResult<()> {
        match self.job.take() {
            Some(j) => py.detach(|| j.wait(Duration::from_secs_f64(timeout))).map_err(err),
            None => Ok(()),
        }
    }
}

impl PyJob {
    fn get(&self) -> PyResult<&Job> {
        self.job.as_ref().ok_or_else(|| StencilError::new_err("job has finished"))
    }
}

#[pyfunction]
#[pyo3(signature = (workers, odf=1, max_workers=None, threshold=None, exe=None))]
fn launch(
    py: Python<'_>,
    workers: usize,
    odf: usize,
    max_workers: Option<usize>,
    threshold: Option<usize>,
    exe: Option<std::path::PathBuf>,
) -> PyResult<PyJob> {
    let mode = match exe {
        Some(exe) => Mode::Process { exe },
        None => Mode::Thread,
    };
    let mut cfg = JobConfig::new(workers, mode);
    cfg.odf = odf;
    if let Some(m) = max_workers {
        cfg.max_workers = m.max(workers);
    }
    if let Some(t) = threshold {
        cfg.flush_depth = t;
    }
    let job = py.detach(|| Job::launch(cfg)).map_err(err)?;
    Ok(PyJob { job: Some(job) })
}

#[pymodule]
fn stencilpy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add_class::<PyExpr>()?;
    m.add_class::<LazyArray>()?;
    m.add_class::<Program>()?;
    m.add_class::<Session>()?;
    m.add_class::<PyJob>()?;
    m.add_function(wrap_pyfunction!(sqrt, m)?)?;
    m.add_function(wrap_pyfunction!(reference_execute, m)?)?;
    m.add_function(wrap_pyfunction!(fuse, m)?)?;
    m.add_function(wrap_pyfunction!(laplace_program, m)?)?;
    m.add_function(wrap_pyfunction!(dump, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(launch, m)?)?;
    m.add("StencilError", py.get_type::<StencilError>())?;
    m.add("SelfDependencyError", py.get_type::<SelfDependencyError>())?;
    m.add("ShapeMismatchError", py.get_type::<ShapeMismatchError>())?;
    m.add("RescaleUnavailableError", py.get_type::<RescaleUnavailableError>())?;
    Ok(())
}
