//! Python bindings for the loop-soup engine.
//!
//! The module mirrors the Rust surface at the granularity a notebook wants:
//! exact answers on tiny windows (`OracleWindow`), truncated-soup sampling
//! on cubes (`CubeSampler` producing `Soup` realizations), and the one-arm
//! and threshold estimators as plain functions. Heavy experiment plumbing
//! (manifests, result files) stays with the Rust CLI.

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use loopsoup::clusters::{build_clusters, finite_cluster_extent, open_edges};
use loopsoup::estimators::{find_threshold, theta_n, SoupMode, ThresholdModel};
use loopsoup::lattice::{BoundaryMode, Point, Window};
use loopsoup::loop_model::{one_loop_connection_mass, Intensity, MassTable};
use loopsoup::oracle::{self, TinyWindow};
use loopsoup::sampler::{sample_truncated, SoupRealization};

/// Preconditions and geometry problems are the caller's to fix; the rest
/// (numerics, io) surface as runtime errors.
fn to_py_err(e: loopsoup::Error) -> PyErr {
    match e {
        loopsoup::Error::Geometry(_)
        | loopsoup::Error::Capacity { .. }
        | loopsoup::Error::Margin { .. }
        | loopsoup::Error::Precondition(_)
        | loopsoup::Error::Config(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_point(coords: &[i64]) -> Point {
    Point::new(coords)
}

/// One of the exactly solvable windows: small enough that the loop mass,
/// edge-closure probabilities and connectivities come from determinants
/// rather than sampling.
#[pyclass(frozen)]
struct OracleWindow {
    name: String,
    inner: TinyWindow,
}

#[pymethods]
impl OracleWindow {
    /// Names of the built-in corpus windows.
    #[staticmethod]
    fn names() -> Vec<String> {
        oracle::corpus().into_iter().map(|(name, _)| name).collect()
    }

    /// Look a corpus window up by name.
    #[staticmethod]
    fn from_corpus(name: &str) -> PyResult<Self> {
        oracle::corpus()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(name, inner)| OracleWindow { name, inner })
            .ok_or_else(|| PyKeyError::new_err(format!("no corpus window named {name:?}")))
    }

    /// Total loop mass of the window, computed as -log det(I - Q).
    fn total_mass(&self) -> PyResult<f64> {
        oracle::total_mass(&self.inner).map_err(to_py_err)
    }

    /// Partial sums of the trace series for the total mass: returns
    /// (sum up to k_max, analytic tail bound).
    fn mass_series(&self, k_max: usize) -> (f64, f64) {
        oracle::mass_series(&self.inner, k_max)
    }

    /// P[all the given edges are closed] at intensity alpha. Edges are
    /// indices into `edges()`.
    fn closed_probability(&self, edges: Vec<usize>, alpha: f64) -> PyResult<f64> {
        oracle::closed_probability(&self.inner, &edges, alpha).map_err(to_py_err)
    }

    /// P[the origin site connects to at least one target] at intensity alpha.
    fn theta(&self, origin: Vec<i64>, targets: Vec<Vec<i64>>, alpha: f64) -> PyResult<f64> {
        let origin = to_point(&origin);
        let targets: Vec<Point> = targets.iter().map(|t| to_point(t)).collect();
        oracle::exact_theta(&self.inner, &origin, &targets, alpha).map_err(to_py_err)
    }

    fn sites(&self) -> Vec<Vec<i64>> {
        self.inner.sites().iter().map(|s| s.coords().to_vec()).collect()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }

    #[getter]
    fn name(&self) -> String {
        self.name.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "OracleWindow({:?}, sites={}, kappa={})",
            self.name,
            self.inner.num_sites(),
            self.inner.kappa()
        )
    }
}

/// One sampled soup on an absorbing cube, with the coupled arrival times
/// kept, so any intensity up to the sampling level can be read off the same
/// realization.
#[pyclass(frozen)]
struct Soup {
    inner: SoupRealization,
}

#[pymethods]
impl Soup {
    fn num_loops(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn alpha_max(&self) -> f64 {
        self.inner.alpha_max()
    }

    #[getter]
    fn epsilon_tail(&self) -> f64 {
        self.inner.epsilon_tail()
    }

    /// Number of open edge slots at intensity alpha (alpha <= alpha_max).
    /// Monotone in alpha realization by realization; that is the point of
    /// keeping the arrival times.
    fn open_edge_count(&self, alpha: f64) -> PyResult<usize> {
        let edges = open_edges(&self.inner, alpha).map_err(to_py_err)?;
        let win = self.inner.window();
        Ok((0..win.num_edge_slots()).filter(|&s| edges.is_open(s)).count())
    }

    /// (cluster size, sup-norm reach, touches-boundary flag) for the cluster
    /// of the origin at intensity alpha.
    fn origin_cluster(&self, alpha: f64) -> PyResult<(usize, i64, bool)> {
        let win = self.inner.window();
        let edges = open_edges(&self.inner, alpha).map_err(to_py_err)?;
        let forest = build_clusters(win, &edges);
        let d = win.site(0).coords().len();
        finite_cluster_extent(&forest, &Point::origin(d)).map_err(to_py_err)
    }

    /// Whether sites a and b lie in the same open cluster at intensity alpha.
    fn connected(&self, a: Vec<i64>, b: Vec<i64>, alpha: f64) -> PyResult<bool> {
        let win = self.inner.window();
        let ia = win
            .index(&to_point(&a))
            .ok_or_else(|| PyValueError::new_err(format!("site {a:?} outside the window")))?;
        let ib = win
            .index(&to_point(&b))
            .ok_or_else(|| PyValueError::new_err(format!("site {b:?} outside the window")))?;
        let edges = open_edges(&self.inner, alpha).map_err(to_py_err)?;
        let forest = build_clusters(win, &edges);
        Ok(forest.connected(ia, ib))
    }

    fn __repr__(&self) -> String {
        format!(
            "Soup(loops={}, alpha_max={}, epsilon_tail={:.3e})",
            self.inner.len(),
            self.inner.alpha_max(),
            self.inner.epsilon_tail()
        )
    }
}

/// Sampler for length-truncated soups on the absorbing cube B(radius).
/// Building one amortizes the per-length mass table across replicas.
#[pyclass(frozen)]
struct CubeSampler {
    window: Window,
    table: MassTable,
    kappa: f64,
    m: usize,
}

#[pymethods]
impl CubeSampler {
    #[new]
    fn new(d: usize, radius: i64, kappa: f64, m: usize) -> PyResult<Self> {
        let window =
            Window::cube(d, radius, BoundaryMode::Absorbing, kappa).map_err(to_py_err)?;
        let table = MassTable::build(&window, m).map_err(to_py_err)?;
        Ok(CubeSampler { window, table, kappa, m })
    }

    /// Draw one realization at intensity alpha. Replicas with the same
    /// master seed and different replica indices are independent; the same
    /// (seed, replica) pair reproduces the same soup.
    fn sample(&self, alpha: f64, master_seed: u64, replica: u64) -> PyResult<Soup> {
        let intensity = Intensity::truncated(alpha, self.kappa, self.m);
        let inner =
            sample_truncated(&self.window, &self.table, &intensity, alpha, master_seed, replica)
                .map_err(to_py_err)?;
        Ok(Soup { inner })
    }

    fn num_sites(&self) -> usize {
        self.window.num_sites()
    }

    fn __repr__(&self) -> String {
        format!(
            "CubeSampler(sites={}, kappa={}, m={})",
            self.window.num_sites(),
            self.kappa,
            self.m
        )
    }
}

fn estimate_dict<'py>(
    py: Python<'py>,
    e: &loopsoup::estimators::Estimate,
) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("value", e.value)?;
    out.set_item("stderr", e.stderr)?;
    out.set_item("replicas", e.replicas)?;
    out.set_item("epsilon_tail", e.epsilon_tail)?;
    Ok(out)
}

/// Monte Carlo estimate of P[origin reaches sup-norm n] in Z^d at intensity
/// alpha. Pass `m` for the length-truncated soup on an absorbing window, or
/// `k_max` for the full window sampler with its tail bound; exactly one of
/// the two must be given.
#[pyfunction]
#[pyo3(signature = (d, alpha, kappa, n, replicas, seed, m=None, k_max=None))]
#[allow(clippy::too_many_arguments)]
fn theta_estimate<'py>(
    py: Python<'py>,
    d: usize,
    alpha: f64,
    kappa: f64,
    n: i64,
    replicas: usize,
    seed: u64,
    m: Option<usize>,
    k_max: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let mode = match (m, k_max) {
        (Some(m), None) => SoupMode::Truncated { m },
        (None, Some(k_max)) => SoupMode::Window { k_max },
        _ => return Err(PyValueError::new_err("pass exactly one of m or k_max")),
    };
    let estimates = theta_n(d, &[alpha], kappa, mode, n, replicas, seed).map_err(to_py_err)?;
    estimate_dict(py, &estimates[0])
}

/// Bisection bracket for the bulk percolation threshold of the m-truncated
/// soup, using crossing probability c_star at scale n.
#[pyfunction]
#[pyo3(signature = (d, m, n, seed, c_star=0.5, tol=0.5, replicas=200, max_replicas=800))]
#[allow(clippy::too_many_arguments)]
fn bulk_threshold<'py>(
    py: Python<'py>,
    d: usize,
    m: usize,
    n: i64,
    seed: u64,
    c_star: f64,
    tol: f64,
    replicas: usize,
    max_replicas: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let bracket = find_threshold(
        d,
        &ThresholdModel::Bulk { m },
        0.0,
        n,
        c_star,
        tol,
        replicas,
        max_replicas,
        seed,
    )
    .map_err(to_py_err)?;
    let out = PyDict::new(py);
    out.set_item("lo", bracket.lo)?;
    out.set_item("hi", bracket.hi)?;
    out.set_item("c_star", bracket.c_star)?;
    out.set_item("scale", bracket.scale)?;
    out.set_item("resolved", bracket.resolved)?;
    out.set_item("flags", bracket.flags.clone())?;
    Ok(out)
}

/// Exact mass of loops (length <= k_max) meeting both site sets inside the
/// absorbing cube B(radius). Returns (value, truncation bound).
#[pyfunction]
fn connection_mass(
    d: usize,
    radius: i64,
    a: Vec<Vec<i64>>,
    b: Vec<Vec<i64>>,
    k_max: usize,
) -> PyResult<(f64, f64)> {
    let window = Window::cube(d, radius, BoundaryMode::Absorbing, 0.0).map_err(to_py_err)?;
    let a: Vec<Point> = a.iter().map(|p| to_point(p)).collect();
    let b: Vec<Point> = b.iter().map(|p| to_point(p)).collect();
    let mass = one_loop_connection_mass(&window, &a, &b, k_max).map_err(to_py_err)?;
    Ok((mass.value, mass.tail_bound))
}

#[pymodule]
fn loopsoup_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<OracleWindow>()?;
    m.add_class::<Soup>()?;
    m.add_class::<CubeSampler>()?;
    m.add_function(wrap_pyfunction!(theta_estimate, m)?)?;
    m.add_function(wrap_pyfunction!(bulk_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(connection_mass, m)?)?;
    Ok(())
}
