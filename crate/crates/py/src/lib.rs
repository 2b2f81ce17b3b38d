//! Python bindings for the `wgexciton` crate.
//!
//! Times are in ns, lengths of the stack in nm, waveguide lengths in mm and
//! angles in degrees, matching the command-line tool. Validation errors raise
//! `ValueError`, numerical failures `RuntimeError`.

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use engine::dynamics::{Carrier, DynamicsParams, Drive};
use engine::inference::{self, FitOptions, FitProblem, ForwardModel};
use engine::layered_medium::{load_stack, LayerStack};
use engine::mode_solver::{solve_modes, ResonantMode};
use engine::observables::{self, DivergenceModel, Gate, HyperfineModel, LineSummation, TimeTrace};
use engine::units::{deg_to_rad, fe57_gamma, mdeg_to_rad, rad_to_deg};
use engine::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_numerical() {
        PyRuntimeError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for engine::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Planar layer stack with an optional resonant ⁵⁷Fe film.
#[pyclass(name = "LayerStack", frozen, module = "wgexciton")]
pub struct PyLayerStack {
    inner: LayerStack,
}

#[pymethods]
impl PyLayerStack {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: LayerStack::from_toml_str(text).py()?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: load_stack(path).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    #[getter]
    fn energy_kev(&self) -> f64 {
        self.inner.energy_kev()
    }

    /// Vacuum wavenumber (nm⁻¹).
    #[getter]
    fn k0(&self) -> f64 {
        self.inner.k0()
    }

    #[getter]
    fn total_thickness(&self) -> f64 {
        self.inner.total_thickness()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.layers().len()
    }

    /// Resonant modes ordered by increasing 1 − Re ν.
    #[pyo3(signature = (max_modes = 4))]
    fn modes(&self, max_modes: usize) -> PyResult<Vec<PyMode>> {
        Ok(solve_modes(&self.inner, max_modes)
            .py()?
            .into_iter()
            .map(|inner| PyMode { inner })
            .collect())
    }

    fn __repr__(&self) -> String {
        format!(
            "LayerStack({} layers, {:.1} nm, {} keV)",
            self.inner.layers().len(),
            self.inner.total_thickness(),
            self.inner.energy_kev()
        )
    }
}

#[pyclass(name = "Mode", frozen, module = "wgexciton")]
pub struct PyMode {
    inner: ResonantMode,
}

#[pymethods]
impl PyMode {
    #[getter]
    fn index(&self) -> usize {
        self.inner.index
    }

    #[getter]
    fn nu(&self) -> Complex64 {
        self.inner.nu
    }

    #[getter]
    fn one_minus_re_nu(&self) -> f64 {
        self.inner.one_minus_re_nu()
    }

    #[getter]
    fn zeta(&self) -> Option<Complex64> {
        self.inner.zeta
    }

    #[getter]
    fn theta_deg(&self) -> f64 {
        rad_to_deg(self.inner.theta_m)
    }

    #[getter]
    fn lambda_m_mm(&self) -> f64 {
        self.inner.lambda_m * 1e-6
    }

    /// Normalized mode profile at depth z (nm).
    fn field_at(&self, z: f64) -> Complex64 {
        self.inner.field_at(z)
    }

    fn __repr__(&self) -> String {
        format!(
            "Mode(index={}, theta_deg={:.4}, one_minus_re_nu={:.3e}, zeta={})",
            self.inner.index,
            rad_to_deg(self.inner.theta_m),
            self.inner.one_minus_re_nu(),
            self.inner.zeta.map_or("None".to_string(), |z| format!("{:.4e}", z.re))
        )
    }
}

/// Inhomogeneous broadening plus quadrupole doublet, in units of γ.
#[pyclass(name = "Hyperfine", frozen, module = "wgexciton")]
pub struct PyHyperfine {
    inner: HyperfineModel,
}

fn summation(name: &str) -> PyResult<LineSummation> {
    match name {
        "collective" => Ok(LineSummation::Collective),
        "incoherent" => Ok(LineSummation::Incoherent),
        other => Err(PyValueError::new_err(format!(
            "summation must be `collective` or `incoherent`, got `{other}`"
        ))),
    }
}

#[pymethods]
impl PyHyperfine {
    #[new]
    #[pyo3(signature = (broadening, splitting, n_lines = 9, summation = "collective"))]
    fn new(broadening: f64, splitting: f64, n_lines: usize, summation: &str) -> PyResult<Self> {
        let inner = HyperfineModel::new(broadening, splitting, n_lines).py()?;
        Ok(Self {
            inner: inner.with_summation(self::summation(summation)?),
        })
    }

    #[staticmethod]
    fn none() -> Self {
        Self {
            inner: HyperfineModel::none(),
        }
    }

    /// Parameters of the front-coupling samples.
    #[staticmethod]
    fn fc_default() -> Self {
        Self {
            inner: HyperfineModel::fc_fixture(),
        }
    }

    /// Parameters of the grazing-incidence sample.
    #[staticmethod]
    fn gi_default() -> Self {
        Self {
            inner: HyperfineModel::gi_fixture(),
        }
    }

    #[getter]
    fn broadening(&self) -> f64 {
        self.inner.broadening_fwhm
    }

    #[getter]
    fn splitting(&self) -> f64 {
        self.inner.quad_splitting
    }

    #[getter]
    fn n_lines(&self) -> usize {
        self.inner.n_lines
    }

    fn __repr__(&self) -> String {
        format!(
            "Hyperfine(broadening={}, splitting={}, n_lines={}, summation={:?})",
            self.inner.broadening_fwhm, self.inner.quad_splitting, self.inner.n_lines, self.inner.summation
        )
    }
}

#[pyclass(name = "FitResult", frozen, get_all, module = "wgexciton")]
pub struct PyFitResult {
    model: String,
    param_names: Vec<String>,
    params: Vec<f64>,
    std_errors: Option<Vec<f64>>,
    nll: f64,
    converged: bool,
    n_eval: usize,
    n_bins: usize,
}

#[pymethods]
impl PyFitResult {
    fn __repr__(&self) -> String {
        format!(
            "FitResult(model={}, params={:?}, nll={:.6e}, converged={})",
            self.model,
            self.params,
            self.nll,
            if self.converged { "True" } else { "False" }
        )
    }
}

fn mode_params(stack: &PyLayerStack, mode: usize, length_mm: f64, zeta: Option<f64>) -> PyResult<DynamicsParams> {
    if mode == 0 {
        return Err(PyValueError::new_err("mode numbers start at 1"));
    }
    let res = stack
        .inner
        .resonant()
        .ok_or_else(|| PyValueError::new_err("stack has no resonant film"))?;
    let mut m = solve_modes(&stack.inner, mode.max(4))
        .py()?
        .into_iter()
        .find(|m| m.index == mode)
        .ok_or_else(|| PyValueError::new_err(format!("the stack has no mode {mode}")))?;
    if let Some(z) = zeta {
        m.zeta = Some(Complex64::new(z, 0.0));
    }
    DynamicsParams::from_mode(&m, res, length_mm * 1e6).py()
}

fn hyperfine_or(h: Option<PyRef<'_, PyHyperfine>>, default: HyperfineModel) -> HyperfineModel {
    h.map(|h| h.inner).unwrap_or(default)
}

/// γ of ⁵⁷Fe in ns⁻¹.
#[pyfunction]
fn gamma() -> f64 {
    fe57_gamma()
}

/// Front-coupling intensity at delays `t` after the pulse leaves the guide.
#[pyfunction]
#[pyo3(signature = (stack, t, length_mm, mode = 1, hyperfine = None, pulse_area = 0.01, zeta = None))]
#[allow(clippy::too_many_arguments)]
fn fc_trace(
    py: Python<'_>,
    stack: PyRef<'_, PyLayerStack>,
    t: Vec<f64>,
    length_mm: f64,
    mode: usize,
    hyperfine: Option<PyRef<'_, PyHyperfine>>,
    pulse_area: f64,
    zeta: Option<f64>,
) -> PyResult<Vec<f64>> {
    let params = mode_params(&stack, mode, length_mm, zeta)?;
    let hf = hyperfine_or(hyperfine, HyperfineModel::fc_fixture());
    let drive = Drive::front_coupling(Complex64::new(pulse_area, 0.0)).py()?;
    py.detach(|| {
        let delay = Carrier::for_drive(&params, &drive).delay(0.0);
        let lab: Vec<f64> = t.iter().map(|v| v + delay).collect();
        observables::hyperfine_intensity(&params, &drive, &hf, &lab)
    })
    .py()
}

/// Grazing-incidence intensity at incidence angle `theta_deg`; defaults to
/// the mode angle.
#[pyfunction]
#[pyo3(signature = (stack, t, theta_deg = None, mode = 3, length_mm = 5.0, hyperfine = None, divergence_mdeg = 0.0, n_angles = 21, pulse_area = 0.01))]
#[allow(clippy::too_many_arguments)]
fn gi_trace(
    py: Python<'_>,
    stack: PyRef<'_, PyLayerStack>,
    t: Vec<f64>,
    theta_deg: Option<f64>,
    mode: usize,
    length_mm: f64,
    hyperfine: Option<PyRef<'_, PyHyperfine>>,
    divergence_mdeg: f64,
    n_angles: usize,
    pulse_area: f64,
) -> PyResult<Vec<f64>> {
    let params = mode_params(&stack, mode, length_mm, None)?;
    let hf = hyperfine_or(hyperfine, HyperfineModel::gi_fixture());
    let theta = match theta_deg {
        Some(d) => deg_to_rad(d),
        None => params.nu.re.acos(),
    };
    let divergence = if divergence_mdeg > 0.0 {
        DivergenceModel::new(mdeg_to_rad(divergence_mdeg), n_angles).py()?
    } else {
        DivergenceModel::none()
    };
    let area = Complex64::new(pulse_area, 0.0);
    py.detach(|| {
        observables::divergence_average(
            |th| observables::hyperfine_intensity(&params, &Drive::grazing(area, th)?, &hf, &t),
            &divergence,
            theta,
        )
    })
    .py()
}

/// Forward intensity of a homogeneous foil `thickness` resonant lengths thick.
#[pyfunction]
#[pyo3(signature = (thickness, t, hyperfine = None))]
fn foil_intensity(thickness: f64, t: Vec<f64>, hyperfine: Option<PyRef<'_, PyHyperfine>>) -> PyResult<Vec<f64>> {
    let hf = hyperfine_or(hyperfine, HyperfineModel::none());
    observables::foil_intensity(thickness, fe57_gamma(), &hf, &t).py()
}

/// Poisson counts with the given expected total, reproducible per seed.
#[pyfunction]
#[pyo3(signature = (t, intensity, total_counts, seed = 0))]
fn poissonize(t: Vec<f64>, intensity: Vec<f64>, total_counts: f64, seed: u64) -> PyResult<Vec<u64>> {
    let trace = TimeTrace::new(t, intensity).py()?;
    let noisy = observables::poissonize(&trace, total_counts, seed).py()?;
    Ok(noisy.counts.unwrap_or_default())
}

/// Initial decay rate in units of γ over `window` (ns).
#[pyfunction]
#[pyo3(signature = (t, intensity, window = (13.0, 30.0)))]
fn extract_speedup(t: Vec<f64>, intensity: Vec<f64>, window: (f64, f64)) -> PyResult<f64> {
    let trace = TimeTrace::new(t, intensity).py()?;
    inference::extract_speedup(&trace, window).py()
}

/// Poisson maximum-likelihood fit of gated counts.
///
/// `model` is `exp_decay`, `gi_decay` or `fc_foil`. `prescan` is an optional
/// `(index, values)` grid tried before the simplex.
#[pyfunction]
#[pyo3(signature = (model, t, counts, init = None, bounds = None, gate = (13.0, 192.0), restarts = 3, max_evals = 10_000, seed = 0, prescan = None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    model: &str,
    t: Vec<f64>,
    counts: Vec<u64>,
    init: Option<Vec<f64>>,
    bounds: Option<Vec<(f64, f64)>>,
    gate: (f64, f64),
    restarts: usize,
    max_evals: usize,
    seed: u64,
    prescan: Option<(usize, Vec<f64>)>,
) -> PyResult<PyFitResult> {
    let gate = Gate::new(gate.0, gate.1).py()?;
    let data = TimeTrace::from_counts(t, counts).py()?.with_gate(gate);
    let model = ForwardModel::from_name(model, gate.t_min).py()?;
    let prescan = match prescan {
        Some(p) => Some(p),
        None if matches!(model, ForwardModel::FcFoil { .. }) && init.is_none() => {
            Some((1, inference::foil_thickness_grid()))
        }
        None => None,
    };
    let init = init.unwrap_or_else(|| model.default_init(&data));
    let mut problem = FitProblem::new(model, data, init).with_options(FitOptions {
        restarts,
        max_evals,
        seed,
        prescan,
        ..FitOptions::default()
    });
    if let Some(b) = bounds {
        problem = problem.with_bounds(b);
    }
    let r = py.detach(|| inference::fit_mle(&problem)).py()?;
    Ok(PyFitResult {
        model: r.model.to_string(),
        std_errors: r.std_errors(),
        param_names: r.param_names,
        params: r.p_hat,
        nll: r.nll,
        converged: r.converged,
        n_eval: r.n_eval,
        n_bins: r.n_bins,
    })
}

#[pymodule]
fn wgexciton(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyLayerStack>()?;
    m.add_class::<PyMode>()?;
    m.add_class::<PyHyperfine>()?;
    m.add_class::<PyFitResult>()?;
    m.add_function(wrap_pyfunction!(gamma, m)?)?;
    m.add_function(wrap_pyfunction!(fc_trace, m)?)?;
    m.add_function(wrap_pyfunction!(gi_trace, m)?)?;
    m.add_function(wrap_pyfunction!(foil_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(poissonize, m)?)?;
    m.add_function(wrap_pyfunction!(extract_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    Ok(())
}
