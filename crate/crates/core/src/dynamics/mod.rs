//! Exciton dynamics along the waveguide.
//!
//! The coherence σ(x, t) is stored as an envelope s on top of a carrier,
//! σ = e^{ik_c(x − x_ref)} s. For front coupling the carrier is the mode
//! itself (k_c = k₀ν, x_ref = −L); for grazing incidence it is the in-plane
//! wavevector of the incident beam (k_c = k₀ cos θ_in, x_ref = 0). Times on
//! an [`ExcitonField`] are retarded times τ, in which the forward-scattering
//! equation is local in time.

pub mod analytic;
pub mod emission;
pub mod volterra;

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::layered_medium::ResonantLayerSpec;
use crate::mode_solver::ResonantMode;
use crate::units::C_NM_PER_NS;

pub use analytic::{
    analytic_fc, analytic_gi, emitted_field_fc, emitted_field_gi, frequency_shift,
};
pub use emission::emitted_field_numeric;
pub use volterra::{solve_full_kernel, solve_volterra, SolverOptions};

pub(crate) const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Largest pulse area accepted as linear response.
pub const MAX_PULSE_AREA: f64 = 0.1;

/// Medium descriptor shared by every solver. A homogeneous foil is the
/// special case ν = n, ζ = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsParams {
    pub nu: Complex64,
    pub zeta: Complex64,
    /// On-resonance attenuation length (nm).
    pub lambda_res: f64,
    /// Decay rate (ns⁻¹).
    pub gamma: f64,
    /// Vacuum wavenumber (nm⁻¹).
    pub k0: f64,
    /// Sample length along x (nm).
    pub length: f64,
}

impl DynamicsParams {
    pub fn new(
        nu: Complex64,
        zeta: Complex64,
        lambda_res: f64,
        gamma: f64,
        k0: f64,
        length: f64,
    ) -> Result<Self> {
        let p = DynamicsParams {
            nu,
            zeta,
            lambda_res,
            gamma,
            k0,
            length,
        };
        p.validate()?;
        Ok(p)
    }

    /// Homogeneous foil of refractive index n and thickness `length`.
    pub fn slab(n: Complex64, lambda_res: f64, gamma: f64, k0: f64, length: f64) -> Result<Self> {
        Self::new(n, Complex64::new(1.0, 0.0), lambda_res, gamma, k0, length)
    }

    /// Parameters of one waveguide mode driven over a length `length`.
    pub fn from_mode(mode: &ResonantMode, resonant: &ResonantLayerSpec, length: f64) -> Result<Self> {
        let zeta = mode
            .zeta
            .ok_or_else(|| Error::validation("zeta", "mode carries no coupling coefficient"))?;
        Self::new(mode.nu, zeta, resonant.lambda_res, resonant.gamma(), mode.k0(), length)
    }

    fn validate(&self) -> Result<()> {
        let check = |field: &str, ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::validation(field, msg))
            }
        };
        check("nu", self.nu.is_finite() && self.nu.im >= 0.0, "must be finite with Im >= 0")?;
        check("zeta", self.zeta.is_finite(), "must be finite")?;
        check("Lambda_res", self.lambda_res.is_finite() && self.lambda_res > 0.0, "must be > 0")?;
        check("gamma", self.gamma.is_finite() && self.gamma > 0.0, "must be > 0")?;
        check("k0", self.k0.is_finite() && self.k0 > 0.0, "must be > 0")?;
        check("length", self.length.is_finite() && self.length > 0.0, "must be > 0")
    }

    pub fn with_length(self, length: f64) -> Result<Self> {
        Self::new(self.nu, self.zeta, self.lambda_res, self.gamma, self.k0, length)
    }

    pub fn with_zeta(self, zeta: Complex64) -> Result<Self> {
        Self::new(self.nu, zeta, self.lambda_res, self.gamma, self.k0, self.length)
    }

    /// 1 − ν.
    pub fn deficit(&self) -> Complex64 {
        1.0 - self.nu
    }

    /// Off-resonance attenuation length 1/(2k₀ Im ν); infinite when lossless.
    pub fn lambda_m(&self) -> f64 {
        if self.nu.im > 0.0 {
            1.0 / (2.0 * self.k0 * self.nu.im)
        } else {
            f64::INFINITY
        }
    }

    /// Effective resonant thickness ζL/Λ_res.
    pub fn optical_depth(&self) -> Complex64 {
        self.zeta * self.length / self.lambda_res
    }

    /// K = γζ/(4Λ_res), the coupling constant of the integral term (ns⁻¹ nm⁻¹).
    pub fn coupling(&self) -> Complex64 {
        self.gamma * self.zeta / (4.0 * self.lambda_res)
    }

    /// In-plane mismatch κ = k₀ν − k₀cos θ = −q_θ + i/(2Λ_m).
    pub fn mismatch(&self, theta_in: f64) -> Complex64 {
        let s = (0.5 * theta_in).sin();
        self.k0 * (2.0 * s * s - self.deficit())
    }

    /// q_θ = k₀ cos θ_in − k₀ Re ν.
    pub fn q_theta(&self, theta_in: f64) -> f64 {
        -self.mismatch(theta_in).re
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    FrontCoupling,
    GrazingIncidence { theta_in: f64 },
}

/// Temporal envelope of the exciting pulse.
#[derive(Debug, Clone, PartialEq)]
pub enum Pulse {
    Delta,
    /// Samples Π(k·dt), k = 0, 1, …; normalized to unit area on use.
    Tabulated { dt: f64, shape: Vec<f64> },
}

impl Pulse {
    pub fn tabulated(dt: f64, shape: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::validation("pulse.dt", "must be > 0"));
        }
        if shape.is_empty() || shape.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::validation("pulse.shape", "must be nonempty and nonnegative"));
        }
        if shape.iter().sum::<f64>() <= 0.0 {
            return Err(Error::validation("pulse.shape", "has zero area"));
        }
        Ok(Pulse::Tabulated { dt, shape })
    }

    /// Duration of the envelope (0 for a delta pulse).
    pub fn duration(&self) -> f64 {
        match self {
            Pulse::Delta => 0.0,
            Pulse::Tabulated { dt, shape } => dt * (shape.len() - 1) as f64,
        }
    }

    /// Quadrature weights of the unit-area envelope at t = k·dt.
    pub(crate) fn weights(&self) -> Vec<(f64, f64)> {
        match self {
            Pulse::Delta => vec![(0.0, 1.0)],
            Pulse::Tabulated { dt, shape } => {
                let total: f64 = shape.iter().sum();
                shape
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (k as f64 * dt, v / total))
                    .collect()
            }
        }
    }

    /// Superposes delayed copies of a delta response. The response itself
    /// must vanish before its own arrival time.
    pub(crate) fn convolve<F>(&self, t: f64, response: F) -> Result<Complex64>
    where
        F: Fn(f64) -> Result<Complex64>,
    {
        let mut acc = Complex64::new(0.0, 0.0);
        for (tk, w) in self.weights() {
            acc += w * response(t - tk)?;
        }
        Ok(acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drive {
    pub geometry: Geometry,
    /// Pulse area A.
    pub area: Complex64,
    pub pulse: Pulse,
}

impl Drive {
    pub fn new(geometry: Geometry, area: Complex64, pulse: Pulse) -> Result<Self> {
        if !area.is_finite() || area.norm() > MAX_PULSE_AREA {
            return Err(Error::validation(
                "area",
                format!("|A| must be <= {MAX_PULSE_AREA} (linear response), got {}", area.norm()),
            ));
        }
        if let Geometry::GrazingIncidence { theta_in } = geometry {
            if !(theta_in.is_finite() && theta_in > 0.0 && theta_in < 0.5) {
                return Err(Error::validation("theta_in", "must be a small positive angle"));
            }
        }
        Ok(Drive { geometry, area, pulse })
    }

    pub fn front_coupling(area: Complex64) -> Result<Self> {
        Self::new(Geometry::FrontCoupling, area, Pulse::Delta)
    }

    pub fn grazing(area: Complex64, theta_in: f64) -> Result<Self> {
        Self::new(Geometry::GrazingIncidence { theta_in }, area, Pulse::Delta)
    }

    pub fn theta_in(&self) -> Option<f64> {
        match self.geometry {
            Geometry::GrazingIncidence { theta_in } => Some(theta_in),
            Geometry::FrontCoupling => None,
        }
    }

    pub(crate) fn require_fc(&self) -> Result<()> {
        match self.geometry {
            Geometry::FrontCoupling => Ok(()),
            _ => Err(Error::WrongGeometry { expected: "front-coupling" }),
        }
    }

    pub(crate) fn require_gi(&self) -> Result<f64> {
        self.theta_in().ok_or(Error::WrongGeometry { expected: "grazing-incidence" })
    }
}

/// σ = e^{ik(x − x_ref)} s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Carrier {
    pub k: Complex64,
    pub x_ref: f64,
    /// Group slowness along x: the transit time to x is slowness·(x − x_ref).
    pub slowness: f64,
}

impl Carrier {
    pub fn for_drive(params: &DynamicsParams, drive: &Drive) -> Self {
        match drive.geometry {
            Geometry::FrontCoupling => Carrier {
                k: params.k0 * params.nu,
                x_ref: -params.length,
                slowness: params.nu.re / C_NM_PER_NS,
            },
            Geometry::GrazingIncidence { theta_in } => Carrier {
                k: Complex64::new(params.k0 * theta_in.cos(), 0.0),
                x_ref: 0.0,
                slowness: theta_in.cos() / C_NM_PER_NS,
            },
        }
    }

    pub fn phase(&self, x: f64) -> Complex64 {
        (I * self.k * (x - self.x_ref)).exp()
    }

    /// Lab-frame arrival time of the pulse at x.
    pub fn delay(&self, x: f64) -> f64 {
        self.slowness * (x - self.x_ref)
    }
}

/// Uniformly spaced samples start + i·step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UniformGrid {
    pub start: f64,
    pub step: f64,
    pub len: usize,
}

impl UniformGrid {
    pub fn new(start: f64, step: f64, len: usize) -> Self {
        UniformGrid { start, step, len }
    }

    /// `len` points from a to b inclusive.
    pub fn linspace(a: f64, b: f64, len: usize) -> Self {
        let step = if len > 1 { (b - a) / (len - 1) as f64 } else { 0.0 };
        UniformGrid { start: a, step, len }
    }

    pub fn from_slice(name: &'static str, v: &[f64]) -> Result<Self> {
        if v.is_empty() || v.iter().any(|x| !x.is_finite()) {
            return Err(Error::validation(name, "grid must be nonempty and finite"));
        }
        if v.len() == 1 {
            return Ok(UniformGrid::new(v[0], 0.0, 1));
        }
        let step = (v[v.len() - 1] - v[0]) / (v.len() - 1) as f64;
        if !(step > 0.0) {
            return Err(Error::validation(name, "grid must be increasing"));
        }
        let tol = 1e-9 * step.max(v[0].abs().max(v[v.len() - 1].abs()) * 1e-3);
        for (i, &x) in v.iter().enumerate() {
            if (x - (v[0] + i as f64 * step)).abs() > tol.max(1e-6 * step) {
                return Err(Error::NonUniformGrid { name });
            }
        }
        Ok(UniformGrid::new(v[0], step, v.len()))
    }

    pub fn get(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn end(&self) -> f64 {
        self.get(self.len.saturating_sub(1))
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.get(i)).collect()
    }
}

/// σ(x, τ) on a grid. `envelope` is time-major: index `it * nx + ix`.
#[derive(Debug, Clone)]
pub struct ExcitonField {
    pub x_grid: UniformGrid,
    /// Retarded times τ (ns).
    pub t_grid: UniformGrid,
    pub envelope: Vec<Complex64>,
    pub carrier: Carrier,
    pub params: DynamicsParams,
    pub drive: Drive,
}

impl ExcitonField {
    pub fn nx(&self) -> usize {
        self.x_grid.len
    }

    pub fn nt(&self) -> usize {
        self.t_grid.len
    }

    pub fn envelope_at(&self, ix: usize, it: usize) -> Complex64 {
        self.envelope[it * self.nx() + ix]
    }

    pub fn sigma(&self, ix: usize, it: usize) -> Complex64 {
        self.carrier.phase(self.x_grid.get(ix)) * self.envelope_at(ix, it)
    }

    /// Lab time of sample (ix, it).
    pub fn lab_time(&self, ix: usize, it: usize) -> f64 {
        self.t_grid.get(it) + self.carrier.delay(self.x_grid.get(ix))
    }

    /// Samples an arbitrary σ(x, t_lab) onto the grid, e.g. an analytic
    /// solution, so that it can be fed to [`emitted_field_numeric`].
    pub fn from_fn<F>(
        params: DynamicsParams,
        drive: Drive,
        x_grid: UniformGrid,
        t_grid: UniformGrid,
        sigma: F,
    ) -> Result<Self>
    where
        F: Fn(f64, f64) -> Result<Complex64>,
    {
        let carrier = Carrier::for_drive(&params, &drive);
        let mut envelope = Vec::with_capacity(x_grid.len * t_grid.len);
        for it in 0..t_grid.len {
            for ix in 0..x_grid.len {
                let x = x_grid.get(ix);
                let t = t_grid.get(it) + carrier.delay(x);
                envelope.push(sigma(x, t)? / carrier.phase(x));
            }
        }
        Ok(ExcitonField {
            x_grid,
            t_grid,
            envelope,
            carrier,
            params,
            drive,
        })
    }
}

/// Emitted field at the waveguide exit, in units of the drive field scale.
/// The field at height z follows by multiplying with `profile_factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldTrace {
    /// Lab-frame delay (ns).
    pub t: Vec<f64>,
    pub b: Vec<Complex64>,
    pub profile_factor: String,
}

pub const PROFILE_FACTOR: &str = "u_m(z)/u_m(z0)";

impl FieldTrace {
    pub fn new(t: Vec<f64>, b: Vec<Complex64>) -> Self {
        FieldTrace {
            t,
            b,
            profile_factor: PROFILE_FACTOR.to_string(),
        }
    }

    pub fn intensity(&self) -> Vec<f64> {
        self.b.iter().map(|b| b.norm_sqr()).collect()
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        FieldTrace {
            t: self.t.clone(),
            b: self.b.iter().map(|b| c * b).collect(),
            profile_factor: self.profile_factor.clone(),
        }
    }

    pub fn to_csv(&self, header: &[(String, String)]) -> String {
        let mut out = String::new();
        for (k, v) in header {
            let _ = writeln!(out, "# {k} = {v}");
        }
        let _ = writeln!(out, "# profile_factor = {}", self.profile_factor);
        out.push_str("t_ns,re_b,im_b,abs2_b\n");
        for (t, b) in self.t.iter().zip(&self.b) {
            let _ = writeln!(out, "{t:.6},{:.12e},{:.12e},{:.12e}", b.re, b.im, b.norm_sqr());
        }
        out
    }

    pub fn write_csv(&self, path: &Path, header: &[(String, String)]) -> Result<()> {
        std::fs::write(path, self.to_csv(header)).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
