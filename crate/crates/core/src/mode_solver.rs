//! Resonant modes of a planar stack (single scalar polarization).
//!
//! The field is written in the variable p = ν² − 1. Inside a slab with
//! susceptibility χ the transverse wavenumber is κ = k₀√(χ − p). The top
//! half-space carries e^{−iκ₀z} and the substrate e^{iκ_N z}; both use the
//! outgoing/decaying branch, so leaky modes come out with Im ν > 0.
//! Roots of the dispersion function are polished by Newton iteration and
//! counted with the argument principle so that none are missed.

use std::f64::consts::{FRAC_PI_4, PI};

use log::{debug, warn};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::layered_medium::{LayerStack, ResonantLayerSpec, Slab};

const I: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Normalized |D| accepted for a root.
pub const DISPERSION_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub struct ModeOptions {
    /// Upper bound on the profile grid step (nm).
    pub max_step: f64,
    /// Profile extent into each cladding, in decay lengths.
    pub tail_decay_lengths: f64,
    /// Hard cap on each cladding extension (nm).
    pub max_tail: f64,
}

impl Default for ModeOptions {
    fn default() -> Self {
        ModeOptions {
            max_step: 0.1,
            tail_decay_lengths: 3.0,
            max_tail: 500.0,
        }
    }
}

/// Mode profile u(z) on a uniform grid plus analytic tail integrals.
#[derive(Debug, Clone)]
pub struct ModeProfile {
    pub z_start: f64,
    pub step: f64,
    pub u: Vec<Complex64>,
    /// ε at every node (lower layer at an interface).
    pub eps: Vec<Complex64>,
    /// ∫ u²/ε over the top cladding beyond the first node.
    pub tail_top: Complex64,
    /// ∫ u²/ε over the substrate beyond the last node.
    pub tail_bottom: Complex64,
}

impl ModeProfile {
    pub fn z(&self, i: usize) -> f64 {
        self.z_start + i as f64 * self.step
    }

    pub fn z_end(&self) -> f64 {
        self.z(self.u.len() - 1)
    }

    pub fn z_grid(&self) -> Vec<f64> {
        (0..self.u.len()).map(|i| self.z(i)).collect()
    }

    /// Four-point Lagrange interpolation; None outside the grid.
    pub fn interpolate(&self, z: f64) -> Option<Complex64> {
        let n = self.u.len();
        if n < 4 || !z.is_finite() {
            return None;
        }
        let s = (z - self.z_start) / self.step;
        if s < -1e-9 || s > (n - 1) as f64 + 1e-9 {
            return None;
        }
        let i0 = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        let x = s - i0 as f64;
        let mut acc = Complex64::new(0.0, 0.0);
        for j in 0..4 {
            let mut w = 1.0;
            for k in 0..4 {
                if k != j {
                    w *= (x - k as f64) / (j as f64 - k as f64);
                }
            }
            acc += self.u[i0 + j] * w;
        }
        Some(acc)
    }

    /// ∫ u²/ε dz by piecewise Simpson between material interfaces plus the
    /// analytic tails. Interfaces are assumed to sit on grid nodes.
    pub fn binormalization(&self) -> Complex64 {
        let f: Vec<Complex64> = self.u.iter().map(|u| u * u).collect();
        let n = f.len();
        let mut total = self.tail_top + self.tail_bottom;
        let mut start = 0;
        for i in 0..n - 1 {
            let last = i + 1 == n - 1;
            if self.eps[i + 1] != self.eps[i] || last {
                let eps = self.eps[i];
                total += segment_simpson(&f[start..=i + 1], self.step) / eps;
                start = i + 1;
            }
        }
        total
    }
}

fn segment_simpson(f: &[Complex64], h: f64) -> Complex64 {
    let n = f.len() - 1;
    match n {
        0 => Complex64::new(0.0, 0.0),
        1 => 0.5 * h * (f[0] + f[1]),
        _ => {
            let even = if n % 2 == 0 { n } else { n - 3 };
            let mut acc = Complex64::new(0.0, 0.0);
            let mut i = 0;
            while i < even {
                acc += h / 3.0 * (f[i] + 4.0 * f[i + 1] + f[i + 2]);
                i += 2;
            }
            if even < n {
                acc += 3.0 * h / 8.0 * (f[i] + 3.0 * f[i + 1] + 3.0 * f[i + 2] + f[i + 3]);
            }
            acc
        }
    }
}

/// Field coefficients at the top of one region.
#[derive(Debug, Clone, Copy)]
struct Region {
    top: f64,
    thickness: Option<f64>,
    kappa: Complex64,
    eps: Complex64,
    u: Complex64,
    du: Complex64,
}

#[derive(Debug, Clone)]
pub struct ResonantMode {
    /// 1-based mode number in order of increasing 1 − Re ν.
    pub index: usize,
    pub nu: Complex64,
    /// 1 − ν evaluated without cancellation.
    pub deficit: Complex64,
    pub profile: ModeProfile,
    /// d·u(z₀)²; None when the stack has no resonant film.
    pub zeta: Option<Complex64>,
    /// Off-resonance attenuation length (nm).
    pub lambda_m: f64,
    /// Mode angle (rad), cos θ = Re ν.
    pub theta_m: f64,
    /// Normalized |D(ν)| at the root.
    pub residual: f64,
    regions: Vec<Region>,
    k0: f64,
}

impl ResonantMode {
    pub fn one_minus_re_nu(&self) -> f64 {
        self.deficit.re
    }

    /// Exact u(z) from the transfer-matrix coefficients.
    pub fn field_at(&self, z: f64) -> Complex64 {
        self.field_and_slope(z).0
    }

    fn field_and_slope(&self, z: f64) -> (Complex64, Complex64) {
        let first = &self.regions[0];
        if z < first.top {
            let e = (-I * first.kappa * (z - first.top)).exp();
            return (first.u * e, -I * first.kappa * first.u * e);
        }
        let r = self
            .regions
            .iter()
            .rev()
            .find(|r| z >= r.top)
            .expect("z lies below the top surface");
        match r.thickness {
            None => {
                let e = (I * r.kappa * (z - r.top)).exp();
                (r.u * e, I * r.kappa * r.u * e)
            }
            Some(_) => propagate(r.kappa, z - r.top, r.u, r.du),
        }
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }
}

/// Λ = 1/(2k₀ Im ν).
pub fn attenuation_length(nu: Complex64, k0: f64) -> Result<f64> {
    if !(nu.im > 0.0) {
        return Err(Error::Domain(format!("Im nu must be > 0, got {}", nu.im)));
    }
    Ok(1.0 / (2.0 * k0 * nu.im))
}

/// θ = arccos(Re ν).
pub fn mode_angle(nu: Complex64) -> Result<f64> {
    if !(nu.re > 0.0 && nu.re <= 1.0) {
        return Err(Error::Domain(format!("Re nu must lie in (0, 1], got {}", nu.re)));
    }
    Ok(angle_from_deficit(1.0 - nu.re))
}

fn angle_from_deficit(d: f64) -> f64 {
    2.0 * (0.5 * d).sqrt().asin()
}

/// ζ = d·u(z₀)², with u interpolated from the sampled profile.
pub fn coupling_coefficient(mode: &ResonantMode, resonant: &ResonantLayerSpec) -> Result<Complex64> {
    let u = mode.profile.interpolate(resonant.z0).ok_or_else(|| {
        Error::validation(
            "resonant.z0_nm",
            format!(
                "{} nm lies outside the profile grid [{}, {}]",
                resonant.z0,
                mode.profile.z_start,
                mode.profile.z_end()
            ),
        )
    })?;
    Ok(resonant.d * u * u)
}

pub fn solve_modes(stack: &LayerStack, max_modes: usize) -> Result<Vec<ResonantMode>> {
    solve_modes_with(stack, max_modes, &ModeOptions::default())
}

pub fn solve_modes_with(
    stack: &LayerStack,
    max_modes: usize,
    options: &ModeOptions,
) -> Result<Vec<ResonantMode>> {
    if max_modes == 0 {
        return Err(Error::validation("max_modes", "must be >= 1"));
    }
    if !(options.max_step > 0.0) {
        return Err(Error::validation("max_step", "must be > 0"));
    }
    let slabs = stack.slabs();
    let dispersion = Dispersion::new(stack.k0(), &slabs);
    // Confined modes lie between the vacuum line and the densest material.
    if slabs.iter().all(|s| s.thickness.is_none()) {
        return Err(Error::NoModeFound);
    }
    let barrier = slabs.iter().map(|s| s.chi.re).fold(f64::INFINITY, f64::min);
    if barrier >= 0.0 {
        return Err(Error::NoModeFound);
    }
    let roots = dispersion.find_roots(stack, barrier)?;
    let mut roots: Vec<(Complex64, f64)> = roots.into_iter().filter(|(p, _)| p.re > barrier).collect();
    roots.sort_by(|a, b| b.0.re.total_cmp(&a.0.re));
    roots.truncate(max_modes);
    if roots.is_empty() {
        return Err(Error::NoModeFound);
    }
    roots
        .iter()
        .enumerate()
        .map(|(i, &(p, residual))| build_mode(stack, &dispersion, i + 1, p, residual, options))
        .collect()
}

struct Dispersion<'a> {
    k0: f64,
    slabs: &'a [Slab],
    /// Magnitude scale of χ used for step sizes and tolerances.
    scale: f64,
}

/// Transfer across a homogeneous layer of thickness t.
fn propagate(kappa: Complex64, t: f64, u: Complex64, du: Complex64) -> (Complex64, Complex64) {
    let x = kappa * t;
    let c = x.cos();
    let sc = sinc(x);
    (c * u + t * sc * du, -kappa * kappa * t * sc * u + c * du)
}

fn sinc(x: Complex64) -> Complex64 {
    if x.norm() < 1e-2 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0 - x2 * x2 * x2 / 5040.0
    } else {
        x.sin() / x
    }
}

/// Outgoing/decaying root of χ − p; the cut runs upward from p = χ.
fn outer_sqrt(s: Complex64) -> Complex64 {
    Complex64::from_polar(1.0, FRAC_PI_4) * (-I * s).sqrt()
}

impl<'a> Dispersion<'a> {
    fn new(k0: f64, slabs: &'a [Slab]) -> Self {
        let scale = slabs.iter().map(|s| s.chi.norm()).fold(0.0, f64::max).max(1e-12);
        Dispersion { k0, slabs, scale }
    }

    fn kappa(&self, i: usize, p: Complex64) -> Complex64 {
        let s = self.slabs[i].chi - p;
        if self.slabs[i].thickness.is_some() {
            self.k0 * s.sqrt()
        } else {
            self.k0 * outer_sqrt(s)
        }
    }

    /// D(p) and its normalization scale.
    fn eval(&self, p: Complex64) -> (Complex64, f64) {
        let n = self.slabs.len();
        let k_top = self.kappa(0, p);
        let mut u = Complex64::new(1.0, 0.0);
        let mut du = -I * k_top;
        // Largest field seen along the stack, in units of the top wavenumber.
        let mut peak = du.norm() + k_top.norm();
        for i in 1..n - 1 {
            let t = self.slabs[i].thickness.expect("inner slabs are finite");
            let kappa = self.kappa(i, p);
            (u, du) = propagate(kappa, t, u, du);
            peak = peak.max(du.norm() + (kappa * u).norm());
        }
        let k_bot = self.kappa(n - 1, p);
        let d = du - I * k_bot * u;
        (d, peak.max(du.norm() + (k_bot * u).norm()))
    }

    fn normalized(&self, p: Complex64) -> f64 {
        let (d, s) = self.eval(p);
        d.norm() / s
    }

    fn newton(&self, p0: Complex64) -> Result<(Complex64, f64)> {
        let h = 1e-6 * self.scale;
        let max_step = 0.5 * self.scale;
        let mut p = p0;
        let mut last = f64::INFINITY;
        for _ in 0..100 {
            let (d, s) = self.eval(p);
            last = d.norm() / s;
            let dp = (self.eval(p + h).0 - self.eval(p - h).0) / (2.0 * h);
            if dp.norm() == 0.0 || !dp.is_finite() {
                break;
            }
            let mut step = d / dp;
            if step.norm() > max_step {
                step *= max_step / step.norm();
            }
            p -= step;
            if step.norm() < 1e-15 * self.scale {
                let r = self.normalized(p);
                if r < DISPERSION_TOLERANCE {
                    return Ok((p, r));
                }
                break;
            }
        }
        let r = self.normalized(p);
        if r < DISPERSION_TOLERANCE {
            return Ok((p, r));
        }
        Err(Error::RootNotConverged {
            last: (1.0 + p).sqrt(),
            residual: r.min(last),
        })
    }

    /// Phase change of D around a closed polygon, sampled adaptively.
    fn winding(&self, corners: &[Complex64]) -> f64 {
        let mut total = 0.0;
        for k in 0..corners.len() {
            let a = corners[k];
            let b = corners[(k + 1) % corners.len()];
            let n = 64;
            let mut prev = (a, self.eval(a).0);
            for j in 1..=n {
                let q = a + (b - a) * (j as f64 / n as f64);
                let cur = (q, self.eval(q).0);
                total += self.arg_change(prev, cur, 0);
                prev = cur;
            }
        }
        total / (2.0 * PI)
    }

    fn arg_change(&self, a: (Complex64, Complex64), b: (Complex64, Complex64), depth: u32) -> f64 {
        let d = (b.1 / a.1).arg();
        if d.abs() < 0.3 || depth > 40 {
            return d;
        }
        let m = 0.5 * (a.0 + b.0);
        let mid = (m, self.eval(m).0);
        self.arg_change(a, mid, depth + 1) + self.arg_change(mid, b, depth + 1)
    }

    /// Number of zeros in the confined region, splitting at the cladding cuts.
    fn count_zeros(&self, re_lo: f64, re_hi: f64, im_hi: f64) -> usize {
        let gap = 1e-9 * self.scale;
        let mut cuts: Vec<f64> = [self.slabs[0].chi.re, self.slabs[self.slabs.len() - 1].chi.re]
            .into_iter()
            .filter(|&c| c > re_lo && c < re_hi)
            .collect();
        cuts.sort_by(f64::total_cmp);
        cuts.dedup();
        let mut edges = vec![re_lo];
        edges.extend(cuts.iter().copied());
        edges.push(re_hi);
        let mut count = 0.0;
        for w in edges.windows(2) {
            let (l, r) = (w[0] + gap, w[1] - gap);
            if r <= l {
                continue;
            }
            let rect = [
                Complex64::new(l, 0.0),
                Complex64::new(r, 0.0),
                Complex64::new(r, im_hi),
                Complex64::new(l, im_hi),
            ];
            let wnd = self.winding(&rect);
            if (wnd - wnd.round()).abs() > 0.1 {
                warn!("argument-principle count not integral: {wnd}");
            }
            count += wnd.round().max(0.0);
        }
        count as usize
    }

    fn find_roots(&self, stack: &LayerStack, barrier: f64) -> Result<Vec<(Complex64, f64)>> {
        let re_lo = barrier;
        let re_hi = -1e-9 * self.scale;
        let im_hi = self.scale;
        let inside = |p: Complex64| p.re > re_lo && p.re < re_hi && p.im > 0.0 && p.im < im_hi;

        let expected = self.count_zeros(re_lo, re_hi, im_hi);
        debug!("argument principle: {expected} zeros in the confined region");

        let mut roots: Vec<(Complex64, f64)> = Vec::new();
        let mut last_err = None;
        let mut try_seed = |seed: Complex64, roots: &mut Vec<(Complex64, f64)>| match self.newton(seed) {
            Ok((p, r)) if inside(p) => {
                if !roots.iter().any(|(q, _)| (q - p).norm() < 1e-9 * self.scale) {
                    roots.push((p, r));
                }
            }
            Ok(_) => {}
            Err(e) => last_err = Some(e),
        };

        // Ideal-mirror estimates: core of effective width D_eff between walls.
        if let (Some((lo, hi)), Some(core)) = (stack.core_bounds(), stack.core_index()) {
            let width = hi - lo;
            let chi_core = stack.layers()[core].optics.susceptibility();
            for factor in [1.0, 1.25, 1.6, 2.0] {
                for m in 1..=12 {
                    let kt = m as f64 * PI / (self.k0 * width * factor);
                    let seed = Complex64::new(chi_core.re - kt * kt, 1e-7_f64.min(0.1 * self.scale));
                    if seed.re < re_lo {
                        break;
                    }
                    try_seed(seed, &mut roots);
                }
            }
        }
        if roots.len() < expected {
            let (nr, ni) = (24, 6);
            for a in 0..nr {
                for b in 0..ni {
                    let re = re_lo + (re_hi - re_lo) * (a as f64 + 0.5) / nr as f64;
                    let im = im_hi * 0.2 * ((b as f64 + 0.5) / ni as f64).powi(2);
                    try_seed(Complex64::new(re, im), &mut roots);
                }
                if roots.len() >= expected {
                    break;
                }
            }
        }
        if roots.len() < expected {
            warn!("found {} of {expected} zeros in the confined region", roots.len());
            if roots.is_empty() {
                return Err(last_err.unwrap_or(Error::NoModeFound));
            }
        }
        Ok(roots)
    }
}

fn build_mode(
    stack: &LayerStack,
    disp: &Dispersion<'_>,
    index: usize,
    p: Complex64,
    residual: f64,
    options: &ModeOptions,
) -> Result<ResonantMode> {
    let slabs = disp.slabs;
    let n = slabs.len();
    let nu = (1.0 + p).sqrt();
    let deficit = -p / (1.0 + nu);

    // Field coefficients at the top of every region.
    let mut regions = Vec::with_capacity(n);
    let k_top = disp.kappa(0, p);
    let mut u = Complex64::new(1.0, 0.0);
    let mut du = -I * k_top;
    let mut z = 0.0;
    regions.push(Region {
        top: 0.0,
        thickness: None,
        kappa: k_top,
        eps: slabs[0].permittivity(),
        u,
        du,
    });
    for (i, s) in slabs.iter().enumerate().skip(1) {
        let kappa = disp.kappa(i, p);
        regions.push(Region {
            top: z,
            thickness: s.thickness,
            kappa,
            eps: s.permittivity(),
            u,
            du,
        });
        if let Some(t) = s.thickness {
            (u, du) = propagate(kappa, t, u, du);
            z += t;
        }
    }

    // Analytic bi-normalization.
    let mut norm = I * regions[0].u * regions[0].u / (2.0 * regions[0].kappa * regions[0].eps);
    for r in &regions[1..] {
        norm += match r.thickness {
            Some(t) => layer_square_integral(r.kappa, t, r.u, r.du) / r.eps,
            None => I * r.u * r.u / (2.0 * r.kappa * r.eps),
        };
    }
    let c = 1.0 / norm.sqrt();

    let z_ref = match stack.resonant() {
        Some(res) => res.z0,
        None => stack.core_bounds().map(|(a, b)| 0.5 * (a + b)).unwrap_or(0.0),
    };
    let mut mode = ResonantMode {
        index,
        nu,
        deficit,
        profile: ModeProfile {
            z_start: 0.0,
            step: 1.0,
            u: Vec::new(),
            eps: Vec::new(),
            tail_top: Complex64::new(0.0, 0.0),
            tail_bottom: Complex64::new(0.0, 0.0),
        },
        zeta: None,
        lambda_m: attenuation_length(nu, disp.k0).unwrap_or(f64::INFINITY),
        theta_m: angle_from_deficit(deficit.re),
        residual,
        regions,
        k0: disp.k0,
    };
    for r in &mut mode.regions {
        r.u *= c;
        r.du *= c;
    }
    let (u_ref, du_ref) = mode.field_and_slope(z_ref);
    let peak = mode.regions.iter().map(|r| r.u.norm()).fold(0.0, f64::max);
    let sign_ref = if u_ref.re.abs() > 1e-8 * peak { u_ref.re } else { du_ref.re };
    if sign_ref < 0.0 {
        for r in &mut mode.regions {
            r.u = -r.u;
            r.du = -r.du;
        }
    }
    mode.profile = sample_profile(&mode, options);
    if let Some(res) = stack.resonant() {
        mode.zeta = Some(coupling_coefficient(&mode, res)?);
    }
    Ok(mode)
}

/// ∫₀ᵗ u² ds for u = a cos κs + b sin(κs)/κ.
fn layer_square_integral(kappa: Complex64, t: f64, a: Complex64, b: Complex64) -> Complex64 {
    let x = kappa * t;
    let s2 = sinc(2.0 * x);
    let i_cc = t * 0.5 * (1.0 + s2);
    let i_ss = if x.norm() < 1e-2 {
        let x2 = x * x;
        t * t * t * (1.0 / 3.0 - x2 / 15.0 + 2.0 * x2 * x2 / 315.0)
    } else {
        t * t * t * (1.0 - s2) / (2.0 * x * x)
    };
    let sx = sinc(x);
    let i_cs = t * t * sx * sx * 0.5;
    a * a * i_cc + 2.0 * a * b * i_cs + b * b * i_ss
}

/// Grid step ≤ max_step that puts every interface on a node, if one exists.
fn aligned_step(interfaces: &[f64], max_step: f64) -> f64 {
    for k in 1..=64 {
        let h = max_step / k as f64;
        let ok = interfaces.iter().all(|&z| {
            let r = z / h;
            (r - r.round()).abs() < 1e-7
        });
        if ok {
            return h;
        }
    }
    max_step
}

fn sample_profile(mode: &ResonantMode, options: &ModeOptions) -> ModeProfile {
    let regions = &mode.regions;
    let mut tops: Vec<f64> = regions.iter().skip(1).map(|r| r.top).collect();
    let bottom = regions.last().expect("substrate").top;
    tops.push(bottom);
    let h = aligned_step(&tops, options.max_step);

    let tail = |kappa: Complex64| {
        let decay = if kappa.im > 1e-12 { 1.0 / kappa.im } else { 1.0 / kappa.norm() };
        (options.tail_decay_lengths * decay).min(options.max_tail)
    };
    let first = &regions[0];
    let last = regions.last().expect("substrate");
    let n_top = (tail(first.kappa) / h).ceil() as usize;
    let n_inner = (bottom / h).round() as usize;
    let n_bot = (tail(last.kappa) / h).ceil() as usize;
    let z_start = -(n_top as f64) * h;
    let count = n_top + n_inner + n_bot + 1;

    let mut u = Vec::with_capacity(count);
    let mut eps = Vec::with_capacity(count);
    let region_eps = |z: f64| {
        regions
            .iter()
            .rev()
            .find(|r| z >= r.top - 1e-9 * h)
            .map(|r| r.eps)
            .unwrap_or(regions[0].eps)
    };
    for i in 0..count {
        let z = z_start + i as f64 * h;
        u.push(mode.field_at(z));
        eps.push(if z < -1e-9 * h { first.eps } else { region_eps(z) });
    }
    let u0 = u[0];
    let un = *u.last().expect("non-empty");
    ModeProfile {
        z_start,
        step: h,
        tail_top: I * u0 * u0 / (2.0 * first.kappa * first.eps),
        tail_bottom: I * un * un / (2.0 * last.kappa * last.eps),
        u,
        eps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layered_medium::{Layer, OpticalConstants, Thickness};

    const GI: &str = include_str!("../fixtures/gi.toml");
    const FC: &str = include_str!("../fixtures/fc.toml");

    fn gi() -> LayerStack {
        LayerStack::from_toml_str(GI).unwrap()
    }

    fn fc() -> LayerStack {
        LayerStack::from_toml_str(FC).unwrap()
    }

    #[test]
    fn fixture_mode_counts() {
        assert_eq!(solve_modes(&fc(), 10).unwrap().len(), 2);
        assert_eq!(solve_modes(&gi(), 10).unwrap().len(), 4);
    }

    #[test]
    fn print_modes() {
        for stack in [fc(), gi()] {
            for m in solve_modes(&stack, 10).unwrap() {
                println!(
                    "m={} 1-Re nu={:.4e} Im nu={:.4e} Lambda={:.4} mm theta={:.4} deg zeta={:.4e} res={:.1e} bn={:.2e}",
                    m.index,
                    m.one_minus_re_nu(),
                    m.nu.im,
                    m.lambda_m * 1e-6,
                    m.theta_m.to_degrees(),
                    m.zeta.unwrap(),
                    m.residual,
                    (m.profile.binormalization() - 1.0).norm(),
                );
            }
        }
    }

    #[test]
    fn modes_satisfy_invariants() {
        for stack in [fc(), gi()] {
            let modes = solve_modes(&stack, 10).unwrap();
            for (i, m) in modes.iter().enumerate() {
                assert_eq!(m.index, i + 1);
                assert!(m.nu.im > 0.0);
                assert!(m.one_minus_re_nu() > 0.0 && m.one_minus_re_nu() < 1e-4);
                assert!(m.residual < DISPERSION_TOLERANCE);
                assert_eq!(m.lambda_m, attenuation_length(m.nu, stack.k0()).unwrap());
                assert!((m.theta_m.cos() - m.nu.re).abs() < 1e-12);
                let bn = m.profile.binormalization();
                assert!((bn - 1.0).norm() < 1e-6, "binormalization {bn}");
                let res = stack.resonant().unwrap();
                assert!(m.field_at(res.z0).re >= 0.0 || m.zeta.unwrap().norm() < 1e-12);
                if i > 0 {
                    assert!(m.one_minus_re_nu() > modes[i - 1].one_minus_re_nu());
                }
            }
        }
    }

    #[test]
    fn interpolated_zeta_matches_exact() {
        for stack in [fc(), gi()] {
            let res = stack.resonant().unwrap().clone();
            for m in solve_modes(&stack, 10).unwrap() {
                let u = m.field_at(res.z0);
                let exact = res.d * u * u;
                assert!((m.zeta.unwrap() - exact).norm() < 1e-9 * (1.0 + exact.norm()));
            }
        }
    }

    #[test]
    fn symmetric_stack_has_definite_parity() {
        let stack = fc();
        let modes = solve_modes(&stack, 10).unwrap();
        let (lo, hi) = stack.core_bounds().unwrap();
        let c = 0.5 * (lo + hi);
        for m in &modes {
            let parity = if m.index % 2 == 1 { 1.0 } else { -1.0 };
            for dz in [1.0, 5.0, 17.0, 40.0, 60.0] {
                let a = m.field_at(c - dz);
                let b = m.field_at(c + dz);
                assert!((a - parity * b).norm() < 1e-9 * a.norm().max(1e-3), "m={} dz={dz}", m.index);
            }
        }
        assert!(modes[1].zeta.unwrap().norm() < 1e-12);
        assert!(modes[0].zeta.unwrap().norm() > 1e-2);
    }

    #[test]
    fn refinement_is_stable() {
        let stack = gi();
        let coarse = solve_modes(&stack, 10).unwrap();
        let fine = solve_modes_with(&stack, 10, &ModeOptions { max_step: 0.05, ..Default::default() }).unwrap();
        assert_eq!(coarse.len(), fine.len());
        for (a, b) in coarse.iter().zip(&fine) {
            assert_eq!(a.index, b.index);
            assert!((a.nu - b.nu).norm() < 1e-9);
            assert!((a.zeta.unwrap() - b.zeta.unwrap()).norm() < 1e-8);
        }
    }

    #[test]
    fn bare_substrate_has_no_mode() {
        let layers = vec![
            Layer::new("vacuum", Thickness::SemiInfinite, OpticalConstants::VACUUM),
            Layer::new("Si", Thickness::SemiInfinite, OpticalConstants { delta: 2.33e-6, beta: 1.95e-8 }),
        ];
        let stack = LayerStack::new(layers, None, 14.4).unwrap();
        assert!(matches!(solve_modes(&stack, 4), Err(Error::NoModeFound)));
    }

    #[test]
    fn zero_modes_rejected() {
        assert!(matches!(solve_modes(&gi(), 0), Err(Error::Validation { .. })));
    }

    /// Thick high-contrast walls approach the ideal mirror guide.
    fn mirror_guide(core: f64) -> LayerStack {
        let wall = OpticalConstants { delta: 1e-3, beta: 0.0 };
        let layers = vec![
            Layer::new("wall", Thickness::SemiInfinite, wall),
            Layer::new("core", Thickness::Finite(core), OpticalConstants::VACUUM),
            Layer::new("wall", Thickness::SemiInfinite, wall),
        ];
        let res = ResonantLayerSpec::fe57(core / 2.0, 0.6).unwrap();
        LayerStack::new(layers, Some(res), 14.4).unwrap()
    }

    #[test]
    fn ideal_mirror_limit() {
        // Oracle: sin θ_m = mλ/(2D_eff), u(center)² = 2/D_eff, with the
        // effective width widened by the wall penetration depth 1/(k₀√(2δ)).
        let d = 40.0;
        let stack = mirror_guide(d);
        let k0 = stack.k0();
        let lambda = stack.wavelength();
        let pen = 1.0 / (k0 * (2.0e-3f64).sqrt());
        let d_eff = d + 2.0 * pen;
        let modes = solve_modes(&stack, 3).unwrap();
        let m1 = &modes[0];
        let s = lambda / (2.0 * d_eff);
        let expect = 1.0 - (1.0 - s * s).sqrt();
        assert!(((m1.one_minus_re_nu() - expect) / expect).abs() < 2e-3, "{} vs {expect}", m1.one_minus_re_nu());
        let ideal = lambda / (2.0 * d);
        assert!((m1.one_minus_re_nu() / (0.5 * ideal * ideal) - 1.0).abs() < 0.1);
        let zeta = m1.zeta.unwrap();
        let zeta_oracle = 2.0 * 0.6 / d_eff;
        assert!(((zeta.re - zeta_oracle) / zeta_oracle).abs() < 1e-2, "{zeta} vs {zeta_oracle}");
        assert!(modes[1].zeta.unwrap().norm() < 1e-10);
    }

    #[test]
    fn attenuation_length_values() {
        let k0 = 73.0;
        let l1 = attenuation_length(Complex64::new(1.0, 2.8e-8), k0).unwrap();
        assert!((l1 * 1e-6 - 0.245).abs() < 0.005);
        let l3 = attenuation_length(Complex64::new(1.0, 7.5e-8), k0).unwrap();
        assert!((l3 - 9.13e4).abs() < 1e3);
        assert_eq!(attenuation_length(Complex64::new(1.0, f64::INFINITY), k0).unwrap(), 0.0);
        assert!(attenuation_length(Complex64::new(1.0, 0.0), k0).is_err());
        assert!(attenuation_length(Complex64::new(1.0, -1e-8), k0).is_err());
    }

    #[test]
    fn mode_angle_values() {
        assert_eq!(mode_angle(Complex64::new(1.0, 0.0)).unwrap(), 0.0);
        let t3 = mode_angle(Complex64::new(1.0 - 5.9e-6, 1e-8)).unwrap();
        assert!((t3.to_degrees() - 0.197).abs() < 1e-3);
        let t1 = mode_angle(Complex64::new(1.0 - 3.8e-6, 1e-8)).unwrap();
        assert!((t1.to_degrees() - 0.158).abs() < 1e-3);
        assert!(mode_angle(Complex64::new(1.0 + 1e-9, 0.0)).is_err());
    }

    #[test]
    fn zero_thickness_film_gives_zero_zeta() {
        let stack = gi();
        let mode = &solve_modes(&stack, 1).unwrap()[0];
        let mut res = stack.resonant().unwrap().clone();
        res.d = 0.0;
        assert_eq!(coupling_coefficient(mode, &res).unwrap(), Complex64::new(0.0, 0.0));
        res.z0 = 1e6;
        assert!(coupling_coefficient(mode, &res).is_err());
    }
}
