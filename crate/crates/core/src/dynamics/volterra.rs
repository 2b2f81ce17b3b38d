//! Numerical solution of the 1D equation of motion.
//!
//! In retarded time the forward-scattering equation reads
//! ∂_τ s = −(γ/2) s − K W s with the Volterra operator
//! (W s)(x) = ∫_{−L}^{x} e^{iκ(x−x')} s(x') dx'. After the integrating factor
//! e^{−γτ/2} the remaining linear system v' = −K W v is advanced with a
//! truncated Taylor series of the matrix exponential. W is discretized by
//! product integration: s is linear on each cell and the exponential is
//! integrated exactly, which costs one recursion per application.

use num_complex::Complex64;

use super::{Carrier, DynamicsParams, Drive, ExcitonField, Geometry, Pulse, UniformGrid, I};
use crate::error::{Error, Result};

/// Largest sample length accepted by the full-kernel solver (nm).
pub const FULL_KERNEL_MAX_LENGTH: f64 = 5000.0;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    /// Bound on ‖K W‖·Δτ for one Taylor step.
    pub max_step_norm: f64,
    /// Relative size of the last Taylor term kept.
    pub taylor_tol: f64,
    /// Cells per resonant and per mode attenuation length required.
    pub cells_per_length: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            max_step_norm: 0.5,
            taylor_tol: 1e-16,
            cells_per_length: 50.0,
        }
    }
}

/// φ = ∫₀¹ e^{zv} v dv and ψ = ∫₀¹ e^{zv} (1 − v) dv.
pub(crate) fn phi_psi_closed(z: Complex64) -> (Complex64, Complex64) {
    let e = z.exp();
    ((e * (z - 1.0) + 1.0) / (z * z), (e - 1.0 - z) / (z * z))
}

pub(crate) fn phi_psi_series(z: Complex64) -> (Complex64, Complex64) {
    let mut phi = Complex64::new(0.0, 0.0);
    let mut psi = Complex64::new(0.0, 0.0);
    let mut zk = Complex64::new(1.0, 0.0);
    let mut fact = 1.0;
    for k in 0..8 {
        let kf = k as f64;
        phi += zk / (fact * (kf + 2.0));
        psi += zk / (fact * (kf + 1.0) * (kf + 2.0));
        zk *= z;
        fact *= kf + 1.0;
    }
    (phi, psi)
}

/// Recursion coefficients of one cell for the kernel e^{iκu}.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CellWeights {
    pub(crate) decay: Complex64,
    /// Weight of the far end of the cell.
    pub(crate) far: Complex64,
    /// Weight of the near end (the point being updated).
    pub(crate) near: Complex64,
}

impl CellWeights {
    pub(crate) fn new(kappa: Complex64, h: f64) -> Self {
        let z = I * kappa * h;
        let (phi, psi) = if z.norm() < 1e-2 { phi_psi_series(z) } else { phi_psi_closed(z) };
        CellWeights {
            decay: z.exp(),
            far: h * phi,
            near: h * psi,
        }
    }

    /// Upper bound on the row sums of the discretized operator.
    fn row_bound(&self, n: usize) -> f64 {
        let a = self.decay.norm();
        let w = self.far.norm() + self.near.norm();
        let mut r: f64 = 0.0;
        let mut best: f64 = 0.0;
        for _ in 1..n {
            r = a * r + w;
            best = best.max(r);
        }
        best
    }
}

/// Discretized integral operator: forward branch plus optional backward one.
struct KernelOp {
    forward: CellWeights,
    backward: Option<CellWeights>,
}

impl KernelOp {
    fn apply(&self, s: &[Complex64], out: &mut [Complex64]) {
        let n = s.len();
        let f = &self.forward;
        let mut acc = Complex64::new(0.0, 0.0);
        out[0] = acc;
        for i in 1..n {
            acc = f.decay * acc + f.far * s[i - 1] + f.near * s[i];
            out[i] = acc;
        }
        if let Some(b) = &self.backward {
            let mut acc = Complex64::new(0.0, 0.0);
            for i in (0..n - 1).rev() {
                acc = b.decay * acc + b.near * s[i] + b.far * s[i + 1];
                out[i] += acc;
            }
        }
    }

    fn bound(&self, n: usize) -> f64 {
        self.forward.row_bound(n) + self.backward.map_or(0.0, |b| b.row_bound(n))
    }
}

/// Advances v' = −c W v from τ = 0 and records v at every τ of the grid.
fn march(op: &KernelOp, c: Complex64, v0: Vec<Complex64>, taus: &UniformGrid, opts: &SolverOptions) -> Vec<Complex64> {
    let nx = v0.len();
    let norm = c.norm() * op.bound(nx);
    let mut out = vec![Complex64::new(0.0, 0.0); nx * taus.len];
    let mut v = v0;
    let mut term = vec![Complex64::new(0.0, 0.0); nx];
    let mut tmp = vec![Complex64::new(0.0, 0.0); nx];
    let mut now = 0.0;
    for it in 0..taus.len {
        let tau = taus.get(it);
        if tau < 0.0 {
            continue;
        }
        let span = tau - now;
        if span > 0.0 && norm > 0.0 {
            let n_sub = ((span * norm / opts.max_step_norm).ceil() as usize).max(1);
            let d = span / n_sub as f64;
            for _ in 0..n_sub {
                term.copy_from_slice(&v);
                for n in 1..80 {
                    op.apply(&term, &mut tmp);
                    let f = -c * d / n as f64;
                    let mut tmax: f64 = 0.0;
                    let mut vmax: f64 = 0.0;
                    for i in 0..nx {
                        term[i] = f * tmp[i];
                        v[i] += term[i];
                        tmax = tmax.max(term[i].norm_sqr());
                        vmax = vmax.max(v[i].norm_sqr());
                    }
                    if tmax <= opts.taylor_tol * opts.taylor_tol * vmax {
                        break;
                    }
                }
            }
        }
        now = now.max(tau);
        out[it * nx..(it + 1) * nx].copy_from_slice(&v);
    }
    out
}

fn check_x_grid(params: &DynamicsParams, x: &[f64]) -> Result<UniformGrid> {
    let xg = UniformGrid::from_slice("x_grid", x)?;
    let l = params.length;
    if xg.len < 2 || (xg.start + l).abs() > 1e-6 * l || xg.end().abs() > 1e-6 * l {
        return Err(Error::validation("x_grid", "must span [-L, 0] with at least two points"));
    }
    Ok(xg)
}

/// Superposes delayed copies of the delta response on the τ grid.
fn apply_pulse(pulse: &Pulse, tg: &UniformGrid, nx: usize, s: &mut [Complex64]) -> Result<()> {
    let Pulse::Tabulated { dt, .. } = pulse else {
        return Ok(());
    };
    let aligned = (tg.step - dt).abs() <= 1e-9 * dt
        && tg.start <= 0.0
        && ((tg.start / dt) - (tg.start / dt).round()).abs() < 1e-9;
    if !aligned {
        return Err(Error::validation(
            "t_grid",
            "a tabulated pulse needs a time grid with the pulse step that includes 0",
        ));
    }
    let weights = pulse.weights();
    let delta = s.to_vec();
    for it in 0..tg.len {
        for ix in 0..nx {
            let mut acc = Complex64::new(0.0, 0.0);
            for (k, (_, w)) in weights.iter().enumerate() {
                if it >= k {
                    acc += w * delta[(it - k) * nx + ix];
                }
            }
            s[it * nx + ix] = acc;
        }
    }
    Ok(())
}

/// Shared driver: carrier, initial envelope and the kernel branches.
pub(crate) fn solve_with_carrier(
    params: &DynamicsParams,
    drive: &Drive,
    xg: UniformGrid,
    tg: UniformGrid,
    carrier: Carrier,
    s0: Option<Vec<Complex64>>,
    backward: bool,
    opts: &SolverOptions,
) -> Result<ExcitonField> {
    let h = xg.step;
    let k_mode = params.k0 * params.nu;
    let kappa_f = match (drive.geometry, s0.is_none()) {
        (Geometry::FrontCoupling, true) => Complex64::new(0.0, 0.0),
        (Geometry::GrazingIncidence { theta_in }, true) => params.mismatch(theta_in),
        _ => k_mode - carrier.k,
    };
    let op = KernelOp {
        forward: CellWeights::new(kappa_f, h),
        backward: backward.then(|| CellWeights::new(k_mode + carrier.k, h)),
    };
    let nx = xg.len;
    let v0 = s0.unwrap_or_else(|| vec![Complex64::new(1.0, 0.0); nx]);
    let v = march(&op, params.coupling(), v0, &tg, opts);
    let mut envelope = Vec::with_capacity(v.len());
    for it in 0..tg.len {
        let tau = tg.get(it);
        let f = if tau < 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            I * drive.area * (-0.5 * params.gamma * tau).exp()
        };
        envelope.extend(v[it * nx..(it + 1) * nx].iter().map(|x| f * x));
    }
    apply_pulse(&drive.pulse, &tg, nx, &mut envelope)?;
    Ok(ExcitonField {
        x_grid: xg,
        t_grid: tg,
        envelope,
        carrier,
        params: *params,
        drive: drive.clone(),
    })
}

/// Forward-scattering solution on a uniform (x, τ) grid.
pub fn solve_volterra(params: &DynamicsParams, drive: &Drive, x_grid: &[f64], t_grid: &[f64]) -> Result<ExcitonField> {
    solve_volterra_with(params, drive, x_grid, t_grid, &SolverOptions::default())
}

pub fn solve_volterra_with(
    params: &DynamicsParams,
    drive: &Drive,
    x_grid: &[f64],
    t_grid: &[f64],
    opts: &SolverOptions,
) -> Result<ExcitonField> {
    let xg = check_x_grid(params, x_grid)?;
    let tg = UniformGrid::from_slice("t_grid", t_grid)?;
    let h = xg.step;
    let n = opts.cells_per_length;
    if params.zeta.norm() > 0.0 {
        let limit = params.lambda_res / (n * params.zeta.norm());
        if h > limit * (1.0 + 1e-12) {
            return Err(Error::StepTooLarge {
                step: h,
                limit,
                reason: "resonant attenuation length",
            });
        }
    }
    let limit = params.lambda_m() / n;
    if h > limit * (1.0 + 1e-12) {
        return Err(Error::StepTooLarge {
            step: h,
            limit,
            reason: "mode attenuation length",
        });
    }
    let carrier = Carrier::for_drive(params, drive);
    solve_with_carrier(params, drive, xg, tg, carrier, None, false, opts)
}

/// Solution including the backward-scattered branch. Toy scale only.
pub fn solve_full_kernel(params: &DynamicsParams, drive: &Drive, x_grid: &[f64], t_grid: &[f64]) -> Result<ExcitonField> {
    let (xg, tg) = full_kernel_grids(params, x_grid, t_grid)?;
    let carrier = Carrier::for_drive(params, drive);
    solve_with_carrier(params, drive, xg, tg, carrier, None, true, &SolverOptions::default())
}

fn full_kernel_grids(params: &DynamicsParams, x_grid: &[f64], t_grid: &[f64]) -> Result<(UniformGrid, UniformGrid)> {
    if params.length > FULL_KERNEL_MAX_LENGTH {
        return Err(Error::ScaleGuard(format!(
            "L = {} nm exceeds {FULL_KERNEL_MAX_LENGTH} nm",
            params.length
        )));
    }
    let xg = check_x_grid(params, x_grid)?;
    let lambda = 2.0 * std::f64::consts::PI / params.k0;
    if xg.step > lambda / 20.0 * (1.0 + 1e-12) {
        return Err(Error::ScaleGuard(format!(
            "x step {} nm does not resolve the backscatter oscillation (needs <= {} nm)",
            xg.step,
            lambda / 20.0
        )));
    }
    let tg = UniformGrid::from_slice("t_grid", t_grid)?;
    Ok((xg, tg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{analytic_fc, analytic_gi};
    use crate::units;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn params(zeta: f64, length: f64) -> DynamicsParams {
        DynamicsParams::new(
            Complex64::new(1.0 - 3.8e-6, 2.8e-8),
            c(zeta),
            47.0,
            units::fe57_gamma(),
            units::wavenumber_per_nm(14.4),
            length,
        )
        .unwrap()
    }

    fn xs(l: f64, n: usize) -> Vec<f64> {
        UniformGrid::linspace(-l, 0.0, n).points()
    }

    fn ts(dt: f64, n: usize) -> Vec<f64> {
        UniformGrid::new(0.0, dt, n).points()
    }

    fn max_dev(field: &ExcitonField, oracle: impl Fn(f64, f64) -> Complex64, x_min: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for it in 0..field.nt() {
            for ix in 0..field.nx() {
                let x = field.x_grid.get(ix);
                if x < x_min {
                    continue;
                }
                let t = field.lab_time(ix, it);
                worst = worst.max((field.sigma(ix, it) - oracle(x, t)).norm());
            }
        }
        worst / field.drive.area.norm()
    }

    #[test]
    fn cell_weights_series_matches_closed_form() {
        for kappa in [Complex64::new(0.0, 0.0), Complex64::new(1e-4, 1e-5), Complex64::new(-2e-3, 3e-4)] {
            let a = CellWeights::new(kappa, 1.0);
            let b = CellWeights::new(kappa, 5.0);
            let z = I * kappa * 5.0;
            if z.norm() > 1e-2 {
                let e = z.exp();
                assert!((b.far / 5.0 - (e * (z - 1.0) + 1.0) / (z * z)).norm() < 1e-12);
            }
            if kappa.norm() == 0.0 {
                assert!((a.far - 0.5).norm() < 1e-15 && (a.near - 0.5).norm() < 1e-15);
            }
        }
        // both branches agree around the switch
        for z in [Complex64::new(0.0, 1e-2), Complex64::new(-7e-3, 7e-3), Complex64::new(2e-2, 0.0)] {
            let (a, b) = phi_psi_series(z);
            let (c, d) = phi_psi_closed(z);
            assert!((a - c).norm() < 1e-10 && (b - d).norm() < 1e-10);
        }
    }

    #[test]
    fn zero_coupling_is_bare_decay() {
        let p = params(0.0, 1e5);
        let a = Complex64::new(0.0, 1e-3);
        let d = Drive::front_coupling(a).unwrap();
        let f = solve_volterra(&p, &d, &xs(1e5, 101), &ts(1.0, 50)).unwrap();
        for it in 0..f.nt() {
            for ix in 0..f.nx() {
                let tau = f.t_grid.get(it);
                assert_eq!(f.envelope_at(ix, it), I * a * (-0.5 * p.gamma * tau).exp());
            }
        }
    }

    #[test]
    fn fc_matches_bessel_solution() {
        let p = params(0.038, 2e4);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let f = solve_volterra(&p, &d, &xs(2e4, 2001), &ts(4.0, 49)).unwrap();
        let dev = max_dev(&f, |x, t| analytic_fc(&p, &d, x, t).unwrap(), -2e4);
        assert!(dev < 1e-4, "{dev}");
    }

    #[test]
    fn gi_matches_eigen_solution_far_from_entrance() {
        let mut p = params(0.01, 1.0);
        p.nu = Complex64::new(1.0 - 5.9e-6, 2e-6);
        let lm = p.lambda_m();
        let p = p.with_length(30.0 * lm).unwrap();
        let theta = 2.0 * (0.5 * p.deficit().re).sqrt().asin();
        let d = Drive::grazing(c(1e-3), theta).unwrap();
        let h = lm / 60.0;
        let n = (p.length / h).round() as usize + 1;
        let f = solve_volterra(&p, &d, &xs(p.length, n), &ts(2.0, 40)).unwrap();
        let dev = max_dev(&f, |x, t| analytic_gi(&p, &d, x, t).unwrap(), -p.length + 20.0 * lm);
        assert!(dev < 2e-3, "{dev}");
    }

    #[test]
    fn refinement_converges() {
        let p = params(0.038, 2e4);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let coarse = solve_volterra(&p, &d, &xs(2e4, 1001), &ts(10.0, 20)).unwrap();
        let fine = solve_volterra(&p, &d, &xs(2e4, 2001), &ts(10.0, 20)).unwrap();
        let mut worst: f64 = 0.0;
        for it in 0..coarse.nt() {
            for ix in 0..coarse.nx() {
                worst = worst.max((coarse.sigma(ix, it) - fine.sigma(2 * ix, it)).norm());
            }
        }
        assert!(worst / 1e-3 < 1e-4, "{worst}");
    }

    #[test]
    fn preconditions() {
        let p = params(0.038, 1e4);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        assert!(matches!(
            solve_volterra(&p, &d, &xs(1e4, 11), &ts(1.0, 3)),
            Err(Error::StepTooLarge { .. })
        ));
        let mut x = xs(1e4, 1001);
        x[3] += 0.3;
        assert!(matches!(solve_volterra(&p, &d, &x, &ts(1.0, 3)), Err(Error::NonUniformGrid { .. })));
        assert!(matches!(
            solve_volterra(&p, &d, &xs(1e4, 1001), &[0.0, 1.0, 3.0]),
            Err(Error::NonUniformGrid { .. })
        ));
        assert!(matches!(
            solve_full_kernel(&params(0.5, 1e4), &d, &xs(1e4, 11), &ts(1.0, 3)),
            Err(Error::ScaleGuard(_))
        ));
        assert!(matches!(
            solve_full_kernel(&params(0.5, 100.0), &d, &xs(100.0, 101), &ts(1.0, 3)),
            Err(Error::ScaleGuard(_))
        ));
    }

    #[test]
    fn full_kernel_reduces_at_zero_coupling() {
        let p = params(0.0, 50.0);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let n = (50.0 / 0.004) as usize + 1;
        let a = solve_volterra(&p, &d, &xs(50.0, n), &ts(5.0, 5)).unwrap();
        let b = solve_full_kernel(&p, &d, &xs(50.0, n), &ts(5.0, 5)).unwrap();
        assert_eq!(a.envelope, b.envelope);
    }

    #[test]
    fn full_kernel_mirror_symmetry() {
        // The kernel depends on |x − x'| only: mirroring the grid and the
        // drive mirrors the solution.
        let p = params(1.0, 200.0);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let n = 50_001;
        let xg = UniformGrid::linspace(-200.0, 0.0, n);
        let tg = UniformGrid::new(0.0, 20.0, 5);
        let kc = Complex64::new(0.7 * p.k0, 0.0);
        let s0: Vec<Complex64> = (0..n).map(|i| Complex64::new(1.0 + 0.3 * (i as f64 / n as f64), 0.1)).collect();
        let a = Carrier { k: kc, x_ref: -200.0, slowness: 0.0 };
        let b = Carrier { k: -kc, x_ref: 0.0, slowness: 0.0 };
        let opts = SolverOptions::default();
        let fa = solve_with_carrier(&p, &d, xg, tg, a, Some(s0.clone()), true, &opts).unwrap();
        let rev: Vec<Complex64> = s0.iter().rev().copied().collect();
        let fb = solve_with_carrier(&p, &d, xg, tg, b, Some(rev), true, &opts).unwrap();
        let mut worst: f64 = 0.0;
        for it in 0..tg.len {
            for ix in 0..n {
                worst = worst.max((fa.sigma(ix, it) - fb.sigma(n - 1 - ix, it)).norm());
            }
        }
        assert!(worst < 1e-12, "{worst}");
    }

    #[test]
    fn tabulated_pulse_superposes() {
        let p = params(0.038, 2e3);
        let pulse = Pulse::tabulated(1.0, vec![1.0, 1.0]).unwrap();
        let dp = Drive::new(Geometry::FrontCoupling, c(1e-3), pulse).unwrap();
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let x = xs(2e3, 201);
        let t = ts(1.0, 6);
        let a = solve_volterra(&p, &dp, &x, &t).unwrap();
        let b = solve_volterra(&p, &d, &x, &t).unwrap();
        let nx = a.nx();
        for it in 1..6 {
            for ix in 0..nx {
                let expect = 0.5 * (b.envelope_at(ix, it) + b.envelope_at(ix, it - 1));
                assert!((a.envelope_at(ix, it) - expect).norm() < 1e-18);
            }
        }
        assert!(solve_volterra(&p, &dp, &x, &ts(0.5, 6)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn linear_and_causal(re in -0.05f64..0.05, im in -0.05f64..0.05, t0 in -20.0f64..0.0) {
            let p = params(0.038, 2e3);
            let a = Complex64::new(re, im);
            let d1 = Drive::front_coupling(c(1e-3)).unwrap();
            let da = Drive::front_coupling(a).unwrap();
            let x = xs(2e3, 101);
            let t: Vec<f64> = (0..12).map(|i| t0 + 4.0 * i as f64).collect();
            let f1 = solve_volterra(&p, &d1, &x, &t).unwrap();
            let fa = solve_volterra(&p, &da, &x, &t).unwrap();
            for (u, v) in f1.envelope.iter().zip(&fa.envelope) {
                prop_assert!((v - a / 1e-3 * u).norm() <= 1e-13);
            }
            for it in 0..f1.nt() {
                for ix in 0..f1.nx() {
                    if f1.t_grid.get(it) < 0.0 {
                        prop_assert_eq!(fa.envelope_at(ix, it), c(0.0));
                    }
                    prop_assert!(fa.sigma(ix, it).norm() <= a.norm() * (1.0 + 1e-9));
                }
            }
        }
    }
}
