//! Closed-form solutions in the two experimental limits.
//!
//! Emitted fields are normalized as b = iK ∫ e^{−ik₀νx'} σ(x') dx' with
//! K = γζ/(4Λ_res), so b carries the pulse area A and has units of ns⁻¹.

use std::sync::atomic::{AtomicBool, Ordering};

use log::warn;
use num_complex::Complex64;

use super::{Carrier, DynamicsParams, Drive, FieldTrace, I};
use crate::error::{Error, Result};
use crate::special::{j0_of_sqrt, j1_ratio_of_sqrt};

static WARNED_SHORT: AtomicBool = AtomicBool::new(false);

/// Whether the sample is long enough for the infinite-length GI solution.
pub fn gi_valid(params: &DynamicsParams) -> bool {
    params.length >= 5.0 * params.lambda_m()
}

fn warn_if_short(params: &DynamicsParams) {
    if !gi_valid(params) && !WARNED_SHORT.swap(true, Ordering::Relaxed) {
        warn!(
            "sample length {} nm is below 5 mode attenuation lengths ({} nm); the grazing-incidence solution assumes a long sample",
            params.length,
            5.0 * params.lambda_m()
        );
    }
}

/// Complex frequency shift η = (ζΛ_m/Λ_res)(γ/2)/(2Λ_m q_θ − i).
///
/// Re η shifts the resonance; the amplitude decays as e^{−(γ/2 − iη)t}, so
/// the intensity rate is γ + 2 Im η.
pub fn frequency_shift(params: &DynamicsParams, theta_in: f64) -> Result<Complex64> {
    if !(params.nu.im > 0.0) {
        return Err(Error::Domain("frequency shift needs Im nu > 0".into()));
    }
    // Same expression written with κ = −q_θ + i/(2Λ_m): η = −K/κ.
    Ok(-params.coupling() / params.mismatch(theta_in))
}

/// Front-coupling coherence at position x ∈ [−L, 0] and lab time t.
pub fn analytic_fc(params: &DynamicsParams, drive: &Drive, x: f64, t: f64) -> Result<Complex64> {
    drive.require_fc()?;
    let ell = x + params.length;
    if ell < -1e-9 * params.length || x > 1e-9 * params.length {
        return Err(Error::Domain(format!("x = {x} nm lies outside [-L, 0]")));
    }
    let ell = ell.max(0.0);
    let carrier = Carrier::for_drive(params, drive);
    let phase = carrier.phase(x);
    let delay = carrier.delay(x);
    let k = params.coupling();
    drive.pulse.convolve(t, |tk| {
        let tau = tk - delay;
        if tau < 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        Ok(I * drive.area * phase * (-0.5 * params.gamma * tau).exp() * j0_of_sqrt(k * tau * ell))
    })
}

/// Grazing-incidence coherence for an infinitely long sample.
pub fn analytic_gi(params: &DynamicsParams, drive: &Drive, x: f64, t: f64) -> Result<Complex64> {
    let theta = drive.require_gi()?;
    warn_if_short(params);
    let eta = frequency_shift(params, theta)?;
    let carrier = Carrier::for_drive(params, drive);
    let phase = carrier.phase(x);
    let delay = carrier.delay(x);
    drive.pulse.convolve(t, |tk| {
        let tau = tk - delay;
        if tau < 0.0 {
            return Ok(Complex64::new(0.0, 0.0));
        }
        Ok(I * drive.area * phase * (-(0.5 * params.gamma - I * eta) * tau).exp())
    })
}

/// Emitted field at the exit of a front-coupled waveguide.
pub fn emitted_field_fc(params: &DynamicsParams, drive: &Drive, t: &[f64]) -> Result<FieldTrace> {
    drive.require_fc()?;
    let carrier = Carrier::for_drive(params, drive);
    let delay = carrier.delay(0.0);
    let k = params.coupling();
    let l = params.length;
    let prefactor = -drive.area * k * l * carrier.phase(0.0);
    let b = t
        .iter()
        .map(|&ti| {
            drive.pulse.convolve(ti, |tk| {
                let tau = tk - delay;
                if tau < 0.0 {
                    return Ok(Complex64::new(0.0, 0.0));
                }
                Ok(prefactor * (-0.5 * params.gamma * tau).exp() * j1_ratio_of_sqrt(k * tau * l))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldTrace::new(t.to_vec(), b))
}

/// Emitted field at the exit for grazing incidence on a long sample.
pub fn emitted_field_gi(params: &DynamicsParams, drive: &Drive, t: &[f64]) -> Result<FieldTrace> {
    let theta = drive.require_gi()?;
    warn_if_short(params);
    let eta = frequency_shift(params, theta)?;
    let kappa = params.mismatch(theta);
    let prefactor = -I * drive.area * params.coupling() / kappa;
    let b = t
        .iter()
        .map(|&ti| {
            drive.pulse.convolve(ti, |tau| {
                if tau < 0.0 {
                    return Ok(Complex64::new(0.0, 0.0));
                }
                Ok(prefactor * (-(0.5 * params.gamma - I * eta) * tau).exp())
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FieldTrace::new(t.to_vec(), b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Pulse;
    use crate::units;
    use proptest::prelude::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn fc_params(zeta: f64, length: f64) -> DynamicsParams {
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

    fn gi_params() -> DynamicsParams {
        DynamicsParams::new(
            Complex64::new(1.0 - 5.9e-6, 7.5e-8),
            c(0.023),
            47.0,
            units::fe57_gamma(),
            units::wavenumber_per_nm(14.4),
            1e6,
        )
        .unwrap()
    }

    fn theta_m(p: &DynamicsParams) -> f64 {
        theta_for_q(p, 0.0)
    }

    /// Incidence angle with k₀cos θ − k₀Re ν = q, solved exactly.
    fn theta_for_q(p: &DynamicsParams, q: f64) -> f64 {
        2.0 * (0.5 * (p.deficit().re - q / p.k0)).sqrt().asin()
    }

    #[test]
    fn fc_initial_value_and_bare_decay() {
        let p = fc_params(0.038, 2e6);
        let a = Complex64::new(1e-3, 2e-4);
        let d = Drive::front_coupling(a).unwrap();
        let x = -0.3e6;
        let ell = x + p.length;
        let t0 = p.nu.re * ell / units::C_NM_PER_NS;
        let s = analytic_fc(&p, &d, x, t0).unwrap();
        let expect = I * a * (I * p.k0 * p.nu * ell).exp();
        assert!((s - expect).norm() < 1e-12 * a.norm());

        let p0 = p.with_zeta(c(0.0)).unwrap();
        let t = t0 + 50.0;
        let s = analytic_fc(&p0, &d, x, t).unwrap();
        let expect = expect * (-0.5 * p.gamma * 50.0).exp();
        assert!((s - expect).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn fc_causal() {
        let p = fc_params(0.038, 2e6);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        assert_eq!(analytic_fc(&p, &d, -1e6, 1e-3).unwrap(), c(0.0));
        assert!(analytic_fc(&p, &d, 10.0, 1.0).is_err());
        let g = Drive::grazing(c(1e-3), 0.003).unwrap();
        assert!(matches!(analytic_fc(&p, &g, -1.0, 1.0), Err(Error::WrongGeometry { .. })));
        assert!(matches!(emitted_field_gi(&p, &d, &[1.0]), Err(Error::WrongGeometry { .. })));
    }

    #[test]
    fn fc_minima_at_bessel_zeros() {
        // |σ| vanishes where √(γ t ℓ ζ/Λ_res) hits a zero of J₀.
        let p = fc_params(0.05, 1e6);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let xi = (p.optical_depth()).re;
        let delay = p.nu.re * p.length / units::C_NM_PER_NS;
        for j in [2.404_825_557_695_773, 5.520_078_110_286_311] {
            let t = j * j / (xi * p.gamma) + delay;
            assert!(analytic_fc(&p, &d, 0.0, t).unwrap().norm() < 1e-12);
        }
    }

    #[test]
    fn slab_equivalence() {
        // A waveguide of length L behaves as a foil of thickness ζL.
        let p = fc_params(0.029, 2e6);
        let foil = DynamicsParams::slab(p.nu, p.lambda_res, p.gamma, p.k0, p.zeta.re * p.length).unwrap();
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        // Compare at equal retarded time with the off-resonant propagation
        // factor e^{ik₀νL} divided out; what remains must coincide.
        let reduced = |q: &DynamicsParams| {
            let carrier = Carrier::for_drive(q, &d);
            let t: Vec<f64> = (0..200).map(|i| i as f64 + carrier.delay(0.0)).collect();
            let b = emitted_field_fc(q, &d, &t).unwrap().b;
            b.into_iter().map(move |b| b / carrier.phase(0.0)).collect::<Vec<_>>()
        };
        let a = reduced(&p);
        let b = reduced(&foil);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() <= 1e-10 * y.norm().max(1e-300), "{x} {y}");
        }
        for x in [0.0, -0.5e6, -2e6] {
            let xf = x * p.zeta.re;
            for tau in [0.0, 3.0, 40.0] {
                let ta = tau + Carrier::for_drive(&p, &d).delay(x);
                let tb = tau + Carrier::for_drive(&foil, &d).delay(xf);
                let u = analytic_fc(&p, &d, x, ta).unwrap() / Carrier::for_drive(&p, &d).phase(x);
                let v = analytic_fc(&foil, &d, xf, tb).unwrap() / Carrier::for_drive(&foil, &d).phase(xf);
                assert!((u - v).norm() <= 1e-12 * 1e-3);
            }
        }
    }

    #[test]
    fn fc_prompt_limit_and_zeros() {
        let p = fc_params(0.029, 2e6);
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let delay = p.nu.re * p.length / units::C_NM_PER_NS;
        let b = emitted_field_fc(&p, &d, &[delay]).unwrap().b[0];
        let expect = -d.area * p.coupling() * p.length * (I * p.k0 * p.nu * p.length).exp();
        assert!((b - expect).norm() < 1e-12 * expect.norm());
        let xi = p.optical_depth().re;
        assert!((xi - 1234.0).abs() < 1.0);
        let t1 = 3.831_705_970_207_512f64.powi(2) / (xi * p.gamma);
        assert!((t1 - 1.67).abs() < 0.02, "{t1}");
        let b1 = emitted_field_fc(&p, &d, &[t1 + delay]).unwrap().b[0];
        assert!(b1.norm() < 1e-12 * expect.norm());
        assert_eq!(emitted_field_fc(&p, &d, &[-1.0]).unwrap().b[0], c(0.0));
    }

    #[test]
    fn fc_integrated_intensity_grows_with_length() {
        // Resonant part only: the off-resonant factor |e^{ik₀νL}|² is
        // divided out, since it attenuates the prompt pulse equally.
        let d = Drive::front_coupling(c(1e-3)).unwrap();
        let mut last = 0.0;
        for i in 1..=40 {
            let p = fc_params(0.038, i as f64 * 5e4);
            let carrier = Carrier::for_drive(&p, &d);
            let t: Vec<f64> = (0..=1920).map(|i| i as f64 * 0.1 + carrier.delay(0.0)).collect();
            let atten = carrier.phase(0.0).norm_sqr();
            let total: f64 = emitted_field_fc(&p, &d, &t).unwrap().intensity().iter().sum::<f64>() / atten;
            assert!(total > last);
            last = total;
        }
    }

    #[test]
    fn shift_on_resonance() {
        let p = gi_params();
        let theta = theta_m(&p);
        let eta = frequency_shift(&p, theta).unwrap();
        let g = p.zeta.re * p.lambda_m() / p.lambda_res;
        assert!((eta - I * g * p.gamma / 2.0).norm() < 1e-9 * eta.norm());
        let rate = p.gamma + 2.0 * eta.im;
        assert!((rate / p.gamma - (1.0 + g)).abs() < 1e-9);
        assert!((1.0 + g - 45.0).abs() < 2.0);
    }

    #[test]
    fn shift_matches_lambda_form() {
        let p = gi_params();
        let lm = p.lambda_m();
        for dth in [-2e-4, -3e-5, 0.0, 1e-5, 4e-4] {
            let theta = theta_m(&p) + dth;
            let q = p.k0 * theta.cos() - p.k0 * p.nu.re;
            let oracle = p.zeta * lm / p.lambda_res * (p.gamma / 2.0) / (2.0 * lm * q - I);
            let eta = frequency_shift(&p, theta).unwrap();
            assert!((eta - oracle).norm() < 1e-6 * oracle.norm(), "{eta} {oracle}");
        }
    }

    #[test]
    fn shift_vanishes_far_off_resonance() {
        let p = gi_params();
        let lm = p.lambda_m();
        // |2Λ_m q| ≥ 100 leaves the rate within 1% of γ.
        let theta = theta_for_q(&p, -100.0 / (2.0 * lm));
        let eta = frequency_shift(&p, theta).unwrap();
        assert!(2.0 * eta.im / p.gamma < 0.01);
        assert!(frequency_shift(&p, 0.3).unwrap().norm() < 1e-3 * p.gamma);
        let lossless = DynamicsParams { nu: Complex64::new(1.0 - 5.9e-6, 0.0), ..p };
        assert!(frequency_shift(&lossless, 0.003).is_err());
    }

    #[test]
    fn gi_rates_match_between_sigma_and_field() {
        let p = gi_params();
        let theta = theta_m(&p) + 2e-5;
        let d = Drive::grazing(c(1e-3), theta).unwrap();
        let eta = frequency_shift(&p, theta).unwrap();
        let rate = p.gamma + 2.0 * eta.im;
        let (t1, t2) = (13.0, 30.0);
        let s1 = analytic_gi(&p, &d, 0.0, t1).unwrap().norm_sqr();
        let s2 = analytic_gi(&p, &d, 0.0, t2).unwrap().norm_sqr();
        assert!(((s1 / s2).ln() / (t2 - t1) / rate - 1.0).abs() < 1e-9);
        let b = emitted_field_gi(&p, &d, &[t1, t2]).unwrap().intensity();
        assert!(((b[0] / b[1]).ln() / (t2 - t1) / rate - 1.0).abs() < 1e-9);
        let entry = -5e4 * theta.cos() / units::C_NM_PER_NS + 1e-9;
        assert!((analytic_gi(&p, &d, -5e4, entry).unwrap().norm() - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn gi_prefactor() {
        let p = gi_params();
        let lm = p.lambda_m();
        let on = Drive::grazing(c(1e-3), theta_m(&p)).unwrap();
        let b0 = emitted_field_gi(&p, &on, &[0.0]).unwrap().b[0];
        let peak = 1e-3 * p.gamma / 4.0 * 2.0 * p.zeta.re * lm / p.lambda_res;
        assert!((b0.norm() / peak - 1.0).abs() < 1e-9);
        // |2 q Λ_m| = 1 halves the intensity.
        let theta = theta_for_q(&p, 1.0 / (2.0 * lm));
        let off = Drive::grazing(c(1e-3), theta).unwrap();
        let q = p.q_theta(theta);
        assert!(((2.0 * q * lm).abs() - 1.0).abs() < 1e-3);
        let b1 = emitted_field_gi(&p, &off, &[0.0]).unwrap().b[0];
        assert!((b1.norm_sqr() / b0.norm_sqr() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn finite_pulse_is_superposition() {
        let p = fc_params(0.038, 1e6);
        let pulse = Pulse::tabulated(0.5, vec![1.0, 3.0, 1.0]).unwrap();
        let d = Drive::new(super::super::Geometry::FrontCoupling, c(1e-3), pulse).unwrap();
        let d0 = Drive::front_coupling(c(1e-3)).unwrap();
        let t = 20.0;
        let b = emitted_field_fc(&p, &d, &[t]).unwrap().b[0];
        let parts = emitted_field_fc(&p, &d0, &[t, t - 0.5, t - 1.0]).unwrap().b;
        let expect = 0.2 * parts[0] + 0.6 * parts[1] + 0.2 * parts[2];
        assert!((b - expect).norm() < 1e-15);
    }

    proptest! {
        #[test]
        fn shift_parity(dq in -2e-4f64..2e-4) {
            // Re η is odd and Im η even in q_θ; Im η > 0.
            let p = gi_params();
            let a = frequency_shift(&p, theta_for_q(&p, dq)).unwrap();
            let b = frequency_shift(&p, theta_for_q(&p, -dq)).unwrap();
            let tol = 1e-6 * a.norm();
            prop_assert!((a.re + b.re).abs() < tol);
            prop_assert!((a.im - b.im).abs() < tol);
            prop_assert!(a.im > 0.0);
        }

        #[test]
        fn linearity_fc(re in -0.05f64..0.05, im in -0.05f64..0.05, t in 0.0f64..192.0, x in -2e6f64..0.0) {
            let p = fc_params(0.038, 2e6);
            let a = Complex64::new(re, im);
            let d1 = Drive::front_coupling(c(1e-3)).unwrap();
            let dc = Drive::front_coupling(a).unwrap();
            let s1 = analytic_fc(&p, &d1, x, t).unwrap();
            let sc = analytic_fc(&p, &dc, x, t).unwrap();
            prop_assert!((sc - a / 1e-3 * s1).norm() <= 1e-12 * (1.0 + sc.norm()));
            prop_assert!(sc.norm() <= a.norm() * (1.0 + 1e-12));
            let b1 = emitted_field_fc(&p, &d1, &[t]).unwrap().b[0];
            let bc = emitted_field_fc(&p, &dc, &[t]).unwrap().b[0];
            prop_assert!((bc - a / 1e-3 * b1).norm() <= 1e-12 * (1.0 + bc.norm()));
        }

        #[test]
        fn gi_causal_and_bounded(t in -50.0f64..192.0, x in -1e6f64..0.0) {
            let p = gi_params();
            let d = Drive::grazing(c(1e-3), theta_m(&p)).unwrap();
            let s = analytic_gi(&p, &d, x, t).unwrap();
            let tau = t - x * theta_m(&p).cos() / units::C_NM_PER_NS;
            if tau < 0.0 {
                prop_assert_eq!(s, c(0.0));
            }
            prop_assert!(s.norm() <= 1e-3 * (1.0 + 1e-12));
        }
    }
}
