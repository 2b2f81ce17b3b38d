//! Emitted field from a sampled coherence.

use num_complex::Complex64;

use super::volterra::CellWeights;
use super::{ExcitonField, FieldTrace, I};
use crate::error::{Error, Result};

/// Relative quadrature error accepted, measured against the peak |b|.
pub const EMISSION_TOLERANCE: f64 = 1e-3;

/// b(τ) = iK ∫_{−L}^{0} e^{−ik₀νx'} σ(x', τ) dx' by product integration over
/// the stored envelope. The error is estimated by repeating the quadrature
/// on every second grid point.
pub fn emitted_field_numeric(field: &ExcitonField) -> Result<FieldTrace> {
    let p = &field.params;
    let carrier = &field.carrier;
    // e^{−ik₀νx'} σ = e^{−ik_c x_ref} e^{−iκx'} s with κ = k₀ν − k_c.
    let kappa = match field.drive.geometry {
        super::Geometry::FrontCoupling => Complex64::new(0.0, 0.0),
        super::Geometry::GrazingIncidence { theta_in } => p.mismatch(theta_in),
    };
    let front = I * p.coupling() * (-I * carrier.k * carrier.x_ref).exp();
    let nx = field.nx();
    let h = field.x_grid.step;
    let fine = CellWeights::new(kappa, h);
    let coarse = CellWeights::new(kappa, 2.0 * h);

    let mut b = Vec::with_capacity(field.nt());
    let mut err: f64 = 0.0;
    let mut peak: f64 = 0.0;
    for it in 0..field.nt() {
        let s = &field.envelope[it * nx..(it + 1) * nx];
        let mut acc = Complex64::new(0.0, 0.0);
        for i in 1..nx {
            acc = fine.decay * acc + fine.far * s[i - 1] + fine.near * s[i];
        }
        let mut acc2 = Complex64::new(0.0, 0.0);
        let mut i = 2;
        while i < nx {
            acc2 = coarse.decay * acc2 + coarse.far * s[i - 2] + coarse.near * s[i];
            i += 2;
        }
        if (nx - 1) % 2 == 1 {
            acc2 = fine.decay * acc2 + fine.far * s[nx - 2] + fine.near * s[nx - 1];
        }
        let v = front * acc;
        err = err.max((front * (acc - acc2)).norm() / 3.0);
        peak = peak.max(v.norm());
        b.push(v);
    }
    if err > EMISSION_TOLERANCE * peak {
        return Err(Error::GridTooCoarse {
            estimate: err / peak,
            limit: EMISSION_TOLERANCE,
        });
    }
    let exit_delay = carrier.delay(0.0);
    let t = (0..field.nt()).map(|it| field.t_grid.get(it) + exit_delay).collect();
    Ok(FieldTrace::new(t, b))
}
