//! Physical constants and unit conversions.
//!
//! Repo-wide units: lengths in nm, times in ns, photon energies in keV,
//! angles in rad. Rates are in ns⁻¹.

use std::f64::consts::PI;

/// Reduced Planck constant in eV·ns.
pub const HBAR_EV_NS: f64 = 6.582_119_569e-7;
/// h·c in keV·nm.
pub const HC_KEV_NM: f64 = 1.239_841_984;
/// Speed of light in nm/ns.
pub const C_NM_PER_NS: f64 = 2.997_924_58e8;

/// ⁵⁷Fe Mössbauer transition energy (keV).
pub const FE57_ENERGY_KEV: f64 = 14.4;
/// ⁵⁷Fe natural linewidth ħγ (neV).
pub const FE57_LINEWIDTH_NEV: f64 = 4.7;
/// On-resonance attenuation length of ⁵⁷Fe (nm).
pub const FE57_LAMBDA_RES_NM: f64 = 47.0;

/// Synchrotron bunch repetition period (ns); every trace lives inside it.
pub const REPETITION_PERIOD_NS: f64 = 192.0;
/// Default start of the delayed-photon gate (ns).
pub const DEFAULT_GATE_NS: f64 = 13.0;

pub fn wavelength_nm(energy_kev: f64) -> f64 {
    HC_KEV_NM / energy_kev
}

/// Vacuum wavenumber k₀ = 2π/λ in nm⁻¹.
pub fn wavenumber_per_nm(energy_kev: f64) -> f64 {
    2.0 * PI / wavelength_nm(energy_kev)
}

/// Decay rate γ in ns⁻¹ from a linewidth ħγ in neV.
pub fn decay_rate_per_ns(linewidth_nev: f64) -> f64 {
    linewidth_nev * 1e-9 / HBAR_EV_NS
}

/// Natural lifetime τ = ħ/(ħγ) in ns.
pub fn natural_lifetime_ns(linewidth_nev: f64) -> f64 {
    1.0 / decay_rate_per_ns(linewidth_nev)
}

/// γ of ⁵⁷Fe in ns⁻¹. Every module uses this one value.
pub fn fe57_gamma() -> f64 {
    decay_rate_per_ns(FE57_LINEWIDTH_NEV)
}

pub fn deg_to_rad(deg: f64) -> f64 {
    deg * PI / 180.0
}

pub fn rad_to_deg(rad: f64) -> f64 {
    rad * 180.0 / PI
}

pub fn mdeg_to_rad(mdeg: f64) -> f64 {
    deg_to_rad(mdeg * 1e-3)
}
