//! Planar layer systems, optical constants and the resonant film.
//!
//! Depth `z` grows downward. `z = 0` is the top surface of the first finite
//! layer; the top half-space occupies `z < 0`. At an interface the
//! properties of the lower layer apply.

use std::fmt;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::units;

/// Largest admissible δ or β. Keeps every layer in the weak-contrast regime.
pub const MAX_OPTICAL_CONSTANT: f64 = 1e-3;

/// Relative tolerance for Λ_res against 1/(ρ σ_res) when both are given.
const LAMBDA_CONSISTENCY: f64 = 1e-12;

/// Refractive index n = 1 − δ + iβ of one material at the working energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalConstants {
    pub delta: f64,
    pub beta: f64,
}

impl OpticalConstants {
    pub const VACUUM: OpticalConstants = OpticalConstants {
        delta: 0.0,
        beta: 0.0,
    };

    pub fn new(delta: f64, beta: f64) -> Result<Self> {
        let oc = OpticalConstants { delta, beta };
        oc.validate("optics")?;
        Ok(oc)
    }

    fn validate(&self, field: &str) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("beta", self.beta)] {
            if !v.is_finite() || !(0.0..=MAX_OPTICAL_CONSTANT).contains(&v) {
                return Err(Error::validation(
                    format!("{field}.{name}"),
                    format!("{v} is outside [0, {MAX_OPTICAL_CONSTANT}]"),
                ));
            }
        }
        Ok(())
    }

    pub fn refractive_index(&self) -> Complex64 {
        Complex64::new(1.0 - self.delta, self.beta)
    }

    pub fn permittivity(&self) -> Complex64 {
        1.0 + self.susceptibility()
    }

    /// ε − 1, evaluated without cancellation as (n − 1)(n + 1).
    pub fn susceptibility(&self) -> Complex64 {
        let dn = Complex64::new(-self.delta, self.beta);
        dn * (2.0 + dn)
    }
}

/// Layer thickness. Only the two outer claddings may be semi-infinite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thickness {
    Finite(f64),
    SemiInfinite,
}

impl Thickness {
    pub fn finite(&self) -> Option<f64> {
        match *self {
            Thickness::Finite(t) => Some(t),
            Thickness::SemiInfinite => None,
        }
    }
}

impl Serialize for Thickness {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match *self {
            Thickness::Finite(t) => s.serialize_f64(t),
            Thickness::SemiInfinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Thickness {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(t) if t.is_infinite() && t > 0.0 => Ok(Thickness::SemiInfinite),
            Raw::Num(t) => Ok(Thickness::Finite(t)),
            Raw::Text(s) if s.trim().eq_ignore_ascii_case("inf") => Ok(Thickness::SemiInfinite),
            Raw::Text(s) => Err(serde::de::Error::custom(format!(
                "thickness must be a number or \"inf\", got {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub label: String,
    #[serde(rename = "thickness_nm")]
    pub thickness: Thickness,
    #[serde(flatten)]
    pub optics: OpticalConstants,
}

impl Layer {
    pub fn new(label: impl Into<String>, thickness: Thickness, optics: OpticalConstants) -> Self {
        Layer {
            label: label.into(),
            thickness,
            optics,
        }
    }
}

/// The thin film of resonant nuclei embedded in the core.
///
/// Λ_res is the primary quantity. ρ and σ_res are kept only as given, and ρ
/// is derived from Λ_res and σ_res when it was omitted.
#[derive(Debug, Clone, PartialEq)]
pub struct ResonantLayerSpec {
    /// Depth of the film center (nm).
    pub z0: f64,
    /// Film thickness (nm).
    pub d: f64,
    /// Transition energy (keV).
    pub energy_kev: f64,
    /// Natural linewidth ħγ (neV).
    pub linewidth_nev: f64,
    /// On-resonance attenuation length (nm).
    pub lambda_res: f64,
    pub rho_per_nm3: Option<f64>,
    pub sigma_res_nm2: Option<f64>,
    /// Off-resonant optics of the film itself; when present the film is part
    /// of the optical stack seen by the mode solver.
    pub optics: Option<OpticalConstants>,
}

impl ResonantLayerSpec {
    /// ⁵⁷Fe film with Λ_res = 47 nm and no off-resonant optics.
    pub fn fe57(z0: f64, d: f64) -> Result<Self> {
        let spec = ResonantLayerSpec {
            z0,
            d,
            energy_kev: units::FE57_ENERGY_KEV,
            linewidth_nev: units::FE57_LINEWIDTH_NEV,
            lambda_res: units::FE57_LAMBDA_RES_NM,
            rho_per_nm3: None,
            sigma_res_nm2: None,
            optics: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Decay rate γ in ns⁻¹.
    pub fn gamma(&self) -> f64 {
        units::decay_rate_per_ns(self.linewidth_nev)
    }

    /// Number density, as given or derived from Λ_res and σ_res.
    pub fn rho(&self) -> Option<f64> {
        self.rho_per_nm3
            .or_else(|| self.sigma_res_nm2.map(|s| 1.0 / (self.lambda_res * s)))
    }

    fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(
                    format!("resonant.{field}"),
                    format!("must be finite and > 0, got {v}"),
                ))
            }
        };
        positive("d_nm", self.d)?;
        positive("E0_keV", self.energy_kev)?;
        positive("gamma_neV", self.linewidth_nev)?;
        positive("Lambda_res_nm", self.lambda_res)?;
        if !self.z0.is_finite() {
            return Err(Error::validation("resonant.z0_nm", "must be finite"));
        }
        if let Some(r) = self.rho_per_nm3 {
            positive("rho_per_nm3", r)?;
        }
        if let Some(s) = self.sigma_res_nm2 {
            positive("sigma_res_nm2", s)?;
        }
        if let Some(oc) = &self.optics {
            oc.validate("resonant")?;
        }
        Ok(())
    }
}

/// Piece of the optical stack: a homogeneous slab or a half-space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slab {
    pub thickness: Option<f64>,
    pub chi: Complex64,
}

impl Slab {
    pub fn permittivity(&self) -> Complex64 {
        1.0 + self.chi
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
    resonant: Option<ResonantLayerSpec>,
    energy_kev: f64,
}

impl LayerStack {
    pub fn new(
        layers: Vec<Layer>,
        resonant: Option<ResonantLayerSpec>,
        energy_kev: f64,
    ) -> Result<Self> {
        let stack = LayerStack {
            layers,
            resonant,
            energy_kev,
        };
        stack.validate()?;
        Ok(stack)
    }

    fn validate(&self) -> Result<()> {
        if !(self.energy_kev.is_finite() && self.energy_kev > 0.0) {
            return Err(Error::validation("energy_keV", "must be finite and > 0"));
        }
        let n = self.layers.len();
        if n == 0 {
            return Err(Error::validation("layer", "the layer list is empty"));
        }
        if n < 2 {
            return Err(Error::validation(
                "layer",
                "need at least the two semi-infinite claddings",
            ));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let field = format!("layer[{i}]");
            layer.optics.validate(&field)?;
            let outer = i == 0 || i == n - 1;
            match (layer.thickness, outer) {
                (Thickness::SemiInfinite, true) => {}
                (Thickness::SemiInfinite, false) => {
                    return Err(Error::validation(
                        format!("{field}.thickness_nm"),
                        "only the outermost layers may be semi-infinite",
                    ))
                }
                (Thickness::Finite(_), true) => {
                    return Err(Error::validation(
                        format!("{field}.thickness_nm"),
                        "outermost layers must be semi-infinite",
                    ))
                }
                (Thickness::Finite(t), false) => {
                    if !(t.is_finite() && t > 0.0) {
                        return Err(Error::validation(
                            format!("{field}.thickness_nm"),
                            format!("must be finite and > 0, got {t}"),
                        ));
                    }
                }
            }
        }
        if let Some(res) = &self.resonant {
            res.validate()?;
            let (lo, hi) = self.core_bounds().ok_or_else(|| {
                Error::validation("resonant.z0_nm", "the stack has no finite core layer")
            })?;
            let half = 0.5 * res.d;
            if res.z0 - half < lo - 1e-9 || res.z0 + half > hi + 1e-9 {
                return Err(Error::validation(
                    "resonant.z0_nm",
                    format!(
                        "film [{}, {}] nm lies outside the core [{lo}, {hi}] nm",
                        res.z0 - half,
                        res.z0 + half
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn resonant(&self) -> Option<&ResonantLayerSpec> {
        self.resonant.as_ref()
    }

    pub fn energy_kev(&self) -> f64 {
        self.energy_kev
    }

    pub fn k0(&self) -> f64 {
        units::wavenumber_per_nm(self.energy_kev)
    }

    pub fn wavelength(&self) -> f64 {
        units::wavelength_nm(self.energy_kev)
    }

    /// Sum of all finite thicknesses (nm).
    pub fn total_thickness(&self) -> f64 {
        self.layers.iter().filter_map(|l| l.thickness.finite()).sum()
    }

    /// Depths of the interfaces, from z = 0 down to the substrate.
    pub fn interfaces(&self) -> Vec<f64> {
        let mut z = 0.0;
        let mut out = vec![0.0];
        for l in &self.layers {
            if let Some(t) = l.thickness.finite() {
                z += t;
                out.push(z);
            }
        }
        out
    }

    /// Index of the guiding core: the finite layer with the smallest δ.
    pub fn core_index(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, l) in self.layers.iter().enumerate() {
            if l.thickness.finite().is_none() {
                continue;
            }
            match best {
                Some(b) if self.layers[b].optics.delta <= l.optics.delta => {}
                _ => best = Some(i),
            }
        }
        best
    }

    /// Top and bottom depth of the core layer.
    pub fn core_bounds(&self) -> Option<(f64, f64)> {
        let core = self.core_index()?;
        let top: f64 = self.layers[..core]
            .iter()
            .filter_map(|l| l.thickness.finite())
            .sum();
        Some((top, top + self.layers[core].thickness.finite()?))
    }

    /// Index of the layer containing depth z (lower layer at an interface).
    pub fn layer_index_at(&self, z: f64) -> usize {
        if z < 0.0 {
            return 0;
        }
        let mut bottom = 0.0;
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            match l.thickness.finite() {
                Some(t) => {
                    bottom += t;
                    if z < bottom {
                        return i;
                    }
                }
                None => return i,
            }
        }
        self.layers.len() - 1
    }

    /// ε(z) of the configured layers. The resonant film is not included.
    pub fn permittivity_at(&self, z: f64) -> Complex64 {
        self.layers[self.layer_index_at(z)].optics.permittivity()
    }

    pub fn permittivity_profile(&self, z: &[f64]) -> Vec<Complex64> {
        z.iter().map(|&zi| self.permittivity_at(zi)).collect()
    }

    /// The optical stack as seen by the mode solver, top half-space first.
    /// A resonant film with off-resonant optics is spliced into the core.
    pub fn slabs(&self) -> Vec<Slab> {
        let mut out: Vec<Slab> = self
            .layers
            .iter()
            .map(|l| Slab {
                thickness: l.thickness.finite(),
                chi: l.optics.susceptibility(),
            })
            .collect();
        let (Some(res), Some(core)) = (&self.resonant, self.core_index()) else {
            return out;
        };
        let Some(oc) = res.optics else {
            return out;
        };
        let (top, bottom) = self.core_bounds().expect("core exists");
        let upper = (res.z0 - 0.5 * res.d - top).max(0.0);
        let lower = (bottom - res.z0 - 0.5 * res.d).max(0.0);
        let host = out[core].chi;
        let mut pieces = Vec::with_capacity(3);
        if upper > 0.0 {
            pieces.push(Slab {
                thickness: Some(upper),
                chi: host,
            });
        }
        pieces.push(Slab {
            thickness: Some(res.d),
            chi: oc.susceptibility(),
        });
        if lower > 0.0 {
            pieces.push(Slab {
                thickness: Some(lower),
                chi: host,
            });
        }
        out.splice(core..=core, pieces);
        out
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: StackConfig = toml::from_str(text).map_err(|e| Error::Parse {
            context: "stack config".into(),
            message: e.to_string(),
        })?;
        cfg.into_stack()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(&StackConfig::from_stack(self)).expect("stack config serializes")
    }
}

impl fmt::Display for LayerStack {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l.thickness {
                Thickness::Finite(t) => format!("{} {t} nm", l.label),
                Thickness::SemiInfinite => l.label.clone(),
            })
            .collect();
        write!(f, "{}", names.join(" / "))
    }
}

/// Read and validate a stack config file.
pub fn load_stack(path: impl AsRef<Path>) -> Result<LayerStack> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let cfg: StackConfig = toml::from_str(&text).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    cfg.into_stack()
}

pub fn permittivity_profile(stack: &LayerStack, z: &[f64]) -> Vec<Complex64> {
    stack.permittivity_profile(z)
}

// On-disk schema. Field names carry their units.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StackConfig {
    #[serde(rename = "energy_keV", default, skip_serializing_if = "Option::is_none")]
    energy_kev: Option<f64>,
    #[serde(rename = "layer", default)]
    layers: Vec<Layer>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resonant: Option<ResonantConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResonantConfig {
    z0_nm: f64,
    d_nm: f64,
    #[serde(rename = "E0_keV")]
    e0_kev: f64,
    #[serde(rename = "gamma_neV")]
    gamma_nev: f64,
    #[serde(rename = "Lambda_res_nm", default, skip_serializing_if = "Option::is_none")]
    lambda_res_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    rho_per_nm3: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sigma_res_nm2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    beta: Option<f64>,
}

impl StackConfig {
    fn into_stack(self) -> Result<LayerStack> {
        let resonant = self.resonant.map(ResonantConfig::into_spec).transpose()?;
        let energy = self
            .energy_kev
            .or(resonant.as_ref().map(|r| r.energy_kev))
            .ok_or_else(|| {
                Error::validation("energy_keV", "required when there is no resonant block")
            })?;
        LayerStack::new(self.layers, resonant, energy)
    }

    fn from_stack(stack: &LayerStack) -> Self {
        let resonant = stack.resonant.as_ref().map(|r| ResonantConfig {
            z0_nm: r.z0,
            d_nm: r.d,
            e0_kev: r.energy_kev,
            gamma_nev: r.linewidth_nev,
            lambda_res_nm: Some(r.lambda_res),
            rho_per_nm3: r.rho_per_nm3,
            sigma_res_nm2: r.sigma_res_nm2,
            delta: r.optics.map(|o| o.delta),
            beta: r.optics.map(|o| o.beta),
        });
        let energy = match &stack.resonant {
            Some(r) if r.energy_kev == stack.energy_kev => None,
            _ => Some(stack.energy_kev),
        };
        StackConfig {
            energy_kev: energy,
            layers: stack.layers.clone(),
            resonant,
        }
    }
}

impl ResonantConfig {
    fn into_spec(self) -> Result<ResonantLayerSpec> {
        let from_rho_sigma = match (self.rho_per_nm3, self.sigma_res_nm2) {
            (Some(r), Some(s)) => Some(1.0 / (r * s)),
            _ => None,
        };
        let lambda_res = match (self.lambda_res_nm, from_rho_sigma) {
            (Some(l), Some(derived)) => {
                if ((l - derived) / l).abs() > LAMBDA_CONSISTENCY {
                    return Err(Error::validation(
                        "resonant.Lambda_res_nm",
                        format!("{l} conflicts with 1/(rho*sigma_res) = {derived}"),
                    ));
                }
                l
            }
            (Some(l), None) => l,
            (None, Some(derived)) => derived,
            (None, None) => {
                return Err(Error::validation(
                    "resonant.Lambda_res_nm",
                    "give Lambda_res_nm or both rho_per_nm3 and sigma_res_nm2",
                ))
            }
        };
        let optics = match (self.delta, self.beta) {
            (None, None) => None,
            (Some(delta), Some(beta)) => Some(OpticalConstants { delta, beta }),
            (Some(_), None) => {
                return Err(Error::validation("resonant.beta", "delta given without beta"))
            }
            (None, Some(_)) => {
                return Err(Error::validation("resonant.delta", "beta given without delta"))
            }
        };
        let spec = ResonantLayerSpec {
            z0: self.z0_nm,
            d: self.d_nm,
            energy_kev: self.e0_kev,
            linewidth_nev: self.gamma_nev,
            lambda_res,
            rho_per_nm3: self.rho_per_nm3,
            sigma_res_nm2: self.sigma_res_nm2,
            optics,
        };
        spec.validate()?;
        Ok(spec)
    }
}
