//! Bessel functions of complex argument.
//!
//! Couplings of leaky modes are complex, so the Bessel arguments of the
//! front-coupling solution are complex too. Power series below |z| = 12.5,
//! Hankel asymptotic expansion above.

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64;

const SERIES_LIMIT: f64 = 12.5;

/// Bessel function of the first kind, order 0.
pub fn j0(z: Complex64) -> Complex64 {
    if z.norm() < SERIES_LIMIT {
        j0_sqrt_series(0.25 * z * z)
    } else {
        let z = if z.re < 0.0 { -z } else { z };
        hankel(0, z)
    }
}

/// Bessel function of the first kind, order 1.
pub fn j1(z: Complex64) -> Complex64 {
    if z.norm() < SERIES_LIMIT {
        0.5 * z * j1_ratio_series(0.25 * z * z)
    } else if z.re < 0.0 {
        -hankel(1, -z)
    } else {
        hankel(1, z)
    }
}

/// J₀(2√w). Entire in w, so no branch choice is involved.
pub fn j0_of_sqrt(w: Complex64) -> Complex64 {
    if w.norm() < 0.25 * SERIES_LIMIT * SERIES_LIMIT {
        j0_sqrt_series(w)
    } else {
        j0(2.0 * w.sqrt())
    }
}

/// J₁(2√w)/√w, equal to 2J₁(u)/u at u = 2√w. Entire in w; 1 at w = 0.
pub fn j1_ratio_of_sqrt(w: Complex64) -> Complex64 {
    if w.norm() < 0.25 * SERIES_LIMIT * SERIES_LIMIT {
        j1_ratio_series(w)
    } else {
        let s = w.sqrt();
        j1(2.0 * s) / s
    }
}

/// Σ (−w)^k / (k!)²
fn j0_sqrt_series(w: Complex64) -> Complex64 {
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    for k in 1..200 {
        let kf = k as f64;
        term *= -w / (kf * kf);
        sum += term;
        if term.norm() < 1e-17 * sum.norm().max(1e-300) && kf * kf > w.norm() {
            break;
        }
    }
    sum
}

/// Σ (−w)^k / (k!(k+1)!)
fn j1_ratio_series(w: Complex64) -> Complex64 {
    let mut term = Complex64::new(1.0, 0.0);
    let mut sum = term;
    for k in 1..200 {
        let kf = k as f64;
        term *= -w / (kf * (kf + 1.0));
        sum += term;
        if term.norm() < 1e-17 * sum.norm().max(1e-300) && kf * kf > w.norm() {
            break;
        }
    }
    sum
}

/// Hankel expansion for Re z ≥ 0, |z| large.
fn hankel(n: u32, z: Complex64) -> Complex64 {
    let mu = 4.0 * (n * n) as f64;
    let mut p = Complex64::new(1.0, 0.0);
    let mut q = Complex64::new(0.0, 0.0);
    let mut term = Complex64::new(1.0, 0.0);
    let mut prev = f64::INFINITY;
    for k in 1..60 {
        let odd = (2 * k - 1) as f64;
        term *= (mu - odd * odd) / (k as f64 * 8.0 * z);
        let mag = term.norm();
        if mag > prev {
            break;
        }
        prev = mag;
        if k % 2 == 1 {
            q += if (k / 2) % 2 == 0 { term } else { -term };
        } else {
            p += if (k / 2) % 2 == 1 { -term } else { term };
        }
        if mag < 1e-17 {
            break;
        }
    }
    let chi = z - (n as f64 * 0.5 * PI + FRAC_PI_4);
    (2.0 / (PI * z)).sqrt() * (p * chi.cos() - q * chi.sin())
}
