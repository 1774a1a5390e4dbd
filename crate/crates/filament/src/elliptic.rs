//! Complete elliptic integrals and Jacobi elliptic functions.
//!
//! `K(k)` comes from the arithmetic-geometric mean, `sn` from the descending
//! Landen transformation (modulus shrinks quadratically per level, so a
//! handful of levels reach machine precision). On top of these sits the half
//! period map `a -> P_a` of the oscillatory steady profiles: a profile of
//! amplitude `a` changes sign every
//!
//! `P_a = 2 K(k_a) / chi_a`, `k_a = a / sqrt(2 - a^2)`, `chi_a = sqrt(2 (2 - a^2))`,
//!
//! an increasing map of `(0, 1)` onto `(pi/2, P_cap)`; `P_cap` is set by how
//! close to 1 the amplitude can get in f64 (about 20.6 with `a <= 1 - 1e-12`).

use crate::{Error, Result};

/// Largest amplitude the elliptic machinery evaluates; beyond this the
/// complementary modulus underflows the precision of `K`.
pub const AMPLITUDE_CAP: f64 = 1.0 - 1e-12;

/// Complete elliptic integral of the first kind, `K(k)`, for `0 <= k < 1`.
pub fn agm_k(k: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&k) {
        return Err(Error::Domain(format!(
            "agm_k requires modulus in [0, 1), got {k}"
        )));
    }
    let mut a = 1.0_f64;
    let mut b = (1.0 - k * k).sqrt();
    for _ in 0..64 {
        if (a - b).abs() <= 1e-17 * a {
            break;
        }
        let an = 0.5 * (a + b);
        b = (a * b).sqrt();
        a = an;
    }
    Ok(std::f64::consts::PI / (2.0 * a))
}

/// Jacobi `sn(u, k)` for `0 <= k < 1`.
pub fn jacobi_sn(u: f64, k: f64) -> Result<f64> {
    jacobi_sn_cn_dn(u, k).map(|(s, _, _)| s)
}

/// Jacobi `(sn, cn, dn)(u, k)` for `0 <= k < 1`.
///
/// The argument is reduced modulo the full period `4K` before the Landen
/// descent, so periodicity holds to rounding for arbitrarily large `u`.
pub fn jacobi_sn_cn_dn(u: f64, k: f64) -> Result<(f64, f64, f64)> {
    if !(0.0..1.0).contains(&k) {
        return Err(Error::Domain(format!(
            "jacobi_sn requires modulus in [0, 1), got {k}"
        )));
    }
    let kk = agm_k(k)?;
    // Reduce to [0, 4K), then to [0, 2K) via sn(u + 2K) = -sn(u),
    // cn(u + 2K) = -cn(u), dn(u + 2K) = dn(u).
    let period = 4.0 * kk;
    let mut v = u.rem_euclid(period);
    let mut flip = 1.0;
    if v >= 2.0 * kk {
        v -= 2.0 * kk;
        flip = -1.0;
    }

    // Descending Landen: k_{n+1} = (1 - k'_n) / (1 + k'_n), u_{n+1} = u_n / (1 + k_{n+1}).
    let mut moduli = Vec::with_capacity(8);
    let mut kn = k;
    while kn > 1e-15 {
        let kp = (1.0 - kn * kn).sqrt();
        let knext = (1.0 - kp) / (1.0 + kp);
        moduli.push(knext);
        v /= 1.0 + knext;
        kn = knext;
        if moduli.len() >= 16 {
            break;
        }
    }

    // Base level: sn = sin, with derivative cos; unwind
    // sn(u, k_n) = (1 + k_{n+1}) t / (1 + k_{n+1} t^2), t = sn(u / (1 + k_{n+1}), k_{n+1}),
    // propagating d(sn)/du alongside to keep the sign of cn dn. The argument
    // rescaling 1/(1 + k_{n+1}) cancels the map's outer factor in the chain
    // rule, leaving d(sn)/du = t' (1 - k_{n+1} t^2) / (1 + k_{n+1} t^2)^2.
    let mut s = v.sin();
    let mut ds = v.cos();
    for &kn1 in moduli.iter().rev() {
        let denom = 1.0 + kn1 * s * s;
        let s_up = (1.0 + kn1) * s / denom;
        ds = ds * (1.0 - kn1 * s * s) / (denom * denom);
        s = s_up;
    }

    let sn = flip * s;
    let dn = (1.0 - k * k * sn * sn).max(0.0).sqrt();
    // sn' = cn dn and dn > 0 for k < 1, so cn inherits the sign of sn'.
    let cn = if dn > 0.0 { flip * ds / dn } else { 0.0 };
    Ok((sn, cn, dn))
}

/// The half-period map of an oscillatory steady profile of amplitude `a`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HalfPeriodQuery {
    /// Amplitude `a` in `(0, 1)`.
    pub a: f64,
    /// Elliptic modulus `k_a = a / sqrt(2 - a^2)`.
    pub modulus: f64,
    /// Wave number `chi_a = sqrt(2 (2 - a^2))`.
    pub chi: f64,
    /// Distance between consecutive sign changes, `2 K(k_a) / chi_a`.
    pub value: f64,
}

/// Evaluate the half-period map at amplitude `a` in `(0, 1)`.
pub fn half_period(a: f64) -> Result<HalfPeriodQuery> {
    if !(a > 0.0 && a < 1.0) {
        return Err(Error::Domain(format!(
            "half_period requires amplitude in (0, 1), got {a}"
        )));
    }
    let a = a.min(AMPLITUDE_CAP);
    let modulus = a / (2.0 - a * a).sqrt();
    let chi = (2.0 * (2.0 - a * a)).sqrt();
    let value = 2.0 * agm_k(modulus)? / chi;
    Ok(HalfPeriodQuery { a, modulus, chi, value })
}

/// Invert the half-period map: find `a` with `P_a = target` to 1e-12.
///
/// The map increases from `pi/2` (as `a -> 0`) without bound, so targets at or
/// below `pi/2` have no solution; targets beyond the f64-representable range
/// (amplitude above [`AMPLITUDE_CAP`]) report a precision loss.
pub fn invert_half_period(target: f64) -> Result<f64> {
    let floor = std::f64::consts::FRAC_PI_2;
    if target <= floor {
        return Err(Error::NoSolution(format!(
            "half-period targets must exceed pi/2 = {floor:.12}, got {target}"
        )));
    }
    let mut lo = 1e-12_f64;
    let mut hi = AMPLITUDE_CAP;
    let cap_value = half_period(hi)?.value;
    if target > cap_value {
        return Err(Error::PrecisionLoss(format!(
            "half-period {target} exceeds the f64-representable maximum {cap_value:.6} \
             (amplitude cap {AMPLITUDE_CAP})"
        )));
    }
    if half_period(lo)?.value > target {
        // target is in (pi/2, P(1e-12)): the bracket floor already overshoots,
        // but P(1e-12) - pi/2 is far below 1e-12, so lo is the answer.
        return Ok(lo);
    }
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let v = half_period(mid)?.value;
        if (v - target).abs() < 1e-12 {
            return Ok(mid);
        }
        if v < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < f64::EPSILON * mid {
            break;
        }
    }
    // The bracket is down to machine spacing; `mid` is the best f64 can
    // represent. Near the amplitude cap the map is so steep that one ulp of
    // amplitude moves the half-period by far more than 1e-12, so judge the
    // leftover residual relative to the target instead.
    let residual = (half_period(mid)?.value - target).abs();
    if residual < 1e-8 * target.max(1.0) {
        Ok(mid)
    } else {
        Err(Error::PrecisionLoss(format!(
            "half-period inversion stalled at residual {residual:.3e} for target {target} \
             (map too steep near the amplitude cap)"
        )))
    }
}
