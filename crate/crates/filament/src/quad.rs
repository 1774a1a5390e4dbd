//! Quadrature rules shared across the crate.
//!
//! Spatial integrals use a fixed 5-point Gauss-Legendre rule per grid cell.
//! Age integrals use composite Gauss panels, geometrically refined toward
//! `a = 0` where the kernels vary fastest; panel width doubles away from the
//! origin, so power-law tails out to very large `a_max` cost only
//! logarithmically many panels.

/// 5-point Gauss-Legendre nodes on [-1, 1].
pub const GAUSS5_X: [f64; 5] = [
    -0.906179845938664,
    -0.5384693101056831,
    0.0,
    0.5384693101056831,
    0.906179845938664,
];

/// Weights paired with [`GAUSS5_X`]; they sum to 2.
pub const GAUSS5_W: [f64; 5] = [
    0.23692688505618909,
    0.47862867049936647,
    0.5688888888888889,
    0.47862867049936647,
    0.23692688505618909,
];

/// 4-point Gauss-Legendre nodes on [-1, 1].
pub const GAUSS4_X: [f64; 4] = [
    -0.8611363115940526,
    -0.3399810435848563,
    0.3399810435848563,
    0.8611363115940526,
];

/// Weights paired with [`GAUSS4_X`].
pub const GAUSS4_W: [f64; 4] = [
    0.34785484513745385,
    0.6521451548625461,
    0.6521451548625461,
    0.34785484513745385,
];

/// 8-point Gauss-Legendre nodes on [-1, 1].
pub const GAUSS8_X: [f64; 8] = [
    -0.9602898564975363,
    -0.7966664774136267,
    -0.525532409916329,
    -0.18343464249564978,
    0.18343464249564978,
    0.525532409916329,
    0.7966664774136267,
    0.9602898564975363,
];

/// Weights paired with [`GAUSS8_X`].
pub const GAUSS8_W: [f64; 8] = [
    0.10122853629037626,
    0.22238103445337448,
    0.31370664587788727,
    0.362683783378362,
    0.362683783378362,
    0.31370664587788727,
    0.22238103445337448,
    0.10122853629037626,
];

/// Integrate `f` over `[lo, hi]` with a single 8-point Gauss panel.
pub fn gauss8<F: FnMut(f64) -> f64>(lo: f64, hi: f64, mut f: F) -> f64 {
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut acc = 0.0;
    for (x, w) in GAUSS8_X.iter().zip(GAUSS8_W.iter()) {
        acc += w * f(mid + half * x);
    }
    acc * half
}

/// Panel decomposition of an age interval `[0, a_max]`, geometrically refined
/// near zero: breakpoints `a_max * 2^-j` down to `a_min`, then `[0, a_min]`.
#[derive(Debug, Clone)]
pub struct AgePanels {
    pub breaks: Vec<f64>,
}

impl AgePanels {
    pub fn new(a_max: f64) -> Self {
        Self::with_floor(a_max, (a_max * 1e-4).min(1e-3))
    }

    /// `a_min` is the width of the innermost panel touching zero. Each
    /// doubling panel is split in four so that 8-point Gauss resolves even
    /// rapidly decaying integrands to near machine precision.
    pub fn with_floor(a_max: f64, a_min: f64) -> Self {
        assert!(a_max > 0.0 && a_min > 0.0 && a_min < a_max);
        let mut coarse = vec![a_max];
        let mut b = a_max;
        while b * 0.5 > a_min {
            b *= 0.5;
            coarse.push(b);
        }
        coarse.push(0.0);
        coarse.reverse();
        let mut breaks = vec![0.0];
        for w in coarse.windows(2) {
            for q in 1..=4 {
                breaks.push(w[0] + (w[1] - w[0]) * q as f64 / 4.0);
            }
        }
        Self { breaks }
    }

    /// Restrict to `[lo, hi] ∩ [0, a_max]`; returns panel endpoints covering
    /// that range (splitting the boundary panels).
    pub fn clipped(&self, lo: f64, hi: f64) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for w in self.breaks.windows(2) {
            let (a, b) = (w[0].max(lo), w[1].min(hi));
            if b > a {
                out.push((a, b));
            }
        }
        out
    }

    /// Integrate `f(a)` over `[0, a_max]` with 8-point Gauss per panel.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F) -> f64 {
        let mut acc = 0.0;
        for w in self.breaks.windows(2) {
            acc += gauss8(w[0], w[1], &mut f);
        }
        acc
    }

    /// Integrate `f(a)` over `[lo, hi]` (clipped to the panel range).
    pub fn integrate_range<F: FnMut(f64) -> f64>(&self, lo: f64, hi: f64, mut f: F) -> f64 {
        let mut acc = 0.0;
        for (a, b) in self.clipped(lo, hi) {
            acc += gauss8(a, b, &mut f);
        }
        acc
    }

    /// All quadrature nodes and weights, flattened across panels.
    pub fn nodes(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(8 * (self.breaks.len() - 1));
        for w in self.breaks.windows(2) {
            let mid = 0.5 * (w[0] + w[1]);
            let half = 0.5 * (w[1] - w[0]);
            for (x, gw) in GAUSS8_X.iter().zip(GAUSS8_W.iter()) {
                out.push((mid + half * x, gw * half));
            }
        }
        out
    }
}

/// Least-squares line fit of `y` against `x`; returns `(slope, intercept,
/// rms_residual)`. Used by the log-log scaling studies.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    assert!(x.len() >= 2);
    let n = x.len() as f64;
    let xm = x.iter().sum::<f64>() / n;
    let ym = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (xi, yi) in x.iter().zip(y.iter()) {
        sxx += (xi - xm) * (xi - xm);
        sxy += (xi - xm) * (yi - ym);
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let mut ss = 0.0;
    for (xi, yi) in x.iter().zip(y.iter()) {
        let r = yi - (intercept + slope * xi);
        ss += r * r;
    }
    (slope, intercept, (ss / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss5_weights_sum_to_two() {
        let s: f64 = GAUSS5_W.iter().sum();
        assert!((s - 2.0).abs() < 1e-15);
    }

    #[test]
    fn age_panels_integrate_exponential() {
        let p = AgePanels::new(30.0);
        let v = p.integrate(|a| (-a).exp());
        assert!((v - (1.0 - (-30.0f64).exp())).abs() < 1e-13);
    }

    #[test]
    fn age_panels_integrate_power_tail() {
        // int_0^inf (1+a)^-3 da = 1/2; a_max huge, geometric panels stay cheap.
        let p = AgePanels::new(1e12);
        let v = p.integrate(|a| (1.0 + a).powi(-3));
        assert!((v - 0.5).abs() < 1e-12, "v = {v}");
    }

    #[test]
    fn clipped_range_integration() {
        let p = AgePanels::new(10.0);
        let v = p.integrate_range(1.0, 2.0, |a| a);
        assert!((v - 1.5).abs() < 1e-13);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [1.0, 3.0, 5.0, 7.0];
        let (s, b, r) = line_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-14 && (b - 1.0).abs() < 1e-14 && r < 1e-14);
    }
}
