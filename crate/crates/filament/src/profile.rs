//! Closed-form spatial profiles on `[0, L]`.
//!
//! Kernels carry a spatial weight `b(s)`, and history data is seeded from
//! analytic shapes; both are sums of a small set of terms (constant, linear,
//! and sine/cosine at multiples of `pi/L`). Keeping profiles closed-form lets
//! fields be sampled with exact values and slopes at any point, which the
//! Hermite discretization needs.

use serde::{Deserialize, Serialize};

/// One additive term of a [`SpaceFn`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpaceTerm {
    /// `amp`
    Const { amp: f64 },
    /// `amp * s`
    Linear { amp: f64 },
    /// `amp * sin(mult * pi * s / L)`
    Sin { amp: f64, mult: u32 },
    /// `amp * cos(mult * pi * s / L)`
    Cos { amp: f64, mult: u32 },
}

/// Sum of [`SpaceTerm`]s over a domain of length `length`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceFn {
    pub terms: Vec<SpaceTerm>,
    pub length: f64,
}

impl SpaceFn {
    pub fn new(terms: Vec<SpaceTerm>, length: f64) -> Self {
        Self { terms, length }
    }

    pub fn constant(c: f64, length: f64) -> Self {
        Self::new(vec![SpaceTerm::Const { amp: c }], length)
    }

    pub fn zero(length: f64) -> Self {
        Self::new(Vec::new(), length)
    }

    fn freq(&self, mult: u32) -> f64 {
        mult as f64 * std::f64::consts::PI / self.length
    }

    pub fn eval(&self, s: f64) -> f64 {
        let mut v = 0.0;
        for t in &self.terms {
            v += match *t {
                SpaceTerm::Const { amp } => amp,
                SpaceTerm::Linear { amp } => amp * s,
                SpaceTerm::Sin { amp, mult } => amp * (self.freq(mult) * s).sin(),
                SpaceTerm::Cos { amp, mult } => amp * (self.freq(mult) * s).cos(),
            };
        }
        v
    }

    pub fn deriv(&self, s: f64) -> f64 {
        let mut v = 0.0;
        for t in &self.terms {
            v += match *t {
                SpaceTerm::Const { .. } => 0.0,
                SpaceTerm::Linear { amp } => amp,
                SpaceTerm::Sin { amp, mult } => {
                    let q = self.freq(mult);
                    amp * q * (q * s).cos()
                }
                SpaceTerm::Cos { amp, mult } => {
                    let q = self.freq(mult);
                    -amp * q * (q * s).sin()
                }
            };
        }
        v
    }

    /// Minimum over a dense uniform sample; used by hypothesis checks.
    pub fn min_on_domain(&self, samples: usize) -> f64 {
        (0..=samples)
            .map(|i| self.eval(self.length * i as f64 / samples as f64))
            .fold(f64::INFINITY, f64::min)
    }
}
