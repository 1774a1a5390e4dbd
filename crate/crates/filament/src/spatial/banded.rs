//! Symmetric banded matrices and their Cholesky factorization.
//!
//! Every bilinear form on the cubic Hermite space couples only the four
//! degrees of freedom of neighboring nodes, so all system matrices are
//! symmetric with half-bandwidth 3. Storage is the lower band, column-major:
//! entry `(i, j)` with `0 <= i - j <= p` lives at `data[j * (p + 1) + (i - j)]`.

use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct SymBanded {
    pub n: usize,
    /// Half-bandwidth: number of sub-diagonals stored.
    pub p: usize,
    data: Vec<f64>,
}

impl SymBanded {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self { n, p, data: vec![0.0; n * (p + 1)] }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(i >= j && i - j <= self.p);
        j * (self.p + 1) + (i - j)
    }

    /// Entry `(i, j)`; callers may pass either triangle.
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.p {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to entry `(i, j)` of the lower triangle (`i >= j`).
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// `self + c * other`, entrywise; shapes must match.
    pub fn scaled_add(&self, c: f64, other: &SymBanded) -> SymBanded {
        assert_eq!(self.n, other.n);
        assert_eq!(self.p, other.p);
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + c * b)
            .collect();
        SymBanded { n: self.n, p: self.p, data }
    }

    /// Full symmetric matrix-vector product.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for j in 0..self.n {
            let diag = self.data[j * (self.p + 1)];
            y[j] += diag * x[j];
            let imax = (j + self.p).min(self.n - 1);
            for i in (j + 1)..=imax {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
        }
        y
    }

    /// `x^T A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.matvec(x).iter().zip(x.iter()).map(|(a, b)| a * b).sum()
    }

    /// Bilinear form `x^T A y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        self.matvec(y).iter().zip(x.iter()).map(|(a, b)| a * b).sum()
    }

    /// Banded Cholesky `A = L L^T`; fails on non-positive pivots, which is how
    /// loss of positive definiteness surfaces.
    pub fn cholesky(&self) -> Result<SymBandedChol> {
        let p = self.p;
        let n = self.n;
        let mut l = self.data.clone();
        let at = |l: &Vec<f64>, i: usize, j: usize| l[j * (p + 1) + (i - j)];
        for j in 0..n {
            let kmin = j.saturating_sub(p);
            let mut d = at(&l, j, j);
            for k in kmin..j {
                if j - k <= p {
                    let v = at(&l, j, k);
                    d -= v * v;
                }
            }
            if d <= 0.0 {
                return Err(Error::LinearSolve(format!(
                    "Cholesky pivot {d:.3e} <= 0 at row {j}: matrix not positive definite"
                )));
            }
            let dj = d.sqrt();
            l[j * (p + 1)] = dj;
            let imax = (j + p).min(n - 1);
            for i in (j + 1)..=imax {
                let kmin = i.saturating_sub(p).max(kmin);
                let mut s = at(&l, i, j);
                for k in kmin..j {
                    s -= at(&l, i, k) * at(&l, j, k);
                }
                l[j * (p + 1) + (i - j)] = s / dj;
            }
        }
        Ok(SymBandedChol { n, p, l })
    }
}

/// Cholesky factor of a [`SymBanded`] matrix.
#[derive(Debug, Clone)]
pub struct SymBandedChol {
    n: usize,
    p: usize,
    l: Vec<f64>,
}

impl SymBandedChol {
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n);
        let (n, p) = (self.n, self.p);
        let at = |i: usize, j: usize| self.l[j * (p + 1) + (i - j)];
        let mut x = b.to_vec();
        // forward: L y = b
        for j in 0..n {
            x[j] /= at(j, j);
            let imax = (j + p).min(n - 1);
            for i in (j + 1)..=imax {
                x[i] -= at(i, j) * x[j];
            }
        }
        // backward: L^T x = y
        for j in (0..n).rev() {
            let imax = (j + p).min(n - 1);
            for i in (j + 1)..=imax {
                x[j] -= at(i, j) * x[i];
            }
            x[j] /= at(j, j);
        }
        x
    }
}
