//! Uniform grid and H2-conforming cubic Hermite fields.
//!
//! Each node carries a value and a slope degree of freedom, interleaved as
//! `[v_0, d_0, v_1, d_1, ...]`; a cell's cubic is determined by its two end
//! nodes. All integrals use the fixed 5-point Gauss rule per cell, so "a
//! function on the grid" is represented by its values at those Gauss points
//! ([`GaussData`]).

use crate::quad::{GAUSS5_W, GAUSS5_X};
use crate::{profile::SpaceFn, Error, Result};

pub const GPC: usize = 5; // Gauss points per cell

/// Precomputed Hermite shape values at the reference Gauss points.
/// `val[g][l]`, `d1[g][l]`, `d2[g][l]` for local basis `l` in 0..4, already
/// scaled to physical derivatives for cell width `h`.
#[derive(Debug, Clone)]
struct ShapeTable {
    val: [[f64; 4]; GPC],
    d1: [[f64; 4]; GPC],
    d2: [[f64; 4]; GPC],
}

fn shape_values(xi: f64, h: f64) -> [f64; 4] {
    [
        2.0 * xi * xi * xi - 3.0 * xi * xi + 1.0,
        h * (xi * xi * xi - 2.0 * xi * xi + xi),
        -2.0 * xi * xi * xi + 3.0 * xi * xi,
        h * (xi * xi * xi - xi * xi),
    ]
}

fn shape_d1(xi: f64, h: f64) -> [f64; 4] {
    [
        (6.0 * xi * xi - 6.0 * xi) / h,
        3.0 * xi * xi - 4.0 * xi + 1.0,
        (-6.0 * xi * xi + 6.0 * xi) / h,
        3.0 * xi * xi - 2.0 * xi,
    ]
}

fn shape_d2(xi: f64, h: f64) -> [f64; 4] {
    [
        (12.0 * xi - 6.0) / (h * h),
        (6.0 * xi - 4.0) / h,
        (-12.0 * xi + 6.0) / (h * h),
        (6.0 * xi - 2.0) / h,
    ]
}

/// Uniform grid on `[0, L]`.
#[derive(Debug, Clone)]
pub struct Grid {
    pub length: f64,
    pub n_cells: usize,
    pub h: f64,
    shapes: ShapeTable,
    gauss_s: Vec<f64>,
    /// Physical quadrature weight shared by every Gauss point of every cell.
    gauss_w: [f64; GPC],
}

impl Grid {
    pub fn new(length: f64, n_cells: usize) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::Discretization(format!(
                "grid length must be positive and finite, got {length}"
            )));
        }
        if n_cells < 4 {
            return Err(Error::Discretization(format!(
                "need at least 4 cells to resolve the boundary conditions, got {n_cells}"
            )));
        }
        let h = length / n_cells as f64;
        let mut val = [[0.0; 4]; GPC];
        let mut d1 = [[0.0; 4]; GPC];
        let mut d2 = [[0.0; 4]; GPC];
        let mut gauss_w = [0.0; GPC];
        for g in 0..GPC {
            let xi = 0.5 * (1.0 + GAUSS5_X[g]);
            val[g] = shape_values(xi, h);
            d1[g] = shape_d1(xi, h);
            d2[g] = shape_d2(xi, h);
            gauss_w[g] = 0.5 * h * GAUSS5_W[g];
        }
        let mut gauss_s = Vec::with_capacity(n_cells * GPC);
        for c in 0..n_cells {
            let left = c as f64 * h;
            for g in 0..GPC {
                gauss_s.push(left + 0.5 * h * (1.0 + GAUSS5_X[g]));
            }
        }
        Ok(Self { length, n_cells, h, shapes: ShapeTable { val, d1, d2 }, gauss_s, gauss_w })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_cells + 1
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.n_nodes()
    }

    pub fn node_s(&self, i: usize) -> f64 {
        i as f64 * self.h
    }

    /// All Gauss points, cell by cell.
    pub fn gauss_points(&self) -> &[f64] {
        &self.gauss_s
    }

    /// Hermite shape values at reference Gauss point `g`, physical scaling.
    pub(crate) fn shape_val(&self, g: usize) -> [f64; 4] {
        self.shapes.val[g]
    }

    pub(crate) fn shape_d1(&self, g: usize) -> [f64; 4] {
        self.shapes.d1[g]
    }

    pub(crate) fn shape_d2(&self, g: usize) -> [f64; 4] {
        self.shapes.d2[g]
    }

    /// Quadrature weight of any Gauss point with local index `g`.
    pub fn gauss_weight(&self, g: usize) -> f64 {
        self.gauss_w[g]
    }

    /// Integrate Gauss-point data over the interval.
    pub fn integrate(&self, data: &GaussData) -> f64 {
        let mut acc = 0.0;
        for (k, v) in data.vals.iter().enumerate() {
            acc += self.gauss_w[k % GPC] * v;
        }
        acc
    }

    /// L2 inner product of two Gauss-point data sets.
    pub fn inner(&self, a: &GaussData, b: &GaussData) -> f64 {
        let mut acc = 0.0;
        for (k, (x, y)) in a.vals.iter().zip(b.vals.iter()).enumerate() {
            acc += self.gauss_w[k % GPC] * x * y;
        }
        acc
    }

    /// Sample a scalar function at every Gauss point.
    pub fn gauss_from_fn(&self, mut f: impl FnMut(f64) -> f64) -> GaussData {
        GaussData { vals: self.gauss_s.iter().map(|&s| f(s)).collect() }
    }
}

/// Values at every Gauss point of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussData {
    pub vals: Vec<f64>,
}

impl GaussData {
    pub fn zeros(grid: &Grid) -> Self {
        Self { vals: vec![0.0; grid.n_cells * GPC] }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { vals: self.vals.iter().map(|&v| f(v)).collect() }
    }

    pub fn axpy(&mut self, c: f64, other: &GaussData) {
        for (a, b) in self.vals.iter_mut().zip(other.vals.iter()) {
            *a += c * b;
        }
    }

    /// Pointwise product.
    pub fn hadamard(&self, other: &GaussData) -> GaussData {
        GaussData {
            vals: self.vals.iter().zip(other.vals.iter()).map(|(a, b)| a * b).collect(),
        }
    }
}

/// A cubic Hermite field: interleaved value/slope degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldState {
    pub dofs: Vec<f64>,
}

impl FieldState {
    pub fn zeros(grid: &Grid) -> Self {
        Self { dofs: vec![0.0; grid.n_dofs()] }
    }

    /// Interpolate from closed-form value and slope functions.
    pub fn interpolate(
        grid: &Grid,
        mut f: impl FnMut(f64) -> f64,
        mut df: impl FnMut(f64) -> f64,
    ) -> Self {
        let mut dofs = Vec::with_capacity(grid.n_dofs());
        for i in 0..grid.n_nodes() {
            let s = grid.node_s(i);
            dofs.push(f(s));
            dofs.push(df(s));
        }
        Self { dofs }
    }

    pub fn from_space_fn(grid: &Grid, sf: &SpaceFn) -> Self {
        Self::interpolate(grid, |s| sf.eval(s), |s| sf.deriv(s))
    }

    pub fn value(&self, node: usize) -> f64 {
        self.dofs[2 * node]
    }

    pub fn slope(&self, node: usize) -> f64 {
        self.dofs[2 * node + 1]
    }

    /// Second derivative at a node, averaging the two adjacent cell limits in
    /// the interior (the cubic's curvature is discontinuous across nodes).
    pub fn second_at_node(&self, grid: &Grid, node: usize) -> f64 {
        let from_cell = |c: usize, xi: f64| {
            let sh = shape_d2(xi, grid.h);
            let b = 2 * c;
            sh[0] * self.dofs[b]
                + sh[1] * self.dofs[b + 1]
                + sh[2] * self.dofs[b + 2]
                + sh[3] * self.dofs[b + 3]
        };
        if node == 0 {
            from_cell(0, 0.0)
        } else if node == grid.n_nodes() - 1 {
            from_cell(grid.n_cells - 1, 1.0)
        } else {
            0.5 * (from_cell(node, 0.0) + from_cell(node - 1, 1.0))
        }
    }

    fn eval_table(&self, grid: &Grid, table: &[[f64; 4]; GPC]) -> GaussData {
        let mut vals = Vec::with_capacity(grid.n_cells * GPC);
        for c in 0..grid.n_cells {
            let b = 2 * c;
            let d = [self.dofs[b], self.dofs[b + 1], self.dofs[b + 2], self.dofs[b + 3]];
            for row in table.iter().take(GPC) {
                vals.push(row[0] * d[0] + row[1] * d[1] + row[2] * d[2] + row[3] * d[3]);
            }
        }
        GaussData { vals }
    }

    /// Field values at all Gauss points.
    pub fn values_at_gauss(&self, grid: &Grid) -> GaussData {
        self.eval_table(grid, &grid.shapes.val)
    }

    /// First derivative at all Gauss points.
    pub fn slopes_at_gauss(&self, grid: &Grid) -> GaussData {
        self.eval_table(grid, &grid.shapes.d1)
    }

    /// Second derivative at all Gauss points.
    pub fn second_at_gauss(&self, grid: &Grid) -> GaussData {
        self.eval_table(grid, &grid.shapes.d2)
    }

    /// Evaluate the field at an arbitrary point.
    pub fn eval(&self, grid: &Grid, s: f64) -> f64 {
        let (c, xi) = locate(grid, s);
        let sh = shape_values(xi, grid.h);
        let b = 2 * c;
        sh[0] * self.dofs[b] + sh[1] * self.dofs[b + 1] + sh[2] * self.dofs[b + 2]
            + sh[3] * self.dofs[b + 3]
    }

    /// Evaluate the derivative at an arbitrary point.
    pub fn eval_deriv(&self, grid: &Grid, s: f64) -> f64 {
        let (c, xi) = locate(grid, s);
        let sh = shape_d1(xi, grid.h);
        let b = 2 * c;
        sh[0] * self.dofs[b] + sh[1] * self.dofs[b + 1] + sh[2] * self.dofs[b + 2]
            + sh[3] * self.dofs[b + 3]
    }

    pub fn scale(&mut self, c: f64) {
        for d in self.dofs.iter_mut() {
            *d *= c;
        }
    }

    pub fn axpy(&mut self, c: f64, other: &FieldState) {
        for (a, b) in self.dofs.iter_mut().zip(other.dofs.iter()) {
            *a += c * b;
        }
    }

    pub fn sub(&self, other: &FieldState) -> FieldState {
        FieldState {
            dofs: self.dofs.iter().zip(other.dofs.iter()).map(|(a, b)| a - b).collect(),
        }
    }
}

fn locate(grid: &Grid, s: f64) -> (usize, f64) {
    let c = ((s / grid.h).floor() as isize).clamp(0, grid.n_cells as isize - 1) as usize;
    let xi = ((s - c as f64 * grid.h) / grid.h).clamp(0.0, 1.0);
    (c, xi)
}

/// Norms of a field, all computed with the cell Gauss rule (sup norms also
/// sample the nodes).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldNorms {
    pub l2: f64,
    pub h1_semi: f64,
    pub h2_semi: f64,
    pub linf: f64,
    pub w1inf: f64,
}

impl FieldNorms {
    /// Full H2 norm `sqrt(l2^2 + |.|_{H1}^2 + |.|_{H2}^2)`.
    pub fn h2(&self) -> f64 {
        (self.l2 * self.l2 + self.h1_semi * self.h1_semi + self.h2_semi * self.h2_semi).sqrt()
    }
}

pub fn norms(grid: &Grid, z: &FieldState) -> FieldNorms {
    let v = z.values_at_gauss(grid);
    let d1 = z.slopes_at_gauss(grid);
    let d2 = z.second_at_gauss(grid);
    let l2 = grid.inner(&v, &v).max(0.0).sqrt();
    let h1 = grid.inner(&d1, &d1).max(0.0).sqrt();
    let h2 = grid.inner(&d2, &d2).max(0.0).sqrt();
    let mut linf = 0.0_f64;
    let mut w1inf = 0.0_f64;
    for x in v.vals.iter() {
        linf = linf.max(x.abs());
    }
    for x in d1.vals.iter() {
        w1inf = w1inf.max(x.abs());
    }
    for i in 0..grid.n_nodes() {
        linf = linf.max(z.value(i).abs());
        w1inf = w1inf.max(z.slope(i).abs());
    }
    FieldNorms { l2, h1_semi: h1, h2_semi: h2, linf, w1inf }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(Grid::new(0.0, 10).is_err());
        assert!(Grid::new(1.0, 3).is_err());
    }

    #[test]
    fn hermite_reproduces_cubics_exactly() {
        let grid = Grid::new(2.0, 5).unwrap();
        let f = |s: f64| 0.3 * s * s * s - s * s + 2.0 * s - 0.5;
        let df = |s: f64| 0.9 * s * s - 2.0 * s + 2.0;
        let z = FieldState::interpolate(&grid, f, df);
        for &s in &[0.0, 0.33, 1.0, 1.77, 2.0] {
            assert!((z.eval(&grid, s) - f(s)).abs() < 1e-13);
            assert!((z.eval_deriv(&grid, s) - df(s)).abs() < 1e-13);
        }
        let sec = z.second_at_node(&grid, 2);
        assert!((sec - (1.8 * 0.8 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn norms_of_simple_fields() {
        let grid = Grid::new(1.0, 64).unwrap();
        let one = FieldState::interpolate(&grid, |_| 1.0, |_| 0.0);
        let n = norms(&grid, &one);
        assert!((n.l2 - 1.0).abs() < 1e-14 && n.h1_semi < 1e-14 && (n.linf - 1.0).abs() < 1e-14);

        // slope recovery at Gauss points cancels terms of size s/h, so the
        // achievable accuracy is a few ulps of that magnitude
        let lin = FieldState::interpolate(&grid, |s| s, |_| 1.0);
        let n = norms(&grid, &lin);
        assert!((n.l2 - (1.0f64 / 3.0).sqrt()).abs() < 1e-13);
        assert!((n.h1_semi - 1.0).abs() < 1e-13);
        assert!((n.w1inf - 1.0).abs() < 1e-13);

        // sin(pi s) on [0,1]: ||.||_2 = 1/sqrt(2); the interpolant carries
        // O(h^4) value and O(h^3) slope errors scaled by pi^4
        let q = std::f64::consts::PI;
        let sin = FieldState::interpolate(&grid, |s| (q * s).sin(), |s| q * (q * s).cos());
        let n = norms(&grid, &sin);
        assert!((n.l2 - 0.5f64.sqrt()).abs() < 1e-7);
        assert!((n.h1_semi - q * 0.5f64.sqrt()).abs() < 1e-4);
    }

    #[test]
    fn gauss_integration_is_exact_for_high_degree() {
        let grid = Grid::new(1.0, 4).unwrap();
        // s^9 integrates to 1/10; degree 9 is the 5-point rule's limit
        let data = grid.gauss_from_fn(|s| s.powi(9));
        assert!((grid.integrate(&data) - 0.1).abs() < 1e-14);
    }
}
