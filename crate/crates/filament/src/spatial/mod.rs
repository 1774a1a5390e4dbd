//! Spatial discretization: Hermite elements, weak forms, and the resolvent.
//!
//! The weak formulation only ever needs three symmetric banded matrices on a
//! given grid:
//!
//! * a weighted mass matrix `(w u, v)` for a positive weight `w`,
//! * the bending matrix `(u'', v'')`,
//! * a gradient form `(w u', v')` with a signed weight (Newton Jacobians).
//!
//! With the interleaved value/slope numbering every cell couples four
//! consecutive degrees of freedom, so the half-bandwidth is 3 regardless of
//! grid size and the Cholesky solver runs in linear time.

pub mod banded;
pub mod field;

pub use banded::{SymBanded, SymBandedChol};
pub use field::{norms, FieldNorms, FieldState, GaussData, Grid, GPC};

use crate::{double_well_d, Error, Result};

/// Half-bandwidth of every matrix assembled here.
pub const BAND: usize = 3;

fn assemble_cellwise(
    grid: &Grid,
    mut local: impl FnMut(usize) -> [[f64; 4]; 4],
) -> SymBanded {
    let mut m = SymBanded::zeros(grid.n_dofs(), BAND);
    for c in 0..grid.n_cells {
        let loc = local(c);
        let b = 2 * c;
        for li in 0..4 {
            for lj in 0..=li {
                m.add(b + li, b + lj, loc[li][lj]);
            }
        }
    }
    m
}

/// Local stiffness from a per-Gauss-point rank-one accumulation
/// `sum_g coeff(c, g) * row_g row_g^T` where `row_g` is a shape-value table.
fn local_from_rows(
    grid: &Grid,
    rows: impl Fn(usize) -> [f64; 4],
    coeff: impl Fn(usize, usize) -> f64,
) -> impl FnMut(usize) -> [[f64; 4]; 4] {
    let weights: Vec<f64> = (0..GPC).map(|g| grid.gauss_weight(g)).collect();
    move |c| {
        let mut loc = [[0.0; 4]; 4];
        for (g, wg) in weights.iter().enumerate() {
            let r = rows(g);
            let cf = wg * coeff(c, g);
            for (li, ri) in r.iter().enumerate() {
                for (lj, rj) in r.iter().enumerate().take(li + 1) {
                    loc[li][lj] += cf * ri * rj;
                }
            }
        }
        loc
    }
}

/// Mass matrix `(w u, v)` for a strictly positive weight given at Gauss
/// points. Rejects non-positive weights: every place a weighted mass matrix
/// appears the weight is a kernel moment that the hypotheses require positive.
pub fn assemble_weighted_mass(grid: &Grid, weight: &GaussData) -> Result<SymBanded> {
    if let Some((k, &w)) = weight
        .vals
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w > 0.0))
    {
        let s = grid.gauss_points()[k];
        return Err(Error::Hypothesis(format!(
            "mass weight must be strictly positive, found {w} at s = {s:.6}"
        )));
    }
    Ok(assemble_cellwise(
        grid,
        local_from_rows(grid, |g| grid.shape_val(g), |c, g| weight.vals[c * GPC + g]),
    ))
}

/// Unweighted mass matrix `(u, v)`.
pub fn assemble_mass(grid: &Grid) -> SymBanded {
    assemble_cellwise(grid, local_from_rows(grid, |g| grid.shape_val(g), |_, _| 1.0))
}

/// Bending matrix `(u'', v'')`.
pub fn assemble_bending(grid: &Grid) -> SymBanded {
    assemble_cellwise(grid, local_from_rows(grid, |g| grid.shape_d2(g), |_, _| 1.0))
}

/// Gradient form `(w u', v')` with an arbitrary signed weight (used for the
/// Newton Jacobian where `w = F''(z')` changes sign).
pub fn assemble_gradient_weighted(grid: &Grid, weight: &GaussData) -> SymBanded {
    assemble_cellwise(
        grid,
        local_from_rows(grid, |g| grid.shape_d1(g), |c, g| weight.vals[c * GPC + g]),
    )
}

/// Load vector `(g, v)` from Gauss-point values of `g`.
pub fn dual_from_values(grid: &Grid, g: &GaussData) -> Vec<f64> {
    dual_tables(grid, g, |gp| grid.shape_val(gp))
}

/// Load vector `(f, v')` from Gauss-point values of `f`.
pub fn dual_from_slopes(grid: &Grid, f: &GaussData) -> Vec<f64> {
    dual_tables(grid, f, |gp| grid.shape_d1(gp))
}

fn dual_tables(grid: &Grid, data: &GaussData, table: impl Fn(usize) -> [f64; 4]) -> Vec<f64> {
    let mut rhs = vec![0.0; grid.n_dofs()];
    for c in 0..grid.n_cells {
        let b = 2 * c;
        for g in 0..GPC {
            let cf = grid.gauss_weight(g) * data.vals[c * GPC + g];
            let row = table(g);
            for l in 0..4 {
                rhs[b + l] += cf * row[l];
            }
        }
    }
    rhs
}

/// Nonlinear load `(F'(z'), v')`, the weak form of `-(F'(z'))'` with the
/// natural flux boundary condition built in.
pub fn nonlinear_form(grid: &Grid, z: &FieldState) -> Vec<f64> {
    let slopes = z.slopes_at_gauss(grid);
    dual_from_slopes(grid, &slopes.map(double_well_d))
}

/// The discrete operator `M_w + eps B` with its Cholesky factor, solving
/// `(w u, v) + eps (u'', v'') = -eps (f, v') + (g, v)` for all test fields.
pub struct Resolvent {
    grid: Grid,
    eps: f64,
    chol: SymBandedChol,
}

impl Resolvent {
    pub fn new(grid: &Grid, weight: &GaussData, eps: f64) -> Result<Self> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::Domain(format!(
                "resolvent requires a positive delay scale, got {eps}"
            )));
        }
        let m = assemble_weighted_mass(grid, weight)?;
        let b = assemble_bending(grid);
        let chol = m.scaled_add(eps, &b).cholesky()?;
        Ok(Self { grid: grid.clone(), eps, chol })
    }

    pub fn solve(&self, f: &GaussData, g: &GaussData) -> FieldState {
        let mut rhs = dual_from_values(&self.grid, g);
        let fv = dual_from_slopes(&self.grid, f);
        for (r, x) in rhs.iter_mut().zip(fv.iter()) {
            *r -= self.eps * x;
        }
        FieldState { dofs: self.chol.solve(&rhs) }
    }
}
