//! Steady states: branch census, closed-form profiles, and energies.
//!
//! A stationary profile `Z` satisfies `Z'''' = (F'(Z'))'` with the natural
//! boundary conditions, so its slope `w = Z'` solves the pendulum-type
//! problem `w'' = F'(w)`, `w'(0) = w'(L) = 0`. Besides the constant slopes
//! `w in {-1, 0, 1}` (affine `Z`), every solution is an elliptic-sine
//! oscillation `w(s) = a sn(chi_a s + K(k_a), k_a)` whose half period
//! `2 K(k_a) / chi_a` must divide `L` an integer number `n` of times. Since
//! the half period exceeds `pi/2`, only modes `n <= floor(2L/pi)` fit, giving
//! exactly `3 + 2 floor(2L/pi)` branches (each oscillatory profile comes with
//! its negation).
//!
//! The additive constant of `Z(s) = int_0^s w + c` is fixed by prescribing
//! the weighted average `(Z, mu1)`, which the evolution conserves.

use crate::elliptic::{half_period, invert_half_period, jacobi_sn, HalfPeriodQuery};
use crate::profile::SpaceFn;
use crate::quad::{GAUSS5_W, GAUSS5_X};
use crate::spatial::{assemble_bending, nonlinear_form, norms, FieldState, GaussData, Grid};
use crate::{double_well, Error, Result};

/// Default bound on the discrete weak residual of a built steady field,
/// relative to `1 + ||Z||_{H2}`. Cubic interpolation of an oscillatory
/// branch on 64+ cells lands well below this.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-3;

/// One steady branch of the slope equation on `(0, L)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BranchKind {
    /// Affine `Z` with slope in `{-1, 0, 1}`.
    ConstantSlope(f64),
    /// Oscillatory slope with `mode` half periods across the interval;
    /// `negated` selects the mirrored profile `-w`.
    Elliptic { mode: usize, amplitude: f64, negated: bool },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyBranch {
    pub kind: BranchKind,
    pub length: f64,
}

impl SteadyBranch {
    /// Stable identifier used in reports: constants first, then oscillatory
    /// branches by mode with the plain sign before the negated one.
    pub fn id(&self) -> usize {
        match self.kind {
            BranchKind::ConstantSlope(v) => {
                if v == 0.0 {
                    0
                } else if v > 0.0 {
                    1
                } else {
                    2
                }
            }
            BranchKind::Elliptic { mode, negated, .. } => 2 * mode + 1 + usize::from(negated),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            BranchKind::ConstantSlope(v) => format!("slope{v:+.0}"),
            BranchKind::Elliptic { mode, negated, .. } => {
                format!("mode{mode}{}", if negated { "-" } else { "+" })
            }
        }
    }

    fn elliptic_query(&self) -> Option<Result<HalfPeriodQuery>> {
        match self.kind {
            BranchKind::ConstantSlope(_) => None,
            BranchKind::Elliptic { amplitude, .. } => Some(half_period(amplitude)),
        }
    }

    /// Slope profile `w(s)`.
    pub fn eval_w(&self, s: f64) -> Result<f64> {
        if !(0.0..=self.length * (1.0 + 1e-12)).contains(&s) {
            return Err(Error::Domain(format!(
                "arc position {s} outside [0, {}]",
                self.length
            )));
        }
        match self.kind {
            BranchKind::ConstantSlope(v) => Ok(v),
            BranchKind::Elliptic { amplitude, negated, .. } => {
                let q = half_period(amplitude)?;
                let w = amplitude * jacobi_sn(q.chi * s + crate::elliptic::agm_k(q.modulus)?, q.modulus)?;
                Ok(if negated { -w } else { w })
            }
        }
    }
}

/// Census of all steady branches for the interval length `L`.
pub fn enumerate(length: f64) -> Result<Vec<SteadyBranch>> {
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::Domain(format!("interval length must be positive, got {length}")));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let near = (2.0 * length / std::f64::consts::PI).round();
    if near >= 1.0 && (length / near - half_pi).abs() < 1e-12 {
        return Err(Error::Degenerate(format!(
            "length / {near} equals pi/2 exactly; the oscillatory branch degenerates \
             to zero amplitude there and is excluded"
        )));
    }
    let mut out = vec![
        SteadyBranch { kind: BranchKind::ConstantSlope(0.0), length },
        SteadyBranch { kind: BranchKind::ConstantSlope(1.0), length },
        SteadyBranch { kind: BranchKind::ConstantSlope(-1.0), length },
    ];
    let m = (2.0 * length / std::f64::consts::PI).floor() as usize;
    for mode in 1..=m {
        let amplitude = invert_half_period(length / mode as f64)?;
        for negated in [false, true] {
            out.push(SteadyBranch {
                kind: BranchKind::Elliptic { mode, amplitude, negated },
                length,
            });
        }
    }
    Ok(out)
}

/// A steady profile assembled on a grid.
#[derive(Debug, Clone)]
pub struct SteadyField {
    pub branch: SteadyBranch,
    pub c: f64,
    pub field: FieldState,
    pub residual: f64,
}

/// Discrete weak residual `||B Z + N(Z)||_2` of a candidate steady field.
pub fn weak_residual(grid: &Grid, z: &FieldState) -> f64 {
    let b = assemble_bending(grid);
    let mut r = b.matvec(&z.dofs);
    for (ri, ni) in r.iter_mut().zip(nonlinear_form(grid, z).iter()) {
        *ri += ni;
    }
    r.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Build the nodal field `Z(s) = int_0^s w + c` by per-cell Gauss quadrature
/// of the closed-form slope, and verify the weak residual.
pub fn build_field(
    branch: &SteadyBranch,
    c: f64,
    grid: &Grid,
    res_tol: f64,
) -> Result<SteadyField> {
    if (grid.length - branch.length).abs() > 1e-12 * branch.length.max(1.0) {
        return Err(Error::Discretization(format!(
            "grid length {} does not span the branch domain {}",
            grid.length, branch.length
        )));
    }
    let mut dofs = Vec::with_capacity(grid.n_dofs());
    dofs.push(c);
    dofs.push(branch.eval_w(0.0)?);
    let mut acc = c;
    for cell in 0..grid.n_cells {
        let left = cell as f64 * grid.h;
        let mut cell_int = 0.0;
        for (x, w) in GAUSS5_X.iter().zip(GAUSS5_W.iter()) {
            let s = left + 0.5 * grid.h * (1.0 + x);
            cell_int += 0.5 * grid.h * w * branch.eval_w(s)?;
        }
        acc += cell_int;
        let node = left + grid.h;
        dofs.push(acc);
        dofs.push(branch.eval_w(node.min(grid.length))?);
    }
    let field = FieldState { dofs };
    let residual = weak_residual(grid, &field);
    let scale = 1.0 + norms(grid, &field).h2();
    if residual > res_tol * scale {
        return Err(Error::Consistency(format!(
            "steady field residual {residual:.3e} exceeds {res_tol:.1e} * (1 + |Z|_H2) = {:.3e} \
             for branch {}",
            res_tol * scale,
            branch.label()
        )));
    }
    Ok(SteadyField { branch: *branch, c, field, residual })
}

/// `E(Z) = 1/2 int (Z'')^2 + int F(Z')`: the mechanical part of the energy,
/// whose critical points are exactly the steady branches.
pub fn mechanical_energy(grid: &Grid, z: &FieldState) -> f64 {
    let d2 = z.second_at_gauss(grid);
    let d1 = z.slopes_at_gauss(grid);
    0.5 * grid.inner(&d2, &d2) + grid.integrate(&d1.map(double_well))
}

/// Shift `z` by a constant (value degrees of freedom only).
pub fn shift_constant(z: &mut FieldState, c: f64) {
    for v in z.dofs.iter_mut().step_by(2) {
        *v += c;
    }
}

/// The constant `c` making `(Z0 + c, mu1) = target`.
pub fn constant_for_target(
    grid: &Grid,
    z0: &FieldState,
    mu1: &GaussData,
    target: f64,
) -> Result<f64> {
    let int_mu1 = grid.integrate(mu1);
    if !(int_mu1 > 0.0) {
        return Err(Error::Hypothesis(format!(
            "selecting the additive constant needs int mu1 > 0, got {int_mu1:.3e}"
        )));
    }
    let z_mu1 = grid.inner(&z0.values_at_gauss(grid), mu1);
    Ok((target - z_mu1) / int_mu1)
}

/// Build the branch field whose weighted average `(Z, mu1)` equals `target`.
pub fn select_constant(
    branch: &SteadyBranch,
    mu1: &SpaceFn,
    target: f64,
    grid: &Grid,
    res_tol: f64,
) -> Result<SteadyField> {
    let base = build_field(branch, 0.0, grid, res_tol)?;
    let mu1_g = grid.gauss_from_fn(|s| mu1.eval(s));
    let c = constant_for_target(grid, &base.field, &mu1_g, target)?;
    let mut field = base.field;
    shift_constant(&mut field, c);
    Ok(SteadyField { branch: *branch, c, field, residual: base.residual })
}

/// Table row for reporting a branch.
#[derive(Debug, Clone)]
pub struct BranchRow {
    pub id: usize,
    pub label: String,
    pub mode: usize,
    pub amplitude: f64,
    pub half_period: f64,
    pub energy: f64,
    pub c: f64,
    pub weighted_mean: f64,
}

/// Evaluate every branch on a grid: energies and (optionally) the additive
/// constants matching `(Z, mu1) = target`.
pub fn branch_table(
    length: f64,
    grid: &Grid,
    mu1: &SpaceFn,
    target: Option<f64>,
    res_tol: f64,
) -> Result<Vec<BranchRow>> {
    let mut rows = Vec::new();
    let mu1_g = grid.gauss_from_fn(|s| mu1.eval(s));
    for branch in enumerate(length)? {
        let sf = match target {
            Some(k) => select_constant(&branch, mu1, k, grid, res_tol)?,
            None => build_field(&branch, 0.0, grid, res_tol)?,
        };
        let (mode, amplitude, half_period) = match branch.elliptic_query() {
            Some(q) => {
                let q = q?;
                let mode = match branch.kind {
                    BranchKind::Elliptic { mode, .. } => mode,
                    _ => unreachable!(),
                };
                (mode, q.a, q.value)
            }
            None => (0, f64::NAN, f64::NAN),
        };
        rows.push(BranchRow {
            id: branch.id(),
            label: branch.label(),
            mode,
            amplitude,
            half_period,
            energy: mechanical_energy(grid, &sf.field),
            c: sf.c,
            weighted_mean: grid.inner(&sf.field.values_at_gauss(grid), &mu1_g),
        });
    }
    rows.sort_by_key(|r| r.id);
    Ok(rows)
}

/// Smallest mechanical energy among non-affine branches; the energy gap that
/// separates the affine minimizers from everything else.
pub fn energy_gap(length: f64, grid: &Grid, res_tol: f64) -> Result<f64> {
    let mut gap = f64::INFINITY;
    for branch in enumerate(length)? {
        let keep = match branch.kind {
            BranchKind::ConstantSlope(v) => v == 0.0,
            BranchKind::Elliptic { .. } => true,
        };
        if keep {
            let sf = build_field(&branch, 0.0, grid, res_tol)?;
            gap = gap.min(mechanical_energy(grid, &sf.field));
        }
    }
    Ok(gap)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census_counts() {
        assert_eq!(enumerate(1.0).unwrap().len(), 3);
        assert_eq!(enumerate(2.0).unwrap().len(), 5);
        assert_eq!(enumerate(4.0).unwrap().len(), 7);
    }

    #[test]
    fn census_matches_closed_form_for_many_lengths() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let length: f64 = rng.gen_range(0.1..12.0);
            let expct = 3 + 2 * ((2.0 * length / std::f64::consts::PI).floor() as usize);
            assert_eq!(enumerate(length).unwrap().len(), expct, "L = {length}");
        }
    }

    #[test]
    fn degenerate_lengths_are_rejected() {
        assert!(matches!(
            enumerate(std::f64::consts::FRAC_PI_2),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(enumerate(std::f64::consts::PI), Err(Error::Degenerate(_))));
    }

    #[test]
    fn elliptic_mode_half_periods_divide_length() {
        let length = 4.0;
        for b in enumerate(length).unwrap() {
            if let BranchKind::Elliptic { mode, amplitude, .. } = b.kind {
                let q = half_period(amplitude).unwrap();
                assert!(
                    (q.value - length / mode as f64).abs() < 1e-10,
                    "mode {mode}: {} vs {}",
                    q.value,
                    length / mode as f64
                );
            }
        }
    }

    #[test]
    fn slope_profile_shooting_data() {
        let length = 2.0;
        let branches = enumerate(length).unwrap();
        let b = branches.iter().find(|b| matches!(b.kind, BranchKind::Elliptic { negated: false, .. })).unwrap();
        let a = match b.kind {
            BranchKind::Elliptic { amplitude, .. } => amplitude,
            _ => unreachable!(),
        };
        // starts at the amplitude with zero slope
        assert!((b.eval_w(0.0).unwrap() - a).abs() < 1e-12);
        let d = 1e-6;
        let wd = (b.eval_w(d).unwrap() - b.eval_w(0.0).unwrap()) / d;
        assert!(wd.abs() < 1e-5, "w'(0) = {wd}");
        // antiperiodic across one half period
        let q = half_period(a).unwrap();
        assert!((b.eval_w(q.value).unwrap() + a).abs() < 1e-9);
        // out of domain
        assert!(b.eval_w(-0.1).is_err());
        assert!(b.eval_w(length + 0.1).is_err());
    }

    #[test]
    fn first_integral_is_conserved_along_branches() {
        // w'' = F'(w) integrates to (w')^2/2 = F(w) - F(a)
        for length in [2.0, 5.0] {
            for b in enumerate(length).unwrap() {
                if let BranchKind::Elliptic { amplitude, .. } = b.kind {
                    for i in 0..40 {
                        let s = length * (i as f64 + 0.5) / 40.0;
                        let d = 1e-5;
                        let wm = b.eval_w(s - d).unwrap();
                        let wp = b.eval_w(s + d).unwrap();
                        let w = b.eval_w(s).unwrap();
                        let wd = (wp - wm) / (2.0 * d);
                        let lhs = 0.5 * wd * wd;
                        let rhs = double_well(w) - double_well(amplitude);
                        assert!(
                            (lhs - rhs).abs() < 1e-8,
                            "L={length} s={s}: {lhs} vs {rhs}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn constant_branches_build_exactly() {
        let grid = Grid::new(1.0, 16).unwrap();
        let up = SteadyBranch { kind: BranchKind::ConstantSlope(1.0), length: 1.0 };
        let sf = build_field(&up, 0.0, &grid, 1e-12).unwrap();
        for i in 0..=16 {
            assert!((sf.field.value(i) - grid.node_s(i)).abs() < 1e-13);
        }
        assert!(sf.residual < 1e-12);

        let flat = SteadyBranch { kind: BranchKind::ConstantSlope(0.0), length: 1.0 };
        let sf = build_field(&flat, 5.0, &grid, 1e-12).unwrap();
        for i in 0..=16 {
            assert!((sf.field.value(i) - 5.0).abs() < 1e-13);
        }
    }

    #[test]
    fn elliptic_residual_shrinks_at_second_order() {
        let length = 2.0;
        let branch = enumerate(length)
            .unwrap()
            .into_iter()
            .find(|b| matches!(b.kind, BranchKind::Elliptic { negated: false, .. }))
            .unwrap();
        let res = |n: usize| {
            build_field(&branch, 0.0, &Grid::new(length, n).unwrap(), 1.0)
                .unwrap()
                .residual
        };
        let (r32, r64) = (res(32), res(64));
        assert!(r64 < r32 / 3.0, "residuals {r32} -> {r64}");
        assert!(r64 < DEFAULT_RESIDUAL_TOL);
    }

    #[test]
    fn mechanical_energy_levels() {
        let length = 2.0;
        let grid = Grid::new(length, 64).unwrap();
        let up = build_field(
            &SteadyBranch { kind: BranchKind::ConstantSlope(1.0), length },
            0.0,
            &grid,
            1e-10,
        )
        .unwrap();
        assert!(mechanical_energy(&grid, &up.field).abs() < 1e-12);

        let flat = build_field(
            &SteadyBranch { kind: BranchKind::ConstantSlope(0.0), length },
            0.0,
            &grid,
            1e-10,
        )
        .unwrap();
        // F(0) = 1 over the whole interval
        assert!((mechanical_energy(&grid, &flat.field) - length).abs() < 1e-12);

        let osc = enumerate(length)
            .unwrap()
            .into_iter()
            .find(|b| matches!(b.kind, BranchKind::Elliptic { negated: false, .. }))
            .unwrap();
        let sf = build_field(&osc, 0.0, &grid, 1e-2).unwrap();
        let e = mechanical_energy(&grid, &sf.field);
        assert!(e > 0.0 && e < length, "elliptic energy {e}");
        let gap = energy_gap(length, &grid, 1e-2).unwrap();
        assert!(gap > 0.0 && gap <= e + 1e-12);
    }

    #[test]
    fn constant_selection_examples() {
        let grid = Grid::new(1.0, 32).unwrap();
        let mu1 = SpaceFn::constant(1.0, 1.0);
        let flat = SteadyBranch { kind: BranchKind::ConstantSlope(0.0), length: 1.0 };
        let sf = select_constant(&flat, &mu1, 3.0, &grid, 1e-10).unwrap();
        assert!((sf.c - 3.0).abs() < 1e-12);

        let up = SteadyBranch { kind: BranchKind::ConstantSlope(1.0), length: 1.0 };
        let sf = select_constant(&up, &mu1, 0.5, &grid, 1e-10).unwrap();
        assert!(sf.c.abs() < 1e-12, "c = {}", sf.c);
    }

    #[test]
    fn constant_selection_round_trip_with_weight() {
        let length = 2.0;
        let grid = Grid::new(length, 64).unwrap();
        let mu1 = SpaceFn::new(
            vec![
                crate::profile::SpaceTerm::Const { amp: 1.0 },
                crate::profile::SpaceTerm::Sin { amp: 0.3, mult: 1 },
            ],
            length,
        );
        let target = 0.37;
        for branch in enumerate(length).unwrap() {
            let sf = select_constant(&branch, &mu1, target, &grid, 1e-2).unwrap();
            let got = grid.inner(
                &sf.field.values_at_gauss(&grid),
                &grid.gauss_from_fn(|s| mu1.eval(s)),
            );
            assert!(
                (got - target).abs() < 1e-10 * (1.0 + target.abs()),
                "branch {}: {got}",
                branch.label()
            );
        }
    }

    #[test]
    fn branch_table_is_complete_and_sorted() {
        let length = 4.0;
        let grid = Grid::new(length, 64).unwrap();
        let mu1 = SpaceFn::constant(1.0, length);
        let rows = branch_table(length, &grid, &mu1, Some(1.0), 1e-2).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.windows(2).all(|w| w[0].id < w[1].id));
        for r in rows.iter() {
            assert!((r.weighted_mean - 1.0).abs() < 1e-9, "{}: {}", r.label, r.weighted_mean);
        }
    }
}
