//! Age-weighted delay machinery: analytic pre-initial data, the rolling
//! history buffer, the delayed source and delay operator, the conserved
//! weighted average, and the Lyapunov bookkeeping.
//!
//! Every age integral runs over the truncated kernel support `[0, a_max]`.
//! The buffered segment of a trajectory is read as piecewise linear in time
//! between stored steps, matching the first-order accuracy of the marching
//! scheme; ages reaching behind `t = 0` are evaluated from the analytic past
//! directly, so startup costs no extra interpolation error. Separable kernels
//! get exact per-panel moment weights; tabulated kernels fall back to a
//! Gauss quadrature in age with pointwise kernel evaluations.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::KernelSpec;
use crate::quad::{GAUSS4_W, GAUSS4_X, GAUSS8_W, GAUSS8_X};
use crate::spatial::{norms, FieldState, GaussData, Grid, GPC};

/// Default cap on history memory before construction refuses (2 GiB).
pub const DEFAULT_HISTORY_BYTES: usize = 2 << 30;

/// Analytic trajectory data for `t <= 0`: a polynomial in time with spatial
/// fields as coefficients, `z_p(s, t) = sum_j coeffs[j](s) t^j`.
///
/// Constant-in-time data is the common case; polynomial dependence covers the
/// ramped and curved starts used to probe the delay terms. Evaluation is
/// exact at any time, so the pre-initial part of an age integral carries no
/// interpolation error.
#[derive(Debug, Clone)]
pub struct PastData {
    coeffs: Vec<FieldState>,
}

impl PastData {
    pub fn constant(state: FieldState) -> Self {
        Self { coeffs: vec![state] }
    }

    pub fn poly(coeffs: Vec<FieldState>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(Error::Domain("past data needs at least one coefficient".into()));
        }
        let n = coeffs[0].dofs.len();
        if coeffs.iter().any(|c| c.dofs.len() != n) {
            return Err(Error::Discretization(
                "past data coefficients live on different grids".into(),
            ));
        }
        Ok(Self { coeffs })
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn is_constant(&self) -> bool {
        self.coeffs.len() == 1
    }

    pub fn coeffs(&self) -> &[FieldState] {
        &self.coeffs
    }

    /// Field at time `t`; `t = 0` doubles as the initial state.
    pub fn eval(&self, t: f64) -> FieldState {
        let mut out = self.coeffs.last().unwrap().clone();
        for c in self.coeffs.iter().rev().skip(1) {
            out.scale(t);
            out.axpy(1.0, c);
        }
        out
    }

    /// Shifts the data by a fixed field at all times, preserving continuity
    /// into the initial state.
    pub fn perturbed(mut self, delta: &FieldState) -> Self {
        self.coeffs[0].axpy(1.0, delta);
        self
    }

    /// `1 + max ||z_p(t)||_{H2}` sampled over `[-horizon, 0]`.
    pub fn norm_bound(&self, grid: &Grid, horizon: f64) -> f64 {
        let mut sup = 0.0f64;
        for i in 0..=32 {
            let t = -horizon * i as f64 / 32.0;
            sup = sup.max(norms(grid, &self.eval(t)).h2());
        }
        1.0 + sup
    }

    /// Largest `H2` norm of the time derivative over `[-horizon, 0]`; zero
    /// for constant data.
    pub fn rate_bound(&self, grid: &Grid, horizon: f64) -> f64 {
        if self.is_constant() {
            return 0.0;
        }
        let deriv: Vec<FieldState> = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(j, c)| {
                let mut d = c.clone();
                d.scale(j as f64);
                d
            })
            .collect();
        let dp = Self { coeffs: deriv };
        dp.norm_bound(grid, horizon) - 1.0
    }
}

/// How the newest panel `[t, t + dt]`, shorter than one stored step, enters
/// the delayed source during an implicit step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubDtRule {
    /// All kernel mass below age `dt/eps` multiplies the unknown state.
    Lumped,
    /// Linear blend between the committed state and the unknown one,
    /// consistent with how the buffer itself is read.
    #[default]
    Linear,
}

/// Delayed source split for an implicit step to `t + dt`: the committed part
/// plus the pointwise weight the sub-step panel places on the unknown state.
#[derive(Debug, Clone)]
pub struct StepSource {
    /// History and past contribution at the Gauss points, including any share
    /// of the newest panel assigned to the committed state at `t`.
    pub fixed: GaussData,
    /// Pointwise weight multiplying the unknown state at `t + dt`.
    pub iterate_weight: GaussData,
}

impl StepSource {
    /// Source produced by a candidate new state: `fixed + weight .* z_new`.
    pub fn eval(&self, iterate: &GaussData) -> GaussData {
        let mut out = self.fixed.clone();
        for (o, (w, z)) in
            out.vals.iter_mut().zip(self.iterate_weight.vals.iter().zip(iterate.vals.iter()))
        {
            *o += w * z;
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Entry {
    state: FieldState,
    values: GaussData,
}

#[derive(Clone, Copy)]
enum QuadWeight {
    Rho,
    DRho,
}

/// Rolling record of a trajectory over the delay window `[t - eps a_max, t]`.
///
/// Entries live on the uniform time grid `t_j = j dt`, oldest first; the
/// buffer keeps one spare panel behind the window so clipped age panels
/// always have both endpoints. Values at the spatial Gauss points are cached
/// per entry since every delay integral consumes them.
#[derive(Debug, Clone)]
pub struct History {
    grid: Grid,
    eps: f64,
    dt: f64,
    a_max: f64,
    past: PastData,
    /// Past coefficients at the spatial Gauss points.
    past_gauss: Vec<GaussData>,
    entries: VecDeque<Entry>,
    /// Time index of the oldest retained entry.
    first_idx: usize,
}

impl History {
    /// Starts a buffer at `t = 0` seeded with the initial state `z_p(0)`.
    ///
    /// Fails when the retention window would not fit in `max_bytes`; the
    /// window holds `ceil(eps a_max / dt) + 2` states.
    pub fn new(
        grid: &Grid,
        past: PastData,
        eps: f64,
        dt: f64,
        a_max: f64,
        max_bytes: usize,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::config("run.eps", "delay scale must be positive"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config("run.dt", "time step must be positive"));
        }
        if !(a_max > 0.0 && a_max.is_finite()) {
            return Err(Error::config("kernel.a_max", "age cutoff must be positive"));
        }
        if past.coeffs[0].dofs.len() != grid.n_dofs() {
            return Err(Error::Discretization("past data does not match the grid".into()));
        }
        let slots = retention(eps, a_max, dt);
        let per_entry = 8 * (grid.n_dofs() + grid.gauss_points().len());
        let bytes = slots.saturating_mul(per_entry);
        if bytes > max_bytes {
            return Err(Error::config(
                "run.dt",
                format!(
                    "history retention needs {slots} states (about {} MiB, budget {} MiB); \
                     increase dt or reduce the kernel age cutoff",
                    bytes >> 20,
                    max_bytes >> 20
                ),
            ));
        }
        let past_gauss = past.coeffs.iter().map(|c| c.values_at_gauss(grid)).collect();
        let initial = past.eval(0.0);
        let mut entries = VecDeque::with_capacity(slots.min(1 << 12));
        entries.push_back(Entry { values: initial.values_at_gauss(grid), state: initial });
        Ok(Self { grid: grid.clone(), eps, dt, a_max, past, past_gauss, entries, first_idx: 0 })
    }

    /// Number of states the retention window can hold.
    pub fn retention_slots(&self) -> usize {
        retention(self.eps, self.a_max, self.dt)
    }

    pub fn t(&self) -> f64 {
        self.time_of(self.entries.len() - 1)
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn past(&self) -> &PastData {
        &self.past
    }

    pub fn latest(&self) -> &FieldState {
        &self.entries.back().unwrap().state
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Commits the state at the next step time and drops entries that fell
    /// one full panel behind the delay window.
    pub fn push(&mut self, state: FieldState) -> Result<()> {
        if state.dofs.len() != self.grid.n_dofs() {
            return Err(Error::Discretization("pushed state does not match the grid".into()));
        }
        self.entries.push_back(Entry { values: state.values_at_gauss(&self.grid), state });
        let window_start = self.t() - self.eps * self.a_max - 1.5 * self.dt;
        while self.entries.len() > 2 && self.time_of(0) < window_start {
            self.entries.pop_front();
            self.first_idx += 1;
        }
        Ok(())
    }

    fn time_of(&self, i: usize) -> f64 {
        (self.first_idx + i) as f64 * self.dt
    }

    /// Largest age the buffer can serve for a query anchored at `target`;
    /// older ages belong to the analytic past or exceed the kernel support.
    fn buffered_cap(&self, target: f64) -> f64 {
        self.a_max.min((target - self.time_of(0)) / self.eps)
    }

    /// Visits each age panel of the buffered segment, newest first, as
    /// `f(a_lo, a_hi, i_left, left, right, t_left)`: on ages `[a_lo, a_hi]`
    /// the trajectory is linear in time between `left` (at `t_left`) and
    /// `right` (at `t_left + dt`).
    fn walk_buffered<F: FnMut(f64, f64, usize, &Entry, &Entry, f64)>(
        &self,
        target: f64,
        mut f: F,
    ) {
        let cap = self.buffered_cap(target);
        if self.entries.len() < 2 || cap <= 0.0 {
            return;
        }
        for i in (0..self.entries.len() - 1).rev() {
            let t_l = self.time_of(i);
            let a_lo = ((target - self.time_of(i + 1)) / self.eps).max(0.0);
            let a_hi = ((target - t_l) / self.eps).min(cap);
            if a_hi > a_lo {
                f(a_lo, a_hi, i, &self.entries[i], &self.entries[i + 1], t_l);
            }
            if (target - t_l) / self.eps >= cap {
                break;
            }
        }
    }

    /// Visits quadrature nodes `f(a, w)` covering the pre-initial ages
    /// `[target/eps, a_max]` served by the analytic past.
    fn walk_past<F: FnMut(f64, f64)>(&self, kernel: &KernelSpec, target: f64, mut f: F) {
        let tail_lo = (target - self.time_of(0)) / self.eps;
        if tail_lo >= self.a_max {
            return;
        }
        for (lo, hi) in kernel.panels().clipped(tail_lo, self.a_max) {
            let mid = 0.5 * (lo + hi);
            let half = 0.5 * (hi - lo);
            for (x, w) in GAUSS8_X.iter().zip(GAUSS8_W.iter()) {
                f(mid + half * x, half * w);
            }
        }
    }

    /// Past state at the Gauss points for time `tq`, accumulated as
    /// `acc += coef * z_p(., tq)`.
    fn add_past_at(&self, acc: &mut GaussData, coef: f64, tq: f64) {
        let mut pw = coef;
        for c in &self.past_gauss {
            acc.axpy(pw, c);
            pw *= tq;
        }
    }

    fn past_value(&self, g: usize, tq: f64) -> f64 {
        let mut v = 0.0;
        let mut pw = 1.0;
        for c in &self.past_gauss {
            v += pw * c.vals[g];
            pw *= tq;
        }
        v
    }

    /// `int_0^{a_max} rho(s, a) z(s, target - eps a) da` at the Gauss points:
    /// buffered panels plus the analytic past tail.
    fn age_average(&self, kernel: &KernelSpec, target: f64) -> GaussData {
        let mut acc = GaussData::zeros(&self.grid);
        if let Some((b, radial)) = kernel.separable_parts() {
            self.walk_buffered(target, |lo, hi, _i, left, right, t_l| {
                let m0 = radial.int_r(lo, hi);
                let m1 = radial.int_ar(lo, hi);
                let c_r = ((target - t_l) / self.dt) * m0 - (self.eps / self.dt) * m1;
                acc.axpy(m0 - c_r, &left.values);
                acc.axpy(c_r, &right.values);
            });
            self.walk_past(kernel, target, |a, w| {
                self.add_past_at(&mut acc, w * radial.eval(a), target - self.eps * a);
            });
            let b_gauss = self.grid.gauss_from_fn(|s| b.eval(s));
            b_gauss.hadamard(&acc)
        } else {
            let s_pts = self.grid.gauss_points();
            self.walk_buffered(target, |lo, hi, _i, left, right, t_l| {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                for (x, wq) in GAUSS4_X.iter().zip(GAUSS4_W.iter()) {
                    let a = mid + half * x;
                    let w = half * wq;
                    let th = (target - self.eps * a - t_l) / self.dt;
                    for (g, &s) in s_pts.iter().enumerate() {
                        acc.vals[g] += w
                            * kernel.rho(s, a)
                            * ((1.0 - th) * left.values.vals[g] + th * right.values.vals[g]);
                    }
                }
            });
            self.walk_past(kernel, target, |a, w| {
                let tq = target - self.eps * a;
                for (g, &s) in s_pts.iter().enumerate() {
                    acc.vals[g] += w * kernel.rho(s, a) * self.past_value(g, tq);
                }
            });
            acc
        }
    }

    /// Delayed source `g(s) = int_0^{a_max} z(s, t - eps a) rho(s, a) da` at
    /// the current time, at the Gauss points.
    pub fn delayed_source(&self, kernel: &KernelSpec) -> GaussData {
        self.age_average(kernel, self.t())
    }

    /// Delay operator `eps^{-1} (mu(s) z(s, t) - g(s))` at the current time.
    pub fn delay_operator(&self, kernel: &KernelSpec) -> GaussData {
        let src = self.delayed_source(kernel);
        let z = &self.entries.back().unwrap().values;
        let mut out = GaussData::zeros(&self.grid);
        for (g, &s) in self.grid.gauss_points().iter().enumerate() {
            out.vals[g] = (kernel.mu_at(s) * z.vals[g] - src.vals[g]) / self.eps;
        }
        out
    }

    /// Delayed source for the step to `t + dt`, split into the committed part
    /// and the weight on the unknown state.
    pub fn step_source(&self, kernel: &KernelSpec, rule: SubDtRule) -> StepSource {
        let target = self.t() + self.dt;
        let mut fixed = self.age_average(kernel, target);
        let d = (self.dt / self.eps).min(self.a_max);
        let latest = &self.entries.back().unwrap().values;
        let iterate_weight = if let Some((b, radial)) = kernel.separable_parts() {
            let m0 = radial.int_r(0.0, d);
            let m1 = radial.int_ar(0.0, d);
            let (c_new, c_old) = match rule {
                SubDtRule::Lumped => (m0, 0.0),
                SubDtRule::Linear => {
                    let carry = self.eps / self.dt * m1;
                    (m0 - carry, carry)
                }
            };
            let b_gauss = self.grid.gauss_from_fn(|s| b.eval(s));
            if c_old != 0.0 {
                for g in 0..fixed.vals.len() {
                    fixed.vals[g] += b_gauss.vals[g] * c_old * latest.vals[g];
                }
            }
            b_gauss.map(|v| c_new * v)
        } else {
            let mut weight = GaussData::zeros(&self.grid);
            for (g, &s) in self.grid.gauss_points().iter().enumerate() {
                let m0 = kernel.age_integral_range(0.0, d, |a| kernel.rho(s, a));
                match rule {
                    SubDtRule::Lumped => weight.vals[g] = m0,
                    SubDtRule::Linear => {
                        let m1 = kernel.age_integral_range(0.0, d, |a| a * kernel.rho(s, a));
                        let carry = self.eps / self.dt * m1;
                        weight.vals[g] = m0 - carry;
                        fixed.vals[g] += carry * latest.vals[g];
                    }
                }
            }
            weight
        };
        StepSource { fixed, iterate_weight }
    }

    /// Weighted average of the delayed trajectory against the survivor
    /// weight, `int int z(s, t - eps tau) phi(s, tau) ds dtau`.
    ///
    /// Conserved along solutions of the evolution; the code reports its drift
    /// and never assumes it.
    pub fn theta(&self, kernel: &KernelSpec) -> f64 {
        let target = self.t();
        let a_mx = kernel.a_max();
        let mut acc = 0.0;
        if let Some((b, radial)) = kernel.separable_parts() {
            let b_gauss = self.grid.gauss_from_fn(|s| b.eval(s));
            let p: Vec<f64> =
                self.entries.iter().map(|e| self.grid.inner(&b_gauss, &e.values)).collect();
            self.walk_buffered(target, |lo, hi, i, _l, _r, t_l| {
                let i0 = radial.int_phi(lo, hi, a_mx);
                let i1 = radial.int_tau_phi(lo, hi, a_mx);
                let c_r = ((target - t_l) / self.dt) * i0 - (self.eps / self.dt) * i1;
                acc += (i0 - c_r) * p[i] + c_r * p[i + 1];
            });
            let q: Vec<f64> =
                self.past_gauss.iter().map(|c| self.grid.inner(&b_gauss, c)).collect();
            self.walk_past(kernel, target, |tau, w| {
                let tq = target - self.eps * tau;
                let mut zp = 0.0;
                let mut pw = 1.0;
                for &qj in &q {
                    zp += pw * qj;
                    pw *= tq;
                }
                acc += w * radial.phi(tau, a_mx) * zp;
            });
        } else {
            let s_pts = self.grid.gauss_points();
            self.walk_buffered(target, |lo, hi, _i, left, right, t_l| {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                for (x, wq) in GAUSS4_X.iter().zip(GAUSS4_W.iter()) {
                    let tau = mid + half * x;
                    let w = half * wq;
                    let th = (target - self.eps * tau - t_l) / self.dt;
                    let mut sum = 0.0;
                    for (g, &s) in s_pts.iter().enumerate() {
                        sum += self.grid.gauss_weight(g % GPC)
                            * kernel.phi_at(s, tau)
                            * ((1.0 - th) * left.values.vals[g] + th * right.values.vals[g]);
                    }
                    acc += w * sum;
                }
            });
            self.walk_past(kernel, target, |tau, w| {
                let tq = target - self.eps * tau;
                let mut sum = 0.0;
                for (g, &s) in s_pts.iter().enumerate() {
                    sum += self.grid.gauss_weight(g % GPC)
                        * kernel.phi_at(s, tau)
                        * self.past_value(g, tq);
                }
                acc += w * sum;
            });
        }
        acc
    }

    /// Instantaneous delay energy
    /// `(2 eps)^{-1} int int (z(s,t) - z(s,t-eps a))^2 rho(s,a) da ds`.
    pub fn delay_energy(&self, kernel: &KernelSpec) -> f64 {
        self.quadratic_weighted(kernel, QuadWeight::Rho) / (2.0 * self.eps)
    }

    /// Rate the delay terms feed into the energy balance,
    /// `(2 eps^2)^{-1} int int (z(s,t) - z(s,t-eps a))^2 d_a rho(s,a) da ds`.
    ///
    /// Nonpositive for any age-monotone kernel; a positive value beyond
    /// rounding slack is reported as an inconsistency rather than clamped.
    pub fn dissipation_rate(&self, kernel: &KernelSpec) -> Result<f64> {
        let raw = self.quadratic_weighted(kernel, QuadWeight::DRho);
        let rate = raw / (2.0 * self.eps * self.eps);
        if rate > 1e-9 * (1.0 + rate.abs()) {
            return Err(Error::Consistency(format!(
                "delay dissipation rate came out positive ({rate:.3e}); \
                 the kernel is not age-monotone at the resolved scales"
            )));
        }
        Ok(rate)
    }

    /// `int int (z_now - z(t - eps a))^2 W(s, a) da ds` with `W` either the
    /// kernel or its age derivative. Buffered panels integrate the quadratic
    /// exactly through second moments; the past tail uses panel quadrature.
    fn quadratic_weighted(&self, kernel: &KernelSpec, wt: QuadWeight) -> f64 {
        let target = self.t();
        let z_now = &self.entries.back().unwrap().values;
        let n = z_now.vals.len();
        let mut acc = 0.0;
        if let Some((b, radial)) = kernel.separable_parts() {
            let b_gauss = self.grid.gauss_from_fn(|s| b.eval(s));
            let mut v0 = vec![0.0; n];
            let mut v1 = vec![0.0; n];
            self.walk_buffered(target, |lo, hi, _i, left, right, t_l| {
                let c = (target - t_l) / self.dt;
                for g in 0..n {
                    let dz = right.values.vals[g] - left.values.vals[g];
                    v0[g] = z_now.vals[g] - (left.values.vals[g] + c * dz);
                    v1[g] = self.eps / self.dt * dz;
                }
                let (mut s00, mut s01, mut s11) = (0.0, 0.0, 0.0);
                for g in 0..n {
                    let wb = self.grid.gauss_weight(g % GPC) * b_gauss.vals[g];
                    s00 += wb * v0[g] * v0[g];
                    s01 += wb * v0[g] * v1[g];
                    s11 += wb * v1[g] * v1[g];
                }
                let (m0, m1, m2) = match wt {
                    QuadWeight::Rho => {
                        (radial.int_r(lo, hi), radial.int_ar(lo, hi), radial.int_a2r(lo, hi))
                    }
                    QuadWeight::DRho => {
                        (radial.int_dr(lo, hi), radial.int_adr(lo, hi), radial.int_a2dr(lo, hi))
                    }
                };
                acc += s00 * m0 + 2.0 * s01 * m1 + s11 * m2;
            });
            self.walk_past(kernel, target, |a, w| {
                let rv = match wt {
                    QuadWeight::Rho => radial.eval(a),
                    QuadWeight::DRho => radial.deriv(a),
                };
                if rv == 0.0 {
                    return;
                }
                let tq = target - self.eps * a;
                let mut sum = 0.0;
                for g in 0..n {
                    let u = z_now.vals[g] - self.past_value(g, tq);
                    sum += self.grid.gauss_weight(g % GPC) * b_gauss.vals[g] * u * u;
                }
                acc += w * rv * sum;
            });
        } else {
            let s_pts = self.grid.gauss_points();
            let weight = |s: f64, a: f64| match wt {
                QuadWeight::Rho => kernel.rho(s, a),
                QuadWeight::DRho => kernel.drho_da(s, a),
            };
            self.walk_buffered(target, |lo, hi, _i, left, right, t_l| {
                let mid = 0.5 * (lo + hi);
                let half = 0.5 * (hi - lo);
                for (x, wq) in GAUSS4_X.iter().zip(GAUSS4_W.iter()) {
                    let a = mid + half * x;
                    let w = half * wq;
                    let th = (target - self.eps * a - t_l) / self.dt;
                    let mut sum = 0.0;
                    for (g, &s) in s_pts.iter().enumerate() {
                        let u = z_now.vals[g]
                            - ((1.0 - th) * left.values.vals[g] + th * right.values.vals[g]);
                        sum += self.grid.gauss_weight(g % GPC) * weight(s, a) * u * u;
                    }
                    acc += w * sum;
                }
            });
            self.walk_past(kernel, target, |a, w| {
                let tq = target - self.eps * a;
                let mut sum = 0.0;
                for (g, &s) in s_pts.iter().enumerate() {
                    let u = z_now.vals[g] - self.past_value(g, tq);
                    sum += self.grid.gauss_weight(g % GPC) * weight(s, a) * u * u;
                }
                acc += w * sum;
            });
        }
        acc
    }
}

fn retention(eps: f64, a_max: f64, dt: f64) -> usize {
    let ratio = eps * a_max / dt;
    // The float-to-int cast saturates, so absurd windows fail the memory
    // budget instead of overflowing.
    ((ratio * (1.0 - 1e-12)).ceil().max(0.0) as usize).saturating_add(2)
}

/// Weighted average the evolution conserves, fixed by the pre-initial data:
/// `int int z_p(s, -eps tau) phi(s, tau) ds dtau`.
///
/// At `eps = 0` this is the plain weighted mean `(z_p(0), mu1)`.
pub fn kappa(kernel: &KernelSpec, past: &PastData, grid: &Grid, eps: f64) -> Result<f64> {
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::Domain(format!("delay scale must be nonnegative, got {eps}")));
    }
    if eps == 0.0 {
        let z0 = past.eval(0.0).values_at_gauss(grid);
        let mu1 = grid.gauss_from_fn(|s| kernel.mu1_at(s));
        return Ok(grid.inner(&z0, &mu1));
    }
    let past_gauss: Vec<GaussData> =
        past.coeffs().iter().map(|c| c.values_at_gauss(grid)).collect();
    let a_mx = kernel.a_max();
    let mut acc = 0.0;
    let sep = kernel.separable_parts();
    let b_gauss = sep.map(|(b, _)| grid.gauss_from_fn(|s| b.eval(s)));
    let q: Option<Vec<f64>> =
        b_gauss.as_ref().map(|bg| past_gauss.iter().map(|c| grid.inner(bg, c)).collect());
    for (lo, hi) in kernel.panels().clipped(0.0, a_mx) {
        let mid = 0.5 * (lo + hi);
        let half = 0.5 * (hi - lo);
        for (x, w) in GAUSS8_X.iter().zip(GAUSS8_W.iter()) {
            let tau = mid + half * x;
            let w = half * w;
            let tq = -eps * tau;
            match (&sep, &q) {
                (Some((_, radial)), Some(q)) => {
                    let mut zp = 0.0;
                    let mut pw = 1.0;
                    for &qj in q {
                        zp += pw * qj;
                        pw *= tq;
                    }
                    acc += w * radial.phi(tau, a_mx) * zp;
                }
                _ => {
                    let mut sum = 0.0;
                    for (g, &s) in grid.gauss_points().iter().enumerate() {
                        let mut zp = 0.0;
                        let mut pw = 1.0;
                        for c in &past_gauss {
                            zp += pw * c.vals[g];
                            pw *= tq;
                        }
                        sum += grid.gauss_weight(g % GPC) * kernel.phi_at(s, tau) * zp;
                    }
                    acc += w * sum;
                }
            }
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{make_exponential_kernel, KernelOptions, KernelSpec, Radial};
    use crate::profile::{SpaceFn, SpaceTerm};

    fn unit_b(length: f64) -> SpaceFn {
        SpaceFn::constant(1.0, length)
    }

    fn exp_kernel(length: f64) -> KernelSpec {
        make_exponential_kernel(unit_b(length)).unwrap()
    }

    /// Power-law kernel with an explicit age cutoff; the tail-rule default
    /// would be astronomically large at these exponents.
    fn power_kernel(scale: f64, exponent: f64, b: SpaceFn, a_max: f64) -> KernelSpec {
        let opts = KernelOptions { a_max: Some(a_max), ..KernelOptions::default() };
        KernelSpec::separable(b, Radial::Power { scale, exponent }, Some(1.0), opts).unwrap()
    }

    fn grid(length: f64) -> Grid {
        Grid::new(length, 24).unwrap()
    }

    fn constant_field(grid: &Grid, c: f64) -> FieldState {
        FieldState::from_space_fn(grid, &SpaceFn::constant(c, grid.length))
    }

    fn ramp_past(grid: &Grid) -> PastData {
        // z_p(s, t) = t
        PastData::poly(vec![constant_field(grid, 0.0), constant_field(grid, 1.0)]).unwrap()
    }

    fn push_ramp(h: &mut History, grid: &Grid, until: f64) {
        let mut k = 1;
        while (k as f64) * h.dt() <= until + 1e-12 {
            h.push(constant_field(grid, k as f64 * h.dt())).unwrap();
            k += 1;
        }
    }

    #[test]
    fn retention_matches_examples() {
        let g = grid(1.0);
        let h = History::new(
            &g,
            PastData::constant(constant_field(&g, 0.0)),
            0.1,
            0.01,
            30.0,
            DEFAULT_HISTORY_BYTES,
        )
        .unwrap();
        assert_eq!(h.retention_slots(), 302);
        let h = History::new(
            &g,
            PastData::constant(constant_field(&g, 0.0)),
            1e-3,
            1e-3,
            40.0,
            DEFAULT_HISTORY_BYTES,
        )
        .unwrap();
        assert_eq!(h.retention_slots(), 42);
    }

    #[test]
    fn memory_budget_is_enforced() {
        let g = grid(1.0);
        let err = History::new(
            &g,
            PastData::constant(constant_field(&g, 0.0)),
            1.0,
            1e-7,
            40.0,
            1 << 20,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("increase dt"), "unexpected message: {msg}");
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = grid(1.0);
        let past = PastData::constant(constant_field(&g, 0.0));
        assert!(History::new(&g, past.clone(), 0.0, 0.01, 30.0, usize::MAX).is_err());
        assert!(History::new(&g, past.clone(), 0.1, 0.0, 30.0, usize::MAX).is_err());
        let other = Grid::new(1.0, 12).unwrap();
        let bad = PastData::constant(constant_field(&other, 0.0));
        assert!(History::new(&g, bad, 0.1, 0.01, 30.0, usize::MAX).is_err());
        let mut h = History::new(&g, past, 0.1, 0.01, 30.0, usize::MAX).unwrap();
        assert!(h.push(constant_field(&other, 0.0)).is_err());
    }

    #[test]
    fn eviction_keeps_one_spare_panel() {
        let g = grid(1.0);
        let past = PastData::constant(constant_field(&g, 0.0));
        let mut h = History::new(&g, past, 0.05, 0.01, 4.0, usize::MAX).unwrap();
        for k in 1..=200 {
            h.push(constant_field(&g, k as f64)).unwrap();
        }
        assert!(h.len() <= h.retention_slots());
        // Window is eps * a_max = 0.2, i.e. 20 panels plus margin.
        assert!(h.len() >= 21);
        assert!((h.t() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_trajectory_reproduces_mu() {
        let length = 2.0;
        let g = grid(length);
        let c = 1.7;
        let kernels = [
            make_exponential_kernel(SpaceFn::new(
                vec![SpaceTerm::Const { amp: 1.0 }, SpaceTerm::Linear { amp: 0.5 }],
                length,
            ))
            .unwrap(),
            power_kernel(1.0, 4.0, unit_b(length), 50.0),
        ];
        for kernel in &kernels {
            let past = PastData::constant(constant_field(&g, c));
            let mut h = History::new(&g, past, 0.3, 0.05, kernel.a_max(), usize::MAX).unwrap();
            for _ in 0..12 {
                h.push(constant_field(&g, c)).unwrap();
            }
            let src = h.delayed_source(kernel);
            for (gp, &s) in g.gauss_points().iter().enumerate() {
                assert!(
                    (src.vals[gp] - c * kernel.mu_at(s)).abs() < 1e-11,
                    "source mismatch at s = {s}"
                );
            }
            let op = h.delay_operator(kernel);
            assert!(op.vals.iter().all(|v| v.abs() < 1e-10));
            assert!(h.delay_energy(kernel).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_ramp_source_is_minus_eps() {
        // z identically the ramp t for t <= 0, queried at t = 0 with b = 1:
        // g = int (0 - eps a) e^{-a} da = -eps (up to the truncation tail).
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        for eps in [0.05, 0.4] {
            let h = History::new(&g, ramp_past(&g), eps, 0.01, kernel.a_max(), usize::MAX)
                .unwrap();
            let src = h.delayed_source(&kernel);
            for v in &src.vals {
                assert!((v + eps).abs() < 1e-10 * (1.0 + eps), "got {v} for eps {eps}");
            }
        }
    }

    #[test]
    fn linear_trajectory_gives_mu1_for_any_eps() {
        let length = 1.5;
        let g = grid(length);
        let b = SpaceFn::new(
            vec![
                SpaceTerm::Const { amp: 1.0 },
                SpaceTerm::Sin { amp: 0.3, mult: 1 },
            ],
            length,
        );
        let kernel = make_exponential_kernel(b).unwrap();
        for eps in [0.07, 0.5] {
            let mut h =
                History::new(&g, ramp_past(&g), eps, 0.02, kernel.a_max(), usize::MAX).unwrap();
            push_ramp(&mut h, &g, 1.0);
            assert!((h.t() - 1.0).abs() < 1e-12);
            let op = h.delay_operator(&kernel);
            for (gp, &s) in g.gauss_points().iter().enumerate() {
                assert!(
                    (op.vals[gp] - kernel.mu1_at(s)).abs() < 1e-9,
                    "eps {eps}: operator {} vs mu1 {}",
                    op.vals[gp],
                    kernel.mu1_at(s)
                );
            }
        }
    }

    #[test]
    fn quadratic_trajectory_matches_closed_form() {
        // z(s, tau) = tau^2 at t = 1, eps = 0.1, b = 1 on [0, 1]:
        // L[z] = eps^{-1} int (1 - (1 - eps a)^2) e^{-a} da = 2 mu1 - eps mu2,
        // which is 1.8 up to the truncation tail and O(dt^2) interpolation.
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        let eps = 0.1;
        let dt = 1e-3;
        let past = PastData::poly(vec![
            constant_field(&g, 0.0),
            constant_field(&g, 0.0),
            constant_field(&g, 1.0),
        ])
        .unwrap();
        let mut h = History::new(&g, past, eps, dt, kernel.a_max(), usize::MAX).unwrap();
        let mut k = 1;
        while (k as f64) * dt <= 1.0 + 1e-12 {
            let t = k as f64 * dt;
            h.push(constant_field(&g, t * t)).unwrap();
            k += 1;
        }
        let op = h.delay_operator(&kernel);
        for v in &op.vals {
            assert!((v - 1.8).abs() < 1e-5, "got {v}");
        }
    }

    #[test]
    fn source_error_is_second_order_in_dt() {
        // z(s, tau) = cos(tau) p(s): the delayed source is p(s) C(t) with
        // C(t) = int_0^A cos(t - eps a) e^{-a} da known in closed form.
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        let eps = 0.02;
        let t_end = 1.0;
        let profile = FieldState::from_space_fn(
            &g,
            &SpaceFn::new(
                vec![
                    SpaceTerm::Const { amp: 1.0 },
                    SpaceTerm::Sin { amp: 0.3, mult: 1 },
                ],
                length,
            ),
        );
        let a_mx = kernel.a_max();
        let alpha = -1.0 / (1.0 + eps * eps);
        let beta = -eps / (1.0 + eps * eps);
        let anti = |a: f64| {
            (-a).exp() * (alpha * (t_end - eps * a).cos() + beta * (t_end - eps * a).sin())
        };
        let c_exact = anti(a_mx) - anti(0.0);
        let err_for = |dt: f64| -> f64 {
            let past = PastData::constant(profile.clone());
            let mut h = History::new(&g, past, eps, dt, a_mx, usize::MAX).unwrap();
            let mut k = 1;
            while (k as f64) * dt <= t_end + 1e-12 {
                let mut state = profile.clone();
                state.scale((k as f64 * dt).cos());
                h.push(state).unwrap();
                k += 1;
            }
            let src = h.delayed_source(&kernel);
            let pg = profile.values_at_gauss(&g);
            src.vals
                .iter()
                .zip(pg.vals.iter())
                .map(|(s, p)| (s - c_exact * p).abs())
                .fold(0.0, f64::max)
        };
        let e1 = err_for(0.02);
        let e2 = err_for(0.01);
        let ratio = e1 / e2;
        assert!((3.2..4.8).contains(&ratio), "e1 {e1:.3e}, e2 {e2:.3e}, ratio {ratio:.2}");
    }

    #[test]
    fn step_source_linear_matches_committed_advance() {
        // Advancing the buffer by the very state the linear rule weights
        // must reproduce the plain delayed source at the new time.
        let length = 1.0;
        let g = grid(length);
        for kernel in [
            exp_kernel(length),
            power_kernel(1.0, 3.0, unit_b(length), 40.0),
        ] {
            let eps = 0.12;
            let dt = 0.02;
            let mut h =
                History::new(&g, ramp_past(&g), eps, dt, kernel.a_max(), usize::MAX).unwrap();
            push_ramp(&mut h, &g, 0.3);
            let next = constant_field(&g, h.t() + dt);
            let split = h.step_source(&kernel, SubDtRule::Linear);
            let predicted = split.eval(&next.values_at_gauss(&g));
            let mut advanced = h.clone();
            advanced.push(next).unwrap();
            let direct = advanced.delayed_source(&kernel);
            for (p, d) in predicted.vals.iter().zip(direct.vals.iter()) {
                assert!((p - d).abs() < 1e-12, "{p} vs {d}");
            }
            // The lumped rule deliberately differs at first order in dt.
            let lumped = h.step_source(&kernel, SubDtRule::Lumped);
            let lp = lumped.eval(&constant_field(&g, h.t() + dt).values_at_gauss(&g));
            let gap = lp
                .vals
                .iter()
                .zip(direct.vals.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap > 1e-6, "lumped rule unexpectedly exact, gap {gap:.3e}");
        }
    }

    #[test]
    fn theta_tracks_linear_trajectory_formula() {
        // Along z = tau (not a solution), theta(t) = t int mu1 - eps C with
        // C = int int tau phi = int b * int a^2 r / 2.
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        let eps = 0.2;
        let mut h = History::new(&g, ramp_past(&g), eps, 0.01, kernel.a_max(), usize::MAX)
            .unwrap();
        let mu1_int = g.integrate(&g.gauss_from_fn(|s| kernel.mu1_at(s)));
        let radial = kernel.separable_parts().unwrap().1;
        let c = radial.int_a2r(0.0, kernel.a_max()) / 2.0;
        assert!((h.theta(&kernel) + eps * c).abs() < 1e-10);
        push_ramp(&mut h, &g, 0.5);
        let expect = h.t() * mu1_int - eps * c;
        assert!(
            (h.theta(&kernel) - expect).abs() < 1e-10,
            "theta {} vs {}",
            h.theta(&kernel),
            expect
        );
    }

    #[test]
    fn theta_at_start_equals_kappa() {
        let length = 1.3;
        let g = grid(length);
        let kernel = power_kernel(0.8, 3.0, unit_b(length), 40.0);
        let past = PastData::poly(vec![
            FieldState::from_space_fn(
                &g,
                &SpaceFn::new(vec![SpaceTerm::Linear { amp: 1.0 }], length),
            ),
            constant_field(&g, -0.4),
        ])
        .unwrap();
        let eps = 0.15;
        let h = History::new(&g, past.clone(), eps, 0.01, kernel.a_max(), usize::MAX).unwrap();
        let k = kappa(&kernel, &past, &g, eps).unwrap();
        assert!((h.theta(&kernel) - k).abs() < 1e-11);
    }

    #[test]
    fn kappa_closed_forms() {
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        let radial = kernel.separable_parts().unwrap().1;
        let a_mx = kernel.a_max();

        // Constant past: kappa = c * int mu1 for every eps, including 0.
        let c = 2.5;
        let past = PastData::constant(constant_field(&g, c));
        let mu1_int = g.integrate(&g.gauss_from_fn(|s| kernel.mu1_at(s)));
        for eps in [0.0, 0.3, 2.0] {
            let k = kappa(&kernel, &past, &g, eps).unwrap();
            assert!((k - c * mu1_int).abs() < 1e-10, "eps {eps}: {k} vs {}", c * mu1_int);
        }

        // z_p(s) = s constant in time: kappa = 1/2 up to truncation.
        let slope = PastData::constant(FieldState::from_space_fn(
            &g,
            &SpaceFn::new(vec![SpaceTerm::Linear { amp: 1.0 }], length),
        ));
        for eps in [0.0, 0.7] {
            let k = kappa(&kernel, &slope, &g, eps).unwrap();
            assert!((k - 0.5).abs() < 1e-9, "eps {eps}: {k}");
        }

        // Ramp past z_p = t: kappa = -eps int tau phi = -eps int a^2 r / 2.
        let eps = 0.35;
        let k = kappa(&kernel, &ramp_past(&g), &g, eps).unwrap();
        let expect = -eps * radial.int_a2r(0.0, a_mx) / 2.0;
        assert!((k - expect).abs() < 1e-10, "{k} vs {expect}");

        assert!(kappa(&kernel, &ramp_past(&g), &g, -0.1).is_err());
    }

    #[test]
    fn delay_energy_of_ramp_is_eps_scaled_second_moment() {
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        let radial = kernel.separable_parts().unwrap().1;
        for eps in [0.08, 0.5] {
            let mut h =
                History::new(&g, ramp_past(&g), eps, 0.01, kernel.a_max(), usize::MAX).unwrap();
            push_ramp(&mut h, &g, 0.1);
            let expect = eps * radial.int_a2r(0.0, kernel.a_max()) / 2.0 * length;
            let e = h.delay_energy(&kernel);
            assert!((e - expect).abs() < 1e-10 * (1.0 + expect), "eps {eps}: {e} vs {expect}");
            // For the pure exponential kernel the dissipation identity is
            // exact: rate = -energy / eps.
            let rate = h.dissipation_rate(&kernel).unwrap();
            assert!((rate + e / eps).abs() < 1e-10 * (1.0 + e / eps));
        }
    }

    #[test]
    fn dissipation_nonpositive_for_monotone_kernels() {
        let length = 1.0;
        let g = grid(length);
        let kernels = [
            power_kernel(1.2, 3.5, unit_b(length), 40.0),
            exp_kernel(length),
        ];
        for kernel in &kernels {
            let past = PastData::poly(vec![
                FieldState::from_space_fn(
                    &g,
                    &SpaceFn::new(
                        vec![SpaceTerm::Sin { amp: 0.5, mult: 1 }],
                        length,
                    ),
                ),
                constant_field(&g, 0.6),
            ])
            .unwrap();
            let mut h = History::new(&g, past, 0.25, 0.02, kernel.a_max(), usize::MAX).unwrap();
            for k in 1..=20 {
                let t = k as f64 * 0.02;
                let mut state = constant_field(&g, 0.6 * t);
                state.axpy(
                    (1.0 + t).ln(),
                    &FieldState::from_space_fn(
                        &g,
                        &SpaceFn::new(
                            vec![SpaceTerm::Cos { amp: 0.2, mult: 2 }],
                            length,
                        ),
                    ),
                );
                h.push(state).unwrap();
            }
            let rate = h.dissipation_rate(kernel).unwrap();
            assert!(rate <= 0.0, "rate {rate}");
            let e = h.delay_energy(kernel);
            assert!(e >= 0.0, "energy {e} for kernel a_max {}", kernel.a_max());
        }
    }

    #[test]
    fn sub_dt_covers_whole_support_for_tiny_eps() {
        // When dt/eps exceeds a_max the entire kernel mass sits in the
        // sub-step panel; both rules must still produce a consistent source.
        let length = 1.0;
        let g = grid(length);
        let kernel = exp_kernel(length);
        let eps = 1e-5;
        let dt = 1e-2;
        let c = 0.9;
        let past = PastData::constant(constant_field(&g, c));
        let h = History::new(&g, past, eps, dt, kernel.a_max(), usize::MAX).unwrap();
        for rule in [SubDtRule::Lumped, SubDtRule::Linear] {
            let split = h.step_source(&kernel, rule);
            let src = split.eval(&constant_field(&g, c).values_at_gauss(&g));
            for (gp, &s) in g.gauss_points().iter().enumerate() {
                assert!((src.vals[gp] - c * kernel.mu_at(s)).abs() < 1e-11);
            }
        }
    }
}
