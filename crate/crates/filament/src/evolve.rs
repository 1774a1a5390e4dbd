//! Time marching for the delayed equation and for its parabolic limit.
//!
//! The delayed march treats each step as an elliptic solve: with the history
//! frozen, the new state satisfies `mu z + eps z'''' - eps (F'(z'))' = g`
//! where `g` collects the age average of earlier states.  The linear part is
//! factored once per run ([`Resolvent`]) and the nonlinearity is handled by a
//! fixed-point loop whose contraction improves as `eps` shrinks.
//!
//! The limit march (`eps = 0`) is a backward Euler scheme for
//! `mu1 dz/dt + z'''' - (F'(z'))' = 0`, solved with a damped Newton
//! iteration on the exact Jacobian.
//!
//! Both marches record the same diagnostic series and share the
//! stabilization detector, which matches the trajectory against steady
//! profiles whose additive constants are pinned by the conserved pairing
//! with `mu1`.

use crate::delay::{kappa, History, PastData, SubDtRule, DEFAULT_HISTORY_BYTES};
use crate::kernel::KernelSpec;
use crate::spatial::{
    assemble_bending, assemble_gradient_weighted, assemble_weighted_mass, nonlinear_form, norms,
    FieldState, GaussData, Grid, Resolvent, SymBanded,
};
use crate::steady::{
    build_field, constant_for_target, enumerate, mechanical_energy, shift_constant, SteadyField,
    DEFAULT_RESIDUAL_TOL,
};
use crate::{double_well_d, double_well_dd, Error, Result};

/// Parameters of a time march.  `eps` and the kernel are passed separately;
/// everything here is meaningful for both the delayed and the limit runs
/// (Newton fields are ignored by the delayed march and vice versa).
#[derive(Debug, Clone)]
pub struct MarchParams {
    /// Time step.
    pub dt: f64,
    /// Final time; the march stops earlier on stabilization.
    pub t_end: f64,
    /// Relative tolerance of the per-step fixed-point loop.
    pub fp_tol: f64,
    /// Iteration cap of the fixed-point loop.
    pub fp_max_iters: usize,
    /// Relative tolerance of the per-step Newton solve.  The residual is a
    /// dual-space vector whose roundoff floor grows like the bending matrix
    /// norm (`~ h^-3`), so very tight values stagnate on fine grids.
    pub newton_tol: f64,
    /// Iteration cap of the Newton solve.
    pub newton_max_iters: usize,
    /// Replace Newton by one linear solve per step with the nonlinear term
    /// taken explicitly.  First-order consistent and always solvable; useful
    /// when the exact Jacobian is indefinite at a stiff start.
    pub semi_implicit: bool,
    /// Age-average rule for the sub-step part of the delay integral.
    pub sub_dt: SubDtRule,
    /// Record diagnostics every this many steps.
    pub output_every: usize,
    /// `||dz/dt||_{L^2}` threshold below which a recorded step counts as
    /// quiet; stabilization needs a full window of quiet records.
    pub stab_tol: f64,
    /// Number of consecutive quiet records required before the trajectory is
    /// matched against steady profiles.
    pub stab_window: usize,
    /// `H^2` distance below which a steady profile counts as reached.
    pub branch_tol: f64,
    /// Residual tolerance for assembling the steady profiles used by the
    /// stabilization detector.
    pub res_tol: f64,
    /// Memory budget for the rolling history buffer (delayed march only).
    pub history_bytes: usize,
}

impl Default for MarchParams {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            t_end: 1.0,
            fp_tol: 1e-10,
            fp_max_iters: 80,
            newton_tol: 1e-9,
            newton_max_iters: 25,
            semi_implicit: false,
            sub_dt: SubDtRule::default(),
            output_every: 1,
            stab_tol: 1e-6,
            stab_window: 20,
            branch_tol: 1e-3,
            res_tol: DEFAULT_RESIDUAL_TOL,
            history_bytes: DEFAULT_HISTORY_BYTES,
        }
    }
}

impl MarchParams {
    /// Defaults with the step tied to the delay scale, `dt = eps / 20`.
    pub fn for_eps(eps: f64, t_end: f64) -> Self {
        Self { dt: eps / 20.0, t_end, ..Self::default() }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::config("run.dt", "time step must be positive"));
        }
        if !(self.t_end.is_finite() && self.t_end >= self.dt) {
            return Err(Error::config("run.t_end", "final time must be at least one step"));
        }
        if !(self.fp_tol.is_finite() && self.fp_tol > 0.0 && self.fp_tol < 1.0) {
            return Err(Error::config("run.fp_tol", "tolerance must lie in (0, 1)"));
        }
        if !(self.newton_tol.is_finite() && self.newton_tol > 0.0 && self.newton_tol < 1.0) {
            return Err(Error::config("run.newton_tol", "tolerance must lie in (0, 1)"));
        }
        if self.fp_max_iters == 0 || self.newton_max_iters == 0 {
            return Err(Error::config("run.max_iters", "iteration caps must be at least 1"));
        }
        if self.output_every == 0 {
            return Err(Error::config("run.output_every", "output cadence must be at least 1"));
        }
        if self.stab_window == 0 {
            return Err(Error::config("run.stab_window", "stabilization window must be at least 1"));
        }
        if !(self.stab_tol > 0.0 && self.branch_tol > 0.0 && self.res_tol > 0.0) {
            return Err(Error::config("run.stab_tol", "detection tolerances must be positive"));
        }
        Ok(())
    }
}

/// Outcome of a single accepted step.
#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    /// Inner iterations spent (fixed-point or Newton).
    pub iters: usize,
    /// Fixed point: last observed contraction ratio `|d_m| / |d_{m-1}|`
    /// (zero when the loop converged before a ratio existed).  Newton: the
    /// final scaled residual.
    pub ratio: f64,
}

/// One row of the diagnostic series.
#[derive(Debug, Clone, Copy)]
pub struct DiagRow {
    pub t: f64,
    /// Total energy: bending + well + age-weighted memory term.  Limit runs
    /// carry the mechanical part only.
    pub energy: f64,
    /// Memory part of the energy (zero for limit runs).
    pub delay_energy: f64,
    /// Instantaneous energy dissipation rate (nonpositive).  Limit runs
    /// report the discrete rate `-(mu1 (dz/dt), dz/dt)` of the last step.
    pub dissipation_rate: f64,
    /// Age-averaged conserved pairing; for limit runs this coincides with
    /// `mu1_inner`.
    pub theta: f64,
    /// `(z, mu1)` at this time.
    pub mu1_inner: f64,
    /// Inner iterations of the step ending at `t` (zero on the initial row).
    pub fp_iters: usize,
    /// See [`StepReport::ratio`].
    pub contraction: f64,
    /// `||dz/dt||_{L^2}` of the step ending at `t`.
    pub rate_l2: f64,
    /// Running `sum dt ||dz/dt||^2` over all steps so far.
    pub cum_rate_sq: f64,
    /// Running `sum dt (mu1 dz/dt, dz/dt)` over all steps so far.
    pub cum_weighted_rate_sq: f64,
}

/// How a march ended.
#[derive(Debug, Clone)]
pub enum RunStatus {
    /// Marched to `t_end` without meeting the stabilization criterion.
    ReachedTEnd,
    /// Trajectory settled onto a steady profile.
    Stabilized { branch: SteadyField, t: f64 },
    /// The per-step fixed-point loop hit its iteration cap; the trajectory
    /// up to the last accepted step is kept.
    FixedPointFailure { t: f64, ratio: f64 },
}

/// Recorded trajectory of a march; all vectors share the output cadence.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<FieldState>,
    pub series: Vec<DiagRow>,
    /// Conserved target the trajectory relaxes around: the age-weighted
    /// pairing of the past for a delayed run, `(z(0), mu1)` for a limit run.
    pub kappa: f64,
    pub status: RunStatus,
}

impl Trajectory {
    pub fn terminal(&self) -> &FieldState {
        self.states.last().expect("trajectory holds at least the initial state")
    }
}

/// `H^2` distance between two fields on the same grid.
pub fn h2_distance(grid: &Grid, a: &FieldState, b: &FieldState) -> f64 {
    norms(grid, &a.sub(b)).h2()
}

/// One step of the delayed march: fixed-point iteration on
/// `z -> R[F'(z'), g(z)]` where `R` is the factored linear solve and `g`
/// splits the age average into a frozen part and a weight on the iterate.
/// Starts from the latest state; stops when the `H^2` update drops below
/// `fp_tol * (1 + ||z||_{H^2})`.
///
/// The map contracts only for small delay scales: the dominant eigenmode is
/// a boundary layer of width `(eps/mu)^(1/4)` fed by the slope forcing, with
/// spectral radius close to `max|F''(z')| sqrt(eps/mu)` (plus the small
/// sub-step weight of the current state in the delayed source).  Contraction
/// therefore requires roughly `eps < mu / max|F''|^2`, which is `mu/64` when
/// slopes reach the well minima; raising the kernel amplitude buys back
/// delay scale.  Beyond the threshold the iteration amplifies its own
/// updates; persistent growth is reported as a fixed-point failure rather
/// than iterating to the cap, since the relative stop test alone would
/// eventually accept a blown-up state.
pub fn step_delayed(
    history: &History,
    resolvent: &Resolvent,
    kernel: &KernelSpec,
    rule: SubDtRule,
    fp_tol: f64,
    fp_max_iters: usize,
) -> Result<(FieldState, StepReport)> {
    let grid = history.grid();
    let t_next = history.t() + history.dt();
    let source = history.step_source(kernel, rule);
    let mut z = history.latest().clone();
    let mut first_update = f64::NAN;
    let mut prev_update = f64::NAN;
    let mut ratio = 0.0;
    for m in 1..=fp_max_iters {
        let g = source.eval(&z.values_at_gauss(grid));
        let f = z.slopes_at_gauss(grid).map(double_well_d);
        let next = resolvent.solve(&f, &g);
        let update = norms(grid, &next.sub(&z)).h2();
        if !update.is_finite() {
            return Err(Error::FixedPoint { t: t_next, iters: m, ratio });
        }
        if prev_update.is_finite() && prev_update > 0.0 {
            ratio = update / prev_update;
        }
        if !first_update.is_finite() {
            first_update = update;
        }
        prev_update = update;
        z = next;
        if update <= fp_tol * (1.0 + norms(grid, &z).h2()) {
            return Ok((z, StepReport { iters: m, ratio }));
        }
        if m >= 3 && ratio > 1.0 && update > 10.0 * first_update {
            return Err(Error::FixedPoint { t: t_next, iters: m, ratio });
        }
    }
    Err(Error::FixedPoint { t: t_next, iters: fp_max_iters, ratio })
}

/// March the delayed equation from the given past.  The state at `t = 0` is
/// the past's endpoint; the first computed step generally jumps away from it.
/// Stops at `t_end`, on stabilization, or on a fixed-point failure (the
/// latter two are reported in [`Trajectory::status`], not as errors).
pub fn run_delayed(
    grid: &Grid,
    kernel: &KernelSpec,
    past: PastData,
    eps: f64,
    params: &MarchParams,
) -> Result<Trajectory> {
    params.validate()?;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::config("run.eps", "delayed march needs eps > 0; use the limit march for eps = 0"));
    }
    let mu = grid.gauss_from_fn(|s| kernel.mu_at(s));
    let mu1 = grid.gauss_from_fn(|s| kernel.mu1_at(s));
    let resolvent = Resolvent::new(grid, &mu, eps)?;
    let mass_w = assemble_weighted_mass(grid, &mu1)?;
    let kap = kappa(kernel, &past, grid, eps)?;
    let targets = stabilization_targets(grid, &mu1, kap, params.res_tol)?;
    let mut history = History::new(grid, past, eps, params.dt, kernel.a_max(), params.history_bytes)?;

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        series: Vec::new(),
        kappa: kap,
        status: RunStatus::ReachedTEnd,
    };
    let mut cums = CumRates::default();
    record_delayed(&mut traj, &history, kernel, &mu1, StepReport { iters: 0, ratio: 0.0 }, 0.0, &cums)?;

    let n_steps = steps_for(params.t_end, params.dt);
    let mut detector = StabDetector::new(params);
    for k in 1..=n_steps {
        let (z, report) =
            match step_delayed(&history, &resolvent, kernel, params.sub_dt, params.fp_tol, params.fp_max_iters) {
                Ok(v) => v,
                Err(Error::FixedPoint { t, ratio, .. }) => {
                    traj.status = RunStatus::FixedPointFailure { t, ratio };
                    return Ok(traj);
                }
                Err(e) => return Err(e),
            };
        let rate = cums.absorb(grid, &mass_w, &z.sub(history.latest()), params.dt);
        history.push(z)?;
        if k % params.output_every == 0 || k == n_steps {
            record_delayed(&mut traj, &history, kernel, &mu1, report, rate, &cums)?;
            if let Some(branch) = detector.observe(grid, &traj, rate, &targets)? {
                traj.status = RunStatus::Stabilized { branch, t: history.t() };
                break;
            }
        }
    }
    Ok(traj)
}

/// One backward Euler step of the limit problem,
/// `(mu1 (z+ - z), v) / dt + (z+'', v'') + (F'(z+'), v') = 0`,
/// solved by damped Newton on the exact Jacobian (step halving until the
/// residual decreases).  With `semi_implicit` set, the nonlinear term is
/// frozen at `z` and the step is a single positive definite solve.
pub fn step_limit(
    grid: &Grid,
    forms: &LimitForms,
    z: &FieldState,
    dt: f64,
    t_next: f64,
    params: &MarchParams,
) -> Result<(FieldState, StepReport)> {
    let residual = |cand: &FieldState| -> Vec<f64> {
        let mut r = forms.mass_w.matvec(&cand.sub(z).dofs);
        let bend = forms.bending.matvec(&cand.dofs);
        let well = nonlinear_form(grid, cand);
        for (i, ri) in r.iter_mut().enumerate() {
            *ri = *ri / dt + bend[i] + well[i];
        }
        r
    };
    let l2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    if params.semi_implicit {
        let system = forms.bending.scaled_add(1.0 / dt, &forms.mass_w);
        let chol = system.cholesky()?;
        let mut rhs = forms.mass_w.matvec(&z.dofs);
        let well = nonlinear_form(grid, z);
        for (i, ri) in rhs.iter_mut().enumerate() {
            *ri = *ri / dt - well[i];
        }
        let next = FieldState { dofs: chol.solve(&rhs) };
        let scaled = l2(&residual(&next)) / (1.0 + norms(grid, &next).h2());
        return Ok((next, StepReport { iters: 1, ratio: scaled }));
    }

    let mut cand = z.clone();
    let mut r = residual(&cand);
    let mut rn = l2(&r);
    let mut iters = 0usize;
    loop {
        let scale = 1.0 + norms(grid, &cand).h2();
        if rn <= params.newton_tol * scale {
            return Ok((cand, StepReport { iters, ratio: rn / scale }));
        }
        if iters >= params.newton_max_iters {
            return Err(Error::NewtonStagnation { t: t_next, iters, residual: rn });
        }
        iters += 1;
        let stiffness = cand.slopes_at_gauss(grid).map(double_well_dd);
        let jacobian = forms
            .bending
            .scaled_add(1.0 / dt, &forms.mass_w)
            .scaled_add(1.0, &assemble_gradient_weighted(grid, &stiffness));
        let chol = jacobian.cholesky()?;
        let direction = chol.solve(&r.iter().map(|x| -x).collect::<Vec<_>>());
        let mut lambda = 1.0;
        loop {
            let mut trial = cand.clone();
            for (d, s) in trial.dofs.iter_mut().zip(direction.iter()) {
                *d += lambda * s;
            }
            let trial_r = residual(&trial);
            let trial_rn = l2(&trial_r);
            if trial_rn < rn {
                cand = trial;
                r = trial_r;
                rn = trial_rn;
                break;
            }
            lambda *= 0.5;
            if lambda < 1.0 / 512.0 {
                return Err(Error::NewtonStagnation { t: t_next, iters, residual: rn });
            }
        }
    }
}

/// Assembled bilinear forms reused across limit steps.
pub struct LimitForms {
    /// `(mu1 u, v)`.
    pub mass_w: SymBanded,
    /// `(u'', v'')`.
    pub bending: SymBanded,
}

impl LimitForms {
    pub fn new(grid: &Grid, weight: &GaussData) -> Result<Self> {
        Ok(Self { mass_w: assemble_weighted_mass(grid, weight)?, bending: assemble_bending(grid) })
    }
}

/// March the limit problem (`eps = 0`) from the given initial state.  The
/// pairing `(z, mu1)` is conserved by the scheme up to solver tolerance and
/// is recorded each row.
pub fn run_limit(
    grid: &Grid,
    kernel: &KernelSpec,
    initial: &FieldState,
    params: &MarchParams,
) -> Result<Trajectory> {
    params.validate()?;
    if initial.dofs.len() != grid.n_dofs() {
        return Err(Error::Discretization("initial state does not match the grid".into()));
    }
    let mu1 = grid.gauss_from_fn(|s| kernel.mu1_at(s));
    let forms = LimitForms::new(grid, &mu1)?;
    let kap = grid.inner(&initial.values_at_gauss(grid), &mu1);
    let targets = stabilization_targets(grid, &mu1, kap, params.res_tol)?;

    let mut traj = Trajectory {
        times: Vec::new(),
        states: Vec::new(),
        series: Vec::new(),
        kappa: kap,
        status: RunStatus::ReachedTEnd,
    };
    let mut cums = CumRates::default();
    let mut z = initial.clone();
    record_limit(&mut traj, grid, &z, &mu1, 0.0, StepReport { iters: 0, ratio: 0.0 }, 0.0, 0.0, &cums);

    let n_steps = steps_for(params.t_end, params.dt);
    let mut detector = StabDetector::new(params);
    for k in 1..=n_steps {
        let t_next = k as f64 * params.dt;
        let (next, report) = step_limit(grid, &forms, &z, params.dt, t_next, params)?;
        let diff = next.sub(&z);
        let rate = cums.absorb(grid, &forms.mass_w, &diff, params.dt);
        let weighted_sq = forms.mass_w.quadratic_form(&diff.dofs) / (params.dt * params.dt);
        z = next;
        if k % params.output_every == 0 || k == n_steps {
            record_limit(&mut traj, grid, &z, &mu1, t_next, report, rate, -weighted_sq, &cums);
            if let Some(branch) = detector.observe(grid, &traj, rate, &targets)? {
                traj.status = RunStatus::Stabilized { branch, t: t_next };
                break;
            }
        }
    }
    Ok(traj)
}

/// Steady profiles against which a trajectory is matched: every census
/// branch, with its additive constant chosen so `(Z, mu1)` equals the
/// conserved `target`.  A degenerate census (length resonant with the
/// oscillatory half-period) yields no targets rather than an error, since
/// the march itself is unaffected.
pub fn stabilization_targets(
    grid: &Grid,
    mu1: &GaussData,
    target: f64,
    res_tol: f64,
) -> Result<Vec<SteadyField>> {
    let branches = match enumerate(grid.length) {
        Ok(b) => b,
        Err(Error::Degenerate(_)) => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::with_capacity(branches.len());
    for branch in branches {
        let base = build_field(&branch, 0.0, grid, res_tol)?;
        let c = constant_for_target(grid, &base.field, mu1, target)?;
        let mut field = base.field;
        shift_constant(&mut field, c);
        out.push(SteadyField { branch, c, field, residual: base.residual });
    }
    Ok(out)
}

/// Match the tail of a trajectory against steady targets.  Returns the
/// unique target whose `H^2` distance to the terminal state is below `tol`,
/// provided every state in the last `window` records also stays within
/// `tol`; `None` if no target qualifies.  Proximity must persist rather
/// than decrease: at the discrete floor the distance chatters by iteration
/// noise, so monotonicity would never hold.  Two targets within tolerance
/// of the terminal state is an ambiguity error.
pub fn detect_stabilization(
    grid: &Grid,
    states: &[FieldState],
    targets: &[SteadyField],
    window: usize,
    tol: f64,
) -> Result<Option<SteadyField>> {
    let Some(terminal) = states.last() else { return Ok(None) };
    if states.len() < window {
        return Ok(None);
    }
    let mut hits: Vec<(usize, f64)> = Vec::new();
    for (i, target) in targets.iter().enumerate() {
        let d = h2_distance(grid, terminal, &target.field);
        if d < tol {
            hits.push((i, d));
        }
    }
    if hits.len() > 1 {
        hits.sort_by(|a, b| a.1.total_cmp(&b.1));
        return Err(Error::AmbiguousBranch {
            first: targets[hits[0].0].branch.label(),
            second: targets[hits[1].0].branch.label(),
            tol,
        });
    }
    let Some(&(idx, _)) = hits.first() else { return Ok(None) };
    let field = &targets[idx].field;
    let tail = &states[states.len() - window..];
    for state in tail {
        if h2_distance(grid, state, field) >= tol {
            return Ok(None);
        }
    }
    Ok(Some(targets[idx].clone()))
}

fn steps_for(t_end: f64, dt: f64) -> usize {
    ((t_end / dt) - 1e-9).ceil().max(1.0) as usize
}

#[derive(Default)]
struct CumRates {
    rate_sq: f64,
    weighted_rate_sq: f64,
}

impl CumRates {
    /// Fold one step increment `diff = z_new - z_old` into the running sums;
    /// returns the step's `||dz/dt||_{L^2}`.
    fn absorb(&mut self, grid: &Grid, mass_w: &SymBanded, diff: &FieldState, dt: f64) -> f64 {
        let rate = norms(grid, diff).l2 / dt;
        self.rate_sq += dt * rate * rate;
        self.weighted_rate_sq += mass_w.quadratic_form(&diff.dofs) / dt;
        rate
    }
}

struct StabDetector {
    quiet: usize,
    window: usize,
    stab_tol: f64,
    branch_tol: f64,
}

impl StabDetector {
    fn new(params: &MarchParams) -> Self {
        Self {
            quiet: 0,
            window: params.stab_window,
            stab_tol: params.stab_tol,
            branch_tol: params.branch_tol,
        }
    }

    /// Feed one recorded step; once a full window of records is quiet, try
    /// to match the trajectory tail against the steady targets.
    fn observe(
        &mut self,
        grid: &Grid,
        traj: &Trajectory,
        rate: f64,
        targets: &[SteadyField],
    ) -> Result<Option<SteadyField>> {
        if rate < self.stab_tol {
            self.quiet += 1;
        } else {
            self.quiet = 0;
        }
        if self.quiet < self.window || targets.is_empty() {
            return Ok(None);
        }
        let tail_len = self.window.min(traj.states.len());
        let tail = &traj.states[traj.states.len() - tail_len..];
        detect_stabilization(grid, tail, targets, tail_len, self.branch_tol)
    }
}

#[allow(clippy::too_many_arguments)]
fn record_delayed(
    traj: &mut Trajectory,
    history: &History,
    kernel: &KernelSpec,
    mu1: &GaussData,
    report: StepReport,
    rate: f64,
    cums: &CumRates,
) -> Result<()> {
    let grid = history.grid();
    let state = history.latest();
    let delay_energy = history.delay_energy(kernel);
    let row = DiagRow {
        t: history.t(),
        energy: mechanical_energy(grid, state) + delay_energy,
        delay_energy,
        dissipation_rate: history.dissipation_rate(kernel)?,
        theta: history.theta(kernel),
        mu1_inner: grid.inner(&state.values_at_gauss(grid), mu1),
        fp_iters: report.iters,
        contraction: report.ratio,
        rate_l2: rate,
        cum_rate_sq: cums.rate_sq,
        cum_weighted_rate_sq: cums.weighted_rate_sq,
    };
    traj.times.push(row.t);
    traj.states.push(state.clone());
    traj.series.push(row);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn record_limit(
    traj: &mut Trajectory,
    grid: &Grid,
    state: &FieldState,
    mu1: &GaussData,
    t: f64,
    report: StepReport,
    rate: f64,
    dissipation: f64,
    cums: &CumRates,
) {
    let mu1_inner = grid.inner(&state.values_at_gauss(grid), mu1);
    let row = DiagRow {
        t,
        energy: mechanical_energy(grid, state),
        delay_energy: 0.0,
        dissipation_rate: dissipation,
        theta: mu1_inner,
        mu1_inner,
        fp_iters: report.iters,
        contraction: report.ratio,
        rate_l2: rate,
        cum_rate_sq: cums.rate_sq,
        cum_weighted_rate_sq: cums.weighted_rate_sq,
    };
    traj.times.push(t);
    traj.states.push(state.clone());
    traj.series.push(row);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{make_exponential_kernel, KernelOptions, Radial};
    use crate::profile::{SpaceFn, SpaceTerm};
    use crate::steady::BranchKind;

    fn grid(length: f64) -> Grid {
        Grid::new(length, 24).unwrap()
    }

    fn exp_kernel(length: f64) -> KernelSpec {
        make_exponential_kernel(SpaceFn::constant(1.0, length)).unwrap()
    }

    fn power_kernel(length: f64, exponent: f64, a_max: f64) -> KernelSpec {
        KernelSpec::separable(
            SpaceFn::constant(1.0, length),
            Radial::Power { scale: 1.0, exponent },
            Some(1.0),
            KernelOptions { a_max: Some(a_max), ..KernelOptions::default() },
        )
        .unwrap()
    }

    fn affine_state(grid: &Grid, slope: f64, c: f64) -> FieldState {
        let branch = enumerate(grid.length)
            .unwrap()
            .into_iter()
            .find(|b| matches!(b.kind, BranchKind::ConstantSlope(v) if v == slope))
            .unwrap();
        let mut f = build_field(&branch, 0.0, grid, 1e-6).unwrap().field;
        shift_constant(&mut f, c);
        f
    }

    fn bump_term(amp: f64) -> SpaceTerm {
        SpaceTerm::Sin { amp, mult: 1 }
    }

    fn field_from_fn(grid: &Grid, f: impl Fn(f64) -> (f64, f64)) -> FieldState {
        let mut dofs = vec![0.0; grid.n_dofs()];
        for i in 0..=grid.n_cells {
            let (v, d) = f(i as f64 * grid.h);
            dofs[2 * i] = v;
            dofs[2 * i + 1] = d;
        }
        FieldState { dofs }
    }

    #[test]
    fn affine_steady_state_is_fixed_point_of_delayed_step() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let z = affine_state(&g, 1.0, 0.3);
        for eps in [0.05, 0.01] {
            let dt = eps / 20.0;
            let history =
                History::new(&g, PastData::constant(z.clone()), eps, dt, kernel.a_max(), DEFAULT_HISTORY_BYTES)
                    .unwrap();
            let mu = g.gauss_from_fn(|s| kernel.mu_at(s));
            let resolvent = Resolvent::new(&g, &mu, eps).unwrap();
            let (next, report) =
                step_delayed(&history, &resolvent, &kernel, SubDtRule::Linear, 1e-10, 40).unwrap();
            assert!(
                h2_distance(&g, &next, &z) < 1e-9,
                "eps {eps}: moved {}",
                h2_distance(&g, &next, &z)
            );
            assert!(report.iters <= 3);
        }
    }

    #[test]
    fn oscillatory_steady_state_is_fixed_point_to_discretization() {
        // The elliptic profile satisfies the discrete equations only up to
        // its assembly residual, so the step may move it by that much.
        let g = Grid::new(2.0, 64).unwrap();
        let kernel = exp_kernel(2.0);
        let branch = enumerate(2.0)
            .unwrap()
            .into_iter()
            .find(|b| matches!(b.kind, BranchKind::Elliptic { mode: 1, negated: false, .. }))
            .unwrap();
        let steady = build_field(&branch, 0.1, &g, 1e-3).unwrap();
        let eps = 0.02;
        let history = History::new(
            &g,
            PastData::constant(steady.field.clone()),
            eps,
            eps / 20.0,
            kernel.a_max(),
            DEFAULT_HISTORY_BYTES,
        )
        .unwrap();
        let mu = g.gauss_from_fn(|s| kernel.mu_at(s));
        let resolvent = Resolvent::new(&g, &mu, eps).unwrap();
        let (next, _) = step_delayed(&history, &resolvent, &kernel, SubDtRule::Linear, 1e-10, 40).unwrap();
        let moved = h2_distance(&g, &next, &steady.field);
        assert!(moved < 20.0 * eps * steady.residual + 1e-9, "moved {moved}, residual {}", steady.residual);
    }

    #[test]
    fn zero_past_stays_zero() {
        let g = grid(1.0);
        let kernel = exp_kernel(1.0);
        let past = PastData::constant(FieldState { dofs: vec![0.0; g.n_dofs()] });
        let params = MarchParams { t_end: 0.05, dt: 0.005, ..MarchParams::default() };
        let traj = run_delayed(&g, &kernel, past, 0.1, &params).unwrap();
        assert!(matches!(traj.status, RunStatus::ReachedTEnd));
        assert!(norms(&g, traj.terminal()).h2() < 1e-12);
    }

    #[test]
    fn steady_past_gives_constant_trajectory_with_flat_energy_and_theta() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let z = affine_state(&g, -1.0, 0.2);
        let eps = 5e-3;
        let params = MarchParams { dt: eps / 20.0, t_end: 0.1, output_every: 5, ..MarchParams::default() };
        let traj = run_delayed(&g, &kernel, PastData::constant(z.clone()), eps, &params).unwrap();
        let e0 = traj.series[0].energy;
        for (state, row) in traj.states.iter().zip(traj.series.iter()) {
            assert!(h2_distance(&g, state, &z) < 1e-9);
            assert!((row.energy - e0).abs() < 1e-10 * (1.0 + e0.abs()));
            assert!((row.theta - traj.kappa).abs() < 1e-9 * (1.0 + traj.kappa.abs()));
            assert!(row.dissipation_rate <= 0.0 && row.dissipation_rate > -1e-10);
        }
        // A steady trajectory is quiet from the start, so the detector should
        // eventually claim the matching branch.
        match &traj.status {
            RunStatus::Stabilized { branch, .. } => {
                assert!(matches!(branch.branch.kind, BranchKind::ConstantSlope(v) if v == -1.0));
            }
            other => panic!("expected stabilization onto the slope -1 branch, got {other:?}"),
        }
    }

    #[test]
    fn contraction_ratio_improves_as_eps_shrinks() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let past_state = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s / 2.0;
            (0.4 * arg.sin(), 0.4 * std::f64::consts::FRAC_PI_2 * arg.cos())
        });
        let mut ratios = Vec::new();
        for eps in [0.04, 0.02, 0.01] {
            let params = MarchParams { dt: eps / 20.0, t_end: eps / 4.0, ..MarchParams::default() };
            let traj = run_delayed(&g, &kernel, PastData::constant(past_state.clone()), eps, &params).unwrap();
            assert!(matches!(traj.status, RunStatus::ReachedTEnd));
            let worst = traj.series[1..]
                .iter()
                .map(|r| r.contraction)
                .fold(0.0_f64, f64::max);
            ratios.push(worst);
        }
        assert!(ratios[0] < 1.0, "ratios {ratios:?}");
        assert!(ratios[1] < ratios[0] && ratios[2] < ratios[1], "ratios {ratios:?}");
    }

    #[test]
    fn delayed_energy_is_monotone_and_theta_is_conserved_along_a_real_run() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let z0 = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s / 2.0;
            (s + 0.05 * arg.sin(), 1.0 + 0.05 * std::f64::consts::FRAC_PI_2 * arg.cos())
        });
        let eps = 5e-3;
        let params = MarchParams { dt: eps / 20.0, t_end: 0.6, output_every: 20, ..MarchParams::default() };
        let traj = run_delayed(&g, &kernel, PastData::constant(z0), eps, &params).unwrap();
        let mut prev = f64::INFINITY;
        for row in &traj.series {
            let slack = 10.0 * (params.fp_tol + params.dt * row.dissipation_rate.abs());
            assert!(row.energy <= prev + slack, "t {} energy {} prev {prev}", row.t, row.energy);
            prev = row.energy;
            assert!(row.dissipation_rate <= 0.0);
            // The age average reads the committed trajectory, so the pairing
            // drifts only through interpolation error, O(dt) per unit time.
            assert!(
                (row.theta - traj.kappa).abs() < 5.0 * params.dt * (1.0 + traj.kappa.abs()),
                "t {} theta {} kappa {}",
                row.t,
                row.theta,
                traj.kappa
            );
        }
        // Cumulative squared rate is controlled by the initial energy.
        let last = traj.series.last().unwrap();
        assert!(last.cum_rate_sq.is_finite() && last.cum_rate_sq > 0.0);
    }

    #[test]
    fn power_law_memory_run_matches_exponential_behavior() {
        let g = grid(2.0);
        let kernel = power_kernel(2.0, 3.0, 30.0);
        let z0 = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s / 2.0;
            (0.25 * arg.sin(), 0.25 * std::f64::consts::FRAC_PI_2 * arg.cos())
        });
        let eps = 2.5e-3;
        let params = MarchParams { dt: eps / 20.0, t_end: 0.25, output_every: 40, ..MarchParams::default() };
        let traj = run_delayed(&g, &kernel, PastData::constant(z0), eps, &params).unwrap();
        let mut prev = f64::INFINITY;
        for row in &traj.series {
            let slack = 10.0 * (params.fp_tol + params.dt * row.dissipation_rate.abs());
            assert!(row.energy <= prev + slack);
            prev = row.energy;
        }
    }

    #[test]
    fn affine_steady_state_is_fixed_point_of_limit_step() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let mu1 = g.gauss_from_fn(|s| kernel.mu1_at(s));
        let forms = LimitForms::new(&g, &mu1).unwrap();
        let z = affine_state(&g, 1.0, -0.4);
        let params = MarchParams::default();
        let (next, report) = step_limit(&g, &forms, &z, 0.01, 0.01, &params).unwrap();
        assert!(h2_distance(&g, &next, &z) < 1e-11);
        assert_eq!(report.iters, 0);
    }

    #[test]
    fn constant_state_is_fixed_point_of_limit_step() {
        let g = grid(1.5);
        let kernel = exp_kernel(1.5);
        let mu1 = g.gauss_from_fn(|s| kernel.mu1_at(s));
        let forms = LimitForms::new(&g, &mu1).unwrap();
        let z = field_from_fn(&g, |_| (0.7, 0.0));
        let params = MarchParams::default();
        let (next, _) = step_limit(&g, &forms, &z, 0.05, 0.05, &params).unwrap();
        assert!(h2_distance(&g, &next, &z) < 1e-11);
    }

    #[test]
    fn limit_run_conserves_weighted_mean_and_dissipates_energy() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let z0 = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s;
            (s + 0.2 * arg.sin(), 1.0 + 0.2 * std::f64::consts::PI * arg.cos())
        });
        let mut gaps = Vec::new();
        for dt in [1e-3, 2.5e-4] {
            let params = MarchParams { dt, t_end: 0.3, output_every: 50, ..MarchParams::default() };
            let traj = run_limit(&g, &kernel, &z0, &params).unwrap();
            let mut prev = f64::INFINITY;
            for row in &traj.series {
                assert!(
                    (row.mu1_inner - traj.kappa).abs() <= 10.0 * params.newton_tol * (1.0 + traj.kappa.abs()),
                    "t {} pairing {} target {}",
                    row.t,
                    row.mu1_inner,
                    traj.kappa
                );
                assert!(row.energy <= prev + 1e-12 * (1.0 + prev.abs()), "t {}", row.t);
                prev = row.energy;
            }
            // Discrete energy identity: the energy drop matches the weighted
            // squared rate to O(dt), with backward Euler always paying extra.
            let first = traj.series.first().unwrap();
            let last = traj.series.last().unwrap();
            let drop = first.energy - last.energy;
            let paid = last.cum_weighted_rate_sq - first.cum_weighted_rate_sq;
            assert!(drop > 0.0 && paid > 0.0);
            assert!(drop >= paid - 1e-10, "backward Euler should overdissipate: drop {drop} paid {paid}");
            gaps.push((drop - paid) / drop);
        }
        assert!(gaps[0] < 0.35, "gaps {gaps:?}");
        assert!(gaps[1] < 0.5 * gaps[0], "identity gap should shrink with dt: {gaps:?}");
    }

    #[test]
    fn limit_run_near_affine_contracts_toward_the_branch() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let target = affine_state(&g, 1.0, 0.0);
        let bump = SpaceFn::new(vec![bump_term(0.05)], 2.0);
        let z0 = field_from_fn(&g, |s| {
            (target.eval(&g, s) + bump.eval(s), target.eval_deriv(&g, s) + bump.deriv(s))
        });
        let params = MarchParams { dt: 5e-3, t_end: 0.6, output_every: 20, ..MarchParams::default() };
        let traj = run_limit(&g, &kernel, &z0, &params).unwrap();
        // The additive constant of the limit is pinned by the conserved
        // pairing, so compare against the target shifted to match.
        let mu1 = g.gauss_from_fn(|s| kernel.mu1_at(s));
        let c = constant_for_target(&g, &target, &mu1, traj.kappa).unwrap();
        let mut shifted = target.clone();
        shift_constant(&mut shifted, c);
        let dists: Vec<f64> = traj.states.iter().map(|z| h2_distance(&g, z, &shifted)).collect();
        for pair in dists.windows(2) {
            assert!(pair[1] < pair[0] * (1.0 + 1e-9) + 1e-13, "distances {dists:?}");
        }
        assert!(dists.last().unwrap() < &(0.2 * dists[0]), "distances {dists:?}");
    }

    #[test]
    fn semi_implicit_step_agrees_with_newton_to_first_order() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let mu1 = g.gauss_from_fn(|s| kernel.mu1_at(s));
        let forms = LimitForms::new(&g, &mu1).unwrap();
        let z = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s / 2.0;
            (0.3 * arg.sin(), 0.3 * std::f64::consts::FRAC_PI_2 * arg.cos())
        });
        let newton = MarchParams::default();
        let semi = MarchParams { semi_implicit: true, ..MarchParams::default() };
        let mut gaps = Vec::new();
        for dt in [2e-3, 1e-3, 5e-4] {
            let (a, _) = step_limit(&g, &forms, &z, dt, dt, &newton).unwrap();
            let (b, _) = step_limit(&g, &forms, &z, dt, dt, &semi).unwrap();
            gaps.push(h2_distance(&g, &a, &b));
        }
        assert!(gaps[0] < 0.05, "gaps {gaps:?}");
        // First-order gap: the formal dt^2 estimate saturates through the
        // stiff modes (dt * lambda >> 1), leaving one power of dt.
        assert!(gaps[1] < 0.7 * gaps[0] && gaps[2] < 0.7 * gaps[1], "gaps {gaps:?}");
    }

    #[test]
    fn limit_run_stabilizes_onto_the_affine_branch() {
        let g = grid(1.0);
        let kernel = exp_kernel(1.0);
        let z0 = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s;
            (s + 0.08 * arg.sin(), 1.0 + 0.08 * std::f64::consts::PI * arg.cos())
        });
        let params = MarchParams {
            dt: 2e-3,
            t_end: 40.0,
            output_every: 50,
            stab_tol: 1e-6,
            stab_window: 10,
            branch_tol: 1e-4,
            ..MarchParams::default()
        };
        let traj = run_limit(&g, &kernel, &z0, &params).unwrap();
        match &traj.status {
            RunStatus::Stabilized { branch, t } => {
                assert!(matches!(branch.branch.kind, BranchKind::ConstantSlope(v) if v == 1.0));
                assert!(*t < params.t_end);
                assert!(h2_distance(&g, traj.terminal(), &branch.field) < params.branch_tol);
            }
            other => panic!("expected stabilization, got {other:?}"),
        }
    }

    #[test]
    fn delayed_run_stabilizes_onto_the_affine_branch() {
        let g = grid(1.0);
        let kernel = exp_kernel(1.0);
        let z0 = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s;
            (s + 0.05 * arg.sin(), 1.0 + 0.05 * std::f64::consts::PI * arg.cos())
        });
        let eps = 5e-3;
        let params = MarchParams {
            dt: eps / 20.0,
            t_end: 10.0,
            output_every: 200,
            stab_tol: 1e-6,
            stab_window: 10,
            branch_tol: 1e-3,
            ..MarchParams::default()
        };
        let traj = run_delayed(&g, &kernel, PastData::constant(z0), eps, &params).unwrap();
        match &traj.status {
            RunStatus::Stabilized { branch, t } => {
                assert!(matches!(branch.branch.kind, BranchKind::ConstantSlope(v) if v == 1.0));
                assert!(*t < params.t_end);
            }
            other => panic!("expected stabilization, got {other:?}"),
        }
    }

    #[test]
    fn detector_reports_ambiguity_for_duplicate_targets() {
        let g = grid(1.0);
        let z = affine_state(&g, 0.0, 0.5);
        let branch = enumerate(1.0)
            .unwrap()
            .into_iter()
            .find(|b| matches!(b.kind, BranchKind::ConstantSlope(v) if v == 0.0))
            .unwrap();
        let target = SteadyField { branch, c: 0.5, field: z.clone(), residual: 0.0 };
        let states = vec![z.clone(), z.clone(), z];
        let out = detect_stabilization(&g, &states, &[target.clone(), target], 3, 1e-6);
        assert!(matches!(out, Err(Error::AmbiguousBranch { .. })));
    }

    #[test]
    fn fixed_point_failure_keeps_partial_trajectory() {
        let g = grid(2.0);
        let kernel = exp_kernel(2.0);
        let z0 = field_from_fn(&g, |s| {
            let arg = std::f64::consts::PI * s / 2.0;
            (0.5 * arg.sin(), 0.5 * std::f64::consts::FRAC_PI_2 * arg.cos())
        });
        // Large eps with a one-iteration cap cannot converge.
        let params = MarchParams { dt: 0.05, t_end: 0.5, fp_max_iters: 1, fp_tol: 1e-13, ..MarchParams::default() };
        let traj = run_delayed(&g, &kernel, PastData::constant(z0), 1.0, &params).unwrap();
        match traj.status {
            RunStatus::FixedPointFailure { t, .. } => assert!(t > 0.0),
            ref other => panic!("expected fixed point failure, got {other:?}"),
        }
        assert_eq!(traj.states.len(), 1);
    }

    #[test]
    fn invalid_params_are_rejected_with_key_paths() {
        let g = grid(1.0);
        let kernel = exp_kernel(1.0);
        let past = PastData::constant(FieldState { dofs: vec![0.0; g.n_dofs()] });
        let bad = MarchParams { dt: 0.0, ..MarchParams::default() };
        match run_delayed(&g, &kernel, past.clone(), 0.1, &bad) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "run.dt"),
            other => panic!("expected config error, got {other:?}"),
        }
        match run_delayed(&g, &kernel, past, 0.0, &MarchParams::default()) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "run.eps"),
            other => panic!("expected config error, got {other:?}"),
        }
    }
}
