//! Cross-run studies: measured exponents and tolerance checks.
//!
//! Each study drives a family of marches (or resolvent solves), extracts one
//! scalar metric per abscissa, and fits a least-squares line in log-log
//! coordinates.  The analysis provides one-sided bounds, so a measured decay
//! may be faster than expected but never slower: checks compare a slope
//! against `expected - SLOPE_TOL`.  A fit is trusted only when its RMS
//! residual stays below [`FIT_RESIDUAL_GATE`] in log units, and metrics at
//! the solver noise floor are excluded rather than fitted.

use std::collections::HashMap;

use crate::delay::PastData;
use crate::evolve::{h2_distance, run_delayed, MarchParams, RunStatus, Trajectory};
use crate::kernel::KernelSpec;
use crate::spatial::{norms, FieldState, Grid, Resolvent};
use crate::{Error, Result};

/// One-sided tolerance on measured exponents.
pub const SLOPE_TOL: f64 = 0.1;

/// A fitted slope counts only if its RMS log-residual is below this.
pub const FIT_RESIDUAL_GATE: f64 = 0.1;

/// Default threshold below which a metric is treated as solver noise.
pub const DEFAULT_NOISE_FLOOR: f64 = 1e-8;

/// A named time series extracted from a trajectory's diagnostic rows.
#[derive(Debug, Clone)]
pub struct DiagnosticsSeries {
    pub name: &'static str,
    pub t: Vec<f64>,
    pub value: Vec<f64>,
}

/// Least-squares line through `(ln x, ln y)`.
#[derive(Debug, Clone)]
pub struct SlopeFit {
    pub name: &'static str,
    pub slope: f64,
    /// Intercept in log units: `ln y ~ slope ln x + intercept`.
    pub intercept: f64,
    /// RMS deviation of the data from the line, in log units.
    pub residual: f64,
    /// Points used: positive abscissa, metric above the noise floor.
    pub points: usize,
}

impl SlopeFit {
    /// One-sided acceptance: trustworthy fit with slope at least
    /// `expected - SLOPE_TOL`.
    pub fn meets(&self, expected: f64) -> bool {
        self.residual < FIT_RESIDUAL_GATE && self.slope >= expected - SLOPE_TOL
    }
}

/// Per-abscissa measurements, aligned with [`SweepResult::xs`].
#[derive(Debug, Clone)]
pub struct MetricColumn {
    pub name: &'static str,
    pub values: Vec<f64>,
}

/// Outcome of a sweep study.
#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Abscissa values (eps, or the eps gap for the pairwise study),
    /// strictly decreasing.
    pub xs: Vec<f64>,
    pub columns: Vec<MetricColumn>,
    pub fits: Vec<SlopeFit>,
    /// Indices into `xs` whose runs ended early; their metrics are partial
    /// or NaN and are excluded from fits.
    pub failed: Vec<usize>,
    /// No trustworthy fit could be formed (too few usable points, metrics at
    /// the noise floor, or refinement disagreement).
    pub inconclusive: bool,
    pub note: String,
}

impl SweepResult {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|c| c.name == name).map(|c| c.values.as_slice())
    }

    pub fn fit(&self, name: &str) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.name == name)
    }
}

/// Least-squares power-law fit `y ~ e^intercept x^slope`.  Points with
/// nonpositive abscissa or with metric at or below `floor` are skipped; at
/// least four must survive for the fit to mean anything.
pub fn fit_log_log(name: &'static str, xs: &[f64], ys: &[f64], floor: f64) -> Result<SlopeFit> {
    let pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(ys)
        .filter(|&(&x, &y)| x > 0.0 && y.is_finite() && y > floor)
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 4 {
        return Err(Error::Inconclusive(format!(
            "{name}: only {} of {} points usable for a slope fit",
            pts.len(),
            xs.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Inconclusive(format!("{name}: abscissa values coincide")));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = pts.iter().map(|p| (p.1 - slope * p.0 - intercept).powi(2)).sum();
    Ok(SlopeFit { name, slope, intercept, residual: (ss / n).sqrt(), points: pts.len() })
}

/// Shared inputs of the sweep studies: one grid, kernel, and past, plus a
/// march template whose `dt` and cadence are re-derived per eps.
pub struct StudySetup<'a> {
    pub grid: &'a Grid,
    pub kernel: &'a KernelSpec,
    pub past: &'a PastData,
    /// Template march; `dt`, `output_every`, and the stabilization window
    /// are overridden per run.
    pub base: MarchParams,
    /// Per-run step policy `dt = dt_per_eps * eps`, resolving the memory
    /// scale uniformly across the sweep.
    pub dt_per_eps: f64,
    /// Spacing of recorded states in time units; must be a multiple of every
    /// run's `dt`.  `None` keeps the template's `output_every`.
    pub out_dt: Option<f64>,
    /// Metrics at or below this are treated as solver noise.
    pub noise_floor: f64,
}

impl<'a> StudySetup<'a> {
    pub fn new(grid: &'a Grid, kernel: &'a KernelSpec, past: &'a PastData) -> Self {
        Self {
            grid,
            kernel,
            past,
            base: MarchParams::default(),
            dt_per_eps: 0.05,
            out_dt: None,
            noise_floor: DEFAULT_NOISE_FLOOR,
        }
    }

    /// March parameters for one sweep member.  Stabilization detection is
    /// disabled: sweeps must compare full windows, not early exits.
    fn params_for(&self, eps: f64) -> Result<MarchParams> {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::config("study.eps_list", format!("eps must be positive, got {eps}")));
        }
        if !(self.dt_per_eps.is_finite() && self.dt_per_eps > 0.0) {
            return Err(Error::config("study.dt_per_eps", "step ratio must be positive"));
        }
        let mut p = self.base.clone();
        p.dt = self.dt_per_eps * eps;
        p.stab_window = usize::MAX;
        if let Some(od) = self.out_dt {
            let k = (od / p.dt).round();
            if !(k >= 1.0) || (k * p.dt - od).abs() > 1e-9 * od {
                return Err(Error::config(
                    "study.out_dt",
                    format!("record spacing {od} is not a multiple of dt = {}", p.dt),
                ));
            }
            p.output_every = k as usize;
        }
        Ok(p)
    }
}

fn validate_decreasing(xs: &[f64], key: &str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::config(key, "sweep needs at least one value"));
    }
    if xs.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::config(key, "values must be strictly decreasing"));
    }
    Ok(())
}

/// Run one delayed march per eps, in parallel; results keep list order.
fn run_family(setup: &StudySetup, eps_list: &[f64]) -> Result<Vec<Trajectory>> {
    let params: Vec<MarchParams> =
        eps_list.iter().map(|&e| setup.params_for(e)).collect::<Result<_>>()?;
    std::thread::scope(|sc| {
        let handles: Vec<_> = eps_list
            .iter()
            .zip(&params)
            .map(|(&eps, p)| {
                sc.spawn(move || run_delayed(setup.grid, setup.kernel, setup.past.clone(), eps, p))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("study worker panicked")).collect()
    })
}

fn run_completed(traj: &Trajectory) -> bool {
    matches!(traj.status, RunStatus::ReachedTEnd | RunStatus::Stabilized { .. })
}

/// Energy along a recorded trajectory (memory term included for delayed
/// runs, absent for limit runs by construction of the rows).
pub fn energy_series(traj: &Trajectory) -> DiagnosticsSeries {
    DiagnosticsSeries {
        name: "energy",
        t: traj.series.iter().map(|r| r.t).collect(),
        value: traj.series.iter().map(|r| r.energy).collect(),
    }
}

/// Drift of the weighted mean from its conserved target,
/// `|(z(t), mu1) - kappa|` per recorded row.
pub fn mu1_drift_series(traj: &Trajectory) -> DiagnosticsSeries {
    DiagnosticsSeries {
        name: "mu1_drift",
        t: traj.series.iter().map(|r| r.t).collect(),
        value: traj.series.iter().map(|r| (r.mu1_inner - traj.kappa).abs()).collect(),
    }
}

/// Distance of a family of delayed runs to a delay-free reference on a
/// shared output grid: per eps the discrete `L^2(0,T; H^2)` distance
/// (trapezoid in time), the sup-in-time `W^{1,inf}` distance, and the
/// energy gap both at the final shared time and as a sup over shared times
/// (the terminal gap is vacuous once both runs have relaxed).  The reference
/// must start from the past's endpoint and be recorded at the same output
/// times.
pub fn eps_convergence_study(
    setup: &StudySetup,
    eps_list: &[f64],
    reference: &Trajectory,
) -> Result<SweepResult> {
    validate_decreasing(eps_list, "study.eps_list")?;
    let phi0 = setup.past.eval(0.0);
    let scale = 1.0 + norms(setup.grid, &phi0).h2();
    if reference.states.is_empty()
        || h2_distance(setup.grid, &reference.states[0], &phi0) > 1e-8 * scale
    {
        return Err(Error::config(
            "study.reference",
            "reference trajectory must start from the past's endpoint",
        ));
    }
    let trajs = run_family(setup, eps_list)?;
    let mut dist_l2h2 = Vec::new();
    let mut dist_c1 = Vec::new();
    let mut energy_gap = Vec::new();
    let mut energy_gap_sup = Vec::new();
    let mut terminal_energy = Vec::new();
    let mut failed = Vec::new();
    for (i, traj) in trajs.iter().enumerate() {
        if !run_completed(traj) {
            failed.push(i);
        }
        let k = traj.states.len().min(reference.states.len());
        for j in 0..k {
            if (traj.times[j] - reference.times[j]).abs() > 1e-9 * (1.0 + traj.times[j].abs()) {
                return Err(Error::config(
                    "study.reference",
                    "reference and sweep runs record at different output times",
                ));
            }
        }
        let sq: Vec<f64> = (0..k)
            .map(|j| {
                let d = h2_distance(setup.grid, &traj.states[j], &reference.states[j]);
                d * d
            })
            .collect();
        let mut acc = 0.0;
        for j in 0..k.saturating_sub(1) {
            acc += 0.5 * (sq[j] + sq[j + 1]) * (traj.times[j + 1] - traj.times[j]);
        }
        let c1 = (0..k)
            .map(|j| norms(setup.grid, &traj.states[j].sub(&reference.states[j])).w1inf)
            .fold(0.0_f64, f64::max);
        let gap_sup = (0..k)
            .map(|j| (traj.series[j].energy - reference.series[j].energy).abs())
            .fold(0.0_f64, f64::max);
        dist_l2h2.push(acc.sqrt());
        dist_c1.push(c1);
        terminal_energy.push(traj.series[k - 1].energy);
        energy_gap.push((traj.series[k - 1].energy - reference.series[k - 1].energy).abs());
        energy_gap_sup.push(gap_sup);
    }
    let usable: Vec<usize> = (0..eps_list.len()).filter(|i| !failed.contains(i)).collect();
    let sub = |col: &[f64]| -> Vec<f64> { usable.iter().map(|&i| col[i]).collect() };
    let xs_fit: Vec<f64> = usable.iter().map(|&i| eps_list[i]).collect();
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    for (name, col) in [
        ("dist_l2h2", &dist_l2h2),
        ("dist_c1", &dist_c1),
        ("energy_gap", &energy_gap),
        ("energy_gap_sup", &energy_gap_sup),
    ] {
        match fit_log_log(name, &xs_fit, &sub(col), setup.noise_floor) {
            Ok(f) => fits.push(f),
            Err(e) => notes.push(e.to_string()),
        }
    }
    let inconclusive = fits.is_empty();
    Ok(SweepResult {
        xs: eps_list.to_vec(),
        columns: vec![
            MetricColumn { name: "dist_l2h2", values: dist_l2h2 },
            MetricColumn { name: "dist_c1", values: dist_c1 },
            MetricColumn { name: "energy_gap", values: energy_gap },
            MetricColumn { name: "energy_gap_sup", values: energy_gap_sup },
            MetricColumn { name: "terminal_energy", values: terminal_energy },
        ],
        fits,
        failed,
        inconclusive,
        note: notes.join("; "),
    })
}

/// Interpolation-in-eps probe: for pairs `(eps, eps')` the `H^2` distance of
/// the two states at one probe time, against the gap `|eps - eps'|`.  The
/// probe time must stay comparable to the smallest eps, otherwise the
/// exponential growth factor of the continuity estimate dominates the power
/// law.  Pairs sharing a member reuse the computed state.
pub fn holder_study(
    setup: &StudySetup,
    pairs: &[(f64, f64)],
    t_probe: f64,
) -> Result<SweepResult> {
    if pairs.is_empty() {
        return Err(Error::config("study.eps_pairs", "sweep needs at least one pair"));
    }
    if !(t_probe.is_finite() && t_probe > 0.0) {
        return Err(Error::config("study.t_probe", "probe time must be positive"));
    }
    let gaps: Vec<f64> = pairs.iter().map(|&(a, b)| (a - b).abs()).collect();
    if gaps.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::config("study.eps_pairs", "pair gaps must be nonincreasing"));
    }
    let mut unique: Vec<f64> = Vec::new();
    for &(a, b) in pairs {
        for e in [a, b] {
            if !(e.is_finite() && e > 0.0) {
                return Err(Error::config("study.eps_pairs", format!("eps must be positive, got {e}")));
            }
            if !unique.iter().any(|&u| u == e) {
                unique.push(e);
            }
        }
    }
    // Steps chosen per member so the march lands exactly on t_probe.
    let terminal_params: Vec<MarchParams> = unique
        .iter()
        .map(|&e| {
            let n = (t_probe / (self_dt(setup, e))).ceil().max(1.0);
            let mut p = setup.base.clone();
            p.dt = t_probe / n;
            p.t_end = t_probe;
            p.output_every = n as usize;
            p.stab_window = usize::MAX;
            p
        })
        .collect();
    let results: Vec<Result<Trajectory>> = std::thread::scope(|sc| {
        let handles: Vec<_> = unique
            .iter()
            .zip(&terminal_params)
            .map(|(&eps, p)| {
                sc.spawn(move || run_delayed(setup.grid, setup.kernel, setup.past.clone(), eps, p))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("study worker panicked")).collect()
    });
    let mut terminal: HashMap<u64, (FieldState, bool)> = HashMap::new();
    for (e, r) in unique.iter().zip(results) {
        let traj = r?;
        terminal.insert(e.to_bits(), (traj.terminal().clone(), run_completed(&traj)));
    }
    let mut dist = Vec::new();
    let mut failed = Vec::new();
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let (za, oka) = &terminal[&a.to_bits()];
        let (zb, okb) = &terminal[&b.to_bits()];
        if !(*oka && *okb) {
            failed.push(i);
            dist.push(f64::NAN);
            continue;
        }
        dist.push(h2_distance(setup.grid, za, zb));
    }
    let usable: Vec<usize> = (0..pairs.len()).filter(|i| !failed.contains(i)).collect();
    let xs_fit: Vec<f64> = usable.iter().map(|&i| gaps[i]).collect();
    let ys_fit: Vec<f64> = usable.iter().map(|&i| dist[i]).collect();
    let (fits, inconclusive, note) = match fit_log_log("pair_dist_h2", &xs_fit, &ys_fit, setup.noise_floor) {
        Ok(f) => (vec![f], false, String::new()),
        Err(e) => {
            let floor = ys_fit.iter().all(|&y| !(y > setup.noise_floor));
            let note = if floor && !ys_fit.is_empty() {
                "all pair distances at the solver noise floor".to_string()
            } else {
                e.to_string()
            };
            (Vec::new(), true, note)
        }
    };
    Ok(SweepResult {
        xs: gaps,
        columns: vec![MetricColumn { name: "pair_dist_h2", values: dist }],
        fits,
        failed,
        inconclusive,
        note,
    })
}

fn self_dt(setup: &StudySetup, eps: f64) -> f64 {
    setup.dt_per_eps * eps
}

/// Initial-discontinuity probe: size of the first computed step away from
/// the past's endpoint, `||z(0+) - z_p(0)||_{L^2}`, per eps.  Steady pasts
/// produce jumps at the noise floor and are flagged inconclusive.
pub fn jump_study(setup: &StudySetup, eps_list: &[f64]) -> Result<SweepResult> {
    validate_decreasing(eps_list, "study.eps_list")?;
    let z_p0 = setup.past.eval(0.0);
    let params: Vec<MarchParams> = eps_list
        .iter()
        .map(|&e| {
            setup.params_for(e).map(|mut p| {
                p.t_end = p.dt;
                p.output_every = 1;
                p
            })
        })
        .collect::<Result<_>>()?;
    let results: Vec<Result<Trajectory>> = std::thread::scope(|sc| {
        let handles: Vec<_> = eps_list
            .iter()
            .zip(&params)
            .map(|(&eps, p)| {
                sc.spawn(move || run_delayed(setup.grid, setup.kernel, setup.past.clone(), eps, p))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("study worker panicked")).collect()
    });
    let mut jump = Vec::new();
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        let traj = r?;
        if traj.states.len() < 2 {
            failed.push(i);
            jump.push(f64::NAN);
            continue;
        }
        jump.push(norms(setup.grid, &traj.states[1].sub(&z_p0)).l2);
    }
    let usable: Vec<usize> = (0..eps_list.len()).filter(|i| !failed.contains(i)).collect();
    let xs_fit: Vec<f64> = usable.iter().map(|&i| eps_list[i]).collect();
    let ys_fit: Vec<f64> = usable.iter().map(|&i| jump[i]).collect();
    let (fits, inconclusive, note) = match fit_log_log("jump_l2", &xs_fit, &ys_fit, setup.noise_floor) {
        Ok(f) => (vec![f], false, String::new()),
        Err(e) => {
            let floor = ys_fit.iter().all(|&y| !(y > setup.noise_floor));
            let note = if floor && !ys_fit.is_empty() {
                "jumps at the solver noise floor (steady-compatible past)".to_string()
            } else {
                e.to_string()
            };
            (Vec::new(), true, note)
        }
    };
    Ok(SweepResult {
        xs: eps_list.to_vec(),
        columns: vec![MetricColumn { name: "jump_l2", values: jump }],
        fits,
        failed,
        inconclusive,
        note,
    })
}

/// Conservation-drift sweep: per eps the sup over recorded rows of
/// `|(z(t), mu1) - kappa|`.
pub fn drift_scaling_study(setup: &StudySetup, eps_list: &[f64]) -> Result<SweepResult> {
    validate_decreasing(eps_list, "study.eps_list")?;
    let trajs = run_family(setup, eps_list)?;
    let mut drift = Vec::new();
    let mut failed = Vec::new();
    for (i, traj) in trajs.iter().enumerate() {
        if !run_completed(traj) {
            failed.push(i);
        }
        let sup = traj.series.iter().map(|r| (r.mu1_inner - traj.kappa).abs()).fold(0.0, f64::max);
        drift.push(sup);
    }
    let usable: Vec<usize> = (0..eps_list.len()).filter(|i| !failed.contains(i)).collect();
    let xs_fit: Vec<f64> = usable.iter().map(|&i| eps_list[i]).collect();
    let ys_fit: Vec<f64> = usable.iter().map(|&i| drift[i]).collect();
    let (fits, inconclusive, note) = match fit_log_log("theta_drift", &xs_fit, &ys_fit, setup.noise_floor) {
        Ok(f) => (vec![f], false, String::new()),
        Err(e) => {
            let floor = ys_fit.iter().all(|&y| !(y > setup.noise_floor));
            let note = if floor && !ys_fit.is_empty() {
                "drift at the solver noise floor (exactly conserved pairing)".to_string()
            } else {
                e.to_string()
            };
            (Vec::new(), true, note)
        }
    };
    Ok(SweepResult {
        xs: eps_list.to_vec(),
        columns: vec![MetricColumn { name: "theta_drift", values: drift }],
        fits,
        failed,
        inconclusive,
        note,
    })
}

/// Scaling of the factored linear solve against eps for a fixed forcing
/// pair: `L^2` norms of the solution and its first two derivatives, fitted
/// against eps.  Every solve is repeated on a once-refined grid; the probe
/// is inconclusive when the two disagree, i.e. the spatial resolution, not
/// eps, controls the measurement.
pub fn resolvent_scaling_probe(
    grid: &Grid,
    kernel: &KernelSpec,
    eps_list: &[f64],
    f_fn: impl Fn(f64) -> f64,
    g_fn: impl Fn(f64) -> f64,
) -> Result<SweepResult> {
    validate_decreasing(eps_list, "study.eps_list")?;
    let fine = Grid::new(grid.length, 2 * grid.n_cells)?;
    let mut values = [Vec::new(), Vec::new(), Vec::new()];
    let mut disagreement = 0.0_f64;
    // Norms below this are factorization roundoff, not resolvent content:
    // they are skipped by the fits and by the refinement comparison.
    let floor = 1e-11;
    for &eps in eps_list {
        if !(eps.is_finite() && eps > 0.0) {
            return Err(Error::config("study.eps_list", format!("eps must be positive, got {eps}")));
        }
        let mut per_grid = [[0.0; 3]; 2];
        for (gi, gr) in [grid, &fine].into_iter().enumerate() {
            let mu = gr.gauss_from_fn(|s| kernel.mu_at(s));
            let f = gr.gauss_from_fn(|s| f_fn(s));
            let g = gr.gauss_from_fn(|s| g_fn(s));
            let u = Resolvent::new(gr, &mu, eps)?.solve(&f, &g);
            let n = norms(gr, &u);
            per_grid[gi] = [n.l2, n.h1_semi, n.h2_semi];
        }
        for j in 0..3 {
            let (a, b) = (per_grid[0][j], per_grid[1][j]);
            if a.max(b) > 1e-8 {
                disagreement = disagreement.max((a - b).abs() / a.max(b));
            }
            values[j].push(per_grid[0][j]);
        }
    }
    let names = ["u_l2", "u_h1", "u_h2"];
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    for j in 0..3 {
        match fit_log_log(names[j], eps_list, &values[j], floor) {
            Ok(f) => fits.push(f),
            Err(e) => notes.push(e.to_string()),
        }
    }
    let mut inconclusive = fits.is_empty();
    if disagreement > 0.02 {
        inconclusive = true;
        notes.push(format!(
            "refinement changes the measured norms by {disagreement:.1e}; grid too coarse for this eps range"
        ));
    }
    let mut columns = Vec::new();
    for (j, name) in names.into_iter().enumerate() {
        columns.push(MetricColumn { name, values: values[j].clone() });
    }
    Ok(SweepResult {
        xs: eps_list.to_vec(),
        columns,
        fits,
        failed: Vec::new(),
        inconclusive,
        note: notes.join("; "),
    })
}
