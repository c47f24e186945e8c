//! Gradient-based solver for corridor-constrained minimum-jerk problems.
//!
//! The problem is `min energy + rho * sum(T)` over waypoints and durations,
//! subject to corridor membership and kinematic limits at every constraint
//! point. An augmented-Lagrangian outer loop handles the inequalities and
//! produces the multiplier estimates the differentiation layer consumes;
//! the inner minimizer is limited-memory BFGS. Durations are optimized as
//! `T_i = exp(tau_i)` so positivity never needs an explicit constraint.

mod lbfgs;

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Vector3};

use crate::corridor::{corridor_constraints, kinematic_constraints, Corridor, KinematicLimits};
use crate::error::{CoreError, Result};
use crate::traj::{
    point_jacobians, AdjointSeed, BoundaryState, ConstraintPoint, MincoSystem, Trajectory,
    VarLayout, WaypointSet,
};

/// Duration floor used when building warm starts.
pub const DEFAULT_T_MIN: f64 = 0.05;

const PENALTY_CAP: f64 = 1e10;
/// Final max violation above which a budget-exhausted solve is classified
/// infeasible rather than merely unconverged.
const INFEASIBLE_VIOLATION: f64 = 1e-2;

/// Fully assembled problem instance.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub start: BoundaryState,
    pub end: BoundaryState,
    pub piece_count: usize,
    pub points_per_piece: usize,
    /// Time-regularization weight on the total duration.
    pub rho: f64,
    /// Diagonal of the positive-definite energy weight.
    pub w_diag: Vector3<f64>,
    pub limits: KinematicLimits,
    pub corridor: Corridor,
}

impl ProblemSpec {
    pub fn sample_count(&self) -> usize {
        self.piece_count * self.points_per_piece
    }

    /// 6 corridor faces plus 2 kinematic rows per constraint point.
    pub fn constraint_count(&self) -> usize {
        8 * self.sample_count()
    }

    pub fn layout(&self) -> VarLayout {
        VarLayout::new(self.piece_count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.piece_count < 1 || self.points_per_piece < 1 {
            return Err(CoreError::InvalidArgument(
                "piece count and points per piece must be >= 1".into(),
            ));
        }
        if !(self.rho > 0.0) {
            return Err(CoreError::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if self.w_diag.iter().any(|&w| !(w > 0.0)) {
            return Err(CoreError::InvalidArgument("energy weight diagonal must be positive".into()));
        }
        if !(self.limits.v_max > 0.0) || !(self.limits.a_max > 0.0) {
            return Err(CoreError::InvalidArgument("kinematic limits must be positive".into()));
        }
        if self.corridor.len() != self.sample_count() {
            return Err(CoreError::InvalidArgument(format!(
                "corridor has {} cubes, expected {}",
                self.corridor.len(),
                self.sample_count()
            )));
        }
        if !self.start.is_finite() || !self.end.is_finite() {
            return Err(CoreError::InvalidArgument("non-finite boundary state".into()));
        }
        // the final constraint point is the fixed end state; reject limits
        // it can never satisfy
        if self.end.velocity.norm() > self.limits.v_max + 1e-12
            || self.end.acceleration.norm() > self.limits.a_max + 1e-12
        {
            return Err(CoreError::InvalidArgument(
                "end boundary state violates kinematic limits".into(),
            ));
        }
        Ok(())
    }
}

/// Problem data minus the corridor; planning evaluates several corridors
/// against one template.
#[derive(Clone, Debug)]
pub struct ProblemTemplate {
    pub start: BoundaryState,
    pub end: BoundaryState,
    pub piece_count: usize,
    pub points_per_piece: usize,
    pub rho: f64,
    pub w_diag: Vector3<f64>,
    pub limits: KinematicLimits,
}

impl ProblemTemplate {
    pub fn with_corridor(&self, corridor: Corridor) -> ProblemSpec {
        ProblemSpec {
            start: self.start,
            end: self.end,
            piece_count: self.piece_count,
            points_per_piece: self.points_per_piece,
            rho: self.rho,
            w_diag: self.w_diag,
            limits: self.limits,
            corridor,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub max_outer: usize,
    pub max_inner: usize,
    pub penalty_growth: f64,
    pub initial_penalty: f64,
    /// Constraint violation tolerance.
    pub eps_cons: f64,
    /// Scaled stationarity tolerance.
    pub eps_stat: f64,
    /// Complementarity tolerance.
    pub eps_comp: f64,
    pub lbfgs_memory: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer: 12,
            max_inner: 200,
            penalty_growth: 5.0,
            initial_penalty: 10.0,
            eps_cons: 1e-4,
            eps_stat: 1e-3,
            eps_comp: 1e-4,
            lbfgs_memory: 8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer == 0 || self.max_inner == 0 || self.lbfgs_memory == 0 {
            return Err(CoreError::InvalidArgument("iteration budgets must be positive".into()));
        }
        if !(self.penalty_growth > 1.0) {
            return Err(CoreError::InvalidArgument("penalty growth must exceed 1".into()));
        }
        if !(self.initial_penalty > 0.0)
            || !(self.eps_cons > 0.0)
            || !(self.eps_stat > 0.0)
            || !(self.eps_comp > 0.0)
        {
            return Err(CoreError::InvalidArgument("tolerances and penalty must be positive".into()));
        }
        Ok(())
    }

    /// Copy with every tolerance tightened by `factor` (< 1), used by the
    /// gradient-check suites that need extra-sharp solutions.
    pub fn tightened(&self, factor: f64) -> Self {
        let mut c = self.clone();
        c.eps_cons *= factor;
        c.eps_stat *= factor;
        c.eps_comp *= factor;
        c.max_outer = (c.max_outer * 3).max(30);
        c.max_inner = (c.max_inner * 3).max(600);
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub q_star: WaypointSet,
    pub t_star: Vec<f64>,
    /// One multiplier estimate per scalar constraint, corridor rows first.
    pub multipliers: Vec<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time: Duration,
}

/// KKT residual triple at a candidate solution.
#[derive(Clone, Copy, Debug)]
pub struct KktResidual {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

/// Per-outer-iteration record for diagnostics and invariant tests.
#[derive(Clone, Debug)]
pub struct OuterRecord {
    pub merit_start: f64,
    pub merit_end: f64,
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
    pub penalty: f64,
}

#[derive(Clone, Debug, Default)]
pub struct SolveTrace {
    pub outer: Vec<OuterRecord>,
}

/// One evaluated iterate: trajectory, samples and stacked residuals.
struct Iterate {
    traj: Trajectory,
    sys: MincoSystem,
    points: Vec<ConstraintPoint>,
    f: Vec<f64>,
    objective: f64,
}

fn stacked_residuals(spec: &ProblemSpec, points: &[ConstraintPoint]) -> Result<Vec<f64>> {
    let corr = corridor_constraints(points, &spec.corridor)?;
    let kin = kinematic_constraints(points, &spec.limits);
    let mut f = corr.values;
    f.extend(kin.values);
    Ok(f)
}

fn assemble(spec: &ProblemSpec, waypoints: &WaypointSet, durations: &[f64]) -> Result<Iterate> {
    let sys = MincoSystem::new(durations)?;
    let traj = sys.construct(waypoints, &spec.start, &spec.end)?;
    let points = traj.constraint_points(spec.points_per_piece);
    let f = stacked_residuals(spec, &points)?;
    let objective = traj.energy(&spec.w_diag) + spec.rho * durations.iter().sum::<f64>();
    if !objective.is_finite() || f.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::NumericalFailure("non-finite iterate".into()));
    }
    Ok(Iterate {
        traj,
        sys,
        points,
        f,
        objective,
    })
}

/// Gradient of `obj_weight * J + sum_i w[i] F_i` with respect to `(q, T)`,
/// via one adjoint propagation through the construction system.
fn weighted_gradient(
    spec: &ProblemSpec,
    it: &Iterate,
    obj_weight: f64,
    w: &[f64],
) -> (Vec<Vector3<f64>>, DVector<f64>) {
    let samples = spec.sample_count();
    let m_corr = 6 * samples;
    let mut seed = AdjointSeed::new(&it.traj, spec.points_per_piece);
    if obj_weight != 0.0 {
        seed.add_energy(obj_weight);
    }
    for s in 0..samples {
        let mut g_pos = Vector3::zeros();
        for face in 0..6 {
            let wv = w[6 * s + face];
            if wv != 0.0 {
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                g_pos[axis] += sign * wv;
            }
        }
        if g_pos != Vector3::zeros() {
            seed.add_sample(&it.traj, s, 0, &g_pos);
        }
        let wv = w[m_corr + 2 * s];
        if wv != 0.0 {
            seed.add_sample(&it.traj, s, 1, &(2.0 * wv * it.points[s].velocity));
        }
        let wa = w[m_corr + 2 * s + 1];
        if wa != 0.0 {
            seed.add_sample(&it.traj, s, 2, &(2.0 * wa * it.points[s].acceleration));
        }
    }
    let (d_q, mut d_t) = seed.propagate(&it.traj, &it.sys, &spec.w_diag);
    if obj_weight != 0.0 {
        for i in 0..d_t.len() {
            d_t[i] += obj_weight * spec.rho;
        }
    }
    (d_q, d_t)
}

fn grad_inf(d_q: &[Vector3<f64>], d_t: &DVector<f64>) -> f64 {
    let mut m: f64 = d_t.amax();
    for g in d_q {
        m = m.max(g.amax());
    }
    m
}

/// Dense problem derivatives: residual vector, constraint Jacobian (one row
/// per constraint) and objective gradient, all in `(q, T)` coordinates.
pub(crate) fn problem_derivatives(
    spec: &ProblemSpec,
    traj: &Trajectory,
) -> Result<(Vec<f64>, DMatrix<f64>, DVector<f64>)> {
    let layout = spec.layout();
    let n = layout.dim();
    let points = traj.constraint_points(spec.points_per_piece);
    let f = stacked_residuals(spec, &points)?;
    let jac = point_jacobians(traj, spec.points_per_piece, &spec.w_diag)?;
    let samples = spec.sample_count();
    let m = spec.constraint_count();
    let mut g = DMatrix::zeros(m, n);
    for s in 0..samples {
        for face in 0..6 {
            let axis = face / 2;
            let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
            let r = 6 * s + face;
            for c in 0..n {
                g[(r, c)] = sign * jac.pos[(3 * s + axis, c)];
            }
        }
        let rv = 6 * samples + 2 * s;
        let ra = rv + 1;
        for c in 0..n {
            let mut gv = 0.0;
            let mut ga = 0.0;
            for axis in 0..3 {
                gv += 2.0 * points[s].velocity[axis] * jac.vel[(3 * s + axis, c)];
                ga += 2.0 * points[s].acceleration[axis] * jac.acc[(3 * s + axis, c)];
            }
            g[(rv, c)] = gv;
            g[(ra, c)] = ga;
        }
    }
    let mut g_obj = jac.d_energy;
    for i in 0..spec.piece_count {
        g_obj[layout.t_col(i)] += spec.rho;
    }
    Ok((f, g, g_obj))
}

fn split_y(layout: &VarLayout, y: &DVector<f64>) -> (WaypointSet, Vec<f64>) {
    let mut pts = Vec::with_capacity(layout.piece_count - 1);
    for w in 0..layout.piece_count - 1 {
        pts.push(Vector3::new(y[3 * w], y[3 * w + 1], y[3 * w + 2]));
    }
    let t = (0..layout.piece_count)
        .map(|i| y[layout.t_col(i)].exp())
        .collect();
    (WaypointSet::new(pts), t)
}

/// Solves the corridor-constrained problem from the given initialization.
pub fn solve(
    spec: &ProblemSpec,
    q0: &WaypointSet,
    t0: &[f64],
    config: &SolverConfig,
) -> Result<Solution> {
    solve_traced(spec, q0, t0, config).map(|(sol, _)| sol)
}

/// [`solve`] plus the per-outer-iteration trace.
pub fn solve_traced(
    spec: &ProblemSpec,
    q0: &WaypointSet,
    t0: &[f64],
    config: &SolverConfig,
) -> Result<(Solution, SolveTrace)> {
    let start_time = Instant::now();
    spec.validate()?;
    config.validate()?;
    let layout = spec.layout();
    if q0.len() + 1 != spec.piece_count || t0.len() != spec.piece_count {
        return Err(CoreError::InvalidArgument(
            "initialization dimensions do not match the problem".into(),
        ));
    }
    if t0.iter().any(|&t| !(t > 0.0)) {
        return Err(CoreError::InvalidArgument("initial durations must be positive".into()));
    }

    let m = spec.constraint_count();
    let mut y = DVector::zeros(layout.dim());
    for (w, p) in q0.points.iter().enumerate() {
        for a in 0..3 {
            y[layout.q_col(w, a)] = p[a];
        }
    }
    for (i, &t) in t0.iter().enumerate() {
        y[layout.t_col(i)] = t.max(1e-6).ln();
    }
    // fail fast if the initialization cannot even be evaluated
    {
        let (q, t) = split_y(&layout, &y);
        assemble(spec, &q, &t)
            .map_err(|e| CoreError::InvalidArgument(format!("initialization not evaluable: {e}")))?;
    }

    let mut lambda = vec![0.0; m];
    let mut sigma = config.initial_penalty;
    let mut tighten = 1.0_f64;
    let mut prev_violation = f64::INFINITY;
    let mut trace = SolveTrace::default();
    let mut total_inner = 0usize;

    // best iterate by (violation beyond tolerance, objective)
    let mut best: Option<(f64, f64, DVector<f64>, Vec<f64>)> = None;
    let mut final_metrics = (f64::INFINITY, f64::INFINITY, f64::INFINITY);

    for _outer in 0..config.max_outer {
        let merit = |yv: &DVector<f64>| -> Option<(f64, DVector<f64>)> {
            if yv.iter().any(|v| !v.is_finite() || v.abs() > 50.0 + 1e6) {
                return None;
            }
            let (q, t) = split_y(&layout, yv);
            if t.iter().any(|&ti| !ti.is_finite() || ti > 1e6) {
                return None;
            }
            let it = assemble(spec, &q, &t).ok()?;
            let mut phr = 0.0;
            let mut w = vec![0.0; m];
            for i in 0..m {
                let shifted = lambda[i] + sigma * it.f[i];
                if shifted > 0.0 {
                    phr += (shifted * shifted - lambda[i] * lambda[i]) / (2.0 * sigma);
                    w[i] = shifted;
                } else {
                    phr -= lambda[i] * lambda[i] / (2.0 * sigma);
                }
            }
            let f = it.objective + phr;
            if !f.is_finite() {
                return None;
            }
            let (d_q, d_t) = weighted_gradient(spec, &it, 1.0, &w);
            let mut g = DVector::zeros(layout.dim());
            for (wi, gq) in d_q.iter().enumerate() {
                for a in 0..3 {
                    g[layout.q_col(wi, a)] = gq[a];
                }
            }
            for i in 0..layout.piece_count {
                // chain rule through T = exp(tau)
                g[layout.t_col(i)] = d_t[i] * t[i];
            }
            Some((f, g))
        };

        // inner tolerance: x-space target mapped through the current scaling
        let (q_cur, t_cur) = split_y(&layout, &y);
        let it_cur = assemble(spec, &q_cur, &t_cur)
            .map_err(|e| CoreError::NumericalFailure(format!("iterate lost evaluability: {e}")))?;
        let (gj_q, gj_t) = weighted_gradient(spec, &it_cur, 1.0, &vec![0.0; m]);
        let scale = 1.0 + grad_inf(&gj_q, &gj_t);
        let t_min_cur = t_cur.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
        let gtol = (0.5 * config.eps_stat * scale * t_min_cur * tighten).max(1e-13);

        let merit_start = merit(&y).map(|(f, _)| f).unwrap_or(f64::INFINITY);
        let res = lbfgs::minimize(merit, y.clone(), gtol, config.max_inner, config.lbfgs_memory)
            .ok_or_else(|| CoreError::NumericalFailure("inner minimizer lost the iterate".into()))?;
        y = res.x;
        total_inner += res.iterations.max(1);

        let (q, t) = split_y(&layout, &y);
        let it = assemble(spec, &q, &t)
            .map_err(|e| CoreError::NumericalFailure(format!("iterate lost evaluability: {e}")))?;
        let mut lambda_hat = vec![0.0; m];
        for i in 0..m {
            lambda_hat[i] = (lambda[i] + sigma * it.f[i]).max(0.0);
        }
        let (dl_q, dl_t) = weighted_gradient(spec, &it, 1.0, &lambda_hat);
        let stat_raw = grad_inf(&dl_q, &dl_t);
        let (gj_q, gj_t) = weighted_gradient(spec, &it, 1.0, &vec![0.0; m]);
        let stationarity = stat_raw / (1.0 + grad_inf(&gj_q, &gj_t));
        let feasibility = it.f.iter().cloned().fold(0.0, f64::max).max(0.0);
        let complementarity = it
            .f
            .iter()
            .zip(&lambda_hat)
            .map(|(f, l)| (f * l).abs())
            .fold(0.0, f64::max);

        trace.outer.push(OuterRecord {
            merit_start,
            merit_end: res.f,
            stationarity,
            feasibility,
            complementarity,
            penalty: sigma,
        });
        final_metrics = (stationarity, feasibility, complementarity);

        let excess = (feasibility - config.eps_cons).max(0.0);
        if best
            .as_ref()
            .map(|(be, bo, _, _)| (excess, it.objective) < (*be, *bo))
            .unwrap_or(true)
        {
            best = Some((excess, it.objective, y.clone(), lambda_hat.clone()));
        }

        if stationarity <= config.eps_stat
            && feasibility <= config.eps_cons
            && complementarity <= config.eps_comp
        {
            let (q_star, t_star) = split_y(&layout, &y);
            return Ok((
                Solution {
                    q_star,
                    t_star,
                    multipliers: lambda_hat,
                    objective: it.objective,
                    status: SolveStatus::Converged,
                    iterations: total_inner,
                    solve_time: start_time.elapsed(),
                },
                trace,
            ));
        }

        lambda = lambda_hat;
        if feasibility > config.eps_cons && feasibility > 0.25 * prev_violation {
            sigma = (sigma * config.penalty_growth).min(PENALTY_CAP);
        }
        if feasibility <= config.eps_cons
            && complementarity <= config.eps_comp
            && stationarity > config.eps_stat
        {
            // only stationarity is lagging: drive the inner loop harder
            tighten *= 0.25;
        }
        prev_violation = feasibility.max(1e-300);
    }

    let (excess, _, y_best, mult) = best.expect("at least one outer iteration ran");
    let (q_star, t_star) = split_y(&layout, &y_best);
    let it = assemble(spec, &q_star, &t_star)
        .map_err(|e| CoreError::NumericalFailure(format!("best iterate lost evaluability: {e}")))?;
    let status = if excess + config.eps_cons > INFEASIBLE_VIOLATION.max(100.0 * config.eps_cons) {
        SolveStatus::Infeasible
    } else {
        SolveStatus::MaxIterations
    };
    let _ = final_metrics;
    Ok((
        Solution {
            q_star,
            t_star,
            multipliers: mult,
            objective: it.objective,
            status,
            iterations: total_inner,
            solve_time: start_time.elapsed(),
        },
        trace,
    ))
}

/// KKT residual triple of a solution against its problem.
pub fn kkt_residual(sol: &Solution, spec: &ProblemSpec) -> Result<KktResidual> {
    if sol.q_star.len() + 1 != spec.piece_count
        || sol.t_star.len() != spec.piece_count
        || sol.multipliers.len() != spec.constraint_count()
    {
        return Err(CoreError::InvalidArgument(
            "solution dimensions do not match the problem".into(),
        ));
    }
    let traj = crate::traj::minco_construct(&sol.q_star, &sol.t_star, &spec.start, &spec.end)?;
    let (f, g_f, g_j) = problem_derivatives(spec, &traj)?;
    let lam = DVector::from_column_slice(&sol.multipliers);
    let stat_vec = &g_j + g_f.transpose() * &lam;
    let stationarity = stat_vec.amax() / (1.0 + g_j.amax());
    let feasibility = f.iter().cloned().fold(0.0, f64::max).max(0.0);
    let complementarity = f
        .iter()
        .zip(&sol.multipliers)
        .map(|(fi, li)| (fi * li).abs())
        .fold(0.0, f64::max);
    Ok(KktResidual {
        stationarity,
        feasibility,
        complementarity,
    })
}

/// Warm start from a sequence of `N * points_per_piece` body-frame points:
/// waypoints at the piece junctions, durations from chord lengths at the
/// hinted speed with a floor of [`DEFAULT_T_MIN`].
pub fn initialize_from_points(
    points: &[Vector3<f64>],
    points_per_piece: usize,
    speed_hint: f64,
) -> Result<(WaypointSet, Vec<f64>)> {
    if points_per_piece == 0 || points.is_empty() || points.len() % points_per_piece != 0 {
        return Err(CoreError::InvalidArgument(format!(
            "point count {} is not a multiple of points per piece {points_per_piece}",
            points.len()
        )));
    }
    if !(speed_hint > 0.0) {
        return Err(CoreError::InvalidArgument("speed hint must be positive".into()));
    }
    let n = points.len() / points_per_piece;
    let mut waypoints = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        waypoints.push(points[(i + 1) * points_per_piece - 1]);
    }
    let mut durations = Vec::with_capacity(n);
    let mut prev = Vector3::zeros();
    for i in 0..n {
        let next = points[(i + 1) * points_per_piece - 1];
        let chord = (next - prev).norm();
        durations.push((chord / speed_hint).max(DEFAULT_T_MIN));
        prev = next;
    }
    Ok((WaypointSet::new(waypoints), durations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corridor::Cube;
    use crate::traj::minco_construct;

    fn rest(p: [f64; 3]) -> BoundaryState {
        BoundaryState::at_rest(Vector3::new(p[0], p[1], p[2]))
    }

    fn huge_cube_spec(rho: f64) -> ProblemSpec {
        let cube = Cube::new(Vector3::new(1.0, 0.0, 0.0), 100.0);
        ProblemSpec {
            start: rest([0.0; 3]),
            end: rest([2.0, 0.0, 0.0]),
            piece_count: 2,
            points_per_piece: 2,
            rho,
            w_diag: Vector3::new(1.0, 1.0, 1.0),
            limits: KinematicLimits::new(1e3, 1e3).unwrap(),
            corridor: Corridor::new(vec![cube; 4], 0.1).unwrap(),
        }
    }

    fn detour_spec() -> (ProblemSpec, WaypointSet, Vec<f64>) {
        let n = 4;
        let ppp = 2;
        let path = |u: f64| Vector3::new(4.0 * u, 1.2 * (std::f64::consts::PI * u).sin(), 1.0);
        let mut cubes = Vec::new();
        let mut centers = Vec::new();
        for s in 0..n * ppp {
            let u = (s + 1) as f64 / (n * ppp) as f64;
            let c = path(u);
            cubes.push(Cube::new(c, 0.45));
            centers.push(c);
        }
        let spec = ProblemSpec {
            start: rest([0.0, 0.0, 1.0]),
            end: rest([4.0, 0.0, 1.0]),
            piece_count: n,
            points_per_piece: ppp,
            rho: 1.0,
            w_diag: Vector3::new(1.0, 1.0, 1.0),
            limits: KinematicLimits::new(6.0, 12.0).unwrap(),
            corridor: Corridor::new(cubes, 0.1).unwrap(),
        };
        let (q0, t0) = initialize_from_points(&centers, ppp, 2.0).unwrap();
        (spec, q0, t0)
    }

    /// Independent oracle: finite-difference gradient descent on the
    /// unconstrained objective in `(q, tau)` coordinates.
    fn gd_oracle(spec: &ProblemSpec, q0: &WaypointSet, t0: &[f64], iters: usize) -> f64 {
        let layout = spec.layout();
        let mut y = DVector::zeros(layout.dim());
        for (w, p) in q0.points.iter().enumerate() {
            for a in 0..3 {
                y[layout.q_col(w, a)] = p[a];
            }
        }
        for (i, &t) in t0.iter().enumerate() {
            y[layout.t_col(i)] = t.ln();
        }
        let obj = |yv: &DVector<f64>| -> f64 {
            let (q, t) = split_y(&layout, yv);
            let traj = minco_construct(&q, &t, &spec.start, &spec.end).unwrap();
            traj.energy(&spec.w_diag) + spec.rho * t.iter().sum::<f64>()
        };
        let mut f = obj(&y);
        let h = 1e-6;
        for _ in 0..iters {
            let mut g = DVector::zeros(layout.dim());
            for c in 0..layout.dim() {
                let mut yp = y.clone();
                yp[c] += h;
                let mut ym = y.clone();
                ym[c] -= h;
                g[c] = (obj(&yp) - obj(&ym)) / (2.0 * h);
            }
            let mut step = 1.0 / (1.0 + g.amax());
            let mut improved = false;
            for _ in 0..40 {
                let cand = &y - &g * step;
                let fc = obj(&cand);
                if fc < f {
                    y = cand;
                    f = fc;
                    improved = true;
                    break;
                }
                step *= 0.5;
            }
            if !improved {
                break;
            }
        }
        f
    }

    #[test]
    fn unconstrained_matches_gradient_descent_oracle() {
        let spec = huge_cube_spec(1.0);
        let q0 = WaypointSet::new(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let t0 = vec![1.0, 1.0];
        let sol = solve(&spec, &q0, &t0, &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        assert!(sol.multipliers.iter().all(|&l| l <= 1e-6), "active multipliers in the interior");
        let oracle = gd_oracle(&spec, &q0, &t0, 3000);
        assert!(
            (sol.objective - oracle).abs() <= 1e-3 * oracle.abs(),
            "solver {} vs oracle {oracle}",
            sol.objective
        );
    }

    #[test]
    fn detour_activates_corridor_constraints() {
        let (spec, q0, t0) = detour_spec();
        let cfg = SolverConfig::default();
        let sol = solve(&spec, &q0, &t0, &cfg).unwrap();
        assert_eq!(sol.status, SolveStatus::Converged);
        let traj = minco_construct(&sol.q_star, &sol.t_star, &spec.start, &spec.end).unwrap();
        let points = traj.constraint_points(spec.points_per_piece);
        let f = stacked_residuals(&spec, &points).unwrap();
        let active = f
            .iter()
            .zip(&sol.multipliers)
            .any(|(fi, li)| fi.abs() <= cfg.eps_cons && *li > 1e-6);
        assert!(active, "expected at least one active corridor constraint");
        let comp: f64 = f
            .iter()
            .zip(&sol.multipliers)
            .map(|(fi, li)| fi * li)
            .sum::<f64>()
            .abs();
        assert!(comp <= 1e-4, "complementarity sum {comp}");
    }

    #[test]
    fn rho_sweep_shrinks_total_time() {
        let mut totals = Vec::new();
        for rho in [0.1, 1.0, 10.0] {
            let spec = huge_cube_spec(rho);
            let q0 = WaypointSet::new(vec![Vector3::new(1.0, 0.0, 0.0)]);
            let sol = solve(&spec, &q0, &[1.0, 1.0], &SolverConfig::default()).unwrap();
            assert_eq!(sol.status, SolveStatus::Converged, "rho = {rho}");
            totals.push(sol.t_star.iter().sum::<f64>());
        }
        assert!(totals[0] > totals[1] && totals[1] > totals[2], "totals {totals:?}");
    }

    #[test]
    fn deterministic_solutions() {
        let (spec, q0, t0) = detour_spec();
        let a = solve(&spec, &q0, &t0, &SolverConfig::default()).unwrap();
        let b = solve(&spec, &q0, &t0, &SolverConfig::default()).unwrap();
        assert_eq!(a.status, b.status);
        assert_eq!(a.iterations, b.iterations);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        for (x, y) in a.t_star.iter().zip(&b.t_star) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.q_star.points.iter().zip(&b.q_star.points) {
            for k in 0..3 {
                assert_eq!(x[k].to_bits(), y[k].to_bits());
            }
        }
        for (x, y) in a.multipliers.iter().zip(&b.multipliers) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn positive_durations_even_unconverged() {
        // end point far outside the last cube: permanently infeasible
        let cube = Cube::new(Vector3::zeros(), 0.3);
        let spec = ProblemSpec {
            start: rest([0.0; 3]),
            end: rest([5.0, 0.0, 0.0]),
            piece_count: 1,
            points_per_piece: 2,
            rho: 1.0,
            w_diag: Vector3::new(1.0, 1.0, 1.0),
            limits: KinematicLimits::new(6.0, 12.0).unwrap(),
            corridor: Corridor::new(vec![cube; 2], 0.1).unwrap(),
        };
        let sol = solve(&spec, &WaypointSet::default(), &[1.0], &SolverConfig::default()).unwrap();
        assert_eq!(sol.status, SolveStatus::Infeasible);
        assert!(sol.t_star.iter().all(|&t| t > 0.0));
    }

    #[test]
    fn merit_non_increasing_within_outer_iterations() {
        let (spec, q0, t0) = detour_spec();
        let (_, trace) = solve_traced(&spec, &q0, &t0, &SolverConfig::default()).unwrap();
        assert!(!trace.outer.is_empty());
        for (k, rec) in trace.outer.iter().enumerate() {
            assert!(
                rec.merit_end <= rec.merit_start + 1e-9,
                "outer {k}: merit rose {} -> {}",
                rec.merit_start,
                rec.merit_end
            );
        }
    }

    #[test]
    fn objective_not_above_feasible_initialization() {
        let (spec, q0, t0) = detour_spec();
        // the initialization threads the cube centers, so it is feasible as
        // long as the kinematic limits hold at that speed
        let traj0 = minco_construct(&q0, &t0, &spec.start, &spec.end).unwrap();
        let f0 = stacked_residuals(&spec, &traj0.constraint_points(spec.points_per_piece)).unwrap();
        let j0 = traj0.energy(&spec.w_diag) + spec.rho * t0.iter().sum::<f64>();
        let feasible0 = f0.iter().all(|&v| v <= 0.0);
        let sol = solve(&spec, &q0, &t0, &SolverConfig::default()).unwrap();
        if feasible0 {
            assert!(sol.objective <= j0 + 1e-9, "J* {} > J0 {j0}", sol.objective);
        }
    }

    #[test]
    fn kkt_residual_reports_convergence_and_perturbation() {
        let (spec, q0, t0) = detour_spec();
        let cfg = SolverConfig::default();
        let sol = solve(&spec, &q0, &t0, &cfg).unwrap();
        let r = kkt_residual(&sol, &spec).unwrap();
        assert!(r.stationarity <= cfg.eps_stat, "stationarity {}", r.stationarity);
        assert!(r.feasibility <= cfg.eps_cons, "feasibility {}", r.feasibility);
        assert!(r.complementarity <= cfg.eps_comp, "complementarity {}", r.complementarity);

        let mut perturbed = sol.clone();
        perturbed.q_star.points[1][1] += 0.1;
        let rp = kkt_residual(&perturbed, &spec).unwrap();
        assert!(rp.stationarity > r.stationarity);

        let mut bad = sol.clone();
        bad.multipliers.pop();
        assert!(kkt_residual(&bad, &spec).is_err());
    }

    #[test]
    fn interior_solution_has_zero_complementarity() {
        let spec = huge_cube_spec(1.0);
        let q0 = WaypointSet::new(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let sol = solve(&spec, &q0, &[1.0, 1.0], &SolverConfig::default()).unwrap();
        assert!(sol.multipliers.iter().all(|&l| l == 0.0));
        let r = kkt_residual(&sol, &spec).unwrap();
        assert_eq!(r.complementarity, 0.0);
    }

    #[test]
    fn initialize_from_points_rules() {
        // straight line, uniform chords
        let pts: Vec<Vector3<f64>> = (1..=6).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        let (q0, t0) = initialize_from_points(&pts, 2, 2.0).unwrap();
        assert_eq!(q0.len(), 2);
        assert_eq!(t0.len(), 3);
        for t in &t0 {
            assert!((t - 1.0).abs() < 1e-12);
        }

        // single piece: no waypoints
        let (q0, t0) = initialize_from_points(&pts[..2], 2, 2.0).unwrap();
        assert!(q0.is_empty());
        assert_eq!(t0.len(), 1);

        // coincident points hit the duration floor
        let same = vec![Vector3::zeros(); 4];
        let (_, t0) = initialize_from_points(&same, 2, 2.0).unwrap();
        assert!(t0.iter().all(|&t| t == DEFAULT_T_MIN));

        assert!(initialize_from_points(&pts[..3], 2, 2.0).is_err());
        assert!(initialize_from_points(&pts, 2, 0.0).is_err());
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut spec = huge_cube_spec(1.0);
        spec.rho = -1.0;
        assert!(spec.validate().is_err());
        let mut spec = huge_cube_spec(1.0);
        spec.end.velocity = Vector3::new(1e4, 0.0, 0.0);
        assert!(spec.validate().is_err());
    }
}
