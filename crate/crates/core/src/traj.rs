//! Minimum-jerk piecewise quintic trajectories.
//!
//! An N-piece trajectory is parameterized by piece durations and internal
//! waypoints. Full boundary states at both ends, waypoint interpolation and
//! C4 junction continuity pin down all 6N coefficients per axis through a
//! banded linear system, so the representation stays minimal while the
//! spline is the energy-optimal interpolant for the given parameters.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::error::{CoreError, Result};
use crate::linalg::BandedLu;

/// Full state pinned at a trajectory end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryState {
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

impl BoundaryState {
    pub fn new(position: Vector3<f64>, velocity: Vector3<f64>, acceleration: Vector3<f64>) -> Self {
        Self {
            position,
            velocity,
            acceleration,
        }
    }

    /// State at rest at a given position.
    pub fn at_rest(position: Vector3<f64>) -> Self {
        Self::new(position, Vector3::zeros(), Vector3::zeros())
    }

    pub fn is_finite(&self) -> bool {
        self.position.iter().all(|v| v.is_finite())
            && self.velocity.iter().all(|v| v.is_finite())
            && self.acceleration.iter().all(|v| v.is_finite())
    }
}

/// Intermediate junction positions, one fewer than the piece count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WaypointSet {
    pub points: Vec<Vector3<f64>>,
}

impl WaypointSet {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Evaluated sample along the trajectory at local time `(index / points_per_piece) * T_piece`.
#[derive(Clone, Copy, Debug)]
pub struct ConstraintPoint {
    /// 0-based piece index.
    pub piece: usize,
    /// 1-based sample index within the piece.
    pub index: usize,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub acceleration: Vector3<f64>,
}

/// Quintic basis row for the `order`-th derivative at local time `s`.
#[inline]
pub(crate) fn basis(order: usize, s: f64) -> [f64; 6] {
    let mut row = [0.0; 6];
    for (k, slot) in row.iter_mut().enumerate() {
        if k >= order {
            let mut c = 1.0;
            for d in 0..order {
                c *= (k - d) as f64;
            }
            *slot = c * s.powi((k - order) as i32);
        }
    }
    row
}

enum Factored {
    Banded(BandedLu),
    /// Pivot breakdown fallback: dense LU of the system and of its transpose.
    Dense(Box<(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>, nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>)>),
}

/// Assembled and factored construction system for a fixed duration vector.
///
/// Row layout per axis (size 6N): three start-state rows, then for each
/// junction i the continuity rows for orders 3 and 4, the waypoint row and
/// the continuity rows for orders 0..2, then three end-state rows.
pub struct MincoSystem {
    durations: Vec<f64>,
    fact: Factored,
}

const LOWER_BW: usize = 6;
const UPPER_BW: usize = 6;

impl MincoSystem {
    pub fn new(durations: &[f64]) -> Result<Self> {
        if durations.is_empty() {
            return Err(CoreError::InvalidArgument("piece count must be >= 1".into()));
        }
        if durations.iter().any(|&t| !(t > 0.0) || !t.is_finite()) {
            return Err(CoreError::InvalidArgument(format!(
                "piece durations must be positive and finite, got {durations:?}"
            )));
        }
        let n = durations.len();
        let dim = 6 * n;
        let mut banded = BandedLu::new(dim, LOWER_BW, UPPER_BW);
        let set_row = |a: &mut BandedLu, row: usize, col0: usize, b: &[f64; 6]| {
            for (k, &v) in b.iter().enumerate() {
                if v != 0.0 {
                    a.set(row, col0 + k, v);
                }
            }
        };

        banded.set(0, 0, 1.0);
        banded.set(1, 1, 1.0);
        banded.set(2, 2, 2.0);
        for i in 0..n - 1 {
            let t = durations[i];
            let base = 6 * i + 3;
            let ci = 6 * i;
            let cn = 6 * (i + 1);
            set_row(&mut banded, base, ci, &basis(3, t));
            banded.set(base, cn + 3, -6.0);
            set_row(&mut banded, base + 1, ci, &basis(4, t));
            banded.set(base + 1, cn + 4, -24.0);
            set_row(&mut banded, base + 2, ci, &basis(0, t));
            set_row(&mut banded, base + 3, ci, &basis(0, t));
            banded.set(base + 3, cn, -1.0);
            set_row(&mut banded, base + 4, ci, &basis(1, t));
            banded.set(base + 4, cn + 1, -1.0);
            set_row(&mut banded, base + 5, ci, &basis(2, t));
            banded.set(base + 5, cn + 2, -2.0);
        }
        let t = durations[n - 1];
        let tail = 6 * n - 3;
        let cl = 6 * (n - 1);
        set_row(&mut banded, tail, cl, &basis(0, t));
        set_row(&mut banded, tail + 1, cl, &basis(1, t));
        set_row(&mut banded, tail + 2, cl, &basis(2, t));

        let dense_copy = banded.to_dense();
        let fact = match banded.factorize() {
            Ok(()) => Factored::Banded(banded),
            Err(_) => {
                let lu = dense_copy.clone().lu();
                let lu_t = dense_copy.transpose().lu();
                if lu.determinant().abs() < 1e-300 {
                    return Err(CoreError::NumericalFailure(
                        "construction system is singular".into(),
                    ));
                }
                Factored::Dense(Box::new((lu, lu_t)))
            }
        };
        Ok(Self {
            durations: durations.to_vec(),
            fact,
        })
    }

    pub fn piece_count(&self) -> usize {
        self.durations.len()
    }

    fn dim(&self) -> usize {
        6 * self.durations.len()
    }

    /// Solves `M x = rhs` in place.
    pub fn solve(&self, rhs: &mut DMatrix<f64>) {
        match &self.fact {
            Factored::Banded(b) => b.solve_in_place(rhs),
            Factored::Dense(d) => {
                let x = d.0.solve(rhs).expect("dense LU solve");
                *rhs = x;
            }
        }
    }

    /// Solves `M^T x = rhs` in place (adjoint propagation).
    pub fn solve_transpose(&self, rhs: &mut DMatrix<f64>) {
        match &self.fact {
            Factored::Banded(b) => b.solve_transpose_in_place(rhs),
            Factored::Dense(d) => {
                let x = d.1.solve(rhs).expect("dense LU transpose solve");
                *rhs = x;
            }
        }
    }

    fn rhs(&self, waypoints: &WaypointSet, start: &BoundaryState, end: &BoundaryState) -> DMatrix<f64> {
        let n = self.durations.len();
        let mut b = DMatrix::zeros(self.dim(), 3);
        for a in 0..3 {
            b[(0, a)] = start.position[a];
            b[(1, a)] = start.velocity[a];
            b[(2, a)] = start.acceleration[a];
            for (i, w) in waypoints.points.iter().enumerate() {
                b[(6 * i + 5, a)] = w[a];
            }
            b[(6 * n - 3, a)] = end.position[a];
            b[(6 * n - 2, a)] = end.velocity[a];
            b[(6 * n - 1, a)] = end.acceleration[a];
        }
        b
    }

    /// Rows of `(dM/dT_i) c` as `(row, value)` pairs, one value per axis.
    ///
    /// Only rows evaluating piece `i` at its end depend on `T_i`, and each
    /// such row differentiates to the next-order evaluation of that piece.
    fn dm_dt_times_c(&self, i: usize, coeffs: &[[Vector3<f64>; 6]]) -> Vec<(usize, Vector3<f64>)> {
        let n = self.durations.len();
        let t = self.durations[i];
        let eval = |order: usize| -> Vector3<f64> {
            let b = basis(order, t);
            let mut v = Vector3::zeros();
            for k in 0..6 {
                v += coeffs[i][k] * b[k];
            }
            v
        };
        if i + 1 < n {
            let base = 6 * i + 3;
            vec![
                (base, eval(4)),
                (base + 1, eval(5)),
                (base + 2, eval(1)),
                (base + 3, eval(1)),
                (base + 4, eval(2)),
                (base + 5, eval(3)),
            ]
        } else {
            let tail = 6 * n - 3;
            vec![(tail, eval(1)), (tail + 1, eval(2)), (tail + 2, eval(3))]
        }
    }
}

/// N-piece quintic trajectory with per-piece local-time coefficients.
///
/// Position on piece `i` is `sum_k coeffs[i][k] * s^k` with `s in [0, T_i]`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    durations: Vec<f64>,
    coeffs: Vec<[Vector3<f64>; 6]>,
    cumulative: Vec<f64>,
}

/// Builds the unique quintic spline through the waypoints with the given
/// boundary states and piece durations.
pub fn minco_construct(
    waypoints: &WaypointSet,
    durations: &[f64],
    start: &BoundaryState,
    end: &BoundaryState,
) -> Result<Trajectory> {
    MincoSystem::new(durations)?.construct(waypoints, start, end)
}

impl MincoSystem {
    /// Solves for the spline coefficients under this system's durations.
    pub fn construct(
        &self,
        waypoints: &WaypointSet,
        start: &BoundaryState,
        end: &BoundaryState,
    ) -> Result<Trajectory> {
        let n = self.durations.len();
        if waypoints.len() + 1 != n {
            return Err(CoreError::InvalidArgument(format!(
                "waypoint count {} does not match piece count {} - 1",
                waypoints.len(),
                n
            )));
        }
        if !start.is_finite() || !end.is_finite() {
            return Err(CoreError::InvalidArgument("non-finite boundary state".into()));
        }
        if waypoints.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(CoreError::InvalidArgument("non-finite waypoint".into()));
        }
        let mut b = self.rhs(waypoints, start, end);
        self.solve(&mut b);
        if b.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NumericalFailure(
                "construction solve produced non-finite coefficients".into(),
            ));
        }
        Ok(Trajectory::from_solution(&self.durations, &b))
    }
}

impl Trajectory {
    fn from_solution(durations: &[f64], sol: &DMatrix<f64>) -> Self {
        let n = durations.len();
        let mut coeffs = Vec::with_capacity(n);
        for i in 0..n {
            let mut piece = [Vector3::zeros(); 6];
            for (k, c) in piece.iter_mut().enumerate() {
                *c = Vector3::new(sol[(6 * i + k, 0)], sol[(6 * i + k, 1)], sol[(6 * i + k, 2)]);
            }
            coeffs.push(piece);
        }
        Self::from_parts(durations.to_vec(), coeffs)
    }

    /// Assembles a trajectory from raw parts (deserialization path).
    pub fn from_parts(durations: Vec<f64>, coeffs: Vec<[Vector3<f64>; 6]>) -> Self {
        let mut cumulative = Vec::with_capacity(durations.len() + 1);
        let mut acc = 0.0;
        cumulative.push(0.0);
        for &t in &durations {
            acc += t;
            cumulative.push(acc);
        }
        Self {
            durations,
            coeffs,
            cumulative,
        }
    }

    pub fn piece_count(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn coefficients(&self) -> &[[Vector3<f64>; 6]] {
        &self.coeffs
    }

    pub fn total_duration(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Junction positions (the waypoints the spline interpolates).
    pub fn waypoints(&self) -> WaypointSet {
        let mut pts = Vec::with_capacity(self.piece_count().saturating_sub(1));
        for i in 0..self.piece_count().saturating_sub(1) {
            pts.push(self.eval_piece(i, self.durations[i], 0));
        }
        WaypointSet::new(pts)
    }

    #[inline]
    fn eval_piece(&self, piece: usize, s: f64, order: usize) -> Vector3<f64> {
        let b = basis(order, s);
        let mut v = Vector3::zeros();
        for k in order..6 {
            v += self.coeffs[piece][k] * b[k];
        }
        v
    }

    /// Evaluates the `order`-th time derivative of position at global time `t`.
    ///
    /// Piece selection is by cumulative durations; the final piece includes
    /// its right endpoint.
    pub fn eval(&self, t: f64, order: usize) -> Result<Vector3<f64>> {
        if order > 5 {
            return Err(CoreError::InvalidArgument(format!(
                "derivative order {order} exceeds quintic degree"
            )));
        }
        let total = self.total_duration();
        if !(0.0..=total + 1e-12).contains(&t) {
            return Err(CoreError::OutOfRange(format!(
                "t = {t} outside [0, {total}]"
            )));
        }
        let t = t.min(total);
        // first piece whose span contains t; exact junction times land on the
        // right piece except the trajectory end
        let mut piece = self.durations.len() - 1;
        for i in 0..self.durations.len() {
            if t < self.cumulative[i + 1] {
                piece = i;
                break;
            }
        }
        Ok(self.eval_piece(piece, t - self.cumulative[piece], order))
    }

    /// Integral of the W-weighted squared jerk over the whole trajectory,
    /// in closed form.
    pub fn energy(&self, w_diag: &Vector3<f64>) -> f64 {
        let mut total = 0.0;
        for (i, &t) in self.durations.iter().enumerate() {
            let t2 = t * t;
            let t3 = t2 * t;
            let t4 = t3 * t;
            let t5 = t4 * t;
            for a in 0..3 {
                let c3 = self.coeffs[i][3][a];
                let c4 = self.coeffs[i][4][a];
                let c5 = self.coeffs[i][5][a];
                total += w_diag[a]
                    * (36.0 * c3 * c3 * t
                        + 144.0 * c3 * c4 * t2
                        + (192.0 * c4 * c4 + 240.0 * c3 * c5) * t3
                        + 720.0 * c4 * c5 * t4
                        + 720.0 * c5 * c5 * t5);
            }
        }
        total
    }

    /// Samples each piece at local times `(j / points_per_piece) * T_i`,
    /// `j = 1..=points_per_piece`, piece-major.
    pub fn constraint_points(&self, points_per_piece: usize) -> Vec<ConstraintPoint> {
        assert!(points_per_piece >= 1, "points_per_piece must be >= 1");
        let mut out = Vec::with_capacity(self.piece_count() * points_per_piece);
        for (i, &t) in self.durations.iter().enumerate() {
            for j in 1..=points_per_piece {
                let s = (j as f64 / points_per_piece as f64) * t;
                out.push(ConstraintPoint {
                    piece: i,
                    index: j,
                    position: self.eval_piece(i, s, 0),
                    velocity: self.eval_piece(i, s, 1),
                    acceleration: self.eval_piece(i, s, 2),
                });
            }
        }
        out
    }

    /// Applies `p -> rot * p + shift` to the whole trajectory.
    pub fn transformed(&self, rot: &nalgebra::Rotation3<f64>, shift: &Vector3<f64>) -> Trajectory {
        let mut coeffs = self.coeffs.clone();
        for piece in &mut coeffs {
            for c in piece.iter_mut() {
                *c = rot * *c;
            }
            piece[0] += shift;
        }
        Trajectory::from_parts(self.durations.clone(), coeffs)
    }
}

/// Flat parameter layout used by every consumer of trajectory gradients:
/// waypoint coordinates first (point-major, xyz), then piece durations.
#[derive(Clone, Copy, Debug)]
pub struct VarLayout {
    pub piece_count: usize,
}

impl VarLayout {
    pub fn new(piece_count: usize) -> Self {
        Self { piece_count }
    }

    pub fn waypoint_vars(&self) -> usize {
        3 * (self.piece_count - 1)
    }

    pub fn dim(&self) -> usize {
        self.waypoint_vars() + self.piece_count
    }

    #[inline]
    pub fn q_col(&self, waypoint: usize, axis: usize) -> usize {
        3 * waypoint + axis
    }

    #[inline]
    pub fn t_col(&self, piece: usize) -> usize {
        self.waypoint_vars() + piece
    }

    pub fn pack(&self, waypoints: &WaypointSet, durations: &[f64]) -> DVector<f64> {
        let mut x = DVector::zeros(self.dim());
        for (w, p) in waypoints.points.iter().enumerate() {
            for a in 0..3 {
                x[self.q_col(w, a)] = p[a];
            }
        }
        for (i, &t) in durations.iter().enumerate() {
            x[self.t_col(i)] = t;
        }
        x
    }

    pub fn unpack(&self, x: &DVector<f64>) -> (WaypointSet, Vec<f64>) {
        let mut pts = Vec::with_capacity(self.piece_count - 1);
        for w in 0..self.piece_count - 1 {
            pts.push(Vector3::new(
                x[self.q_col(w, 0)],
                x[self.q_col(w, 1)],
                x[self.q_col(w, 2)],
            ));
        }
        let durations = (0..self.piece_count).map(|i| x[self.t_col(i)]).collect();
        (WaypointSet::new(pts), durations)
    }
}

/// Dense Jacobians of every constraint point and of the energy with respect
/// to the flat `(waypoints, durations)` parameter vector.
///
/// Row `3 * sample + axis` of each matrix is the derivative of that sample
/// coordinate; samples are ordered as in [`Trajectory::constraint_points`].
pub struct PointJacobians {
    pub layout: VarLayout,
    pub pos: DMatrix<f64>,
    pub vel: DMatrix<f64>,
    pub acc: DMatrix<f64>,
    pub d_energy: DVector<f64>,
}

/// Per-axis energy partials with respect to the jerk-order coefficients.
fn energy_coeff_grad(coeffs: &[[Vector3<f64>; 6]], durations: &[f64], w_diag: &Vector3<f64>) -> DMatrix<f64> {
    let n = durations.len();
    let mut g = DMatrix::zeros(6 * n, 3);
    for i in 0..n {
        let t = durations[i];
        let t2 = t * t;
        let t3 = t2 * t;
        let t4 = t3 * t;
        let t5 = t4 * t;
        for a in 0..3 {
            let w = w_diag[a];
            let c3 = coeffs[i][3][a];
            let c4 = coeffs[i][4][a];
            let c5 = coeffs[i][5][a];
            g[(6 * i + 3, a)] = w * (72.0 * c3 * t + 144.0 * c4 * t2 + 240.0 * c5 * t3);
            g[(6 * i + 4, a)] = w * (144.0 * c3 * t2 + 384.0 * c4 * t3 + 720.0 * c5 * t4);
            g[(6 * i + 5, a)] = w * (240.0 * c3 * t3 + 720.0 * c4 * t4 + 1440.0 * c5 * t5);
        }
    }
    g
}

/// Squared W-norm of the jerk at the end of each piece (explicit dE/dT_i).
fn energy_t_explicit(traj: &Trajectory, w_diag: &Vector3<f64>) -> DVector<f64> {
    let n = traj.piece_count();
    let mut g = DVector::zeros(n);
    for i in 0..n {
        let jerk = traj.eval_piece(i, traj.durations[i], 3);
        g[i] = jerk.component_mul(w_diag).dot(&jerk);
    }
    g
}

/// Analytic Jacobians of every constraint point (position, velocity,
/// acceleration) and the energy gradient, via forward sensitivities of the
/// construction system.
pub fn point_jacobians(
    traj: &Trajectory,
    points_per_piece: usize,
    w_diag: &Vector3<f64>,
) -> Result<PointJacobians> {
    let n = traj.piece_count();
    let layout = VarLayout::new(n);
    let sys = MincoSystem::new(&traj.durations)?;
    let dim = 6 * n;

    // forward sensitivities: dc/dq_w shared across axes (one column per
    // waypoint), then dc/dT_i per axis (three columns per piece)
    let n_q = n - 1;
    let mut rhs = DMatrix::zeros(dim, n_q + 3 * n);
    for w in 0..n_q {
        rhs[(6 * w + 5, w)] = 1.0;
    }
    for i in 0..n {
        for (row, val) in sys.dm_dt_times_c(i, &traj.coeffs) {
            for a in 0..3 {
                rhs[(row, n_q + 3 * i + a)] = -val[a];
            }
        }
    }
    sys.solve(&mut rhs);

    let total_samples = n * points_per_piece;
    let mut pos = DMatrix::zeros(3 * total_samples, layout.dim());
    let mut vel = DMatrix::zeros(3 * total_samples, layout.dim());
    let mut acc = DMatrix::zeros(3 * total_samples, layout.dim());

    let mut sample = 0;
    for i in 0..n {
        let t = traj.durations[i];
        for j in 1..=points_per_piece {
            let frac = j as f64 / points_per_piece as f64;
            let s = frac * t;
            let rows = [basis(0, s), basis(1, s), basis(2, s)];
            let next = [
                traj.eval_piece(i, s, 1),
                traj.eval_piece(i, s, 2),
                traj.eval_piece(i, s, 3),
            ];
            for (d, out) in [&mut pos, &mut vel, &mut acc].into_iter().enumerate() {
                for a in 0..3 {
                    let r = 3 * sample + a;
                    for w in 0..n_q {
                        let mut v = 0.0;
                        for k in 0..6 {
                            v += rows[d][k] * rhs[(6 * i + k, w)];
                        }
                        out[(r, layout.q_col(w, a))] = v;
                    }
                    for m in 0..n {
                        let mut v = 0.0;
                        for k in 0..6 {
                            v += rows[d][k] * rhs[(6 * i + k, n_q + 3 * m + a)];
                        }
                        if m == i {
                            v += frac * next[d][a];
                        }
                        out[(r, layout.t_col(m))] = v;
                    }
                }
            }
            sample += 1;
        }
    }

    // energy gradient: chain the coefficient partials through the same
    // sensitivities, then add the explicit duration dependence
    let e_c = energy_coeff_grad(&traj.coeffs, &traj.durations, w_diag);
    let e_t = energy_t_explicit(traj, w_diag);
    let mut d_energy = DVector::zeros(layout.dim());
    for w in 0..n_q {
        for a in 0..3 {
            let mut v = 0.0;
            for row in 0..dim {
                v += e_c[(row, a)] * rhs[(row, w)];
            }
            d_energy[layout.q_col(w, a)] = v;
        }
    }
    for m in 0..n {
        let mut v = e_t[m];
        for a in 0..3 {
            for row in 0..dim {
                v += e_c[(row, a)] * rhs[(row, n_q + 3 * m + a)];
            }
        }
        d_energy[layout.t_col(m)] = v;
    }

    Ok(PointJacobians {
        layout,
        pos,
        vel,
        acc,
        d_energy,
    })
}

/// Adjoint accumulator for scalar functions of the trajectory: collects
/// cotangents on sample states and on the energy, then propagates them to
/// `(waypoints, durations)` with a single transposed system solve.
///
/// This is the solver's hot path; [`point_jacobians`] builds the same
/// quantities column by column and cross-checks it in tests.
pub struct AdjointSeed {
    points_per_piece: usize,
    d_coeffs: DMatrix<f64>,
    d_t: DVector<f64>,
    energy_weight: f64,
}

impl AdjointSeed {
    pub fn new(traj: &Trajectory, points_per_piece: usize) -> Self {
        let n = traj.piece_count();
        Self {
            points_per_piece,
            d_coeffs: DMatrix::zeros(6 * n, 3),
            d_t: DVector::zeros(n),
            energy_weight: 0.0,
        }
    }

    /// Adds `g . d(sample derivative of given order)/d(params)` to the seed.
    pub fn add_sample(&mut self, traj: &Trajectory, sample: usize, order: usize, g: &Vector3<f64>) {
        let i = sample / self.points_per_piece;
        let j = sample % self.points_per_piece + 1;
        let frac = j as f64 / self.points_per_piece as f64;
        let s = frac * traj.durations[i];
        let row = basis(order, s);
        for k in 0..6 {
            if row[k] != 0.0 {
                for a in 0..3 {
                    self.d_coeffs[(6 * i + k, a)] += g[a] * row[k];
                }
            }
        }
        self.d_t[i] += frac * traj.eval_piece(i, s, order + 1).dot(g);
    }

    /// Adds `weight * d(energy)/d(params)` to the seed.
    pub fn add_energy(&mut self, weight: f64) {
        self.energy_weight += weight;
    }

    /// Propagates all accumulated cotangents to `(waypoints, durations)`.
    pub fn propagate(
        mut self,
        traj: &Trajectory,
        sys: &MincoSystem,
        w_diag: &Vector3<f64>,
    ) -> (Vec<Vector3<f64>>, DVector<f64>) {
        let n = traj.piece_count();
        if self.energy_weight != 0.0 {
            let e_c = energy_coeff_grad(&traj.coeffs, &traj.durations, w_diag);
            self.d_coeffs += e_c * self.energy_weight;
            self.d_t += energy_t_explicit(traj, w_diag) * self.energy_weight;
        }
        let mut g = self.d_coeffs;
        sys.solve_transpose(&mut g);
        let mut d_q = Vec::with_capacity(n - 1);
        for w in 0..n - 1 {
            d_q.push(Vector3::new(
                g[(6 * w + 5, 0)],
                g[(6 * w + 5, 1)],
                g[(6 * w + 5, 2)],
            ));
        }
        let mut d_t = self.d_t;
        for i in 0..n {
            for (row, val) in sys.dm_dt_times_c(i, &traj.coeffs) {
                for a in 0..3 {
                    d_t[i] -= g[(row, a)] * val[a];
                }
            }
        }
        (d_q, d_t)
    }
}
