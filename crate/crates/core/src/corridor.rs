//! Cube safe corridors and the inequality constraints they induce on
//! trajectory constraint points.

use nalgebra::Vector3;

use crate::error::{CoreError, Result};
use crate::traj::ConstraintPoint;

/// Default minimum half-extent for corridor cubes (meters).
pub const DEFAULT_MIN_HALF_EXTENT: f64 = 0.1;

/// Axis-aligned cube stored as center plus half-extent (full edge = 2h).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cube {
    pub center: Vector3<f64>,
    pub half_extent: f64,
}

impl Cube {
    pub fn new(center: Vector3<f64>, half_extent: f64) -> Self {
        Self {
            center,
            half_extent,
        }
    }

    /// Closed-set overlap test between two cubes.
    pub fn overlaps(&self, other: &Cube) -> bool {
        (0..3).all(|k| (self.center[k] - other.center[k]).abs() <= self.half_extent + other.half_extent)
    }
}

/// Six face residuals of a point against a cube, per-axis pairs
/// `[+x, -x, +y, -y, +z, -z]`; all entries <= 0 iff the point is inside.
pub fn cube_residuals(p: &Vector3<f64>, cube: &Cube) -> [f64; 6] {
    let h = cube.half_extent;
    let mut r = [0.0; 6];
    for k in 0..3 {
        let d = p[k] - cube.center[k];
        r[2 * k] = d - h;
        r[2 * k + 1] = -d - h;
    }
    r
}

/// One cube per trajectory constraint point, in sample order.
///
/// The flattened learnable parameter vector is `[all centers xyz..., all
/// half-extents]` of length `4 * cube_count`.
#[derive(Clone, Debug)]
pub struct Corridor {
    cubes: Vec<Cube>,
}

impl Corridor {
    /// Validates half-extents against `min_half_extent` and requires each
    /// consecutive cube pair to overlap so a continuous path can thread the
    /// corridor.
    pub fn new(cubes: Vec<Cube>, min_half_extent: f64) -> Result<Self> {
        if cubes.is_empty() {
            return Err(CoreError::InvalidArgument("corridor needs at least one cube".into()));
        }
        for (i, c) in cubes.iter().enumerate() {
            if !c.center.iter().all(|v| v.is_finite()) || !c.half_extent.is_finite() {
                return Err(CoreError::InvalidArgument(format!("cube {i} is not finite")));
            }
            if c.half_extent < min_half_extent {
                return Err(CoreError::InvalidArgument(format!(
                    "cube {i} half-extent {} below minimum {min_half_extent}",
                    c.half_extent
                )));
            }
        }
        for i in 0..cubes.len() - 1 {
            if !cubes[i].overlaps(&cubes[i + 1]) {
                return Err(CoreError::InvalidArgument(format!(
                    "cubes {i} and {} do not overlap",
                    i + 1
                )));
            }
        }
        Ok(Self { cubes })
    }

    pub fn cubes(&self) -> &[Cube] {
        &self.cubes
    }

    pub fn len(&self) -> usize {
        self.cubes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cubes.is_empty()
    }

    /// Dimension of the flattened parameter vector.
    pub fn param_dim(&self) -> usize {
        4 * self.cubes.len()
    }

    /// Flattens to `[centers..., half_extents...]`.
    pub fn params(&self) -> Vec<f64> {
        let mut phi = Vec::with_capacity(self.param_dim());
        for c in &self.cubes {
            phi.extend_from_slice(c.center.as_slice());
        }
        phi.extend(self.cubes.iter().map(|c| c.half_extent));
        phi
    }

    /// Rebuilds from a flattened parameter vector (inverse of [`params`]).
    pub fn from_params(phi: &[f64], min_half_extent: f64) -> Result<Self> {
        if phi.len() % 4 != 0 {
            return Err(CoreError::InvalidArgument(format!(
                "parameter vector length {} is not divisible by 4",
                phi.len()
            )));
        }
        let m = phi.len() / 4;
        let cubes = (0..m)
            .map(|s| {
                Cube::new(
                    Vector3::new(phi[3 * s], phi[3 * s + 1], phi[3 * s + 2]),
                    phi[3 * m + s],
                )
            })
            .collect();
        Self::new(cubes, min_half_extent)
    }
}

/// Velocity and acceleration magnitude limits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KinematicLimits {
    pub v_max: f64,
    pub a_max: f64,
}

impl KinematicLimits {
    pub fn new(v_max: f64, a_max: f64) -> Result<Self> {
        if !(v_max > 0.0) || !(a_max > 0.0) {
            return Err(CoreError::InvalidArgument(format!(
                "kinematic limits must be positive, got v_max={v_max} a_max={a_max}"
            )));
        }
        Ok(Self { v_max, a_max })
    }
}

/// Stacked corridor membership residuals (6 per point) with their sparse
/// Jacobian structure.
///
/// `d_pos[r]` is the derivative of residual `r` with respect to its sample
/// position; residual `r` belongs to sample `r / 6`. Derivatives with
/// respect to the cube parameters follow the fixed pattern `-sign(axis)`
/// for the matching center coordinate and `-1` for the half-extent, exposed
/// through [`corridor_param_jacobian_row`].
pub struct CorridorResiduals {
    pub values: Vec<f64>,
    pub d_pos: Vec<Vector3<f64>>,
}

/// Evaluates all corridor membership constraints.
pub fn corridor_constraints(points: &[ConstraintPoint], corridor: &Corridor) -> Result<CorridorResiduals> {
    if points.len() != corridor.len() {
        return Err(CoreError::InvalidArgument(format!(
            "point count {} does not match cube count {}",
            points.len(),
            corridor.len()
        )));
    }
    let mut values = Vec::with_capacity(6 * points.len());
    let mut d_pos = Vec::with_capacity(6 * points.len());
    for (p, cube) in points.iter().zip(corridor.cubes()) {
        let r = cube_residuals(&p.position, cube);
        for k in 0..3 {
            values.push(r[2 * k]);
            let mut g = Vector3::zeros();
            g[k] = 1.0;
            d_pos.push(g);
            values.push(r[2 * k + 1]);
            let mut g = Vector3::zeros();
            g[k] = -1.0;
            d_pos.push(g);
        }
    }
    Ok(CorridorResiduals { values, d_pos })
}

/// Nonzero entries of `dF_r / d(phi)` for corridor residual `r`, as
/// `(param index, value)` pairs in the flattened corridor layout.
pub fn corridor_param_jacobian_row(r: usize, cube_count: usize) -> [(usize, f64); 2] {
    let sample = r / 6;
    let face = r % 6;
    let axis = face / 2;
    let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
    [
        (3 * sample + axis, -sign),
        (3 * cube_count + sample, -1.0),
    ]
}

/// Squared-norm kinematic residuals (2 per point: velocity then
/// acceleration) with their Jacobians `2 v` and `2 a`.
pub struct KinematicResiduals {
    pub values: Vec<f64>,
    pub d_vel: Vec<Vector3<f64>>,
    pub d_acc: Vec<Vector3<f64>>,
}

pub fn kinematic_constraints(points: &[ConstraintPoint], limits: &KinematicLimits) -> KinematicResiduals {
    let mut values = Vec::with_capacity(2 * points.len());
    let mut d_vel = Vec::with_capacity(2 * points.len());
    let mut d_acc = Vec::with_capacity(2 * points.len());
    for p in points {
        values.push(p.velocity.norm_squared() - limits.v_max * limits.v_max);
        d_vel.push(2.0 * p.velocity);
        d_acc.push(Vector3::zeros());
        values.push(p.acceleration.norm_squared() - limits.a_max * limits.a_max);
        d_vel.push(Vector3::zeros());
        d_acc.push(2.0 * p.acceleration);
    }
    KinematicResiduals { values, d_vel, d_acc }
}
