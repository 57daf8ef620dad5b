//! Point-wise inversion of a dense transform `h(x) = x + u(x)`.
//!
//! For a target `m` we minimize `f(p) = ‖h(p) − m‖²` with damped Newton steps
//! (Jacobian of the interpolated field by central differences), falling back to
//! the fixed-point update `p ← m − u(p)` whenever the Newton step fails to reduce
//! the residual.

use super::{DisplacementField, PointSet, Vec3};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug)]
pub struct InversionOptions<T> {
    /// Residual tolerance in voxels.
    pub tol_voxels: T,
    pub max_iters: usize,
}

impl<T: Real> Default for InversionOptions<T> {
    fn default() -> Self {
        InversionOptions { tol_voxels: T::of(1e-3), max_iters: 50 }
    }
}

#[derive(Clone, Debug)]
pub struct PointInversion<T> {
    pub points: PointSet<T>,
    /// `‖h(p*) − m‖` per point (mm).
    pub residuals: Vec<T>,
    pub converged: Vec<bool>,
}

impl<T: Real> PointInversion<T> {
    pub fn max_residual(&self) -> T {
        self.residuals.iter().copied().fold(T::zero(), T::max)
    }

    pub fn all_converged(&self) -> bool {
        self.converged.iter().all(|&c| c)
    }
}

/// Solves `h(p) = m` for one target, returning `(p, residual, converged)`.
pub(crate) fn invert_point<T: Real>(
    h: &DisplacementField<T>,
    target: Vec3<T>,
    start: Vec3<T>,
    opts: &InversionOptions<T>,
) -> (Vec3<T>, T, bool) {
    let tol = opts.tol_voxels * h.geom.min_spacing();
    let residual = |p: Vec3<T>| h.apply(p) - target;
    let mut p = start;
    let mut r = residual(p);
    let mut rn = r.norm();
    for _ in 0..opts.max_iters {
        if rn <= tol {
            return (p, rn, true);
        }
        let step = h.jacobian(p).inverse().map(|j| -j.mul_vec(r)).unwrap_or(-r);
        let mut accepted = false;
        let mut alpha = T::one();
        for _ in 0..6 {
            let cand = p + step * alpha;
            let rc = residual(cand);
            let rcn = rc.norm();
            if rcn < rn {
                p = cand;
                r = rc;
                rn = rcn;
                accepted = true;
                break;
            }
            alpha *= T::of(0.5);
        }
        if !accepted {
            let cand = target - h.sample(p);
            let rc = residual(cand);
            let rcn = rc.norm();
            if rcn < rn {
                p = cand;
                r = rc;
                rn = rcn;
            } else {
                break;
            }
        }
    }
    (p, rn, rn <= tol)
}

/// `p* = argmin ‖h(p) − m_i‖²` for every target; `init` warm-starts the descent.
///
/// Without `init` the descent starts from the fixed-point guess `m − u(m)`.
/// Points that do not reach the tolerance keep their best iterate and are flagged.
pub fn invert_at_points<T: Real>(
    h: &DisplacementField<T>,
    pts: &PointSet<T>,
    init: Option<&PointSet<T>>,
    opts: &InversionOptions<T>,
) -> Result<PointInversion<T>> {
    if let Some(init) = init {
        if init.len() != pts.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} targets but {} initial guesses",
                pts.len(),
                init.len()
            )));
        }
    }
    let mut points = Vec::with_capacity(pts.len());
    let mut residuals = Vec::with_capacity(pts.len());
    let mut converged = Vec::with_capacity(pts.len());
    for (i, &m) in pts.points.iter().enumerate() {
        let start = match init {
            Some(init) => init.points[i],
            None => m - h.sample(m),
        };
        let (p, r, ok) = invert_point(h, m, start, opts);
        points.push(p);
        residuals.push(r);
        converged.push(ok);
    }
    Ok(PointInversion { points: PointSet::from_vec(points), residuals, converged })
}

/// Dense inverse: solves `h(p) = x` at every voxel center and returns `u⁻¹(x) = p − x`.
///
/// Successive voxels along x warm-start from their neighbour's solution.
/// The second value is the largest residual (mm).
pub fn invert_field<T: Real>(h: &DisplacementField<T>, opts: &InversionOptions<T>) -> (DisplacementField<T>, T) {
    let g = h.geom;
    let mut data = Vec::with_capacity(g.len());
    let mut worst = T::zero();
    let mut prev: Option<Vec3<T>> = None;
    for idx in 0..g.len() {
        let x = g.position(idx);
        let start = match (prev, g.coords(idx)[0]) {
            (Some(d), i) if i > 0 => x + d,
            _ => x - h.sample(x),
        };
        let (p, r, _) = invert_point(h, x, start, opts);
        worst = worst.max(r);
        let d = p - x;
        prev = Some(d);
        data.push(d);
    }
    (DisplacementField { geom: g, data }, worst)
}
