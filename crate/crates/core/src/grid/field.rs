use super::{Cell, Geometry, Mat3, PointSet, Vec3};
use crate::{Error, Real, Result};

/// Dense displacement field `u(x)` (mm) describing the transform `h(x) = x + u(x)`.
///
/// Sampling clamps to the grid edge. The same type also carries other vector
/// grids (image gradients, forces, corrections).
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField<T> {
    pub geom: Geometry<T>,
    pub data: Vec<Vec3<T>>,
}

impl<T: Real> DisplacementField<T> {
    pub fn new(geom: Geometry<T>, data: Vec<Vec3<T>>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::DimensionMismatch(format!(
                "field data has {} vectors, grid needs {}",
                data.len(),
                geom.len()
            )));
        }
        Ok(DisplacementField { geom, data })
    }

    pub fn identity(geom: Geometry<T>) -> Self {
        DisplacementField { geom, data: vec![Vec3::zero(); geom.len()] }
    }

    pub fn constant(geom: Geometry<T>, t: Vec3<T>) -> Self {
        DisplacementField { geom, data: vec![t; geom.len()] }
    }

    /// Displacement `f(x)` evaluated at every voxel center.
    pub fn from_fn(geom: Geometry<T>, mut f: impl FnMut(Vec3<T>) -> Vec3<T>) -> Self {
        let data = (0..geom.len()).map(|idx| f(geom.position(idx))).collect();
        DisplacementField { geom, data }
    }

    /// `u(x)`, trilinear with clamp-to-edge.
    #[inline]
    pub fn sample(&self, x: Vec3<T>) -> Vec3<T> {
        self.sample_voxel(self.geom.to_voxel(x))
    }

    #[inline]
    pub fn sample_voxel(&self, q: Vec3<T>) -> Vec3<T> {
        Cell::locate(&self.geom.dims, q).interpolate(&self.geom.dims, &self.data)
    }

    /// `h(x) = x + u(x)`.
    #[inline]
    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        x + self.sample(x)
    }

    /// Jacobian of `h` at `x` by central differences of the interpolated field.
    pub fn jacobian(&self, x: Vec3<T>) -> Mat3<T> {
        let mut m = Mat3::identity();
        for b in 0..3 {
            if self.geom.dims[b] == 1 {
                continue;
            }
            let step = self.geom.spacing[b] * T::of(0.5);
            let e = Vec3::axis(b) * step;
            let d = (self.sample(x + e) - self.sample(x - e)) / (step * T::of(2.0));
            for a in 0..3 {
                m.0[a][b] += d[a];
            }
        }
        m
    }

    pub fn is_identity(&self) -> bool {
        self.data.iter().all(|v| *v == Vec3::zero())
    }

    pub fn max_norm(&self) -> T {
        self.data.iter().map(|v| v.norm()).fold(T::zero(), T::max)
    }

    pub fn scaled(&self, s: T) -> Self {
        DisplacementField { geom: self.geom, data: self.data.iter().map(|&v| v * s).collect() }
    }

    /// Σ‖self − other‖² over voxels.
    pub fn sum_squared_difference(&self, other: &Self) -> Result<T> {
        self.geom.check_same(&other.geom, "field difference")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).norm_squared()).sum())
    }

    /// Smallest Jacobian determinant of `h` over voxel centers (finite differences on the grid).
    pub fn min_jacobian_det(&self) -> T {
        let g = self.geom;
        let [nx, ny, nz] = g.dims;
        let stride = [1, nx, nx * ny];
        let mut worst = T::infinity();
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = g.index(i, j, k);
                    let pos = [i, j, k];
                    let mut m = Mat3::identity();
                    for b in 0..3 {
                        let n = g.dims[b];
                        if n == 1 {
                            continue;
                        }
                        let (lo, hi, span) = if pos[b] == 0 {
                            (idx, idx + stride[b], T::one())
                        } else if pos[b] == n - 1 {
                            (idx - stride[b], idx, T::one())
                        } else {
                            (idx - stride[b], idx + stride[b], T::of(2.0))
                        };
                        let d = (self.data[hi] - self.data[lo]) / (span * g.spacing[b]);
                        for a in 0..3 {
                            m.0[a][b] += d[a];
                        }
                    }
                    worst = worst.min(m.det());
                }
            }
        }
        worst
    }

    /// Resamples the field onto `geom` (displacements are physical, so values carry over unchanged).
    pub fn resample(&self, geom: &Geometry<T>) -> Self {
        let data = (0..geom.len()).map(|idx| self.sample(geom.position(idx))).collect();
        DisplacementField { geom: *geom, data }
    }

    pub fn cast<U: Real>(&self) -> DisplacementField<U> {
        DisplacementField { geom: self.geom.cast(), data: self.data.iter().map(|v| v.cast()).collect() }
    }
}

/// `h ∘ (x + c(x))`: `u_new(x) = c(x) + u_h(x + c(x))`.
pub fn compose<T: Real>(h: &DisplacementField<T>, c: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    h.geom.check_same(&c.geom, "compose")?;
    let g = h.geom;
    let inv_spacing = g.spacing.map(|s| T::one() / s);
    let mut data = Vec::with_capacity(g.len());
    for (idx, &cv) in c.data.iter().enumerate() {
        let [i, j, k] = g.coords(idx);
        // Stay in voxel units so that a zero correction lands exactly on the node.
        let q = Vec3([
            T::of_usize(i) + cv[0] * inv_spacing[0],
            T::of_usize(j) + cv[1] * inv_spacing[1],
            T::of_usize(k) + cv[2] * inv_spacing[2],
        ]);
        data.push(cv + h.sample_voxel(q));
    }
    Ok(DisplacementField { geom: g, data })
}

/// Maps each point through `h(p) = p + u(p)`.
pub fn warp_points<T: Real>(h: &DisplacementField<T>, pts: &PointSet<T>) -> PointSet<T> {
    PointSet::from_vec(pts.points.iter().map(|&p| h.apply(p)).collect())
}
