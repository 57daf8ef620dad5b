//! Dense 3D grids, point sets and surface meshes.
//!
//! Every coordinate handed to or returned from this module is physical (mm).
//! Voxel `(i, j, k)` sits at `origin + (i, j, k) ⊙ spacing` and data is stored
//! x-fastest: `index = i + nx·(j + ny·k)`.

mod field;
mod invert;
pub mod io;
mod mesh;
mod smooth;
mod vec3;
mod volume;

pub use field::{compose, warp_points, DisplacementField};
pub use invert::{invert_at_points, invert_field, InversionOptions, PointInversion};
pub use mesh::{closest_point_on_triangle, PointSet, SurfaceMesh};
pub use smooth::{gaussian_kernel, gaussian_smooth, gaussian_smooth_volume};
pub use vec3::{Mat3, Vec3};
pub use volume::ScalarVolume;

use crate::{Error, Real, Result};

/// Grid layout shared by scalar volumes and vector fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry<T> {
    pub dims: [usize; 3],
    pub spacing: Vec3<T>,
    pub origin: Vec3<T>,
}

impl<T: Real> Geometry<T> {
    pub fn new(dims: [usize; 3], spacing: Vec3<T>, origin: Vec3<T>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.0.iter().any(|&s| !(s > T::zero()) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("spacing must be positive, got {spacing:?}")));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidArgument("origin must be finite".into()));
        }
        Ok(Geometry { dims, spacing, origin })
    }

    /// Cubic grid of `n³` voxels at isotropic `spacing` with the origin at zero.
    pub fn cube(n: usize, spacing: T) -> Self {
        Self::new([n; 3], Vec3::splat(spacing), Vec3::zero()).expect("valid cube geometry")
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    #[inline]
    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3<T> {
        Vec3([
            self.origin[0] + T::of_usize(i) * self.spacing[0],
            self.origin[1] + T::of_usize(j) * self.spacing[1],
            self.origin[2] + T::of_usize(k) * self.spacing[2],
        ])
    }

    #[inline]
    pub fn position(&self, idx: usize) -> Vec3<T> {
        let [i, j, k] = self.coords(idx);
        self.voxel_center(i, j, k)
    }

    /// Continuous voxel coordinates of physical point `x`.
    #[inline]
    pub fn to_voxel(&self, x: Vec3<T>) -> Vec3<T> {
        (x - self.origin).zip(self.spacing, |a, s| a / s)
    }

    #[inline]
    pub fn to_physical(&self, q: Vec3<T>) -> Vec3<T> {
        self.origin + q.zip(self.spacing, |a, s| a * s)
    }

    pub fn min_spacing(&self) -> T {
        self.spacing[0].min(self.spacing[1]).min(self.spacing[2])
    }

    pub fn voxel_volume(&self) -> T {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Physical position of the last voxel center.
    pub fn max_corner(&self) -> Vec3<T> {
        self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    pub fn center(&self) -> Vec3<T> {
        (self.origin + self.max_corner()) * T::of(0.5)
    }

    /// True when `x` lies inside the box spanned by the voxel centers.
    pub fn contains(&self, x: Vec3<T>) -> bool {
        let q = self.to_voxel(x);
        let eps = T::of(1e-6);
        (0..3).all(|a| q[a] >= -eps && q[a] <= T::of_usize(self.dims[a] - 1) + eps)
    }

    pub fn same_as(&self, o: &Self) -> bool {
        let tol = T::of(1e-6) * self.min_spacing();
        self.dims == o.dims
            && (self.spacing - o.spacing).max_abs() <= tol
            && (self.origin - o.origin).max_abs() <= tol
    }

    pub fn check_same(&self, o: &Self, what: &str) -> Result<()> {
        if self.same_as(o) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!("{what}: {:?} vs {:?}", self, o)))
        }
    }

    /// Half-resolution grid over the same origin: `⌈n/2⌉` voxels at double spacing.
    pub fn downsampled(&self) -> Self {
        Geometry {
            dims: self.dims.map(|n| n.div_ceil(2)),
            spacing: self.spacing * T::of(2.0),
            origin: self.origin,
        }
    }

    pub fn cast<U: Real>(&self) -> Geometry<U> {
        Geometry { dims: self.dims, spacing: self.spacing.cast(), origin: self.origin.cast() }
    }
}

/// Trilinear cell lookup in voxel coordinates, clamped to the grid.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Cell<T> {
    pub base: [usize; 3],
    pub next: [usize; 3],
    pub frac: [T; 3],
}

impl<T: Real> Cell<T> {
    #[inline]
    pub fn locate(dims: &[usize; 3], q: Vec3<T>) -> Self {
        let mut base = [0; 3];
        let mut next = [0; 3];
        let mut frac = [T::zero(); 3];
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                continue;
            }
            let hi = T::of_usize(n - 1);
            let c = q[a].max(T::zero()).min(hi);
            let i0 = c.floor().to_usize().unwrap_or(0).min(n - 2);
            base[a] = i0;
            next[a] = i0 + 1;
            frac[a] = c - T::of_usize(i0);
        }
        Cell { base, next, frac }
    }

    #[inline]
    pub fn interpolate<V>(&self, dims: &[usize; 3], data: &[V]) -> V
    where
        V: Copy + std::ops::Add<Output = V> + std::ops::Mul<T, Output = V>,
    {
        let nx = dims[0];
        let nxy = dims[0] * dims[1];
        let [x0, y0, z0] = self.base;
        let [x1, y1, z1] = self.next;
        let [fx, fy, fz] = self.frac;
        let gx = T::one() - fx;
        let gy = T::one() - fy;
        let gz = T::one() - fz;
        let at = |i: usize, j: usize, k: usize| data[i + nx * j + nxy * k];
        let c00 = at(x0, y0, z0) * gx + at(x1, y0, z0) * fx;
        let c10 = at(x0, y1, z0) * gx + at(x1, y1, z0) * fx;
        let c01 = at(x0, y0, z1) * gx + at(x1, y0, z1) * fx;
        let c11 = at(x0, y1, z1) * gx + at(x1, y1, z1) * fx;
        let c0 = c00 * gy + c10 * fy;
        let c1 = c01 * gy + c11 * fy;
        c0 * gz + c1 * fz
    }
}

/// True when voxel coordinate `q` lies inside `[0, n-1]` on every axis (with a small slack).
#[inline]
pub(crate) fn inside_voxel_box<T: Real>(dims: &[usize; 3], q: Vec3<T>) -> bool {
    let eps = T::of(1e-6);
    (0..3).all(|a| q[a] >= -eps && q[a] <= T::of_usize(dims[a] - 1) + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_and_coords_are_inverse() {
        let g = Geometry::<f64>::new([3, 4, 5], Vec3::splat(1.0), Vec3::zero()).unwrap();
        for idx in 0..g.len() {
            let [i, j, k] = g.coords(idx);
            assert_eq!(g.index(i, j, k), idx);
        }
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(Geometry::<f64>::new([0, 1, 1], Vec3::splat(1.0), Vec3::zero()).is_err());
        assert!(Geometry::<f64>::new([1, 1, 1], Vec3::new(1.0, 0.0, 1.0), Vec3::zero()).is_err());
    }

    #[test]
    fn voxel_physical_round_trip() {
        let g = Geometry::<f64>::new([8, 8, 8], Vec3::new(0.5, 1.0, 2.0), Vec3::new(-3.0, 1.0, 2.5)).unwrap();
        let x = Vec3::new(0.3, 2.2, 7.9);
        let back = g.to_physical(g.to_voxel(x));
        assert!((back - x).norm() < 1e-12);
    }
}
