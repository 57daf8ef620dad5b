use super::{inside_voxel_box, Cell, DisplacementField, Geometry, Vec3};
use crate::{Error, Real, Result};

/// Dense scalar image on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume<T> {
    pub geom: Geometry<T>,
    pub data: Vec<T>,
    /// Value returned when sampling outside the grid.
    pub background: T,
}

impl<T: Real> ScalarVolume<T> {
    pub fn new(geom: Geometry<T>, data: Vec<T>) -> Result<Self> {
        if data.len() != geom.len() {
            return Err(Error::DimensionMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                geom.len()
            )));
        }
        Ok(ScalarVolume { geom, data, background: T::zero() })
    }

    pub fn filled(geom: Geometry<T>, value: T) -> Self {
        ScalarVolume { geom, data: vec![value; geom.len()], background: T::zero() }
    }

    /// Evaluates `f` at every voxel center.
    pub fn from_fn(geom: Geometry<T>, mut f: impl FnMut(Vec3<T>) -> T) -> Self {
        let data = (0..geom.len()).map(|idx| f(geom.position(idx))).collect();
        ScalarVolume { geom, data, background: T::zero() }
    }

    pub fn with_background(mut self, background: T) -> Self {
        self.background = background;
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.geom.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.geom.index(i, j, k);
        self.data[idx] = v;
    }

    /// Trilinear interpolation at physical point `x`; the background value outside the grid.
    #[inline]
    pub fn sample(&self, x: Vec3<T>) -> T {
        self.sample_voxel(self.geom.to_voxel(x))
    }

    /// Trilinear interpolation at continuous voxel coordinate `q`.
    #[inline]
    pub fn sample_voxel(&self, q: Vec3<T>) -> T {
        if !inside_voxel_box(&self.geom.dims, q) {
            return self.background;
        }
        Cell::locate(&self.geom.dims, q).interpolate(&self.geom.dims, &self.data)
    }

    /// Trilinear interpolation with clamp-to-edge outside the grid.
    pub fn sample_clamped(&self, x: Vec3<T>) -> T {
        Cell::locate(&self.geom.dims, self.geom.to_voxel(x)).interpolate(&self.geom.dims, &self.data)
    }

    /// Central-difference gradient in physical units (one-sided on the border).
    pub fn gradient(&self) -> DisplacementField<T> {
        let g = self.geom;
        let [nx, ny, nz] = g.dims;
        let stride = [1, nx, nx * ny];
        let mut out = vec![Vec3::zero(); g.len()];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = g.index(i, j, k);
                    let pos = [i, j, k];
                    let mut grad = Vec3::zero();
                    for a in 0..3 {
                        let n = g.dims[a];
                        if n == 1 {
                            continue;
                        }
                        let (lo, hi, span) = if pos[a] == 0 {
                            (idx, idx + stride[a], T::one())
                        } else if pos[a] == n - 1 {
                            (idx - stride[a], idx, T::one())
                        } else {
                            (idx - stride[a], idx + stride[a], T::of(2.0))
                        };
                        grad[a] = (self.data[hi] - self.data[lo]) / (span * g.spacing[a]);
                    }
                    out[idx] = grad;
                }
            }
        }
        DisplacementField { geom: g, data: out }
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::of_usize(self.data.len())
    }

    pub fn min_max(&self) -> (T, T) {
        self.data.iter().fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        ScalarVolume { geom: self.geom, data: self.data.iter().map(|&v| f(v)).collect(), background: self.background }
    }

    /// Resamples `self` at the voxel centers of `geom`, optionally through a mapping of the target point.
    pub fn resample(&self, geom: &Geometry<T>, mapping: impl Fn(Vec3<T>) -> Vec3<T>) -> Self {
        let data = (0..geom.len()).map(|idx| self.sample(mapping(geom.position(idx)))).collect();
        ScalarVolume { geom: *geom, data, background: self.background }
    }

    /// `self ∘ h` on the grid of `h`.
    pub fn warp(&self, h: &DisplacementField<T>) -> Self {
        let g = h.geom;
        let data = (0..g.len()).map(|idx| self.sample(g.position(idx) + h.data[idx])).collect();
        ScalarVolume { geom: g, data, background: self.background }
    }

    /// Number of voxels above one half (binary masks).
    pub fn count_foreground(&self) -> usize {
        let half = T::of(0.5);
        self.data.iter().filter(|&&v| v > half).count()
    }

    pub fn cast<U: Real>(&self) -> ScalarVolume<U> {
        ScalarVolume {
            geom: self.geom.cast(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            background: U::of(self.background.f64()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom() -> Geometry<f64> {
        Geometry::new([6, 5, 4], Vec3::new(1.0, 2.0, 0.5), Vec3::new(-1.0, 0.5, 3.0)).unwrap()
    }

    #[test]
    fn constant_volume_samples_constant() {
        let v = ScalarVolume::filled(geom(), 5.0);
        for x in [Vec3::new(0.2, 1.7, 3.3), Vec3::new(3.9, 8.0, 4.1)] {
            assert!((v.sample(x) - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nodes_are_reproduced_exactly() {
        let g = geom();
        let v = ScalarVolume::from_fn(g, |x: Vec3<f64>| x[0] * 3.0 - x[1] * x[2]);
        for idx in [0, 7, 31, g.len() - 1] {
            assert_eq!(v.sample(g.position(idx)), v.data[idx]);
        }
    }

    #[test]
    fn linear_ramp_is_reproduced_between_voxels() {
        let g = geom();
        let v = ScalarVolume::from_fn(g, |x: Vec3<f64>| 2.0 * x[0]);
        for x in [Vec3::new(0.37, 1.1, 3.2), Vec3::new(3.5, 7.3, 4.4), Vec3::new(-0.25, 0.9, 4.0)] {
            assert!((v.sample(x) - 2.0 * x[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_fields_are_reproduced() {
        let g = geom();
        let f = |x: Vec3<f64>| 1.5 - 0.25 * x[0] + 0.75 * x[1] + 2.0 * x[2];
        let v = ScalarVolume::from_fn(g, f);
        let x = Vec3::new(2.3, 4.4, 3.9);
        assert!((v.sample(x) - f(x)).abs() < 1e-12);
    }

    #[test]
    fn outside_returns_background() {
        let v = ScalarVolume::filled(geom(), 5.0).with_background(-2.0);
        assert_eq!(v.sample(Vec3::new(-10.0, 1.0, 3.1)), -2.0);
        assert_eq!(v.sample_clamped(Vec3::new(-10.0, 1.0, 3.1)), 5.0);
    }

    #[test]
    fn gradient_of_ramp() {
        let g = geom();
        let v = ScalarVolume::from_fn(g, |x: Vec3<f64>| 2.0 * x[0] - x[2]);
        let grad = v.gradient();
        for d in &grad.data {
            assert!((d[0] - 2.0).abs() < 1e-12 && d[1].abs() < 1e-12 && (d[2] + 1.0).abs() < 1e-12);
        }
    }
}
