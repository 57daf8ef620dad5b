//! Resampling, log-polynomial bias correction and rigid initialization.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};

use crate::grid::{gaussian_smooth_volume, DisplacementField, Geometry, Mat3, ScalarVolume, Vec3};
use crate::settings;
use crate::{Error, Real, Result};

/// `r(x) = R·(x − center) + center + translation` with `R = Rz·Ry·Rx`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform<T> {
    pub angles: [T; 3],
    pub translation: Vec3<T>,
    pub center: Vec3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity(center: Vec3<T>) -> Self {
        RigidTransform { angles: [T::zero(); 3], translation: Vec3::zero(), center }
    }

    pub fn rotation(&self) -> Mat3<T> {
        Mat3::rotation(self.angles)
    }

    #[inline]
    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        self.rotation().mul_vec(x - self.center) + self.center + self.translation
    }

    /// Same center, rotation `Rᵀ`, translation `−Rᵀ·t`.
    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        RigidTransform { angles: rt.euler_angles(), translation: -rt.mul_vec(self.translation), center: self.center }
    }

    /// `self ∘ other`, expressed about `other`'s center.
    pub fn compose(&self, other: &Self) -> Self {
        let r = self.rotation().mul_mat(&other.rotation());
        let c = other.center;
        let t = self.apply(c + other.translation) - c;
        RigidTransform { angles: r.euler_angles(), translation: t, center: c }
    }

    /// Dense displacement `r(x) − x` on `geom`.
    pub fn to_field(&self, geom: Geometry<T>) -> DisplacementField<T> {
        let r = self.rotation();
        DisplacementField::from_fn(geom, |x| r.mul_vec(x - self.center) + self.center + self.translation - x)
    }

    /// Norm of the six parameters.
    pub fn parameter_norm(&self) -> T {
        let a = self.angles;
        (a[0] * a[0] + a[1] * a[1] + a[2] * a[2] + self.translation.norm_squared()).sqrt()
    }

    fn from_params(p: &Vector6<f64>, center: Vec3<T>) -> Self {
        RigidTransform {
            angles: [T::of(p[0]), T::of(p[1]), T::of(p[2])],
            translation: Vec3::new(T::of(p[3]), T::of(p[4]), T::of(p[5])),
            center,
        }
    }
}

impl<T: Real> fmt::Display for RigidTransform<T> {
    /// One line: three angles, translation, center.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.angles;
        let t = self.translation;
        let o = self.center;
        write!(f, "{a} {b} {c} {} {} {} {} {} {}", t[0], t[1], t[2], o[0], o[1], o[2])
    }
}

impl<T: Real> FromStr for RigidTransform<T> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(|w| w.parse::<f64>().map_err(|e| Error::Parse(format!("rigid transform: {e}"))))
            .collect::<Result<_>>()?;
        if v.len() != 9 {
            return Err(Error::Parse(format!("rigid transform needs 9 reals, found {}", v.len())));
        }
        let t = |i: usize| T::of(v[i]);
        Ok(RigidTransform {
            angles: [t(0), t(1), t(2)],
            translation: Vec3::new(t(3), t(4), t(5)),
            center: Vec3::new(t(6), t(7), t(8)),
        })
    }
}

/// Trilinear resampling onto an isotropic grid over the same physical extent.
pub fn resample_isotropic<T: Real>(v: &ScalarVolume<T>, target_spacing: T) -> Result<ScalarVolume<T>> {
    if !(target_spacing > T::zero()) || !target_spacing.is_finite() {
        return Err(Error::InvalidArgument(format!("target spacing must be positive, got {target_spacing}")));
    }
    let g = v.geom;
    let mut dims = [1; 3];
    for a in 0..3 {
        let extent = T::of_usize(g.dims[a] - 1) * g.spacing[a];
        let n = (extent / target_spacing + T::of(1e-9)).floor().to_usize().unwrap_or(0);
        dims[a] = n + 1;
    }
    let target = Geometry::new(dims, Vec3::splat(target_spacing), g.origin)?;
    Ok(v.resample(&target, |x| x))
}

/// Monomials `x^a y^b z^c` with `a + b + c ≤ order`.
fn monomial_exponents(order: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for total in 0..=order {
        for a in (0..=total).rev() {
            for b in (0..=total - a).rev() {
                out.push([a, b, total - a - b]);
            }
        }
    }
    out
}

/// Divides out a least-squares polynomial fit of log-intensity, rescaled so the mean is preserved.
///
/// Only strictly positive voxels enter the fit.
pub fn bias_correct<T: Real>(v: &ScalarVolume<T>, order: usize) -> Result<ScalarVolume<T>> {
    if order > 2 {
        return Err(Error::InvalidArgument(format!("bias order must be 0, 1 or 2, got {order}")));
    }
    let g = v.geom;
    let exps = monomial_exponents(order);
    let m = exps.len();
    let center = g.center().to_f64();
    let half: [f64; 3] = std::array::from_fn(|a| {
        let e = (g.dims[a] - 1) as f64 * g.spacing[a].f64() * 0.5;
        if e > 0.0 {
            e
        } else {
            1.0
        }
    });
    let basis = |idx: usize, row: &mut [f64]| {
        let p = g.position(idx).to_f64();
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - center[a]) / half[a]);
        for (slot, e) in row.iter_mut().zip(&exps) {
            *slot = q[0].powi(e[0] as i32) * q[1].powi(e[1] as i32) * q[2].powi(e[2] as i32);
        }
    };
    let mut ata = DMatrix::<f64>::zeros(m, m);
    let mut atb = DVector::<f64>::zeros(m);
    let mut row = vec![0.0; m];
    let mut count = 0usize;
    for (idx, &val) in v.data.iter().enumerate() {
        let val = val.f64();
        if !(val > 0.0) {
            continue;
        }
        count += 1;
        basis(idx, &mut row);
        let y = val.ln();
        for r in 0..m {
            atb[r] += row[r] * y;
            for c in 0..m {
                ata[(r, c)] += row[r] * row[c];
            }
        }
    }
    if count < m {
        return Err(Error::Degenerate(format!("bias fit needs at least {m} positive voxels, found {count}")));
    }
    let coef = ata
        .lu()
        .solve(&atb)
        .ok_or_else(|| Error::Degenerate("bias fit normal equations are singular".into()))?;
    let mut out = Vec::with_capacity(g.len());
    let mut sum_in = 0.0;
    let mut sum_out = 0.0;
    for (idx, &val) in v.data.iter().enumerate() {
        basis(idx, &mut row);
        let fit: f64 = row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        let corrected = val.f64() / fit.exp();
        sum_in += val.f64();
        sum_out += corrected;
        out.push(corrected);
    }
    let scale = if sum_out != 0.0 { sum_in / sum_out } else { 1.0 };
    let data = out.into_iter().map(|x| T::of(x * scale)).collect();
    Ok(ScalarVolume { geom: g, data, background: v.background })
}

/// Gaussian pyramid, finest level first: each level smooths by one fine voxel and keeps every other sample.
pub fn pyramid<T: Real>(v: &ScalarVolume<T>, levels: usize) -> Vec<ScalarVolume<T>> {
    let mut out = vec![v.clone()];
    for _ in 1..levels.max(1) {
        let prev = out.last().expect("nonempty pyramid");
        if prev.geom.dims.iter().all(|&n| n <= 4) {
            break;
        }
        let smooth = gaussian_smooth_volume(prev, prev.geom.min_spacing());
        let coarse = prev.geom.downsampled();
        let [nx, ny, _] = prev.geom.dims;
        let data = (0..coarse.len())
            .map(|idx| {
                let [i, j, k] = coarse.coords(idx);
                smooth.data[2 * i + nx * (2 * j + ny * 2 * k)]
            })
            .collect();
        out.push(ScalarVolume { geom: coarse, data, background: prev.background });
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RigidConfig {
    pub levels: usize,
    pub max_iters: usize,
    /// Stop when the parameter update norm falls below this.
    pub step_tol: f64,
    /// Consecutive SSD increases that count as divergence.
    pub divergence_steps: usize,
}

impl Default for RigidConfig {
    fn default() -> Self {
        RigidConfig { levels: 3, max_iters: 40, step_tol: 1e-5, divergence_steps: 8 }
    }
}

settings!(RigidConfig { levels, max_iters, step_tol, divergence_steps });

#[derive(Clone, Debug)]
pub struct RigidResult<T> {
    pub transform: RigidTransform<T>,
    pub ssd: T,
    pub initial_ssd: T,
    pub iterations: usize,
    /// Best-so-far was returned after repeated SSD increases.
    pub diverged: bool,
}

fn rotation_derivatives(angles: [f64; 3]) -> [Mat3<f64>; 3] {
    let (sa, ca) = angles[0].sin_cos();
    let (sb, cb) = angles[1].sin_cos();
    let (sg, cg) = angles[2].sin_cos();
    let rx = Mat3([[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]]);
    let ry = Mat3([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]]);
    let rz = Mat3([[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]]);
    let drx = Mat3([[0.0, 0.0, 0.0], [0.0, -sa, -ca], [0.0, ca, -sa]]);
    let dry = Mat3([[-sb, 0.0, cb], [0.0, 0.0, 0.0], [-cb, 0.0, -sb]]);
    let drz = Mat3([[-sg, -cg, 0.0], [cg, -sg, 0.0], [0.0, 0.0, 0.0]]);
    [rz.mul_mat(&ry).mul_mat(&drx), rz.mul_mat(&dry).mul_mat(&rx), drz.mul_mat(&ry).mul_mat(&rx)]
}

fn rigid_ssd<T: Real>(t: &ScalarVolume<T>, r: &ScalarVolume<T>, tr: &RigidTransform<T>) -> f64 {
    let rot = tr.rotation();
    (0..r.geom.len())
        .map(|idx| {
            let x = r.geom.position(idx);
            let d = (t.sample(rot.mul_vec(x - tr.center) + tr.center + tr.translation) - r.data[idx]).f64();
            d * d
        })
        .sum()
}

/// 6-DOF rigid registration minimizing `Σ (T(r(x)) − R(x))²` over R's grid.
///
/// Damped Gauss-Newton (Levenberg-Marquardt) on a coarse-to-fine pyramid. The
/// rotation center is the center of R's grid.
pub fn register_rigid<T: Real>(t: &ScalarVolume<T>, r: &ScalarVolume<T>, cfg: &RigidConfig) -> Result<RigidResult<T>> {
    let (t_lo, t_hi) = (t.geom.origin, t.geom.max_corner());
    let (r_lo, r_hi) = (r.geom.origin, r.geom.max_corner());
    if (0..3).any(|a| t_hi[a] < r_lo[a] || r_hi[a] < t_lo[a]) {
        return Err(Error::InvalidArgument("rigid registration: volumes do not overlap".into()));
    }
    let center = r.geom.center();
    let tp = pyramid(t, cfg.levels);
    let rp = pyramid(r, cfg.levels);
    let levels = tp.len().min(rp.len());
    let mut params = Vector6::<f64>::zeros();
    let initial_ssd = rigid_ssd(t, r, &RigidTransform::identity(center));
    let mut iterations = 0;
    let mut diverged = false;
    for level in (0..levels).rev() {
        let (tl, rl) = (&tp[level], &rp[level]);
        let grad = tl.gradient();
        let mut current = RigidTransform::from_params(&params, center);
        let mut cost = rigid_ssd(tl, rl, &current);
        let mut damping = 1e-3;
        let mut rejections = 0;
        for _ in 0..cfg.max_iters {
            iterations += 1;
            let rot = current.rotation().cast::<f64>();
            let drot = rotation_derivatives([params[0], params[1], params[2]]);
            let c = center.cast::<f64>();
            let tr = current.translation.cast::<f64>();
            let mut jtj = Matrix6::<f64>::zeros();
            let mut jtr = Vector6::<f64>::zeros();
            for idx in 0..rl.geom.len() {
                let x = rl.geom.position(idx).cast::<f64>();
                let d = x - c;
                let y = rot.mul_vec(d) + c + tr;
                let yt = y.cast::<T>();
                if !tl.geom.contains(yt) {
                    continue;
                }
                let res = (tl.sample(yt) - rl.data[idx]).f64();
                let gt = grad.sample(yt).cast::<f64>();
                let mut row = Vector6::<f64>::zeros();
                for a in 0..3 {
                    row[a] = gt.dot(drot[a].mul_vec(d));
                    row[3 + a] = gt[a];
                }
                jtj += row * row.transpose();
                jtr += row * res;
            }
            let scale = jtj.diagonal().map(|v| v.max(1e-12));
            let mut accepted = false;
            let mut step_norm = f64::INFINITY;
            while !accepted {
                let mut a = jtj;
                for i in 0..6 {
                    a[(i, i)] += damping * scale[i];
                }
                let Some(step) = a.cholesky().map(|ch| ch.solve(&(-jtr))) else {
                    damping *= 10.0;
                    continue;
                };
                step_norm = step.norm();
                if step_norm < cfg.step_tol {
                    break;
                }
                let trial_params = params + step;
                let trial = RigidTransform::from_params(&trial_params, center);
                let trial_cost = rigid_ssd(tl, rl, &trial);
                if trial_cost < cost {
                    params = trial_params;
                    current = trial;
                    cost = trial_cost;
                    damping = (damping * 0.3).max(1e-9);
                    rejections = 0;
                    accepted = true;
                } else {
                    damping *= 10.0;
                    rejections += 1;
                    if rejections >= cfg.divergence_steps {
                        diverged = true;
                        break;
                    }
                }
            }
            if !accepted {
                break;
            }
            if step_norm < cfg.step_tol {
                break;
            }
        }
    }
    let transform = RigidTransform::from_params(&params, center);
    let ssd = rigid_ssd(t, r, &transform);
    Ok(RigidResult { transform, ssd: T::of(ssd), initial_ssd: T::of(initial_ssd), iterations, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(g: Geometry<f64>) -> ScalarVolume<f64> {
        // Asymmetric so that rotations are observable.
        let c = g.center();
        ScalarVolume::from_fn(g, |x: Vec3<f64>| {
            let d = x - c;
            let a = (-(d[0] * d[0] / 40.0 + d[1] * d[1] / 18.0 + d[2] * d[2] / 28.0)).exp();
            let d2 = d - Vec3::new(4.0, 2.0, -1.0);
            let b = 0.6 * (-(d2.norm_squared()) / 6.0).exp();
            a + b
        })
    }

    #[test]
    fn inverse_composes_to_identity() {
        let tr = RigidTransform { angles: [0.1, -0.2, 0.3], translation: Vec3::new(1.0, -2.0, 0.5), center: Vec3::new(5.0, 6.0, 7.0) };
        let id = tr.compose(&tr.inverse());
        for x in [Vec3::new(0.0, 0.0, 0.0), Vec3::new(10.0, -3.0, 4.0)] {
            assert!((id.apply(x) - x).norm() < 1e-9);
            assert!((tr.inverse().apply(tr.apply(x)) - x).norm() < 1e-9);
        }
    }

    #[test]
    fn transform_text_round_trip() {
        let tr = RigidTransform { angles: [0.1, -0.2, 0.3], translation: Vec3::new(1.0, -2.0, 0.5), center: Vec3::new(5.0, 6.0, 7.0) };
        let back: RigidTransform<f64> = tr.to_string().parse().unwrap();
        assert_eq!(back, tr);
        assert!("1 2 3".parse::<RigidTransform<f64>>().is_err());
    }

    #[test]
    fn isotropic_resampling() {
        let g = Geometry::new([8, 6, 5], Vec3::splat(1.0), Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let v = ScalarVolume::from_fn(g, |x: Vec3<f64>| x[0] + 2.0 * x[1] - x[2]);
        let same = resample_isotropic(&v, 1.0).unwrap();
        assert_eq!(same.geom.dims, g.dims);
        for (a, b) in same.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-6);
        }
        let fine = resample_isotropic(&v, 0.5).unwrap();
        assert_eq!(fine.geom.dims, [15, 11, 9]);
        let c = resample_isotropic(&ScalarVolume::filled(g, 4.0), 0.7).unwrap();
        assert!(c.data.iter().all(|&x| (x - 4.0).abs() < 1e-12));
        assert!(resample_isotropic(&v, 0.0).is_err());
    }

    #[test]
    fn bias_of_constant_volume() {
        let g = Geometry::cube(10, 1.0);
        let v = ScalarVolume::filled(g, 7.0);
        let out = bias_correct(&v, 1).unwrap();
        assert!(out.data.iter().all(|&x: &f64| (x - 7.0).abs() < 1e-4));
        let z = ScalarVolume::filled(g, 0.0);
        assert!(matches!(bias_correct(&z, 1), Err(Error::Degenerate(_))));
        assert!(bias_correct(&v, 3).is_err());
    }

    #[test]
    fn order_zero_only_rescales_to_the_mean() {
        let g = Geometry::cube(6, 1.0);
        let v = ScalarVolume::from_fn(g, |x: Vec3<f64>| 1.0 + x[0] * 0.3 + (x[1] * 0.7).sin().abs());
        let out = bias_correct(&v, 0).unwrap();
        for (a, b) in out.data.iter().zip(&v.data) {
            assert!((a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn linear_gain_is_removed() {
        let g = Geometry::cube(16, 1.0);
        let c = g.center();
        let gain = |x: Vec3<f64>| 1.0 + 0.1 * (x[0] - c[0]) / 7.5 - 0.05 * (x[2] - c[2]) / 7.5;
        let v = ScalarVolume::from_fn(g, |x: Vec3<f64>| 50.0 * gain(x));
        let out = bias_correct(&v, 1).unwrap();
        let (lo, hi) = out.min_max();
        assert!(hi / lo - 1.0 < 0.02, "residual variation {}", hi / lo - 1.0);
        assert!((out.mean() - v.mean()).abs() < 1e-9 * v.mean());
    }

    #[test]
    fn rigid_identity_on_equal_images() {
        let g = Geometry::cube(24, 1.0);
        let v = blob(g);
        let res = register_rigid(&v, &v, &RigidConfig::default()).unwrap();
        assert!(res.transform.parameter_norm() < 1e-3);
        assert!(res.ssd < 1e-9);
        assert!(!res.diverged);
    }

    #[test]
    fn rigid_recovers_a_shift() {
        // R(x) = T(x + t): the pull-back transform is a translation by t.
        let g = Geometry::cube(32, 1.0);
        let t_img = blob(g);
        let shift = Vec3::new(3.0, 0.0, 0.0);
        let r_img = t_img.resample(&g, |x| x + shift);
        let res = register_rigid(&t_img, &r_img, &RigidConfig::default()).unwrap();
        assert!((res.transform.translation - shift).norm() < 0.5, "{:?}", res.transform);
        assert!(res.ssd < res.initial_ssd);
    }

    #[test]
    fn rigid_recovers_a_rotation() {
        let g = Geometry::cube(32, 1.0);
        let t_img = blob(g);
        let truth = RigidTransform { angles: [0.0, 0.0, 5f64.to_radians()], translation: Vec3::zero(), center: g.center() };
        let r_img = t_img.resample(&g, |x| truth.apply(x));
        let res = register_rigid(&t_img, &r_img, &RigidConfig::default()).unwrap();
        let err = (res.transform.angles[2] - truth.angles[2]).abs().to_degrees();
        assert!(err < 1.0, "rotation error {err} deg");
        let back = res.transform.compose(&truth.inverse());
        assert!(back.translation.norm() < 0.5);
    }
}
