use std::ops::{Add, Mul};

use super::{DisplacementField, Geometry, ScalarVolume, Vec3};
use crate::Real;

/// Discrete Gaussian of standard deviation `sigma` (samples), truncated at 3σ and renormalized.
pub fn gaussian_kernel<T: Real>(sigma: T) -> Vec<T> {
    if !(sigma > T::zero()) {
        return vec![T::one()];
    }
    let radius = (T::of(3.0) * sigma).ceil().to_usize().unwrap_or(0).max(1);
    let denom = T::of(2.0) * sigma * sigma;
    let mut k: Vec<T> = (0..=2 * radius)
        .map(|i| {
            let d = T::of_usize(i) - T::of_usize(radius);
            (-(d * d) / denom).exp()
        })
        .collect();
    let total: T = k.iter().copied().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Convolves `data` along `axis` with `kernel`, replicating edge samples.
///
/// The data is viewed as `outer × n × inner` with `n` the length along `axis`;
/// each output row of `inner` contiguous samples is a weighted sum of input rows.
fn convolve_axis<T, V>(data: &[V], geom: &Geometry<T>, axis: usize, kernel: &[T]) -> Vec<V>
where
    T: Real,
    V: Copy + Add<Output = V> + Mul<T, Output = V>,
{
    let [nx, ny, nz] = geom.dims;
    let n = geom.dims[axis];
    let r = kernel.len() / 2;
    let clamp = |t: usize, w: usize| (t + w).saturating_sub(r).min(n - 1);
    let mut out = data.to_vec();
    if axis == 0 {
        for (line_in, line_out) in data.chunks_exact(nx).zip(out.chunks_exact_mut(nx)) {
            for t in 0..n {
                let mut acc = line_in[clamp(t, 0)] * kernel[0];
                if t >= r && t + r < n {
                    for (w, &kw) in kernel.iter().enumerate().skip(1) {
                        acc = acc + line_in[t + w - r] * kw;
                    }
                } else {
                    for (w, &kw) in kernel.iter().enumerate().skip(1) {
                        acc = acc + line_in[clamp(t, w)] * kw;
                    }
                }
                line_out[t] = acc;
            }
        }
        return out;
    }
    let (outer, inner) = if axis == 1 { (nz, nx) } else { (1, nx * ny) };
    for o in 0..outer {
        let block = o * n * inner;
        for t in 0..n {
            let dst = &mut out[block + t * inner..block + (t + 1) * inner];
            let src = &data[block + clamp(t, 0) * inner..][..inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s * kernel[0];
            }
            for (w, &kw) in kernel.iter().enumerate().skip(1) {
                let src = &data[block + clamp(t, w) * inner..][..inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s * kw;
                }
            }
        }
    }
    out
}

fn smooth_data<T, V>(data: &[V], geom: &Geometry<T>, sigma_mm: T) -> Vec<V>
where
    T: Real,
    V: Copy + Add<Output = V> + Mul<T, Output = V>,
{
    let mut cur = data.to_vec();
    for axis in 0..3 {
        if geom.dims[axis] == 1 {
            continue;
        }
        let kernel = gaussian_kernel(sigma_mm / geom.spacing[axis]);
        if kernel.len() > 1 {
            cur = convolve_axis(&cur, geom, axis, &kernel);
        }
    }
    cur
}

/// Component-wise separable Gaussian smoothing; `sigma` in mm, zero returns the input unchanged.
pub fn gaussian_smooth<T: Real>(f: &DisplacementField<T>, sigma: T) -> DisplacementField<T> {
    if !(sigma > T::zero()) {
        return f.clone();
    }
    DisplacementField { geom: f.geom, data: smooth_data::<T, Vec3<T>>(&f.data, &f.geom, sigma) }
}

pub fn gaussian_smooth_volume<T: Real>(v: &ScalarVolume<T>, sigma: T) -> ScalarVolume<T> {
    if !(sigma > T::zero()) {
        return v.clone();
    }
    ScalarVolume { geom: v.geom, data: smooth_data::<T, T>(&v.data, &v.geom, sigma), background: v.background }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(1.7f64);
        assert_eq!(k.len(), 2 * 6 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        for i in 0..k.len() {
            assert_eq!(k[i], k[k.len() - 1 - i]);
        }
    }

    #[test]
    fn zero_sigma_is_bit_identical() {
        let g = Geometry::cube(5, 1.0);
        let f = DisplacementField::from_fn(g, |x: Vec3<f64>| Vec3::new(x[0].sin(), x[1] * 0.3, -x[2]));
        assert_eq!(gaussian_smooth(&f, 0.0), f);
    }

    #[test]
    fn constant_field_unchanged() {
        let g = Geometry::new([7, 6, 5], Vec3::new(1.0, 0.5, 2.0), Vec3::zero()).unwrap();
        let t = Vec3::new(0.3, -1.2, 2.5);
        let s = gaussian_smooth(&DisplacementField::constant(g, t), 1.5);
        for v in &s.data {
            assert!((*v - t).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_response_matches_direct_gaussian() {
        // Oracle: the 3D kernel exp(-r²/2σ²) normalized over the (2R+1)³ cube, evaluated directly.
        let n = 21;
        let g = Geometry::cube(n, 1.0);
        let c = 10;
        let mut f = DisplacementField::identity(g);
        f.data[g.index(c, c, c)] = Vec3::new(1.0, 0.0, 0.0);
        let s = gaussian_smooth(&f, 2.0);
        let radius = 6i64;
        let mut z = 0.0;
        for dz in -radius..=radius {
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    z += (-((dx * dx + dy * dy + dz * dz) as f64) / 8.0).exp();
                }
            }
        }
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    let (dx, dy, dz) = (i as i64 - 10, j as i64 - 10, k as i64 - 10);
                    let expected = if dx.abs() <= radius && dy.abs() <= radius && dz.abs() <= radius {
                        (-((dx * dx + dy * dy + dz * dz) as f64) / 8.0).exp() / z
                    } else {
                        0.0
                    };
                    let got = s.data[g.index(i, j, k)];
                    assert!((got[0] - expected).abs() < 1e-6, "at {i},{j},{k}");
                    assert_eq!(got[1], 0.0);
                }
            }
        }
    }

    #[test]
    fn interior_mean_is_preserved() {
        // Support kept farther than the kernel radius from the border: the total must not change.
        let n = 24;
        let g = Geometry::cube(n, 1.0);
        let margin = 5;
        let f = DisplacementField::from_fn(g, |x: Vec3<f64>| {
            if x.0.iter().all(|&c| c >= margin as f64 && c < (n - margin) as f64) {
                Vec3::new((0.9 * x[0]).sin() + 0.2, (1.3 * x[1] + x[2]).cos(), 0.5 * (0.7 * x[2]).sin())
            } else {
                Vec3::zero()
            }
        });
        let s = gaussian_smooth(&f, 1.0);
        let sum = |d: &[Vec3<f64>]| d.iter().fold(Vec3::zero(), |acc, &v| acc + v);
        let count = g.len() as f64;
        assert!(((sum(&f.data) - sum(&s.data)) / count).max_abs() < 1e-5);
    }
}
