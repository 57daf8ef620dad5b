//! Synthetic organ phantoms with known deformations.
//!
//! A canonical image `C(y)` holds a textured ellipsoid with a soft edge and a dark
//! capsule. A phantom image is `I(x) = C(g(x))` with the analytic warp
//! `g(x) = sim(x + w(x))`, where `w` is a sum of per-axis sinusoids plus an optional
//! Gaussian bump near the base pole. The returned ground-truth field is
//! `g(x) − x`; mesh vertices and pole seeds are canonical points pulled back
//! through `g⁻¹`.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::grid::{DisplacementField, Geometry, Mat3, PointSet, ScalarVolume, SurfaceMesh, Vec3};
use crate::settings;
use crate::{Error, Real, Result};

type V3 = Vec3<f64>;

#[derive(Clone, Debug, PartialEq)]
pub struct WarpSpec {
    pub scale: f64,
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
    /// Per-axis sinusoid amplitude (mm).
    pub sine_amplitude: f64,
    pub sine_wavelength: f64,
    /// Peak displacement (mm) of the bump centered on the base pole.
    pub base_bump: f64,
    pub base_bump_width: f64,
    /// Drives wave directions, phases and the bump direction.
    pub seed: u64,
}

impl Default for WarpSpec {
    fn default() -> Self {
        WarpSpec {
            scale: 1.0,
            rotation: [0.0; 3],
            translation: [0.0; 3],
            sine_amplitude: 0.0,
            sine_wavelength: 32.0,
            base_bump: 0.0,
            base_bump_width: 8.0,
            seed: 1,
        }
    }
}

settings!(WarpSpec { scale, rotation, translation, sine_amplitude, sine_wavelength, base_bump, base_bump_width, seed });

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: f64,
    pub semi_axes: [f64; 3],
    /// Organ center relative to the grid center (mm).
    pub organ_offset: [f64; 3],
    pub organ_rotation: [f64; 3],
    pub organ_intensity: f64,
    pub background_intensity: f64,
    /// Added along the organ boundary (negative for a dark capsule).
    pub rim_intensity: f64,
    pub rim_width: f64,
    pub edge_width: f64,
    pub texture_amplitude: f64,
    pub texture_wavelength: f64,
    pub texture_seed: u64,
    /// Fraction of the organ contrast left at the base pole (1 = uniform).
    pub base_contrast: f64,
    /// Noise standard deviation as a fraction of organ-background contrast.
    pub noise_fraction: f64,
    pub noise_seed: u64,
    /// Linear multiplicative gain along x: `1 + bias_gain·x̂`, `x̂ ∈ [−1, 1]`.
    pub bias_gain: f64,
    pub mesh_subdivisions: usize,
    pub warp: WarpSpec,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64; 3],
            spacing: 1.0,
            semi_axes: [12.0, 10.0, 15.0],
            organ_offset: [0.0; 3],
            organ_rotation: [0.0; 3],
            organ_intensity: 100.0,
            background_intensity: 40.0,
            rim_intensity: -25.0,
            rim_width: 1.0,
            edge_width: 0.7,
            texture_amplitude: 25.0,
            texture_wavelength: 6.0,
            texture_seed: 7,
            base_contrast: 1.0,
            noise_fraction: 0.02,
            noise_seed: 11,
            bias_gain: 0.0,
            mesh_subdivisions: 3,
            warp: WarpSpec::default(),
        }
    }
}

settings!(PhantomSpec {
    dims, spacing, semi_axes, organ_offset, organ_rotation, organ_intensity, background_intensity,
    rim_intensity, rim_width, edge_width, texture_amplitude, texture_wavelength, texture_seed,
    base_contrast, noise_fraction, noise_seed, bias_gain, mesh_subdivisions,
} nested { warp });

impl PhantomSpec {
    pub fn geometry(&self) -> Result<Geometry<f64>> {
        Geometry::new(self.dims, Vec3::splat(self.spacing), Vec3::zero())
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.warp;
        let nonneg = [
            self.rim_width,
            self.edge_width,
            self.texture_amplitude,
            self.noise_fraction,
            w.sine_amplitude,
            w.base_bump,
        ];
        if nonneg.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::InvalidArgument("phantom widths, amplitudes and noise must be nonnegative".into()));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0)) || !(w.scale > 0.0) {
            return Err(Error::InvalidArgument("semi-axes and warp scale must be positive".into()));
        }
        if !(self.texture_wavelength > 0.0 && w.sine_wavelength > 0.0 && w.base_bump_width > 0.0) {
            return Err(Error::InvalidArgument("wavelengths and widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.base_contrast) {
            return Err(Error::InvalidArgument("base_contrast must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Index of the longest semi-axis (the base-apex axis).
    pub fn long_axis(&self) -> usize {
        let a = self.semi_axes;
        (0..3).fold(0, |best, i| if a[i] > a[best] { i } else { best })
    }

    pub fn organ_volume(&self) -> f64 {
        4.0 / 3.0 * std::f64::consts::PI * self.semi_axes.iter().product::<f64>()
    }
}

#[derive(Clone, Debug)]
pub struct Phantom<T> {
    pub image: ScalarVolume<T>,
    pub mesh: SurfaceMesh<T>,
    /// `g(x) − x`, mapping phantom coordinates to canonical coordinates.
    pub ground_truth: DisplacementField<T>,
    pub base: Vec3<T>,
    pub apex: Vec3<T>,
}

impl<T: Real> Phantom<T> {
    pub fn truth_label(&self) -> ScalarVolume<T> {
        self.mesh.voxelize(&self.image.geom)
    }
}

fn unit(rng: &mut ChaCha8Rng) -> V3 {
    loop {
        let v = V3::new(StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng));
        let n = v.norm();
        if n > 1e-6 {
            return v / n;
        }
    }
}

/// The analytic warp `g(x) = c + s·Q·(x + w(x) − c) + t`.
struct Warp {
    center: V3,
    sq: Mat3<f64>,
    sq_inv: Mat3<f64>,
    t: V3,
    amp: f64,
    waves: [V3; 3],
    phases: [f64; 3],
    bump: f64,
    bump_dir: V3,
    bump_at: V3,
    bump_width: f64,
}

impl Warp {
    fn w(&self, x: V3) -> V3 {
        let d = x - self.center;
        let mut out = V3::zero();
        if self.amp > 0.0 {
            for a in 0..3 {
                out[a] = self.amp * (self.waves[a].dot(d) + self.phases[a]).sin();
            }
        }
        if self.bump > 0.0 {
            let r = x - self.bump_at;
            out += self.bump_dir * (self.bump * (-r.norm_squared() / (2.0 * self.bump_width * self.bump_width)).exp());
        }
        out
    }

    /// Jacobian of `x + w(x)`.
    fn jacobian_w(&self, x: V3) -> Mat3<f64> {
        let d = x - self.center;
        let mut m = Mat3::identity();
        if self.amp > 0.0 {
            for a in 0..3 {
                let c = self.amp * (self.waves[a].dot(d) + self.phases[a]).cos();
                for b in 0..3 {
                    m.0[a][b] += c * self.waves[a][b];
                }
            }
        }
        if self.bump > 0.0 {
            let r = x - self.bump_at;
            let w2 = self.bump_width * self.bump_width;
            let e = self.bump * (-r.norm_squared() / (2.0 * w2)).exp();
            for a in 0..3 {
                for b in 0..3 {
                    m.0[a][b] -= self.bump_dir[a] * e * r[b] / w2;
                }
            }
        }
        m
    }

    fn sim(&self, z: V3) -> V3 {
        self.center + self.sq.mul_vec(z - self.center) + self.t
    }

    fn sim_inv(&self, y: V3) -> V3 {
        self.center + self.sq_inv.mul_vec(y - self.center - self.t)
    }

    fn apply(&self, x: V3) -> V3 {
        self.sim(x + self.w(x))
    }

    /// Solves `g(x) = y` by Newton on `x + w(x) = sim⁻¹(y)`.
    fn invert(&self, y: V3) -> Result<V3> {
        let z = self.sim_inv(y);
        let mut x = z;
        for _ in 0..100 {
            let r = x + self.w(x) - z;
            if r.norm() < 1e-12 {
                return Ok(x);
            }
            let j = self.jacobian_w(x).inverse().ok_or_else(|| Error::Degenerate("warp Jacobian is singular".into()))?;
            x -= j.mul_vec(r);
        }
        let r = (x + self.w(x) - z).norm();
        if r < 1e-9 {
            Ok(x)
        } else {
            Err(Error::Degenerate(format!("phantom warp inversion failed (residual {r:e})")))
        }
    }
}

/// Canonical organ image, evaluated in canonical coordinates.
struct Organ {
    center: V3,
    rot_t: Mat3<f64>,
    axes: [f64; 3],
    long: usize,
    spec_bg: f64,
    contrast: f64,
    rim: f64,
    rim_width: f64,
    edge: f64,
    base_contrast: f64,
    texture_amp: f64,
    texture: Vec<(V3, f64)>,
}

impl Organ {
    fn new(spec: &PhantomSpec, geom: &Geometry<f64>) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let k = 2.0 * std::f64::consts::PI / spec.texture_wavelength;
        let texture = (0..6).map(|_| (unit(&mut rng) * k, rng.random_range(0.0..std::f64::consts::TAU))).collect();
        Organ {
            center: geom.center() + Vec3(spec.organ_offset),
            rot_t: Mat3::rotation(spec.organ_rotation).transpose(),
            axes: spec.semi_axes,
            long: spec.long_axis(),
            spec_bg: spec.background_intensity,
            contrast: spec.organ_intensity - spec.background_intensity,
            rim: spec.rim_intensity,
            rim_width: spec.rim_width,
            edge: spec.edge_width,
            base_contrast: spec.base_contrast,
            texture_amp: spec.texture_amplitude,
            texture,
        }
    }

    fn surface_point(&self, p: V3) -> V3 {
        let local = V3::new(p[0] * self.axes[0], p[1] * self.axes[1], p[2] * self.axes[2]);
        self.center + self.rot_t.transpose().mul_vec(local)
    }

    fn pole(&self, sign: f64) -> V3 {
        self.surface_point(V3::axis(self.long) * sign)
    }

    fn intensity(&self, y: V3) -> f64 {
        let z = self.rot_t.mul_vec(y - self.center);
        let a = self.axes;
        let rho = ((z[0] / a[0]).powi(2) + (z[1] / a[1]).powi(2) + (z[2] / a[2]).powi(2)).sqrt();
        let grad = ((z[0] / (a[0] * a[0])).powi(2) + (z[1] / (a[1] * a[1])).powi(2) + (z[2] / (a[2] * a[2])).powi(2)).sqrt();
        // First-order signed distance to the surface.
        let d = if rho > 1e-9 && grad > 1e-12 { (rho - 1.0) * rho / grad } else { -a.iter().cloned().fold(f64::INFINITY, f64::min) };
        let inside = if self.edge > 0.0 { 0.5 * (1.0 - (d / self.edge).tanh()) } else if d <= 0.0 { 1.0 } else { 0.0 };
        let t = (z[self.long] / a[self.long]).clamp(0.0, 1.0);
        let falloff = 1.0 - (1.0 - self.base_contrast) * t * t * (3.0 - 2.0 * t);
        let texture = if self.texture_amp > 0.0 {
            let s: f64 = self.texture.iter().map(|(k, ph)| (k.dot(z) + ph).sin()).sum();
            self.texture_amp * s / (self.texture.len() as f64).sqrt()
        } else {
            0.0
        };
        let rim = if self.rim_width > 0.0 { self.rim * (-d * d / (2.0 * self.rim_width * self.rim_width)).exp() } else { 0.0 };
        self.spec_bg + falloff * ((self.contrast + texture) * inside + rim)
    }
}

/// Subdivided icosahedron on the unit sphere (level 3: 642 vertices, 1280 faces).
pub fn icosphere(level: usize) -> (Vec<V3>, Vec<[usize; 3]>) {
    let p = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<V3> = [
        [-1.0, p, 0.0], [1.0, p, 0.0], [-1.0, -p, 0.0], [1.0, -p, 0.0],
        [0.0, -1.0, p], [0.0, 1.0, p], [0.0, -1.0, -p], [0.0, 1.0, -p],
        [p, 0.0, -1.0], [p, 0.0, 1.0], [-p, 0.0, -1.0], [-p, 0.0, 1.0],
    ]
    .iter()
    .map(|&v| Vec3(v).normalized())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache: HashMap<(usize, usize), usize> = HashMap::new();
        let mut mid = |a: usize, b: usize, verts: &mut Vec<V3>| {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalized());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

fn build_warp(spec: &PhantomSpec, geom: &Geometry<f64>, organ: &Organ) -> Warp {
    let w = &spec.warp;
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed);
    let k = 2.0 * std::f64::consts::PI / w.sine_wavelength;
    let waves = [unit(&mut rng) * k, unit(&mut rng) * k, unit(&mut rng) * k];
    let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let bump_dir = unit(&mut rng);
    let rot = Mat3::rotation(w.rotation);
    let sq = Mat3(rot.0.map(|row| row.map(|v| v * w.scale)));
    let mut warp = Warp {
        center: geom.center(),
        sq,
        sq_inv: sq.inverse().expect("positive scale"),
        t: Vec3(w.translation),
        amp: w.sine_amplitude,
        waves,
        phases,
        bump: w.base_bump,
        bump_dir,
        bump_at: V3::zero(),
        bump_width: w.base_bump_width,
    };
    warp.bump_at = warp.sim_inv(organ.pole(1.0));
    warp
}

/// Renders one phantom.
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Result<Phantom<T>> {
    spec.validate()?;
    let geom = spec.geometry()?;
    let organ = Organ::new(spec, &geom);
    let warp = build_warp(spec, &geom, &organ);
    let mut worst = f64::INFINITY;
    for idx in 0..geom.len() {
        worst = worst.min(warp.jacobian_w(geom.position(idx)).det());
    }
    if !(worst > 0.0) {
        return Err(Error::InvalidArgument(format!("requested warp folds (min Jacobian determinant {worst:.3})")));
    }
    let contrast = (spec.organ_intensity - spec.background_intensity).abs();
    let noise = Normal::new(0.0, (spec.noise_fraction * contrast).max(0.0)).expect("finite noise");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);
    let half_x = ((geom.dims[0] - 1) as f64 * spec.spacing * 0.5).max(1e-12);
    let cx = geom.center()[0];
    let mut data = Vec::with_capacity(geom.len());
    let mut field = Vec::with_capacity(geom.len());
    for idx in 0..geom.len() {
        let x = geom.position(idx);
        let y = warp.apply(x);
        field.push((y - x).cast::<T>());
        let mut v = organ.intensity(y);
        if spec.noise_fraction > 0.0 {
            v += noise.sample(&mut rng);
        }
        v *= 1.0 + spec.bias_gain * (x[0] - cx) / half_x;
        data.push(T::of(v));
    }
    let image = ScalarVolume::new(geom.cast(), data)?.with_background(T::of(spec.background_intensity));
    let (sphere, faces) = icosphere(spec.mesh_subdivisions);
    let verts = sphere
        .iter()
        .map(|&p| warp.invert(organ.surface_point(p)).map(|x| x.cast::<T>()))
        .collect::<Result<Vec<_>>>()?;
    let mesh = SurfaceMesh::new(PointSet::new(verts)?, faces)?;
    Ok(Phantom {
        image,
        mesh,
        ground_truth: DisplacementField::new(geom.cast(), field)?,
        base: warp.invert(organ.pole(1.0))?.cast(),
        apex: warp.invert(organ.pole(-1.0))?.cast(),
    })
}

/// How population members differ from the base spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Variation {
    /// Relative standard deviation of each semi-axis.
    pub semi_axis_sd: f64,
    /// Relative standard deviation of the sinusoid amplitude.
    pub sine_amplitude_sd: f64,
    /// Base bump amplitude drawn uniformly in `[1 − r, 1 + r]` times the base value.
    pub base_bump_range: f64,
    pub translation_sd: f64,
    pub rotation_sd: f64,
    /// Per-axis scale applied to the last member so that it is a small organ.
    pub small_organ_scale: Option<f64>,
    /// Give every member its own warp and noise seeds.
    pub reseed: bool,
    pub seed: u64,
}

impl Default for Variation {
    fn default() -> Self {
        Variation {
            semi_axis_sd: 0.08,
            sine_amplitude_sd: 0.3,
            base_bump_range: 0.5,
            translation_sd: 1.0,
            rotation_sd: 0.04,
            small_organ_scale: Some(0.75),
            reseed: true,
            seed: 2024,
        }
    }
}

settings!(Variation {
    semi_axis_sd, sine_amplitude_sd, base_bump_range, translation_sd, rotation_sd, small_organ_scale, reseed, seed,
});

impl Variation {
    pub fn none() -> Self {
        Variation {
            semi_axis_sd: 0.0,
            sine_amplitude_sd: 0.0,
            base_bump_range: 0.0,
            translation_sd: 0.0,
            rotation_sd: 0.0,
            small_organ_scale: None,
            reseed: false,
            seed: 0,
        }
    }
}

/// Member specs of a population; the last one is the small organ when requested.
pub fn population_specs(base: &PhantomSpec, n: usize, variation: &Variation) -> Result<Vec<PhantomSpec>> {
    if n < 3 {
        return Err(Error::InvalidArgument(format!("a population needs at least 3 members, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(variation.seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut s = base.clone();
        let g: [f64; 8] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
        let u: f64 = rng.random_range(-1.0..1.0);
        for a in 0..3 {
            s.semi_axes[a] *= (1.0 + variation.semi_axis_sd * g[a]).max(0.5);
            s.warp.translation[a] += variation.translation_sd * g[3 + a];
        }
        s.warp.sine_amplitude *= (1.0 + variation.sine_amplitude_sd * g[6]).max(0.0);
        s.warp.rotation[2] += variation.rotation_sd * g[7];
        s.warp.base_bump *= 1.0 + variation.base_bump_range * u;
        if variation.reseed {
            s.warp.seed = base.warp.seed.wrapping_add(1 + i as u64);
            s.noise_seed = base.noise_seed.wrapping_add(1 + i as u64);
        }
        if i == n - 1 {
            if let Some(k) = variation.small_organ_scale {
                for a in &mut s.semi_axes {
                    *a *= k;
                }
            }
        }
        out.push(s);
    }
    Ok(out)
}

pub fn generate_population<T: Real>(base: &PhantomSpec, n: usize, variation: &Variation) -> Result<Vec<Phantom<T>>> {
    population_specs(base, n, variation)?.iter().map(generate_phantom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{invert_at_points, InversionOptions};

    fn small_spec() -> PhantomSpec {
        PhantomSpec { dims: [40; 3], semi_axes: [9.0, 7.0, 11.0], mesh_subdivisions: 2, ..Default::default() }
    }

    #[test]
    fn icosphere_counts() {
        let (v, f) = icosphere(3);
        assert_eq!((v.len(), f.len()), (642, 1280));
        assert!(v.iter().all(|p| (p.norm() - 1.0).abs() < 1e-12));
    }

    #[test]
    fn unwarped_mesh_is_the_ellipsoid() {
        let spec = PhantomSpec { noise_fraction: 0.0, mesh_subdivisions: 3, ..small_spec() };
        let p: Phantom<f64> = generate_phantom(&spec).unwrap();
        let c = p.image.geom.center();
        let a = spec.semi_axes;
        for v in p.mesh.vertices.iter() {
            let d = *v - c;
            let e = (d[0] / a[0]).powi(2) + (d[1] / a[1]).powi(2) + (d[2] / a[2]).powi(2);
            assert!((e - 1.0).abs() < 1e-6);
        }
        assert!((p.base - (c + V3::new(0.0, 0.0, 11.0))).norm() < 1e-9);
        assert!(p.ground_truth.is_identity());
        // Mesh volume tracks the analytic ellipsoid.
        assert!((p.mesh.volume() / spec.organ_volume() - 1.0).abs() < 0.03);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec { warp: WarpSpec { sine_amplitude: 2.0, base_bump: 2.0, ..Default::default() }, ..small_spec() };
        let a: Phantom<f64> = generate_phantom(&spec).unwrap();
        let b: Phantom<f64> = generate_phantom(&spec).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mesh, b.mesh);
        assert_eq!(a.ground_truth, b.ground_truth);
    }

    #[test]
    fn warp_is_consistent_with_image_mesh_and_field() {
        let spec = PhantomSpec { warp: WarpSpec { sine_amplitude: 3.0, base_bump: 2.0, ..Default::default() }, ..small_spec() };
        let p: Phantom<f64> = generate_phantom(&spec).unwrap();
        // The canonical image of each mesh vertex is on the ellipsoid.
        let c = p.image.geom.center();
        let a = spec.semi_axes;
        let images: Vec<V3> = p.mesh.vertices.iter().map(|&v| p.ground_truth.apply(v)).collect();
        let mean_err: f64 = images
            .iter()
            .map(|&y| {
                let d = y - c;
                ((d[0] / a[0]).powi(2) + (d[1] / a[1]).powi(2) + (d[2] / a[2]).powi(2)).sqrt() - 1.0
            })
            .map(f64::abs)
            .sum::<f64>()
            / images.len() as f64;
        assert!(mean_err < 0.01, "{mean_err}");
        // Grid inversion of the sampled field round-trips.
        let targets = PointSet::new(images).unwrap();
        let inv = invert_at_points(&p.ground_truth, &targets, None, &InversionOptions::default()).unwrap();
        assert!(inv.max_residual() <= 0.05, "{}", inv.max_residual());
    }

    #[test]
    fn folding_warps_are_rejected() {
        let spec = PhantomSpec { warp: WarpSpec { sine_amplitude: 12.0, sine_wavelength: 10.0, ..Default::default() }, ..small_spec() };
        assert!(generate_phantom::<f64>(&spec).is_err());
    }

    #[test]
    fn no_variation_means_identical_members() {
        let spec = PhantomSpec { dims: [24; 3], semi_axes: [6.0, 5.0, 7.0], mesh_subdivisions: 1, ..Default::default() };
        let pop: Vec<Phantom<f64>> = generate_population(&spec, 3, &Variation::none()).unwrap();
        assert_eq!(pop[0].image, pop[2].image);
        assert_eq!(pop[0].mesh, pop[1].mesh);
        assert!(generate_population::<f64>(&spec, 2, &Variation::none()).is_err());
    }

    #[test]
    fn population_has_a_small_organ_and_analytic_volumes() {
        let base = PhantomSpec { noise_fraction: 0.0, ..Default::default() };
        let var = Variation { sine_amplitude_sd: 0.0, translation_sd: 0.0, rotation_sd: 0.0, ..Default::default() };
        let specs = population_specs(&base, 6, &var).unwrap();
        let mean = specs.iter().map(PhantomSpec::organ_volume).sum::<f64>() / 6.0;
        assert!(specs[5].organ_volume() < 0.6 * mean);
        for s in [&specs[0], &specs[5]] {
            let p: Phantom<f64> = generate_phantom(s).unwrap();
            let voxels = p.truth_label().count_foreground() as f64;
            assert!((voxels / s.organ_volume() - 1.0).abs() < 0.03, "{voxels} vs {}", s.organ_volume());
        }
    }

    #[test]
    fn spec_text_round_trip() {
        use crate::config::{KeyValues, Settings};
        let spec = PhantomSpec { warp: WarpSpec { sine_amplitude: 2.5, ..Default::default() }, ..small_spec() };
        let mut kv = KeyValues::new();
        spec.snapshot("", &mut kv);
        let mut back = PhantomSpec::default();
        back.apply(&KeyValues::parse(&kv.to_text()).unwrap(), "").unwrap();
        assert_eq!(back, spec);
    }
}
