//! Intensity registration: SSD with a fluid (smoothed update) and elastic
//! (regularized deformation) two-level scheme.

use crate::grid::{compose, gaussian_smooth, DisplacementField, Geometry, Mat3, ScalarVolume, Vec3};
use crate::preprocess::pyramid;
use crate::settings;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FluidElasticConfig {
    /// Standard deviation (mm) of the Gaussian applied to the force.
    pub sigma_fluid: f64,
    /// Cap on the correction magnitude, in voxels.
    pub max_step: f64,
    pub lambda_lame: f64,
    pub mu_lame: f64,
    /// Semi-implicit step size of the elastic flow (mm²).
    pub diffusion_time: f64,
    /// Relaxation sweeps per elastic step.
    pub sweeps: usize,
    /// Iteration cap per pyramid level.
    pub max_iters: usize,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    /// 1 disables the pyramid.
    pub pyramid_levels: usize,
}

impl Default for FluidElasticConfig {
    fn default() -> Self {
        FluidElasticConfig {
            sigma_fluid: 3.0,
            max_step: 0.5,
            lambda_lame: 0.0,
            mu_lame: 1.0,
            diffusion_time: 0.25,
            sweeps: 2,
            max_iters: 150,
            convergence_tol: 1e-4,
            convergence_window: 5,
            pyramid_levels: 3,
        }
    }
}

settings!(FluidElasticConfig {
    sigma_fluid,
    max_step,
    lambda_lame,
    mu_lame,
    diffusion_time,
    sweeps,
    max_iters,
    convergence_tol,
    convergence_window,
    pyramid_levels,
});

impl FluidElasticConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_fluid >= 0.0
            && self.max_step > 0.0
            && self.mu_lame > 0.0
            && self.lambda_lame + self.mu_lame > 0.0
            && self.diffusion_time >= 0.0
            && self.convergence_window >= 1
            && self.pyramid_levels >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid fluid-elastic configuration: {self:?}")))
        }
    }
}

fn check_pair<T: Real>(t: &ScalarVolume<T>, r: &ScalarVolume<T>, h: &DisplacementField<T>) -> Result<()> {
    let _ = t;
    r.geom.check_same(&h.geom, "field must live on the reference grid")
}

/// `Σ_x (T(h(x)) − R(x))²` over R's grid; T contributes its background outside its grid.
pub fn ssd<T: Real>(t: &ScalarVolume<T>, r: &ScalarVolume<T>, h: &DisplacementField<T>) -> Result<T> {
    check_pair(t, r, h)?;
    Ok(T::of(ssd_of_warped(&t.warp(h), r)))
}

fn ssd_of_warped<T: Real>(w: &ScalarVolume<T>, r: &ScalarVolume<T>) -> f64 {
    w.data
        .iter()
        .zip(&r.data)
        .map(|(&a, &b)| {
            let d = (a - b).f64();
            d * d
        })
        .sum()
}

fn force_from_warped<T: Real>(w: &ScalarVolume<T>, r: &ScalarVolume<T>) -> DisplacementField<T> {
    let mut f = w.gradient();
    let two = T::of(2.0);
    for ((g, &a), &b) in f.data.iter_mut().zip(&w.data).zip(&r.data) {
        *g = *g * (two * (a - b));
    }
    f
}

/// Per-voxel derivative of the SSD with respect to a perturbation at that voxel:
/// `2·(T∘h − R)·∇(T∘h)`.
pub fn ssd_force<T: Real>(t: &ScalarVolume<T>, r: &ScalarVolume<T>, h: &DisplacementField<T>) -> Result<DisplacementField<T>> {
    check_pair(t, r, h)?;
    Ok(force_from_warped(&t.warp(h), r))
}

/// Discrete linear-elastic energy with forward differences and free (Neumann) borders:
/// `V·[μ/2·Σ_edges |Δu|²/h² + (λ+μ)/2·Σ_cells (div u)²]`, cells being the voxels whose
/// forward neighbors all exist.
pub fn elastic_energy<T: Real>(u: &DisplacementField<T>, lambda: f64, mu: f64) -> f64 {
    let g = u.geom;
    let [nx, ny, nz] = g.dims;
    let stride = [1, nx, nx * ny];
    let h: [f64; 3] = std::array::from_fn(|a| g.spacing[a].f64());
    let mut lap = 0.0;
    let mut div2 = 0.0;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let idx = g.index(i, j, k);
                let pos = [i, j, k];
                let v = u.data[idx].to_f64();
                let mut div = 0.0;
                let mut full = true;
                for a in 0..3 {
                    if pos[a] + 1 >= g.dims[a] {
                        full = false;
                        continue;
                    }
                    let w = u.data[idx + stride[a]].to_f64();
                    for c in 0..3 {
                        let d = (w[c] - v[c]) / h[a];
                        lap += d * d;
                    }
                    div += (w[a] - v[a]) / h[a];
                }
                if full {
                    div2 += div * div;
                }
            }
        }
    }
    g.voxel_volume().f64() * (0.5 * mu * lap + 0.5 * (lambda + mu) * div2)
}

/// One semi-implicit step of the elastic gradient flow.
///
/// Approximately minimizes `Q(v) = ½·Σ|v − u|² + τ·E(v)/V` by Gauss-Seidel sweeps that
/// solve each voxel's 3×3 block exactly. Every update lowers `Q`, so the energy
/// of the result never exceeds that of `u`.
pub fn elastic_regularize<T: Real>(u: &DisplacementField<T>, cfg: &FluidElasticConfig) -> DisplacementField<T> {
    let tau = cfg.diffusion_time;
    if tau == 0.0 || cfg.sweeps == 0 {
        return u.clone();
    }
    let mu = cfg.mu_lame;
    let lm = cfg.lambda_lame + cfg.mu_lame;
    let g = u.geom;
    let dims = g.dims;
    let [nx, ny, nz] = dims;
    let stride = [1, nx, nx * ny];
    let inv_h: [f64; 3] = std::array::from_fn(|a| 1.0 / g.spacing[a].f64());
    let inv_h2: [f64; 3] = std::array::from_fn(|a| inv_h[a] * inv_h[a]);
    let src: Vec<[f64; 3]> = u.data.iter().map(|v| v.to_f64()).collect();
    let mut v = src.clone();
    // A voxel anchors a divergence cell when all of its forward neighbors exist.
    let cell = |i: usize, j: usize, k: usize| i + 1 < nx && j + 1 < ny && k + 1 < nz;
    // The 3×3 block depends only on which neighbors and cells exist, so its inverse is cached per pattern.
    let mut inverses: Vec<Option<Mat3<f64>>> = vec![None; 1 << 10];
    for _ in 0..cfg.sweeps {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let idx = i + nx * (j + ny * k);
                    let pos = [i, j, k];
                    let mut rhs = src[idx];
                    let mut diag = 1.0;
                    let mut key = 0usize;
                    for a in 0..3 {
                        let w = tau * mu * inv_h2[a];
                        if pos[a] > 0 {
                            diag += w;
                            key |= 1 << (2 * a);
                            let nb = v[idx - stride[a]];
                            for c in 0..3 {
                                rhs[c] += w * nb[c];
                            }
                        }
                        if pos[a] + 1 < dims[a] {
                            diag += w;
                            key |= 1 << (2 * a + 1);
                            let nb = v[idx + stride[a]];
                            for c in 0..3 {
                                rhs[c] += w * nb[c];
                            }
                        }
                    }
                    if lm == 0.0 {
                        v[idx] = [rhs[0] / diag, rhs[1] / diag, rhs[2] / diag];
                        continue;
                    }
                    // div(cell) = gᵀ v(idx) + r for every cell touching this voxel.
                    let tl = tau * lm;
                    if cell(i, j, k) {
                        key |= 1 << 6;
                        let mut r = 0.0;
                        for a in 0..3 {
                            r += v[idx + stride[a]][a] * inv_h[a];
                        }
                        for a in 0..3 {
                            rhs[a] += tl * inv_h[a] * r;
                        }
                    }
                    for a in 0..3 {
                        if pos[a] == 0 {
                            continue;
                        }
                        let mut q = pos;
                        q[a] -= 1;
                        if !cell(q[0], q[1], q[2]) {
                            continue;
                        }
                        key |= 1 << (7 + a);
                        let base = idx - stride[a];
                        let mut r = -v[base][a] * inv_h[a];
                        for b in 0..3 {
                            if b != a {
                                r += (v[base + stride[b]][b] - v[base][b]) * inv_h[b];
                            }
                        }
                        rhs[a] -= tl * inv_h[a] * r;
                    }
                    let inv = *inverses[key].get_or_insert_with(|| {
                        let mut m = Mat3([[0.0; 3]; 3]);
                        for c in 0..3 {
                            m.0[c][c] = diag;
                        }
                        if key & (1 << 6) != 0 {
                            for p in 0..3 {
                                for q in 0..3 {
                                    m.0[p][q] += tl * inv_h[p] * inv_h[q];
                                }
                            }
                        }
                        for a in 0..3 {
                            if key & (1 << (7 + a)) != 0 {
                                m.0[a][a] += tl * inv_h[a] * inv_h[a];
                            }
                        }
                        m.inverse().expect("elastic block is positive definite")
                    });
                    v[idx] = inv.mul_vec(Vec3(rhs)).0;
                }
            }
        }
    }
    DisplacementField { geom: g, data: v.into_iter().map(Vec3::from_f64).collect() }
}

/// One iteration of the fluid-elastic loop.
#[derive(Clone, Debug, PartialEq)]
pub struct FluidIterate {
    pub level: usize,
    pub ssd: f64,
    /// Largest correction magnitude, in voxels.
    pub max_correction: f64,
}

#[derive(Clone, Debug)]
pub struct FluidElasticResult<T> {
    pub field: DisplacementField<T>,
    pub initial_ssd: f64,
    pub final_ssd: f64,
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<FluidIterate>,
}

struct LevelOutcome<T> {
    field: DisplacementField<T>,
    ssd: f64,
    iterations: usize,
    converged: bool,
}

fn run_level<T: Real>(
    t: &ScalarVolume<T>,
    r: &ScalarVolume<T>,
    init: DisplacementField<T>,
    cfg: &FluidElasticConfig,
    level: usize,
    trace: &mut Vec<FluidIterate>,
) -> LevelOutcome<T> {
    let geom = r.geom;
    let mut h = init;
    let mut warped = t.warp(&h);
    let mut cost = ssd_of_warped(&warped, r);
    let mut best = (cost, h.clone());
    // Best cost seen after each iteration, for the windowed convergence test.
    let mut history = vec![cost];
    let mut iterations = 0;
    let mut converged = false;
    let sigma = T::of(cfg.sigma_fluid);
    let inv_spacing = geom.spacing.map(|s| T::one() / s);
    while iterations < cfg.max_iters {
        if cost == 0.0 {
            converged = true;
            break;
        }
        let force = gaussian_smooth(&force_from_warped(&warped, r), sigma);
        let peak = force
            .data
            .iter()
            .map(|f| f.zip(inv_spacing, |a, b| a * b).norm().f64())
            .fold(0.0, f64::max);
        if !(peak > 0.0) {
            converged = true;
            break;
        }
        let k = T::of(-cfg.max_step / peak);
        let c = force.scaled(k);
        let max_correction = max_voxel_norm(&c, &geom);
        h = elastic_regularize(&compose(&h, &c).expect("same grid"), cfg);
        warped = t.warp(&h);
        cost = ssd_of_warped(&warped, r);
        iterations += 1;
        trace.push(FluidIterate { level, ssd: cost, max_correction });
        if !cost.is_finite() {
            break;
        }
        if cost < best.0 {
            best = (cost, h.clone());
        }
        history.push(best.0);
        let n = history.len();
        if n > cfg.convergence_window {
            let old = history[n - 1 - cfg.convergence_window];
            if old <= 0.0 || (old - best.0) / old < cfg.convergence_tol {
                converged = true;
                break;
            }
        }
    }
    LevelOutcome { field: best.1, ssd: best.0, iterations, converged }
}

/// Minimizes the SSD over `h` starting from `h_init` (on R's grid).
///
/// Each iteration computes the SSD force, smooths it, scales it so the largest
/// correction is `max_step` voxels, composes it into the field and applies one
/// elastic step. The best iterate is returned, so the final SSD never exceeds
/// the initial one. Coarse pyramid levels run first and their result is kept
/// only if it helps at full resolution.
pub fn register_fluid_elastic<T: Real>(
    t: &ScalarVolume<T>,
    r: &ScalarVolume<T>,
    h_init: &DisplacementField<T>,
    cfg: &FluidElasticConfig,
) -> Result<FluidElasticResult<T>> {
    cfg.validate()?;
    check_pair(t, r, h_init)?;
    let initial_ssd = ssd_of_warped(&t.warp(h_init), r);
    let mut trace = Vec::new();
    let mut h = h_init.clone();
    let mut iterations = 0;
    if cfg.pyramid_levels > 1 {
        let tp = pyramid(t, cfg.pyramid_levels);
        let rp = pyramid(r, cfg.pyramid_levels);
        let levels = tp.len().min(rp.len());
        let mut coarse = h_init.clone();
        for level in (1..levels).rev() {
            coarse = coarse.resample(&rp[level].geom);
            let out = run_level(&tp[level], &rp[level], coarse, cfg, level, &mut trace);
            iterations += out.iterations;
            coarse = out.field;
        }
        if levels > 1 {
            let up = coarse.resample(&r.geom);
            if ssd_of_warped(&t.warp(&up), r) < initial_ssd {
                h = up;
            }
        }
    }
    let out = run_level(t, r, h, cfg, 0, &mut trace);
    iterations += out.iterations;
    Ok(FluidElasticResult {
        field: out.field,
        initial_ssd,
        final_ssd: out.ssd,
        iterations,
        converged: out.converged,
        trace,
    })
}

/// Largest voxel-unit norm of a correction field (for diagnostics).
pub fn max_voxel_norm<T: Real>(c: &DisplacementField<T>, geom: &Geometry<T>) -> f64 {
    let inv = geom.spacing.map(|s| T::one() / s);
    c.data.iter().map(|v| v.zip(inv, |a, b| a * b).norm().f64()).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_blob(g: Geometry<f64>, shift: Vec3<f64>, s: f64) -> ScalarVolume<f64> {
        let c = g.center() + shift;
        ScalarVolume::from_fn(g, |x: Vec3<f64>| 10.0 * (-(x - c).norm_squared() / (2.0 * s * s)).exp())
    }

    fn random_field(g: Geometry<f64>, amp: f64, seed: u64) -> DisplacementField<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = DisplacementField::from_fn(g, |_| {
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let s = gaussian_smooth(&raw, 2.0);
        let m = s.max_norm();
        s.scaled(amp / m)
    }

    #[test]
    fn ssd_examples() {
        let g = Geometry::cube(6, 1.0);
        let r = smooth_blob(g, Vec3::zero(), 2.0);
        let id = DisplacementField::identity(g);
        assert_eq!(ssd(&r, &r, &id).unwrap(), 0.0);
        let t = r.map(|v| v + 1.0);
        assert!((ssd(&t, &r, &id).unwrap() - g.len() as f64).abs() < 1e-9);
    }

    #[test]
    fn ssd_matches_a_naive_loop() {
        let g = Geometry::new([5, 6, 4], Vec3::new(1.0, 0.8, 1.2), Vec3::new(0.5, -1.0, 2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = ScalarVolume::from_fn(g, |_| rng.random_range(0.0..5.0));
        let r = ScalarVolume::from_fn(g, |_| rng.random_range(0.0..5.0));
        let h = random_field(g, 0.7, 9);
        let mut naive = 0.0;
        for k in 0..4 {
            for j in 0..6 {
                for i in 0..5 {
                    let x = g.voxel_center(i, j, k);
                    let u = h.data[g.index(i, j, k)];
                    let d = t.sample(x + u) - r.get(i, j, k);
                    naive += d * d;
                }
            }
        }
        let fast = ssd(&t, &r, &h).unwrap();
        assert!((fast - naive).abs() <= 1e-6 * naive);
    }

    #[test]
    fn force_vanishes_for_equal_or_flat_images() {
        let g = Geometry::cube(8, 1.0);
        let r = smooth_blob(g, Vec3::zero(), 2.0);
        let id = DisplacementField::identity(g);
        assert!(ssd_force(&r, &r, &id).unwrap().is_identity());
        let flat = ScalarVolume::filled(g, 4.0);
        assert!(ssd_force(&flat, &r, &id).unwrap().is_identity());
    }

    #[test]
    fn elastic_of_zero_is_zero() {
        let g = Geometry::cube(5, 1.0);
        let cfg = FluidElasticConfig { lambda_lame: 0.5, ..Default::default() };
        assert!(elastic_regularize(&DisplacementField::identity(g), &cfg).is_identity());
    }

    #[test]
    fn affine_interior_is_a_steady_state() {
        let g = Geometry::cube(16, 1.0);
        let u = DisplacementField::from_fn(g, |x: Vec3<f64>| {
            Vec3::new(0.02 * x[0] - 0.01 * x[1] + 0.3, 0.015 * x[2], -0.01 * x[0] + 0.02 * x[2])
        });
        for lambda in [0.0, 1.0] {
            let cfg = FluidElasticConfig { lambda_lame: lambda, ..Default::default() };
            let v = elastic_regularize(&u, &cfg);
            for idx in 0..g.len() {
                let [i, j, k] = g.coords(idx);
                if [i, j, k].iter().all(|&p| (5..11).contains(&p)) {
                    assert!((v.data[idx] - u.data[idx]).norm() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn elastic_energy_never_increases() {
        let g = Geometry::new([9, 8, 7], Vec3::new(1.0, 1.3, 0.9), Vec3::zero()).unwrap();
        for seed in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = DisplacementField::from_fn(g, |_| {
                Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            for (lambda, tau, sweeps) in [(0.0, 0.25, 1), (2.0, 1.0, 2), (-0.5, 3.0, 5)] {
                let cfg = FluidElasticConfig { lambda_lame: lambda, diffusion_time: tau, sweeps, ..Default::default() };
                let before = elastic_energy(&u, cfg.lambda_lame, cfg.mu_lame);
                let after = elastic_energy(&elastic_regularize(&u, &cfg), cfg.lambda_lame, cfg.mu_lame);
                assert!(after <= before, "{after} > {before}");
            }
        }
    }

    #[test]
    fn equal_images_stay_at_identity() {
        let g = Geometry::cube(16, 1.0);
        let r = smooth_blob(g, Vec3::zero(), 3.0);
        let res = register_fluid_elastic(&r, &r, &DisplacementField::identity(g), &FluidElasticConfig::default()).unwrap();
        assert!(res.field.max_norm() < 0.1);
        assert!(res.converged);
    }

    #[test]
    fn shifted_blob_is_registered() {
        let g = Geometry::cube(24, 1.0);
        let t = smooth_blob(g, Vec3::new(1.5, -1.0, 0.5), 3.0);
        let r = smooth_blob(g, Vec3::zero(), 3.0);
        let res = register_fluid_elastic(&t, &r, &DisplacementField::identity(g), &FluidElasticConfig::default()).unwrap();
        assert!(res.final_ssd <= 0.1 * res.initial_ssd, "{} vs {}", res.final_ssd, res.initial_ssd);
        assert!(res.trace.iter().all(|it| it.max_correction <= 0.5 + 1e-12));
        let c = g.center();
        let u = res.field.sample(c);
        assert!((u - Vec3::new(1.5, -1.0, 0.5)).norm() < 0.3, "{u:?}");
    }
}
