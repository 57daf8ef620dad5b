//! Point distribution model: Procrustes alignment, PCA and clamped projection.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};

use crate::grid::{PointSet, Vec3};
use crate::{Error, Real, Result};

pub const SHAPE_MAGIC: &str = "HYBREG-SHAPE 1";
/// Coefficients are limited to this many standard deviations.
pub const CLAMP_SIGMAS: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModel {
    pub mean_shape: PointSet<f64>,
    /// `3N × n_modes`, orthonormal columns; vertex `v` occupies rows `3v..3v+3`.
    pub modes: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: Vec<f64>,
    pub n_training: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeCoefficients {
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeModelConfig {
    /// Modes with `λ ≤ relative_threshold·λ_max` are dropped.
    pub relative_threshold: f64,
    pub max_modes: Option<usize>,
    pub procrustes_iters: usize,
}

impl Default for ShapeModelConfig {
    fn default() -> Self {
        ShapeModelConfig { relative_threshold: 1e-8, max_modes: None, procrustes_iters: 100 }
    }
}

crate::settings!(ShapeModelConfig { relative_threshold, max_modes, procrustes_iters });

/// Rotation `R` and translation `t` with `R·x + t ≈ y` in the least-squares sense.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn apply(&self, p: Vec3<f64>) -> Vec3<f64> {
        let v = self.rotation * Vector3::from(p.0) + self.translation;
        Vec3([v[0], v[1], v[2]])
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }
}

fn centroid(p: &[Vec3<f64>]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    for v in p {
        c += Vector3::from(v.0);
    }
    c / p.len() as f64
}

/// Kabsch fit of `from` onto `to` (equal lengths).
pub fn rigid_fit(from: &[Vec3<f64>], to: &[Vec3<f64>]) -> Pose {
    let cf = centroid(from);
    let ct = centroid(to);
    let mut h = Matrix3::zeros();
    for (a, b) in from.iter().zip(to) {
        h += (Vector3::from(a.0) - cf) * (Vector3::from(b.0) - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = vt.transpose() * d * u.transpose();
    Pose { rotation, translation: ct - rotation * cf }
}

fn flatten(p: &[Vec3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * p.len(), p.iter().flat_map(|v| v.0))
}

fn unflatten(x: &DVector<f64>) -> Vec<Vec3<f64>> {
    x.as_slice().chunks_exact(3).map(|c| Vec3([c[0], c[1], c[2]])).collect()
}

/// Generalized Procrustes alignment (rotation and translation) of `shapes`.
fn procrustes(shapes: &[Vec<Vec3<f64>>], iters: usize) -> (Vec<Vec<Vec3<f64>>>, Vec<Vec3<f64>>) {
    let mut mean = shapes[0].clone();
    for _ in 0..iters.max(1) {
        let aligned: Vec<Vec<Vec3<f64>>> = shapes.iter().map(|s| {
            let pose = rigid_fit(s, &mean);
            s.iter().map(|p| pose.apply(*p)).collect()
        }).collect();
        let mut next = vec![Vec3::<f64>::zero(); mean.len()];
        for s in &aligned {
            for (m, p) in next.iter_mut().zip(s) {
                *m += *p;
            }
        }
        let k = aligned.len() as f64;
        next.iter_mut().for_each(|m| *m = *m / k);
        // Keep the mean in the pose of the first shape so the iteration has a fixed gauge.
        let gauge = rigid_fit(&next, &shapes[0]);
        let next: Vec<Vec3<f64>> = next.iter().map(|p| gauge.apply(*p)).collect();
        let change = next.iter().zip(&mean).map(|(a, b)| (*a - *b).norm_squared()).sum::<f64>();
        mean = next;
        if change < 1e-24 * mean.len() as f64 {
            break;
        }
    }
    let aligned: Vec<Vec<Vec3<f64>>> = shapes.iter().map(|s| {
        let pose = rigid_fit(s, &mean);
        s.iter().map(|p| pose.apply(*p)).collect()
    }).collect();
    let k = aligned.len() as f64;
    let mut avg = vec![Vec3::<f64>::zero(); mean.len()];
    for s in &aligned {
        for (m, p) in avg.iter_mut().zip(s) {
            *m += *p;
        }
    }
    avg.iter_mut().for_each(|m| *m = *m / k);
    (aligned, avg)
}

pub fn build_shape_model<T: Real>(shapes: &[PointSet<T>], cfg: &ShapeModelConfig) -> Result<ShapeModel> {
    let n = shapes.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("a shape model needs at least 2 shapes, got {n}")));
    }
    let nv = shapes[0].len();
    if nv == 0 {
        return Err(Error::Empty("shapes have no vertices".into()));
    }
    if shapes.iter().any(|s| s.len() != nv) {
        return Err(Error::DimensionMismatch("all shapes need the same vertex count".into()));
    }
    let raw: Vec<Vec<Vec3<f64>>> = shapes.iter().map(|s| s.iter().map(|p| p.cast()).collect()).collect();
    let (aligned, mean) = procrustes(&raw, cfg.procrustes_iters);
    let mean_v = flatten(&mean);
    let mut x = DMatrix::<f64>::zeros(3 * nv, n);
    for (c, s) in aligned.iter().enumerate() {
        x.set_column(c, &(flatten(s) - &mean_v));
    }
    // Gram trick: eigenvectors of XᵀX/(n−1) lift to those of XXᵀ/(n−1).
    let gram = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]].max(0.0);
    let scale2 = mean.iter().map(|p| p.norm_squared()).sum::<f64>().max(1e-300);
    let mut eigenvalues = Vec::new();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for &k in order.iter().take(n - 1) {
        let l = eig.eigenvalues[k];
        if !(l > cfg.relative_threshold * lmax) || l <= 1e-20 * scale2 {
            break;
        }
        if cfg.max_modes.is_some_and(|m| cols.len() >= m) {
            break;
        }
        let mut v = &x * eig.eigenvectors.column(k);
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let norm = v.norm();
        if !(norm > 0.0) {
            break;
        }
        cols.push(v / norm);
        eigenvalues.push(l);
    }
    let modes = if cols.is_empty() { DMatrix::zeros(3 * nv, 0) } else { DMatrix::from_columns(&cols) };
    Ok(ShapeModel { mean_shape: PointSet::new(mean)?, modes, eigenvalues, n_training: n })
}

impl ShapeModel {
    pub fn n_modes(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn bounds(&self) -> Vec<f64> {
        self.eigenvalues.iter().map(|l| CLAMP_SIGMAS * l.max(0.0).sqrt()).collect()
    }

    /// `mean + Σ b_i·mode_i`.
    pub fn reconstruct(&self, b: &ShapeCoefficients) -> PointSet<f64> {
        let mut v = flatten(&self.mean_shape.points);
        for (i, bi) in b.b.iter().enumerate() {
            v += self.modes.column(i) * *bi;
        }
        PointSet { points: unflatten(&v) }
    }

    fn check(&self, n: usize) -> Result<()> {
        if n != self.mean_shape.len() {
            return Err(Error::DimensionMismatch(format!("model has {} vertices, shape has {n}", self.mean_shape.len())));
        }
        Ok(())
    }

    /// Coefficients of a shape already in the model frame, without clamping.
    pub fn coefficients(&self, aligned: &PointSet<f64>) -> Result<ShapeCoefficients> {
        self.check(aligned.len())?;
        let d = flatten(&aligned.points) - flatten(&self.mean_shape.points);
        Ok(ShapeCoefficients { b: (self.modes.transpose() * d).iter().copied().collect() })
    }
}

/// Most probable shape near `shape`: aligned to the mean, projected onto the modes with
/// `|b_i| ≤ 3√λ_i`, and moved back to the input pose.
pub fn project_shape<T: Real>(model: &ShapeModel, shape: &PointSet<T>) -> Result<(PointSet<T>, ShapeCoefficients)> {
    model.check(shape.len())?;
    let pts: Vec<Vec3<f64>> = shape.iter().map(|p| p.cast()).collect();
    let pose = rigid_fit(&pts, &model.mean_shape.points);
    let aligned = PointSet { points: pts.iter().map(|p| pose.apply(*p)).collect() };
    let mut b = model.coefficients(&aligned)?;
    for (bi, lim) in b.b.iter_mut().zip(model.bounds()) {
        *bi = bi.clamp(-lim, lim);
    }
    let back = pose.inverse();
    let out = model.reconstruct(&b).points.iter().map(|p| back.apply(*p).cast()).collect();
    Ok((PointSet { points: out }, b))
}

pub fn write_shape_model(path: &Path, m: &ShapeModel) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "{SHAPE_MAGIC}")?;
    writeln!(out, "vertices {}", m.mean_shape.len())?;
    writeln!(out, "modes {}", m.n_modes())?;
    writeln!(out, "training {}", m.n_training)?;
    let l: Vec<String> = m.eigenvalues.iter().map(|v| v.to_string()).collect();
    writeln!(out, "eigenvalues {}", l.join(" "))?;
    writeln!(out, "type float64")?;
    writeln!(out, "end")?;
    for v in m.mean_shape.iter().flat_map(|p| p.0) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in m.modes.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_shape_model(path: &Path) -> Result<ShapeModel> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != SHAPE_MAGIC {
        return Err(Error::Parse(format!("{}: not a shape model", path.display())));
    }
    let (mut nv, mut nm, mut nt, mut eig) = (None, None, None, Vec::new());
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Parse("shape model header not terminated".into()));
        }
        let mut parts = line.split_whitespace();
        let num = |s: Option<&str>| s.and_then(|v| v.parse::<usize>().ok()).ok_or_else(|| Error::Parse("bad shape header".into()));
        match parts.next() {
            Some("end") => break,
            Some("vertices") => nv = Some(num(parts.next())?),
            Some("modes") => nm = Some(num(parts.next())?),
            Some("training") => nt = Some(num(parts.next())?),
            Some("eigenvalues") => {
                eig = parts.map(|v| v.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))).collect::<Result<_>>()?
            }
            _ => {}
        }
    }
    let (nv, nm, nt) = match (nv, nm, nt) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Parse("shape header lacks vertices, modes or training".into())),
    };
    if eig.len() != nm {
        return Err(Error::Parse("eigenvalue count differs from mode count".into()));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let vals: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if vals.len() != 3 * nv * (1 + nm) {
        return Err(Error::Parse("shape model block has the wrong size".into()));
    }
    let mean = PointSet::new(vals[..3 * nv].chunks_exact(3).map(|c| Vec3([c[0], c[1], c[2]])).collect())?;
    Ok(ShapeModel {
        mean_shape: mean,
        modes: DMatrix::from_column_slice(3 * nv, nm, &vals[3 * nv..]),
        eigenvalues: eig,
        n_training: nt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::icosphere;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere() -> Vec<Vec3<f64>> {
        icosphere(2).0.into_iter().map(|p| p * 10.0).collect()
    }

    fn set(p: Vec<Vec3<f64>>) -> PointSet<f64> {
        PointSet::new(p).unwrap()
    }

    fn rotate(p: &[Vec3<f64>], angles: [f64; 3], t: Vec3<f64>) -> Vec<Vec3<f64>> {
        let r = crate::grid::Mat3::rotation(angles);
        p.iter().map(|v| r.mul_vec(*v) + t).collect()
    }

    #[test]
    fn identical_shapes_have_no_variance() {
        let s = set(sphere());
        let m = build_shape_model(&[s.clone(), s.clone(), s.clone()], &ShapeModelConfig::default()).unwrap();
        assert!(m.eigenvalues.iter().all(|&l| l < 1e-12));
        assert!((m.mean_shape.rms_distance(&s)) < 1e-9);
    }

    #[test]
    fn two_shapes_give_one_mode_along_their_difference() {
        let a = sphere();
        let b: Vec<Vec3<f64>> = a.iter().map(|p| Vec3::new(p[0], p[1], 1.3 * p[2])).collect();
        let m = build_shape_model(&[set(a.clone()), set(rotate(&b, [0.1, 0.0, 0.2], Vec3::new(3.0, 1.0, 0.0)))], &ShapeModelConfig::default()).unwrap();
        assert_eq!(m.n_modes(), 1);
        let d = flatten(&b) - flatten(&a);
        let cos = (m.modes.column(0).dot(&d) / d.norm()).abs();
        assert!(cos > 1.0 - 1e-6, "{cos}");
    }

    #[test]
    fn pose_fit_recovers_a_rigid_motion() {
        let a = sphere();
        let b = rotate(&a, [0.3, -0.2, 0.5], Vec3::new(1.0, 2.0, -3.0));
        let pose = rigid_fit(&a, &b);
        for (p, q) in a.iter().zip(&b) {
            assert!((pose.apply(*p) - *q).norm() < 1e-9);
        }
    }

    /// Shapes `mean + c₁·φ₁ + c₂·φ₂` with coefficient columns of zero mean, mutually
    /// orthogonal and of known sample variance.
    fn two_mode_population(sd: [f64; 2]) -> (Vec<PointSet<f64>>, [DVector<f64>; 2]) {
        let base = sphere();
        let phi1: Vec<Vec3<f64>> = base.clone();
        let phi2: Vec<Vec3<f64>> = base.iter().map(|p| Vec3::new(0.0, 0.0, p[2])).collect();
        let mut f1 = flatten(&phi1);
        f1 /= f1.norm();
        let mut f2 = flatten(&phi2);
        f2 -= &f1 * f1.dot(&f2);
        f2 /= f2.norm();
        // Columns of a 5-point orthogonal design: zero mean, sum of squares 4.
        let u = [-2.0, -1.0, 0.0, 1.0, 2.0].map(|v: f64| v / 10f64.sqrt() * 2.0);
        let w = [1.0, -2.0, 0.0, 2.0, -1.0].map(|v: f64| v / 10f64.sqrt() * 2.0);
        let shapes = (0..5)
            .map(|k| {
                let x = flatten(&base) + &f1 * (sd[0] * u[k]) + &f2 * (sd[1] * w[k]);
                set(rotate(&unflatten(&x), [0.05 * k as f64, -0.03 * k as f64, 0.1], Vec3::new(k as f64, 0.5, -1.0)))
            })
            .collect();
        (shapes, [f1, f2])
    }

    #[test]
    fn recovers_a_two_mode_linear_model() {
        let sd = [4.0, 1.5];
        let (shapes, gen) = two_mode_population(sd);
        let m = build_shape_model(&shapes, &ShapeModelConfig::default()).unwrap();
        assert!(m.n_modes() >= 2);
        for k in 0..2 {
            let want = sd[k] * sd[k];
            assert!((m.eigenvalues[k] - want).abs() / want < 0.05, "λ{k} = {} vs {want}", m.eigenvalues[k]);
        }
        // Largest principal angle between the generating and recovered planes, with the
        // generating modes rotated into the pose of the mean.
        let pose = rigid_fit(&sphere(), &m.mean_shape.points);
        let turn = |f: &DVector<f64>| flatten(&unflatten(f).iter().map(|v| {
            let r = pose.rotation * Vector3::from(v.0);
            Vec3([r[0], r[1], r[2]])
        }).collect::<Vec<_>>());
        let q = DMatrix::from_columns(&[turn(&gen[0]), turn(&gen[1])]);
        let p = m.modes.columns(0, 2).into_owned();
        let s = (q.transpose() * p).svd(false, false).singular_values;
        let smallest = s.iter().cloned().fold(f64::INFINITY, f64::min).min(1.0);
        assert!(smallest.acos().to_degrees() < 1.0);
        // Orthonormal modes and descending eigenvalues.
        let g = m.modes.transpose() * &m.modes;
        assert!((g - DMatrix::identity(m.n_modes(), m.n_modes())).abs().max() < 1e-9);
        assert!(m.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn training_shapes_reconstruct_with_all_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = sphere();
        let shapes: Vec<PointSet<f64>> = (0..6)
            .map(|_| set(base.iter().map(|p| *p + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect()))
            .collect();
        let m = build_shape_model(&shapes, &ShapeModelConfig::default()).unwrap();
        assert_eq!(m.n_modes(), 5);
        let diameter = shapes[0].diameter();
        for s in &shapes {
            let pts: Vec<Vec3<f64>> = s.points.clone();
            let pose = rigid_fit(&pts, &m.mean_shape.points);
            let aligned = set(pts.iter().map(|p| pose.apply(*p)).collect());
            let rec = m.reconstruct(&m.coefficients(&aligned).unwrap());
            assert!(rec.rms_distance(&aligned) <= 1e-6 * diameter);
        }
    }

    #[test]
    fn projection_clamps_at_three_sigma() {
        let (shapes, _) = two_mode_population([4.0, 1.5]);
        let m = build_shape_model(&shapes, &ShapeModelConfig::default()).unwrap();
        let (same, b0) = project_shape(&m, &m.mean_shape).unwrap();
        assert!(b0.b.iter().all(|b| b.abs() < 1e-9));
        assert!(same.rms_distance(&m.mean_shape) < 1e-9);
        let l1 = m.eigenvalues[0];
        let far = m.reconstruct(&ShapeCoefficients { b: { let mut b = vec![0.0; m.n_modes()]; b[0] = 5.0 * l1.sqrt(); b } });
        let (out, b) = project_shape(&m, &far).unwrap();
        assert_eq!(b.b[0], 3.0 * l1.sqrt());
        let want = m.reconstruct(&ShapeCoefficients { b: { let mut v = vec![0.0; m.n_modes()]; v[0] = 3.0 * l1.sqrt(); v } });
        assert!(out.rms_distance(&want) < 1e-9);
    }

    #[test]
    fn projection_is_idempotent_and_orthogonal() {
        let (shapes, _) = two_mode_population([4.0, 1.5]);
        let m = build_shape_model(&shapes, &ShapeModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let bounds = m.bounds();
        for _ in 0..5 {
            let s = set(m.mean_shape.iter().map(|p| *p + Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))).collect());
            let s = set(rotate(&s.points, [0.2, 0.1, -0.3], Vec3::new(2.0, 0.0, 1.0)));
            let (p1, b1) = project_shape(&m, &s).unwrap();
            let (p2, b2) = project_shape(&m, &p1).unwrap();
            assert!(p1.rms_distance(&p2) < 1e-9);
            for ((x, y), lim) in b1.b.iter().zip(&b2.b).zip(&bounds) {
                assert!(x.abs() <= *lim && (x - y).abs() < 1e-9);
            }
        }
        // A shape inside the clamps: the residual is orthogonal to every mode.
        let inside = m.reconstruct(&ShapeCoefficients { b: vec![0.5; m.n_modes()] });
        let noisy = set(inside.iter().enumerate().map(|(i, p)| *p + Vec3::new(0.01 * ((i * 7) % 5) as f64, 0.0, -0.01 * ((i * 3) % 4) as f64)).collect());
        let pose = rigid_fit(&noisy.points, &m.mean_shape.points);
        let aligned = set(noisy.iter().map(|p| pose.apply(*p)).collect());
        let (out, _) = project_shape(&m, &aligned).unwrap();
        let resid = flatten(&aligned.points) - flatten(&out.points);
        assert!((m.modes.transpose() * resid).abs().max() < 1e-9);
    }

    #[test]
    fn model_round_trip_and_mismatch() {
        let (shapes, _) = two_mode_population([4.0, 1.5]);
        let m = build_shape_model(&shapes, &ShapeModelConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.shape");
        write_shape_model(&path, &m).unwrap();
        assert_eq!(read_shape_model(&path).unwrap(), m);
        let short = set(sphere()[..10].to_vec());
        assert!(project_shape(&m, &short).is_err());
        assert!(build_shape_model(&[short, shapes[0].clone()], &ShapeModelConfig::default()).is_err());
    }
}
