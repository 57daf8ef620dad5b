//! Geometric registration over a tensor-product B-spline displacement.
//!
//! `h(x) = x + Σ_klm u_klm·B(t₀ − k)·B(t₁ − l)·B(t₂ − m)` with `t = (x − origin)/spacing`
//! and `B` the centered cardinal B-spline of the chosen degree. The cost
//!
//! `C(u) = Σ_j Σ_i w_ij ‖h⁻¹(m_i) − s_j‖² + β·V·Σ_x ‖u_I(x) − u(x)‖² + α·Σ_edges ‖Δu‖²/Δ²·V_c`
//!
//! is minimized by preconditioned gradient descent with backtracking. The model
//! points `h⁻¹(m_i)` are re-solved by Newton at every trial, and their derivative
//! with respect to the coefficients follows from `h(p*) = m`:
//! `∂p*/∂u_k = −J(p*)⁻¹·B_k(p*)`.

use std::path::Path;

use nalgebra::DMatrix;

use crate::grid::io::{read_raw, write_raw};
use crate::grid::{DisplacementField, Geometry, Mat3, PointInversion, PointSet, Vec3};
use crate::settings;
use crate::{Error, Real, Result};

pub const SPLINE_MAGIC: &str = "HYBREG-SPLINE 1";
const MAX_DEGREE: usize = 5;

/// Centered cardinal B-spline of `degree` at `t`.
pub fn bspline_basis(degree: usize, t: f64) -> f64 {
    let half = (degree + 1) as f64 / 2.0;
    if t.abs() >= half {
        return 0.0;
    }
    match degree {
        0 => 1.0,
        1 => 1.0 - t.abs(),
        3 => {
            let a = t.abs();
            if a < 1.0 {
                2.0 / 3.0 - a * a + 0.5 * a * a * a
            } else {
                let b = 2.0 - a;
                b * b * b / 6.0
            }
        }
        d => {
            let df = d as f64;
            ((t + half) * bspline_basis(d - 1, t + 0.5) + (half - t) * bspline_basis(d - 1, t - 0.5)) / df
        }
    }
}

pub fn bspline_derivative(degree: usize, t: f64) -> f64 {
    if degree == 0 {
        return 0.0;
    }
    bspline_basis(degree - 1, t + 0.5) - bspline_basis(degree - 1, t - 0.5)
}

/// Nonzero basis weights along one axis: first lattice index and values.
#[derive(Clone, Debug, Default)]
struct Weights1d {
    start: usize,
    w: Vec<f64>,
    dw: Vec<f64>,
}

fn weights_1d(degree: usize, t: f64, n: usize, with_derivative: bool) -> Weights1d {
    let half = (degree + 1) as f64 / 2.0;
    let lo = ((t - half).floor() as i64 + 1).max(0);
    let hi = ((t + half).ceil() as i64 - 1).min(n as i64 - 1);
    let mut out = Weights1d { start: lo.max(0) as usize, w: Vec::new(), dw: Vec::new() };
    if hi < lo {
        return out;
    }
    for k in lo..=hi {
        let s = t - k as f64;
        out.w.push(bspline_basis(degree, s));
        if with_derivative {
            out.dw.push(bspline_derivative(degree, s));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplineTransform<T> {
    pub lattice_dims: [usize; 3],
    pub lattice_spacing: Vec3<T>,
    pub lattice_origin: Vec3<T>,
    pub degree: usize,
    pub coeffs: Vec<Vec3<T>>,
}

impl<T: Real> SplineTransform<T> {
    pub fn new(lattice_dims: [usize; 3], lattice_spacing: Vec3<T>, lattice_origin: Vec3<T>, degree: usize) -> Result<Self> {
        if degree == 0 || degree > MAX_DEGREE {
            return Err(Error::InvalidArgument(format!("spline degree must be in 1..={MAX_DEGREE}, got {degree}")));
        }
        Geometry::new(lattice_dims, lattice_spacing, lattice_origin)?;
        let n = lattice_dims.iter().product();
        Ok(SplineTransform { lattice_dims, lattice_spacing, lattice_origin, degree, coeffs: vec![Vec3::zero(); n] })
    }

    /// Zero spline whose lattice gives every voxel of `geom` full basis support.
    pub fn for_grid(geom: &Geometry<T>, control_spacing_voxels: f64, degree: usize) -> Result<Self> {
        if !(control_spacing_voxels > 0.0) {
            return Err(Error::InvalidArgument("control spacing must be positive".into()));
        }
        let half = (degree + 1) as f64 / 2.0;
        let mut dims = [0; 3];
        let mut spacing = Vec3::zero();
        let mut origin = Vec3::zero();
        for a in 0..3 {
            let d = geom.spacing[a].f64() * control_spacing_voxels;
            let extent = (geom.dims[a] - 1) as f64 * geom.spacing[a].f64() / d;
            let k_min = (-half).floor() as i64 + 1;
            let k_max = (extent + half).ceil() as i64 - 1;
            dims[a] = (k_max - k_min + 1) as usize;
            spacing[a] = T::of(d);
            origin[a] = T::of(geom.origin[a].f64() + k_min as f64 * d);
        }
        Self::new(dims, spacing, origin, degree)
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coeffs.is_empty()
    }

    #[inline]
    pub fn index(&self, k: usize, l: usize, m: usize) -> usize {
        k + self.lattice_dims[0] * (l + self.lattice_dims[1] * m)
    }

    fn local(&self, x: Vec3<T>, with_derivative: bool) -> [Weights1d; 3] {
        std::array::from_fn(|a| {
            let t = ((x[a] - self.lattice_origin[a]) / self.lattice_spacing[a]).f64();
            weights_1d(self.degree, t, self.lattice_dims[a], with_derivative)
        })
    }

    /// `u(x)`; zero where no control point supports `x`.
    pub fn displacement(&self, x: Vec3<T>) -> Vec3<T> {
        let [wx, wy, wz] = self.local(x, false);
        let mut acc = [0.0f64; 3];
        for (c, &bz) in wz.w.iter().enumerate() {
            for (b, &by) in wy.w.iter().enumerate() {
                let byz = by * bz;
                let row = self.index(wx.start, wy.start + b, wz.start + c);
                for (a, &bx) in wx.w.iter().enumerate() {
                    let w = bx * byz;
                    let v = self.coeffs[row + a];
                    for d in 0..3 {
                        acc[d] += w * v[d].f64();
                    }
                }
            }
        }
        Vec3::from_f64(acc)
    }

    /// `h(x) = x + u(x)`.
    pub fn apply(&self, x: Vec3<T>) -> Vec3<T> {
        x + self.displacement(x)
    }

    /// `(u(x), ∂h/∂x)` with the analytic basis derivative.
    pub fn displacement_and_jacobian(&self, x: Vec3<T>) -> (Vec3<T>, Mat3<T>) {
        let (u, j) = self.local_eval(x);
        (Vec3::from_f64(u), j.cast())
    }

    pub fn jacobian(&self, x: Vec3<T>) -> Mat3<T> {
        self.displacement_and_jacobian(x).1
    }

    fn local_eval(&self, x: Vec3<T>) -> ([f64; 3], Mat3<f64>) {
        let [wx, wy, wz] = self.local(x, true);
        let inv: [f64; 3] = std::array::from_fn(|a| 1.0 / self.lattice_spacing[a].f64());
        let mut u = [0.0f64; 3];
        let mut j = Mat3::<f64>::identity();
        for c in 0..wz.w.len() {
            for b in 0..wy.w.len() {
                let row = self.index(wx.start, wy.start + b, wz.start + c);
                for a in 0..wx.w.len() {
                    let v = self.coeffs[row + a].to_f64();
                    let w = wx.w[a] * wy.w[b] * wz.w[c];
                    let g = [
                        wx.dw[a] * wy.w[b] * wz.w[c] * inv[0],
                        wx.w[a] * wy.dw[b] * wz.w[c] * inv[1],
                        wx.w[a] * wy.w[b] * wz.dw[c] * inv[2],
                    ];
                    for d in 0..3 {
                        u[d] += w * v[d];
                        for e in 0..3 {
                            j.0[d][e] += g[e] * v[d];
                        }
                    }
                }
            }
        }
        (u, j)
    }

    /// Dense displacement on `geom`.
    pub fn to_field(&self, geom: &Geometry<T>) -> DisplacementField<T> {
        let bases = AxisBases::new(self, geom);
        let c: Vec<[f64; 3]> = self.coeffs.iter().map(|v| v.to_f64()).collect();
        let data = bases.synthesize(&c);
        DisplacementField { geom: *geom, data: data.into_iter().map(Vec3::from_f64).collect() }
    }

    /// Solves `h(p) = m_i` by damped Newton with the analytic Jacobian.
    pub fn invert_points(&self, targets: &PointSet<T>, init: Option<&PointSet<T>>, tol: T, max_iters: usize) -> Result<PointInversion<T>> {
        if let Some(init) = init {
            if init.len() != targets.len() {
                return Err(Error::DimensionMismatch(format!(
                    "{} starting points for {} targets",
                    init.len(),
                    targets.len()
                )));
            }
        }
        let mut points = Vec::with_capacity(targets.len());
        let mut residuals = Vec::with_capacity(targets.len());
        let mut converged = Vec::with_capacity(targets.len());
        for (i, &m) in targets.iter().enumerate() {
            let start = match init {
                Some(p) => p.points[i],
                None => m - self.displacement(m),
            };
            let (p, r, ok) = invert_spline_point(self, m.cast(), start.cast(), tol.f64(), max_iters);
            points.push(p.cast());
            residuals.push(T::of(r));
            converged.push(ok);
        }
        Ok(PointInversion { points: PointSet::new(points)?, residuals, converged })
    }

    pub fn cast<U: Real>(&self) -> SplineTransform<U> {
        SplineTransform {
            lattice_dims: self.lattice_dims,
            lattice_spacing: self.lattice_spacing.cast(),
            lattice_origin: self.lattice_origin.cast(),
            degree: self.degree,
            coeffs: self.coeffs.iter().map(|v| v.cast()).collect(),
        }
    }
}

fn invert_spline_point<T: Real>(s: &SplineTransform<T>, m: Vec3<f64>, start: Vec3<f64>, tol: f64, max_iters: usize) -> (Vec3<f64>, f64, bool) {
    let eval = |p: Vec3<f64>| {
        let (u, j) = s.local_eval(p.cast());
        (p + Vec3(u) - m, j)
    };
    let mut p = start;
    let (mut r, mut j) = eval(p);
    let mut rn = r.norm();
    for _ in 0..max_iters {
        if rn <= tol {
            return (p, rn, true);
        }
        let step = match j.inverse() {
            Some(ji) => -ji.mul_vec(r),
            None => -r,
        };
        let mut alpha = 1.0;
        let mut moved = false;
        for _ in 0..20 {
            let q = p + step * alpha;
            let (rq, jq) = eval(q);
            let qn = rq.norm();
            if qn < rn {
                p = q;
                r = rq;
                j = jq;
                rn = qn;
                moved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            break;
        }
    }
    (p, rn, rn <= tol)
}

/// Per-axis basis rows of a spline lattice sampled at the voxels of a grid.
struct AxisBases {
    rows: [Vec<Weights1d>; 3],
    lattice: [usize; 3],
    grid: [usize; 3],
}

impl AxisBases {
    fn new<T: Real>(s: &SplineTransform<T>, geom: &Geometry<T>) -> Self {
        let rows = std::array::from_fn(|a| {
            (0..geom.dims[a])
                .map(|i| {
                    let x = geom.origin[a].f64() + i as f64 * geom.spacing[a].f64();
                    let t = (x - s.lattice_origin[a].f64()) / s.lattice_spacing[a].f64();
                    weights_1d(s.degree, t, s.lattice_dims[a], false)
                })
                .collect()
        });
        AxisBases { rows, lattice: s.lattice_dims, grid: geom.dims }
    }

    /// Lattice → grid along `axis` (or grid → lattice when `transpose`).
    fn pass(&self, data: &[[f64; 3]], dims: [usize; 3], axis: usize, transpose: bool) -> (Vec<[f64; 3]>, [usize; 3]) {
        let mut out_dims = dims;
        out_dims[axis] = if transpose { self.lattice[axis] } else { self.grid[axis] };
        let mut out = vec![[0.0; 3]; out_dims.iter().product()];
        let in_stride = [1, dims[0], dims[0] * dims[1]];
        let out_stride = [1, out_dims[0], out_dims[0] * out_dims[1]];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for q in 0..dims[ob] {
            for p in 0..dims[oa] {
                let in_base = p * in_stride[oa] + q * in_stride[ob];
                let out_base = p * out_stride[oa] + q * out_stride[ob];
                for (i, row) in self.rows[axis].iter().enumerate() {
                    for (n, &w) in row.w.iter().enumerate() {
                        let k = row.start + n;
                        let (src, dst) = if transpose {
                            (in_base + i * in_stride[axis], out_base + k * out_stride[axis])
                        } else {
                            (in_base + k * in_stride[axis], out_base + i * out_stride[axis])
                        };
                        let v = data[src];
                        let o = &mut out[dst];
                        o[0] += w * v[0];
                        o[1] += w * v[1];
                        o[2] += w * v[2];
                    }
                }
            }
        }
        (out, out_dims)
    }

    fn synthesize(&self, coeffs: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let (a, d) = self.pass(coeffs, self.lattice, 0, false);
        let (b, d) = self.pass(&a, d, 1, false);
        self.pass(&b, d, 2, false).0
    }

    /// `Bᵀ·u` for a dense grid field.
    fn analyze(&self, field: &[[f64; 3]]) -> Vec<[f64; 3]> {
        let (a, d) = self.pass(field, self.grid, 0, true);
        let (b, d) = self.pass(&a, d, 1, true);
        self.pass(&b, d, 2, true).0
    }

    /// Per-axis Gram matrices `B_aᵀ·B_a`.
    fn grams(&self) -> [DMatrix<f64>; 3] {
        std::array::from_fn(|a| {
            let n = self.lattice[a];
            let mut g = DMatrix::<f64>::zeros(n, n);
            for row in &self.rows[a] {
                for (p, &wp) in row.w.iter().enumerate() {
                    for (q, &wq) in row.w.iter().enumerate() {
                        g[(row.start + p, row.start + q)] += wp * wq;
                    }
                }
            }
            g
        })
    }
}

/// Applies `M_z ⊗ M_y ⊗ M_x` to a lattice array.
fn kron_apply(data: &[[f64; 3]], dims: [usize; 3], mats: &[DMatrix<f64>; 3]) -> Vec<[f64; 3]> {
    let mut cur = data.to_vec();
    let stride = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        let m = &mats[axis];
        let n = dims[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut out = vec![[0.0; 3]; cur.len()];
        let mut line = vec![[0.0; 3]; n];
        for q in 0..dims[ob] {
            for p in 0..dims[oa] {
                let base = p * stride[oa] + q * stride[ob];
                for (t, slot) in line.iter_mut().enumerate() {
                    *slot = cur[base + t * stride[axis]];
                }
                for r in 0..n {
                    let mut acc = [0.0; 3];
                    for (c, v) in line.iter().enumerate() {
                        let w = m[(r, c)];
                        if w != 0.0 {
                            acc[0] += w * v[0];
                            acc[1] += w * v[1];
                            acc[2] += w * v[2];
                        }
                    }
                    out[base + r * stride[axis]] = acc;
                }
            }
        }
        cur = out;
    }
    cur
}

/// Correspondence weights: rows are scene points `j`, columns model points `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridWeights {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
}

impl HybridWeights {
    pub fn new(rows: usize, cols: usize, w: Vec<f64>) -> Result<Self> {
        if w.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!("{rows}×{cols} weights need {} entries, got {}", rows * cols, w.len())));
        }
        if w.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("weights must lie in [0, 1]".into()));
        }
        Ok(HybridWeights { rows, cols, w })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        HybridWeights { rows, cols, w: vec![0.0; rows * cols] }
    }

    /// One-hot rows from a column index per row.
    pub fn one_hot(cols: usize, picks: &[usize]) -> Self {
        let mut w = vec![0.0; picks.len() * cols];
        for (j, &i) in picks.iter().enumerate() {
            w[j * cols + i] = 1.0;
        }
        HybridWeights { rows: picks.len(), cols, w }
    }

    #[inline]
    pub fn get(&self, j: usize, i: usize) -> f64 {
        self.w[j * self.cols + i]
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.w[j * self.cols..(j + 1) * self.cols]
    }

    /// Largest deviation of a row sum from one.
    pub fn max_row_error(&self) -> f64 {
        (0..self.rows).map(|j| (self.row(j).iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
    }

    pub fn is_one_hot(&self) -> bool {
        (0..self.rows).all(|j| {
            let r = self.row(j);
            r.iter().filter(|&&v| v == 1.0).count() == 1 && r.iter().all(|&v| v == 0.0 || v == 1.0)
        })
    }

    /// Mean Shannon entropy (nats) of the rows.
    pub fn mean_entropy(&self) -> f64 {
        if self.rows == 0 {
            return 0.0;
        }
        let total: f64 = (0..self.rows)
            .map(|j| self.row(j).iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>())
            .sum();
        total / self.rows as f64
    }

    fn check(&self, model: usize, scene: usize) -> Result<()> {
        if self.rows != scene || self.cols != model {
            return Err(Error::DimensionMismatch(format!(
                "weights are {}×{}, points need {scene}×{model}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }
}

/// Produces correspondence weights from the current model point positions.
pub trait WeightModel<T> {
    fn weights(&mut self, model_current: &PointSet<T>, scene: &PointSet<T>) -> Result<HybridWeights>;
}

/// Weights that do not depend on point positions.
pub struct FixedWeights(pub HybridWeights);

impl<T: Real> WeightModel<T> for FixedWeights {
    fn weights(&mut self, _model: &PointSet<T>, _scene: &PointSet<T>) -> Result<HybridWeights> {
        Ok(self.0.clone())
    }
}

fn geometric_term<T: Real>(model_current: &[Vec3<f64>], scene: &PointSet<T>, w: &HybridWeights) -> f64 {
    let mut total = 0.0;
    for (j, s) in scene.iter().enumerate() {
        let s = s.cast::<f64>();
        for (i, &v) in w.row(j).iter().enumerate() {
            if v != 0.0 {
                total += v * (model_current[i] - s).norm_squared();
            }
        }
    }
    total
}

/// `Σ_j Σ_i w_ij ‖m_i − s_j‖² + β·V·Σ_x ‖u_I(x) − u_s(x)‖²`, with `m_i` the current
/// (already inverse-mapped) model points and the coupling summed directly over the grid.
pub fn e2_cost<T: Real>(
    s: &SplineTransform<T>,
    h_i: &DisplacementField<T>,
    model_current: &PointSet<T>,
    scene: &PointSet<T>,
    w: &HybridWeights,
    beta: f64,
) -> Result<f64> {
    w.check(model_current.len(), scene.len())?;
    let m: Vec<Vec3<f64>> = model_current.iter().map(|p| p.cast()).collect();
    let geometric = geometric_term(&m, scene, w);
    let coupling = if beta != 0.0 {
        let dense = s.to_field(&h_i.geom);
        let sum: f64 = dense.data.iter().zip(&h_i.data).map(|(a, b)| (*a - *b).cast::<f64>().norm_squared()).sum();
        beta * h_i.geom.voxel_volume().f64() * sum
    } else {
        0.0
    };
    Ok(geometric + coupling)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplineConfig {
    pub degree: usize,
    /// Control point spacing in voxels.
    pub control_spacing: f64,
    /// Weight of the finite-difference gradient penalty on the coefficients.
    pub smoothness: f64,
    pub max_iters: usize,
    /// Relative cost decrease below which the descent stops.
    pub tol: f64,
    /// Model-point inversion tolerance in voxels.
    pub inversion_tol: f64,
    pub inversion_iters: usize,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            degree: 3,
            control_spacing: 8.0,
            smoothness: 0.001,
            max_iters: 60,
            tol: 1e-6,
            inversion_tol: 1e-6,
            inversion_iters: 30,
        }
    }
}

settings!(SplineConfig { degree, control_spacing, smoothness, max_iters, tol, inversion_tol, inversion_iters });

#[derive(Clone, Debug, PartialEq)]
pub struct E2Iterate {
    /// Full cost `C` (geometric + coupling + smoothness).
    pub cost: f64,
    pub geometric: f64,
    pub coupling: f64,
    pub smoothness: f64,
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct E2Result<T> {
    pub spline: SplineTransform<T>,
    /// Dense `u` of the optimized spline on the grid of `h_I`.
    pub field: DisplacementField<T>,
    /// `h⁻¹(m_i)` for the optimized spline.
    pub model_points: PointSet<T>,
    pub weights: HybridWeights,
    pub trace: Vec<E2Iterate>,
    pub converged: bool,
    /// Largest model-point inversion residual (mm).
    pub inversion_residual: f64,
}

/// Everything needed to evaluate `C` and its gradient for one set of weights.
struct Problem<'a, T> {
    spline: SplineTransform<T>,
    bases: AxisBases,
    gram: [DMatrix<f64>; 3],
    /// `Bᵀ·u_I`.
    analyzed: Vec<[f64; 3]>,
    /// `‖u_I‖²`.
    norm_i: f64,
    coupling_scale: f64,
    smooth_scale: [f64; 3],
    model: Vec<Vec3<f64>>,
    scene: &'a PointSet<T>,
    tol: f64,
    inversion_iters: usize,
}

struct Evaluation {
    parts: [f64; 3],
    points: Vec<Vec3<f64>>,
    residual: f64,
}

impl Evaluation {
    fn cost(&self) -> f64 {
        self.parts.iter().sum()
    }
}

impl<'a, T: Real> Problem<'a, T> {
    /// The problem and the projection of `h_I` onto the spline space.
    fn build(h_i: &DisplacementField<T>, model: &PointSet<T>, scene: &'a PointSet<T>, beta: f64, cfg: &SplineConfig) -> Result<(Self, Vec<[f64; 3]>)> {
        let geom = h_i.geom;
        let spline = SplineTransform::for_grid(&geom, cfg.control_spacing, cfg.degree)?;
        let bases = AxisBases::new(&spline, &geom);
        let gram = bases.grams();
        let u_i: Vec<[f64; 3]> = h_i.data.iter().map(|v| v.to_f64()).collect();
        let analyzed = bases.analyze(&u_i);
        let norm_i: f64 = u_i.iter().map(|v| v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sum();
        let cell_volume: f64 = (0..3).map(|a| spline.lattice_spacing[a].f64()).product();
        let smooth_scale = std::array::from_fn(|a| cfg.smoothness * cell_volume / spline.lattice_spacing[a].f64().powi(2));
        // Projection of h_I onto the spline space: (Gz⁻¹ ⊗ Gy⁻¹ ⊗ Gx⁻¹)·Bᵀu_I.
        let inv: [DMatrix<f64>; 3] = std::array::from_fn(|a| {
            gram[a].clone().try_inverse().unwrap_or_else(|| DMatrix::identity(gram[a].nrows(), gram[a].ncols()))
        });
        let c = kron_apply(&analyzed, spline.lattice_dims, &inv);
        let problem = Problem {
            spline,
            bases,
            gram,
            analyzed,
            norm_i,
            coupling_scale: beta * geom.voxel_volume().f64(),
            smooth_scale,
            model: model.iter().map(|p| p.cast()).collect(),
            scene,
            tol: cfg.inversion_tol * geom.min_spacing().f64(),
            inversion_iters: cfg.inversion_iters,
        };
        Ok((problem, c))
    }

    fn set(&mut self, c: &[[f64; 3]]) {
        for (dst, src) in self.spline.coeffs.iter_mut().zip(c) {
            *dst = Vec3::from_f64(*src);
        }
    }

    fn coupling(&self, c: &[[f64; 3]]) -> f64 {
        if self.coupling_scale == 0.0 {
            return 0.0;
        }
        let gc = kron_apply(c, self.spline.lattice_dims, &self.gram);
        let mut quad = 0.0;
        let mut lin = 0.0;
        for ((a, g), b) in c.iter().zip(&gc).zip(&self.analyzed) {
            for d in 0..3 {
                quad += a[d] * g[d];
                lin += a[d] * b[d];
            }
        }
        self.coupling_scale * (self.norm_i - 2.0 * lin + quad).max(0.0)
    }

    fn smoothness(&self, c: &[[f64; 3]]) -> f64 {
        let dims = self.spline.lattice_dims;
        let stride = [1, dims[0], dims[0] * dims[1]];
        let mut total = 0.0;
        for idx in 0..c.len() {
            let pos = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            for a in 0..3 {
                if self.smooth_scale[a] == 0.0 || pos[a] + 1 >= dims[a] {
                    continue;
                }
                let n = c[idx + stride[a]];
                let v = c[idx];
                let d2 = (n[0] - v[0]).powi(2) + (n[1] - v[1]).powi(2) + (n[2] - v[2]).powi(2);
                total += self.smooth_scale[a] * d2;
            }
        }
        total
    }

    fn invert(&self, start: &[Vec3<f64>]) -> Option<(Vec<Vec3<f64>>, f64)> {
        let mut pts = Vec::with_capacity(self.model.len());
        let mut worst = 0.0f64;
        for (m, s) in self.model.iter().zip(start) {
            let (p, r, ok) = invert_spline_point(&self.spline, *m, *s, self.tol, self.inversion_iters);
            if !ok || !p.is_finite() {
                return None;
            }
            worst = worst.max(r);
            pts.push(p);
        }
        Some((pts, worst))
    }

    /// Cost at `c`; `None` when some model point cannot be inverted.
    fn evaluate(&mut self, c: &[[f64; 3]], start: &[Vec3<f64>], w: &HybridWeights) -> Option<Evaluation> {
        self.set(c);
        let (points, residual) = self.invert(start)?;
        let geometric = geometric_term(&points, self.scene, w);
        Some(Evaluation { parts: [geometric, self.coupling(c), self.smoothness(c)], points, residual })
    }

    fn gradient(&mut self, c: &[[f64; 3]], points: &[Vec3<f64>], w: &HybridWeights) -> Vec<[f64; 3]> {
        self.set(c);
        let dims = self.spline.lattice_dims;
        let mut g = vec![[0.0; 3]; c.len()];
        if self.coupling_scale != 0.0 {
            let gc = kron_apply(c, dims, &self.gram);
            for ((o, a), b) in g.iter_mut().zip(&gc).zip(&self.analyzed) {
                for d in 0..3 {
                    o[d] += 2.0 * self.coupling_scale * (a[d] - b[d]);
                }
            }
        }
        let stride = [1, dims[0], dims[0] * dims[1]];
        for idx in 0..c.len() {
            let pos = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            for a in 0..3 {
                if self.smooth_scale[a] == 0.0 || pos[a] + 1 >= dims[a] {
                    continue;
                }
                let n = idx + stride[a];
                for d in 0..3 {
                    let diff = 2.0 * self.smooth_scale[a] * (c[n][d] - c[idx][d]);
                    g[n][d] += diff;
                    g[idx][d] -= diff;
                }
            }
        }
        // Point term through the implicit relation h(p*) = m.
        let mut pull = vec![Vec3::<f64>::zero(); points.len()];
        for (j, s) in self.scene.iter().enumerate() {
            let s = s.cast::<f64>();
            for (i, &v) in w.row(j).iter().enumerate() {
                if v != 0.0 {
                    pull[i] += (points[i] - s) * (2.0 * v);
                }
            }
        }
        for (p, gp) in points.iter().zip(&pull) {
            if gp.norm_squared() == 0.0 {
                continue;
            }
            let (_, jac) = self.spline.local_eval(p.cast());
            let Some(ji) = jac.inverse() else { continue };
            let v = -ji.transpose().mul_vec(*gp);
            let [wx, wy, wz] = self.spline.local(p.cast(), false);
            for (cc, &bz) in wz.w.iter().enumerate() {
                for (b, &by) in wy.w.iter().enumerate() {
                    let row = self.spline.index(wx.start, wy.start + b, wz.start + cc);
                    for (a, &bx) in wx.w.iter().enumerate() {
                        let wgt = bx * by * bz;
                        let o = &mut g[row + a];
                        for d in 0..3 {
                            o[d] += wgt * v[d];
                        }
                    }
                }
            }
        }
        g
    }

    /// Diagonal Gauss-Newton approximation used as a preconditioner.
    fn diagonal(&self, points: &[Vec3<f64>], w: &HybridWeights) -> Vec<f64> {
        let dims = self.spline.lattice_dims;
        let gd: [Vec<f64>; 3] = std::array::from_fn(|a| (0..dims[a]).map(|k| self.gram[a][(k, k)]).collect());
        let mut diag = vec![0.0; self.spline.len()];
        for (idx, d) in diag.iter_mut().enumerate() {
            let pos = [idx % dims[0], (idx / dims[0]) % dims[1], idx / (dims[0] * dims[1])];
            *d = 2.0 * self.coupling_scale * gd[0][pos[0]] * gd[1][pos[1]] * gd[2][pos[2]];
            for a in 0..3 {
                let nbrs = (pos[a] > 0) as usize + (pos[a] + 1 < dims[a]) as usize;
                *d += 2.0 * self.smooth_scale[a] * nbrs as f64;
            }
        }
        let mut mass = vec![0.0; points.len()];
        for j in 0..w.rows {
            for (i, &v) in w.row(j).iter().enumerate() {
                mass[i] += v;
            }
        }
        for (p, &mi) in points.iter().zip(&mass) {
            if mi == 0.0 {
                continue;
            }
            let [wx, wy, wz] = self.spline.local(p.cast(), false);
            for (cc, &bz) in wz.w.iter().enumerate() {
                for (b, &by) in wy.w.iter().enumerate() {
                    let row = self.spline.index(wx.start, wy.start + b, wz.start + cc);
                    for (a, &bx) in wx.w.iter().enumerate() {
                        let wgt = bx * by * bz;
                        diag[row + a] += 2.0 * mi * wgt * wgt;
                    }
                }
            }
        }
        let floor = diag.iter().cloned().fold(0.0, f64::max) * 1e-9;
        diag.iter().map(|&d| d.max(floor).max(1e-300)).collect()
    }
}

/// The E2 objective over the spline coefficients, for fixed weights.
///
/// Exposes the cost and analytic gradient that [`minimize_e2`] descends.
pub struct E2Objective<'a, T> {
    problem: Problem<'a, T>,
    projection: Vec<[f64; 3]>,
}

impl<'a, T: Real> E2Objective<'a, T> {
    pub fn new(h_i: &DisplacementField<T>, model: &PointSet<T>, scene: &'a PointSet<T>, beta: f64, cfg: &SplineConfig) -> Result<Self> {
        let (problem, projection) = Problem::build(h_i, model, scene, beta, cfg)?;
        Ok(E2Objective { problem, projection })
    }

    /// Coefficients of the projection of `h_I` onto the spline space.
    pub fn projection(&self) -> &[[f64; 3]] {
        &self.projection
    }

    pub fn len(&self) -> usize {
        self.projection.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projection.is_empty()
    }

    pub fn lattice(&self) -> &SplineTransform<T> {
        &self.problem.spline
    }

    /// `C(c)`, or `None` when a model point cannot be inverted.
    pub fn cost(&mut self, c: &[[f64; 3]], w: &HybridWeights) -> Option<f64> {
        let start = self.problem.model.clone();
        self.problem.evaluate(c, &start, w).map(|e| e.cost())
    }

    pub fn gradient(&mut self, c: &[[f64; 3]], w: &HybridWeights) -> Option<Vec<[f64; 3]>> {
        let start = self.problem.model.clone();
        let e = self.problem.evaluate(c, &start, w)?;
        Some(self.problem.gradient(c, &e.points, w))
    }
}

/// Minimizes `C` over the spline coefficients, starting from the projection of `h_I`
/// onto the spline space.
///
/// `model` holds the original model points `m_i`; `init_points` optionally warm-starts
/// their inversion. Weights are refreshed from `weights` once per outer step.
pub fn minimize_e2<T: Real>(
    h_i: &DisplacementField<T>,
    model: &PointSet<T>,
    scene: &PointSet<T>,
    weights: &mut dyn WeightModel<T>,
    beta: f64,
    init_points: Option<&PointSet<T>>,
    cfg: &SplineConfig,
) -> Result<E2Result<T>> {
    if beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be nonnegative".into()));
    }
    if !scene.is_empty() && model.is_empty() {
        return Err(Error::Empty("scene points need at least one model point".into()));
    }
    if scene.is_empty() && beta == 0.0 {
        return Err(Error::InvalidArgument("with no scene points beta must be positive".into()));
    }
    if let Some(p) = init_points {
        if p.len() != model.len() {
            return Err(Error::DimensionMismatch("initial model points do not match the model".into()));
        }
    }
    let geom = h_i.geom;
    let (mut problem, mut c) = Problem::build(h_i, model, scene, beta, cfg)?;
    let start: Vec<Vec3<f64>> = match init_points {
        Some(p) => p.iter().map(|v| v.cast()).collect(),
        None => problem.model.clone(),
    };
    let mut current = match problem.evaluate(&c, &start, &HybridWeights::zeros(scene.len(), model.len())) {
        Some(e) => e,
        None => {
            // The projection folds somewhere near a model point; fall back to the identity spline.
            c.iter_mut().for_each(|v| *v = [0.0; 3]);
            problem
                .evaluate(&c, &problem.model.clone(), &HybridWeights::zeros(scene.len(), model.len()))
                .ok_or_else(|| Error::Degenerate("model point inversion failed for the identity spline".into()))?
        }
    };
    let to_set = |v: &[Vec3<f64>]| PointSet::new(v.iter().map(|p| p.cast::<T>()).collect());
    let mut w = weights.weights(&to_set(&current.points)?, scene)?;
    w.check(model.len(), scene.len())?;
    current = problem.evaluate(&c, &current.points.clone(), &w).expect("same coefficients invert");
    let mut trace = vec![E2Iterate {
        cost: current.cost(),
        geometric: current.parts[0],
        coupling: current.parts[1],
        smoothness: current.parts[2],
        step: 0.0,
    }];
    let mut alpha = 1.0f64;
    let mut converged = false;
    for iter in 0..cfg.max_iters {
        if iter > 0 {
            w = weights.weights(&to_set(&current.points)?, scene)?;
            w.check(model.len(), scene.len())?;
            current = problem.evaluate(&c, &current.points.clone(), &w).expect("same coefficients invert");
        }
        let g = problem.gradient(&c, &current.points, &w);
        let diag = problem.diagonal(&current.points, &w);
        let dir: Vec<[f64; 3]> = g.iter().zip(&diag).map(|(gv, &d)| [-gv[0] / d, -gv[1] / d, -gv[2] / d]).collect();
        let slope: f64 = g.iter().zip(&dir).map(|(a, b)| a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).sum();
        if !(slope < 0.0) {
            converged = true;
            break;
        }
        let base = current.cost();
        let mut accepted = None;
        alpha = (alpha * 2.0).min(4.0);
        while alpha > 1e-10 {
            let trial: Vec<[f64; 3]> = c
                .iter()
                .zip(&dir)
                .map(|(a, d)| [a[0] + alpha * d[0], a[1] + alpha * d[1], a[2] + alpha * d[2]])
                .collect();
            if let Some(e) = problem.evaluate(&trial, &current.points, &w) {
                if e.cost() <= base + 1e-4 * alpha * slope {
                    accepted = Some((trial, e));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, e)) = accepted else {
            problem.set(&c);
            converged = true;
            break;
        };
        c = trial;
        current = e;
        trace.push(E2Iterate {
            cost: current.cost(),
            geometric: current.parts[0],
            coupling: current.parts[1],
            smoothness: current.parts[2],
            step: alpha,
        });
        if base - current.cost() <= cfg.tol * base.abs().max(1e-300) {
            converged = true;
            break;
        }
    }
    problem.set(&c);
    let field_data = problem.bases.synthesize(&c);
    let field = DisplacementField { geom, data: field_data.into_iter().map(Vec3::from_f64).collect() };
    Ok(E2Result {
        spline: problem.spline,
        field,
        model_points: to_set(&current.points)?,
        weights: w,
        trace,
        converged,
        inversion_residual: current.residual,
    })
}

pub fn write_spline<T: Real>(path: &Path, s: &SplineTransform<T>) -> Result<()> {
    let d = s.lattice_dims;
    let sp = s.lattice_spacing;
    let o = s.lattice_origin;
    let header = [
        ("dims", format!("{} {} {}", d[0], d[1], d[2])),
        ("spacing", format!("{} {} {}", sp[0], sp[1], sp[2])),
        ("origin", format!("{} {} {}", o[0], o[1], o[2])),
        ("degree", s.degree.to_string()),
        ("type", "float32".to_string()),
        ("components", "3".to_string()),
    ];
    let values: Vec<f32> = s.coeffs.iter().flat_map(|v| v.0.map(|x| x.f64() as f32)).collect();
    write_raw(path, SPLINE_MAGIC, &header, &values)
}

pub fn read_spline<T: Real>(path: &Path) -> Result<SplineTransform<T>> {
    let raw = read_raw(path)?;
    if raw.magic != SPLINE_MAGIC {
        return Err(Error::Parse(format!("{}: not a spline file", path.display())));
    }
    let g = raw.geometry::<T>()?;
    let degree = raw.usizes("degree")?.first().copied().ok_or_else(|| Error::Parse("missing degree".into()))?;
    let mut s = SplineTransform::new(g.dims, g.spacing, g.origin, degree)?;
    if raw.values.len() != 3 * s.len() {
        return Err(Error::Parse(format!("{}: expected {} floats", path.display(), 3 * s.len())));
    }
    s.coeffs = raw.values.chunks_exact(3).map(|c| Vec3::from_f64([c[0] as f64, c[1] as f64, c[2] as f64])).collect();
    Ok(s)
}
