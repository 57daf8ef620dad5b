//! Atlas-based segmentation of a study image from two seed points, and evaluation metrics.

use crate::atlas::Atlas;
use crate::correspondence::RegionPriors;
use crate::grid::{closest_point_on_triangle, DisplacementField, PointSet, ScalarVolume, SurfaceMesh, Vec3};
use crate::hybrid::{register_hybrid, CorrespondenceMode, HybridConfig, HybridIterate};
use crate::preprocess::{register_rigid, RigidConfig, RigidTransform};
use crate::settings;
use crate::shape::{project_shape, ShapeCoefficients, ShapeModel};
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentConfig {
    pub rigid: RigidConfig,
    pub hybrid: HybridConfig,
    /// Skip the rigid initialization (identity start).
    pub skip_rigid: bool,
    /// Apply the shape model to the warped contour.
    pub use_shape_model: bool,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        let mut hybrid = HybridConfig {
            beta: 0.002,
            mode: CorrespondenceMode::Posterior,
            max_alternations: 3,
            later_e1_max_iters: Some(15),
            ..Default::default()
        };
        hybrid.sigma.initial = 50.0;
        SegmentConfig { rigid: RigidConfig::default(), hybrid, skip_rigid: false, use_shape_model: true }
    }
}

settings!(SegmentConfig { skip_rigid, use_shape_model } nested { rigid, hybrid });

#[derive(Clone, Debug)]
pub struct SegmentationResult<T> {
    pub surface: SurfaceMesh<T>,
    /// Warped atlas contour before the shape model.
    pub raw_surface: SurfaceMesh<T>,
    pub label_volume: ScalarVolume<T>,
    pub field: DisplacementField<T>,
    pub rigid: RigidTransform<T>,
    pub coefficients: Option<ShapeCoefficients>,
    pub trace: Vec<HybridIterate>,
    pub converged: bool,
    pub rigid_diverged: bool,
}

/// Rigid then hybrid registration of the atlas onto `study`, guided by the two seeds.
pub fn segment<T: Real>(
    atlas: &Atlas<T>,
    study: &ScalarVolume<T>,
    seed_base: Vec3<T>,
    seed_apex: Vec3<T>,
    shape_model: Option<&ShapeModel>,
    cfg: &SegmentConfig,
) -> Result<SegmentationResult<T>> {
    let g = study.geom;
    if !g.contains(seed_base) || !g.contains(seed_apex) {
        return Err(Error::Precondition("seed points must lie inside the study image".into()));
    }
    let priors: &RegionPriors = atlas
        .region_priors
        .as_ref()
        .ok_or_else(|| Error::Precondition("the atlas has no region priors".into()))?;
    if priors.pi.rows != 2 || priors.pi.cols != atlas.surface.vertices.len() {
        return Err(Error::DimensionMismatch("atlas priors do not match its surface".into()));
    }
    let (rigid, rigid_diverged) = if cfg.skip_rigid {
        (RigidTransform::identity(g.center()), false)
    } else {
        let r = register_rigid(&atlas.mean_image, study, &cfg.rigid)?;
        (r.transform, r.diverged)
    };
    let h0 = rigid.to_field(g);
    let scene = PointSet::new(vec![seed_base, seed_apex])?;
    let mut hybrid = cfg.hybrid.clone();
    hybrid.mode = CorrespondenceMode::Posterior;
    let res = register_hybrid(&atlas.mean_image, study, &atlas.surface.vertices, &scene, Some(priors), Some(&h0), &hybrid)?;
    let raw_surface = atlas.surface.with_vertices(res.model_points.clone())?;
    let (surface, coefficients) = match shape_model.filter(|_| cfg.use_shape_model) {
        Some(m) => {
            let (pts, b) = project_shape(m, &res.model_points)?;
            (atlas.surface.with_vertices(pts)?, Some(b))
        }
        None => (raw_surface.clone(), None),
    };
    let label_volume = surface.voxelize(&g);
    Ok(SegmentationResult {
        surface,
        raw_surface,
        label_volume,
        field: res.field,
        rigid,
        coefficients,
        trace: res.trace,
        converged: res.converged,
        rigid_diverged,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolumeMetrics {
    pub sens: f64,
    pub ppv: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Voxel-count sensitivity `TP/(TP+FN)` and positive predictive value `TP/(TP+FP)`.
pub fn volume_metrics<T: Real>(auto: &ScalarVolume<T>, truth: &ScalarVolume<T>) -> Result<VolumeMetrics> {
    auto.geom.check_same(&truth.geom, "volume metrics")?;
    let half = T::of(0.5);
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&a, &t) in auto.data.iter().zip(&truth.data) {
        match (a > half, t > half) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp + fn_ == 0 {
        return Err(Error::Undefined("sensitivity of an empty truth mask".into()));
    }
    if tp + fp == 0 {
        return Err(Error::Undefined("positive predictive value of an empty segmentation".into()));
    }
    Ok(VolumeMetrics {
        sens: tp as f64 / (tp + fn_) as f64,
        ppv: tp as f64 / (tp + fp) as f64,
        tp,
        fp,
        fn_,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZoneStat {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl ZoneStat {
    fn of(d: &[f64]) -> Self {
        if d.is_empty() {
            return ZoneStat::default();
        }
        let n = d.len() as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        ZoneStat { mean, std: var.sqrt(), count: d.len() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ZoneMetrics {
    pub base: ZoneStat,
    pub central: ZoneStat,
    pub apex: ZoneStat,
    pub all: ZoneStat,
}

impl ZoneMetrics {
    pub fn zones(&self) -> [(&'static str, ZoneStat); 4] {
        [("base", self.base), ("central", self.central), ("apex", self.apex), ("all", self.all)]
    }
}

/// Distance from `p` to the nearest point of `mesh`.
pub fn point_mesh_distance<T: Real>(p: Vec3<T>, mesh: &SurfaceMesh<T>) -> f64 {
    (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.triangle(f);
            (closest_point_on_triangle(p, a, b, c) - p).norm().f64()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Zone index (0 base, 1 central, 2 apex) of a projection `t` on the truth extent `[lo, hi]`.
fn zone_of(t: f64, lo: f64, hi: f64) -> usize {
    ((3.0 * (t - lo) / (hi - lo)).floor().max(0.0) as usize).min(2)
}

fn truth_extent<T: Real>(truth: &SurfaceMesh<T>, axis: Vec3<f64>) -> Result<(f64, f64)> {
    if truth.faces.is_empty() || truth.vertices.is_empty() {
        return Err(Error::Degenerate("truth mesh has no faces".into()));
    }
    let (lo, hi) = truth
        .vertices
        .iter()
        .map(|v| v.cast::<f64>().dot(axis))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    if !(hi > lo) {
        return Err(Error::Degenerate("truth mesh has no extent along the axis".into()));
    }
    Ok((lo, hi))
}

fn unit_axis<T: Real>(axis: Vec3<T>) -> Result<Vec3<f64>> {
    let a = axis.cast::<f64>();
    let n = a.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::InvalidArgument("zone axis must be a nonzero vector".into()));
    }
    Ok(a / n)
}

/// Auto→truth vertex distances binned into base/central/apex thirds along `axis`
/// (pointing from base to apex) over the truth's extent.
pub fn zone_distance_metrics<T: Real>(auto: &SurfaceMesh<T>, truth: &SurfaceMesh<T>, axis: Vec3<T>) -> Result<ZoneMetrics> {
    if auto.vertices.is_empty() {
        return Err(Error::Empty("segmentation mesh has no vertices".into()));
    }
    let axis = unit_axis(axis)?;
    let (lo, hi) = truth_extent(truth, axis)?;
    let mut bins: [Vec<f64>; 3] = Default::default();
    for v in auto.vertices.iter() {
        bins[zone_of(v.cast::<f64>().dot(axis), lo, hi)].push(point_mesh_distance(*v, truth));
    }
    Ok(collect(bins))
}

/// Both directions pooled: auto→truth and truth→auto distances, zoned by the truth's extent.
pub fn zone_distance_metrics_symmetric<T: Real>(auto: &SurfaceMesh<T>, truth: &SurfaceMesh<T>, axis: Vec3<T>) -> Result<ZoneMetrics> {
    let fwd = unit_axis(axis)?;
    let (lo, hi) = truth_extent(truth, fwd)?;
    if auto.faces.is_empty() {
        return Err(Error::Degenerate("segmentation mesh has no faces".into()));
    }
    let mut bins: [Vec<f64>; 3] = Default::default();
    for v in auto.vertices.iter() {
        bins[zone_of(v.cast::<f64>().dot(fwd), lo, hi)].push(point_mesh_distance(*v, truth));
    }
    for v in truth.vertices.iter() {
        bins[zone_of(v.cast::<f64>().dot(fwd), lo, hi)].push(point_mesh_distance(*v, auto));
    }
    Ok(collect(bins))
}

fn collect(bins: [Vec<f64>; 3]) -> ZoneMetrics {
    let all: Vec<f64> = bins.iter().flatten().copied().collect();
    ZoneMetrics { base: ZoneStat::of(&bins[0]), central: ZoneStat::of(&bins[1]), apex: ZoneStat::of(&bins[2]), all: ZoneStat::of(&all) }
}

/// Line-oriented `key=value` report.
pub fn metrics_report(volume: Option<&VolumeMetrics>, zones: Option<&ZoneMetrics>) -> String {
    let mut out = String::new();
    if let Some(v) = volume {
        out.push_str(&format!("sens={}\nppv={}\ntp={}\nfp={}\nfn={}\n", v.sens, v.ppv, v.tp, v.fp, v.fn_));
    }
    if let Some(z) = zones {
        for (name, s) in z.zones() {
            out.push_str(&format!("zone.{name}.mean={}\nzone.{name}.std={}\nzone.{name}.count={}\n", s.mean, s.std, s.count));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Geometry;
    use crate::synth::icosphere;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(r: f64, level: usize) -> SurfaceMesh<f64> {
        let (v, f) = icosphere(level);
        SurfaceMesh::new(PointSet::new(v.into_iter().map(|p| p * r).collect()).unwrap(), f).unwrap()
    }

    fn mask(g: Geometry<f64>, bits: &[bool]) -> ScalarVolume<f64> {
        ScalarVolume::new(g, bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    #[test]
    fn volume_metric_counting() {
        let g = Geometry::cube(4, 1.0);
        let truth = mask(g, &(0..64).map(|i| i < 8).collect::<Vec<_>>());
        let m = volume_metrics(&truth, &truth).unwrap();
        assert_eq!((m.sens, m.ppv), (1.0, 1.0));
        let more = mask(g, &(0..64).map(|i| i < 8 || i >= 56).collect::<Vec<_>>());
        let m = volume_metrics(&more, &truth).unwrap();
        assert_eq!((m.sens, m.ppv), (1.0, 0.5));
        let empty = ScalarVolume::filled(g, 0.0);
        assert!(volume_metrics(&truth, &empty).is_err());
        assert!(volume_metrics(&empty, &truth).is_err());
    }

    #[test]
    fn identical_meshes_have_zero_distance() {
        let s = sphere(10.0, 2);
        let z = zone_distance_metrics(&s, &s, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        for (_, st) in z.zones() {
            assert!(st.mean < 1e-9 && st.std < 1e-9);
        }
        assert_eq!(z.all.count, s.vertices.len());
    }

    #[test]
    fn dilated_sphere_is_two_millimetres_away() {
        let truth = sphere(10.0, 3);
        let auto = sphere(12.0, 3);
        let z = zone_distance_metrics(&auto, &truth, Vec3::new(0.0, 1.0, 0.0)).unwrap();
        for (name, st) in z.zones() {
            assert!((st.mean - 2.0).abs() < 0.1, "{name}: {}", st.mean);
        }
        let w = (z.base.mean * z.base.count as f64 + z.central.mean * z.central.count as f64 + z.apex.mean * z.apex.count as f64)
            / z.all.count as f64;
        assert!((w - z.all.mean).abs() < 1e-9);
    }

    #[test]
    fn single_triangle_distance() {
        let tri = SurfaceMesh::new(PointSet::new(vec![Vec3::new(0.0, 0.0, 0.0), Vec3::new(4.0, 0.0, 0.0), Vec3::new(0.0, 3.0, 0.0)]).unwrap(), vec![[0, 1, 2]]).unwrap();
        // Above the interior, beyond the hypotenuse, and past a vertex.
        assert!((point_mesh_distance(Vec3::new(1.0, 1.0, 2.5), &tri) - 2.5).abs() < 1e-12);
        let d = point_mesh_distance(Vec3::new(4.0, 3.0, 0.0), &tri);
        assert!((d - 12.0 / 5.0).abs() < 1e-12);
        assert!((point_mesh_distance(Vec3::new(-3.0, -4.0, 0.0), &tri) - 5.0).abs() < 1e-12);
        let flat = SurfaceMesh::new(tri.vertices.clone(), vec![]).unwrap();
        assert!(zone_distance_metrics(&tri, &flat, Vec3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn report_lists_every_metric() {
        let s = sphere(5.0, 1);
        let z = zone_distance_metrics(&s, &s, Vec3::new(1.0, 0.0, 0.0)).unwrap();
        let v = VolumeMetrics { sens: 1.0, ppv: 0.5, tp: 1, fp: 1, fn_: 0 };
        let text = metrics_report(Some(&v), Some(&z));
        assert!(text.lines().all(|l| l.contains('=')));
        assert_eq!(text.lines().filter(|l| l.ends_with(".count=") || l.contains(".mean=")).count(), 4);
        assert!(text.contains("sens=1\n") && text.contains("ppv=0.5\n"));
    }

    proptest! {
        #[test]
        fn swapping_masks_swaps_sens_and_ppv(seed in 0u64..10_000) {
            let g = Geometry::cube(4, 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = mask(g, &(0..64).map(|_| rng.random_bool(0.4)).collect::<Vec<_>>());
            let b = mask(g, &(0..64).map(|_| rng.random_bool(0.4)).collect::<Vec<_>>());
            if let (Ok(x), Ok(y)) = (volume_metrics(&a, &b), volume_metrics(&b, &a)) {
                prop_assert_eq!(x.sens, y.ppv);
                prop_assert_eq!(x.ppv, y.sens);
            }
        }
    }
}
