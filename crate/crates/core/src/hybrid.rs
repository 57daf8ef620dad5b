//! Alternation between intensity registration (E1) and geometric registration (E2).
//!
//! 1. `h = h^I = h_init` (identity unless a prior transform is given).
//! 2. Minimize E1 over `h^I` starting from `h`.
//! 3. Minimize E2 over the spline `h`, refreshing the weights from `h⁻¹(m_i)`.
//! 4. Hand `h` back to step 2 until `E1 + E2` stops changing.

use std::io::Write;

use crate::bspline::{minimize_e2, FixedWeights, HybridWeights, SplineConfig, SplineTransform, WeightModel};
use crate::correspondence::{IcpWeights, PosteriorWeights, RegionPriors, SigmaSchedule};
use crate::grid::{DisplacementField, PointSet, ScalarVolume};
use crate::intensity_reg::{register_fluid_elastic, ssd, FluidElasticConfig};
use crate::settings;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorrespondenceMode {
    HardIcp,
    Posterior,
}

impl std::str::FromStr for CorrespondenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hard_icp" | "icp" => Ok(CorrespondenceMode::HardIcp),
            "posterior" => Ok(CorrespondenceMode::Posterior),
            _ => Err(Error::Parse(format!("unknown correspondence mode `{s}`"))),
        }
    }
}

impl std::fmt::Display for CorrespondenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CorrespondenceMode::HardIcp => "hard_icp",
            CorrespondenceMode::Posterior => "posterior",
        })
    }
}

impl crate::config::ConfigValue for CorrespondenceMode {
    fn parse_value(s: &str) -> Result<Self> {
        s.parse()
    }
    fn render(&self) -> String {
        self.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HybridConfig {
    /// Weight of `‖h^I − h‖²` per mm³.
    pub beta: f64,
    pub max_alternations: usize,
    pub convergence_tol: f64,
    pub mode: CorrespondenceMode,
    /// Iteration cap for E1 after the first alternation; `None` keeps `fluid.max_iters`.
    pub later_e1_max_iters: Option<usize>,
    /// Run the image pyramid in every alternation instead of only the first.
    pub later_pyramid: bool,
    pub fluid: FluidElasticConfig,
    pub spline: SplineConfig,
    pub sigma: SigmaSchedule,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            beta: 1.0,
            max_alternations: 10,
            convergence_tol: 1e-3,
            mode: CorrespondenceMode::HardIcp,
            later_e1_max_iters: None,
            later_pyramid: false,
            fluid: FluidElasticConfig::default(),
            spline: SplineConfig::default(),
            sigma: SigmaSchedule::default(),
        }
    }
}

settings!(HybridConfig { beta, max_alternations, convergence_tol, mode, later_e1_max_iters, later_pyramid } nested { fluid, spline, sigma });

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0) || self.max_alternations == 0 {
            return Err(Error::InvalidArgument("hybrid registration needs beta ≥ 0 and at least one alternation".into()));
        }
        self.fluid.validate()?;
        self.sigma.validate()
    }
}

/// One alternation of the hybrid loop.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridIterate {
    pub alternation: usize,
    /// SSD of `T∘h` at the start of the E1 solve.
    pub e1_initial: f64,
    /// SSD of `T∘h^I` after E1.
    pub e1: f64,
    pub e1_iterations: usize,
    /// Final E2 cost (geometric + coupling + smoothness).
    pub e2: f64,
    pub e2_geometric: f64,
    pub e2_iterations: usize,
    /// E2 costs within this solve, in order.
    pub e2_trace: Vec<f64>,
    /// SSD of `T∘h` after E2.
    pub ssd_after_e2: f64,
    /// Largest `‖u‖` of `h` (mm).
    pub max_displacement: f64,
    pub weight_entropy: f64,
    pub sigma_m: f64,
    /// `sqrt(Σ_i w_ij ‖h⁻¹(m_i) − s_j‖²)` per scene point.
    pub seed_residuals: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HybridResult<T> {
    pub field: DisplacementField<T>,
    pub spline: SplineTransform<T>,
    /// `h⁻¹(m_i)`.
    pub model_points: PointSet<T>,
    pub weights: HybridWeights,
    pub trace: Vec<HybridIterate>,
    pub converged: bool,
}

/// Registers template `t` to reference `r`; `model` lives in `t`'s frame and `scene` in `r`'s.
pub fn register_hybrid<T: Real>(
    t: &ScalarVolume<T>,
    r: &ScalarVolume<T>,
    model: &PointSet<T>,
    scene: &PointSet<T>,
    priors: Option<&RegionPriors>,
    h_init: Option<&DisplacementField<T>>,
    cfg: &HybridConfig,
) -> Result<HybridResult<T>> {
    cfg.validate()?;
    if cfg.mode == CorrespondenceMode::Posterior && priors.is_none() && !scene.is_empty() {
        return Err(Error::InvalidArgument("posterior correspondence needs region priors".into()));
    }
    let mut h = match h_init {
        Some(f) => {
            r.geom.check_same(&f.geom, "initial transform must live on the reference grid")?;
            f.clone()
        }
        None => DisplacementField::identity(r.geom),
    };
    let mut points: Option<PointSet<T>> = None;
    let mut trace: Vec<HybridIterate> = Vec::new();
    let mut converged = false;
    let mut last = None;
    let mut fitted = None;
    for k in 0..cfg.max_alternations {
        let mut fluid = cfg.fluid.clone();
        if k > 0 {
            fluid.max_iters = cfg.later_e1_max_iters.unwrap_or(fluid.max_iters);
            if !cfg.later_pyramid {
                fluid.pyramid_levels = 1;
            }
        }
        let e1 = register_fluid_elastic(t, r, &h, &fluid)?;
        let sigma_m = cfg.sigma.at(k);
        let mut weights: Box<dyn WeightModel<T> + '_> = if scene.is_empty() {
            Box::new(FixedWeights(HybridWeights::zeros(0, model.len())))
        } else {
            match (cfg.mode, priors) {
                (CorrespondenceMode::Posterior, Some(p)) => Box::new(PosteriorWeights { priors: p, sigma_m }),
                _ => Box::new(IcpWeights),
            }
        };
        let e2 = minimize_e2(&e1.field, model, scene, weights.as_mut(), cfg.beta, points.as_ref(), &cfg.spline)?;
        h = e2.field;
        let ssd_after = ssd(t, r, &h)?.f64();
        let fin = e2.trace.last().expect("trace has the initial cost");
        let seed_residuals = (0..scene.len())
            .map(|j| {
                let s = scene.points[j].cast::<f64>();
                e2.weights
                    .row(j)
                    .iter()
                    .zip(e2.model_points.iter())
                    .map(|(&w, m)| w * (m.cast::<f64>() - s).norm_squared())
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        trace.push(HybridIterate {
            alternation: k,
            e1_initial: e1.initial_ssd,
            e1: e1.final_ssd,
            e1_iterations: e1.iterations,
            e2: fin.cost,
            e2_geometric: fin.geometric,
            e2_iterations: e2.trace.len() - 1,
            e2_trace: e2.trace.iter().map(|it| it.cost).collect(),
            ssd_after_e2: ssd_after,
            max_displacement: h.max_norm().f64(),
            weight_entropy: e2.weights.mean_entropy(),
            sigma_m,
            seed_residuals,
        });
        points = Some(e2.model_points);
        let total = e1.final_ssd + fin.cost;
        let done = last.is_some_and(|prev: f64| (prev - total).abs() <= cfg.convergence_tol * prev.abs().max(1e-300));
        last = Some(total);
        fitted = Some((e2.spline, e2.weights));
        if done {
            converged = true;
            break;
        }
    }
    let (spline, weights) = fitted.ok_or_else(|| Error::InvalidArgument("max_alternations must be at least 1".into()))?;
    let model_points = points.unwrap_or_default();
    Ok(HybridResult { field: h, spline, model_points, weights, trace, converged })
}

/// Writes the trace as comma-separated lines with a header.
pub fn write_trace(mut w: impl Write, trace: &[HybridIterate]) -> Result<()> {
    let seeds = trace.first().map_or(0, |t| t.seed_residuals.len());
    write!(w, "alternation,e1_initial,e1,e1_iterations,e2,e2_geometric,e2_iterations,ssd_after_e2,max_displacement,weight_entropy,sigma_m")?;
    for j in 0..seeds {
        write!(w, ",residual_{j}")?;
    }
    writeln!(w)?;
    for t in trace {
        write!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            t.alternation,
            t.e1_initial,
            t.e1,
            t.e1_iterations,
            t.e2,
            t.e2_geometric,
            t.e2_iterations,
            t.ssd_after_e2,
            t.max_displacement,
            t.weight_entropy,
            t.sigma_m
        )?;
        for r in &t.seed_residuals {
            write!(w, ",{r}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Geometry, Vec3};

    fn blob(g: Geometry<f64>, c: Vec3<f64>) -> ScalarVolume<f64> {
        ScalarVolume::from_fn(g, |x: Vec3<f64>| 100.0 * (-(x - c).norm_squared() / 18.0).exp())
    }

    fn quick() -> HybridConfig {
        let mut cfg = HybridConfig { max_alternations: 3, ..Default::default() };
        cfg.fluid.max_iters = 30;
        cfg.fluid.pyramid_levels = 1;
        cfg.spline.control_spacing = 4.0;
        cfg
    }

    #[test]
    fn identical_images_with_matched_points_stay_at_identity() {
        let g = Geometry::cube(20, 1.0);
        let t = blob(g, Vec3::splat(9.5));
        let pts = PointSet::new(vec![Vec3::new(9.5, 6.5, 9.5), Vec3::new(9.5, 12.5, 9.5)]).unwrap();
        let res = register_hybrid(&t, &t, &pts, &pts, None, None, &quick()).unwrap();
        assert!(res.field.max_norm() < 0.2);
    }

    #[test]
    fn without_scene_points_matches_the_manual_pipeline() {
        let g = Geometry::cube(20, 1.0);
        let t = blob(g, Vec3::splat(9.0));
        let r = blob(g, Vec3::new(10.0, 9.5, 9.0));
        let mut cfg = quick();
        cfg.max_alternations = 1;
        let empty = PointSet::new(vec![]).unwrap();
        let res = register_hybrid(&t, &r, &empty, &empty, None, None, &cfg).unwrap();
        let e1 = register_fluid_elastic(&t, &r, &DisplacementField::identity(g), &cfg.fluid).unwrap();
        let mut none = FixedWeights(HybridWeights::zeros(0, 0));
        let e2 = minimize_e2(&e1.field, &empty, &empty, &mut none, cfg.beta, None, &cfg.spline).unwrap();
        let diff = res.field.data.iter().zip(&e2.field.data).map(|(a, b)| (*a - *b).norm()).fold(0.0, f64::max);
        assert!(diff < 1e-6);
    }

    #[test]
    fn alternations_hand_over_the_spline_field() {
        let g = Geometry::cube(20, 1.0);
        let t = blob(g, Vec3::splat(9.0));
        let r = blob(g, Vec3::new(10.5, 9.0, 9.0));
        let model = PointSet::new(vec![Vec3::new(9.0, 9.0, 5.0)]).unwrap();
        let scene = PointSet::new(vec![Vec3::new(10.5, 9.0, 5.0)]).unwrap();
        let mut cfg = quick();
        cfg.convergence_tol = 0.0;
        cfg.beta = 0.05;
        let res = register_hybrid(&t, &r, &model, &scene, None, None, &cfg).unwrap();
        assert_eq!(res.trace.len(), 3);
        for w in res.trace.windows(2) {
            assert_eq!(w[1].e1_initial, w[0].ssd_after_e2);
        }
        for it in &res.trace {
            assert!(it.e2_trace.windows(2).all(|c| c[1] <= c[0]));
        }
        assert!(res.trace.last().unwrap().seed_residuals[0] < 1.0);
        let mut out = Vec::new();
        write_trace(&mut out, &res.trace).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("alternation,") && text.lines().next().unwrap().ends_with("residual_0"));
    }

    #[test]
    fn posterior_mode_requires_priors() {
        let g = Geometry::cube(8, 1.0);
        let t = blob(g, Vec3::splat(4.0));
        let p = PointSet::new(vec![Vec3::splat(4.0)]).unwrap();
        let cfg = HybridConfig { mode: CorrespondenceMode::Posterior, ..quick() };
        assert!(register_hybrid(&t, &t, &p, &p, None, None, &cfg).is_err());
    }
}
