//! Correspondence weights between model points `m_i` and scene points `s_j`.

use std::path::Path;

use crate::bspline::{HybridWeights, WeightModel};
use crate::grid::io::{read_matrix, write_matrix};
use crate::grid::PointSet;
use crate::settings;
use crate::{Error, Real, Result};

/// Kernel support in units of `kernel_sigma`; beyond it the prior weight is zero.
const KERNEL_CUTOFF: f64 = 4.0;

/// Nearest model point for every scene point (one-hot rows, ties to the lowest index).
pub fn icp_weights<T: Real>(model: &PointSet<T>, scene: &PointSet<T>) -> Result<HybridWeights> {
    if model.is_empty() {
        return Err(Error::Empty("ICP needs at least one model point".into()));
    }
    let picks: Vec<usize> = scene
        .iter()
        .map(|s| {
            let mut best = (0, f64::INFINITY);
            for (i, m) in model.iter().enumerate() {
                let d = (*m - *s).cast::<f64>().norm_squared();
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect();
    Ok(HybridWeights::one_hot(model.len(), &picks))
}

/// Prior match probabilities `π_ij` of seed region `j` against model point `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionPriors {
    pub pi: HybridWeights,
    pub region_centers: PointSet<f64>,
    pub kernel_sigma: f64,
}

/// `π_ij = G(m_i − d_j) / Σ_i G(m_i − d_j)` with a Gaussian `G` truncated at four sigmas.
pub fn region_priors<T: Real>(model: &PointSet<T>, centers: &PointSet<T>, kernel_sigma: f64) -> Result<RegionPriors> {
    if !(kernel_sigma > 0.0) || !kernel_sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("kernel sigma must be positive, got {kernel_sigma}")));
    }
    if model.is_empty() {
        return Err(Error::Empty("priors need at least one model point".into()));
    }
    let n = model.len();
    let mut w = Vec::with_capacity(n * centers.len());
    for d in centers.iter() {
        let d2: Vec<f64> = model.iter().map(|m| (*m - *d).cast::<f64>().norm_squared()).collect();
        let s2 = kernel_sigma * kernel_sigma;
        let cut = KERNEL_CUTOFF * KERNEL_CUTOFF * s2;
        let mut row: Vec<f64> = d2.iter().map(|&v| if v <= cut { (-v / (2.0 * s2)).exp() } else { 0.0 }).collect();
        let mut sum: f64 = row.iter().sum();
        if !(sum > 0.0) {
            // Nothing inside the support (or everything underflowed): use the full kernel.
            let lo = d2.iter().cloned().fold(f64::INFINITY, f64::min);
            row = d2.iter().map(|&v| (-(v - lo) / (2.0 * s2)).exp()).collect();
            sum = row.iter().sum();
        }
        w.extend(row.iter().map(|v| v / sum));
    }
    Ok(RegionPriors {
        pi: HybridWeights { rows: centers.len(), cols: n, w },
        region_centers: centers.cast(),
        kernel_sigma,
    })
}

/// `w_ij ∝ π_ij·exp(−‖s_j − m_i‖²/σ_m)`, normalized over `i`.
pub fn posterior_weights<T: Real>(
    model_current: &PointSet<T>,
    scene: &PointSet<T>,
    priors: &RegionPriors,
    sigma_m: f64,
) -> Result<HybridWeights> {
    if !(sigma_m > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma_m must be positive, got {sigma_m}")));
    }
    let (rows, cols) = (scene.len(), model_current.len());
    if priors.pi.rows != rows || priors.pi.cols != cols {
        return Err(Error::DimensionMismatch(format!(
            "priors are {}×{}, points need {rows}×{cols}",
            priors.pi.rows, priors.pi.cols
        )));
    }
    let mut w = Vec::with_capacity(rows * cols);
    for (j, s) in scene.iter().enumerate() {
        let d2: Vec<f64> = model_current.iter().map(|m| (*m - *s).cast::<f64>().norm_squared()).collect();
        w.extend(softmax_row(priors.pi.row(j), &d2, sigma_m));
    }
    Ok(HybridWeights { rows, cols, w })
}

fn softmax_row(prior: &[f64], d2: &[f64], sigma_m: f64) -> Vec<f64> {
    let logits: Vec<f64> = prior
        .iter()
        .zip(d2)
        .map(|(&p, &d)| if p > 0.0 { p.ln() - d / sigma_m } else { f64::NEG_INFINITY })
        .collect();
    let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY {
        // All-zero prior row: nothing can match, keep it uniform.
        return vec![1.0 / prior.len() as f64; prior.len()];
    }
    let e: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

pub fn write_priors(dir: &Path, priors: &RegionPriors) -> Result<()> {
    write_matrix(&dir.join("priors.mat"), priors.pi.rows, priors.pi.cols, &priors.pi.w)?;
    let centers: Vec<f64> = priors.region_centers.iter().flat_map(|p| p.0).collect();
    write_matrix(&dir.join("priors_centers.mat"), priors.region_centers.len(), 3, &centers)?;
    write_matrix(&dir.join("priors_sigma.mat"), 1, 1, &[priors.kernel_sigma])
}

pub fn read_priors(dir: &Path) -> Result<RegionPriors> {
    let (rows, cols, w) = read_matrix::<f64>(&dir.join("priors.mat"))?;
    let (n, three, c) = read_matrix::<f64>(&dir.join("priors_centers.mat"))?;
    if three != 3 || n != rows {
        return Err(Error::Parse("priors centers do not match the prior matrix".into()));
    }
    let (_, _, s) = read_matrix::<f64>(&dir.join("priors_sigma.mat"))?;
    let centers = PointSet::new(c.chunks_exact(3).map(|p| crate::grid::Vec3::new(p[0], p[1], p[2])).collect())?;
    Ok(RegionPriors {
        pi: HybridWeights::new(rows, cols, w)?,
        region_centers: centers,
        kernel_sigma: s.first().copied().ok_or_else(|| Error::Parse("missing kernel sigma".into()))?,
    })
}

/// Geometric decay `σ_m ← max(σ_m·decay, floor)` applied once per hybrid alternation.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    /// Initial `σ_m` in mm².
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        SigmaSchedule { initial: 50.0, decay: 0.95, floor: 2.0 }
    }
}

settings!(SigmaSchedule { initial, decay, floor });

impl SigmaSchedule {
    pub fn at(&self, alternation: usize) -> f64 {
        (self.initial * self.decay.powi(alternation as i32)).max(self.floor)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.floor > 0.0 && self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidArgument("sigma schedule needs initial, floor > 0 and decay in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Hard nearest-point assignment recomputed from the current model points.
pub struct IcpWeights;

impl<T: Real> WeightModel<T> for IcpWeights {
    fn weights(&mut self, model: &PointSet<T>, scene: &PointSet<T>) -> Result<HybridWeights> {
        icp_weights(model, scene)
    }
}

pub struct PosteriorWeights<'a> {
    pub priors: &'a RegionPriors,
    pub sigma_m: f64,
}

impl<T: Real> WeightModel<T> for PosteriorWeights<'_> {
    fn weights(&mut self, model: &PointSet<T>, scene: &PointSet<T>) -> Result<HybridWeights> {
        posterior_weights(model, scene, self.priors, self.sigma_m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Vec3;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[[f64; 3]]) -> PointSet<f64> {
        PointSet::new(v.iter().map(|p| Vec3(*p)).collect()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> PointSet<f64> {
        PointSet::new((0..n).map(|_| Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0))).collect()).unwrap()
    }

    #[test]
    fn icp_picks_coincident_and_breaks_ties_low() {
        let m = pts(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 5.0, 0.0], [3.0, 3.0, 3.0]]);
        let s = pts(&[[3.0, 3.0, 3.0], [0.0, 0.0, 0.0]]);
        let w = icp_weights(&m, &s).unwrap();
        assert_eq!(w.row(0), &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(w.row(1), &[1.0, 0.0, 0.0, 0.0]);
        assert!(icp_weights(&PointSet::new(vec![]).unwrap(), &s).is_err());
    }

    #[test]
    fn icp_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let m = random(&mut rng, 50);
        let s = random(&mut rng, 50);
        let w = icp_weights(&m, &s).unwrap();
        for j in 0..50 {
            let mut best = 0;
            for i in 1..50 {
                if (m.points[i] - s.points[j]).norm() < (m.points[best] - s.points[j]).norm() {
                    best = i;
                }
            }
            for i in 0..50 {
                assert_eq!(w.get(j, i), if i == best { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn priors_simple_cases() {
        let one = pts(&[[1.0, 2.0, 3.0]]);
        let c = pts(&[[10.0, 0.0, 0.0]]);
        assert_eq!(region_priors(&one, &c, 1.0).unwrap().pi.w, vec![1.0]);
        let two = pts(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let c0 = pts(&[[0.0, 0.0, 0.0]]);
        assert_eq!(region_priors(&two, &c0, 2.0).unwrap().pi.w, vec![0.5, 0.5]);
        assert!(region_priors(&two, &c0, 0.0).is_err());
        // Far outside the support the untruncated kernel takes over.
        let far = region_priors(&two, &pts(&[[100.0, 0.0, 0.0]]), 1.0).unwrap();
        assert!((far.pi.w[0] - 1.0).abs() < 1e-12 && far.pi.max_row_error() < 1e-12);
    }

    #[test]
    fn priors_match_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = PointSet::new((0..10).map(|_| Vec3::new(rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0))).collect()).unwrap();
        let c = pts(&[[0.5, -0.5, 1.0], [2.0, 2.0, -1.0]]);
        let p = region_priors(&m, &c, 5.0).unwrap();
        for j in 0..2 {
            let g: Vec<f64> = m.iter().map(|x| (-(*x - c.points[j]).norm_squared() / 50.0).exp()).collect();
            let z: f64 = g.iter().sum();
            for i in 0..10 {
                assert!((p.pi.get(j, i) - g[i] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_hand_values() {
        let m = pts(&[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, -3.0]]);
        let s = pts(&[[0.0, 0.0, 0.0]]);
        let uniform = RegionPriors { pi: HybridWeights::new(1, 3, vec![1.0 / 3.0; 3]).unwrap(), region_centers: s.clone(), kernel_sigma: 1.0 };
        let w = posterior_weights(&m, &s, &uniform, 4.0).unwrap();
        let e = [(-0.25f64).exp(), (-1.0f64).exp(), (-2.25f64).exp()];
        let z: f64 = e.iter().sum();
        for i in 0..3 {
            assert!((w.get(0, i) - e[i] / z).abs() < 1e-15);
        }
        let hot = RegionPriors { pi: HybridWeights::new(1, 3, vec![0.0, 0.0, 1.0]).unwrap(), ..uniform.clone() };
        assert_eq!(posterior_weights(&m, &s, &hot, 4.0).unwrap().w, vec![0.0, 0.0, 1.0]);
        let eq = pts(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let w = posterior_weights(&eq, &s, &uniform, 0.3).unwrap();
        assert!(w.w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        // Deep underflow still produces a probability row.
        let far = pts(&[[1e3, 0.0, 0.0], [0.0, 2e3, 0.0], [0.0, 0.0, 3e3]]);
        let w = posterior_weights(&far, &s, &uniform, 1e-3).unwrap();
        assert!(w.max_row_error() < 1e-12 && w.w[0] == 1.0);
    }

    #[test]
    fn sigma_schedule_decays_to_floor() {
        let s = SigmaSchedule { initial: 10.0, decay: 0.5, floor: 2.0 };
        assert_eq!(s.at(0), 10.0);
        assert_eq!(s.at(1), 5.0);
        assert_eq!(s.at(5), 2.0);
    }

    #[test]
    fn priors_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = pts(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let p = region_priors(&m, &pts(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), 0.7).unwrap();
        write_priors(dir.path(), &p).unwrap();
        let q = read_priors(dir.path()).unwrap();
        assert_eq!(q.pi.rows, 2);
        for (a, b) in p.pi.w.iter().zip(&q.pi.w) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn posterior_rows_are_shift_invariant_probabilities(seed in 0u64..1000, shift in 0.0f64..50.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(&mut rng, 7);
            let s = random(&mut rng, 3);
            let pr = region_priors(&m, &s, 6.0).unwrap();
            let w = posterior_weights(&m, &s, &pr, 8.0).unwrap();
            prop_assert!(w.max_row_error() < 1e-9);
            prop_assert!(w.w.iter().all(|&v| v >= 0.0));
            for j in 0..3 {
                let d2: Vec<f64> = m.iter().map(|x| (*x - s.points[j]).norm_squared()).collect();
                let shifted: Vec<f64> = d2.iter().map(|v| v + shift).collect();
                let a = softmax_row(pr.pi.row(j), &d2, 8.0);
                let b = softmax_row(pr.pi.row(j), &shifted, 8.0);
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn posterior_tends_to_icp(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = random(&mut rng, 9);
            let s = random(&mut rng, 4);
            let uniform = RegionPriors { pi: HybridWeights::new(4, 9, vec![1.0 / 9.0; 36]).unwrap(), region_centers: s.clone(), kernel_sigma: 1.0 };
            let w = posterior_weights(&m, &s, &uniform, 1e-6).unwrap();
            let icp = icp_weights(&m, &s).unwrap();
            for (a, b) in w.w.iter().zip(&icp.w) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
