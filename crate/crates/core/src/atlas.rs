//! Iterative atlas construction from a population of images with expert contours.
//!
//! Every generation registers each individual `I_i` (template) to the current
//! reference `R`, which yields `h_i` with `I_i(h_i(x)) ≈ R(x)`. Since `h_i` maps
//! reference coordinates onto the individual, it is used directly as `T_i`. The
//! new reference is the voxel-wise mean of `I_i∘T_i`; the atlas contour stays the
//! contour of the initial reference individual.

use std::collections::HashMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{KeyValues, Settings};
use crate::correspondence::{read_priors, region_priors, write_priors, RegionPriors};
use crate::grid::io::{read_field, read_mesh, read_volume, write_field, write_mesh, write_volume};
use crate::grid::{DisplacementField, PointSet, ScalarVolume, SurfaceMesh, Vec3};
use crate::hybrid::{register_hybrid, CorrespondenceMode, HybridConfig, HybridResult};
use crate::preprocess::bias_correct;
use crate::settings;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AtlasConfig {
    pub hybrid: HybridConfig,
    /// Register on intensities alone (no contour points).
    pub intensity_only: bool,
    /// Mean-image RMS change below which the iteration stops.
    pub tol: f64,
    pub max_generations: usize,
    /// Polynomial order of the bias correction; `None` skips it.
    pub bias_order: Option<usize>,
    /// `None` picks the individual of median contour volume.
    pub reference: Option<usize>,
    pub min_survivors: usize,
    /// Also exclude individuals whose hybrid loop hit its alternation cap.
    pub require_convergence: bool,
    /// Start each generation's registrations from the previous generation's fields,
    /// at full resolution only and with the later-alternation E1 cap.
    pub warm_start: bool,
}

impl Default for AtlasConfig {
    fn default() -> Self {
        let hybrid = HybridConfig {
            beta: 0.02,
            mode: CorrespondenceMode::HardIcp,
            max_alternations: 2,
            later_e1_max_iters: Some(15),
            ..Default::default()
        };
        AtlasConfig {
            hybrid,
            intensity_only: false,
            tol: 0.5,
            max_generations: 5,
            bias_order: Some(2),
            reference: None,
            min_survivors: 2,
            require_convergence: false,
            warm_start: true,
        }
    }
}

settings!(AtlasConfig { intensity_only, tol, max_generations, bias_order, reference, min_survivors, require_convergence, warm_start } nested { hybrid });

/// Summary of one atlas generation.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub index: usize,
    /// RMS difference between the new mean image and the previous reference.
    pub rms_change: f64,
    pub survivors: Vec<usize>,
    pub mean_dice: f64,
}

#[derive(Clone, Debug)]
pub struct Atlas<T> {
    pub mean_image: ScalarVolume<T>,
    pub surface: SurfaceMesh<T>,
    pub region_priors: Option<RegionPriors>,
    /// `T_i` of the surviving individuals, in `members` order.
    pub population_transforms: Vec<DisplacementField<T>>,
    pub members: Vec<usize>,
    pub reference_index: usize,
    pub generation: usize,
    pub history: Vec<Generation>,
    /// Dice of the atlas contour against each member's contour mapped to the atlas frame.
    pub member_dice: Vec<f64>,
    /// Warnings about excluded individuals.
    pub warnings: Vec<String>,
    pub config_hash: String,
}

impl<T: Real> Atlas<T> {
    /// Atlas contour vertices mapped into each surviving individual by `T_i`.
    pub fn corresponding_shapes(&self) -> Vec<PointSet<T>> {
        self.population_transforms.iter().map(|t| self.surface.vertices.map(|v| t.apply(v))).collect()
    }
}

/// `2|A ∩ B| / (|A| + |B|)`; masks are thresholded at one half.
pub fn dice<T: Real>(a: &ScalarVolume<T>, b: &ScalarVolume<T>) -> Result<f64> {
    a.geom.check_same(&b.geom, "dice")?;
    let half = T::of(0.5);
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        let (p, q) = (x > half, y > half);
        na += p as usize;
        nb += q as usize;
        both += (p && q) as usize;
    }
    if na + nb == 0 {
        return Err(Error::Undefined("dice of two empty masks".into()));
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Registrations keyed by the content of their inputs, shared between atlas builds.
#[derive(Default)]
pub struct RegistrationCache<T> {
    entries: HashMap<[u8; 32], HybridResult<T>>,
    pub hits: usize,
}

impl<T: Real> RegistrationCache<T> {
    pub fn new() -> Self {
        RegistrationCache { entries: HashMap::new(), hits: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn hash_volume<T: Real>(h: &mut Sha256, v: &ScalarVolume<T>) {
    for d in v.geom.dims {
        h.update((d as u64).to_le_bytes());
    }
    for x in &v.data {
        h.update(x.f64().to_le_bytes());
    }
}

fn hash_points<T: Real>(h: &mut Sha256, p: &PointSet<T>) {
    h.update((p.len() as u64).to_le_bytes());
    for v in p.iter() {
        for c in v.0 {
            h.update(c.f64().to_le_bytes());
        }
    }
}

fn snapshot_text<S: Settings + Clone>(s: &S) -> String {
    let mut kv = KeyValues::new();
    s.snapshot("", &mut kv);
    kv.to_text()
}

/// SHA-256 (hex) of the configuration snapshot.
pub fn config_hash(cfg: &AtlasConfig) -> String {
    hex::encode(Sha256::digest(snapshot_text(cfg).as_bytes()))
}

fn register_cached<T: Real>(
    t: &ScalarVolume<T>,
    r: &ScalarVolume<T>,
    model: &PointSet<T>,
    scene: &PointSet<T>,
    h_init: Option<&DisplacementField<T>>,
    cfg: &HybridConfig,
    cache: &mut Option<&mut RegistrationCache<T>>,
) -> Result<HybridResult<T>> {
    let key: [u8; 32] = {
        let mut h = Sha256::new();
        hash_volume(&mut h, t);
        hash_volume(&mut h, r);
        hash_points(&mut h, model);
        hash_points(&mut h, scene);
        if let Some(f) = h_init {
            for v in &f.data {
                for c in v.0 {
                    h.update(c.f64().to_le_bytes());
                }
            }
        }
        h.update(snapshot_text(cfg).as_bytes());
        h.finalize().into()
    };
    if let Some(c) = cache.as_deref_mut() {
        if let Some(hit) = c.entries.get(&key) {
            c.hits += 1;
            return Ok(hit.clone());
        }
    }
    let res = match h_init {
        Some(_) => {
            let mut warm = cfg.clone();
            warm.fluid.pyramid_levels = 1;
            warm.fluid.max_iters = cfg.later_e1_max_iters.unwrap_or(cfg.fluid.max_iters);
            register_hybrid(t, r, model, scene, None, h_init, &warm)?
        }
        None => register_hybrid(t, r, model, scene, None, None, cfg)?,
    };
    if let Some(c) = cache.as_deref_mut() {
        c.entries.insert(key, res.clone());
    }
    Ok(res)
}

fn median_volume_index<T: Real>(meshes: &[&SurfaceMesh<T>]) -> usize {
    let mut order: Vec<(f64, usize)> = meshes.iter().enumerate().map(|(i, m)| (m.volume().f64().abs(), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order[(order.len() - 1) / 2].1
}

pub fn build_atlas<T: Real>(population: &[(ScalarVolume<T>, SurfaceMesh<T>)], cfg: &AtlasConfig) -> Result<Atlas<T>> {
    build_atlas_cached(population, cfg, None)
}

/// [`build_atlas`] with registrations memoized in `cache`.
pub fn build_atlas_cached<T: Real>(
    population: &[(ScalarVolume<T>, SurfaceMesh<T>)],
    cfg: &AtlasConfig,
    mut cache: Option<&mut RegistrationCache<T>>,
) -> Result<Atlas<T>> {
    let n = population.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("an atlas needs at least 2 individuals, got {n}")));
    }
    if cfg.max_generations == 0 || cfg.min_survivors < 2 {
        return Err(Error::InvalidArgument("atlas needs max_generations ≥ 1 and min_survivors ≥ 2".into()));
    }
    let geom = population[0].0.geom;
    for (v, _) in population {
        v.geom.check_same(&geom, "population images must share one grid")?;
    }
    let reference_index = match cfg.reference {
        Some(r) if r < n => r,
        Some(r) => return Err(Error::InvalidArgument(format!("reference {r} out of range for {n} individuals"))),
        None => median_volume_index(&population.iter().map(|p| &p.1).collect::<Vec<_>>()),
    };
    let images: Vec<ScalarVolume<T>> = population
        .iter()
        .map(|(v, _)| match cfg.bias_order {
            Some(order) => bias_correct(v, order),
            None => Ok(v.clone()),
        })
        .collect::<Result<_>>()?;
    let surface = population[reference_index].1.clone();
    let labels: Vec<ScalarVolume<T>> = population.iter().map(|(_, m)| m.voxelize(&geom)).collect();
    let reference_label = &labels[reference_index];
    let empty = PointSet::new(vec![]).expect("empty point set");
    let scene = if cfg.intensity_only { empty.clone() } else { surface.vertices.clone() };
    let mut reference = images[reference_index].clone();
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut transforms = Vec::new();
    let mut members = Vec::new();
    let mut member_dice = Vec::new();
    let mut previous: HashMap<usize, DisplacementField<T>> = HashMap::new();
    for gen in 1..=cfg.max_generations {
        let mut fields = Vec::with_capacity(n);
        let mut survivors = Vec::with_capacity(n);
        for i in 0..n {
            if gen == 1 && i == reference_index {
                fields.push(DisplacementField::identity(geom));
                survivors.push(i);
                continue;
            }
            let model = if cfg.intensity_only { &empty } else { &population[i].1.vertices };
            let warm = if cfg.warm_start { previous.get(&i) } else { None };
            match register_cached(&images[i], &reference, model, &scene, warm, &cfg.hybrid, &mut cache) {
                Ok(res) if cfg.require_convergence && !res.converged => {
                    warnings.push(format!("generation {gen}: individual {i} did not converge, excluded"));
                }
                Ok(res) if !(res.field.min_jacobian_det() > T::zero()) => {
                    warnings.push(format!("generation {gen}: individual {i} has a folded transform, excluded"));
                }
                Ok(res) => {
                    fields.push(res.field);
                    survivors.push(i);
                }
                Err(e) => warnings.push(format!("generation {gen}: individual {i} failed ({e}), excluded")),
            }
        }
        if survivors.len() < cfg.min_survivors {
            return Err(Error::NotEnoughSurvivors { have: survivors.len(), need: cfg.min_survivors });
        }
        let mut sum = vec![0.0f64; geom.len()];
        for (f, &i) in fields.iter().zip(&survivors) {
            for (s, v) in sum.iter_mut().zip(images[i].warp(f).data) {
                *s += v.f64();
            }
        }
        let k = survivors.len() as f64;
        let mean = ScalarVolume {
            geom,
            data: sum.into_iter().map(|s| T::of(s / k)).collect(),
            background: images[reference_index].background,
        };
        let rms_change = (mean
            .data
            .iter()
            .zip(&reference.data)
            .map(|(a, b)| (*a - *b).f64().powi(2))
            .sum::<f64>()
            / geom.len() as f64)
            .sqrt();
        member_dice = fields
            .iter()
            .zip(&survivors)
            .map(|(f, &i)| dice(reference_label, &labels[i].warp(f)))
            .collect::<Result<_>>()?;
        let mean_dice = member_dice.iter().sum::<f64>() / k;
        history.push(Generation { index: gen, rms_change, survivors: survivors.clone(), mean_dice });
        reference = mean;
        previous = survivors.iter().copied().zip(fields.iter().cloned()).collect();
        transforms = fields;
        members = survivors;
        if rms_change < cfg.tol {
            break;
        }
    }
    Ok(Atlas {
        mean_image: reference,
        surface,
        region_priors: None,
        population_transforms: transforms,
        members,
        reference_index,
        generation: history.len(),
        history,
        member_dice,
        warnings,
        config_hash: config_hash(cfg),
    })
}

/// Priors of the base (row 0) and apex (row 1) regions over the atlas surface vertices.
pub fn attach_region_priors<T: Real>(mut atlas: Atlas<T>, base: Vec3<T>, apex: Vec3<T>, kernel_sigma: f64) -> Result<Atlas<T>> {
    let g = atlas.mean_image.geom;
    if !g.contains(base) || !g.contains(apex) {
        return Err(Error::InvalidArgument("region centers must lie inside the atlas image".into()));
    }
    let centers = PointSet::new(vec![base, apex])?;
    atlas.region_priors = Some(region_priors(&atlas.surface.vertices, &centers, kernel_sigma)?);
    Ok(atlas)
}

const MANIFEST: &str = "manifest.txt";

pub fn write_atlas<T: Real>(dir: &Path, atlas: &Atlas<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("mean.vol"), &atlas.mean_image)?;
    write_mesh(&dir.join("surface.mesh"), &atlas.surface)?;
    if let Some(p) = &atlas.region_priors {
        write_priors(dir, p)?;
    }
    for (f, i) in atlas.population_transforms.iter().zip(&atlas.members) {
        write_field(&dir.join(format!("transform_{i}.fld")), f)?;
    }
    let mut kv = KeyValues::new();
    kv.set("generation", atlas.generation.to_string());
    kv.set("reference_index", atlas.reference_index.to_string());
    kv.set("members", atlas.members.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","));
    kv.set("config_hash", atlas.config_hash.clone());
    kv.set("has_priors", atlas.region_priors.is_some().to_string());
    kv.set("member_dice", atlas.member_dice.iter().map(|d| format!("{d:.6}")).collect::<Vec<_>>().join(","));
    for g in &atlas.history {
        kv.set(&format!("generation.{}.rms_change", g.index), g.rms_change.to_string());
        kv.set(&format!("generation.{}.mean_dice", g.index), g.mean_dice.to_string());
        kv.set(
            &format!("generation.{}.survivors", g.index),
            g.survivors.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
        );
    }
    std::fs::write(dir.join(MANIFEST), kv.to_text())?;
    Ok(())
}

fn list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|w| !w.trim().is_empty())
        .map(|w| w.trim().parse::<usize>().map_err(|e| Error::Parse(format!("`{w}`: {e}"))))
        .collect()
}

pub fn read_atlas<T: Real>(dir: &Path) -> Result<Atlas<T>> {
    let kv = KeyValues::from_file(&dir.join(MANIFEST))?;
    let need = |k: &str| kv.get(k).map(str::to_string).ok_or_else(|| Error::Parse(format!("atlas manifest lacks `{k}`")));
    let parse = |k: &str| -> Result<usize> { need(k)?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
    let generation = parse("generation")?;
    let members = list(&need("members")?)?;
    let member_dice = need("member_dice")?
        .split(',')
        .filter(|w| !w.is_empty())
        .map(|w| w.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
        .collect::<Result<_>>()?;
    let mut history = Vec::new();
    for g in 1..=generation {
        let real = |k: &str| -> Result<f64> { need(&format!("generation.{g}.{k}"))?.parse().map_err(|e| Error::Parse(format!("{k}: {e}"))) };
        history.push(Generation {
            index: g,
            rms_change: real("rms_change")?,
            mean_dice: real("mean_dice")?,
            survivors: list(&need(&format!("generation.{g}.survivors"))?)?,
        });
    }
    let region_priors = if need("has_priors")? == "true" { Some(read_priors(dir)?) } else { None };
    let population_transforms =
        members.iter().map(|i| read_field(&dir.join(format!("transform_{i}.fld")))).collect::<Result<_>>()?;
    Ok(Atlas {
        mean_image: read_volume(&dir.join("mean.vol"))?,
        surface: read_mesh(&dir.join("surface.mesh"))?,
        region_priors,
        population_transforms,
        members,
        reference_index: parse("reference_index")?,
        generation,
        history,
        member_dice,
        warnings: Vec::new(),
        config_hash: need("config_hash")?,
    })
}
