use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use hybreg::atlas::{attach_region_priors, build_atlas, read_atlas, write_atlas, AtlasConfig};
use hybreg::config::{KeyValues, Settings};
use hybreg::grid::io::{read_mesh, read_points, read_volume, write_field, write_mesh, write_points, write_volume};
use hybreg::grid::PointSet;
use hybreg::hybrid::write_trace;
use hybreg::segment::{metrics_report, segment, volume_metrics, zone_distance_metrics, SegmentConfig};
use hybreg::shape::{build_shape_model, read_shape_model, write_shape_model, ShapeModelConfig};
use hybreg::synth::{generate_phantom, population_specs, PhantomSpec, Variation};
use hybreg::{Mesh, Points, Vector, Volume};
use sha2::{Digest, Sha256};

const MANIFEST: &str = "run_manifest.txt";

#[derive(Parser)]
#[command(name = "hybreg", version, about = "Hybrid registration, atlas construction and segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom (or a population of them).
    Phantom(PhantomArgs),
    /// Build an atlas from a population list.
    Atlas(AtlasArgs),
    /// Segment a study image with an atlas.
    Segment(SegmentArgs),
    /// Compare automatic and reference segmentations.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct PhantomArgs {
    /// Phantom description file (key=value).
    #[arg(long)]
    spec: PathBuf,
    /// Write a population of this many members instead of one phantom.
    #[arg(long)]
    count: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct AtlasArgs {
    /// Population list: one `image mesh [seeds]` line per individual.
    #[arg(long)]
    population: PathBuf,
    /// Base region center for the priors (defaults to the reference's seeds file).
    #[arg(long, value_parser = parse_point)]
    base: Option<Vector>,
    #[arg(long, value_parser = parse_point)]
    apex: Option<Vector>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    atlas: PathBuf,
    #[arg(long)]
    study: PathBuf,
    #[arg(long, value_parser = parse_point)]
    seed_base: Vector,
    #[arg(long, value_parser = parse_point)]
    seed_apex: Vector,
    #[arg(long)]
    shape_model: Option<PathBuf>,
    /// Reference surface; adds a metrics report.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Automatic surface.
    #[arg(long, required_unless_present = "pairs")]
    auto: Option<PathBuf>,
    /// Reference surface.
    #[arg(long, required_unless_present = "pairs")]
    truth: Option<PathBuf>,
    /// Volume whose grid is used to voxelize both surfaces.
    #[arg(long, conflicts_with_all = ["auto_label", "truth_label"])]
    grid: Option<PathBuf>,
    /// Automatic label volume (with --truth-label, replaces voxelization).
    #[arg(long, requires = "truth_label")]
    auto_label: Option<PathBuf>,
    #[arg(long, requires = "auto_label")]
    truth_label: Option<PathBuf>,
    /// Directory of cases, each holding auto.mesh, truth.mesh and optionally
    /// grid.vol or auto.vol plus truth.vol.
    #[arg(long, conflicts_with_all = ["auto", "truth"])]
    pairs: Option<PathBuf>,
    /// Base-to-apex axis for the zones.
    #[arg(long, value_parser = parse_point, default_value = "0,0,1")]
    axis: Vector,
    #[arg(long)]
    out: PathBuf,
}

/// Input problems that map to exit status 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn parse_point(s: &str) -> Result<Vector, String> {
    let v: Vec<f64> = s.split(',').map(|w| w.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    match v[..] {
        [x, y, z] => Ok(Vector::new(x, y, z)),
        _ => Err(format!("`{s}`: expected x,y,z")),
    }
}

struct RunManifest {
    command: String,
    config: KeyValues,
    inputs: Vec<(String, String)>,
    started: Instant,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        RunManifest { command: command.into(), config: KeyValues::new(), inputs: Vec::new(), started: Instant::now() }
    }

    fn input(&mut self, label: &str, path: &Path) -> anyhow::Result<()> {
        let digest = hash_path(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        self.inputs.push((label.to_string(), digest));
        Ok(())
    }

    fn write(&self, dir: &Path, status: u8) -> std::io::Result<()> {
        let mut kv = KeyValues::new();
        kv.set("command", self.command.clone());
        kv.set("version", env!("CARGO_PKG_VERSION"));
        for (k, v) in self.config.iter() {
            kv.set(&format!("config.{k}"), v);
        }
        for (k, v) in &self.inputs {
            kv.set(&format!("input.{k}"), v.clone());
        }
        kv.set("wall_time_s", format!("{:.3}", self.started.elapsed().as_secs_f64()));
        kv.set("exit_status", status.to_string());
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST), kv.to_text())
    }
}

/// SHA-256 of a file, or of a directory's files in name order.
fn hash_path(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        let mut names: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        names.sort();
        for p in names.iter().filter(|p| p.is_file()) {
            h.update(p.file_name().unwrap_or_default().as_encoded_bytes());
            h.update(std::fs::read(p)?);
        }
    } else {
        h.update(std::fs::read(path)?);
    }
    Ok(h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    }))
}

/// `base` < config file < `--set` flags. Defaults sit underneath when applied.
fn layers(base: Option<KeyValues>, common: &Common) -> anyhow::Result<KeyValues> {
    let mut kv = base.unwrap_or_default();
    if let Some(p) = &common.config {
        kv.layer(&KeyValues::from_file(p).map_err(|e| usage(format!("{}: {e}", p.display())))?);
    }
    let mut flags = KeyValues::new();
    for s in &common.set {
        let (k, v) = s.split_once('=').ok_or_else(|| usage(format!("--set {s}: expected KEY=VALUE")))?;
        flags.set(k.trim(), v.trim());
    }
    kv.layer(&flags);
    Ok(kv)
}

fn apply<S: Settings>(target: &mut S, kv: &KeyValues, prefix: &str) -> anyhow::Result<()> {
    target.apply(kv, prefix).map_err(|e| usage(e.to_string()))
}

fn reject_unused(kv: &KeyValues) -> anyhow::Result<()> {
    let bad = kv.unused();
    if !bad.is_empty() {
        return Err(usage(format!("unknown configuration keys: {}", bad.join(", "))));
    }
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs, m: &mut RunManifest) -> anyhow::Result<u8> {
    m.input("spec", &a.spec)?;
    let file = KeyValues::from_file(&a.spec).map_err(|e| usage(format!("{}: {e}", a.spec.display())))?;
    let kv = layers(Some(file), &a.common)?;
    let mut spec = PhantomSpec::default();
    apply(&mut spec, &kv, "")?;
    let mut variation = Variation::default();
    apply(&mut variation, &kv, "variation")?;
    reject_unused(&kv)?;
    spec.validate().map_err(|e| usage(e.to_string()))?;
    spec.snapshot("", &mut m.config);
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    match a.count {
        None => write_phantom(out, &spec)?,
        Some(n) => {
            variation.snapshot("variation", &mut m.config);
            let specs = population_specs(&spec, n, &variation).map_err(|e| usage(e.to_string()))?;
            let mut list = String::new();
            for (i, s) in specs.iter().enumerate() {
                let name = format!("member_{i:02}");
                write_phantom(&out.join(&name), s)?;
                writeln!(list, "{name}/image.vol {name}/surface.mesh {name}/seeds.pts")?;
            }
            std::fs::write(out.join("population.txt"), list)?;
        }
    }
    Ok(0)
}

fn write_phantom(dir: &Path, spec: &PhantomSpec) -> anyhow::Result<()> {
    let p = generate_phantom::<f64>(spec)?;
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("image.vol"), &p.image)?;
    write_mesh(&dir.join("surface.mesh"), &p.mesh)?;
    write_field(&dir.join("truth.fld"), &p.ground_truth)?;
    write_points(&dir.join("seeds.pts"), &PointSet { points: vec![p.base, p.apex] })?;
    Ok(())
}

struct Member {
    image: PathBuf,
    mesh: PathBuf,
    seeds: Option<PathBuf>,
}

fn read_population(list: &Path) -> anyhow::Result<Vec<Member>> {
    let text = std::fs::read_to_string(list).map_err(|e| usage(format!("{}: {e}", list.display())))?;
    let root = list.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let w: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&w.len()) {
            return Err(usage(format!("{}:{}: expected `image mesh [seeds]`", list.display(), n + 1)));
        }
        out.push(Member { image: root.join(w[0]), mesh: root.join(w[1]), seeds: w.get(2).map(|s| root.join(s)) });
    }
    Ok(out)
}

fn cmd_atlas(a: &AtlasArgs, m: &mut RunManifest) -> anyhow::Result<u8> {
    m.input("population", &a.population)?;
    let members = read_population(&a.population)?;
    if members.len() < 2 {
        bail!(hybreg::Error::NotEnoughSurvivors { have: members.len(), need: 2 });
    }
    let mut cfg = AtlasConfig::default();
    let mut priors = PriorSettings::default();
    let mut shape_cfg = ShapeModelConfig::default();
    let kv = layers(None, &a.common)?;
    apply(&mut cfg, &kv, "")?;
    apply(&mut priors, &kv, "priors")?;
    apply(&mut shape_cfg, &kv, "shape")?;
    reject_unused(&kv)?;
    cfg.snapshot("", &mut m.config);
    priors.snapshot("priors", &mut m.config);
    shape_cfg.snapshot("shape", &mut m.config);

    let mut population: Vec<(Volume, Mesh)> = Vec::new();
    for (i, mem) in members.iter().enumerate() {
        m.input(&format!("image.{i}"), &mem.image)?;
        m.input(&format!("mesh.{i}"), &mem.mesh)?;
        let img = read_volume(&mem.image).map_err(|e| usage(format!("{}: {e}", mem.image.display())))?;
        let mesh = read_mesh(&mem.mesh).map_err(|e| usage(format!("{}: {e}", mem.mesh.display())))?;
        population.push((img, mesh));
    }
    let mut atlas = build_atlas(&population, &cfg)?;
    for w in &atlas.warnings {
        eprintln!("warning: {w}");
    }
    let centers = match (a.base, a.apex) {
        (Some(b), Some(p)) => Some((b, p)),
        (None, None) => match &members[atlas.reference_index].seeds {
            Some(path) => {
                let s: Points = read_points(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if s.len() != 2 {
                    return Err(usage(format!("{}: expected two seed points", path.display())));
                }
                Some((s.points[0], s.points[1]))
            }
            None => None,
        },
        _ => return Err(usage("--base and --apex go together")),
    };
    match centers {
        Some((b, p)) => atlas = attach_region_priors(atlas, b, p, priors.kernel_sigma)?,
        None => eprintln!("warning: no base/apex centers for the reference; atlas written without region priors"),
    }
    let out = &a.common.out;
    write_atlas(out, &atlas)?;
    if atlas.corresponding_shapes().len() >= 2 {
        let model = build_shape_model(&atlas.corresponding_shapes(), &shape_cfg)?;
        write_shape_model(&out.join("shape.model"), &model)?;
    }
    let mut stats = String::new();
    for g in &atlas.history {
        writeln!(stats, "generation={} rms_change={} survivors={} mean_dice={}", g.index, g.rms_change, g.survivors.len(), g.mean_dice)?;
    }
    std::fs::write(out.join("generations.txt"), &stats)?;
    print!("{stats}");
    let converged = atlas.history.last().is_some_and(|g| g.rms_change <= cfg.tol);
    Ok(if converged { 0 } else { 4 })
}

#[derive(Clone, Debug)]
struct PriorSettings {
    kernel_sigma: f64,
}

impl Default for PriorSettings {
    fn default() -> Self {
        PriorSettings { kernel_sigma: 5.0 }
    }
}

hybreg::settings!(PriorSettings { kernel_sigma });

fn cmd_segment(a: &SegmentArgs, m: &mut RunManifest) -> anyhow::Result<u8> {
    m.input("atlas", &a.atlas)?;
    m.input("study", &a.study)?;
    let mut cfg = SegmentConfig::default();
    let kv = layers(None, &a.common)?;
    apply(&mut cfg, &kv, "")?;
    reject_unused(&kv)?;
    cfg.snapshot("", &mut m.config);
    m.config.set("seed_base", format!("{},{},{}", a.seed_base[0], a.seed_base[1], a.seed_base[2]));
    m.config.set("seed_apex", format!("{},{},{}", a.seed_apex[0], a.seed_apex[1], a.seed_apex[2]));

    let atlas = read_atlas::<f64>(&a.atlas).map_err(|e| usage(format!("{}: {e}", a.atlas.display())))?;
    let study: Volume = read_volume(&a.study).map_err(|e| usage(format!("{}: {e}", a.study.display())))?;
    let model = match &a.shape_model {
        Some(p) => {
            m.input("shape_model", p)?;
            Some(read_shape_model(p).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let truth = match &a.truth {
        Some(p) => {
            m.input("truth", p)?;
            Some(read_mesh::<f64>(p).map_err(|e| usage(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    let res = segment(&atlas, &study, a.seed_base, a.seed_apex, model.as_ref(), &cfg)?;
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    write_mesh(&out.join("surface.mesh"), &res.surface)?;
    write_mesh(&out.join("raw_surface.mesh"), &res.raw_surface)?;
    write_volume(&out.join("label.vol"), &res.label_volume)?;
    write_field(&out.join("field.fld"), &res.field)?;
    write_trace(std::fs::File::create(out.join("trace.csv"))?, &res.trace)?;
    if let Some(c) = &res.coefficients {
        let line: Vec<String> = c.b.iter().map(|b| b.to_string()).collect();
        std::fs::write(out.join("coefficients.txt"), line.join(" ") + "\n")?;
    }
    if res.rigid_diverged {
        eprintln!("warning: rigid initialization diverged; continued from identity");
    }
    if let Some(t) = &truth {
        let vm = volume_metrics(&res.label_volume, &t.voxelize(&study.geom))?;
        let zm = zone_distance_metrics(&res.surface, t, a.seed_apex - a.seed_base)?;
        let report = metrics_report(Some(&vm), Some(&zm));
        std::fs::write(out.join("report.txt"), &report)?;
        print!("{report}");
    }
    Ok(if res.converged { 0 } else { 4 })
}

fn cmd_eval(a: &EvalArgs, m: &mut RunManifest) -> anyhow::Result<u8> {
    let mut report = String::new();
    m.config.set("axis", format!("{},{},{}", a.axis[0], a.axis[1], a.axis[2]));
    match &a.pairs {
        Some(dir) => {
            let mut cases: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| usage(format!("{}: {e}", dir.display())))?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            cases.retain(|p| p.is_dir());
            cases.sort();
            if cases.is_empty() {
                return Err(usage(format!("{}: no case directories", dir.display())));
            }
            for c in &cases {
                let name = c.file_name().unwrap_or_default().to_string_lossy().to_string();
                let labels = match (c.join("auto.vol"), c.join("truth.vol")) {
                    (x, y) if x.exists() && y.exists() => Labels::Files(x, y),
                    _ if c.join("grid.vol").exists() => Labels::Grid(c.join("grid.vol")),
                    _ => Labels::None,
                };
                let r = eval_pair(&c.join("auto.mesh"), &c.join("truth.mesh"), &labels, a.axis, m, &name)?;
                for line in r.lines() {
                    writeln!(report, "case.{name}.{line}")?;
                }
            }
        }
        None => {
            let (auto, truth) = (a.auto.as_ref().expect("clap enforces"), a.truth.as_ref().expect("clap enforces"));
            let labels = match (&a.grid, &a.auto_label, &a.truth_label) {
                (Some(g), _, _) => Labels::Grid(g.clone()),
                (None, Some(x), Some(y)) => Labels::Files(x.clone(), y.clone()),
                _ => Labels::None,
            };
            report = eval_pair(auto, truth, &labels, a.axis, m, "case")?;
        }
    }
    std::fs::create_dir_all(&a.out)?;
    std::fs::write(a.out.join("report.txt"), &report)?;
    print!("{report}");
    Ok(0)
}

enum Labels {
    None,
    Grid(PathBuf),
    Files(PathBuf, PathBuf),
}

fn load_volume(path: &Path) -> anyhow::Result<Volume> {
    read_volume(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn eval_pair(auto: &Path, truth: &Path, labels: &Labels, axis: Vector, m: &mut RunManifest, label: &str) -> anyhow::Result<String> {
    m.input(&format!("{label}.auto"), auto)?;
    m.input(&format!("{label}.truth"), truth)?;
    let am: Mesh = read_mesh(auto).map_err(|e| usage(format!("{}: {e}", auto.display())))?;
    let tm: Mesh = read_mesh(truth).map_err(|e| usage(format!("{}: {e}", truth.display())))?;
    let vm = match labels {
        Labels::Grid(g) => {
            m.input(&format!("{label}.grid"), g)?;
            let v = load_volume(g)?;
            Some(volume_metrics(&am.voxelize(&v.geom), &tm.voxelize(&v.geom))?)
        }
        Labels::Files(x, y) => {
            m.input(&format!("{label}.auto_label"), x)?;
            m.input(&format!("{label}.truth_label"), y)?;
            Some(volume_metrics(&load_volume(x)?, &load_volume(y)?)?)
        }
        Labels::None => None,
    };
    let zm = zone_distance_metrics(&am, &tm, axis)?;
    Ok(metrics_report(vm.as_ref(), Some(&zm)))
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Usage>().is_some() {
        return 2;
    }
    match e.downcast_ref::<hybreg::Error>() {
        Some(
            hybreg::Error::Precondition(_)
            | hybreg::Error::GeometryMismatch(_)
            | hybreg::Error::DimensionMismatch(_)
            | hybreg::Error::NotEnoughSurvivors { .. }
            | hybreg::Error::Degenerate(_)
            | hybreg::Error::Undefined(_),
        ) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (mut manifest, out) = match &cli.command {
        Command::Phantom(a) => (RunManifest::new("phantom"), a.common.out.clone()),
        Command::Atlas(a) => (RunManifest::new("atlas"), a.common.out.clone()),
        Command::Segment(a) => (RunManifest::new("segment"), a.common.out.clone()),
        Command::Eval(a) => (RunManifest::new("eval"), a.out.clone()),
    };
    let result = match &cli.command {
        Command::Phantom(a) => cmd_phantom(a, &mut manifest),
        Command::Atlas(a) => cmd_atlas(a, &mut manifest),
        Command::Segment(a) => cmd_segment(a, &mut manifest),
        Command::Eval(a) => cmd_eval(a, &mut manifest),
    };
    let status = match result {
        Ok(s) => {
            if s == 4 {
                eprintln!("warning: iteration cap reached before convergence; results written");
            }
            s
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    };
    if let Err(e) = manifest.write(&out, status).context("writing the run manifest") {
        eprintln!("error: {e:#}");
    }
    ExitCode::from(status)
}
