use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hybreg::config::KeyValues;
use sha2::{Digest, Sha256};

const SPEC: &str = "dims = 40,40,40\nsemi_axes = 9,7,11\nmesh_subdivisions = 2\n";

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hybreg")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn digest(path: &Path) -> String {
    Sha256::digest(fs::read(path).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest(dir: &Path) -> KeyValues {
    KeyValues::from_file(&dir.join("run_manifest.txt")).unwrap()
}

fn phantom(dir: &Path, out: &str) {
    fs::write(dir.join("s.cfg"), SPEC).unwrap();
    let o = run(&["phantom", "--spec", "s.cfg", "--out", out], dir);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn seeds(dir: &Path) -> (String, String) {
    let pts: hybreg::Points = hybreg::grid::io::read_points(&dir.join("seeds.pts")).unwrap();
    let f = |p: hybreg::Vector| format!("{},{},{}", p[0], p[1], p[2]);
    (f(pts.points[0]), f(pts.points[1]))
}

#[test]
fn phantom_writes_four_files_and_a_run_manifest() {
    let t = tempfile::tempdir().unwrap();
    phantom(t.path(), "p");
    for f in ["image.vol", "surface.mesh", "truth.fld", "seeds.pts", "run_manifest.txt"] {
        assert!(t.path().join("p").join(f).is_file(), "{f}");
    }
    let m = manifest(&t.path().join("p"));
    assert_eq!(m.get("command"), Some("phantom"));
    assert_eq!(m.get("exit_status"), Some("0"));
    assert_eq!(m.get("config.dims"), Some("40,40,40"));
    assert!(m.get("input.spec").is_some_and(|h| h.len() == 64));
    assert!(m.get("wall_time_s").is_some());
}

#[test]
fn phantom_rerun_is_bit_identical() {
    let t = tempfile::tempdir().unwrap();
    phantom(t.path(), "a");
    phantom(t.path(), "b");
    for f in ["image.vol", "surface.mesh", "truth.fld", "seeds.pts"] {
        assert_eq!(digest(&t.path().join("a").join(f)), digest(&t.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn phantom_usage_errors_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["phantom", "--spec", "missing.cfg", "--out", "p"], t.path())), 2);
    fs::write(t.path().join("bad.cfg"), "semi_axis = 1,2,3\n").unwrap();
    assert_eq!(code(&run(&["phantom", "--spec", "bad.cfg", "--out", "p"], t.path())), 2);
    fs::write(t.path().join("s.cfg"), SPEC).unwrap();
    assert_eq!(code(&run(&["phantom", "--spec", "s.cfg", "--out", "p", "--set", "noise_fraction=-1"], t.path())), 2);
}

#[test]
fn flags_override_the_config_file() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("s.cfg"), SPEC).unwrap();
    fs::write(t.path().join("c.cfg"), "noise_seed = 5\ntexture_seed = 9\n").unwrap();
    let o = run(&["phantom", "--spec", "s.cfg", "--config", "c.cfg", "--set", "noise_seed=6", "--out", "p"], t.path());
    assert_eq!(code(&o), 0);
    let m = manifest(&t.path().join("p"));
    assert_eq!(m.get("config.noise_seed"), Some("6"));
    assert_eq!(m.get("config.texture_seed"), Some("9"));
}

#[test]
fn population_list_feeds_the_atlas() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("s.cfg"), SPEC).unwrap();
    let o = run(&["phantom", "--spec", "s.cfg", "--count", "3", "--out", "pop"], t.path());
    assert_eq!(code(&o), 0);
    let list = fs::read_to_string(t.path().join("pop/population.txt")).unwrap();
    assert_eq!(list.lines().count(), 3);
    assert!(t.path().join("pop/member_02/image.vol").is_file());
}

#[test]
fn atlas_segment_and_eval_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    phantom(d, "p");
    fs::write(d.join("pop.txt"), "p/image.vol p/surface.mesh p/seeds.pts\np/image.vol p/surface.mesh p/seeds.pts\n").unwrap();
    let o = run(&["atlas", "--population", "pop.txt", "--out", "atlas"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats = fs::read_to_string(d.join("atlas/generations.txt")).unwrap();
    assert_eq!(stats.lines().count(), 1, "identical members converge in one generation: {stats}");
    assert!(d.join("atlas/shape.model").is_file());
    assert_eq!(manifest(&d.join("atlas")).get("command"), Some("atlas"));

    let (b, a) = seeds(&d.join("p"));
    let args = ["segment", "--atlas", "atlas", "--study", "p/image.vol", "--seed-base", &b, "--seed-apex", &a, "--truth", "p/surface.mesh", "--out", "seg"];
    let o = run(&args, d);
    assert!(matches!(code(&o), 0 | 4), "{}", String::from_utf8_lossy(&o.stderr));
    let report = KeyValues::from_file(&d.join("seg/report.txt")).unwrap();
    assert!(report.get("sens").unwrap().parse::<f64>().unwrap() > 0.9);
    assert!(report.get("ppv").unwrap().parse::<f64>().unwrap() > 0.9);
    for z in ["base", "central", "apex", "all"] {
        assert!(report.get(&format!("zone.{z}.mean")).is_some(), "{z}");
    }
    for f in ["surface.mesh", "label.vol", "field.fld", "trace.csv", "run_manifest.txt"] {
        assert!(d.join("seg").join(f).is_file(), "{f}");
    }
    let mut again = args;
    again[again.len() - 1] = "seg2";
    run(&again, d);
    for f in ["surface.mesh", "label.vol", "field.fld"] {
        assert_eq!(digest(&d.join("seg").join(f)), digest(&d.join("seg2").join(f)), "{f}");
    }

    let o = run(&["eval", "--auto", "p/surface.mesh", "--truth", "p/surface.mesh", "--grid", "p/image.vol", "--out", "ev"], d);
    assert_eq!(code(&o), 0);
    let r = KeyValues::from_file(&d.join("ev/report.txt")).unwrap();
    assert_eq!(r.get("sens"), Some("1"));
    assert_eq!(r.get("ppv"), Some("1"));
    assert_eq!(r.get("zone.all.mean"), Some("0"));
}

#[test]
fn atlas_bad_paths_exit_2() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["atlas", "--population", "none.txt", "--out", "a"], t.path())), 2);
    fs::write(t.path().join("pop.txt"), "x.vol x.mesh\ny.vol y.mesh\n").unwrap();
    assert_eq!(code(&run(&["atlas", "--population", "pop.txt", "--out", "a"], t.path())), 2);
}

#[test]
fn atlas_with_one_member_is_a_precondition_failure() {
    let t = tempfile::tempdir().unwrap();
    phantom(t.path(), "p");
    fs::write(t.path().join("pop.txt"), "p/image.vol p/surface.mesh\n").unwrap();
    assert_eq!(code(&run(&["atlas", "--population", "pop.txt", "--out", "a"], t.path())), 3);
}

#[test]
fn segment_seed_errors() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    phantom(d, "p");
    fs::write(d.join("pop.txt"), "p/image.vol p/surface.mesh p/seeds.pts\np/image.vol p/surface.mesh p/seeds.pts\n").unwrap();
    assert_eq!(code(&run(&["atlas", "--population", "pop.txt", "--out", "atlas"], d)), 0);
    let o = run(&["segment", "--atlas", "atlas", "--study", "p/image.vol", "--seed-base", "1,1,1", "--out", "s"], d);
    assert_eq!(code(&o), 2);
    let o = run(&["segment", "--atlas", "atlas", "--study", "p/image.vol", "--seed-base", "500,0,0", "--seed-apex", "20,20,20", "--out", "s"], d);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(manifest(&d.join("s")).get("exit_status"), Some("3"));
}

#[test]
fn eval_pairs_listing_and_geometry_mismatch() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path();
    phantom(d, "p");
    fs::write(d.join("s2.cfg"), "dims = 32,32,32\nsemi_axes = 9,7,11\nmesh_subdivisions = 2\n").unwrap();
    assert_eq!(code(&run(&["phantom", "--spec", "s2.cfg", "--out", "q"], d)), 0);
    let o = run(&[
        "eval", "--auto", "p/surface.mesh", "--truth", "p/surface.mesh", "--auto-label", "p/image.vol", "--truth-label", "q/image.vol", "--out", "e",
    ], d);
    assert_eq!(code(&o), 3);

    for c in ["case1", "case2"] {
        let cd = d.join("pairs").join(c);
        fs::create_dir_all(&cd).unwrap();
        fs::copy(d.join("p/surface.mesh"), cd.join("auto.mesh")).unwrap();
        fs::copy(d.join("p/surface.mesh"), cd.join("truth.mesh")).unwrap();
        fs::copy(d.join("p/image.vol"), cd.join("grid.vol")).unwrap();
    }
    let o = run(&["eval", "--pairs", "pairs", "--out", "e2"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = KeyValues::from_file(&d.join("e2/report.txt")).unwrap();
    assert_eq!(r.get("case.case1.sens"), Some("1"));
    assert_eq!(r.get("case.case2.zone.all.mean"), Some("0"));
}
