//! On-disk formats.
//!
//! Volumes and fields: an ASCII header of `key value...` lines (magic first line,
//! terminated by `end`) followed by a little-endian `f32` block, x-fastest, with
//! vector components interleaved. Point sets: one `x y z` per line. Meshes:
//! `v x y z` and `f i j k` lines with zero-based indices. Matrices: a `rows R cols C`
//! line then one whitespace-separated row per line.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use super::{DisplacementField, Geometry, PointSet, ScalarVolume, SurfaceMesh, Vec3};
use crate::{Error, Real, Result};

pub const VOLUME_MAGIC: &str = "HYBREG-VOLUME 1";

/// Parsed ASCII header plus the raw float block that followed it.
#[derive(Clone, Debug, Default)]
pub struct RawFile {
    pub magic: String,
    pub header: BTreeMap<String, Vec<String>>,
    pub values: Vec<f32>,
}

impl RawFile {
    pub fn get(&self, key: &str) -> Result<&[String]> {
        self.header
            .get(key)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Parse(format!("missing header key `{key}`")))
    }

    pub fn reals<T: Real>(&self, key: &str) -> Result<Vec<T>> {
        self.get(key)?
            .iter()
            .map(|s| s.parse::<f64>().map(T::of).map_err(|e| Error::Parse(format!("`{key}`: {e}"))))
            .collect()
    }

    pub fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        self.get(key)?
            .iter()
            .map(|s| s.parse::<usize>().map_err(|e| Error::Parse(format!("`{key}`: {e}"))))
            .collect()
    }

    fn vec3<T: Real>(&self, key: &str) -> Result<Vec3<T>> {
        let v = self.reals::<T>(key)?;
        if v.len() != 3 {
            return Err(Error::Parse(format!("`{key}` needs 3 values")));
        }
        Ok(Vec3([v[0], v[1], v[2]]))
    }

    pub fn geometry<T: Real>(&self) -> Result<Geometry<T>> {
        let d = self.usizes("dims")?;
        if d.len() != 3 {
            return Err(Error::Parse("`dims` needs 3 values".into()));
        }
        Geometry::new([d[0], d[1], d[2]], self.vec3("spacing")?, self.vec3("origin")?)
    }
}

pub fn write_raw(path: &Path, magic: &str, header: &[(&str, String)], values: &[f32]) -> Result<()> {
    let mut out = Vec::with_capacity(256 + values.len() * 4);
    writeln!(out, "{magic}")?;
    for (k, v) in header {
        writeln!(out, "{k} {v}")?;
    }
    writeln!(out, "end")?;
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_raw(path: &Path) -> Result<RawFile> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut file = RawFile::default();
    let mut line = String::new();
    let mut first = true;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(Error::Parse(format!("{}: header not terminated by `end`", path.display())));
        }
        let trimmed = line.trim();
        if first {
            file.magic = trimmed.to_string();
            first = false;
            continue;
        }
        if trimmed == "end" {
            break;
        }
        let mut parts = trimmed.split_whitespace();
        if let Some(key) = parts.next() {
            file.header.insert(key.to_string(), parts.map(str::to_string).collect());
        }
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse(format!("{}: raw block is not a whole number of floats", path.display())));
    }
    file.values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(file)
}

fn fmt3<T: Real>(v: Vec3<T>) -> String {
    format!("{} {} {}", v[0], v[1], v[2])
}

fn geometry_header<T: Real>(g: &Geometry<T>, components: usize) -> Vec<(&'static str, String)> {
    vec![
        ("dims", format!("{} {} {}", g.dims[0], g.dims[1], g.dims[2])),
        ("spacing", fmt3(g.spacing)),
        ("origin", fmt3(g.origin)),
        ("type", "float32".to_string()),
        ("components", components.to_string()),
    ]
}

pub fn write_volume<T: Real>(path: &Path, v: &ScalarVolume<T>) -> Result<()> {
    let mut header = geometry_header(&v.geom, 1);
    header.push(("background", v.background.to_string()));
    let values: Vec<f32> = v.data.iter().map(|x| x.f64() as f32).collect();
    write_raw(path, VOLUME_MAGIC, &header, &values)
}

fn check_layout(raw: &RawFile, components: usize, len: usize, path: &Path) -> Result<()> {
    if raw.get("type")?.first().map(String::as_str) != Some("float32") {
        return Err(Error::Parse(format!("{}: only float32 data is supported", path.display())));
    }
    let comps = raw.usizes("components")?;
    if comps.first() != Some(&components) {
        return Err(Error::Parse(format!("{}: expected {components} component(s), found {comps:?}", path.display())));
    }
    if raw.values.len() != len * components {
        return Err(Error::Parse(format!(
            "{}: expected {} floats, found {}",
            path.display(),
            len * components,
            raw.values.len()
        )));
    }
    Ok(())
}

pub fn read_volume<T: Real>(path: &Path) -> Result<ScalarVolume<T>> {
    let raw = read_raw(path)?;
    let geom = raw.geometry::<T>()?;
    check_layout(&raw, 1, geom.len(), path)?;
    let background = match raw.header.get("background") {
        Some(_) => raw.reals::<T>("background")?.first().copied().unwrap_or(T::zero()),
        None => T::zero(),
    };
    let data = raw.values.iter().map(|&x| T::of(x as f64)).collect();
    Ok(ScalarVolume::new(geom, data)?.with_background(background))
}

pub fn write_field<T: Real>(path: &Path, f: &DisplacementField<T>) -> Result<()> {
    let header = geometry_header(&f.geom, 3);
    let values: Vec<f32> = f.data.iter().flat_map(|v| v.0.map(|x| x.f64() as f32)).collect();
    write_raw(path, VOLUME_MAGIC, &header, &values)
}

pub fn read_field<T: Real>(path: &Path) -> Result<DisplacementField<T>> {
    let raw = read_raw(path)?;
    let geom = raw.geometry::<T>()?;
    check_layout(&raw, 3, geom.len(), path)?;
    let data = raw
        .values
        .chunks_exact(3)
        .map(|c| Vec3([T::of(c[0] as f64), T::of(c[1] as f64), T::of(c[2] as f64)]))
        .collect();
    DisplacementField::new(geom, data)
}

fn parse_floats<T: Real>(parts: &[&str], lineno: usize) -> Result<Vec3<T>> {
    if parts.len() != 3 {
        return Err(Error::Parse(format!("line {lineno}: expected 3 coordinates")));
    }
    let mut v = [T::zero(); 3];
    for (slot, s) in v.iter_mut().zip(parts) {
        *slot = T::of(s.parse::<f64>().map_err(|e| Error::Parse(format!("line {lineno}: {e}")))?);
    }
    Ok(Vec3(v))
}

pub fn write_points<T: Real>(path: &Path, pts: &PointSet<T>) -> Result<()> {
    let mut out = String::new();
    for p in pts.iter() {
        out.push_str(&fmt3(*p));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_points<T: Real>(path: &Path) -> Result<PointSet<T>> {
    let text = fs::read_to_string(path)?;
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        pts.push(parse_floats(&parts, n + 1)?);
    }
    PointSet::new(pts)
}

pub fn write_mesh<T: Real>(path: &Path, mesh: &SurfaceMesh<T>) -> Result<()> {
    let mut out = String::new();
    for p in mesh.vertices.iter() {
        out.push_str(&format!("v {}\n", fmt3(*p)));
    }
    for f in &mesh.faces {
        out.push_str(&format!("f {} {} {}\n", f[0], f[1], f[2]));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_mesh<T: Real>(path: &Path) -> Result<SurfaceMesh<T>> {
    let text = fs::read_to_string(path)?;
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.first() {
            Some(&"v") => verts.push(parse_floats(&parts[1..], n + 1)?),
            Some(&"f") => {
                if parts.len() != 4 {
                    return Err(Error::Parse(format!("line {}: face needs 3 indices", n + 1)));
                }
                let mut f = [0usize; 3];
                for (slot, s) in f.iter_mut().zip(&parts[1..]) {
                    *slot = s.parse().map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))?;
                }
                faces.push(f);
            }
            Some(s) if s.starts_with('#') => {}
            None => {}
            Some(other) => return Err(Error::Parse(format!("line {}: unknown record `{other}`", n + 1))),
        }
    }
    SurfaceMesh::new(PointSet::new(verts)?, faces)
}

/// Row-major matrix with a `rows R cols C` header line.
pub fn write_matrix<T: Real>(path: &Path, rows: usize, cols: usize, data: &[T]) -> Result<()> {
    let mut out = format!("rows {rows} cols {cols}\n");
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_matrix<T: Real>(path: &Path) -> Result<(usize, usize, Vec<T>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or_default().split_whitespace().collect();
    let (rows, cols) = match head.as_slice() {
        ["rows", r, "cols", c] => (
            r.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?,
            c.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?,
        ),
        _ => return Err(Error::Parse("matrix header must be `rows R cols C`".into())),
    };
    let mut data = Vec::with_capacity(rows * cols);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        for s in line.split_whitespace() {
            data.push(T::of(s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()))?));
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Parse(format!("matrix expects {} values, found {}", rows * cols, data.len())));
    }
    Ok((rows, cols, data))
}
