use super::{Geometry, ScalarVolume, Vec3};
use crate::{Error, Real, Result};

/// Ordered list of 3D points (mm).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet<T> {
    pub points: Vec<Vec3<T>>,
}

impl<T: Real> PointSet<T> {
    /// Builds a point set, rejecting non-finite coordinates.
    pub fn new(points: Vec<Vec3<T>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidArgument(format!("point {i} has non-finite coordinates")));
        }
        Ok(PointSet { points })
    }

    pub(crate) fn from_vec(points: Vec<Vec3<T>>) -> Self {
        PointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec3<T>> {
        self.points.iter()
    }

    pub fn centroid(&self) -> Vec3<T> {
        if self.points.is_empty() {
            return Vec3::zero();
        }
        let sum = self.points.iter().fold(Vec3::zero(), |acc, &p| acc + p);
        sum / T::of_usize(self.points.len())
    }

    pub fn map(&self, f: impl Fn(Vec3<T>) -> Vec3<T>) -> Self {
        PointSet { points: self.points.iter().map(|&p| f(p)).collect() }
    }

    /// Largest pairwise distance, approximated by the bounding-box diagonal.
    pub fn diameter(&self) -> T {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    pub fn bounds(&self) -> (Vec3<T>, Vec3<T>) {
        let mut lo = Vec3::splat(T::infinity());
        let mut hi = Vec3::splat(T::neg_infinity());
        for p in &self.points {
            lo = lo.zip(*p, T::min);
            hi = hi.zip(*p, T::max);
        }
        (lo, hi)
    }

    /// Root-mean-square distance between corresponding points.
    pub fn rms_distance(&self, other: &Self) -> T {
        let n = self.points.len().max(1);
        let s: T = self.points.iter().zip(&other.points).map(|(a, b)| (*a - *b).norm_squared()).sum();
        (s / T::of_usize(n)).sqrt()
    }

    pub fn mean_distance(&self, other: &Self) -> T {
        let n = self.points.len().max(1);
        let s: T = self.points.iter().zip(&other.points).map(|(a, b)| (*a - *b).norm()).sum();
        s / T::of_usize(n)
    }

    pub fn cast<U: Real>(&self) -> PointSet<U> {
        PointSet { points: self.points.iter().map(|p| p.cast()).collect() }
    }
}

/// Triangulated surface; faces index into `vertices`.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceMesh<T> {
    pub vertices: PointSet<T>,
    pub faces: Vec<[usize; 3]>,
}

impl<T: Real> SurfaceMesh<T> {
    pub fn new(vertices: PointSet<T>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        for (f, face) in faces.iter().enumerate() {
            if face.iter().any(|&i| i >= n) {
                return Err(Error::InvalidArgument(format!("face {f} indexes past {n} vertices")));
            }
            if face[0] == face[1] || face[1] == face[2] || face[0] == face[2] {
                return Err(Error::InvalidArgument(format!("face {f} repeats a vertex")));
            }
        }
        Ok(SurfaceMesh { vertices, faces })
    }

    /// Same connectivity, new vertex positions.
    pub fn with_vertices(&self, vertices: PointSet<T>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::DimensionMismatch(format!(
                "mesh has {} vertices, got {}",
                self.vertices.len(),
                vertices.len()
            )));
        }
        Ok(SurfaceMesh { vertices, faces: self.faces.clone() })
    }

    pub fn triangle(&self, f: usize) -> [Vec3<T>; 3] {
        let [a, b, c] = self.faces[f];
        let v = &self.vertices.points;
        [v[a], v[b], v[c]]
    }

    /// Enclosed (signed) volume by the divergence theorem; positive for outward winding.
    pub fn volume(&self) -> T {
        let six = T::of(6.0);
        (0..self.faces.len())
            .map(|f| {
                let [a, b, c] = self.triangle(f);
                a.dot(b.cross(c)) / six
            })
            .sum()
    }

    /// Binary mask of voxel centers enclosed by the surface.
    ///
    /// Each x-row of voxel centers is intersected with every triangle; crossings carry
    /// the sign of the triangle normal's x-component and a voxel is inside where the
    /// accumulated winding number is non-zero.
    pub fn voxelize(&self, geom: &Geometry<T>) -> ScalarVolume<T> {
        let [nx, ny, nz] = geom.dims;
        let mut crossings: Vec<Vec<(T, i32)>> = vec![Vec::new(); ny * nz];
        // Rows are nudged off-lattice so rays never pass exactly through vertices or edges.
        let jitter_y = T::of(1.234_567e-5) * geom.spacing[1];
        let jitter_z = T::of(2.345_678e-5) * geom.spacing[2];
        for f in 0..self.faces.len() {
            let [a, b, c] = self.triangle(f);
            let lo_y = a[1].min(b[1]).min(c[1]);
            let hi_y = a[1].max(b[1]).max(c[1]);
            let lo_z = a[2].min(b[2]).min(c[2]);
            let hi_z = a[2].max(b[2]).max(c[2]);
            let to_row = |v: T, axis: usize, j: T| (v - geom.origin[axis] - j) / geom.spacing[axis];
            let j0 = to_row(lo_y, 1, jitter_y).ceil().max(T::zero()).to_usize().unwrap_or(0);
            let j1 = to_row(hi_y, 1, jitter_y).floor().to_isize().unwrap_or(-1);
            let k0 = to_row(lo_z, 2, jitter_z).ceil().max(T::zero()).to_usize().unwrap_or(0);
            let k1 = to_row(hi_z, 2, jitter_z).floor().to_isize().unwrap_or(-1);
            if j1 < 0 || k1 < 0 {
                continue;
            }
            let j1 = (j1 as usize).min(ny - 1);
            let k1 = (k1 as usize).min(nz - 1);
            let normal_x = (b - a).cross(c - a)[0];
            if normal_x == T::zero() {
                continue;
            }
            let sign = if normal_x > T::zero() { 1 } else { -1 };
            for k in k0..=k1 {
                let z = geom.origin[2] + T::of_usize(k) * geom.spacing[2] + jitter_z;
                for j in j0..=j1 {
                    let y = geom.origin[1] + T::of_usize(j) * geom.spacing[1] + jitter_y;
                    if let Some(x) = ray_x_intersection(a, b, c, y, z) {
                        crossings[j + ny * k].push((x, sign));
                    }
                }
            }
        }
        let mut data = vec![T::zero(); geom.len()];
        for k in 0..nz {
            for j in 0..ny {
                let row = &mut crossings[j + ny * k];
                if row.is_empty() {
                    continue;
                }
                row.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap_or(std::cmp::Ordering::Equal));
                let mut winding = 0;
                let mut next = 0;
                for i in 0..nx {
                    let x = geom.origin[0] + T::of_usize(i) * geom.spacing[0];
                    while next < row.len() && row[next].0 <= x {
                        winding += row[next].1;
                        next += 1;
                    }
                    if winding != 0 {
                        data[geom.index(i, j, k)] = T::one();
                    }
                }
            }
        }
        ScalarVolume { geom: *geom, data, background: T::zero() }
    }

    pub fn cast<U: Real>(&self) -> SurfaceMesh<U> {
        SurfaceMesh { vertices: self.vertices.cast(), faces: self.faces.clone() }
    }
}

/// x-coordinate where the line `(·, y, z)` pierces triangle `abc`, if it does.
fn ray_x_intersection<T: Real>(a: Vec3<T>, b: Vec3<T>, c: Vec3<T>, y: T, z: T) -> Option<T> {
    // Barycentric coordinates of (y, z) in the (y, z)-projection of the triangle.
    let d = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2]);
    if d == T::zero() {
        return None;
    }
    let l1 = ((y - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (z - a[2])) / d;
    let l2 = ((b[1] - a[1]) * (z - a[2]) - (y - a[1]) * (b[2] - a[2])) / d;
    let l0 = T::one() - l1 - l2;
    if l0 < T::zero() || l1 < T::zero() || l2 < T::zero() {
        return None;
    }
    Some(l0 * a[0] + l1 * b[0] + l2 * c[0])
}

/// Closest point to `p` on triangle `abc` (Voronoi-region walk).
pub fn closest_point_on_triangle<T: Real>(p: Vec3<T>, a: Vec3<T>, b: Vec3<T>, c: Vec3<T>) -> Vec3<T> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= T::zero() && d2 <= T::zero() {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= T::zero() && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= T::zero() && d1 >= T::zero() && d3 <= T::zero() {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= T::zero() && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= T::zero() && d2 >= T::zero() && d6 <= T::zero() {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= T::zero() && (d4 - d3) >= T::zero() && (d5 - d6) >= T::zero() {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = T::one() / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Axis-aligned cube `[lo, hi]³` with outward winding.
    pub(crate) fn cube_mesh(lo: f64, hi: f64) -> SurfaceMesh<f64> {
        let mut v = Vec::new();
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let c = |t| if t == 0 { lo } else { hi };
                    v.push(Vec3::new(c(i), c(j), c(k)));
                }
            }
        }
        let quads = [
            [0, 2, 3, 1], // z = lo
            [4, 5, 7, 6], // z = hi
            [0, 1, 5, 4], // y = lo
            [2, 6, 7, 3], // y = hi
            [0, 4, 6, 2], // x = lo
            [1, 3, 7, 5], // x = hi
        ];
        let mut faces = Vec::new();
        for q in quads {
            faces.push([q[0], q[1], q[2]]);
            faces.push([q[0], q[2], q[3]]);
        }
        SurfaceMesh::new(PointSet::new(v).unwrap(), faces).unwrap()
    }

    #[test]
    fn cube_volume_and_voxelization() {
        let m = cube_mesh(2.5, 7.5);
        assert!((m.volume() - 125.0).abs() < 1e-12);
        let g = Geometry::cube(12, 1.0);
        let mask = m.voxelize(&g);
        // Voxel centers 3..=7 on each axis.
        assert_eq!(mask.count_foreground(), 125);
        assert_eq!(mask.get(5, 5, 5), 1.0);
        assert_eq!(mask.get(2, 5, 5), 0.0);
    }

    #[test]
    fn invalid_faces_rejected() {
        let pts = PointSet::new(vec![Vec3::<f64>::zero(); 3]).unwrap();
        assert!(SurfaceMesh::new(pts.clone(), vec![[0, 1, 3]]).is_err());
        assert!(SurfaceMesh::new(pts, vec![[0, 1, 1]]).is_err());
        assert!(PointSet::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn closest_point_regions() {
        let a = Vec3::new(0.0, 0.0, 0.0);
        let b = Vec3::new(1.0, 0.0, 0.0);
        let c = Vec3::new(0.0, 1.0, 0.0);
        let inside = closest_point_on_triangle(Vec3::new(0.2, 0.3, 2.0), a, b, c);
        assert!((inside - Vec3::new(0.2, 0.3, 0.0)).norm() < 1e-15);
        let vertex = closest_point_on_triangle(Vec3::new(-1.0, -1.0, 0.5), a, b, c);
        assert_eq!(vertex, a);
        let edge = closest_point_on_triangle(Vec3::new(1.0, 1.0, 0.0), a, b, c);
        assert!((edge - Vec3::new(0.5, 0.5, 0.0)).norm() < 1e-15);
    }
}
