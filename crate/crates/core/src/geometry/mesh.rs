use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::{voxel_center, TsdfGrid};
use super::mc_tables::{CORNERS, EDGES, EDGE_TABLE, TRIANGLE_TABLE};
use super::sdf::{cross, norm, sub, Vec3};
use crate::error::{Error, Result};

/// Triangle mesh in shape units.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (a, b, c) = (self.vertices[a], self.vertices[b], self.vertices[c]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    fn edge_counts(&self) -> BTreeMap<(usize, usize), usize> {
        let mut edges = BTreeMap::new();
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                *edges.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        edges
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let edges = self.edge_counts();
        let mut used = vec![false; self.vertices.len()];
        for t in &self.triangles {
            for &v in t {
                used[v] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - edges.len() as i64 + self.triangles.len() as i64
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.triangles.is_empty() && self.edge_counts().values().all(|&c| c == 2)
    }

    /// ASCII OBJ with `v` and `f` records only (1-based indices).
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            let _ = writeln!(s, "v {:.6} {:.6} {:.6}", v[0], v[1], v[2]);
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        s
    }

    /// OBJ with the `v x y z r g b` vertex-colour extension.
    pub fn to_obj_with_colors(&self, colors: &[[f64; 3]]) -> Result<String> {
        if colors.len() != self.vertices.len() {
            return Err(Error::invalid(format!(
                "{} colours for {} vertices",
                colors.len(),
                self.vertices.len()
            )));
        }
        let mut s = String::new();
        for (v, c) in self.vertices.iter().zip(colors) {
            let _ = writeln!(
                s,
                "v {:.6} {:.6} {:.6} {:.4} {:.4} {:.4}",
                v[0], v[1], v[2], c[0], c[1], c[2]
            );
        }
        for t in &self.triangles {
            let _ = writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1);
        }
        Ok(s)
    }
}

/// Extract the `iso` level set of a grid with the 256-case table.
///
/// Lattice points are voxel centres; vertices are shared between cells
/// through a per-edge cache, so closed surfaces come out watertight.
pub fn marching_cubes(grid: &TsdfGrid, iso: f64) -> Mesh {
    let d = grid.resolution();
    let mut mesh = Mesh::default();
    if d < 2 {
        return mesh;
    }
    let vals = grid.values();
    let at = |x: usize, y: usize, z: usize| vals[x + d * (y + d * z)] as f64;
    let mut cache: HashMap<usize, usize> = HashMap::new();
    for z in 0..d - 1 {
        for y in 0..d - 1 {
            for x in 0..d - 1 {
                let mut corner = [0.0; 8];
                let mut case = 0usize;
                for (i, off) in CORNERS.iter().enumerate() {
                    corner[i] = at(x + off[0], y + off[1], z + off[2]);
                    if corner[i] < iso {
                        case |= 1 << i;
                    }
                }
                let mask = EDGE_TABLE[case];
                if mask == 0 {
                    continue;
                }
                let mut edge_vertex = [usize::MAX; 12];
                for (e, [c0, c1]) in EDGES.iter().enumerate() {
                    if mask & (1 << e) == 0 {
                        continue;
                    }
                    let (o0, o1) = (CORNERS[*c0], CORNERS[*c1]);
                    let p0 = [x + o0[0], y + o0[1], z + o0[2]];
                    let p1 = [x + o1[0], y + o1[1], z + o1[2]];
                    let (lo, hi) = if p0 <= p1 { (p0, p1) } else { (p1, p0) };
                    let axis = (0..3).find(|&a| lo[a] != hi[a]).expect("edge spans one axis");
                    let key = 3 * (lo[0] + d * (lo[1] + d * lo[2])) + axis;
                    let id = *cache.entry(key).or_insert_with(|| {
                        let (v0, v1) = (corner[*c0], corner[*c1]);
                        let w0 = voxel_center(d, p0);
                        let w1 = voxel_center(d, p1);
                        let t = if (v1 - v0).abs() < 1e-12 { 0.5 } else { ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0) };
                        mesh.vertices.push([
                            w0[0] + t * (w1[0] - w0[0]),
                            w0[1] + t * (w1[1] - w0[1]),
                            w0[2] + t * (w1[2] - w0[2]),
                        ]);
                        mesh.vertices.len() - 1
                    });
                    edge_vertex[e] = id;
                }
                for tri in TRIANGLE_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [
                        edge_vertex[tri[0] as usize],
                        edge_vertex[tri[1] as usize],
                        edge_vertex[tri[2] as usize],
                    ];
                    if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                        continue;
                    }
                    mesh.triangles.push(t);
                    if mesh.triangle_area(mesh.triangles.len() - 1) <= 1e-14 {
                        mesh.triangles.pop();
                    }
                }
            }
        }
    }
    mesh
}

/// A non-empty set of 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("point cloud must contain at least one point"));
        }
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::invalid("point cloud has non-finite coordinates"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Every point mapped through `p -> s p + t`.
    pub fn transformed(&self, s: f64, t: Vec3) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [s * p[0] + t[0], s * p[1] + t[1], s * p[2] + t[2]])
                .collect(),
        }
    }

    /// Points satisfying `keep`, or `None` if nothing survives.
    pub fn filtered(&self, keep: impl Fn(&Vec3) -> bool) -> Option<Self> {
        let points: Vec<Vec3> = self.points.iter().copied().filter(|p| keep(p)).collect();
        (!points.is_empty()).then_some(Self { points })
    }
}

/// Area-weighted uniform samples on the mesh surface.
pub fn sample_surface_points(mesh: &Mesh, n: usize, seed: u64) -> Result<PointCloud> {
    if mesh.is_empty() {
        return Err(Error::invalid("cannot sample an empty mesh"));
    }
    if n == 0 {
        return Err(Error::invalid("sample count must be >= 1"));
    }
    let mut cdf = Vec::with_capacity(mesh.triangles.len());
    let mut acc = 0.0;
    for t in 0..mesh.triangles.len() {
        acc += mesh.triangle_area(t);
        cdf.push(acc);
    }
    if !(acc > 0.0) {
        return Err(Error::invalid("mesh has zero surface area"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let r = rng.random::<f64>() * acc;
        let t = cdf.partition_point(|&c| c <= r).min(cdf.len() - 1);
        let [a, b, c] = mesh.triangles[t];
        let (a, b, c) = (mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]);
        let (u, v): (f64, f64) = (rng.random(), rng.random());
        let su = u.sqrt();
        let (wa, wb, wc) = (1.0 - su, su * (1.0 - v), su * v);
        points.push([
            wa * a[0] + wb * b[0] + wc * c[0],
            wa * a[1] + wb * b[1] + wc * c[1],
            wa * a[2] + wb * b[2] + wc * c[2],
        ]);
    }
    PointCloud::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rasterize_tsdf, AnalyticSdf};

    #[test]
    fn tables_are_consistent() {
        for case in 0..256usize {
            let mask = EDGE_TABLE[case];
            for (e, [a, b]) in EDGES.iter().enumerate() {
                let crossing = ((case >> a) & 1) != ((case >> b) & 1);
                assert_eq!(mask & (1 << e) != 0, crossing, "case {case} edge {e}");
            }
            for &idx in TRIANGLE_TABLE[case].iter().take_while(|&&i| i >= 0) {
                assert!(mask & (1 << idx) != 0, "case {case} uses inactive edge {idx}");
            }
        }
    }

    #[test]
    fn all_positive_grid_is_empty() {
        let g = TsdfGrid::empty(8, 0.3);
        assert!(marching_cubes(&g, 0.0).is_empty());
    }

    #[test]
    fn vertices_lie_on_straddling_edges() {
        let g = rasterize_tsdf(&AnalyticSdf::cuboid([0.4, 0.3, 0.5]), 16, 0.3).unwrap();
        let m = marching_cubes(&g, 0.0);
        let h = g.voxel_size();
        for v in &m.vertices {
            // Two coordinates sit exactly on lattice lines.
            let on_lattice = v
                .iter()
                .filter(|c| {
                    let f = (*c + 1.0) / h - 0.5;
                    (f - f.round()).abs() < 1e-9
                })
                .count();
            assert!(on_lattice >= 2, "{v:?}");
        }
    }

    #[test]
    fn single_triangle_sampling_stays_inside() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let pc = sample_surface_points(&mesh, 500, 3).unwrap();
        for p in pc.points() {
            assert_eq!(p[2], 0.0);
            assert!(p[0] >= 0.0 && p[1] >= 0.0 && p[0] + p[1] <= 1.0 + 1e-12);
        }
        assert_eq!(pc, sample_surface_points(&mesh, 500, 3).unwrap());
    }

    #[test]
    fn empty_mesh_cannot_be_sampled() {
        assert!(sample_surface_points(&Mesh::default(), 10, 0).is_err());
    }

    #[test]
    fn obj_export_is_one_based() {
        let mesh = Mesh {
            vertices: vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            triangles: vec![[0, 1, 2]],
        };
        let obj = mesh.to_obj();
        assert!(obj.ends_with("f 1 2 3\n"));
        assert_eq!(obj.lines().count(), 4);
        let colored = mesh.to_obj_with_colors(&[[1.0, 0.0, 0.0]; 3]).unwrap();
        assert!(colored.starts_with("v 0.000000 0.000000 0.000000 1.0000 0.0000 0.0000"));
    }
}
