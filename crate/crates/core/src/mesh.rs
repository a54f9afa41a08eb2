//! Triangle meshes and marching-cubes isosurface extraction.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use glam::DVec3;

use crate::mc_table::TRI_TABLE;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriMesh {
    pub vertices: Vec<DVec3>,
    pub faces: Vec<[u32; 3]>,
}

impl TriMesh {
    pub fn face_normal(&self, f: usize) -> DVec3 {
        let [a, b, c] = self.faces[f].map(|i| self.vertices[i as usize]);
        (b - a).cross(c - a)
    }

    /// Signed enclosed volume; positive for outward-facing closed meshes.
    pub fn signed_volume(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let [a, b, c] = f.map(|i| self.vertices[i as usize]);
                a.dot(b.cross(c)) / 6.0
            })
            .sum()
    }

    /// Undirected edges with their face counts.
    pub fn edge_counts(&self) -> BTreeMap<(u32, u32), u32> {
        let mut m = BTreeMap::new();
        for f in &self.faces {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *m.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        m
    }

    /// Every edge is shared by exactly two faces.
    pub fn is_closed(&self) -> bool {
        !self.faces.is_empty() && self.edge_counts().values().all(|c| *c == 2)
    }

    /// `V - E + F` over referenced vertices.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for f in &self.faces {
            for v in f {
                used[*v as usize] = true;
            }
        }
        let v = used.iter().filter(|u| **u).count() as i64;
        v - self.edge_counts().len() as i64 + self.faces.len() as i64
    }

    /// Drops faces with repeated indices or zero area, then unused vertices.
    pub fn remove_degenerate(&mut self) {
        let verts = &self.vertices;
        self.faces.retain(|f| {
            f[0] != f[1] && f[1] != f[2] && f[0] != f[2] && {
                let [a, b, c] = f.map(|i| verts[i as usize]);
                (b - a).cross(c - a).length_squared() > 0.0
            }
        });
        self.compact();
    }

    /// Removes unreferenced vertices, preserving order.
    pub fn compact(&mut self) {
        let mut remap = vec![u32::MAX; self.vertices.len()];
        for f in &self.faces {
            for v in f {
                remap[*v as usize] = 0;
            }
        }
        let mut verts = Vec::new();
        for (i, r) in remap.iter_mut().enumerate() {
            if *r == 0 {
                *r = verts.len() as u32;
                verts.push(self.vertices[i]);
            }
        }
        for f in &mut self.faces {
            for v in f.iter_mut() {
                *v = remap[*v as usize];
            }
        }
        self.vertices = verts;
    }

    pub fn bounds(&self) -> Option<(DVec3, DVec3)> {
        let mut it = self.vertices.iter();
        let first = *it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(*v), hi.max(*v))))
    }
}

/// Geodesic sphere: an icosahedron subdivided `levels` times, `20·4^levels`
/// faces, outward winding.
pub fn icosphere(radius: f64, levels: u32) -> TriMesh {
    let t = (1.0 + libm::sqrt(5.0)) / 2.0;
    let mut vertices: Vec<DVec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|p| DVec3::from_array(*p).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..levels {
        let mut mid: BTreeMap<(u32, u32), u32> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let m: [u32; 3] = core::array::from_fn(|k| {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                    vertices.push(((vertices[a as usize] + vertices[b as usize]) * 0.5).normalize());
                    (vertices.len() - 1) as u32
                })
            });
            next.push([f[0], m[0], m[2]]);
            next.push([f[1], m[1], m[0]]);
            next.push([f[2], m[2], m[1]]);
            next.push(m);
        }
        faces = next;
    }
    for v in &mut vertices {
        *v *= radius;
    }
    TriMesh { vertices, faces }
}

/// Scalar samples on a regular lattice, `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub dims: [usize; 3],
    pub origin: DVec3,
    pub spacing: DVec3,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn from_fn(dims: [usize; 3], origin: DVec3, spacing: DVec3, mut f: impl FnMut(DVec3) -> f64) -> Self {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    values.push(f(origin + spacing * DVec3::new(x as f64, y as f64, z as f64)));
                }
            }
        }
        Self { dims, origin, spacing, values }
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn position(&self, x: usize, y: usize, z: usize) -> DVec3 {
        self.origin + self.spacing * DVec3::new(x as f64, y as f64, z as f64)
    }

    pub fn voxel_diagonal(&self) -> f64 {
        self.spacing.length()
    }
}

const CORNERS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
    [1, 0, 1],
    [1, 1, 1],
    [0, 1, 1],
];

const EDGES: [[usize; 2]; 12] = [
    [0, 1],
    [1, 2],
    [2, 3],
    [3, 0],
    [4, 5],
    [5, 6],
    [6, 7],
    [7, 4],
    [0, 4],
    [1, 5],
    [2, 6],
    [3, 7],
];

/// Extracts the `iso` level set; the region with values above `iso` is the
/// inside and faces are oriented outward. Vertices on shared lattice edges
/// are welded.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> TriMesh {
    let [nx, ny, nz] = grid.dims;
    let mut mesh = TriMesh::default();
    if nx < 2 || ny < 2 || nz < 2 {
        return mesh;
    }
    let mut welded: BTreeMap<(usize, u8), u32> = BTreeMap::new();
    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let corner = |c: usize| {
                    let [dx, dy, dz] = CORNERS[c];
                    (x + dx, y + dy, z + dz)
                };
                let vals: [f64; 8] = core::array::from_fn(|c| {
                    let (a, b, d) = corner(c);
                    grid.values[grid.index(a, b, d)]
                });
                let mut case = 0usize;
                for (c, v) in vals.iter().enumerate() {
                    if *v < iso {
                        case |= 1 << c;
                    }
                }
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRI_TABLE[case];
                let mut k = 0;
                while k + 2 < 16 && row[k] >= 0 {
                    let mut tri = [0u32; 3];
                    for j in 0..3 {
                        let e = row[k + j] as usize;
                        let [ca, cb] = EDGES[e];
                        let (pa, pb) = (corner(ca), corner(cb));
                        let (lo, axis) = if pa < pb { (pa, pb) } else { (pb, pa) };
                        let axis = if axis.0 != lo.0 { 0u8 } else if axis.1 != lo.1 { 1 } else { 2 };
                        let key = (grid.index(lo.0, lo.1, lo.2), axis);
                        tri[j] = *welded.entry(key).or_insert_with(|| {
                            let (va, vb) = (vals[ca], vals[cb]);
                            let t = if vb == va { 0.5 } else { ((iso - va) / (vb - va)).clamp(0.0, 1.0) };
                            let a = grid.position(pa.0, pa.1, pa.2);
                            let b = grid.position(pb.0, pb.1, pb.2);
                            mesh.vertices.push(a + t * (b - a));
                            (mesh.vertices.len() - 1) as u32
                        });
                    }
                    mesh.faces.push(tri);
                    k += 3;
                }
            }
        }
    }
    mesh
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sphere_grid(n: usize, r: f64) -> ScalarGrid {
        let h = 2.0 / (n - 1) as f64;
        ScalarGrid::from_fn([n; 3], DVec3::splat(-1.0), DVec3::splat(h), |p| r - p.length())
    }

    #[test]
    fn sphere_is_closed_and_outward() {
        let g = sphere_grid(24, 0.6);
        let mut m = marching_cubes(&g, 0.0);
        m.remove_degenerate();
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
        let v = m.signed_volume();
        let exact = 4.0 / 3.0 * core::f64::consts::PI * 0.6f64.powi(3);
        assert!(v > 0.0 && (v - exact).abs() / exact < 0.05, "volume {v} vs {exact}");
        for p in &m.vertices {
            assert!((p.length() - 0.6).abs() < g.voxel_diagonal());
        }
    }

    #[test]
    fn icosphere_topology() {
        let m = icosphere(2.0, 3);
        assert_eq!(m.faces.len(), 20 * 64);
        assert!(m.is_closed());
        assert_eq!(m.euler_characteristic(), 2);
        assert!(m.signed_volume() > 0.0);
        assert!(m.vertices.iter().all(|v| (v.length() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn empty_and_full_grids_have_no_surface() {
        let g = ScalarGrid::from_fn([4; 3], DVec3::ZERO, DVec3::ONE, |_| 1.0);
        assert!(marching_cubes(&g, 0.0).faces.is_empty());
        let g = ScalarGrid::from_fn([4; 3], DVec3::ZERO, DVec3::ONE, |_| -1.0);
        assert!(marching_cubes(&g, 0.0).faces.is_empty());
    }
}
