//! Quadric-error edge-collapse simplification.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use glam::{DMat3, DVec3};

use crate::mesh::TriMesh;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplifyConfig {
    pub target_faces: usize,
    /// Collapses whose quadric error exceeds `max_error²` are rejected. The
    /// error bounds the distance of the new vertex to every original plane
    /// merged into it.
    pub max_error: Option<f64>,
}

impl SimplifyConfig {
    pub fn to_faces(target_faces: usize) -> Self {
        Self { target_faces, max_error: None }
    }
}

/// Symmetric 4×4 quadric in upper-triangular order.
#[derive(Debug, Clone, Copy, Default)]
struct Quadric([f64; 10]);

impl Quadric {
    fn plane(n: DVec3, d: f64) -> Self {
        let (a, b, c) = (n.x, n.y, n.z);
        Self([a * a, a * b, a * c, a * d, b * b, b * c, b * d, c * c, c * d, d * d])
    }

    fn add(&mut self, o: &Quadric) {
        for k in 0..10 {
            self.0[k] += o.0[k];
        }
    }

    fn sum(a: &Quadric, b: &Quadric) -> Quadric {
        let mut q = *a;
        q.add(b);
        q
    }

    fn eval(&self, p: DVec3) -> f64 {
        let q = &self.0;
        let (x, y, z) = (p.x, p.y, p.z);
        (q[0] * x * x + 2.0 * q[1] * x * y + 2.0 * q[2] * x * z + 2.0 * q[3] * x + q[4] * y * y + 2.0 * q[5] * y * z
            + 2.0 * q[6] * y
            + q[7] * z * z
            + 2.0 * q[8] * z
            + q[9])
            .max(0.0)
    }

    fn minimizer(&self) -> Option<DVec3> {
        let q = &self.0;
        let a = DMat3::from_cols_array(&[q[0], q[1], q[2], q[1], q[4], q[5], q[2], q[5], q[7]]);
        let det = a.determinant();
        let scale = q[0] + q[4] + q[7];
        if scale <= 0.0 || det.abs() < 1e-12 * scale * scale * scale {
            return None;
        }
        let p = a.inverse() * -DVec3::new(q[3], q[6], q[8]);
        p.is_finite().then_some(p)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    cost: f64,
    u: u32,
    v: u32,
    stamp: (u32, u32),
    target: DVec3,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    // min-heap on cost, ties by vertex ids for determinism
    fn cmp(&self, other: &Self) -> Ordering {
        other.cost.total_cmp(&self.cost).then_with(|| (other.u, other.v).cmp(&(self.u, self.v)))
    }
}

struct State {
    pos: Vec<DVec3>,
    quad: Vec<Quadric>,
    faces: Vec<[u32; 3]>,
    face_alive: Vec<bool>,
    vert_faces: Vec<Vec<u32>>,
    stamp: Vec<u32>,
    alive_faces: usize,
    alive_verts: usize,
}

impl State {
    fn neighbors(&self, v: u32, out: &mut Vec<u32>) {
        out.clear();
        for &f in &self.vert_faces[v as usize] {
            for w in self.faces[f as usize] {
                if w != v && !out.contains(&w) {
                    out.push(w);
                }
            }
        }
    }

    fn candidate(&self, u: u32, v: u32) -> Candidate {
        let (u, v) = (u.min(v), u.max(v));
        let q = Quadric::sum(&self.quad[u as usize], &self.quad[v as usize]);
        let (pu, pv) = (self.pos[u as usize], self.pos[v as usize]);
        let mut best = (q.eval(pu), pu);
        for p in [pv, (pu + pv) * 0.5].into_iter().chain(q.minimizer()) {
            let c = q.eval(p);
            if c < best.0 {
                best = (c, p);
            }
        }
        Candidate { cost: best.0, u, v, stamp: (self.stamp[u as usize], self.stamp[v as usize]), target: best.1 }
    }

    /// Link condition plus the no-flip test.
    fn can_collapse(&self, u: u32, v: u32, p: DVec3, scratch: &mut (Vec<u32>, Vec<u32>)) -> bool {
        self.neighbors(u, &mut scratch.0);
        self.neighbors(v, &mut scratch.1);
        let common = scratch.0.iter().filter(|w| scratch.1.contains(w)).count();
        let shared = self.vert_faces[u as usize].iter().filter(|f| self.faces[**f as usize].contains(&v)).count();
        if common != shared || self.alive_verts <= 4 {
            return false;
        }
        for &x in &[u, v] {
            for &f in &self.vert_faces[x as usize] {
                let face = self.faces[f as usize];
                if face.contains(&u) && face.contains(&v) {
                    continue;
                }
                let old = face.map(|i| self.pos[i as usize]);
                let new = face.map(|i| if i == x { p } else { self.pos[i as usize] });
                let n0 = (old[1] - old[0]).cross(old[2] - old[0]);
                let n1 = (new[1] - new[0]).cross(new[2] - new[0]);
                if n1.length_squared() <= 1e-30 * n0.length_squared().max(1e-300) || n0.dot(n1) <= 0.0 {
                    return false;
                }
            }
        }
        true
    }

    fn collapse(&mut self, u: u32, v: u32, p: DVec3) {
        let vf = core::mem::take(&mut self.vert_faces[v as usize]);
        for f in vf {
            let face = &mut self.faces[f as usize];
            if face.contains(&u) {
                self.face_alive[f as usize] = false;
                self.alive_faces -= 1;
                for w in *face {
                    if w != u && w != v {
                        self.vert_faces[w as usize].retain(|g| *g != f);
                    }
                }
            } else {
                for w in face.iter_mut() {
                    if *w == v {
                        *w = u;
                    }
                }
                self.vert_faces[u as usize].push(f);
            }
        }
        let alive = &self.face_alive;
        self.vert_faces[u as usize].retain(|f| alive[*f as usize]);
        self.pos[u as usize] = p;
        let qv = self.quad[v as usize];
        self.quad[u as usize].add(&qv);
        self.stamp[u as usize] += 1;
        self.stamp[v as usize] += 1;
        self.alive_verts -= 1;
    }
}

/// Collapses edges in order of increasing quadric error until the face
/// count reaches the target or no admissible collapse remains. Degenerate
/// faces are removed first. Collapses that would reverse any surviving
/// face's normal, or break the edge link condition, are rejected.
pub fn simplify(mesh: &TriMesh, cfg: &SimplifyConfig) -> TriMesh {
    let mut mesh = mesh.clone();
    mesh.remove_degenerate();
    if mesh.faces.len() <= cfg.target_faces {
        return mesh;
    }
    let nv = mesh.vertices.len();
    let mut quad = vec![Quadric::default(); nv];
    let mut vert_faces = vec![Vec::new(); nv];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let [a, b, c] = f.map(|i| mesh.vertices[i as usize]);
        let n = (b - a).cross(c - a).normalize_or_zero();
        let q = Quadric::plane(n, -n.dot(a));
        for &v in f {
            quad[v as usize].add(&q);
            vert_faces[v as usize].push(fi as u32);
        }
    }
    let mut st = State {
        pos: mesh.vertices.clone(),
        quad,
        face_alive: vec![true; mesh.faces.len()],
        alive_faces: mesh.faces.len(),
        alive_verts: nv,
        faces: mesh.faces.clone(),
        vert_faces,
        stamp: vec![0; nv],
    };
    let limit = cfg.max_error.map(|e| e * e);
    let mut heap = BinaryHeap::new();
    for (a, b) in mesh.edge_counts().keys() {
        heap.push(st.candidate(*a, *b));
    }
    let mut scratch = (Vec::new(), Vec::new());
    let mut nbrs = Vec::new();
    while st.alive_faces > cfg.target_faces {
        let Some(c) = heap.pop() else { break };
        if c.stamp != (st.stamp[c.u as usize], st.stamp[c.v as usize]) {
            continue;
        }
        if limit.is_some_and(|l| c.cost > l) {
            break;
        }
        if !st.can_collapse(c.u, c.v, c.target, &mut scratch) {
            continue;
        }
        st.collapse(c.u, c.v, c.target);
        st.neighbors(c.u, &mut nbrs);
        for &w in &nbrs {
            heap.push(st.candidate(c.u, w));
        }
    }
    let faces = st.faces.iter().zip(&st.face_alive).filter(|(_, a)| **a).map(|(f, _)| *f).collect();
    let mut out = TriMesh { vertices: st.pos, faces };
    out.compact();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::icosphere;

    #[test]
    fn target_above_count_is_identity() {
        let m = icosphere(1.0, 2);
        assert!(simplify(&m, &SimplifyConfig::to_faces(10_000)) == m);
    }

    #[test]
    fn icosphere_reduction_keeps_shape() {
        let m = icosphere(1.0, 5);
        assert_eq!(m.faces.len(), 20480);
        let s = simplify(&m, &SimplifyConfig::to_faces(15_000));
        assert!(s.faces.len() <= 15_000);
        assert!(s.is_closed());
        assert_eq!(s.euler_characteristic(), 2);
        for v in &s.vertices {
            assert!((v.length() - 1.0).abs() < 0.01);
        }
        for f in 0..s.faces.len() {
            let c: DVec3 = s.faces[f].iter().map(|i| s.vertices[*i as usize]).sum();
            assert!(s.face_normal(f).dot(c) > 0.0);
        }
    }

    #[test]
    fn degenerate_faces_go_first() {
        let mut m = icosphere(1.0, 1);
        let n = m.faces.len();
        m.faces.push([0, 0, 1]);
        let s = simplify(&m, &SimplifyConfig::to_faces(1000));
        assert_eq!(s.faces.len(), n);
    }

    #[test]
    fn error_bound_stops_early() {
        let m = icosphere(1.0, 3);
        let s = simplify(&m, &SimplifyConfig { target_faces: 10, max_error: Some(1e-4) });
        assert!(s.faces.len() > 10);
    }
}
