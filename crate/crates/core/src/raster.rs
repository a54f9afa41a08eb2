//! Depth-tested triangle rasterization with perspective-correct barycentrics.
//!
//! Pixel centers strictly inside a triangle are covered; centers exactly on an
//! edge belong to the triangle for which that edge is a top-left edge, so
//! triangles sharing an edge never both claim (or both miss) a pixel.
//! Back-facing triangles and triangles with a vertex behind the near plane
//! are culled.

use alloc::vec;
use alloc::vec::Vec;

use glam::{DVec2, DVec3};

use crate::camera::Camera;

/// Tile edge length in pixels.
pub const TILE: u32 = 32;

/// Camera-space depth below which a vertex counts as behind the camera.
pub const NEAR: f64 = 1e-4;

/// The front-most surface sample of one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fragment {
    pub px: u32,
    pub py: u32,
    pub face: u32,
    /// Perspective-correct barycentrics in the face's vertex order.
    pub bary: [f64; 3],
    /// Camera-space depth of the hit.
    pub depth: f64,
}

impl Fragment {
    /// `Σ α_i v_i` for the face's posed vertices.
    pub fn point(&self, vertices: &[DVec3], faces: &[[u32; 3]]) -> DVec3 {
        let f = faces[self.face as usize];
        (0..3).map(|i| self.bary[i] * vertices[f[i] as usize]).sum()
    }
}

#[derive(Debug, Clone)]
pub struct Framebuffer {
    pub width: u32,
    pub height: u32,
    pub depth: Vec<f64>,
    pub fragments: Vec<Option<Fragment>>,
}

impl Framebuffer {
    pub fn new(width: u32, height: u32) -> Self {
        let n = width as usize * height as usize;
        Self { width, height, depth: vec![f64::INFINITY; n], fragments: vec![None; n] }
    }

    pub fn covered(&self) -> usize {
        self.fragments.iter().filter(|f| f.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy)]
struct ScreenTri {
    face: u32,
    /// Screen positions, reordered to positive orientation.
    p: [DVec2; 3],
    inv_z: [f64; 3],
    /// Position in the original face of each reordered vertex.
    order: [usize; 3],
    area2: f64,
    min: DVec2,
    max: DVec2,
}

#[inline]
fn edge(a: DVec2, b: DVec2, p: DVec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn owns_edge(a: DVec2, b: DVec2) -> bool {
    let d = b - a;
    d.y < 0.0 || (d.y == 0.0 && d.x > 0.0)
}

fn setup(vertices: &[DVec3], faces: &[[u32; 3]], camera: &Camera) -> Vec<ScreenTri> {
    let cam: Vec<DVec3> = vertices.iter().map(|v| camera.to_camera(*v)).collect();
    let mut tris = Vec::new();
    for (fi, f) in faces.iter().enumerate() {
        let c = f.map(|i| cam[i as usize]);
        if c.iter().any(|p| p.z <= NEAR) {
            continue;
        }
        let n = (c[1] - c[0]).cross(c[2] - c[0]);
        if n.dot(c[0]) >= 0.0 {
            continue;
        }
        let s = c.map(|p| DVec2::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy));
        let mut order = [0, 1, 2];
        let mut area2 = edge(s[0], s[1], s[2]);
        if area2 == 0.0 || !area2.is_finite() {
            continue;
        }
        if area2 < 0.0 {
            order = [0, 2, 1];
            area2 = -area2;
        }
        let p = order.map(|i| s[i]);
        tris.push(ScreenTri {
            face: fi as u32,
            p,
            inv_z: order.map(|i| 1.0 / c[i].z),
            order,
            area2,
            min: p[0].min(p[1]).min(p[2]),
            max: p[0].max(p[1]).max(p[2]),
        });
    }
    tris
}

/// Pixel-center range `[lo, hi]` covered by a screen-space interval.
fn pixel_span(lo: f64, hi: f64, size: u32) -> Option<(u32, u32)> {
    let a = libm::ceil(lo - 0.5).max(0.0);
    let b = libm::floor(hi - 0.5).min(size as f64 - 1.0);
    (a <= b).then(|| (a as u32, b as u32))
}

fn raster_tri(t: &ScreenTri, x0: u32, x1: u32, y0: u32, y1: u32, fb: &mut Framebuffer) {
    let Some((px0, px1)) = pixel_span(t.min.x, t.max.x, fb.width) else { return };
    let Some((py0, py1)) = pixel_span(t.min.y, t.max.y, fb.height) else { return };
    let (px0, px1) = (px0.max(x0), px1.min(x1));
    let (py0, py1) = (py0.max(y0), py1.min(y1));
    let [a, b, c] = t.p;
    let own = [owns_edge(b, c), owns_edge(c, a), owns_edge(a, b)];
    for py in py0..=py1 {
        for px in px0..=px1 {
            let p = DVec2::new(px as f64 + 0.5, py as f64 + 0.5);
            let e = [edge(b, c, p), edge(c, a, p), edge(a, b, p)];
            if !(0..3).all(|i| e[i] > 0.0 || (e[i] == 0.0 && own[i])) {
                continue;
            }
            let l = e.map(|v| v / t.area2);
            let w = [l[0] * t.inv_z[0], l[1] * t.inv_z[1], l[2] * t.inv_z[2]];
            let sum = w[0] + w[1] + w[2];
            let depth = 1.0 / sum;
            let i = (py * fb.width + px) as usize;
            if depth < fb.depth[i] {
                let mut bary = [0.0; 3];
                for k in 0..3 {
                    bary[t.order[k]] = w[k] / sum;
                }
                fb.depth[i] = depth;
                fb.fragments[i] = Some(Fragment { px, py, face: t.face, bary, depth });
            }
        }
    }
}

/// Rasterizes a posed mesh. Triangles are binned into [`TILE`]-sized tiles
/// and each tile is filled independently, in face order.
pub fn rasterize(vertices: &[DVec3], faces: &[[u32; 3]], camera: &Camera) -> Framebuffer {
    let mut fb = Framebuffer::new(camera.width, camera.height);
    let tris = setup(vertices, faces, camera);
    let tiles_x = camera.width.div_ceil(TILE);
    let tiles_y = camera.height.div_ceil(TILE);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    for (ti, t) in tris.iter().enumerate() {
        let (Some((x0, x1)), Some((y0, y1))) =
            (pixel_span(t.min.x, t.max.x, camera.width), pixel_span(t.min.y, t.max.y, camera.height))
        else {
            continue;
        };
        for ty in y0 / TILE..=y1 / TILE {
            for tx in x0 / TILE..=x1 / TILE {
                bins[(ty * tiles_x + tx) as usize].push(ti as u32);
            }
        }
    }
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let x0 = tx * TILE;
            let y0 = ty * TILE;
            let x1 = (x0 + TILE).min(camera.width) - 1;
            let y1 = (y0 + TILE).min(camera.height) - 1;
            for &ti in &bins[(ty * tiles_x + tx) as usize] {
                raster_tri(&tris[ti as usize], x0, x1, y0, y1, &mut fb);
            }
        }
    }
    fb
}

#[cfg(test)]
mod tests {
    use super::*;
    use glam::DAffine3;

    fn cam(w: u32, h: u32) -> Camera {
        Camera { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, width: w, height: h, world_to_camera: DAffine3::IDENTITY }
    }

    /// World point at depth `z` projecting to pixel coordinates `(u, v)`.
    fn at(u: f64, v: f64, z: f64) -> DVec3 {
        DVec3::new(u * z, v * z, z)
    }

    #[test]
    fn vertex_pixel_gets_one_hot_barycentrics() {
        // front-facing: normal toward the camera (-z)
        let v = [at(0.5, 0.5, 2.0), at(0.5, 8.5, 2.0), at(8.5, 0.5, 2.0)];
        let fb = rasterize(&v, &[[0, 1, 2]], &cam(10, 10));
        let f = fb.fragments[0].expect("pixel (0,0) center coincides with vertex 0");
        assert!((f.bary[0] - 1.0).abs() < 1e-12);
        assert!(fb.covered() > 0);
    }

    #[test]
    fn back_faces_are_culled() {
        let v = [at(0.5, 0.5, 2.0), at(8.5, 0.5, 2.0), at(0.5, 8.5, 2.0)];
        let fb = rasterize(&v, &[[0, 1, 2]], &cam(10, 10));
        assert_eq!(fb.covered(), 0);
    }

    #[test]
    fn centroid_is_a_third_each() {
        let z = 3.0;
        let c = (5.5, 5.5);
        let r = 4.0;
        let pts: Vec<DVec3> = (0..3)
            .map(|k| {
                let a = core::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * core::f64::consts::PI / 3.0;
                at(c.0 + r * libm::cos(a), c.1 - r * libm::sin(a), z)
            })
            .collect();
        let mut fb = rasterize(&pts, &[[0, 1, 2]], &cam(12, 12));
        if fb.covered() == 0 {
            fb = rasterize(&pts, &[[0, 2, 1]], &cam(12, 12));
        }
        let f = fb.fragments[5 * 12 + 5].unwrap();
        for b in f.bary {
            assert!((b - 1.0 / 3.0).abs() < 1e-4);
        }
    }

    #[test]
    fn nearer_triangle_wins() {
        let far = [at(0.0, 0.0, 5.0), at(0.0, 10.0, 5.0), at(10.0, 0.0, 5.0)];
        let near = [at(0.0, 0.0, 2.0), at(0.0, 10.0, 2.0), at(10.0, 0.0, 2.0)];
        let v: Vec<DVec3> = far.iter().chain(near.iter()).copied().collect();
        let fb = rasterize(&v, &[[0, 1, 2], [3, 4, 5]], &cam(10, 10));
        let f = fb.fragments[11].unwrap();
        assert_eq!(f.face, 1);
        assert!((f.depth - 2.0).abs() < 1e-12);
        let fb = rasterize(&v, &[[3, 4, 5], [0, 1, 2]], &cam(10, 10));
        assert_eq!(fb.fragments[11].unwrap().face, 0);
    }

    #[test]
    fn shared_edge_is_claimed_once() {
        // a square split along its diagonal, corners on pixel centers
        let v = [at(0.5, 0.5, 1.0), at(0.5, 6.5, 1.0), at(6.5, 6.5, 1.0), at(6.5, 0.5, 1.0)];
        let fb_a = rasterize(&v, &[[0, 1, 2]], &cam(8, 8));
        let fb_b = rasterize(&v, &[[0, 2, 3]], &cam(8, 8));
        let fb = rasterize(&v, &[[0, 1, 2], [0, 2, 3]], &cam(8, 8));
        for i in 0..64 {
            let a = fb_a.fragments[i].is_some() as u32;
            let b = fb_b.fragments[i].is_some() as u32;
            assert!(a + b <= 1, "pixel {i} double-covered");
            assert_eq!(a + b == 1, fb.fragments[i].is_some());
        }
        // interior diagonal pixels are covered by exactly one
        for k in 1..6 {
            let i = k * 8 + k;
            assert!(fb.fragments[i].is_some(), "gap at diagonal pixel {k}");
        }
    }

    #[test]
    fn behind_camera_is_culled() {
        let v = [at(0.5, 0.5, 2.0), at(0.5, 8.5, -2.0), at(8.5, 0.5, 2.0)];
        let fb = rasterize(&v, &[[0, 1, 2]], &cam(10, 10));
        assert_eq!(fb.covered(), 0);
    }
}
