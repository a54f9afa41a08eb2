//! Pinhole cameras and rays. Camera space is +X right, +Y down, +Z forward.

use glam::{DAffine3, DMat3, DVec3};

use crate::field::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World-to-camera rigid transform.
    pub world_to_camera: DAffine3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: DVec3,
    /// Unit length.
    pub direction: DVec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + t * self.direction
    }
}

impl Camera {
    /// Camera at `eye` looking at `target`; `fov_y` in radians.
    pub fn look_at(eye: DVec3, target: DVec3, up: DVec3, fov_y: f64, width: u32, height: u32) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(up).normalize();
        let y = z.cross(x);
        let rot = DMat3::from_cols(x, y, z).transpose();
        let f = 0.5 * height as f64 / libm::tan(0.5 * fov_y);
        Self {
            fx: f,
            fy: f,
            cx: 0.5 * width as f64,
            cy: 0.5 * height as f64,
            width,
            height,
            world_to_camera: DAffine3::from_mat3_translation(rot, -(rot * eye)),
        }
    }

    pub fn center(&self) -> DVec3 {
        let rt = self.world_to_camera.matrix3.transpose();
        -(rt * self.world_to_camera.translation)
    }

    /// Ray through continuous pixel coordinates `(u, v)`.
    pub fn generate_ray(&self, u: f64, v: f64) -> Ray {
        let dir_cam = DVec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let rt = self.world_to_camera.matrix3.transpose();
        Ray { origin: self.center(), direction: (rt * dir_cam).normalize() }
    }

    /// Ray through the center of pixel `(px, py)`.
    pub fn pixel_ray(&self, px: u32, py: u32) -> Ray {
        self.generate_ray(px as f64 + 0.5, py as f64 + 0.5)
    }

    pub fn to_camera(&self, p: DVec3) -> DVec3 {
        self.world_to_camera.transform_point3(p)
    }

    /// `(u, v, z_cam)`; `None` when the point is not in front of the camera.
    pub fn project(&self, p: DVec3) -> Option<(f64, f64, f64)> {
        let c = self.to_camera(p);
        (c.z > 1e-9).then(|| (self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy, c.z))
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    /// Same camera at a different resolution (intrinsics scaled).
    pub fn resized(&self, width: u32, height: u32) -> Camera {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Camera { fx: self.fx * sx, fy: self.fy * sy, cx: self.cx * sx, cy: self.cy * sy, width, height, ..*self }
    }
}

/// Slab test; `t_near` is clamped to zero. `None` when the ray misses.
pub fn ray_box(ray: &Ray, bbox: &BoundingBox) -> Option<(f64, f64)> {
    let (lo, hi) = (bbox.min(), bbox.max());
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        let o = ray.origin[a];
        let d = ray.direction[a];
        if d == 0.0 {
            if o < lo[a] || o > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut ta, mut tb) = ((lo[a] - o) * inv, (hi[a] - o) * inv);
        if ta > tb {
            core::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    (t1 > t0).then_some((t0, t1))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ident_cam() -> Camera {
        Camera { fx: 100.0, fy: 100.0, cx: 50.0, cy: 40.0, width: 100, height: 80, world_to_camera: DAffine3::IDENTITY }
    }

    #[test]
    fn principal_ray_is_optical_axis() {
        let c = ident_cam();
        assert_eq!(c.generate_ray(50.0, 40.0).direction, DVec3::Z);
        let r = c.generate_ray(150.0, 40.0);
        assert!((r.direction - DVec3::new(1.0, 0.0, 1.0).normalize()).length() < 1e-12);
    }

    #[test]
    fn translated_camera_shifts_origin() {
        let mut c = ident_cam();
        let t = DVec3::new(1.0, 2.0, 3.0);
        c.world_to_camera = DAffine3::from_translation(-t);
        let r = c.generate_ray(50.0, 40.0);
        assert_eq!(r.origin, t);
        assert_eq!(r.direction, DVec3::Z);
    }

    #[test]
    fn look_at_round_trip() {
        let c = Camera::look_at(DVec3::new(0.0, 0.0, -3.0), DVec3::ZERO, DVec3::Y, 0.8, 64, 64);
        let (u, v, z) = c.project(DVec3::ZERO).unwrap();
        assert!((u - 32.0).abs() < 1e-9 && (v - 32.0).abs() < 1e-9 && (z - 3.0).abs() < 1e-12);
        // world up projects upward in the image
        let (_, v_up, _) = c.project(DVec3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(v_up < 32.0);
        assert!((c.center() - DVec3::new(0.0, 0.0, -3.0)).length() < 1e-12);
    }

    #[test]
    fn slab_examples() {
        let b = BoundingBox::new([0.0; 3], [1.0; 3]).unwrap();
        let r = Ray { origin: DVec3::new(0.5, 0.5, -1.0), direction: DVec3::Z };
        assert_eq!(ray_box(&r, &b), Some((1.0, 2.0)));
        let r = Ray { origin: DVec3::new(2.0, 0.5, -1.0), direction: DVec3::Z };
        assert_eq!(ray_box(&r, &b), None);
        let r = Ray { origin: DVec3::splat(0.5), direction: DVec3::X };
        assert_eq!(ray_box(&r, &b), Some((0.0, 0.5)));
        let r = Ray { origin: DVec3::new(0.5, 0.5, 2.0), direction: DVec3::Z };
        assert_eq!(ray_box(&r, &b), None);
    }
}
