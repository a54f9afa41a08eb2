//! Procedural articulated scenes with an analytic radiance field, and simple
//! closed-form phantoms.

use alloc::vec;
use alloc::vec::Vec;

use glam::{DAffine3, DQuat, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{ray_box, Camera, Ray};
use crate::field::{BoundingBox, FactorGroup, FactorizedField, Factor, GridDims};
use crate::math::smoothstep;
use crate::mesh::icosphere;
use crate::raymarch::{render_deformed_image, PosedScene, RayResult, RenderConfig, RenderOutput};
use crate::skinning::{BoneAffines, Pose, Skeleton, SkinnedTemplate, VertexWeights};
use crate::trainer::{Dataset, Frame, TrainError};

/// Rank-1 field whose `σ·step = 0.5` level set is the sphere of `radius`
/// about the origin, with constant color. The softplus gain is `1/step`.
///
/// The density pre-activation is `0.5 + k(R² − |x|²)`, split as
/// `P_yx = 0.5 + k(R² − x² − y²)`, `l_z = 1`, `P_xz = −k z²`, `l_y = 1`.
pub fn sphere_phantom(bbox: &BoundingBox, dims: GridDims, radius: f64, step: f64, rgb: [f64; 3]) -> FactorizedField {
    sphere_phantom_with_falloff(bbox, dims, radius, step, rgb, 2.0)
}

/// [`sphere_phantom`] whose pre-activation drops from 0.5 to 0 over
/// `falloff` voxels outside the sphere. Small values approach a solid ball
/// whose opacity silhouette matches the level set.
pub fn sphere_phantom_with_falloff(
    bbox: &BoundingBox,
    dims: GridDims,
    radius: f64,
    step: f64,
    rgb: [f64; 3],
    falloff: f64,
) -> FactorizedField {
    let ext = bbox.extent();
    let h = (ext.x / (dims.w - 1) as f64).min(ext.y / (dims.h - 1) as f64).min(ext.z / (dims.d - 1) as f64);
    let k = 1.0 / (4.0 * falloff * h * radius);
    let lo = bbox.min();
    let node = |axis: usize, i: usize, n: usize| lo[axis] + ext[axis] * i as f64 / (n - 1) as f64;
    let mut density = FactorGroup::zeros(1, dims).expect("rank 1");
    for row in 0..dims.h {
        let y = node(1, row, dims.h);
        for col in 0..dims.w {
            let x = node(0, col, dims.w);
            density.set(Factor::PlaneYx, 0, row, col, (0.5 + k * (radius * radius - x * x - y * y)) as f32);
        }
    }
    for row in 0..dims.w {
        for col in 0..dims.d {
            let z = node(2, col, dims.d);
            density.set(Factor::PlaneXz, 0, row, col, (-k * z * z) as f32);
        }
    }
    for i in 0..dims.d {
        density.set(Factor::LineZ, 0, i, 0, 1.0);
    }
    for i in 0..dims.h {
        density.set(Factor::LineY, 0, i, 0, 1.0);
    }
    let color = rgb.map(|c| {
        let logit = libm::log(c / (1.0 - c)) as f32;
        FactorGroup::filled(1, dims, logit, 1.0 / 3.0).expect("rank 1")
    });
    FactorizedField::new(*bbox, density, color, (1.0 / step) as f32).expect("valid phantom")
}

/// Capsule rigidly attached to one bone, in canonical coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Capsule {
    pub bone: usize,
    pub a: DVec3,
    pub b: DVec3,
    pub radius: f64,
    /// Color at `a` and at `b`, blended along the axis.
    pub colors: [[f64; 3]; 2],
}

impl Capsule {
    /// Distance to the axis segment and the axial parameter in `[0, 1]`.
    fn locate(&self, p: DVec3) -> (f64, f64) {
        let ab = self.b - self.a;
        let s = ((p - self.a).dot(ab) / ab.length_squared()).clamp(0.0, 1.0);
        ((p - (self.a + s * ab)).length(), s)
    }
}

/// Sum of smooth capsule densities; color is the density-weighted mean of
/// the capsule colors.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticField {
    pub capsules: Vec<Capsule>,
    pub sigma_max: f64,
    /// Half-width of the smooth density falloff around each capsule surface.
    pub shell: f64,
}

impl AnalyticField {
    fn capsule_sample(&self, c: &Capsule, p: DVec3) -> (f64, [f64; 3]) {
        let (d, s) = c.locate(p);
        let sigma = self.sigma_max * (1.0 - smoothstep(c.radius - self.shell, c.radius + self.shell, d));
        let rgb = [0, 1, 2].map(|k| c.colors[0][k] + s * (c.colors[1][k] - c.colors[0][k]));
        (sigma, rgb)
    }

    fn combine(parts: impl Iterator<Item = (f64, [f64; 3])>) -> (f64, [f64; 3]) {
        let mut sigma = 0.0;
        let mut acc = [0.0; 3];
        for (s, c) in parts {
            sigma += s;
            for k in 0..3 {
                acc[k] += s * c[k];
            }
        }
        if sigma > 0.0 {
            (sigma, acc.map(|a| a / sigma))
        } else {
            (0.0, [0.0; 3])
        }
    }

    pub fn canonical(&self, p: DVec3) -> (f64, [f64; 3]) {
        Self::combine(self.capsules.iter().map(|c| self.capsule_sample(c, p)))
    }

    /// Posed density: every capsule is evaluated in its own bone frame.
    pub fn posed(&self, p: DVec3, inverses: &[DAffine3]) -> (f64, [f64; 3]) {
        Self::combine(self.capsules.iter().map(|c| self.capsule_sample(c, inverses[c.bone].transform_point3(p))))
    }

    /// Bounds of the posed field support.
    pub fn posed_bounds(&self, affines: &BoneAffines) -> BoundingBox {
        let r = self.capsules.iter().map(|c| c.radius).fold(0.0, f64::max) + self.shell;
        let mut lo = DVec3::splat(f64::INFINITY);
        let mut hi = DVec3::splat(f64::NEG_INFINITY);
        for c in &self.capsules {
            let a = &affines.0[c.bone];
            for p in [a.transform_point3(c.a), a.transform_point3(c.b)] {
                lo = lo.min(p);
                hi = hi.max(p);
            }
        }
        BoundingBox::from_corners(lo - DVec3::splat(r), hi + DVec3::splat(r)).expect("scene has capsules")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub bones: usize,
    pub frames: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    pub bone_length: f64,
    pub radius: f64,
}

impl SceneSpec {
    pub fn new(bones: usize, frames: usize, size: u32, seed: u64) -> Self {
        Self { bones, frames, width: size, height: size, seed, bone_length: 0.5, radius: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("bone count {0} outside 1..=8")]
    Bones(usize),
    #[error("frame count must be positive")]
    Frames,
    #[error("image size must be positive")]
    Size,
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub skeleton: Skeleton,
    pub template: SkinnedTemplate,
    pub field: AnalyticField,
    pub poses: Vec<Pose>,
    pub cameras: Vec<Camera>,
    /// Canonical field box: template bounds dilated by `tau`.
    pub bbox: BoundingBox,
    pub tau: f64,
    pub background: [f64; 3],
    /// Per-bone rotation axis and full-sweep angle.
    pub sweep: Vec<(DVec3, f64)>,
}

/// Chain skeleton along +X with joints `bone_length` apart, centered on the
/// origin.
pub fn chain_skeleton(bones: usize, bone_length: f64) -> Skeleton {
    let start = -0.5 * bones as f64 * bone_length;
    let parents = (0..bones).map(|b| if b == 0 { None } else { Some((b - 1) as u16) }).collect();
    let offsets = (0..bones).map(|b| if b == 0 { [start as f32, 0.0, 0.0] } else { [bone_length as f32, 0.0, 0.0] }).collect();
    Skeleton::new(parents, offsets, Pose::identity(bones)).expect("chain is well formed")
}

/// Closed tube around the chain axis with hemispherical caps; weights blend
/// smoothly between neighbouring bones over one radius around each joint.
pub fn chain_template(bones: usize, bone_length: f64, radius: f64) -> SkinnedTemplate {
    let x0 = -0.5 * bones as f64 * bone_length;
    let x1 = -x0;
    let segments = 24usize;
    let cap_rings = 6usize;
    // (axial position, ring radius) from the -X pole to the +X pole
    let mut profile: Vec<(f64, f64)> = Vec::new();
    for k in 1..=cap_rings {
        let phi = core::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        profile.push((x0 - radius * libm::cos(phi), radius * libm::sin(phi)));
    }
    let body = libm::ceil((x1 - x0) / (0.5 * radius)) as usize;
    for k in 1..body {
        profile.push((x0 + (x1 - x0) * k as f64 / body as f64, radius));
    }
    for k in (1..=cap_rings).rev() {
        let phi = core::f64::consts::FRAC_PI_2 * k as f64 / cap_rings as f64;
        profile.push((x1 + radius * libm::cos(phi), radius * libm::sin(phi)));
    }
    let mut verts: Vec<DVec3> = vec![DVec3::new(x0 - radius, 0.0, 0.0)];
    for (x, r) in &profile {
        for s in 0..segments {
            let a = 2.0 * core::f64::consts::PI * s as f64 / segments as f64;
            verts.push(DVec3::new(*x, r * libm::cos(a), r * libm::sin(a)));
        }
    }
    verts.push(DVec3::new(x1 + radius, 0.0, 0.0));
    let last = (verts.len() - 1) as u32;
    let ring = |i: usize, s: usize| (1 + i * segments + s % segments) as u32;
    let mut faces = Vec::new();
    for s in 0..segments {
        faces.push([0, ring(0, s + 1), ring(0, s)]);
    }
    for i in 0..profile.len() - 1 {
        for s in 0..segments {
            let (a, b, c, d) = (ring(i, s), ring(i, s + 1), ring(i + 1, s), ring(i + 1, s + 1));
            faces.push([a, b, d]);
            faces.push([a, d, c]);
        }
    }
    let n = profile.len() - 1;
    for s in 0..segments {
        faces.push([last, ring(n, s), ring(n, s + 1)]);
    }
    let weights = verts.iter().map(|v| chain_weights(v.x, bones, bone_length, radius)).collect();
    let vertices = verts.iter().map(|v| v.as_vec3().to_array()).collect();
    SkinnedTemplate::new(vertices, faces, weights).expect("tube is valid")
}

fn chain_weights(x: f64, bones: usize, bone_length: f64, blend: f64) -> VertexWeights {
    let x0 = -0.5 * bones as f64 * bone_length;
    let mut row = vec![0.0; bones];
    // share of the chain beyond each joint
    let mut prev = 1.0;
    for (b, w) in row.iter_mut().enumerate() {
        let next = if b + 1 < bones {
            let j = x0 + (b + 1) as f64 * bone_length;
            smoothstep(j - blend, j + blend, x)
        } else {
            0.0
        };
        *w = (prev - next).max(0.0);
        prev = next;
    }
    VertexWeights::from_dense(&row)
}

/// Joint rotations for frame `f`: bone 1 sweeps 0 → 90° about +Z, further
/// bones sweep to seeded amplitudes of at most 60°, the root stays put.
fn frame_pose(bones: usize, f: usize, frames: usize, amplitudes: &[(DVec3, f64)]) -> Pose {
    let s = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
    pose_at(bones, s, amplitudes)
}

/// Pose at sweep fraction `s ∈ [0, 1]`.
fn pose_at(bones: usize, s: f64, amplitudes: &[(DVec3, f64)]) -> Pose {
    let rots: Vec<DQuat> = (0..bones)
        .map(|b| if b == 0 { DQuat::IDENTITY } else { DQuat::from_axis_angle(amplitudes[b].0, s * amplitudes[b].1) })
        .collect();
    Pose::from_quats(&rots, DVec3::ZERO)
}

fn amplitudes(bones: usize, rng: &mut ChaCha8Rng) -> Vec<(DVec3, f64)> {
    (0..bones)
        .map(|b| match b {
            0 => (DVec3::Z, 0.0),
            1 => (DVec3::Z, core::f64::consts::FRAC_PI_2),
            _ => {
                let axis = DVec3::new(0.0, rng.gen_range(-0.3..0.3), 1.0).normalize();
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                (axis, sign * rng.gen_range(30f64..60f64).to_radians())
            }
        })
        .collect()
}

/// Orbit cameras framing `bbox`, one per frame, spread over a full turn.
pub fn orbit_cameras(bbox: &BoundingBox, frames: usize, width: u32, height: u32, elevation: f64) -> Vec<Camera> {
    let fov = 40f64.to_radians();
    let dist = 1.1 * 0.5 * bbox.diagonal() / libm::sin(0.5 * fov);
    (0..frames)
        .map(|f| {
            let az = 2.0 * core::f64::consts::PI * f as f64 / frames as f64;
            let el = elevation * libm::cos(3.0 * az);
            let dir = DVec3::new(libm::cos(el) * libm::sin(az), libm::sin(el), libm::cos(el) * libm::cos(az));
            Camera::look_at(bbox.center() + dist * dir, bbox.center(), DVec3::Y, fov, width, height)
        })
        .collect()
}

pub fn make_scene(spec: &SceneSpec) -> Result<SyntheticScene, SynthError> {
    if !(1..=8).contains(&spec.bones) {
        return Err(SynthError::Bones(spec.bones));
    }
    if spec.frames == 0 {
        return Err(SynthError::Frames);
    }
    if spec.width == 0 || spec.height == 0 {
        return Err(SynthError::Size);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let skeleton = chain_skeleton(spec.bones, spec.bone_length);
    let template = chain_template(spec.bones, spec.bone_length, spec.radius);
    let x0 = -0.5 * spec.bones as f64 * spec.bone_length;
    let mut palette = || [rng.gen_range(0.15..0.9), rng.gen_range(0.15..0.9), rng.gen_range(0.15..0.9)];
    let capsules = (0..spec.bones)
        .map(|b| Capsule {
            bone: b,
            a: DVec3::new(x0 + b as f64 * spec.bone_length, 0.0, 0.0),
            b: DVec3::new(x0 + (b + 1) as f64 * spec.bone_length, 0.0, 0.0),
            radius: spec.radius * 0.8,
            colors: [palette(), palette()],
        })
        .collect();
    let field = AnalyticField { capsules, sigma_max: 200.0, shell: 0.015 };
    let amps = amplitudes(spec.bones, &mut rng);
    let poses = (0..spec.frames).map(|f| frame_pose(spec.bones, f, spec.frames, &amps)).collect::<Vec<_>>();
    let tbox = BoundingBox::around(template.positions()).expect("template has vertices");
    let tau = 0.1 * tbox.diagonal();
    let bbox = tbox.dilate(tau);
    // frame every pose: union of posed supports
    let mut view_box = bbox;
    for p in &poses {
        view_box = view_box.union(&field.posed_bounds(&skeleton.bone_affines(p)));
    }
    let cameras = orbit_cameras(&view_box, spec.frames, spec.width, spec.height, 25f64.to_radians());
    Ok(SyntheticScene { spec: *spec, skeleton, template, field, poses, cameras, bbox, tau, background: [0.0; 3], sweep: amps })
}

impl SyntheticScene {
    /// A pose strictly between the training keyframes (sweep fraction `s`).
    pub fn pose_at(&self, s: f64) -> Pose {
        pose_at(self.spec.bones, s, &self.sweep)
    }

    /// Bone affines and their inverses for a pose.
    pub fn bone_frames(&self, pose: &Pose) -> (BoneAffines, Vec<DAffine3>) {
        let a = self.skeleton.bone_affines(pose);
        let inv = a.0.iter().map(|m| m.inverse()).collect();
        (a, inv)
    }

    /// Box enclosing the subject in every training pose.
    pub fn view_bounds(&self) -> BoundingBox {
        self.poses.iter().fold(self.bbox, |b, p| b.union(&self.field.posed_bounds(&self.skeleton.bone_affines(p))))
    }
}

/// Ground-truth image, mask and depth of a posed scene.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub render: RenderOutput,
    pub mask: Vec<bool>,
}

/// Midpoint-rule emission-absorption through the analytic posed field.
pub fn march_analytic(field: &AnalyticField, inverses: &[DAffine3], bounds: &BoundingBox, ray: &Ray, n: usize, bg: [f64; 3]) -> RayResult {
    let Some((t0, t1)) = ray_box(ray, bounds) else {
        return RayResult { color: bg, opacity: 0.0, depth: 0.0 };
    };
    let step = (t1 - t0) / n as f64;
    let mut trans = 1.0;
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    for i in 0..n {
        let t = t0 + (i as f64 + 0.5) * step;
        let (sigma, c) = field.posed(ray.at(t), inverses);
        if sigma <= 0.0 {
            continue;
        }
        let next = trans * libm::exp(-step * sigma);
        let w = trans - next;
        for k in 0..3 {
            color[k] += w * c[k];
        }
        depth += w * t;
        trans = next;
    }
    RayResult { color: [0, 1, 2].map(|k| color[k] + trans * bg[k]), opacity: 1.0 - trans, depth }
}

/// Renders the scene in `pose` with `n` samples per ray (512 for reference
/// images). The mask is `opacity > 0.5`.
pub fn render_ground_truth(scene: &SyntheticScene, pose: &Pose, camera: &Camera, n: usize) -> GroundTruth {
    let (affines, inv) = scene.bone_frames(pose);
    let bounds = scene.field.posed_bounds(&affines);
    let render = RenderOutput::from_rays(camera, |r| march_analytic(&scene.field, &inv, &bounds, r, n, scene.background));
    let mask = render.opacity.iter().map(|o| *o > 0.5).collect();
    GroundTruth { render, mask }
}

/// Reference sample count for ground-truth renders.
pub const GT_SAMPLES: usize = 512;

/// Training frames of a scene: ground-truth images and masks for every
/// keyframe pose and its camera.
pub fn scene_frames(scene: &SyntheticScene, n: usize) -> Vec<Frame> {
    scene
        .poses
        .iter()
        .zip(&scene.cameras)
        .map(|(pose, cam)| {
            let gt = render_ground_truth(scene, pose, cam, n);
            Frame { image: gt.render.color, mask: gt.mask, camera: cam.clone(), pose: pose.clone() }
        })
        .collect()
}

pub fn scene_dataset(scene: &SyntheticScene, n: usize) -> Result<Dataset, TrainError> {
    Dataset::new(scene_frames(scene, n), scene.skeleton.clone(), scene.template.clone())
}

/// Static single-bone dataset of a canonical field wrapped in a sphere
/// template of `radius`, seen from `views` orbit cameras and rendered with
/// the posed renderer at the rest pose.
pub fn phantom_dataset(field: &FactorizedField, radius: f64, views: usize, size: u32, render: &RenderConfig) -> Result<Dataset, TrainError> {
    let skeleton = Skeleton::new(vec![None], vec![[0.0; 3]], Pose::identity(1)).expect("one bone");
    let sphere = icosphere(radius, 3);
    let template = SkinnedTemplate::new(
        sphere.vertices.iter().map(|v| v.as_vec3().to_array()).collect(),
        sphere.faces.clone(),
        vec![VertexWeights::one_hot(0); sphere.vertices.len()],
    )
    .map_err(TrainError::Template)?;
    let pose = Pose::identity(1);
    let scene = PosedScene::new(&template, &skeleton, &pose, render.tau);
    let frames = orbit_cameras(&scene.bbox, views, size, size, 25f64.to_radians())
        .into_iter()
        .map(|cam| {
            let out = render_deformed_image(field, &scene, &cam, render);
            let mask = out.opacity.iter().map(|o| *o > 0.5).collect();
            Frame { image: out.color, mask, camera: cam, pose: pose.clone() }
        })
        .collect();
    Dataset::new(frames, skeleton, template)
}
