//! Skeleton forward kinematics, linear blend skinning and the nearest-vertex
//! inverse warp.

use alloc::vec;
use alloc::vec::Vec;

use glam::{DAffine3, DMat3, DQuat, DVec3};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SkinningError {
    #[error("skeleton has no bones")]
    NoBones,
    #[error("bone {0}: parent must precede the bone and only bone 0 may be the root")]
    BadParent(usize),
    #[error("pose has {got} rotations, skeleton has {expected} bones")]
    PoseMismatch { got: usize, expected: usize },
    #[error("face {0} references a vertex out of range")]
    FaceOutOfRange(usize),
    #[error("vertex {0}: skinning weights must be non-negative and sum to 1")]
    BadWeights(usize),
    #[error("vertex {vertex}: bone index {bone} out of range")]
    BoneOutOfRange { vertex: usize, bone: usize },
    #[error("mesh has no vertices")]
    EmptyMesh,
    #[error("weights length {got} does not match vertex count {expected}")]
    WeightCount { got: usize, expected: usize },
}

/// Per-bone joint rotations (axis-angle, radians) and the root translation.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub rotations: Vec<[f32; 3]>,
    pub root_translation: [f32; 3],
}

impl Pose {
    pub fn identity(bones: usize) -> Self {
        Self { rotations: vec![[0.0; 3]; bones], root_translation: [0.0; 3] }
    }

    pub fn bone_count(&self) -> usize {
        self.rotations.len()
    }

    pub fn rotation(&self, bone: usize) -> DQuat {
        let [x, y, z] = self.rotations[bone];
        DQuat::from_scaled_axis(DVec3::new(x as f64, y as f64, z as f64))
    }

    pub fn quats(&self) -> Vec<DQuat> {
        (0..self.bone_count()).map(|b| self.rotation(b)).collect()
    }

    pub fn translation(&self) -> DVec3 {
        let [x, y, z] = self.root_translation;
        DVec3::new(x as f64, y as f64, z as f64)
    }

    pub fn from_quats(rotations: &[DQuat], root_translation: DVec3) -> Self {
        Self {
            rotations: rotations
                .iter()
                .map(|q| {
                    let v = q.normalize().to_scaled_axis();
                    [v.x as f32, v.y as f32, v.z as f32]
                })
                .collect(),
            root_translation: root_translation.as_vec3().to_array(),
        }
    }

    /// `θ_ref ∘ θ`: each bone rotation is left-multiplied by the refinement,
    /// root translations add.
    pub fn refined(&self, rotations: &[DQuat], translation: DVec3) -> Pose {
        let q: Vec<DQuat> = (0..self.bone_count()).map(|b| rotations[b] * self.rotation(b)).collect();
        Pose::from_quats(&q, self.translation() + translation)
    }
}

/// Bone tree in topological order (parents precede children, bone 0 is the root).
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    parents: Vec<Option<u16>>,
    /// Joint position relative to the parent joint; absolute for the root.
    offsets: Vec<[f32; 3]>,
    rest_pose: Pose,
}

impl Skeleton {
    pub fn new(parents: Vec<Option<u16>>, offsets: Vec<[f32; 3]>, rest_pose: Pose) -> Result<Self, SkinningError> {
        if parents.is_empty() {
            return Err(SkinningError::NoBones);
        }
        for (b, p) in parents.iter().enumerate() {
            let ok = match (b, p) {
                (0, None) => true,
                (_, Some(p)) => (*p as usize) < b,
                _ => false,
            };
            if !ok {
                return Err(SkinningError::BadParent(b));
            }
        }
        if offsets.len() != parents.len() {
            return Err(SkinningError::PoseMismatch { got: offsets.len(), expected: parents.len() });
        }
        if rest_pose.bone_count() != parents.len() {
            return Err(SkinningError::PoseMismatch { got: rest_pose.bone_count(), expected: parents.len() });
        }
        Ok(Self { parents, offsets, rest_pose })
    }

    pub fn bone_count(&self) -> usize {
        self.parents.len()
    }

    pub fn parent(&self, bone: usize) -> Option<usize> {
        self.parents[bone].map(usize::from)
    }

    pub fn parents(&self) -> &[Option<u16>] {
        &self.parents
    }

    pub fn offsets(&self) -> &[[f32; 3]] {
        &self.offsets
    }

    pub fn offset(&self, bone: usize) -> DVec3 {
        let [x, y, z] = self.offsets[bone];
        DVec3::new(x as f64, y as f64, z as f64)
    }

    pub fn rest_pose(&self) -> &Pose {
        &self.rest_pose
    }

    pub fn check_pose(&self, pose: &Pose) -> Result<(), SkinningError> {
        if pose.bone_count() == self.bone_count() {
            Ok(())
        } else {
            Err(SkinningError::PoseMismatch { got: pose.bone_count(), expected: self.bone_count() })
        }
    }

    /// Bone-local to world transforms `G_b(θ)`.
    pub fn forward_kinematics(&self, pose: &Pose) -> Vec<DAffine3> {
        self.world_transforms(&pose.quats(), pose.translation())
    }

    /// Forward kinematics from unit quaternions, without the f32 round trip
    /// of [`Pose`].
    pub fn world_transforms(&self, rotations: &[DQuat], root_translation: DVec3) -> Vec<DAffine3> {
        let mut world: Vec<DAffine3> = Vec::with_capacity(self.bone_count());
        for b in 0..self.bone_count() {
            let local = DAffine3::from_rotation_translation(rotations[b], self.offset(b));
            let g = match self.parent(b) {
                None => DAffine3::from_translation(root_translation) * local,
                Some(p) => world[p] * local,
            };
            world.push(g);
        }
        world
    }

    /// `A_b(θ) = G_b(θ) ∘ G_b(θ₀)⁻¹`. Exactly the identity when `pose` is the
    /// rest pose.
    pub fn bone_affines(&self, pose: &Pose) -> BoneAffines {
        if *pose == self.rest_pose {
            return BoneAffines(vec![DAffine3::IDENTITY; self.bone_count()]);
        }
        self.affines_from(&pose.quats(), pose.translation())
    }

    pub fn affines_from(&self, rotations: &[DQuat], root_translation: DVec3) -> BoneAffines {
        let posed = self.world_transforms(rotations, root_translation);
        let rest = self.forward_kinematics(&self.rest_pose);
        BoneAffines(posed.iter().zip(&rest).map(|(g, g0)| *g * rigid_inverse(g0)).collect())
    }

    /// Chain rule from per-bone affine gradients to the pose.
    ///
    /// Rotation gradients are w.r.t. a left perturbation `exp(ε)·R_b` of each
    /// joint rotation, expressed in the parent joint frame. The translation
    /// gradient is w.r.t. the root translation.
    pub fn pose_gradient(&self, pose: &Pose, affines: &BoneAffines, grads: &[AffineGrad]) -> (Vec<DVec3>, DVec3) {
        self.pose_gradient_from(&pose.quats(), pose.translation(), affines, grads)
    }

    pub fn pose_gradient_from(
        &self,
        rotations: &[DQuat],
        root_translation: DVec3,
        affines: &BoneAffines,
        grads: &[AffineGrad],
    ) -> (Vec<DVec3>, DVec3) {
        let world = self.world_transforms(rotations, root_translation);
        let n = self.bone_count();
        // torque about the world origin and summed translation gradient per subtree
        let mut torque = vec![DVec3::ZERO; n];
        let mut force = vec![DVec3::ZERO; n];
        for b in 0..n {
            let a = affines.0[b];
            let g = grads[b];
            let m = a.matrix3;
            let t = a.translation;
            torque[b] = m.x_axis.cross(g.linear.x_axis)
                + m.y_axis.cross(g.linear.y_axis)
                + m.z_axis.cross(g.linear.z_axis)
                + t.cross(g.translation);
            force[b] = g.translation;
        }
        for b in (1..n).rev() {
            let p = self.parent(b).unwrap();
            let (tb, fb) = (torque[b], force[b]);
            torque[p] += tb;
            force[p] += fb;
        }
        let rot = (0..n)
            .map(|b| {
                let joint = world[b].translation;
                // moving the pivot from the origin to the joint
                let tau = torque[b] - joint.cross(force[b]);
                let frame = match self.parent(b) {
                    Some(p) => world[p].matrix3,
                    None => DMat3::IDENTITY,
                };
                frame.transpose() * tau
            })
            .collect();
        (rot, force[0])
    }
}

fn rigid_inverse(a: &DAffine3) -> DAffine3 {
    let rt = a.matrix3.transpose();
    DAffine3::from_mat3_translation(rt, -(rt * a.translation))
}

/// Per-bone affine maps for one pose.
#[derive(Debug, Clone, PartialEq)]
pub struct BoneAffines(pub Vec<DAffine3>);

impl BoneAffines {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Gradient of a scalar w.r.t. an affine map's entries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineGrad {
    pub linear: DMat3,
    pub translation: DVec3,
}

impl AffineGrad {
    pub const ZERO: AffineGrad = AffineGrad { linear: DMat3::ZERO, translation: DVec3::ZERO };
}

/// Sparse skinning weights: up to four bones per vertex.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VertexWeights {
    pub bones: [u16; 4],
    pub weights: [f32; 4],
}

impl VertexWeights {
    pub const MAX: usize = 4;

    pub fn one_hot(bone: u16) -> Self {
        Self { bones: [bone, 0, 0, 0], weights: [1.0, 0.0, 0.0, 0.0] }
    }

    /// Keeps the four largest entries of a dense row and renormalizes.
    pub fn from_dense(row: &[f64]) -> Self {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
        let top = &idx[..row.len().min(4)];
        let sum: f64 = top.iter().map(|i| row[*i].max(0.0)).sum();
        let mut out = Self { bones: [0; 4], weights: [0.0; 4] };
        for (k, &i) in top.iter().enumerate() {
            out.bones[k] = i as u16;
            out.weights[k] = (row[i].max(0.0) / sum) as f32;
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.weights.iter().map(|w| *w as f64).sum()
    }

    pub fn is_valid(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite() && *w >= 0.0) && (self.sum() - 1.0).abs() <= 1e-5
    }

    /// Bone with the largest weight (lowest index on ties).
    pub fn dominant(&self) -> u16 {
        let mut best = 0;
        for k in 1..4 {
            if self.weights[k] > self.weights[best] {
                best = k;
            }
        }
        self.bones[best]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.bones.iter().zip(&self.weights).filter(|(_, w)| **w > 0.0).map(|(b, w)| (*b as usize, *w as f64))
    }
}

/// `Σ_b w_b A_b`, normalized by `Σ_b w_b` so that stored weights that sum
/// to one only up to rounding still reproduce a shared affine exactly.
pub fn blend(weights: &VertexWeights, affines: &BoneAffines) -> DAffine3 {
    let mut m = DMat3::ZERO;
    let mut t = DVec3::ZERO;
    let mut s = 0.0;
    for (b, w) in weights.iter() {
        m += affines.0[b].matrix3 * w;
        t += affines.0[b].translation * w;
        s += w;
    }
    DAffine3::from_mat3_translation(m * (1.0 / s), t / s)
}

/// Canonical mesh with per-vertex skinning weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinnedTemplate {
    pub vertices: Vec<[f32; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub weights: Vec<VertexWeights>,
}

impl SkinnedTemplate {
    pub fn new(vertices: Vec<[f32; 3]>, faces: Vec<[u32; 3]>, weights: Vec<VertexWeights>) -> Result<Self, SkinningError> {
        let t = Self { vertices, faces, weights };
        t.validate(None)?;
        Ok(t)
    }

    pub fn validate(&self, bones: Option<usize>) -> Result<(), SkinningError> {
        if self.vertices.is_empty() {
            return Err(SkinningError::EmptyMesh);
        }
        if self.weights.len() != self.vertices.len() {
            return Err(SkinningError::WeightCount { got: self.weights.len(), expected: self.vertices.len() });
        }
        let n = self.vertices.len() as u32;
        if let Some(i) = self.faces.iter().position(|f| f.iter().any(|v| *v >= n)) {
            return Err(SkinningError::FaceOutOfRange(i));
        }
        for (i, w) in self.weights.iter().enumerate() {
            if !w.is_valid() {
                return Err(SkinningError::BadWeights(i));
            }
            if let Some(b) = bones {
                if let Some((bone, _)) = w.iter().find(|(bone, _)| *bone >= b) {
                    return Err(SkinningError::BoneOutOfRange { vertex: i, bone });
                }
            }
        }
        Ok(())
    }

    pub fn vertex(&self, i: usize) -> DVec3 {
        let [x, y, z] = self.vertices[i];
        DVec3::new(x as f64, y as f64, z as f64)
    }

    pub fn positions(&self) -> impl Iterator<Item = DVec3> + '_ {
        (0..self.vertices.len()).map(|i| self.vertex(i))
    }
}

/// Determinant floor below which a blended affine counts as singular.
pub const SINGULAR_DET: f64 = 1e-9;

/// How a vertex's inverse affine was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InverseSource {
    Blended,
    /// The blend was singular; the rigid inverse of this bone is used instead.
    Bone(u16),
}

/// Template posed by linear blend skinning.
#[derive(Debug, Clone)]
pub struct PosedMesh {
    pub vertices: Vec<DVec3>,
    pub forward: Vec<DAffine3>,
    pub inverse: Vec<DAffine3>,
    pub source: Vec<InverseSource>,
}

pub fn pose_mesh(template: &SkinnedTemplate, affines: &BoneAffines) -> PosedMesh {
    let n = template.vertices.len();
    let mut out = PosedMesh {
        vertices: Vec::with_capacity(n),
        forward: Vec::with_capacity(n),
        inverse: Vec::with_capacity(n),
        source: Vec::with_capacity(n),
    };
    for (i, w) in template.weights.iter().enumerate() {
        let a = blend(w, affines);
        out.vertices.push(a.transform_point3(template.vertex(i)));
        out.forward.push(a);
        if a.matrix3.determinant() < SINGULAR_DET {
            let b = w.dominant();
            out.inverse.push(rigid_inverse(&affines.0[b as usize]));
            out.source.push(InverseSource::Bone(b));
        } else {
            out.inverse.push(a.inverse());
            out.source.push(InverseSource::Blended);
        }
    }
    out
}

impl PosedMesh {
    /// Adds `∂L/∂A_b` for every bone feeding vertex `i`'s inverse, given the
    /// canonical point `xbar = A_i⁻¹ x` and `g = ∂L/∂xbar`.
    pub fn backprop_inverse(&self, i: usize, weights: &VertexWeights, xbar: DVec3, g: DVec3, affines: &BoneAffines, out: &mut [AffineGrad]) {
        let (lin_inv, bones): (DMat3, _) = match self.source[i] {
            InverseSource::Blended => (self.inverse[i].matrix3, None),
            InverseSource::Bone(b) => (rigid_inverse(&affines.0[b as usize]).matrix3, Some(b)),
        };
        let h = lin_inv.transpose() * g;
        let d_lin = DMat3::from_cols(-h * xbar.x, -h * xbar.y, -h * xbar.z);
        let d_t = -h;
        match bones {
            Some(b) => {
                let o = &mut out[b as usize];
                o.linear += d_lin;
                o.translation += d_t;
            }
            None => {
                let s = weights.sum();
                for (b, w) in weights.iter() {
                    let o = &mut out[b];
                    o.linear += d_lin * (w / s);
                    o.translation += d_t * (w / s);
                }
            }
        }
    }
}

/// Uniform grid over a point set answering exact nearest-point queries.
#[derive(Debug, Clone)]
pub struct NearestVertexIndex {
    points: Vec<DVec3>,
    origin: DVec3,
    cell: f64,
    dims: [i64; 3],
    cell_start: Vec<u32>,
    items: Vec<u32>,
}

const MAX_CELLS: i64 = 1 << 22;

impl NearestVertexIndex {
    pub fn build(points: &[DVec3], cell_size: f64) -> Result<Self, SkinningError> {
        if points.is_empty() {
            return Err(SkinningError::EmptyMesh);
        }
        let mut lo = DVec3::splat(f64::INFINITY);
        let mut hi = DVec3::splat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.min(*p);
            hi = hi.max(*p);
        }
        let extent = (hi - lo).max(DVec3::splat(1e-12));
        let mut cell = if cell_size > 0.0 && cell_size.is_finite() { cell_size } else { extent.max_element() };
        let dims_for = |cell: f64| {
            [extent.x, extent.y, extent.z].map(|e| (libm::floor(e / cell) as i64 + 1).max(1))
        };
        let mut dims = dims_for(cell);
        while dims[0] * dims[1] * dims[2] > MAX_CELLS {
            cell *= 2.0;
            dims = dims_for(cell);
        }
        let mut index = Self {
            points: points.to_vec(),
            origin: lo,
            cell,
            dims,
            cell_start: Vec::new(),
            items: Vec::new(),
        };
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let cell_of: Vec<usize> = points.iter().map(|p| index.flat(index.cell_coords(*p))).collect();
        let mut counts = vec![0u32; ncells + 1];
        for c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; points.len()];
        for (i, c) in cell_of.iter().enumerate() {
            items[fill[*c] as usize] = i as u32;
            fill[*c] += 1;
        }
        index.cell_start = counts;
        index.items = items;
        Ok(index)
    }

    pub fn cell_size(&self) -> f64 {
        self.cell
    }

    pub fn points(&self) -> &[DVec3] {
        &self.points
    }

    fn cell_coords(&self, p: DVec3) -> [i64; 3] {
        let c = (p - self.origin) / self.cell;
        [libm::floor(c.x) as i64, libm::floor(c.y) as i64, libm::floor(c.z) as i64]
    }

    fn flat(&self, c: [i64; 3]) -> usize {
        let c = [0, 1, 2].map(|i| c[i].clamp(0, self.dims[i] - 1));
        ((c[2] * self.dims[1] + c[1]) * self.dims[0] + c[0]) as usize
    }

    /// Exact nearest point: `(index, distance)`, lowest index on ties.
    pub fn nearest(&self, x: DVec3) -> (usize, f64) {
        self.search(x, f64::INFINITY).expect("index is non-empty")
    }

    /// Nearest point if it lies within `radius`.
    pub fn nearest_within(&self, x: DVec3, radius: f64) -> Option<(usize, f64)> {
        self.search(x, radius).filter(|(_, d)| *d <= radius)
    }

    fn search(&self, x: DVec3, radius: f64) -> Option<(usize, f64)> {
        let c = self.cell_coords(x);
        // rings closer than this contain no grid cells
        let gap = (0..3)
            .map(|i| {
                if c[i] < 0 {
                    -c[i]
                } else if c[i] >= self.dims[i] {
                    c[i] - self.dims[i] + 1
                } else {
                    0
                }
            })
            .max()
            .unwrap();
        let mut best: Option<(usize, f64)> = None;
        let mut k = gap;
        loop {
            let bound = (k - 1).max(0) as f64 * self.cell;
            if k > gap && bound > radius {
                break;
            }
            let lo = [0, 1, 2].map(|i| (c[i] - k).max(0));
            let hi = [0, 1, 2].map(|i| (c[i] + k).min(self.dims[i] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for xx in lo[0]..=hi[0] {
                        let cheb = (xx - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if cheb != k {
                            continue;
                        }
                        let cell = ((z * self.dims[1] + y) * self.dims[0] + xx) as usize;
                        for &i in &self.items[self.cell_start[cell] as usize..self.cell_start[cell + 1] as usize] {
                            let d2 = self.points[i as usize].distance_squared(x);
                            let better = match best {
                                None => true,
                                Some((bi, bd)) => d2 < bd || (d2 == bd && (i as usize) < bi),
                            };
                            if better {
                                best = Some((i as usize, d2));
                            }
                        }
                    }
                }
            }
            let covered = (0..3).all(|i| c[i] - k <= 0 && c[i] + k >= self.dims[i] - 1);
            if covered {
                break;
            }
            if let Some((_, d2)) = best {
                // unvisited points are at least k cells away
                let lb = k as f64 * self.cell;
                if d2 < lb * lb {
                    break;
                }
            }
            k += 1;
        }
        best.map(|(i, d2)| (i, libm::sqrt(d2)))
    }
}

/// A posed point mapped back to canonical space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub canonical: DVec3,
    pub vertex: usize,
}

/// Nearest-vertex inverse skinning; `None` when no vertex lies within `tau`.
pub fn inverse_warp(x: DVec3, posed: &PosedMesh, index: &NearestVertexIndex, tau: f64) -> Option<Warp> {
    index
        .nearest_within(x, tau)
        .map(|(i, _)| Warp { canonical: posed.inverse[i].transform_point3(x), vertex: i })
}

/// Brute-force nearest point, lowest index on ties.
pub fn brute_force_nearest(points: &[DVec3], x: DVec3) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, p) in points.iter().enumerate() {
        let d = p.distance_squared(x);
        if d < best.1 {
            best = (i, d);
        }
    }
    (best.0, libm::sqrt(best.1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::FRAC_PI_2;

    fn chain2() -> Skeleton {
        Skeleton::new(vec![None, Some(0)], vec![[0.0; 3], [1.0, 0.0, 0.0]], Pose::identity(2)).unwrap()
    }

    fn pose_z(angles: &[f64]) -> Pose {
        let q: Vec<DQuat> = angles.iter().map(|a| DQuat::from_rotation_z(*a)).collect();
        Pose::from_quats(&q, DVec3::ZERO)
    }

    fn close(a: DVec3, b: DVec3, tol: f64) -> bool {
        (a - b).abs().max_element() <= tol
    }

    #[test]
    fn fk_two_bone_elbow() {
        let s = chain2();
        let g = s.forward_kinematics(&pose_z(&[0.0, FRAC_PI_2]));
        assert!(close(g[1].translation, DVec3::new(1.0, 0.0, 0.0), 1e-12));
        assert!(close(g[1].transform_vector3(DVec3::X), DVec3::Y, 1e-7));
    }

    #[test]
    fn rest_affines_are_identity() {
        let s = chain2();
        for a in s.bone_affines(&Pose::identity(2)).0 {
            assert_eq!(a, DAffine3::IDENTITY);
        }
        let mut p = Pose::identity(2);
        p.root_translation = [0.5, -1.0, 2.0];
        let a = s.bone_affines(&p);
        for (g0, g) in s.forward_kinematics(s.rest_pose()).iter().zip(s.forward_kinematics(&p)) {
            assert!(close(g.translation - g0.translation, DVec3::new(0.5, -1.0, 2.0), 1e-7));
        }
        assert!(close(a.0[0].translation, DVec3::new(0.5, -1.0, 2.0), 1e-7));
    }

    #[test]
    fn elbow_affine_rotates_about_joint() {
        let s = chain2();
        let a = s.bone_affines(&pose_z(&[0.0, FRAC_PI_2]));
        assert!(close(a.0[1].transform_point3(DVec3::new(1.0, 0.0, 0.0)), DVec3::new(1.0, 0.0, 0.0), 1e-7));
        assert!(close(a.0[1].transform_point3(DVec3::new(2.0, 0.0, 0.0)), DVec3::new(1.0, 1.0, 0.0), 1e-7));
        for m in &a.0 {
            let l = m.matrix3;
            assert!((l.determinant() - 1.0).abs() < 1e-6);
            assert!((l * l.transpose()).abs_diff_eq(DMat3::IDENTITY, 1e-6));
        }
    }

    #[test]
    fn blend_examples() {
        let a = BoneAffines(vec![
            DAffine3::from_translation(DVec3::X),
            DAffine3::from_translation(DVec3::Y),
        ]);
        let w = VertexWeights { bones: [0, 1, 0, 0], weights: [0.5, 0.5, 0.0, 0.0] };
        assert_eq!(blend(&w, &a), DAffine3::from_translation(DVec3::new(0.5, 0.5, 0.0)));
        assert_eq!(blend(&VertexWeights::one_hot(1), &a), a.0[1]);
        let id = BoneAffines(vec![DAffine3::IDENTITY; 3]);
        let w = VertexWeights { bones: [0, 1, 2, 0], weights: [0.2, 0.3, 0.5, 0.0] };
        assert_eq!(blend(&w, &id), DAffine3::IDENTITY);
    }

    #[test]
    fn singular_blend_falls_back_to_dominant_bone() {
        let a = BoneAffines(vec![
            DAffine3::IDENTITY,
            DAffine3::from_mat3(DMat3::from_diagonal(DVec3::new(-1.0, -1.0, 1.0))),
        ]);
        let w = VertexWeights { bones: [0, 1, 0, 0], weights: [0.5, 0.5, 0.0, 0.0] };
        let t = SkinnedTemplate::new(vec![[0.0, 0.0, 0.0]], vec![], vec![w]).unwrap();
        let p = pose_mesh(&t, &a);
        assert_eq!(p.source[0], InverseSource::Bone(0));
        assert_eq!(p.inverse[0], DAffine3::IDENTITY);
    }

    #[test]
    fn template_validation() {
        let w = VertexWeights::one_hot(0);
        assert_eq!(
            SkinnedTemplate::new(vec![[0.0; 3]], vec![[0, 0, 1]], vec![w]),
            Err(SkinningError::FaceOutOfRange(0))
        );
        let bad = VertexWeights { bones: [0, 1, 0, 0], weights: [0.5, 0.6, 0.0, 0.0] };
        assert_eq!(SkinnedTemplate::new(vec![[0.0; 3]], vec![], vec![bad]), Err(SkinningError::BadWeights(0)));
        assert!(Skeleton::new(vec![None, Some(1)], vec![[0.0; 3]; 2], Pose::identity(2)).is_err());
        assert!(NearestVertexIndex::build(&[], 1.0).is_err());
    }

    #[test]
    fn index_single_vertex_and_ties() {
        let idx = NearestVertexIndex::build(&[DVec3::new(1.0, 2.0, 3.0)], 0.1).unwrap();
        assert_eq!(idx.nearest(DVec3::new(-50.0, 7.0, 0.0)).0, 0);
        let pts = [DVec3::new(1.0, 0.0, 0.0), DVec3::new(-1.0, 0.0, 0.0)];
        let idx = NearestVertexIndex::build(&pts, 0.3).unwrap();
        assert_eq!(idx.nearest(DVec3::ZERO).0, 0);
        let pts = [DVec3::new(-1.0, 0.0, 0.0), DVec3::new(1.0, 0.0, 0.0)];
        let idx = NearestVertexIndex::build(&pts, 0.3).unwrap();
        assert_eq!(idx.nearest(DVec3::ZERO).0, 0);
        assert_eq!(idx.nearest_within(DVec3::ZERO, 0.5), None);
    }

    #[test]
    fn inverse_warp_threshold() {
        let t = SkinnedTemplate::new(vec![[0.0; 3], [1.0, 0.0, 0.0]], vec![], vec![VertexWeights::one_hot(0); 2]).unwrap();
        let s = Skeleton::new(vec![None], vec![[0.0; 3]], Pose::identity(1)).unwrap();
        let posed = pose_mesh(&t, &s.bone_affines(s.rest_pose()));
        let idx = NearestVertexIndex::build(&posed.vertices, 0.2).unwrap();
        assert!(inverse_warp(DVec3::new(0.5, 0.5, 0.0), &posed, &idx, 0.2).is_none());
        let w = inverse_warp(DVec3::new(0.9, 0.1, 0.0), &posed, &idx, 0.2).unwrap();
        assert_eq!(w.vertex, 1);
        assert_eq!(w.canonical, DVec3::new(0.9, 0.1, 0.0));
    }
}
