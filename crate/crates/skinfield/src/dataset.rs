//! On-disk dataset directory: cameras, skeleton, template, poses, images and
//! masks.

use std::fs;
use std::path::{Path, PathBuf};

use glam::{DAffine3, DMat3, DVec3};
use serde::{Deserialize, Serialize};
use skinfield_core::camera::Camera;
use skinfield_core::skinning::{Pose, Skeleton, SkinnedTemplate};
use skinfield_core::trainer::{Dataset, Frame};

use crate::assets::{mesh_from_bytes, mesh_to_bytes};
use crate::image_io::{load_mask, load_rgb, save_mask, save_rgb};

pub const CAMERAS: &str = "cameras.json";
pub const SKELETON: &str = "skeleton.json";
pub const TEMPLATE: &str = "template.mesh";
pub const POSES: &str = "poses.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl DatasetError {
    pub fn path(&self) -> &Path {
        match self {
            DatasetError::Io { path, .. } | DatasetError::Json { path, .. } | DatasetError::Invalid { path, .. } => path,
        }
    }

    fn invalid(path: &Path, message: impl ToString) -> Self {
        DatasetError::Invalid { path: path.to_path_buf(), message: message.to_string() }
    }
}

/// Pinhole intrinsics and a world-to-camera transform (+Z forward) as a
/// row-major 3×4 matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraJson {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub world_to_camera: [[f64; 4]; 3],
}

impl From<&Camera> for CameraJson {
    fn from(c: &Camera) -> Self {
        let m = c.world_to_camera.matrix3;
        let t = c.world_to_camera.translation;
        let world_to_camera = core::array::from_fn(|r| [m.col(0)[r], m.col(1)[r], m.col(2)[r], t[r]]);
        Self { fx: c.fx, fy: c.fy, cx: c.cx, cy: c.cy, width: c.width, height: c.height, world_to_camera }
    }
}

impl CameraJson {
    pub fn to_camera(&self) -> Result<Camera, String> {
        let m = &self.world_to_camera;
        let rows: Vec<DVec3> = m.iter().map(|r| DVec3::new(r[0], r[1], r[2])).collect();
        let rot = DMat3::from_cols(rows[0], rows[1], rows[2]).transpose();
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().chain(m.iter().flatten()).all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.width == 0 || self.height == 0 {
            return Err("camera intrinsics must be finite and positive".into());
        }
        if !(rot * rot.transpose()).abs_diff_eq(DMat3::IDENTITY, 1e-6) {
            return Err("world_to_camera rotation is not orthonormal".into());
        }
        Ok(Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            width: self.width,
            height: self.height,
            world_to_camera: DAffine3::from_mat3_translation(rot, DVec3::new(m[0][3], m[1][3], m[2][3])),
        })
    }
}

/// Axis-angle joint rotations and root translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub rotations: Vec<[f32; 3]>,
    pub root_translation: [f32; 3],
}

impl From<&Pose> for PoseJson {
    fn from(p: &Pose) -> Self {
        Self { rotations: p.rotations.clone(), root_translation: p.root_translation }
    }
}

impl From<PoseJson> for Pose {
    fn from(p: PoseJson) -> Self {
        Pose { rotations: p.rotations, root_translation: p.root_translation }
    }
}

/// Parent index per bone (`-1` for the root), joint offsets and rest pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonJson {
    pub parents: Vec<i32>,
    pub offsets: Vec<[f32; 3]>,
    pub rest_pose: PoseJson,
}

impl From<&Skeleton> for SkeletonJson {
    fn from(s: &Skeleton) -> Self {
        Self {
            parents: s.parents().iter().map(|p| p.map_or(-1, i32::from)).collect(),
            offsets: s.offsets().to_vec(),
            rest_pose: s.rest_pose().into(),
        }
    }
}

impl SkeletonJson {
    pub fn to_skeleton(&self) -> Result<Skeleton, String> {
        let parents = self
            .parents
            .iter()
            .map(|p| match *p {
                -1 => Ok(None),
                p => u16::try_from(p).map(Some).map_err(|_| format!("bad parent index {p}")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Skeleton::new(parents, self.offsets.clone(), self.rest_pose.clone().into()).map_err(|e| e.to_string())
    }
}

pub fn image_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("images").join(format!("{frame:06}.png"))
}

pub fn mask_path(dir: &Path, frame: usize) -> PathBuf {
    dir.join("masks").join(format!("{frame:06}.png"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), DatasetError> {
    let s = serde_json::to_string_pretty(v).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })?;
    write(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, DatasetError> {
    let bytes = fs::read(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_slice(&bytes).map_err(|source| DatasetError::Json { path: path.to_path_buf(), source })
}

/// Writes every file of the layout. Images are quantized to 8 bits.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<(), DatasetError> {
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|source| DatasetError::Io { path: p, source })?;
    }
    let frames = data.frames();
    let cams: Vec<CameraJson> = frames.iter().map(|f| CameraJson::from(&f.camera)).collect();
    write_json(&dir.join(CAMERAS), &cams)?;
    write_json(&dir.join(SKELETON), &SkeletonJson::from(data.skeleton()))?;
    write(&dir.join(TEMPLATE), &mesh_to_bytes(data.template()))?;
    let poses: Vec<PoseJson> = frames.iter().map(|f| PoseJson::from(&f.pose)).collect();
    write_json(&dir.join(POSES), &poses)?;
    let (w, h) = (data.width(), data.height());
    for (i, f) in frames.iter().enumerate() {
        let p = image_path(dir, i);
        save_rgb(&p, w, h, &f.image).map_err(|e| DatasetError::invalid(&p, e))?;
        let p = mask_path(dir, i);
        save_mask(&p, w, h, &f.mask).map_err(|e| DatasetError::invalid(&p, e))?;
    }
    Ok(())
}

/// Reads and validates a dataset directory.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let cam_path = dir.join(CAMERAS);
    let cams: Vec<CameraJson> = read_json(&cam_path)?;
    let skel_path = dir.join(SKELETON);
    let skeleton = read_json::<SkeletonJson>(&skel_path)?.to_skeleton().map_err(|e| DatasetError::invalid(&skel_path, e))?;
    let tmpl_path = dir.join(TEMPLATE);
    let bytes = fs::read(&tmpl_path).map_err(|source| DatasetError::Io { path: tmpl_path.clone(), source })?;
    let template: SkinnedTemplate =
        mesh_from_bytes(&bytes, skeleton.bone_count()).map_err(|e| DatasetError::invalid(&tmpl_path, e))?;
    let pose_path = dir.join(POSES);
    let poses: Vec<PoseJson> = read_json(&pose_path)?;
    if poses.len() != cams.len() {
        return Err(DatasetError::invalid(&pose_path, format!("{} poses for {} cameras", poses.len(), cams.len())));
    }
    let mut frames = Vec::with_capacity(cams.len());
    for (i, (c, p)) in cams.iter().zip(poses).enumerate() {
        let camera = c.to_camera().map_err(|e| DatasetError::invalid(&cam_path, format!("frame {i}: {e}")))?;
        let pose: Pose = p.into();
        skeleton.check_pose(&pose).map_err(|e| DatasetError::invalid(&pose_path, format!("frame {i}: {e}")))?;
        let ip = image_path(dir, i);
        let image = load_rgb(&ip, camera.width, camera.height).map_err(|e| DatasetError::invalid(&ip, e))?;
        let mp = mask_path(dir, i);
        let mask = load_mask(&mp, camera.width, camera.height).map_err(|e| DatasetError::invalid(&mp, e))?;
        frames.push(Frame { image, mask, camera, pose });
    }
    Dataset::new(frames, skeleton, template).map_err(|e| DatasetError::invalid(dir, e))
}
